use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// A labeled / unlabeled partition of sample ids.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitSpec {
    pub fraction: f64,
    pub seed: u64,
    pub labeled: Vec<String>,
    pub unlabeled: Vec<String>,
}

/// Accepts `a/b` or a decimal; the result must lie in `(0, 1]`.
pub fn parse_fraction(s: &str) -> Result<f64> {
    let bad = || Error::Config(format!("fraction {s:?} is not a number in (0, 1]"));
    let v = match s.split_once('/') {
        Some((n, d)) => {
            let n: f64 = n.trim().parse().map_err(|_| bad())?;
            let d: f64 = d.trim().parse().map_err(|_| bad())?;
            n / d
        }
        None => s.trim().parse().map_err(|_| bad())?,
    };
    if v > 0.0 && v <= 1.0 {
        Ok(v)
    } else {
        Err(bad())
    }
}

/// Shortest decimal that reads back as `fraction`, e.g. `0.125`.
pub fn fraction_label(fraction: f64) -> String {
    format!("{fraction}")
}

/// Seeded shuffle, then the first `round(fraction·n)` ids are labeled.
pub fn make_split(ids: &[String], fraction: f64, seed: u64) -> Result<SplitSpec> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("fraction {fraction} outside (0, 1]")));
    }
    let mut shuffled = ids.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let m = (fraction * ids.len() as f64).round() as usize;
    let unlabeled = shuffled.split_off(m);
    Ok(SplitSpec {
        fraction,
        seed,
        labeled: shuffled,
        unlabeled,
    })
}

impl SplitSpec {
    pub fn file_name(&self) -> String {
        format!("split_{}_{}.txt", fraction_label(self.fraction), self.seed)
    }

    pub fn path_in(&self, dir: &Path) -> PathBuf {
        dir.join(self.file_name())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("labeled:\n");
        for id in &self.labeled {
            writeln!(s, "{id}").unwrap();
        }
        s.push_str("unlabeled:\n");
        for id in &self.unlabeled {
            writeln!(s, "{id}").unwrap();
        }
        s
    }

    /// Parse the two-section text; `fraction` and `seed` are taken from the
    /// caller since the file body does not carry them.
    pub fn from_text(text: &str, fraction: f64, seed: u64) -> Result<Self> {
        let mut labeled = Vec::new();
        let mut unlabeled = Vec::new();
        let mut section: Option<&mut Vec<String>> = None;
        let mut offset = 0;
        for line in text.split_inclusive('\n') {
            let trimmed = line.trim();
            match trimmed {
                "" => {}
                "labeled:" => section = Some(&mut labeled),
                "unlabeled:" => section = Some(&mut unlabeled),
                id => match section.as_deref_mut() {
                    Some(list) => list.push(id.to_string()),
                    None => {
                        return Err(Error::Format {
                            format: "split",
                            offset,
                            reason: format!("id {id:?} before any section header"),
                        })
                    }
                },
            }
            offset += line.len();
        }
        let spec = SplitSpec {
            fraction,
            seed,
            labeled,
            unlabeled,
        };
        if let Some(dup) = spec.labeled.iter().find(|id| spec.unlabeled.contains(id)) {
            return Err(Error::Format {
                format: "split",
                offset: 0,
                reason: format!("id {dup:?} is both labeled and unlabeled"),
            });
        }
        Ok(spec)
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        let path = self.path_in(dir);
        std::fs::write(&path, self.to_text())?;
        Ok(path)
    }

    /// Read a split file; fraction and seed are recovered from its name when
    /// it follows the `split_<fraction>_<seed>.txt` pattern.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let (fraction, seed) = path
            .file_stem()
            .and_then(|s| s.to_str())
            .and_then(|s| s.strip_prefix("split_"))
            .and_then(|s| s.rsplit_once('_'))
            .and_then(|(f, s)| Some((f.parse().ok()?, s.parse().ok()?)))
            .unwrap_or((f64::NAN, 0));
        Self::from_text(&text, fraction, seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("img_{i:05}")).collect()
    }

    #[test]
    fn half_of_sixteen() {
        let s = make_split(&ids(16), 0.5, 3).unwrap();
        assert_eq!(s.labeled.len(), 8);
        assert_eq!(s.unlabeled.len(), 8);
    }

    #[test]
    fn eighth_of_sixty_four() {
        let s = make_split(&ids(64), parse_fraction("1/8").unwrap(), 7).unwrap();
        assert_eq!(s.labeled.len(), 8);
        assert_eq!(s.file_name(), "split_0.125_7.txt");
    }

    #[test]
    fn fractions() {
        assert_eq!(parse_fraction("1/16").unwrap(), 0.0625);
        assert_eq!(parse_fraction("0.25").unwrap(), 0.25);
        assert_eq!(parse_fraction("1").unwrap(), 1.0);
        for bad in ["0", "3/2", "x", "1/0", "-0.5"] {
            assert!(parse_fraction(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = make_split(&ids(10), 0.25, 1).unwrap();
        let path = s.save(dir.path()).unwrap();
        assert_eq!(SplitSpec::load(&path).unwrap(), s);
        assert!(SplitSpec::from_text("img_1\nlabeled:\n", 0.5, 0).is_err());
        assert!(SplitSpec::from_text("labeled:\na\nunlabeled:\na\n", 0.5, 0).is_err());
    }

    proptest! {
        #[test]
        fn disjoint_complete_and_seeded(n in 1usize..60, num in 1usize..16, seed in 0u64..100) {
            let f = num as f64 / 16.0;
            let all = ids(n);
            let s = make_split(&all, f, seed).unwrap();
            prop_assert_eq!(s.labeled.len(), (f * n as f64).round() as usize);
            let mut union: Vec<String> = s.labeled.iter().chain(&s.unlabeled).cloned().collect();
            union.sort();
            prop_assert_eq!(&union, &all);
            prop_assert!(s.labeled.iter().all(|id| !s.unlabeled.contains(id)));
            prop_assert_eq!(make_split(&all, f, seed).unwrap(), s);
        }
    }
}
