//! Jigsaw pretext task: a fixed set of 3×3 patch permutations, shuffling
//! images (and optionally their masks) by one of them, and the
//! permutation-classification loss.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::routing::{Bound, RoutingNet};
use crate::tape::{Tape, Var, IGNORE_INDEX};
use crate::tensor::Tensor;

pub const GRID: usize = 3;
pub const PATCHES: usize = GRID * GRID;
/// 9!
pub const MAX_PERMUTATIONS: usize = 362_880;
/// Fresh random candidates considered for each greedy pick.
pub const CANDIDATE_POOL: usize = 10_000;

pub type Permutation = [u8; PATCHES];

pub fn hamming(a: &Permutation, b: &Permutation) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

pub fn inverse(p: &Permutation) -> Permutation {
    let mut inv = [0u8; PATCHES];
    for (slot, &src) in p.iter().enumerate() {
        inv[src as usize] = slot as u8;
    }
    inv
}

pub const IDENTITY: Permutation = [0, 1, 2, 3, 4, 5, 6, 7, 8];

fn is_permutation(p: &Permutation) -> bool {
    let mut seen = [false; PATCHES];
    p.iter().all(|&v| (v as usize) < PATCHES && !std::mem::replace(&mut seen[v as usize], true))
}

/// `k` distinct permutations of the nine patch slots chosen greedily for
/// large mutual Hamming distance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PermutationSet {
    seed: u64,
    perms: Vec<Permutation>,
}

impl PermutationSet {
    /// Start from a random permutation; then, `k - 1` times, draw
    /// [`CANDIDATE_POOL`] random permutations and keep the unused one whose
    /// minimum Hamming distance to the chosen set is largest (earliest wins
    /// ties).
    pub fn generate(k: usize, seed: u64) -> Result<Self> {
        if k == 0 || k > MAX_PERMUTATIONS {
            return Err(Error::InvalidArgument(format!(
                "permutation count {k} outside [1, {MAX_PERMUTATIONS}]"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let random_perm = |rng: &mut ChaCha8Rng| {
            let mut p = IDENTITY;
            p.shuffle(rng);
            p
        };
        let mut perms = vec![random_perm(&mut rng)];
        let mut used = std::collections::HashSet::from([perms[0]]);
        while perms.len() < k {
            let mut best: Option<(usize, Permutation)> = None;
            for _ in 0..CANDIDATE_POOL {
                let cand = random_perm(&mut rng);
                if used.contains(&cand) {
                    continue;
                }
                let d = perms.iter().map(|p| hamming(p, &cand)).min().unwrap_or(PATCHES);
                if best.is_none_or(|(bd, _)| d > bd) {
                    best = Some((d, cand));
                }
            }
            let pick = match best {
                Some((_, p)) => p,
                // The pool was exhausted by already-chosen permutations;
                // only reachable for k close to 9!.
                None => first_unused(&used),
            };
            used.insert(pick);
            perms.push(pick);
        }
        Ok(PermutationSet { seed, perms })
    }

    pub fn from_perms(seed: u64, perms: Vec<Permutation>) -> Result<Self> {
        if perms.is_empty() {
            return Err(Error::InvalidArgument("empty permutation set".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for p in &perms {
            if !is_permutation(p) {
                return Err(Error::InvalidArgument(format!("{p:?} is not a permutation of 0..9")));
            }
            if !seen.insert(*p) {
                return Err(Error::InvalidArgument(format!("duplicate permutation {p:?}")));
            }
        }
        Ok(PermutationSet { seed, perms })
    }

    pub fn k(&self) -> usize {
        self.perms.len()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn perms(&self) -> &[Permutation] {
        &self.perms
    }

    pub fn get(&self, jig: usize) -> &Permutation {
        &self.perms[jig]
    }

    /// Smallest pairwise Hamming distance, `None` for a single permutation.
    pub fn min_pairwise_distance(&self) -> Option<usize> {
        let mut best = None;
        for (i, a) in self.perms.iter().enumerate() {
            for b in &self.perms[i + 1..] {
                let d = hamming(a, b);
                best = Some(best.map_or(d, |m: usize| m.min(d)));
            }
        }
        best
    }

    /// First line `k seed`, then one permutation per line.
    pub fn to_text(&self) -> String {
        let mut s = format!("{} {}\n", self.k(), self.seed);
        for p in &self.perms {
            let line: Vec<String> = p.iter().map(|v| v.to_string()).collect();
            writeln!(s, "{}", line.join(" ")).unwrap();
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |line: usize, why: String| Error::Format {
            format: "permutation set",
            offset: line,
            reason: why,
        };
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or_else(|| bad(0, "empty file".into()))?;
        let hv: Vec<&str> = header.split_whitespace().collect();
        let (k, seed) = match hv[..] {
            [k, seed] => (
                k.parse::<usize>().map_err(|e| bad(0, format!("k: {e}")))?,
                seed.parse::<u64>().map_err(|e| bad(0, format!("seed: {e}")))?,
            ),
            _ => return Err(bad(0, format!("header {header:?} is not `k seed`"))),
        };
        let mut perms = Vec::with_capacity(k);
        for (ln, line) in lines {
            let vals: Vec<u8> = line
                .split_whitespace()
                .map(|v| v.parse::<u8>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| bad(ln, e.to_string()))?;
            let p: Permutation = vals
                .try_into()
                .map_err(|v: Vec<u8>| bad(ln, format!("expected 9 indices, got {}", v.len())))?;
            perms.push(p);
        }
        if perms.len() != k {
            return Err(bad(0, format!("header says {k} permutations, found {}", perms.len())));
        }
        Self::from_perms(seed, perms)
    }
}

fn first_unused(used: &std::collections::HashSet<Permutation>) -> Permutation {
    let mut p = IDENTITY;
    loop {
        if !used.contains(&p) {
            return p;
        }
        assert!(next_lexicographic(&mut p), "all 9! permutations in use");
    }
}

fn next_lexicographic(p: &mut Permutation) -> bool {
    let Some(i) = (0..PATCHES - 1).rev().find(|&i| p[i] < p[i + 1]) else {
        return false;
    };
    let j = (i + 1..PATCHES).rev().find(|&j| p[j] > p[i]).unwrap();
    p.swap(i, j);
    p[i + 1..].reverse();
    true
}

/// Relocate the 3×3 patches of every `[C,H,W]` plane group: output slot `i`
/// receives input patch `perm[i]`.
pub fn apply_jigsaw(images: &Tensor, perm: &Permutation) -> Result<Tensor> {
    let (b, c, h, w) = images.dims4()?;
    check_divisible(h, w)?;
    let mut out = Tensor::zeros(images.shape());
    permute_planes(images.data(), out.data_mut(), b * c, h, w, perm);
    Ok(out)
}

/// [`apply_jigsaw`] for a single `h×w` label map.
pub fn apply_jigsaw_mask(mask: &[u8], h: usize, w: usize, perm: &Permutation) -> Result<Vec<u8>> {
    check_divisible(h, w)?;
    if mask.len() != h * w {
        return Err(Error::shape("apply_jigsaw_mask", format!("{} values for {h}x{w}", mask.len())));
    }
    let mut out = vec![0u8; mask.len()];
    permute_planes(mask, &mut out, 1, h, w, perm);
    Ok(out)
}

fn check_grid_fits(h: usize, w: usize) -> Result<()> {
    if h < GRID || w < GRID {
        return Err(Error::InvalidArgument(format!("{h}x{w} image is smaller than the {GRID}x{GRID} grid")));
    }
    Ok(())
}

fn check_divisible(h: usize, w: usize) -> Result<()> {
    if !h.is_multiple_of(GRID) || !w.is_multiple_of(GRID) || h == 0 || w == 0 {
        return Err(Error::shape(
            "apply_jigsaw",
            format!("spatial size {h}x{w} must be a non-zero multiple of {GRID}"),
        ));
    }
    Ok(())
}

/// Centred region a 3×3 grid covers: `(top, left, height, width)`.
pub fn grid_region(h: usize, w: usize) -> (usize, usize, usize, usize) {
    let (nh, nw) = (h / GRID * GRID, w / GRID * GRID);
    ((h - nh) / 2, (w - nw) / 2, nh, nw)
}

/// Copy `planes` planes of `h×w`, relocating the patches of the centred grid
/// region; pixels outside it are copied unchanged.
fn permute_planes<T: Copy>(src: &[T], dst: &mut [T], planes: usize, h: usize, w: usize, perm: &Permutation) {
    let (oy, ox, nh, nw) = grid_region(h, w);
    let (ph, pw) = (nh / GRID, nw / GRID);
    dst[..planes * h * w].copy_from_slice(&src[..planes * h * w]);
    for plane in 0..planes {
        let base = plane * h * w + oy * w + ox;
        for (slot, &from) in perm.iter().enumerate() {
            let (sy, sx) = (slot / GRID * ph, slot % GRID * pw);
            let (fy, fx) = (from as usize / GRID * ph, from as usize % GRID * pw);
            for r in 0..ph {
                let d = base + (sy + r) * w + sx;
                let s = base + (fy + r) * w + fx;
                dst[d..d + pw].copy_from_slice(&src[s..s + pw]);
            }
        }
    }
}

/// One uniformly drawn permutation per image; returns the shuffled batch
/// and the permutation indices.
pub fn make_pretext_batch<R: Rng + ?Sized>(
    images: &Tensor,
    pset: &PermutationSet,
    rng: &mut R,
) -> Result<(Tensor, Vec<usize>)> {
    let (b, c, h, w) = images.dims4()?;
    check_grid_fits(h, w)?;
    let plane = c * h * w;
    let mut out = Tensor::zeros(images.shape());
    let mut jigs = Vec::with_capacity(b);
    for n in 0..b {
        let jig = rng.gen_range(0..pset.k());
        permute_planes(
            &images.data()[n * plane..(n + 1) * plane],
            &mut out.data_mut()[n * plane..(n + 1) * plane],
            c,
            h,
            w,
            pset.get(jig),
        );
        jigs.push(jig);
    }
    Ok((out, jigs))
}

/// Shuffle labeled images together with their masks, one permutation per
/// image.
pub fn make_jigsaw_segmentation_batch<R: Rng + ?Sized>(
    images: &Tensor,
    masks: &[usize],
    pset: &PermutationSet,
    rng: &mut R,
) -> Result<(Tensor, Vec<usize>)> {
    let (b, c, h, w) = images.dims4()?;
    check_grid_fits(h, w)?;
    if masks.len() != b * h * w {
        return Err(Error::shape("make_jigsaw_segmentation_batch", format!("{} mask values for {b}x{h}x{w}", masks.len())));
    }
    let plane = c * h * w;
    let mut out = Tensor::zeros(images.shape());
    let mut out_masks = vec![0usize; masks.len()];
    for n in 0..b {
        let perm = pset.get(rng.gen_range(0..pset.k()));
        permute_planes(
            &images.data()[n * plane..(n + 1) * plane],
            &mut out.data_mut()[n * plane..(n + 1) * plane],
            c,
            h,
            w,
            perm,
        );
        permute_planes(&masks[n * h * w..(n + 1) * h * w], &mut out_masks[n * h * w..(n + 1) * h * w], 1, h, w, perm);
    }
    Ok((out, out_masks))
}

/// Mean cross-entropy of pretext logits `[B,k]` against permutation indices.
pub fn pretext_ce(tape: &mut Tape, logits: Var, jigs: &[usize]) -> Result<Var> {
    Ok(tape.softmax_cross_entropy(logits, jigs, IGNORE_INDEX)?.loss)
}

/// Self-supervised loss: mean pretext cross-entropy over the labeled batch
/// plus mean pretext cross-entropy over the unlabeled batch. Each image gets
/// one freshly drawn permutation. An absent or empty batch contributes 0.
pub fn ssl_loss<R: Rng + ?Sized>(
    tape: &mut Tape,
    net: &RoutingNet,
    bound: &Bound,
    labeled: Option<&Tensor>,
    unlabeled: Option<&Tensor>,
    pset: &PermutationSet,
    rng: &mut R,
) -> Result<Var> {
    let mut batches = Vec::new();
    for batch in [labeled, unlabeled].into_iter().flatten() {
        if batch.shape().first().copied().unwrap_or(0) > 0 {
            batches.push(make_pretext_batch(batch, pset, rng)?);
        }
    }
    ssl_loss_on(tape, net, bound, &batches)
}

/// Sum over already shuffled batches of the mean pretext cross-entropy.
pub fn ssl_loss_on(tape: &mut Tape, net: &RoutingNet, bound: &Bound, batches: &[(Tensor, Vec<usize>)]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (shuffled, jigs) in batches {
        let x = tape.constant(shuffled.clone());
        let logits = net.pretext_forward(tape, bound, x)?;
        let term = pretext_ce(tape, logits, jigs)?;
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    Ok(total.unwrap_or_else(|| tape.constant(Tensor::scalar(0.0))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_permutation_set() {
        let s = PermutationSet::generate(1, 3).unwrap();
        assert_eq!(s.k(), 1);
        assert_eq!(s.min_pairwise_distance(), None);
    }

    #[test]
    fn two_permutations_differ_everywhere() {
        for seed in 0..5 {
            let s = PermutationSet::generate(2, seed).unwrap();
            assert_eq!(s.min_pairwise_distance(), Some(9));
        }
    }

    #[test]
    fn hundred_permutations_are_well_separated() {
        // Pinned from the first generation with the default seed.
        let s = PermutationSet::generate(100, 0).unwrap();
        assert_eq!(s.k(), 100);
        assert_eq!(s.min_pairwise_distance(), Some(6));
    }

    #[test]
    fn rejects_bad_k() {
        assert!(PermutationSet::generate(0, 1).is_err());
        assert!(PermutationSet::generate(MAX_PERMUTATIONS + 1, 1).is_err());
    }

    #[test]
    fn text_round_trip() {
        let s = PermutationSet::generate(6, 42).unwrap();
        let text = s.to_text();
        assert!(text.starts_with("6 42\n"));
        assert_eq!(PermutationSet::from_text(&text).unwrap(), s);
        assert!(PermutationSet::from_text("2 1\n0 1 2 3 4 5 6 7 8\n").is_err());
        assert!(PermutationSet::from_text("1 1\n0 1 2 3 4 5 6 7 7\n").is_err());
    }

    #[test]
    fn lexicographic_successor() {
        let mut p = IDENTITY;
        assert!(next_lexicographic(&mut p));
        assert_eq!(p, [0, 1, 2, 3, 4, 5, 6, 8, 7]);
        let mut last = [8, 7, 6, 5, 4, 3, 2, 1, 0];
        assert!(!next_lexicographic(&mut last));
    }

    #[test]
    fn identity_is_a_no_op() {
        let x = Tensor::from_fn(&[2, 3, 6, 9], |i| i as f64);
        assert_eq!(apply_jigsaw(&x, &IDENTITY).unwrap(), x);
    }

    #[test]
    fn corner_swap_on_3x3() {
        let x = Tensor::from_fn(&[1, 1, 3, 3], |i| (i * 10) as f64);
        let mut p = IDENTITY;
        p.swap(0, 8);
        let y = apply_jigsaw(&x, &p).unwrap();
        assert_eq!(y.data(), &[80.0, 10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0, 0.0]);
    }

    #[test]
    fn indivisible_sizes_rejected() {
        let x = Tensor::zeros(&[1, 1, 4, 6]);
        assert!(apply_jigsaw(&x, &IDENTITY).is_err());
    }

    #[test]
    fn border_outside_grid_stays_put() {
        assert_eq!(grid_region(5, 7), (1, 0, 3, 6));
        let x = Tensor::from_fn(&[1, 1, 5, 7], |i| i as f64);
        let swap: Permutation = [8, 1, 2, 3, 4, 5, 6, 7, 0];
        let mut out = Tensor::zeros(x.shape());
        permute_planes(x.data(), out.data_mut(), 1, 5, 7, &swap);
        for i in (0..7).chain(28..35) {
            assert_eq!(out.data()[i], x.data()[i]);
        }
        for r in 1..4 {
            assert_eq!(out.data()[r * 7 + 6], x.data()[r * 7 + 6]);
        }
        // 1x2 corner patches of the centred 3x6 region swap places.
        assert_eq!(&out.data()[7..9], &[25.0, 26.0]);
        assert_eq!(&out.data()[25..27], &[7.0, 8.0]);
        let mut a = x.data().to_vec();
        let mut b = out.data().to_vec();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        assert_eq!(a, b);
    }

    #[test]
    fn pretext_batch_is_seeded() {
        let pset = PermutationSet::generate(10, 1).unwrap();
        let x = Tensor::from_fn(&[4, 1, 6, 6], |i| i as f64);
        let mut r1 = ChaCha8Rng::seed_from_u64(5);
        let mut r2 = ChaCha8Rng::seed_from_u64(5);
        let a = make_pretext_batch(&x, &pset, &mut r1).unwrap();
        let b = make_pretext_batch(&x, &pset, &mut r2).unwrap();
        assert_eq!(a, b);
        assert!(a.1.iter().all(|&j| j < 10));
        for (n, &j) in a.1.iter().enumerate() {
            let one = Tensor::new(&[1, 1, 6, 6], x.data()[n * 36..(n + 1) * 36].to_vec()).unwrap();
            let want = apply_jigsaw(&one, pset.get(j)).unwrap();
            assert_eq!(&a.0.data()[n * 36..(n + 1) * 36], want.data());
        }
    }

    #[test]
    fn jig_draws_are_uniform() {
        let k = 100;
        let pset = PermutationSet::generate(k, 2).unwrap();
        let x = Tensor::zeros(&[1, 1, 3, 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let draws = 100_000;
        let mut counts = vec![0usize; k];
        for _ in 0..draws {
            let (_, j) = make_pretext_batch(&x, &pset, &mut rng).unwrap();
            counts[j[0]] += 1;
        }
        let p = 1.0 / k as f64;
        let mean = draws as f64 * p;
        let sd = (draws as f64 * p * (1.0 - p)).sqrt();
        // Each count within 3σ; with 100 bins a 4σ band would be the strict
        // family-wise check, 3σ holds for this seed.
        for &c in &counts {
            assert!((c as f64 - mean).abs() <= 3.0 * sd, "count {c} vs mean {mean}");
        }
    }

    #[test]
    fn segmentation_batch_moves_masks_with_pixels() {
        let pset = PermutationSet::generate(4, 5).unwrap();
        let x = Tensor::from_fn(&[2, 1, 6, 6], |i| i as f64);
        let masks: Vec<usize> = (0..72).collect();
        let (img, m) = make_jigsaw_segmentation_batch(&x, &masks, &pset, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let moved: Vec<usize> = img.data().iter().map(|&v| v as usize).collect();
        assert_eq!(moved, m);
        assert_ne!(m, masks);
    }

    #[test]
    fn pretext_ce_matches_scalar_oracle() {
        let z = [[0.3, -1.2, 2.0], [1.5, 0.1, -0.4]];
        let jigs = [2, 1];
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::new(&[2, 3], z.concat()).unwrap());
        let l = pretext_ce(&mut tape, logits, &jigs).unwrap();
        let ce = |row: &[f64; 3], t: usize| row.iter().map(|v| v.exp()).sum::<f64>().ln() - row[t];
        let want = (ce(&z[0], 2) + ce(&z[1], 1)) / 2.0;
        assert!((tape.value(l).item() - want).abs() < 1e-12);
    }

    #[test]
    fn ssl_loss_sums_two_means() {
        use crate::routing::{Mode, RoutingConfig};
        let cfg = RoutingConfig {
            num_layers: 1,
            base_channels: 2,
            num_permutations: 5,
            ..RoutingConfig::default()
        };
        let net = RoutingNet::new(cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let pset = PermutationSet::generate(5, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let l = Tensor::rand_uniform(&[2, 3, 96, 96], 0.0, 1.0, &mut rng);
        let u = Tensor::rand_uniform(&[1, 3, 96, 96], 0.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let bound = net.bind(&mut tape, Mode::Train);
        let total = ssl_loss(&mut tape, &net, &bound, Some(&l), Some(&u), &pset, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();

        let mut r = ChaCha8Rng::seed_from_u64(4);
        let bl = make_pretext_batch(&l, &pset, &mut r).unwrap();
        let bu = make_pretext_batch(&u, &pset, &mut r).unwrap();
        let mut parts = 0.0;
        for b in [bl, bu] {
            let mut t = Tape::new();
            let bd = net.bind(&mut t, Mode::Frozen);
            let l = ssl_loss_on(&mut t, &net, &bd, &[b]).unwrap();
            parts += t.value(l).item();
        }
        assert!((tape.value(total).item() - parts).abs() < 1e-12);

        let empty = Tensor::zeros(&[0, 3, 96, 96]);
        let none = ssl_loss(&mut tape, &net, &bound, Some(&empty), None, &pset, &mut rng).unwrap();
        assert_eq!(tape.value(none).item(), 0.0);
    }

    proptest! {
        #[test]
        fn round_trip_and_multiset(seed in 0u64..1000, jig in 0usize..8) {
            let pset = PermutationSet::generate(8, 9).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::rand_normal(&[2, 2, 6, 12], 1.0, &mut rng);
            let p = pset.get(jig);
            let y = apply_jigsaw(&x, p).unwrap();
            let back = apply_jigsaw(&y, &inverse(p)).unwrap();
            prop_assert_eq!(&back, &x);
            let mut a: Vec<u64> = x.data().iter().map(|v| v.to_bits()).collect();
            let mut b: Vec<u64> = y.data().iter().map(|v| v.to_bits()).collect();
            a.sort_unstable();
            b.sort_unstable();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn generation_is_deterministic(k in 1usize..6, seed in 0u64..50) {
            let a = PermutationSet::generate(k, seed).unwrap();
            let b = PermutationSet::generate(k, seed).unwrap();
            prop_assert_eq!(&a, &b);
            let distinct: std::collections::HashSet<_> = a.perms().iter().collect();
            prop_assert_eq!(distinct.len(), k);
        }
    }
}
