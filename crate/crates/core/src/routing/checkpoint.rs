//! Binary checkpoint format.
//!
//! ```text
//! "SELN"                       4 bytes
//! version                      u32
//! num_layers, num_levels,
//! base_channels, num_classes,
//! num_permutations, in_channels  u32 each
//! gate_threshold               f64
//! tensor count                 u32
//! per tensor:
//!   name length                u32
//!   name                       UTF-8 bytes
//!   rank                       u32
//!   extents                    u64 × rank
//!   values                     f64 × product(extents)
//! ```
//!
//! All integers and floats are little-endian.

use std::io::{Read, Write};
use std::path::Path;

use super::{RoutingConfig, RoutingNet};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SELN";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A routing configuration plus any number of named tensors. Networks are
/// stored under their parameter names, optionally behind a prefix such as
/// `teacher/`.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RoutingConfig,
    pub tensors: Vec<(String, Tensor)>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.err(format!("truncated while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn err(&self, reason: String) -> Error {
        Error::Format {
            format: "checkpoint",
            offset: self.pos,
            reason,
        }
    }
}

impl Checkpoint {
    pub fn from_net(net: &RoutingNet) -> Self {
        Checkpoint {
            config: net.config().clone(),
            tensors: net.named_tensors(),
        }
    }

    /// Append a network's parameters under `prefix`.
    pub fn add_net(&mut self, prefix: &str, net: &RoutingNet) {
        self.tensors.extend(
            net.named_tensors()
                .into_iter()
                .map(|(n, t)| (format!("{prefix}{n}"), t)),
        );
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Rebuild the network stored without a prefix.
    pub fn to_net(&self) -> Result<RoutingNet> {
        self.net_with_prefix("")
    }

    pub fn net_with_prefix(&self, prefix: &str) -> Result<RoutingNet> {
        // Weights are overwritten, so the init RNG is irrelevant.
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut net = RoutingNet::new(self.config.clone(), &mut rng)?;
        net.load_named(prefix, &self.tensors)?;
        Ok(net)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let c = &self.config;
        for v in [
            c.num_layers,
            c.num_levels,
            c.base_channels,
            c.num_classes,
            c.num_permutations,
            c.in_channels,
        ] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&c.gate_threshold.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &e in t.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Format {
                format: "checkpoint",
                offset: 0,
                reason: format!("bad magic {magic:?}, expected \"SELN\""),
            });
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format {
                format: "checkpoint",
                offset: 4,
                reason: format!("unsupported version {version}"),
            });
        }
        let mut f = [0usize; 6];
        for v in f.iter_mut() {
            *v = r.u32("config")? as usize;
        }
        let config = RoutingConfig {
            num_layers: f[0],
            num_levels: f[1],
            base_channels: f[2],
            num_classes: f[3],
            num_permutations: f[4],
            in_channels: f[5],
            gate_threshold: r.f64("gate_threshold")?,
        };
        config.validate().map_err(|e| Error::Format {
            format: "checkpoint",
            offset: 8,
            reason: e.to_string(),
        })?;
        let count = r.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|e| r.err(format!("tensor name is not UTF-8: {e}")))?
                .to_string();
            let rank = r.u32("rank")? as usize;
            let mut shape = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                shape.push(r.u64("extent")? as usize);
            }
            let n = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e));
            let n = n
                .filter(|n| n.checked_mul(8).is_some_and(|b| b <= buf.len() - r.pos))
                .ok_or_else(|| r.err(format!("tensor {name} extents {shape:?} exceed the file")))?;
            let data = (0..n).map(|_| r.f64("values")).collect::<Result<Vec<_>>>()?;
            tensors.push((name, Tensor::new(&shape, data)?));
        }
        if r.pos != buf.len() {
            return Err(r.err(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(Checkpoint { config, tensors })
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net() -> RoutingNet {
        let cfg = RoutingConfig {
            num_layers: 2,
            base_channels: 4,
            num_permutations: 7,
            gate_threshold: 0.25,
            ..RoutingConfig::default()
        };
        RoutingNet::new(cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let n = net();
        let bytes = Checkpoint::from_net(&n).to_bytes();
        assert_eq!(&bytes[..4], b"SELN");
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        let n2 = back.to_net().unwrap();
        assert_eq!(n2.params(), n.params());
        assert_eq!(n2.config(), n.config());
    }

    #[test]
    fn prefixed_nets_load_separately() {
        let a = net();
        let mut b = net();
        b.params_mut().iter_mut().for_each(|p| p.value.scale_assign(2.0));
        let mut ck = Checkpoint::from_net(&a);
        ck.add_net("teacher/", &b);
        let ck = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(ck.to_net().unwrap().params(), a.params());
        assert_eq!(ck.net_with_prefix("teacher/").unwrap().params(), b.params());
    }

    #[test]
    fn corrupt_inputs_report_offsets() {
        let bytes = Checkpoint::from_net(&net()).to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format { offset: 0, .. })));
        let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }
}
