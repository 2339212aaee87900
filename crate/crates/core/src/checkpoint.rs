//! Binary checkpoints.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! b"GACCKPT1"
//! u32 digest length, digest bytes (hex SHA-256 of the model config)
//! u32 entry count
//! per entry: u32 name length, name, u32 rank, rank x u64 extents,
//!            product(extents) x f64
//! ```
//!
//! Entries are namespaced: `g/`, `d/`, `c/` hold network parameters,
//! `opt/<net>/...` optimizer state and `meta/` counters. Integer metadata is
//! stored bit-cast into f64 so the whole file is one entry list.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::models::{Classifier, Discriminator, Generator, ModelConfig};
use crate::optim::{Optimizer, OptimizerKind};
use crate::params::ParamSet;

pub const MAGIC: &[u8; 8] = b"GACCKPT1";

pub const NETS: [&str; 3] = ["g", "d", "c"];

/// Networks, optimizer state and counters of a (possibly partial) run.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config_digest: String,
    pub epoch: u64,
    pub step: u64,
    pub seed: u64,
    /// Keyed by `g`, `d` or `c`.
    pub nets: IndexMap<String, ParamSet>,
    pub optimizers: IndexMap<String, Optimizer>,
}

struct Entry {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn template(net: &str, cfg: &ModelConfig) -> Result<ParamSet> {
    match net {
        "g" => Generator::new(cfg)?.build(0),
        "d" => Discriminator::new(cfg)?.build(0),
        "c" => Classifier::new(cfg)?.build(0),
        other => Err(Error::Config(format!("unknown network `{other}`"))),
    }
}

fn bits(v: u64) -> f64 {
    f64::from_bits(v)
}

fn kind_entry(kind: &OptimizerKind) -> Vec<f64> {
    match *kind {
        OptimizerKind::Adam { lr, beta1, beta2, eps } => vec![0.0, lr, beta1, beta2, eps],
        OptimizerKind::Sgd { lr } => vec![1.0, lr],
    }
}

fn kind_from(data: &[f64]) -> Option<OptimizerKind> {
    match data {
        [c, lr, b1, b2, eps] if *c == 0.0 => Some(OptimizerKind::Adam {
            lr: *lr,
            beta1: *b1,
            beta2: *b2,
            eps: *eps,
        }),
        [c, lr] if *c == 1.0 => Some(OptimizerKind::Sgd { lr: *lr }),
        _ => None,
    }
}

impl Checkpoint {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Self {
        Checkpoint {
            config_digest: cfg.digest(),
            epoch: 0,
            step: 0,
            seed,
            nets: IndexMap::new(),
            optimizers: IndexMap::new(),
        }
    }

    pub fn net(&self, name: &str) -> Result<&ParamSet> {
        self.nets
            .get(name)
            .ok_or_else(|| Error::Data(format!("checkpoint has no `{name}` network")))
    }

    fn entries(&self) -> Vec<Entry> {
        let mut out = Vec::new();
        for (key, v) in [("epoch", self.epoch), ("step", self.step), ("seed", self.seed)] {
            out.push(Entry {
                name: format!("meta/{key}"),
                shape: vec![1],
                data: vec![bits(v)],
            });
        }
        for (net, ps) in &self.nets {
            for (name, p) in ps.iter() {
                out.push(Entry {
                    name: format!("{net}/{name}"),
                    shape: p.tensor.shape().to_vec(),
                    data: p.tensor.to_vec(),
                });
            }
            out.push(Entry {
                name: format!("meta/{net}/version"),
                shape: vec![1],
                data: vec![bits(ps.version())],
            });
        }
        for (net, opt) in &self.optimizers {
            let kind = kind_entry(&opt.kind);
            out.push(Entry {
                name: format!("opt/{net}/kind"),
                shape: vec![kind.len()],
                data: kind,
            });
            out.push(Entry {
                name: format!("opt/{net}/t"),
                shape: vec![1],
                data: vec![bits(opt.t)],
            });
            for (name, (m, v)) in &opt.moments {
                for (which, buf) in [("m", m), ("v", v)] {
                    out.push(Entry {
                        name: format!("opt/{net}/{which}/{name}"),
                        shape: vec![buf.len()],
                        data: buf.clone(),
                    });
                }
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let entries = self.entries();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.config_digest.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config_digest.as_bytes());
        out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        for e in entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
            for d in &e.shape {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in &e.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>, cfg: &ModelConfig) -> Result<Checkpoint> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes, cfg, path)
    }

    /// Parses and validates against `cfg`: the digest must match and every
    /// stored network must hold exactly the parameters `cfg` defines.
    pub fn from_bytes(bytes: &[u8], cfg: &ModelConfig, origin: &Path) -> Result<Checkpoint> {
        let mut r = Reader { bytes, at: 0, origin };
        if r.take(8)? != MAGIC {
            return Err(Error::format(origin, "not a GACCKPT1 checkpoint (bad magic)"));
        }
        let dlen = r.u32()? as usize;
        let digest = String::from_utf8(r.take(dlen)?.to_vec()).map_err(|_| Error::format(origin, "digest is not UTF-8"))?;
        let expected = cfg.digest();
        if digest != expected {
            return Err(Error::DigestMismatch { expected, found: digest });
        }
        let count = r.u32()? as usize;
        let mut entries = IndexMap::new();
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec()).map_err(|_| Error::format(origin, "entry name is not UTF-8"))?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::format(origin, "entry too large"))?)?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            entries.insert(name.clone(), Entry { name, shape, data });
        }
        if r.at != bytes.len() {
            return Err(Error::format(origin, format!("{} trailing bytes", bytes.len() - r.at)));
        }

        let meta = |key: &str| -> Result<u64> {
            entries
                .get(&format!("meta/{key}"))
                .and_then(|e| e.data.first())
                .map(|v| v.to_bits())
                .ok_or_else(|| Error::format(origin, format!("missing meta/{key}")))
        };
        let mut ck = Checkpoint {
            config_digest: digest,
            epoch: meta("epoch")?,
            step: meta("step")?,
            seed: meta("seed")?,
            nets: IndexMap::new(),
            optimizers: IndexMap::new(),
        };

        for net in NETS {
            let prefix = format!("{net}/");
            if !entries.keys().any(|k| k.starts_with(&prefix)) {
                continue;
            }
            let mut ps = template(net, cfg)?;
            let names: Vec<String> = ps.names().map(str::to_string).collect();
            for name in &names {
                let e = entries
                    .get(&format!("{prefix}{name}"))
                    .ok_or_else(|| Error::format(origin, format!("network `{net}` lacks parameter {name}")))?;
                if e.shape != ps.get(name)?.shape() {
                    return Err(Error::format(origin, format!("{}: stored shape {:?} does not match the config", e.name, e.shape)));
                }
                ps.set_data(name, e.data.clone())?;
            }
            let stored = entries.keys().filter(|k| k.starts_with(&prefix)).count();
            if stored != names.len() {
                return Err(Error::format(origin, format!("network `{net}` has parameters the config does not define")));
            }
            for _ in 0..meta(&format!("{net}/version")).unwrap_or(0) {
                ps.bump_version();
            }
            ck.nets.insert(net.to_string(), ps);
        }

        for net in NETS {
            let Some(kind) = entries.get(&format!("opt/{net}/kind")) else { continue };
            let kind = kind_from(&kind.data).ok_or_else(|| Error::format(origin, format!("bad optimizer kind for `{net}`")))?;
            let t = entries
                .get(&format!("opt/{net}/t"))
                .and_then(|e| e.data.first())
                .map(|v| v.to_bits())
                .ok_or_else(|| Error::format(origin, format!("missing opt/{net}/t")))?;
            let mut opt = Optimizer::new(kind);
            opt.t = t;
            let m_prefix = format!("opt/{net}/m/");
            for (key, m) in entries.iter().filter(|(k, _)| k.starts_with(&m_prefix)) {
                let pname = &key[m_prefix.len()..];
                let v = entries
                    .get(&format!("opt/{net}/v/{pname}"))
                    .ok_or_else(|| Error::format(origin, format!("missing second moment for {pname}")))?;
                opt.moments.insert(pname.to_string(), (m.data.clone(), v.data.clone()));
            }
            ck.optimizers.insert(net.to_string(), opt);
        }
        Ok(ck)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
    origin: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format(self.origin, "truncated checkpoint"))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Forward, Mode};
    use crate::Tensor;

    fn cfg() -> ModelConfig {
        let mut c = ModelConfig::desk(10, vec![7], 28);
        c.n_residual_blocks = 1;
        c
    }

    fn sample() -> Checkpoint {
        let cfg = cfg();
        let mut ck = Checkpoint::new(&cfg, u64::MAX - 3);
        ck.epoch = 3;
        ck.step = 17;
        ck.nets.insert("g".into(), Generator::new(&cfg).unwrap().build(1).unwrap());
        ck.nets.insert("c".into(), Classifier::new(&cfg).unwrap().build(2).unwrap());
        let mut opt = Optimizer::new(OptimizerKind::adam(1e-4));
        opt.t = 5;
        opt.moments.insert("head.weight".into(), (vec![0.1, -0.0, f64::MIN_POSITIVE], vec![1e-300, 2.0, 3.0]));
        ck.optimizers.insert("g".into(), opt);
        ck.optimizers.insert("c".into(), Optimizer::new(OptimizerKind::Sgd { lr: 0.5 }));
        ck
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/ck.bin");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path, &cfg()).unwrap();
        assert_eq!((back.epoch, back.step, back.seed), (3, 17, u64::MAX - 3));
        assert_eq!(back.nets.keys().collect::<Vec<_>>(), vec!["g", "c"]);
        for (k, ps) in &ck.nets {
            assert!(ps.bit_eq(&back.nets[k]));
        }
        assert_eq!(back.optimizers, ck.optimizers);
        assert_eq!(back.to_bytes(), ck.to_bytes());

        // identical forward outputs after reload
        let g = Generator::new(&cfg()).unwrap();
        let x = Tensor::new(&[1, 1, 4, 4], (0..16).map(|v| v as f64 / 16.0).collect()).unwrap();
        let a = g.forward(&mut Forward::new(&ck.nets["g"], Mode::Eval), &x).unwrap();
        let b = g.forward(&mut Forward::new(&back.nets["g"], Mode::Eval), &x).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn corrupted_or_mismatched_files_are_rejected() {
        let bytes = sample().to_bytes();
        let origin = Path::new("mem");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad, &cfg(), origin), Err(Error::Format { .. })));

        let mut other = cfg();
        other.base_channels = 8;
        assert!(matches!(
            Checkpoint::from_bytes(&bytes, &other, origin),
            Err(Error::DigestMismatch { .. })
        ));

        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3], &cfg(), origin).is_err());
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(Checkpoint::from_bytes(&longer, &cfg(), origin).is_err());
    }
}
