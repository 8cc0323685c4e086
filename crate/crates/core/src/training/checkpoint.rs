//! Binary checkpoint format.
//!
//! ```text
//! "TAPS" | u32 version | u64 meta_len | meta (JSON) | u64 n_tensors |
//!   n × ( u64 name_len | name | u64 rank | rank × u64 extent | numel × f64 )
//! ```
//!
//! Every integer and float is little-endian. Floats are stored as raw bit
//! patterns so a save/load round trip is bit-exact.

use std::collections::BTreeMap;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::Tensor;
use crate::params::ParamStore;

use super::config::TrainConfig;
use super::optim::{AdamW, Moments};

pub const MAGIC: &[u8; 4] = b"TAPS";
pub const VERSION: u32 = 1;

const MOMENT_M: &str = "optim.m/";
const MOMENT_V: &str = "optim.v/";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Backbone,
    Finetuned,
}

/// Enough to rebuild a ChaCha8 generator mid-stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    /// Decimal string; JSON numbers cannot carry 128 bits.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(seed: u64, rng: &ChaCha8Rng) -> Self {
        RngState {
            seed,
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::Checkpoint {
                offset: 0,
                message: format!("bad rng word position {:?}", self.word_pos),
            })?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: CheckpointKind,
    pub config: TrainConfig,
    pub step: u64,
    pub rng: RngState,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    /// Named tensors in a fixed order: parameters first, then moments.
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    /// Snapshots every parameter of `store` plus the optimizer moments.
    pub fn capture(meta: CheckpointMeta, store: &ParamStore, optim: Option<&AdamW>) -> Self {
        let mut tensors: Vec<(String, Tensor)> = store
            .entries()
            .iter()
            .map(|e| (e.name.clone(), e.tensor.clone()))
            .collect();
        if let Some(opt) = optim {
            for (name, mom) in opt.moments() {
                tensors.push((format!("{MOMENT_M}{name}"), mom.m.clone()));
                tensors.push((format!("{MOMENT_V}{name}"), mom.v.clone()));
            }
        }
        Checkpoint { meta, tensors }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Overwrites every parameter of `store` with the same-named tensor;
    /// a name missing from the checkpoint is an error.
    pub fn load_into(&self, store: &mut ParamStore) -> Result<()> {
        let names: Vec<String> = store.entries().iter().map(|e| e.name.clone()).collect();
        for name in names {
            let t = self.tensor(&name).ok_or_else(|| {
                Error::Config(format!("checkpoint has no tensor named {name}"))
            })?;
            store.assign(&name, t.clone())?;
        }
        Ok(())
    }

    /// A store holding every non-moment tensor, all marked frozen backbone.
    pub fn param_store(&self) -> ParamStore {
        let mut store = ParamStore::new();
        for (name, t) in &self.tensors {
            if !name.starts_with(MOMENT_M) && !name.starts_with(MOMENT_V) {
                let id = store.add(name.clone(), t.clone(), crate::params::ParamGroup::Backbone);
                store.set_trainable(id, false);
            }
        }
        store
    }

    /// Optimizer moments keyed by parameter name.
    pub fn moments(&self) -> Result<BTreeMap<String, Moments>> {
        let mut out = BTreeMap::new();
        for (name, m) in &self.tensors {
            if let Some(base) = name.strip_prefix(MOMENT_M) {
                let v = self.tensor(&format!("{MOMENT_V}{base}")).ok_or_else(|| Error::Checkpoint {
                    offset: 0,
                    message: format!("first moment for {base} has no matching second moment"),
                })?;
                out.insert(base.to_string(), Moments { m: m.clone(), v: v.clone() });
            }
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)
            .map_err(|e| Error::Config(format!("cannot serialize checkpoint metadata: {e}")))?;
        let payload: usize = self.tensors.iter().map(|(n, t)| 16 + n.len() + 8 * (t.rank() + t.numel())).sum();
        let mut out = Vec::with_capacity(24 + meta.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u64).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u64).to_le_bytes());
            for &e in t.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::Checkpoint {
                offset: 0,
                message: format!("bad magic {magic:?}, not a checkpoint"),
            });
        }
        let version = u32::from_le_bytes(r.take(4, "version")?.try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Checkpoint {
                offset: 4,
                message: format!("unsupported version {version}, expected {VERSION}"),
            });
        }
        let meta_len = r.len("metadata length")?;
        let meta_at = r.pos;
        let meta_bytes = r.take(meta_len, "metadata")?;
        let meta: CheckpointMeta = serde_json::from_slice(meta_bytes).map_err(|e| Error::Checkpoint {
            offset: meta_at as u64,
            message: format!("metadata is not valid: {e}"),
        })?;
        let n = r.len("tensor count")?;
        let mut tensors = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let name_len = r.len("name length")?;
            let name_at = r.pos;
            let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
                .map_err(|_| Error::Checkpoint {
                    offset: name_at as u64,
                    message: "tensor name is not UTF-8".into(),
                })?
                .to_string();
            let rank = r.len("rank")?;
            if rank > 8 {
                return Err(Error::Checkpoint {
                    offset: (r.pos - 8) as u64,
                    message: format!("implausible rank {rank} for {name}"),
                });
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.len("extent")?);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &e| acc.checked_mul(e))
                .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= bytes.len()))
                .ok_or_else(|| Error::Checkpoint {
                    offset: r.pos as u64,
                    message: format!("tensor {name} with shape {shape:?} cannot fit in the file"),
                })?;
            let raw = r.take(numel * 8, "tensor data")?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().expect("8 bytes"))))
                .collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint {
                offset: r.pos as u64,
                message: format!("{} trailing bytes", bytes.len() - r.pos),
            });
        }
        Ok(Checkpoint { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Checkpoint {
                offset: self.pos as u64,
                message: format!("truncated while reading {what} ({n} bytes needed, {} left)", self.bytes.len() - self.pos),
            }),
        }
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        let raw = u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes"));
        usize::try_from(raw).map_err(|_| Error::Checkpoint {
            offset: (self.pos - 8) as u64,
            message: format!("{what} {raw} does not fit in memory"),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn sample() -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let _: u64 = rng.random();
        Checkpoint {
            meta: CheckpointMeta {
                kind: CheckpointKind::Backbone,
                config: TrainConfig::micro(),
                step: 12,
                rng: RngState::capture(3, &rng),
            },
            tensors: vec![
                ("a".into(), Tensor::new(vec![2, 2], vec![0.1, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap()),
                ("b".into(), Tensor::scalar(-2.5)),
            ],
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back.meta, ck.meta);
        for ((na, ta), (nb, tb)) in ck.tensors.iter().zip(&back.tensors) {
            assert_eq!(na, nb);
            assert!(ta.bitwise_eq(tb));
        }
    }

    #[test]
    fn rng_state_resumes_the_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        rng.set_stream(4);
        let _: [u64; 5] = rng.random();
        let state = RngState::capture(9, &rng);
        let mut back = state.restore().unwrap();
        assert_eq!(rng.random::<u64>(), back.random::<u64>());
    }

    #[test]
    fn every_truncation_is_reported_with_offset() {
        let bytes = sample().to_bytes().unwrap();
        for cut in [0, 3, 7, 15, 30, bytes.len() - 1] {
            match Checkpoint::from_bytes(&bytes[..cut]) {
                Err(Error::Checkpoint { offset, .. }) => assert!(offset <= cut as u64),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn wrong_magic_and_version() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checkpoint { offset: 4, .. })));
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checkpoint { offset: 0, .. })));
    }
}
