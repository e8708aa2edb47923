//! `S2DW` weight files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "S2DW" | version u8
//! repeated: name_len u16 | name (UTF-8) | rank u8 | dims u32 × rank | f32 × Π dims
//! ```
//!
//! The file must end exactly after the last record.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::Tensor;

pub const WEIGHTS_MAGIC: &[u8; 4] = b"S2DW";
pub const WEIGHTS_VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum WeightError {
    #[error("weight file i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not an S2DW weight file")]
    BadMagic,
    #[error("unsupported weight file version {0}")]
    UnsupportedVersion(u8),
    #[error("weight file truncated at byte {offset} while reading {what}")]
    Truncated { offset: usize, what: &'static str },
    #[error("weight record name is not UTF-8 at byte {0}")]
    InvalidName(usize),
    #[error("weight record `{0}` has an invalid shape")]
    InvalidShape(String),
    #[error("duplicate weight record `{0}`")]
    Duplicate(String),
    #[error("missing weight tensor `{0}`")]
    Missing(String),
    #[error("weight tensor `{name}` has shape {got:?}, expected {expected:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("weight tensor `{0}` holds non-finite values")]
    NonFinite(String),
}

/// Named tensors, kept in name order so serialization is canonical.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightStore {
    tensors: BTreeMap<String, Tensor>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], WeightError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(WeightError::Truncated {
                offset: self.pos,
                what,
            }),
        }
    }

    fn u8(&mut self, what: &'static str) -> Result<u8, WeightError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &'static str) -> Result<u16, WeightError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, WeightError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn get_any(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    /// Fetches `name`, checking it has exactly `shape`.
    pub fn get(&self, name: &str, shape: &[usize]) -> Result<&Tensor, WeightError> {
        let t = self
            .tensors
            .get(name)
            .ok_or_else(|| WeightError::Missing(name.to_string()))?;
        if t.shape() != shape {
            return Err(WeightError::Shape {
                name: name.to_string(),
                expected: shape.to_vec(),
                got: t.shape().to_vec(),
            });
        }
        if !t.is_finite() {
            return Err(WeightError::NonFinite(name.to_string()));
        }
        Ok(t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(WEIGHTS_MAGIC);
        out.push(WEIGHTS_VERSION);
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, WeightError> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4, "magic").map_err(|_| WeightError::BadMagic)? != WEIGHTS_MAGIC {
            return Err(WeightError::BadMagic);
        }
        let version = r.u8("version")?;
        if version != WEIGHTS_VERSION {
            return Err(WeightError::UnsupportedVersion(version));
        }
        let mut store = WeightStore::new();
        while r.pos < buf.len() {
            let name_len = r.u16("name length")? as usize;
            let name_at = r.pos;
            let name = std::str::from_utf8(r.take(name_len, "name")?)
                .map_err(|_| WeightError::InvalidName(name_at))?
                .to_string();
            let rank = r.u8("rank")? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u32("dims")? as usize);
            }
            let count = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&n| n > 0 && rank > 0)
                .ok_or_else(|| WeightError::InvalidShape(name.clone()))?;
            let bytes = count
                .checked_mul(4)
                .ok_or_else(|| WeightError::InvalidShape(name.clone()))?;
            let payload = r.take(bytes, "payload")?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let tensor =
                Tensor::new(&dims, data).map_err(|_| WeightError::InvalidShape(name.clone()))?;
            if store.tensors.insert(name.clone(), tensor).is_some() {
                return Err(WeightError::Duplicate(name));
            }
        }
        Ok(store)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, WeightError> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), WeightError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }
}

/// Shapes a network expects, used both to validate loaded weights and to
/// generate seeded random initializations.
#[derive(Clone, Debug, Default)]
pub struct WeightSpec {
    entries: Vec<(String, Vec<usize>)>,
}

impl WeightSpec {
    pub fn push(&mut self, name: impl Into<String>, shape: &[usize]) {
        self.entries.push((name.into(), shape.to_vec()));
    }

    pub fn extend(&mut self, other: WeightSpec) {
        self.entries.extend(other.entries);
    }

    pub fn entries(&self) -> &[(String, Vec<usize>)] {
        &self.entries
    }

    pub fn check(&self, store: &WeightStore) -> Result<(), WeightError> {
        for (name, shape) in &self.entries {
            store.get(name, shape)?;
        }
        Ok(())
    }

    /// Uniform fan-in scaled weights, zero-mean small biases; fully
    /// determined by `seed`.
    pub fn random(&self, seed: u64) -> WeightStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = WeightStore::new();
        for (name, shape) in &self.entries {
            let fan_in: usize = if shape.len() > 1 {
                shape[1..].iter().product()
            } else {
                1
            };
            let bound = if shape.len() > 1 {
                (3.0 / fan_in as f32).sqrt()
            } else {
                0.05
            };
            let t = Tensor::from_fn(shape, |_| rng.gen_range(-bound..=bound));
            store.insert(name.clone(), t);
        }
        store
    }

    pub fn zeros(&self) -> WeightStore {
        let mut store = WeightStore::new();
        for (name, shape) in &self.entries {
            store.insert(name.clone(), Tensor::zeros(shape));
        }
        store
    }
}
