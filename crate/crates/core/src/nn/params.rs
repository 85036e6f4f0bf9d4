//! Named parameter storage and the `HVD1` checkpoint format.
//!
//! Layout (little-endian): magic `HVD1`, `u32` tensor count, then per tensor a
//! `u16` name length, the UTF-8 name, a `u8` rank, `rank` x `u64` extents and
//! the row-major `f64` payload. Tensors are written in name order.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"HVD1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors.get(name).ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors.get_mut(name).ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Copies every tensor of `other` into `self`, replacing same-named ones.
    pub fn extend(&mut self, other: &ParamStore) {
        for (k, v) in &other.tensors {
            self.tensors.insert(k.clone(), v.clone());
        }
    }

    /// Sub-store of tensors whose names start with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> ParamStore {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// SHA-256 over names, shapes and payload bits, hex encoded.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.tensors {
            h.update(name.as_bytes());
            for &e in t.shape() {
                h.update((e as u64).to_le_bytes());
            }
            for &v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Adds every tensor to `g` as a leaf; trainable tensors record gradients.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self.tensors.iter().map(|(k, t)| (k.clone(), g.leaf(t.clone(), trainable))).collect();
        Bound { vars }
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(&MAGIC)?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            let nb = name.as_bytes();
            let len = u16::try_from(nb.len()).map_err(|_| Error::Checkpoint(format!("name too long: {name}")))?;
            w.write_all(&len.to_le_bytes())?;
            w.write_all(nb)?;
            let rank = u8::try_from(t.rank()).map_err(|_| Error::Checkpoint(format!("rank too large: {name}")))?;
            w.write_all(&[rank])?;
            for &e in t.shape() {
                w.write_all(&(e as u64).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(t.len() * 8);
            for &v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| Error::Checkpoint("truncated header".into()))?;
        if magic != MAGIC {
            return Err(Error::BadMagic(magic));
        }
        let count = read_u32(r)?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let mut lb = [0u8; 2];
            read_exact(r, &mut lb)?;
            let mut nb = vec![0u8; u16::from_le_bytes(lb) as usize];
            read_exact(r, &mut nb)?;
            let name = String::from_utf8(nb).map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let mut rank = [0u8; 1];
            read_exact(r, &mut rank)?;
            let mut shape = Vec::with_capacity(rank[0] as usize);
            for _ in 0..rank[0] {
                let mut eb = [0u8; 8];
                read_exact(r, &mut eb)?;
                shape.push(usize::try_from(u64::from_le_bytes(eb)).map_err(|_| Error::Checkpoint("extent overflow".into()))?);
            }
            let n: usize = shape.iter().product();
            let mut payload = vec![0u8; n * 8];
            read_exact(r, &mut payload)?;
            let data = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            store.insert(name, Tensor::new(shape, data)?);
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        ParamStore::read_from(&mut bytes.as_slice())
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|_| Error::Checkpoint("truncated tensor record".into()))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Graph handles for a bound [`ParamStore`].
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Adds the handles of `other`; names already present are replaced.
    pub fn merge(&mut self, other: Bound) {
        self.vars.extend(other.vars);
    }
}

/// He-normal weights with `fan_in` inputs.
pub fn he_normal(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let normal = Normal::new(0.0, std).unwrap();
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(rng)).collect()).unwrap()
}
