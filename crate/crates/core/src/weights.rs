//! Named parameter store and the `OCTW1` weight container.
//!
//! Layout of an `OCTW1` file:
//!
//! ```text
//! b"OCTW1" | manifest length (u64 LE) | manifest JSON | f32 LE payload
//! ```
//!
//! The manifest is a JSON array of `{name, shape, offset}` where `offset` is
//! the byte offset of the tensor inside the payload. Parameters are kept at
//! `f32` precision in memory (see [`Weights::round_to_f32`]), so a
//! save/load round trip is lossless.

use std::collections::HashMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const WEIGHTS_MAGIC: &[u8; 5] = b"OCTW1";

#[derive(Clone, Default, PartialEq)]
pub struct Weights {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl fmt::Debug for Weights {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Weights({} tensors, {} values)", self.tensors.len(), self.num_values())
    }
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: [usize; 2],
    offset: u64,
}

impl Weights {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert or replace a named tensor.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.tensors[i] = t;
        } else {
            self.index.insert(name.clone(), self.names.len());
            self.names.push(name);
            self.tensors.push(t);
        }
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index_of(name).map(move |i| &mut self.tensors[i])
    }

    pub fn tensor(&self, idx: usize) -> &Tensor {
        &self.tensors[idx]
    }

    pub fn tensor_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.tensors[idx]
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Zeroed tensors shaped like every entry, in store order.
    pub fn zeros_like(&self) -> Vec<Tensor> {
        self.tensors.iter().map(|t| Tensor::zeros(t.rows, t.cols)).collect()
    }

    pub fn round_to_f32(&mut self) {
        for t in &mut self.tensors {
            for v in &mut t.data {
                *v = *v as f32 as f64;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut manifest = Vec::with_capacity(self.len());
        let mut offset = 0u64;
        for (name, t) in self.iter() {
            manifest.push(ManifestEntry { name: name.to_string(), shape: [t.rows, t.cols], offset });
            offset += 4 * t.len() as u64;
        }
        let manifest = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(13 + manifest.len() + offset as usize);
        out.extend_from_slice(WEIGHTS_MAGIC);
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for t in &self.tensors {
            for &v in &t.data {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 13 || &bytes[..5] != WEIGHTS_MAGIC {
            return Err(Error::Schema("not an OCTW1 weight container".into()));
        }
        let mlen = u64::from_le_bytes(bytes[5..13].try_into().unwrap()) as usize;
        let mend = 13usize
            .checked_add(mlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Schema("weight manifest truncated".into()))?;
        let manifest: Vec<ManifestEntry> = serde_json::from_slice(&bytes[13..mend])?;
        let payload = &bytes[mend..];
        let mut w = Weights::new();
        for e in manifest {
            let n = e.shape[0] * e.shape[1];
            let start = e.offset as usize;
            let end = start + 4 * n;
            if end > payload.len() {
                return Err(Error::Schema(format!("tensor `{}` exceeds payload", e.name)));
            }
            let data = payload[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            w.insert(e.name, Tensor::from_vec(e.shape[0], e.shape[1], data));
        }
        Ok(w)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}
