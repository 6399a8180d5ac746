//! Portable checkpoint archives.
//!
//! A checkpoint is a flat container of named f64 arrays in one file:
//!
//! ```text
//! magic  "SLCK0001"                       8 bytes
//! count  u32 little-endian
//! entry* name_len u32 | name utf-8 | ndim u8 | dims u32* | data f64*
//! ```
//!
//! Everything little-endian, entries in insertion order, no compression.
//! Model parameters, optimizer moments and scalar metadata (epoch, seed,
//! step counters) all travel as arrays, which keeps resume logic trivial.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{CoreError, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"SLCK0001";

/// An ordered name -> array container.
#[derive(Debug, Clone, Default)]
pub struct Archive {
    names: Vec<String>,
    map: BTreeMap<String, Tensor>,
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) {
        if !self.map.contains_key(name) {
            self.names.push(name.to_string());
        }
        self.map.insert(name.to_string(), value);
    }

    pub fn insert_scalar(&mut self, name: &str, value: f64) {
        self.insert(name, Tensor::scalar(value));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        self.get(name)
            .map(|t| t.item())
            .ok_or_else(|| CoreError::Checkpoint(format!("missing entry '{name}'")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Copies every parameter of a store under a prefix.
    pub fn put_params(&mut self, prefix: &str, store: &ParamStore) {
        for (name, value) in store.iter() {
            self.insert(&format!("{prefix}{name}"), value.clone());
        }
    }

    /// Rebuilds a parameter store from entries under a prefix.
    pub fn take_params(&self, prefix: &str) -> ParamStore {
        let mut store = ParamStore::new();
        for name in &self.names {
            if let Some(rest) = name.strip_prefix(prefix) {
                store.insert(rest, self.map[name].clone());
            }
        }
        store
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.names.len() as u32).to_le_bytes());
        for name in &self.names {
            let t = &self.map[name];
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Archive> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .map_err(|e| CoreError::Checkpoint(format!("cannot open {}: {e}", path.display())))?
            .read_to_end(&mut buf)?;
        let mut cursor = 0usize;
        let take = |cursor: &mut usize, n: usize| -> Result<&[u8]> {
            if *cursor + n > buf.len() {
                return Err(CoreError::Checkpoint("truncated archive".into()));
            }
            let s = &buf[*cursor..*cursor + n];
            *cursor += n;
            Ok(s)
        };
        if take(&mut cursor, 8)? != MAGIC {
            return Err(CoreError::Checkpoint("bad magic; not a checkpoint".into()));
        }
        let count = u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap()) as usize;
        let mut archive = Archive::new();
        for _ in 0..count {
            let name_len = u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(&mut cursor, name_len)?.to_vec())
                .map_err(|e| CoreError::Checkpoint(format!("bad entry name: {e}")))?;
            let ndim = take(&mut cursor, 1)?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap()) as usize);
            }
            let n: usize = shape.iter().product();
            let raw = take(&mut cursor, 8 * n)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            archive.insert(&name, Tensor::from_vec(&shape, data));
        }
        Ok(archive)
    }
}
