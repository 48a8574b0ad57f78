//! Flat container of named tensors.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "EQRLCKPT"
//! version  u32      currently 1
//! count    u32      number of entries
//! entry*   name_len u32, name (UTF-8), ndim u32, dims u64 * ndim,
//!          data f64 * prod(dims)
//! ```
//!
//! Single-precision parameters are widened to `f64`, which round-trips them
//! exactly.

use super::{ParamStore, Tensor};
use crate::{Error, Result, Scalar};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"EQRLCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Ordered named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<(String, Tensor<f64>)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<f64>) {
        self.entries.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f64>> {
        self.entries.iter().find(|e| e.0 == name).map(|e| &e.1)
    }

    /// Adds every parameter of `store` under `prefix/name`.
    pub fn push_store<T: Scalar>(&mut self, prefix: &str, store: &ParamStore<T>) {
        for (name, t) in store.named_tensors() {
            self.push(format!("{prefix}/{name}"), t.cast());
        }
    }

    /// Overwrites the parameters of `store` from `prefix/name` entries.
    pub fn load_store<T: Scalar>(&self, prefix: &str, store: &mut ParamStore<T>) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let key = format!("{prefix}/{}", store.name(id));
            let t = self
                .get(&key)
                .ok_or_else(|| Error::invalid(format!("checkpoint has no entry `{key}`")))?;
            store.set(id, t.cast())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        fn take<'a>(bytes: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
            if bytes.len() < n {
                return Err(Error::invalid("truncated checkpoint"));
            }
            let (head, tail) = bytes.split_at(n);
            *bytes = tail;
            Ok(head)
        }
        fn u32_(bytes: &mut &[u8]) -> Result<u32> {
            Ok(u32::from_le_bytes(take(bytes, 4)?.try_into().expect("4 bytes")))
        }
        fn u64_(bytes: &mut &[u8]) -> Result<u64> {
            Ok(u64::from_le_bytes(take(bytes, 8)?.try_into().expect("8 bytes")))
        }

        if take(&mut bytes, 8)? != CHECKPOINT_MAGIC {
            return Err(Error::invalid("not a checkpoint (bad magic)"));
        }
        let version = u32_(&mut bytes)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Unsupported(format!("checkpoint version {version}")));
        }
        let count = u32_(&mut bytes)? as usize;
        let mut ckpt = Checkpoint::new();
        for _ in 0..count {
            let len = u32_(&mut bytes)? as usize;
            let name = std::str::from_utf8(take(&mut bytes, len)?)
                .map_err(|e| Error::invalid(format!("tensor name: {e}")))?
                .to_string();
            let ndim = u32_(&mut bytes)? as usize;
            let shape = (0..ndim)
                .map(|_| u64_(&mut bytes).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let raw = take(&mut bytes, numel * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            ckpt.push(name, Tensor::new(shape, data)?);
        }
        if !bytes.is_empty() {
            return Err(Error::invalid("trailing bytes after checkpoint"));
        }
        Ok(ckpt)
    }
}

/// Writes atomically: a sibling temporary file is renamed over `path`, so a
/// crash never leaves a partially written checkpoint behind.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&ckpt.to_bytes())?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    Checkpoint::from_bytes(&bytes)
}
