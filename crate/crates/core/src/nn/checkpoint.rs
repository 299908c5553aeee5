//! Binary parameter container.
//!
//! Layout (little-endian): magic `DMCKPT01`, JSON metadata (u32 length +
//! bytes), optimizer step (u64), parameter count (u32), then for each
//! parameter: name, rank (u32), dims (u64 each), values, first moments,
//! second moments (f64 each). A SHA-256 of all preceding bytes closes the file.

use std::path::Path;

use serde_json::Value;

use super::params::{Param, ParamStore};
use crate::binio::{ByteReader, ByteWriter};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"DMCKPT01";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: Value,
    pub store: ParamStore,
}

impl Checkpoint {
    pub fn new(meta: Value, store: ParamStore) -> Self {
        Self { meta, store }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = ByteWriter::new();
        w.bytes(MAGIC);
        let meta = serde_json::to_vec(&self.meta)?;
        w.u32(meta.len() as u32);
        w.bytes(&meta);
        w.u64(self.store.step());
        w.u32(self.store.len() as u32);
        for p in self.store.params() {
            w.str(&p.name);
            w.u32(p.shape.len() as u32);
            for &d in &p.shape {
                w.u64(d as u64);
            }
            w.f64s(&p.value);
            w.f64s(&p.m);
            w.f64s(&p.v);
        }
        Ok(w.finish())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::verified("checkpoint", bytes)?;
        r.expect(MAGIC)?;
        let meta_len = r.u32()? as usize;
        let meta: Value = serde_json::from_slice(r.bytes(meta_len)?)
            .map_err(|e| Error::corrupt("checkpoint", format!("metadata: {e}")))?;
        let step = r.u64()?;
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let name = r.str()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            params.push(Param {
                name,
                shape,
                value: r.f64s(numel)?,
                m: r.f64s(numel)?,
                v: r.f64s(numel)?,
            });
        }
        r.finish()?;
        let store = ParamStore::restore(params, step).map_err(|e| Error::corrupt("checkpoint", e.to_string()))?;
        Ok(Self { meta, store })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Self::from_bytes(&std::fs::read(path)?)
    }
}
