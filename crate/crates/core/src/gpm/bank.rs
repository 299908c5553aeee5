//! Key–value memory of demonstrations with exact cosine top-k retrieval.
//!
//! File layout (little-endian): magic `GPMB`, format version (u32), D_z (u32),
//! A (u32), H₀ (u32), Δ (u32), entry count (u64); then per entry the key
//! (D_z × f64), T (u64), task id (u32 length + UTF-8) and the T × A
//! trajectory (f64, row-major); then a SHA-256 of everything before it.

use std::cmp::Ordering;
use std::path::Path;

use super::embed::TaskEmbedding;
use crate::binio::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::flow::ActionChunk;

pub const BANK_FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"GPMB";

/// A `T × A` action sequence.
pub type Trajectory = ActionChunk;

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryEntry {
    pub key: TaskEmbedding,
    pub trajectory: Trajectory,
    pub window: usize,
    pub stride: usize,
    pub task_id: String,
}

impl MemoryEntry {
    pub fn len(&self) -> usize {
        self.trajectory.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Number of sliding windows, `⌊(T − H₀)/Δ⌋ + 1`.
    pub fn window_count(&self) -> usize {
        (self.len() - self.window) / self.stride + 1
    }

    fn validate(&self) -> Result<()> {
        if self.window < 1 || self.stride < 1 {
            return Err(Error::invalid("window and stride must be at least 1"));
        }
        if self.len() < self.window {
            return Err(Error::invalid(format!(
                "trajectory of length {} is shorter than the window {}",
                self.len(),
                self.window
            )));
        }
        TaskEmbedding::new(self.key.as_slice().to_vec())?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank {
    embed_dim: usize,
    action_dim: usize,
    window: usize,
    stride: usize,
    entries: Vec<MemoryEntry>,
}

impl MemoryBank {
    pub fn new(embed_dim: usize, action_dim: usize, window: usize, stride: usize) -> Result<Self> {
        if embed_dim == 0 || action_dim == 0 || window == 0 || stride == 0 {
            return Err(Error::invalid("bank dimensions must be positive"));
        }
        Ok(Self {
            embed_dim,
            action_dim,
            window,
            stride,
            entries: Vec::new(),
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, index: usize) -> &MemoryEntry {
        &self.entries[index]
    }

    pub fn entries(&self) -> &[MemoryEntry] {
        &self.entries
    }

    pub fn insert(&mut self, entry: MemoryEntry) -> Result<usize> {
        entry.validate()?;
        if entry.key.dim() != self.embed_dim {
            return Err(Error::DimMismatch {
                context: "bank key",
                expected: self.embed_dim,
                actual: entry.key.dim(),
            });
        }
        if entry.trajectory.cols() != self.action_dim {
            return Err(Error::DimMismatch {
                context: "bank trajectory",
                expected: self.action_dim,
                actual: entry.trajectory.cols(),
            });
        }
        if entry.window != self.window || entry.stride != self.stride {
            return Err(Error::invalid("entry chunking differs from the bank's"));
        }
        self.entries.push(entry);
        Ok(self.entries.len() - 1)
    }

    /// The `k` entries with the largest inner product with `query`, sorted
    /// descending. Equal scores keep insertion order.
    pub fn retrieve_topk(&self, query: &TaskEmbedding, k: usize) -> Result<Vec<Neighbor>> {
        self.retrieve_filtered(query, k, |_| true)
    }

    /// As [`retrieve_topk`](Self::retrieve_topk), restricted to entries accepted by `keep`.
    pub fn retrieve_filtered(&self, query: &TaskEmbedding, k: usize, keep: impl Fn(usize) -> bool) -> Result<Vec<Neighbor>> {
        if self.entries.is_empty() {
            return Err(Error::invalid("retrieval from an empty bank"));
        }
        if query.dim() != self.embed_dim {
            return Err(Error::DimMismatch {
                context: "bank query",
                expected: self.embed_dim,
                actual: query.dim(),
            });
        }
        let mut scored: Vec<Neighbor> = self
            .entries
            .iter()
            .enumerate()
            .filter(|(i, _)| keep(*i))
            .map(|(index, e)| Neighbor {
                index,
                score: e.key.dot(query),
            })
            .collect();
        if k == 0 || k > scored.len() {
            return Err(Error::invalid(format!(
                "k = {k} must lie in [1, {}]",
                scored.len()
            )));
        }
        let by_rank = |a: &Neighbor, b: &Neighbor| {
            b.score
                .partial_cmp(&a.score)
                .unwrap_or(Ordering::Equal)
                .then(a.index.cmp(&b.index))
        };
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, by_rank);
            scored.truncate(k);
        }
        scored.sort_by(by_rank);
        Ok(scored)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(MAGIC);
        w.u32(BANK_FORMAT_VERSION);
        w.u32(self.embed_dim as u32);
        w.u32(self.action_dim as u32);
        w.u32(self.window as u32);
        w.u32(self.stride as u32);
        w.u64(self.entries.len() as u64);
        for e in &self.entries {
            w.f64s(e.key.as_slice());
            w.u64(e.len() as u64);
            w.str(&e.task_id);
            w.f64s(e.trajectory.as_slice());
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::verified("memory bank", bytes)?;
        r.expect(MAGIC)?;
        let version = r.u32()?;
        if version != BANK_FORMAT_VERSION {
            return Err(Error::corrupt("memory bank", format!("unsupported version {version}")));
        }
        let embed_dim = r.u32()? as usize;
        let action_dim = r.u32()? as usize;
        let window = r.u32()? as usize;
        let stride = r.u32()? as usize;
        let count = r.u64()? as usize;
        let mut bank = Self::new(embed_dim, action_dim, window, stride)
            .map_err(|e| Error::corrupt("memory bank", e.to_string()))?;
        for _ in 0..count {
            let key = r.f64s(embed_dim)?;
            let t = r.u64()? as usize;
            let task_id = r.str()?;
            let traj = r.f64s(t * action_dim)?;
            let entry = MemoryEntry {
                key: TaskEmbedding::new(key).map_err(|e| Error::corrupt("memory bank", e.to_string()))?,
                trajectory: ActionChunk::new(t, action_dim, traj).map_err(|e| Error::corrupt("memory bank", e.to_string()))?,
                window,
                stride,
                task_id,
            };
            bank.insert(entry).map_err(|e| Error::corrupt("memory bank", e.to_string()))?;
        }
        r.finish()?;
        Ok(bank)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Self::from_bytes(&std::fs::read(path)?)
    }
}
