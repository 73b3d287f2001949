//! Single-file binary checkpoints: magic, format version, a JSON header
//! (configuration, progress and tensor directory), then little-endian f64
//! tensor data.

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Progress, TrainConfig, TrainError};
use crate::model::ArchitectureConfig;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"GFCNCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Element offset into the data section.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub architecture: ArchitectureConfig,
    pub training: TrainConfig,
    /// Architecture fingerprint joined with the training trajectory digest.
    pub config_hash: String,
    /// Symbols in index order, when the run knew its charset.
    pub charset: Option<String>,
    pub dtype: String,
    pub progress: Progress,
    pub directory: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub data: Vec<f64>,
}

pub fn config_hash(architecture: &ArchitectureConfig, training: &TrainConfig) -> String {
    format!("{}-{}", architecture.fingerprint(), training.trajectory_digest())
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<(&[usize], &[f64])> {
        let e = self.header.directory.iter().find(|e| e.name == name)?;
        let n: usize = e.shape.iter().product();
        Some((&e.shape, &self.data[e.offset..e.offset + n]))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let mut out = Vec::with_capacity(20 + header.len() + 8 * self.data.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TrainError> {
        let corrupt = |reason: &str| TrainError::CorruptCheckpoint(reason.into());
        if bytes.get(..8) != Some(CHECKPOINT_MAGIC.as_slice()) {
            return Err(corrupt("bad magic"));
        }
        let version = u32::from_le_bytes(bytes.get(8..12).ok_or_else(|| corrupt("truncated"))?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(TrainError::CorruptCheckpoint(format!("unsupported format version {version}")));
        }
        let len = u64::from_le_bytes(bytes.get(12..20).ok_or_else(|| corrupt("truncated"))?.try_into().unwrap());
        let end = 20usize.checked_add(len as usize).ok_or_else(|| corrupt("header length overflows"))?;
        let header: CheckpointHeader = serde_json::from_slice(bytes.get(20..end).ok_or_else(|| corrupt("truncated header"))?)
            .map_err(|e| TrainError::CorruptCheckpoint(format!("header: {e}")))?;
        let body = &bytes[end..];
        if body.len() % 8 != 0 {
            return Err(corrupt("data section is not a whole number of f64 values"));
        }
        let data: Vec<f64> = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        for e in &header.directory {
            let n: usize = e.shape.iter().product();
            if e.offset + n > data.len() {
                return Err(TrainError::CorruptCheckpoint(format!("tensor {} runs past the data section", e.name)));
            }
        }
        Ok(Self { header, data })
    }

    /// Writes via a temporary file and rename so a crash never leaves a
    /// half-written checkpoint.
    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let tmp = path.with_extension("tmp");
        let io = |e: std::io::Error| TrainError::Io(format!("{}: {e}", path.display()));
        let mut f = std::fs::File::create(&tmp).map_err(io)?;
        f.write_all(&self.to_bytes()).map_err(io)?;
        f.sync_all().map_err(io)?;
        std::fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let bytes = std::fs::read(path).map_err(|e| TrainError::Io(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            TrainError::CorruptCheckpoint(m) => TrainError::CorruptCheckpoint(format!("{}: {m}", path.display())),
            e => e,
        })
    }
}
