//! Versioned single-file model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! | bytes      | content                                              |
//! |------------|------------------------------------------------------|
//! | 8          | magic `OICSRCKP`                                     |
//! | 4          | `u32` format version                                 |
//! | 8          | `u64` header length `H`                              |
//! | H          | UTF-8 JSON header ([`Header`])                       |
//! | 8          | `u64` value count `V`                                |
//! | 8·V        | `f64` parameter values, bit patterns preserved       |
//! | 32         | SHA-256 of every preceding byte                      |
//!
//! Parameters are stored in layer order, slots in `weight, bias, gamma, beta`
//! order; the header's tensor table gives each buffer's offset and shape.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::DataError;
use crate::model::{Architecture, ChannelPair, Model, ParamSlot};
use crate::pruner::PruningPlan;
use crate::trainer::RunConfig;

pub const MAGIC: &[u8; 8] = b"OICSRCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub layer: usize,
    pub slot: ParamSlot,
    pub shape: Vec<usize>,
    pub offset: usize,
}

/// Everything besides the model parameters.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: Option<RunConfig>,
    /// Every plan applied to reach this model, oldest first.
    pub history: Vec<PruningPlan>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub architecture: Architecture,
    pub tensors: Vec<TensorEntry>,
    pub pairs: Vec<ChannelPair>,
    pub meta: CheckpointMeta,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn new(model: Model, meta: CheckpointMeta) -> Self {
        Self { model, meta }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut tensors = Vec::new();
        let mut values: Vec<f64> = Vec::new();
        for (idx, layer) in self.model.layers().iter().enumerate() {
            for slot in layer.slots() {
                let t = layer.param(slot).unwrap();
                tensors.push(TensorEntry {
                    layer: idx,
                    slot,
                    shape: t.shape().to_vec(),
                    offset: values.len(),
                });
                values.extend_from_slice(t.data());
            }
        }
        let header = Header {
            architecture: self.model.architecture(),
            tensors,
            pairs: self.model.pairs().to_vec(),
            meta: self.meta.clone(),
        };
        let header = serde_json::to_vec_pretty(&header).expect("header serializes");

        let mut out = Vec::with_capacity(8 + 4 + 8 + header.len() + 8 + 8 * values.len() + 32);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(values.len() as u64).to_le_bytes());
        for v in &values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DataError> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(8)? != MAGIC {
            return Err(DataError::Corrupt("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(cur.take(4)?.try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(DataError::VersionMismatch {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let header_len = cur.len_field()?;
        let header_bytes = cur.take(header_len)?;
        let count = cur.len_field()?;
        let payload = cur.take(count.checked_mul(8).ok_or_else(overflow)?)?;
        let body_end = cur.pos;
        let digest = cur.take(32)?;
        if cur.pos != bytes.len() {
            return Err(DataError::Corrupt(format!(
                "{} trailing bytes",
                bytes.len() - cur.pos
            )));
        }
        if Sha256::digest(&bytes[..body_end]).as_slice() != digest {
            return Err(DataError::Corrupt("checksum mismatch".into()));
        }

        let header: Header = serde_json::from_slice(header_bytes)
            .map_err(|e| DataError::Corrupt(format!("header: {e}")))?;
        let values: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();

        let mut model = Model::from_architecture(&header.architecture, 0)
            .map_err(|e| DataError::Corrupt(format!("architecture: {e}")))?;
        let expected: usize = model.layers().iter().map(|l| l.slots().len()).sum();
        if header.tensors.len() != expected {
            return Err(DataError::Corrupt(format!(
                "{} tensors listed, architecture has {expected}",
                header.tensors.len()
            )));
        }
        let mut seen = std::collections::BTreeSet::new();
        for entry in &header.tensors {
            if entry.layer >= model.layers().len() || !seen.insert((entry.layer, entry.slot)) {
                return Err(DataError::Corrupt(format!(
                    "tensor entry for layer {} {} is invalid or duplicated",
                    entry.layer,
                    entry.slot.name()
                )));
            }
            let param = model.param_mut(entry.layer, entry.slot).ok_or_else(|| {
                DataError::Corrupt(format!(
                    "layer {} has no {} parameter",
                    entry.layer,
                    entry.slot.name()
                ))
            })?;
            if param.shape() != entry.shape.as_slice() {
                return Err(DataError::Corrupt(format!(
                    "layer {} {}: shape {:?} does not match architecture {:?}",
                    entry.layer,
                    entry.slot.name(),
                    entry.shape,
                    param.shape()
                )));
            }
            let end = entry
                .offset
                .checked_add(param.numel())
                .ok_or_else(overflow)?;
            let src = values.get(entry.offset..end).ok_or_else(|| {
                DataError::Corrupt(format!(
                    "layer {} {} reaches past the payload",
                    entry.layer,
                    entry.slot.name()
                ))
            })?;
            param.data_mut().copy_from_slice(src);
        }
        if model.pairs() != header.pairs.as_slice() {
            return Err(DataError::Corrupt(
                "stored pair metadata disagrees with the architecture".into(),
            ));
        }
        Ok(Self {
            model,
            meta: header.meta,
        })
    }

    /// Writes atomically: a temporary file in the target directory is renamed into place.
    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let io = |source| DataError::Io {
            path: path.display().to_string(),
            source,
        };
        let dir = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p,
            _ => Path::new("."),
        };
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
        tmp.write_all(&self.to_bytes()).map_err(io)?;
        tmp.as_file().sync_all().map_err(io)?;
        tmp.persist(path).map_err(|e| io(e.error))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let bytes = std::fs::read(path).map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

fn overflow() -> DataError {
    DataError::Corrupt("length field overflows".into())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DataError> {
        let end = self.pos.checked_add(n).ok_or_else(overflow)?;
        let s = self.bytes.get(self.pos..end).ok_or_else(|| {
            DataError::Corrupt(format!(
                "truncated: need {end} bytes, file has {}",
                self.bytes.len()
            ))
        })?;
        self.pos = end;
        Ok(s)
    }

    fn len_field(&mut self) -> Result<usize, DataError> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().unwrap());
        usize::try_from(v).map_err(|_| overflow())
    }
}
