//! The `EMMACKPT` checkpoint container: named tensor records plus one
//! embedded JSON metadata record describing the model that wrote them.
//!
//! Byte layout (integers little-endian):
//!
//! ```text
//! magic    8  b"EMMACKPT"
//! version  u32
//! count    u32
//! records  count x { name: u32 len + UTF-8,
//!                    dtype: u8, rank: u32, extents: rank x u64,
//!                    data: raw little-endian values }
//! crc      u32  CRC-32 (IEEE) over every preceding byte
//! ```

use crate::arch::ArchitectureSpec;
use crate::error::{EmmaError, Result};
use crate::preprocess::NormalizationSpec;
use crate::reader::ByteReader;
use crate::scalar::{Dtype, Scalar};
use crate::tensor::Tensor;
use crate::volume::VolumePayload;
use crate::fsio;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"EMMACKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Reserved record name for the JSON model description.
pub const META_RECORD: &str = "__emma_meta__";

/// Contents of the metadata record: enough to rebuild the network and to
/// rerun the member's preprocessing on unseen cases.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelMeta {
    pub spec: ArchitectureSpec,
    pub normalization: NormalizationSpec,
    pub seed: u64,
    pub iterations: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointRecord {
    pub name: String,
    pub extents: Vec<usize>,
    pub payload: VolumePayload,
}

impl CheckpointRecord {
    pub fn from_tensor<T: Scalar>(name: &str, tensor: &Tensor<T>) -> Self {
        let payload = match T::DTYPE {
            Dtype::F32 => {
                VolumePayload::F32(tensor.data().iter().map(|v| v.to_f64() as f32).collect())
            }
            _ => VolumePayload::F64(tensor.data().iter().map(|v| v.to_f64()).collect()),
        };
        CheckpointRecord { name: name.to_string(), extents: tensor.shape().to_vec(), payload }
    }

    pub fn from_bytes_record(name: &str, bytes: Vec<u8>) -> Self {
        CheckpointRecord {
            name: name.to_string(),
            extents: vec![bytes.len()],
            payload: VolumePayload::U8(bytes),
        }
    }

    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        let data: Vec<T> = match &self.payload {
            VolumePayload::F32(v) => v.iter().map(|&x| T::from_f64(x as f64)).collect(),
            VolumePayload::F64(v) => v.iter().map(|&x| T::from_f64(x)).collect(),
            VolumePayload::U8(_) => {
                return Err(EmmaError::Format(format!(
                    "checkpoint record {} holds bytes, not parameters",
                    self.name
                )))
            }
        };
        Tensor::new(self.extents.clone(), data)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CheckpointFile {
    pub records: Vec<CheckpointRecord>,
}

impl CheckpointFile {
    pub fn find(&self, name: &str) -> Option<&CheckpointRecord> {
        self.records.iter().find(|r| r.name == name)
    }

    pub fn push_tensor<T: Scalar>(&mut self, name: &str, tensor: &Tensor<T>) {
        self.records.push(CheckpointRecord::from_tensor(name, tensor));
    }

    /// Attaches the JSON metadata record, replacing any existing one.
    pub fn set_meta<S: serde::Serialize>(&mut self, meta: &S) -> Result<()> {
        let bytes = serde_json::to_vec(meta)
            .map_err(|e| EmmaError::Format(format!("metadata encode failed: {e}")))?;
        self.records.retain(|r| r.name != META_RECORD);
        self.records.push(CheckpointRecord::from_bytes_record(META_RECORD, bytes));
        Ok(())
    }

    pub fn meta<D: serde::de::DeserializeOwned>(&self) -> Result<D> {
        let rec = self.find(META_RECORD).ok_or_else(|| {
            EmmaError::Format("checkpoint has no model description record".into())
        })?;
        let VolumePayload::U8(bytes) = &rec.payload else {
            return Err(EmmaError::Format("model description record must hold bytes".into()));
        };
        serde_json::from_slice(bytes)
            .map_err(|e| EmmaError::Format(format!("invalid model description: {e}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
            out.extend_from_slice(r.name.as_bytes());
            out.push(r.payload.dtype().tag());
            out.extend_from_slice(&(r.extents.len() as u32).to_le_bytes());
            for e in &r.extents {
                out.extend_from_slice(&(*e as u64).to_le_bytes());
            }
            match &r.payload {
                VolumePayload::F32(v) => {
                    for x in v {
                        out.extend_from_slice(&x.to_le_bytes());
                    }
                }
                VolumePayload::F64(v) => {
                    for x in v {
                        out.extend_from_slice(&x.to_le_bytes());
                    }
                }
                VolumePayload::U8(v) => out.extend_from_slice(v),
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "checkpoint");
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(EmmaError::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(EmmaError::Format(format!("unsupported checkpoint version {version}")));
        }
        let count = r.u32()? as usize;
        let mut records = Vec::with_capacity(count);
        for _ in 0..count {
            let name = r.string()?;
            let dtype = Dtype::from_tag(r.u8()?)
                .ok_or_else(|| EmmaError::Format("unknown checkpoint element type tag".into()))?;
            let rank = r.u32()? as usize;
            let mut extents = Vec::with_capacity(rank);
            for _ in 0..rank {
                extents.push(r.u64_as_usize()?);
            }
            let n: usize = extents.iter().product();
            let payload = match dtype {
                Dtype::F32 => {
                    let raw = r.take(n * 4)?;
                    VolumePayload::F32(
                        raw.chunks_exact(4)
                            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                            .collect(),
                    )
                }
                Dtype::F64 => {
                    let raw = r.take(n * 8)?;
                    VolumePayload::F64(
                        raw.chunks_exact(8)
                            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                            .collect(),
                    )
                }
                Dtype::U8 => VolumePayload::U8(r.take(n)?.to_vec()),
            };
            records.push(CheckpointRecord { name, extents, payload });
        }
        let body_len = r.position();
        let stored_crc = r.u32()?;
        r.expect_end()?;
        let actual = crc32fast::hash(&bytes[..body_len]);
        if actual != stored_crc {
            return Err(EmmaError::Crc(format!(
                "checkpoint checksum mismatch: stored {stored_crc:#010x}, computed {actual:#010x}"
            )));
        }
        Ok(CheckpointFile { records })
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        fsio::atomic_write(path, &self.to_bytes())
    }

    pub fn read_file(path: &Path) -> Result<Self> {
        let bytes = fsio::read_bytes(path)?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            EmmaError::Format(m) => EmmaError::Format(format!("{}: {m}", path.display())),
            EmmaError::Crc(m) => EmmaError::Crc(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}
