//! The `EMMAVOL1` volume container and the multimodal case layout.
//!
//! Byte layout (all integers little-endian):
//!
//! ```text
//! magic    8  b"EMMAVOL1"
//! version  u32
//! dtype    u8           0 = f32, 1 = f64, 2 = u8
//! channels u32
//! extents  3 x u64      depth, height, width
//! spacing  3 x f64      millimetres per voxel along each axis
//! names    per channel: u32 length + UTF-8 bytes
//! data     channel-major raw little-endian values
//! crc      u32          CRC-32 (IEEE) over every preceding byte
//! ```

use crate::error::{EmmaError, Result};
use crate::scalar::{Dtype, Scalar};
use crate::tensor::Tensor;
use crate::{fsio, reader::ByteReader};
use std::path::Path;

pub const VOLUME_MAGIC: &[u8; 8] = b"EMMAVOL1";
pub const VOLUME_VERSION: u32 = 1;

/// Modality channels of a case, in file order.
pub const MODALITIES: [&str; 4] = ["FLAIR", "T1", "T1ce", "T2"];

/// Channel name used by label volumes.
pub const LABEL_CHANNEL: &str = "label";

/// Segmentation palette: background, necrotic/non-enhancing core, oedema,
/// enhancing core. Label 3 is unused.
pub const SEG_LABELS: [u8; 4] = [0, 1, 2, 4];

/// Dense class index (0..4) for a stored label value.
pub fn label_to_class(label: u8) -> Result<usize> {
    SEG_LABELS
        .iter()
        .position(|&l| l == label)
        .ok_or_else(|| EmmaError::Data(format!("unexpected segmentation label {label}")))
}

/// Stored label value for a dense class index.
pub fn class_to_label(class: usize) -> Result<u8> {
    SEG_LABELS
        .get(class)
        .copied()
        .ok_or_else(|| EmmaError::Data(format!("class index {class} out of range")))
}

#[derive(Debug, Clone, PartialEq)]
pub enum VolumePayload {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
}

impl VolumePayload {
    pub fn dtype(&self) -> Dtype {
        match self {
            VolumePayload::F32(_) => Dtype::F32,
            VolumePayload::F64(_) => Dtype::F64,
            VolumePayload::U8(_) => Dtype::U8,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            VolumePayload::F32(v) => v.len(),
            VolumePayload::F64(v) => v.len(),
            VolumePayload::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A spatially calibrated multi-channel volume as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeContainer {
    pub extents: [usize; 3],
    pub spacing: [f64; 3],
    pub channel_names: Vec<String>,
    pub payload: VolumePayload,
}

impl VolumeContainer {
    pub fn new(
        extents: [usize; 3],
        spacing: [f64; 3],
        channel_names: Vec<String>,
        payload: VolumePayload,
    ) -> Result<Self> {
        if extents.iter().any(|&e| e == 0) {
            return Err(EmmaError::Dimension(format!("volume extents must be >= 1, got {extents:?}")));
        }
        if spacing.iter().any(|&s| !s.is_finite() || s <= 0.0) {
            return Err(EmmaError::Dimension(format!(
                "voxel spacing must be positive and finite, got {spacing:?}"
            )));
        }
        if channel_names.is_empty() {
            return Err(EmmaError::Dimension("volume needs at least one channel".into()));
        }
        let expected = channel_names.len() * extents.iter().product::<usize>();
        if payload.len() != expected {
            return Err(EmmaError::Dimension(format!(
                "payload holds {} values, {} channels x {:?} needs {expected}",
                payload.len(),
                channel_names.len(),
                extents
            )));
        }
        Ok(VolumeContainer { extents, spacing, channel_names, payload })
    }

    /// Wraps a `[C, D, H, W]` tensor.
    pub fn from_tensor<T: Scalar>(
        tensor: &Tensor<T>,
        spacing: [f64; 3],
        channel_names: Vec<String>,
    ) -> Result<Self> {
        let [d, h, w] = tensor.spatial()?;
        let payload = match T::DTYPE {
            Dtype::F32 => {
                VolumePayload::F32(tensor.data().iter().map(|v| v.to_f64() as f32).collect())
            }
            _ => VolumePayload::F64(tensor.data().iter().map(|v| v.to_f64()).collect()),
        };
        VolumeContainer::new([d, h, w], spacing, channel_names, payload)
    }

    pub fn channel_count(&self) -> usize {
        self.channel_names.len()
    }

    pub fn voxel_count(&self) -> usize {
        self.extents.iter().product()
    }

    /// Converts the payload into a `[C, D, H, W]` tensor, casting floats as
    /// needed. Byte payloads are labels, not intensities.
    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        let shape = vec![self.channel_count(), self.extents[0], self.extents[1], self.extents[2]];
        let data: Vec<T> = match &self.payload {
            VolumePayload::F32(v) => v.iter().map(|&x| T::from_f64(x as f64)).collect(),
            VolumePayload::F64(v) => v.iter().map(|&x| T::from_f64(x)).collect(),
            VolumePayload::U8(_) => {
                return Err(EmmaError::Format(
                    "volume holds byte labels, not floating-point intensities".into(),
                ))
            }
        };
        Tensor::new(shape, data)
    }

    /// Returns the label bytes of a single-channel u8 volume.
    pub fn to_labels(&self) -> Result<&[u8]> {
        match &self.payload {
            VolumePayload::U8(v) if self.channel_count() == 1 => Ok(v),
            VolumePayload::U8(_) => {
                Err(EmmaError::Format("label volume must have exactly one channel".into()))
            }
            _ => Err(EmmaError::Format("volume does not hold byte labels".into())),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + self.payload.len() * self.payload.dtype().size());
        out.extend_from_slice(VOLUME_MAGIC);
        out.extend_from_slice(&VOLUME_VERSION.to_le_bytes());
        out.push(self.payload.dtype().tag());
        out.extend_from_slice(&(self.channel_count() as u32).to_le_bytes());
        for e in self.extents {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for s in self.spacing {
            out.extend_from_slice(&s.to_le_bytes());
        }
        for name in &self.channel_names {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
        }
        match &self.payload {
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
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "volume container");
        let magic = r.take(8)?;
        if magic != VOLUME_MAGIC {
            return Err(EmmaError::Format("not a volume container (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VOLUME_VERSION {
            return Err(EmmaError::Format(format!("unsupported volume version {version}")));
        }
        let dtype = Dtype::from_tag(r.u8()?)
            .ok_or_else(|| EmmaError::Format("unknown volume element type tag".into()))?;
        let channels = r.u32()? as usize;
        let mut extents = [0usize; 3];
        for e in &mut extents {
            *e = r.u64_as_usize()?;
        }
        let mut spacing = [0f64; 3];
        for s in &mut spacing {
            *s = r.f64()?;
        }
        let mut channel_names = Vec::with_capacity(channels);
        for _ in 0..channels {
            channel_names.push(r.string()?);
        }
        let count = channels
            .checked_mul(extents.iter().product::<usize>())
            .ok_or_else(|| EmmaError::Format("volume size overflows".into()))?;
        let payload = match dtype {
            Dtype::F32 => {
                let raw = r.take(count * 4)?;
                VolumePayload::F32(
                    raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
                )
            }
            Dtype::F64 => {
                let raw = r.take(count * 8)?;
                VolumePayload::F64(
                    raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
                )
            }
            Dtype::U8 => VolumePayload::U8(r.take(count)?.to_vec()),
        };
        let body_len = r.position();
        let stored_crc = r.u32()?;
        r.expect_end()?;
        let actual = crc32fast::hash(&bytes[..body_len]);
        if actual != stored_crc {
            return Err(EmmaError::Crc(format!(
                "volume checksum mismatch: stored {stored_crc:#010x}, computed {actual:#010x}"
            )));
        }
        VolumeContainer::new(extents, spacing, channel_names, payload)
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

/// Voxel labels with their geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    pub extents: [usize; 3],
    pub spacing: [f64; 3],
    pub labels: Vec<u8>,
}

impl LabelVolume {
    pub fn new(extents: [usize; 3], spacing: [f64; 3], labels: Vec<u8>) -> Result<Self> {
        if labels.len() != extents.iter().product::<usize>() {
            return Err(EmmaError::Dimension(format!(
                "label buffer holds {} voxels, extents {extents:?} need {}",
                labels.len(),
                extents.iter().product::<usize>()
            )));
        }
        Ok(LabelVolume { extents, spacing, labels })
    }

    pub fn to_container(&self) -> VolumeContainer {
        VolumeContainer::new(
            self.extents,
            self.spacing,
            vec![LABEL_CHANNEL.to_string()],
            VolumePayload::U8(self.labels.clone()),
        )
        .expect("label volume geometry is validated on construction")
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        self.to_container().write_file(path)
    }

    pub fn read_file(path: &Path) -> Result<Self> {
        let c = VolumeContainer::read_file(path)?;
        let labels = c.to_labels()?.to_vec();
        LabelVolume::new(c.extents, c.spacing, labels)
    }
}

/// A loaded multimodal case: four co-registered modalities, optionally with
/// reference labels.
#[derive(Debug, Clone)]
pub struct VolumeCase {
    pub id: String,
    pub spacing: [f64; 3],
    /// `[4, D, H, W]` intensities in [`MODALITIES`] order.
    pub modalities: Tensor<f64>,
}

impl VolumeCase {
    pub fn extents(&self) -> [usize; 3] {
        self.modalities.spatial().expect("case tensors are rank 4")
    }

    /// Reads `<id>.emv` from `dir`, checking the channel roster.
    pub fn read(dir: &Path, id: &str) -> Result<Self> {
        let path = dir.join(format!("{id}.emv"));
        let c = VolumeContainer::read_file(&path)?;
        if c.channel_names != MODALITIES {
            return Err(EmmaError::Format(format!(
                "{}: expected channels {MODALITIES:?}, found {:?}",
                path.display(),
                c.channel_names
            )));
        }
        Ok(VolumeCase { id: id.to_string(), spacing: c.spacing, modalities: c.to_tensor()? })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let c = VolumeContainer::from_tensor(
            &self.modalities,
            self.spacing,
            MODALITIES.iter().map(|s| s.to_string()).collect(),
        )?;
        c.write_file(&dir.join(format!("{}.emv", self.id)))
    }

    pub fn labels_path(dir: &Path, id: &str) -> std::path::PathBuf {
        dir.join(format!("{id}.seg.emv"))
    }

    pub fn read_labels(dir: &Path, id: &str) -> Result<LabelVolume> {
        LabelVolume::read_file(&Self::labels_path(dir, id))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> VolumeContainer {
        VolumeContainer::new(
            [2, 3, 4],
            [1.0, 1.0, 1.5],
            vec!["FLAIR".into(), "T1".into()],
            VolumePayload::F32((0..48).map(|i| i as f32 * 0.5).collect()),
        )
        .unwrap()
    }

    #[test]
    fn round_trips_through_bytes() {
        let v = sample();
        let back = VolumeContainer::from_bytes(&v.to_bytes()).unwrap();
        assert_eq!(v, back);
    }

    #[test]
    fn bad_magic_is_a_format_error() {
        let mut bytes = sample().to_bytes();
        bytes[0] = b'X';
        let err = VolumeContainer::from_bytes(&bytes).unwrap_err();
        assert!(matches!(err, EmmaError::Format(_)), "got {err}");
    }

    #[test]
    fn flipped_payload_bit_is_a_checksum_error() {
        let mut bytes = sample().to_bytes();
        let mid = bytes.len() - 20;
        bytes[mid] ^= 0x40;
        let err = VolumeContainer::from_bytes(&bytes).unwrap_err();
        assert!(matches!(err, EmmaError::Crc(_)), "got {err}");
    }

    #[test]
    fn truncation_is_reported_before_checksum() {
        let bytes = sample().to_bytes();
        let err = VolumeContainer::from_bytes(&bytes[..bytes.len() - 9]).unwrap_err();
        match err {
            EmmaError::Format(m) => assert!(m.contains("truncated"), "message: {m}"),
            other => panic!("expected format error, got {other}"),
        }
    }

    #[test]
    fn file_round_trip_preserves_f64_payload() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vol.emv");
        let v = VolumeContainer::new(
            [2, 2, 2],
            [0.5, 0.5, 0.5],
            vec!["label-free".into()],
            VolumePayload::F64(vec![1.25; 8]),
        )
        .unwrap();
        v.write_file(&path).unwrap();
        assert_eq!(VolumeContainer::read_file(&path).unwrap(), v);
    }

    #[test]
    fn label_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let lv = LabelVolume::new([2, 2, 2], [1.0; 3], vec![0, 1, 2, 4, 0, 0, 1, 4]).unwrap();
        let path = dir.path().join("case.seg.emv");
        lv.write_file(&path).unwrap();
        assert_eq!(LabelVolume::read_file(&path).unwrap(), lv);
    }

    #[test]
    fn zero_extent_is_rejected() {
        let err = VolumeContainer::new(
            [0, 2, 2],
            [1.0; 3],
            vec!["FLAIR".into()],
            VolumePayload::F32(vec![]),
        )
        .unwrap_err();
        assert!(matches!(err, EmmaError::Dimension(_)));
    }
}
