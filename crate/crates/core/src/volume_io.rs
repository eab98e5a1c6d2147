//! BRNF volume files.
//!
//! ```text
//! offset size  field
//! 0      4     magic "BRNF"
//! 4      2     version (u16, currently 1)
//! 6      1     dtype: 1 = f32, 2 = f64
//! 7      1     has_labels: 0 or 1
//! 8      4     channels (u32, 0 for label-only files)
//! 12     12    extents H, W, D (u32 each)
//! 24     ...   intensities, channel-major row-major, little-endian
//!        ...   labels, one u8 per voxel (if has_labels)
//! ```

use std::path::Path;

use brainformer_tensor::{Precision, Tensor};

use crate::error::{Error, Result};
use crate::metrics::LabelVolume;
use crate::sequentializer::VolumeBlock;

pub const MAGIC: &[u8; 4] = b"BRNF";
pub const VERSION: u16 = 1;
const HEADER: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32 = 1,
    F64 = 2,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    pub fn precision(self) -> Precision {
        match self {
            Dtype::F32 => Precision::F32,
            Dtype::F64 => Precision::F64,
        }
    }
}

/// Decoded contents of a BRNF file.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeFile {
    pub extents: [usize; 3],
    pub dtype: Dtype,
    pub intensities: Option<Tensor>,
    pub labels: Option<LabelVolume>,
}

impl VolumeFile {
    pub fn from_block(block: &VolumeBlock, dtype: Dtype) -> Self {
        VolumeFile {
            extents: block.extents(),
            dtype,
            intensities: Some(block.intensities.clone()),
            labels: block.labels.clone(),
        }
    }

    pub fn labels_only(labels: LabelVolume) -> Self {
        VolumeFile {
            extents: *labels.extents(),
            dtype: Dtype::F32,
            intensities: None,
            labels: Some(labels),
        }
    }

    pub fn into_block(self) -> Result<VolumeBlock> {
        let intensities = self
            .intensities
            .ok_or_else(|| Error::Data("volume file holds labels only".into()))?;
        VolumeBlock::new(intensities, self.labels)
    }

    pub fn encode(&self) -> Vec<u8> {
        let channels = self.intensities.as_ref().map_or(0, |t| t.shape()[0]);
        let voxels: usize = self.extents.iter().product();
        let mut out = Vec::with_capacity(HEADER + channels * voxels * self.dtype.width() + voxels);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.dtype as u8);
        out.push(self.labels.is_some() as u8);
        out.extend_from_slice(&(channels as u32).to_le_bytes());
        for e in self.extents {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        if let Some(t) = &self.intensities {
            for &x in t.data() {
                match self.dtype {
                    Dtype::F32 => out.extend_from_slice(&(x as f32).to_le_bytes()),
                    Dtype::F64 => out.extend_from_slice(&x.to_le_bytes()),
                }
            }
        }
        if let Some(l) = &self.labels {
            out.extend_from_slice(l.voxels());
        }
        out
    }

    /// Parses a complete file image; the error string is the reason.
    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < HEADER {
            return Err(format!("truncated header ({} bytes)", bytes.len()));
        }
        if &bytes[..4] != MAGIC {
            return Err("bad magic (not a BRNF file)".into());
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(format!("unsupported version {version} (expected {VERSION})"));
        }
        let dtype = match bytes[6] {
            1 => Dtype::F32,
            2 => Dtype::F64,
            other => return Err(format!("unknown dtype code {other}")),
        };
        let has_labels = match bytes[7] {
            0 => false,
            1 => true,
            other => return Err(format!("invalid label flag {other}")),
        };
        let channels = u32_at(8);
        let extents = [u32_at(12), u32_at(16), u32_at(20)];
        if extents.contains(&0) {
            return Err(format!("zero extent in {extents:?}"));
        }
        if channels == 0 && !has_labels {
            return Err("file holds neither intensities nor labels".into());
        }
        let voxels = extents
            .iter()
            .try_fold(1usize, |a, &e| a.checked_mul(e))
            .ok_or("extents overflow")?;
        let payload = channels * voxels * dtype.width();
        let expected = HEADER + payload + if has_labels { voxels } else { 0 };
        if bytes.len() != expected {
            return Err(format!(
                "size mismatch: header implies {expected} bytes, file has {}",
                bytes.len()
            ));
        }
        let body = &bytes[HEADER..HEADER + payload];
        let intensities = if channels > 0 {
            let data: Vec<f64> = match dtype {
                Dtype::F32 => body
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect(),
                Dtype::F64 => body
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            };
            let mut t = Tensor::new(vec![channels, extents[0], extents[1], extents[2]], data)
                .map_err(|e| e.to_string())?;
            t.set_precision(dtype.precision());
            Some(t)
        } else {
            None
        };
        let labels = if has_labels {
            Some(LabelVolume::new(extents, bytes[HEADER + payload..].to_vec()).map_err(|e| e.to_string())?)
        } else {
            None
        };
        Ok(VolumeFile {
            extents,
            dtype,
            intensities,
            labels,
        })
    }
}

pub fn write_volume_file(path: &Path, file: &VolumeFile) -> Result<()> {
    std::fs::write(path, file.encode()).map_err(|e| Error::io(path, e))
}

pub fn read_volume_file(path: &Path) -> Result<VolumeFile> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    VolumeFile::decode(&bytes).map_err(|reason| Error::format(path, reason))
}

pub fn write_volume(path: &Path, block: &VolumeBlock, dtype: Dtype) -> Result<()> {
    write_volume_file(path, &VolumeFile::from_block(block, dtype))
}

pub fn read_volume(path: &Path) -> Result<VolumeBlock> {
    let file = read_volume_file(path)?;
    if file.intensities.is_none() {
        return Err(Error::format(path, "file holds labels only"));
    }
    file.into_block()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> VolumeFile {
        let t = Tensor::new(vec![2, 1, 1, 2], vec![0.5, -1.25, 3.0, 1e-3]).unwrap();
        let l = LabelVolume::new([1, 1, 2], vec![0, 3]).unwrap();
        VolumeFile::from_block(&VolumeBlock::new(t, Some(l)).unwrap(), Dtype::F64)
    }

    #[test]
    fn header_layout() {
        let bytes = sample().encode();
        assert_eq!(&bytes[..4], b"BRNF");
        assert_eq!(bytes.len(), 24 + 4 * 8 + 2);
        assert_eq!(bytes[6], 2);
        assert_eq!(bytes[7], 1);
    }

    #[test]
    fn rejects_corruption() {
        let good = sample().encode();
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(VolumeFile::decode(&bad).unwrap_err().contains("magic"));
        let mut bad = good.clone();
        bad[4] = 9;
        assert!(VolumeFile::decode(&bad).unwrap_err().contains("version"));
        assert!(VolumeFile::decode(&good[..good.len() - 1])
            .unwrap_err()
            .contains("size mismatch"));
        let mut bad = good.clone();
        bad[12..16].copy_from_slice(&0u32.to_le_bytes());
        assert!(VolumeFile::decode(&bad).unwrap_err().contains("zero extent"));
        let mut bad = good;
        *bad.last_mut().unwrap() = 7;
        assert!(VolumeFile::decode(&bad).is_err());
    }

    #[test]
    fn label_only_files() {
        let l = LabelVolume::new([1, 2, 1], vec![2, 1]).unwrap();
        let f = VolumeFile::labels_only(l);
        let back = VolumeFile::decode(&f.encode()).unwrap();
        assert_eq!(back, f);
        assert!(back.into_block().is_err());
    }
}
