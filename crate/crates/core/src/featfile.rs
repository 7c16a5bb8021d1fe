//! Little-endian binary containers for feature dumps and weight checkpoints.
//!
//! Feature dump: `"DDSPFEAT"`, version `u32`, frames `u32`, dim `u32`, then a
//! row-major `f32` payload.
//!
//! Checkpoint: `"DDSPCKPT"`, version `u32`, tensor count `u32`, then per
//! tensor: name length `u32`, UTF-8 name, rank `u32`, `rank` dims `u32`, and
//! an `f32` payload.

use std::io::{Read, Write};
use std::path::Path;

use crate::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 8] = b"DDSPFEAT";
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DDSPCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub frames: usize,
    pub dim: usize,
    pub values: Vec<f32>,
}

impl FeatureMatrix {
    pub fn from_f64(frames: usize, dim: usize, values: &[f64]) -> Self {
        assert_eq!(values.len(), frames * dim);
        Self {
            frames,
            dim,
            values: values.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + 4 * self.values.len());
        out.extend_from_slice(FEATURE_MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.frames as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        expect_magic(&mut bytes, FEATURE_MAGIC)?;
        let frames = read_u32(&mut bytes)? as usize;
        let dim = read_u32(&mut bytes)? as usize;
        let values = read_f32s(&mut bytes, frames * dim)?;
        if !bytes.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len())));
        }
        Ok(Self { frames, dim, values })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), &self.to_bytes())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// A named tensor section of a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

pub fn encode_checkpoint(tensors: &[NamedTensor]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &t.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(mut bytes: &[u8]) -> Result<Vec<NamedTensor>> {
    expect_magic(&mut bytes, CHECKPOINT_MAGIC)?;
    let count = read_u32(&mut bytes)? as usize;
    let mut tensors = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name_len = read_u32(&mut bytes)? as usize;
        let mut name = vec![0u8; name_len];
        bytes
            .read_exact(&mut name)
            .map_err(|_| Error::Format("truncated tensor name".into()))?;
        let name =
            String::from_utf8(name).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let rank = read_u32(&mut bytes)? as usize;
        let shape = (0..rank)
            .map(|_| read_u32(&mut bytes).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let values = read_f32s(&mut bytes, shape.iter().product())?;
        tensors.push(NamedTensor {
            name,
            shape,
            values,
        });
    }
    if !bytes.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len())));
    }
    Ok(tensors)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let wrap = |source| Error::Write {
        path: path.to_path_buf(),
        source,
    };
    let mut file = std::fs::File::create(path).map_err(wrap)?;
    file.write_all(bytes).map_err(wrap)
}

pub fn write_checkpoint(path: impl AsRef<Path>, tensors: &[NamedTensor]) -> Result<()> {
    write_file(path.as_ref(), &encode_checkpoint(tensors))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Vec<NamedTensor>> {
    decode_checkpoint(&std::fs::read(path)?)
}

fn expect_magic(bytes: &mut &[u8], magic: &[u8; 8]) -> Result<()> {
    let mut got = [0u8; 8];
    bytes
        .read_exact(&mut got)
        .map_err(|_| Error::Format("file too short for header".into()))?;
    if &got != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&got),
            String::from_utf8_lossy(magic)
        )));
    }
    let version = read_u32(bytes)?;
    if version != VERSION {
        return Err(Error::Unsupported(format!("container version {version}")));
    }
    Ok(())
}

fn read_u32(bytes: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    bytes
        .read_exact(&mut b)
        .map_err(|_| Error::Format("truncated header".into()))?;
    Ok(u32::from_le_bytes(b))
}

fn read_f32s(bytes: &mut &[u8], count: usize) -> Result<Vec<f32>> {
    if bytes.len() < count * 4 {
        return Err(Error::Format(format!(
            "payload holds {} bytes, need {}",
            bytes.len(),
            count * 4
        )));
    }
    let (payload, rest) = bytes.split_at(count * 4);
    *bytes = rest;
    Ok(payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feature_header_layout() {
        let m = FeatureMatrix::from_f64(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let bytes = m.to_bytes();
        assert_eq!(&bytes[..8], b"DDSPFEAT");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 3);
        assert_eq!(f32::from_le_bytes(bytes[20..24].try_into().unwrap()), 1.0);
        assert_eq!(bytes.len(), 20 + 24);
        assert_eq!(FeatureMatrix::from_bytes(&bytes).unwrap(), m);
    }

    #[test]
    fn feature_rejects_truncation_and_bad_magic() {
        let bytes = FeatureMatrix::from_f64(1, 2, &[1.0, 2.0]).to_bytes();
        assert!(FeatureMatrix::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(FeatureMatrix::from_bytes(&bad), Err(Error::Format(_))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let tensors = vec![
            NamedTensor {
                name: "block0.conv.weight".into(),
                shape: vec![3, 2, 1],
                values: vec![0.5, -1.0, 2.0, 0.0, 1e-7, 3.25],
            },
            NamedTensor {
                name: "scalar".into(),
                shape: vec![],
                values: vec![42.0],
            },
        ];
        let bytes = encode_checkpoint(&tensors);
        assert_eq!(&bytes[..8], b"DDSPCKPT");
        assert_eq!(decode_checkpoint(&bytes).unwrap(), tensors);
        assert!(decode_checkpoint(&bytes[..bytes.len() - 2]).is_err());
    }
}
