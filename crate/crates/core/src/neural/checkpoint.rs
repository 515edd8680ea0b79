//! Binary checkpoint: `"TCLCKPT\0"`, u32 version, u32 header length, JSON
//! header, u32 tensor count, then per tensor u32 rows, u32 cols and
//! little-endian f64 values. Training metadata goes to a `.json` sidecar.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::Tensor2;
use crate::env::ObsNormalization;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"TCLCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    /// Agent family, e.g. `"ppo_he"`.
    pub kind: String,
    /// Free-form architecture descriptor interpreted by the agent family.
    pub architecture: serde_json::Value,
    pub normalization: ObsNormalization,
    pub shapes: Vec<[usize; 2]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: Vec<Tensor2>,
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| Error::Format("truncated checkpoint".into()))?;
    Ok(u32::from_le_bytes(b))
}

impl Checkpoint {
    pub fn new(kind: &str, architecture: serde_json::Value, normalization: ObsNormalization, params: Vec<Tensor2>) -> Self {
        let shapes = params.iter().map(|p| [p.nrows(), p.ncols()]).collect();
        Self {
            header: CheckpointHeader {
                kind: kind.into(),
                architecture,
                normalization,
                shapes,
            },
            params,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::with_capacity(64 + header.len() + 8 * self.params.iter().map(|p| p.len()).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&(p.nrows() as u32).to_le_bytes());
            out.extend_from_slice(&(p.ncols() as u32).to_le_bytes());
            for v in p.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| Error::Format("truncated checkpoint".into()))?;
        if &magic != MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let len = read_u32(&mut r)? as usize;
        if r.len() < len {
            return Err(Error::Format("truncated checkpoint header".into()));
        }
        let header: CheckpointHeader = serde_json::from_slice(&r[..len])?;
        r = &r[len..];
        let count = read_u32(&mut r)? as usize;
        if count != header.shapes.len() {
            return Err(Error::Format("tensor count does not match header".into()));
        }
        let mut params = Vec::with_capacity(count);
        for shape in &header.shapes {
            let rows = read_u32(&mut r)? as usize;
            let cols = read_u32(&mut r)? as usize;
            if [rows, cols] != *shape {
                return Err(Error::Format(format!("tensor shape {rows}x{cols} does not match header {shape:?}")));
            }
            let n = rows * cols;
            if r.len() < 8 * n {
                return Err(Error::Format("truncated tensor data".into()));
            }
            let values: Vec<f64> = r[..8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Format("non-finite parameter in checkpoint".into()));
            }
            r = &r[8 * n..];
            params.push(Array2::from_shape_vec((rows, cols), values).expect("length checked"));
        }
        if !r.is_empty() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(Self { header, params })
    }

    /// Write the checkpoint and, if given, the metadata sidecar.
    pub fn save(&self, path: &Path, metadata: Option<&serde_json::Value>) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        if let Some(meta) = metadata {
            fs::write(sidecar(path), serde_json::to_string_pretty(meta)?)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn load_metadata(path: &Path) -> Result<Option<serde_json::Value>> {
        let p = sidecar(path);
        if !p.exists() {
            return Ok(None);
        }
        Ok(Some(serde_json::from_str(&fs::read_to_string(p)?)?))
    }
}
