//! Tensor snapshot files for parameter checkpoints.
//!
//! One file per named parameter: magic `NDG1`, u32 little-endian rank, one
//! u64 little-endian size per dimension, then raw little-endian 4-byte floats
//! in row-major order. A plain-text manifest maps parameter names to file
//! names, one `name<TAB>file` line each, sorted by name.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use super::tensor::{Scalar, TensorData};

const MAGIC: &[u8; 4] = b"NDG1";

#[derive(Debug, Error)]
pub enum SnapshotError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic in {0}: expected NDG1")]
    BadMagic(String),
    #[error("truncated snapshot {0}")]
    Truncated(String),
    #[error("implausible rank {rank} in {path}")]
    BadRank { path: String, rank: u32 },
    #[error("malformed manifest line {line} in {path}")]
    BadManifest { path: String, line: usize },
}

pub fn write_tensor_snapshot<T: Scalar>(
    path: &Path,
    tensor: &TensorData<T>,
) -> Result<(), SnapshotError> {
    let mut buf = Vec::with_capacity(16 + tensor.numel() * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
    for &d in tensor.shape() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in tensor.data() {
        buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_tensor_snapshot<T: Scalar>(path: &Path) -> Result<TensorData<T>, SnapshotError> {
    let name = path.display().to_string();
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 8 {
        return Err(SnapshotError::Truncated(name));
    }
    if &bytes[..4] != MAGIC {
        return Err(SnapshotError::BadMagic(name));
    }
    let rank = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if rank > 8 {
        return Err(SnapshotError::BadRank { path: name, rank });
    }
    let header = 8 + rank as usize * 8;
    if bytes.len() < header {
        return Err(SnapshotError::Truncated(name));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    for i in 0..rank as usize {
        let off = 8 + i * 8;
        shape.push(u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap()) as usize);
    }
    let numel: usize = shape.iter().product();
    if bytes.len() != header + numel * 4 {
        return Err(SnapshotError::Truncated(name));
    }
    let data: Vec<T> = bytes[header..]
        .chunks_exact(4)
        .map(|c| T::from_f64(f32::from_le_bytes(c.try_into().unwrap()) as f64))
        .collect();
    Ok(TensorData::new(shape, data))
}

/// Write a checkpoint manifest plus one snapshot file per parameter into `dir`.
pub fn write_manifest<T: Scalar>(
    dir: &Path,
    params: &BTreeMap<String, TensorData<T>>,
) -> Result<(), SnapshotError> {
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    for (name, tensor) in params {
        let file = format!("{}.ndg", name.replace('/', "_"));
        write_tensor_snapshot(&dir.join(&file), tensor)?;
        manifest.push_str(name);
        manifest.push('\t');
        manifest.push_str(&file);
        manifest.push('\n');
    }
    fs::write(dir.join("manifest.txt"), manifest)?;
    Ok(())
}

/// Read a checkpoint directory written by [`write_manifest`].
pub fn read_manifest<T: Scalar>(
    dir: &Path,
) -> Result<BTreeMap<String, TensorData<T>>, SnapshotError> {
    let mpath = dir.join("manifest.txt");
    let text = fs::read_to_string(&mpath)?;
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (name, file) = line.split_once('\t').ok_or_else(|| SnapshotError::BadManifest {
            path: mpath.display().to_string(),
            line: i + 1,
        })?;
        out.insert(name.to_string(), read_tensor_snapshot(&dir.join(file))?);
    }
    Ok(out)
}
