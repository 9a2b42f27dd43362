//! Bit-exact readers and writers for the voxel formats.
//!
//! - `.bin` / `.invalid`: occupancy bits packed MSB-first, x-major voxel
//!   order;
//! - `.label`: one little-endian u16 per voxel;
//! - CVOX export: magic `CVOX1\n`, u32 little-endian header length, UTF-8
//!   JSON header `{dims, voxel_size, origin, classes}`, then the u16 label
//!   payload.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::LabelGrid;
use crate::geometry::VolumeSpec;

const CVOX_MAGIC: &[u8; 6] = b"CVOX1\n";

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("payload length {got} does not match voxel count {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("bad magic: expected CVOX1")]
    BadMagic,
    #[error("truncated stream: {0}")]
    Truncated(&'static str),
    #[error("malformed header: {0}")]
    BadHeader(String),
    #[error("header dims {header:?} disagree with payload of {payload} labels")]
    DimsMismatch { header: [usize; 3], payload: usize },
}

/// Unpack MSB-first occupancy bits: bit `i` of byte `b` is voxel `b*8 + i`.
pub fn read_packed_bits(bytes: &[u8], voxel_count: usize) -> Result<Vec<bool>, FormatError> {
    let expected = voxel_count.div_ceil(8);
    if bytes.len() != expected {
        return Err(FormatError::LengthMismatch { expected, got: bytes.len() });
    }
    let mut out = Vec::with_capacity(voxel_count);
    for i in 0..voxel_count {
        let byte = bytes[i / 8];
        let bit = 7 - (i % 8);
        out.push((byte >> bit) & 1 == 1);
    }
    Ok(out)
}

/// Inverse of [`read_packed_bits`]; trailing bits of the last byte are zero.
pub fn write_packed_bits(bits: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        if b {
            out[i / 8] |= 1 << (7 - (i % 8));
        }
    }
    out
}

/// One little-endian u16 label per voxel, x-major.
pub fn read_labels(bytes: &[u8], voxel_count: usize) -> Result<Vec<u16>, FormatError> {
    let expected = 2 * voxel_count;
    if bytes.len() != expected {
        return Err(FormatError::LengthMismatch { expected, got: bytes.len() });
    }
    Ok(bytes
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect())
}

pub fn write_labels(labels: &[u16]) -> Vec<u8> {
    let mut out = Vec::with_capacity(labels.len() * 2);
    for &l in labels {
        out.extend_from_slice(&l.to_le_bytes());
    }
    out
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CvoxHeader {
    pub dims: [usize; 3],
    pub voxel_size: f64,
    pub origin: [f64; 3],
    pub classes: Vec<String>,
}

pub fn write_cvox<W: Write>(
    grid: &LabelGrid,
    classes: &[String],
    mut out: W,
) -> Result<(), FormatError> {
    let header = CvoxHeader {
        dims: grid.spec.dims,
        voxel_size: grid.spec.voxel_size,
        origin: grid.spec.origin,
        classes: classes.to_vec(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| FormatError::BadHeader(e.to_string()))?;
    out.write_all(CVOX_MAGIC)?;
    out.write_all(&(json.len() as u32).to_le_bytes())?;
    out.write_all(&json)?;
    out.write_all(&write_labels(&grid.labels))?;
    Ok(())
}

pub fn read_cvox<R: Read>(mut input: R) -> Result<(LabelGrid, CvoxHeader), FormatError> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    if bytes.len() < CVOX_MAGIC.len() + 4 {
        return Err(FormatError::Truncated("missing magic or header length"));
    }
    if &bytes[..6] != CVOX_MAGIC {
        return Err(FormatError::BadMagic);
    }
    let hlen = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let payload_off = 10 + hlen;
    if bytes.len() < payload_off {
        return Err(FormatError::Truncated("header shorter than declared"));
    }
    let header: CvoxHeader = serde_json::from_slice(&bytes[10..payload_off])
        .map_err(|e| FormatError::BadHeader(e.to_string()))?;
    let n: usize = header.dims.iter().product();
    let payload = &bytes[payload_off..];
    if payload.len() < 2 * n {
        return Err(FormatError::Truncated("label payload"));
    }
    if payload.len() != 2 * n {
        return Err(FormatError::DimsMismatch { header: header.dims, payload: payload.len() / 2 });
    }
    let labels = read_labels(payload, n)?;
    let spec = VolumeSpec::new(header.origin, header.dims, header.voxel_size)
        .map_err(|e| FormatError::BadHeader(e.to_string()))?;
    Ok((LabelGrid::new(spec, labels), header))
}
