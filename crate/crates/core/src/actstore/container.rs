//! Shared binary container used by shards and model checkpoints.
//!
//! Layout (little-endian):
//! - bytes 0..4: magic
//! - bytes 4..8: version (u32, currently 1)
//! - bytes 8..12: header length `H` (u32)
//! - bytes 12..12+H: UTF-8 JSON header
//! - payload: f32 values

use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub const VERSION: u32 = 1;
const PREAMBLE: usize = 12;

pub fn encode<H: Serialize>(magic: &[u8; 4], header: &H, payload: &[f32]) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(header)?;
    let header_len = u32::try_from(header.len()).map_err(|_| Error::InvalidHeader("header exceeds 4 GiB".into()))?;
    let mut out = Vec::with_capacity(PREAMBLE + header.len() + 4 * payload.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(&header);
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Splits a container into its parsed header and raw payload bytes.
pub fn decode<'a, H: DeserializeOwned>(path: &Path, bytes: &'a [u8], magic: &[u8; 4]) -> Result<(H, &'a [u8])> {
    if bytes.len() < PREAMBLE {
        return Err(Error::Truncated {
            what: "preamble",
            expected: PREAMBLE as u64,
            actual: bytes.len() as u64,
        });
    }
    let found: [u8; 4] = bytes[0..4].try_into().expect("slice of length 4");
    if &found != magic {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: *magic,
            found,
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("slice of length 4"));
    if version != VERSION {
        return Err(Error::UnsupportedVersion {
            expected: VERSION,
            found: version,
        });
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().expect("slice of length 4")) as usize;
    let rest = &bytes[PREAMBLE..];
    if rest.len() < header_len {
        return Err(Error::Truncated {
            what: "header",
            expected: header_len as u64,
            actual: rest.len() as u64,
        });
    }
    let header = serde_json::from_slice(&rest[..header_len]).map_err(|e| Error::InvalidHeader(e.to_string()))?;
    Ok((header, &rest[header_len..]))
}

/// Checks the payload holds exactly `expected_values` f32s and decodes them.
pub fn payload_f32(payload: &[u8], expected_values: usize) -> Result<Vec<f32>> {
    let expected = 4 * expected_values as u64;
    let actual = payload.len() as u64;
    if actual < expected {
        return Err(Error::Truncated {
            what: "payload",
            expected,
            actual,
        });
    }
    if actual > expected {
        return Err(Error::DimensionMismatch(format!(
            "payload holds {actual} bytes but the header describes {expected}"
        )));
    }
    Ok(payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Writes `bytes` to a temp file in the destination directory, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn write<H: Serialize>(path: &Path, magic: &[u8; 4], header: &H, payload: &[f32]) -> Result<()> {
    write_atomic(path, &encode(magic, header, payload)?)
}

/// Reads a container and returns its header plus exactly `expected(&header)` payload values.
pub fn read<H: DeserializeOwned>(
    path: &Path,
    magic: &[u8; 4],
    expected: impl FnOnce(&H) -> Result<usize>,
) -> Result<(H, Vec<f32>)> {
    let bytes = std::fs::read(path)?;
    let (header, payload) = decode::<H>(path, &bytes, magic)?;
    let n = expected(&header)?;
    let values = payload_f32(payload, n)?;
    Ok((header, values))
}
