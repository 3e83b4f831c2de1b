//! On-disk format shared by network checkpoints and buffer snapshots: one
//! line of JSON header, a newline, then the payload as little-endian `f64`s.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::{Error, Result};

pub(crate) fn write<H: Serialize>(path: &Path, header: &H, values: &[f64]) -> Result<()> {
    let mut bytes = serde_json::to_vec(header)?;
    bytes.push(b'\n');
    bytes.reserve(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn read<H: DeserializeOwned>(path: &Path) -> Result<(H, Vec<f64>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let split = bytes.iter().position(|b| *b == b'\n').ok_or_else(|| Error::Format {
        what: "binary file",
        detail: format!("{}: missing header line", path.display()),
    })?;
    let header: H = serde_json::from_slice(&bytes[..split])?;
    let payload = &bytes[split + 1..];
    if payload.len() % 8 != 0 {
        return Err(Error::Format {
            what: "binary file",
            detail: format!("{}: payload length {} is not a multiple of 8", path.display(), payload.len()),
        });
    }
    let values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok((header, values))
}
