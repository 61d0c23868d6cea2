//! Binary container shared by encoder checkpoints, retrieval indexes and
//! world files.
//!
//! Layout: the 8-byte magic `POLARKIT`, a little-endian `u64` header length,
//! a UTF-8 JSON header, then the payload as little-endian `f32`s. The header
//! records the payload length and its SHA-256 so truncation and bit rot are
//! detected before anything is decoded.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{PolarError, Result};

pub const CONTAINER_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"POLARKIT";

#[derive(Serialize, Deserialize)]
struct Envelope<H> {
    format_version: u32,
    kind: String,
    blob_len: usize,
    blob_sha256: String,
    body: H,
}

fn blob_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub(crate) fn write<H: Serialize>(path: &Path, kind: &str, body: &H, blob: &[f32]) -> Result<()> {
    let mut bytes = Vec::with_capacity(blob.len() * 4);
    for v in blob {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let envelope = Envelope {
        format_version: CONTAINER_VERSION,
        kind: kind.to_string(),
        blob_len: blob.len(),
        blob_sha256: blob_hash(&bytes),
        body,
    };
    let header = serde_json::to_vec(&envelope)?;
    let mut out = Vec::with_capacity(16 + header.len() + bytes.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&bytes);
    std::fs::write(path, out).map_err(|e| PolarError::io(path, e))
}

pub(crate) fn read<H: DeserializeOwned>(path: &Path, kind: &str) -> Result<(H, Vec<f32>)> {
    let bytes = std::fs::read(path).map_err(|e| PolarError::io(path, e))?;
    decode(path, kind, &bytes)
}

fn decode<H: DeserializeOwned>(path: &Path, kind: &str, bytes: &[u8]) -> Result<(H, Vec<f32>)> {
    let corrupt = |reason: String| PolarError::Corrupt {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(corrupt("missing container magic".into()));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let header_end = 16usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| corrupt("header runs past end of file".into()))?;
    let raw: serde_json::Value =
        serde_json::from_slice(&bytes[16..header_end]).map_err(|e| corrupt(e.to_string()))?;
    let version = raw
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| corrupt("header lacks format_version".into()))? as u32;
    if version != CONTAINER_VERSION {
        return Err(PolarError::Version {
            expected: CONTAINER_VERSION,
            found: version,
        });
    }
    let envelope: Envelope<H> = serde_json::from_value(raw).map_err(|e| corrupt(e.to_string()))?;
    if envelope.kind != kind {
        return Err(corrupt(format!("expected a {kind} file, found {}", envelope.kind)));
    }
    let payload = &bytes[header_end..];
    if payload.len() != envelope.blob_len * 4 {
        return Err(corrupt(format!(
            "payload holds {} bytes, header promises {}",
            payload.len(),
            envelope.blob_len * 4
        )));
    }
    if blob_hash(payload) != envelope.blob_sha256 {
        return Err(corrupt("payload checksum mismatch".into()));
    }
    let blob = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok((envelope.body, blob))
}

/// Lowercase hex SHA-256 of a file's bytes.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| PolarError::io(path, e))?;
    Ok(blob_hash(&bytes))
}
