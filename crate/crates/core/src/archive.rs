//! Versioned, checksummed binary archives.
//!
//! Layout: 8-byte magic, `u32` format version (LE), `u64` payload length
//! (LE), SHA-256 of the payload, then the bincode-encoded payload.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const HEADER_LEN: usize = 8 + 4 + 8 + 32;

pub fn encode<T: Serialize>(magic: &[u8; 8], version: u32, payload: &T) -> Result<Vec<u8>> {
    let body = bincode::serialize(payload).map_err(|e| Error::Format(format!("encode failed: {e}")))?;
    let mut out = Vec::with_capacity(HEADER_LEN + body.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&(body.len() as u64).to_le_bytes());
    out.extend_from_slice(&Sha256::digest(&body));
    out.extend_from_slice(&body);
    Ok(out)
}

pub fn decode<T: DeserializeOwned>(magic: &[u8; 8], version: u32, bytes: &[u8]) -> Result<T> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!("archive truncated: {} bytes is shorter than the header", bytes.len())));
    }
    if &bytes[..8] != magic {
        return Err(Error::Format("wrong archive type (magic mismatch)".into()));
    }
    let found = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if found != version {
        return Err(Error::Format(format!("unsupported format version {found}, expected {version}")));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = &bytes[HEADER_LEN..];
    if body.len() != len {
        return Err(Error::Format(format!("archive truncated: payload has {} of {len} bytes", body.len())));
    }
    if Sha256::digest(body).as_slice() != &bytes[20..52] {
        return Err(Error::Format("payload checksum mismatch".into()));
    }
    bincode::deserialize(body).map_err(|e| Error::Format(format!("decode failed: {e}")))
}

pub fn write<T: Serialize>(path: &Path, magic: &[u8; 8], version: u32, payload: &T) -> Result<()> {
    let bytes = encode(magic, version, payload)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read<T: DeserializeOwned>(path: &Path, magic: &[u8; 8], version: u32) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(magic, version, &bytes)
}
