//! Checkpoint and tensor-container persistence.
//!
//! Container layout: 8-byte magic, UTF-8 JSON header (keys canonicalized
//! lexicographically), little-endian IEEE-754 single-precision blob, CRC32 of
//! the blob (little-endian u32). The header is self-delimiting JSON; offsets
//! in its tensor table are relative to the blob start. Writing the same
//! in-memory object twice produces byte-identical files.

use crate::error::{FcxError, Result};
use crate::tensor::Tensor;
use crate::zoo::{Network, NetworkSpec};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

pub const NETWORK_MAGIC: &[u8; 8] = b"FCXCKPT1";
pub const TENSORS_MAGIC: &[u8; 8] = b"FCXBLOB1";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the blob.
    offset: usize,
    /// Byte length within the blob.
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct NetworkHeader {
    format_version: u32,
    seed: u64,
    frozen: bool,
    spec: NetworkSpec,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorsHeader {
    format_version: u32,
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Canonical JSON bytes: object keys sorted lexicographically (serde_json's
/// default map is ordered), no insignificant whitespace.
fn canonical_json<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let v = serde_json::to_value(value)?;
    Ok(serde_json::to_string(&v)?.into_bytes())
}

fn write_container(
    path: &Path,
    magic: &[u8; 8],
    header: Vec<u8>,
    blob: &[u8],
) -> Result<()> {
    let crc = crc32fast::hash(blob);
    let mut file = std::fs::File::create(path)?;
    file.write_all(magic)?;
    file.write_all(&header)?;
    file.write_all(blob)?;
    file.write_all(&crc.to_le_bytes())?;
    Ok(())
}

/// Index one past the closing brace of the JSON object starting at `start`.
fn scan_json_end(bytes: &[u8], start: usize) -> Result<usize> {
    if bytes.get(start) != Some(&b'{') {
        return Err(FcxError::CorruptCheckpoint("header does not start with '{'".into()));
    }
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes[start..].iter().enumerate() {
        if in_string {
            if escaped {
                escaped = false;
            } else if b == b'\\' {
                escaped = true;
            } else if b == b'"' {
                in_string = false;
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Ok(start + i + 1);
                }
            }
            _ => {}
        }
    }
    Err(FcxError::CorruptCheckpoint("unterminated JSON header".into()))
}

fn read_container(path: &Path, magic: &[u8; 8]) -> Result<(Vec<u8>, Vec<u8>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 12 {
        return Err(FcxError::CorruptCheckpoint("file too short".into()));
    }
    if &bytes[..8] != magic {
        if &bytes[..7] == &magic[..7] {
            return Err(FcxError::UnsupportedVersion(
                String::from_utf8_lossy(&bytes[..8]).into_owned(),
            ));
        }
        return Err(FcxError::CorruptCheckpoint("bad magic".into()));
    }
    let header_end = scan_json_end(&bytes, 8)?;
    if bytes.len() < header_end + 4 {
        return Err(FcxError::CorruptCheckpoint("truncated after header".into()));
    }
    let header = bytes[8..header_end].to_vec();
    let blob = bytes[header_end..bytes.len() - 4].to_vec();
    let stored_crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    if crc32fast::hash(&blob) != stored_crc {
        return Err(FcxError::CorruptCheckpoint("CRC32 mismatch".into()));
    }
    Ok((header, blob))
}

fn tensors_to_blob(tensors: &BTreeMap<String, Tensor>) -> (Vec<TensorEntry>, Vec<u8>) {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut blob = Vec::new();
    for (name, t) in tensors {
        let offset = blob.len();
        for &v in t.data() {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
            len: blob.len() - offset,
        });
    }
    (entries, blob)
}

fn blob_to_tensors(entries: &[TensorEntry], blob: &[u8]) -> Result<BTreeMap<String, Tensor>> {
    let mut out = BTreeMap::new();
    for e in entries {
        let n: usize = e.shape.iter().product();
        if e.len != n * 4 || e.offset + e.len > blob.len() {
            return Err(FcxError::CorruptCheckpoint(format!(
                "tensor {} entry inconsistent with blob",
                e.name
            )));
        }
        let mut data = Vec::with_capacity(n);
        for i in 0..n {
            let at = e.offset + i * 4;
            let v = f32::from_le_bytes(blob[at..at + 4].try_into().unwrap());
            if !v.is_finite() {
                return Err(FcxError::CorruptCheckpoint(format!(
                    "non-finite value in tensor {}",
                    e.name
                )));
            }
            data.push(v as f64);
        }
        out.insert(e.name.clone(), Tensor::from_vec(&e.shape, data)?);
    }
    Ok(out)
}

/// Saves a network; parameters are stored single precision.
pub fn save_network(net: &Network, path: &Path) -> Result<()> {
    let (tensors, blob) = tensors_to_blob(net.params());
    let header = NetworkHeader {
        format_version: FORMAT_VERSION,
        seed: net.seed,
        frozen: net.is_frozen(),
        spec: net.spec.clone(),
        tensors,
    };
    write_container(path, NETWORK_MAGIC, canonical_json(&header)?, &blob)
}

pub fn load_network(path: &Path) -> Result<Network> {
    let (header_bytes, blob) = read_container(path, NETWORK_MAGIC)?;
    let header: NetworkHeader = serde_json::from_slice(&header_bytes)
        .map_err(|e| FcxError::CorruptCheckpoint(format!("header parse: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(FcxError::UnsupportedVersion(format!(
            "format_version {}",
            header.format_version
        )));
    }
    let params = blob_to_tensors(&header.tensors, &blob)?;
    Network::from_parts(header.spec, params, header.seed, header.frozen)
        .map_err(|e| FcxError::CorruptCheckpoint(format!("parameters inconsistent: {e}")))
}

/// Saves a named tensor map with free-form metadata under the blob container
/// rules (same layout as checkpoints, distinct magic).
pub fn save_tensors(
    path: &Path,
    kind: &str,
    meta: serde_json::Value,
    tensors: &BTreeMap<String, Tensor>,
) -> Result<()> {
    let (entries, blob) = tensors_to_blob(tensors);
    let header = TensorsHeader {
        format_version: FORMAT_VERSION,
        kind: kind.to_string(),
        meta,
        tensors: entries,
    };
    write_container(path, TENSORS_MAGIC, canonical_json(&header)?, &blob)
}

pub fn load_tensors(
    path: &Path,
) -> Result<(String, serde_json::Value, BTreeMap<String, Tensor>)> {
    let (header_bytes, blob) = read_container(path, TENSORS_MAGIC)?;
    let header: TensorsHeader = serde_json::from_slice(&header_bytes)
        .map_err(|e| FcxError::CorruptCheckpoint(format!("header parse: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(FcxError::UnsupportedVersion(format!(
            "format_version {}",
            header.format_version
        )));
    }
    let tensors = blob_to_tensors(&header.tensors, &blob)?;
    Ok((header.kind, header.meta, tensors))
}
