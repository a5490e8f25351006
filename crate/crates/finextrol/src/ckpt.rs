//! Checkpoint container: a JSON metadata header followed by named
//! little-endian float32 arrays.
//!
//! Layout: an 8-byte little-endian length, the JSON header bytes, then the
//! raw tensor payload in the order listed under `"tensors"` in the header.
//! Serialization is deterministic, so identical in-memory state produces
//! identical bytes and a checkpoint's SHA-256 identifies it exactly.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CkptError {
    #[error("io failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

/// Serializes `meta` (a JSON object) plus tensors into container bytes. The
/// tensor list is appended to the header under the `"tensors"` key.
pub fn to_bytes(meta: &Value, tensors: &[(String, &Array2<f64>)]) -> Result<Vec<u8>, CkptError> {
    let Value::Object(map) = meta else {
        return Err(CkptError::Malformed("meta must be a JSON object".into()));
    };
    let mut map = map.clone();
    let entries: Vec<TensorEntry> = tensors
        .iter()
        .map(|(name, t)| TensorEntry {
            name: name.clone(),
            rows: t.nrows(),
            cols: t.ncols(),
        })
        .collect();
    map.insert(
        "tensors".to_string(),
        serde_json::to_value(&entries).expect("tensor entries serialize"),
    );
    let header = serde_json::to_vec(&Value::Object(map))
        .map_err(|e| CkptError::Malformed(e.to_string()))?;

    let mut out = Vec::with_capacity(8 + header.len() + tensors.len() * 64);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in tensors {
        for &v in t.iter() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses container bytes back into the metadata object (without the
/// `"tensors"` key) and the named tensors, widened to f64.
pub fn from_bytes(bytes: &[u8]) -> Result<(Value, Vec<(String, Array2<f64>)>), CkptError> {
    if bytes.len() < 8 {
        return Err(CkptError::Malformed("truncated header length".into()));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    if bytes.len() < 8 + header_len {
        return Err(CkptError::Malformed("truncated header".into()));
    }
    let header: Value = serde_json::from_slice(&bytes[8..8 + header_len])
        .map_err(|e| CkptError::Malformed(format!("bad header json: {e}")))?;
    let Value::Object(mut map) = header else {
        return Err(CkptError::Malformed("header is not an object".into()));
    };
    let entries: Vec<TensorEntry> = map
        .remove("tensors")
        .ok_or_else(|| CkptError::Malformed("missing tensors key".into()))
        .and_then(|v| {
            serde_json::from_value(v).map_err(|e| CkptError::Malformed(e.to_string()))
        })?;

    let mut offset = 8 + header_len;
    let mut tensors = Vec::with_capacity(entries.len());
    for e in entries {
        let n = e.rows * e.cols;
        let end = offset + n * 4;
        if bytes.len() < end {
            return Err(CkptError::Malformed(format!(
                "tensor {} runs past end of file",
                e.name
            )));
        }
        let mut data = Vec::with_capacity(n);
        for i in 0..n {
            let at = offset + i * 4;
            let v = f32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
            data.push(v as f64);
        }
        let arr = Array2::from_shape_vec((e.rows, e.cols), data)
            .map_err(|e| CkptError::Malformed(e.to_string()))?;
        tensors.push((e.name, arr));
        offset = end;
    }
    if offset != bytes.len() {
        return Err(CkptError::Malformed(format!(
            "{} trailing bytes after payload",
            bytes.len() - offset
        )));
    }
    Ok((Value::Object(map), tensors))
}

pub fn write_file(
    path: &Path,
    meta: &Value,
    tensors: &[(String, &Array2<f64>)],
) -> Result<(), CkptError> {
    let bytes = to_bytes(meta, tensors)?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_file(path: &Path) -> Result<(Value, Vec<(String, Array2<f64>)>), CkptError> {
    let bytes = fs::read(path)?;
    from_bytes(&bytes)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn round_trip_is_byte_exact() {
        let meta = json!({"format_version": 1, "kind": "test", "note": 0.5});
        let a = ndarray::array![[1.0f64, 2.0], [3.0, 4.5]];
        let b = ndarray::array![[-0.25f64]];
        let tensors = vec![("a".to_string(), &a), ("b".to_string(), &b)];
        let bytes = to_bytes(&meta, &tensors).unwrap();

        let (meta2, loaded) = from_bytes(&bytes).unwrap();
        assert_eq!(meta2["kind"], "test");
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded[0].1, a);

        let tensors2 = vec![("a".to_string(), &loaded[0].1), ("b".to_string(), &loaded[1].1)];
        let bytes2 = to_bytes(&meta2, &tensors2).unwrap();
        assert_eq!(bytes, bytes2);
    }

    #[test]
    fn truncation_is_detected() {
        let meta = json!({"kind": "test"});
        let a = ndarray::array![[1.0f64, 2.0]];
        let bytes = to_bytes(&meta, &[("a".to_string(), &a)]).unwrap();
        assert!(from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(from_bytes(&bytes[..4]).is_err());
    }

    #[test]
    fn hashes_differ_on_content() {
        let meta = json!({"kind": "test"});
        let a = ndarray::array![[1.0f64]];
        let b = ndarray::array![[2.0f64]];
        let ha = sha256_hex(&to_bytes(&meta, &[("t".to_string(), &a)]).unwrap());
        let hb = sha256_hex(&to_bytes(&meta, &[("t".to_string(), &b)]).unwrap());
        assert_ne!(ha, hb);
        assert_eq!(ha.len(), 64);
    }
}
