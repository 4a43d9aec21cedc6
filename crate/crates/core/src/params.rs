//! Named parameter storage and the on-disk parameter container.
//!
//! Container layout (all integers little-endian):
//!
//! ```text
//! magic     8 bytes   b"WCONPC\0\x01"  (format name + version 1)
//! hlen      u64       length of the header in bytes
//! header    hlen      UTF-8 JSON: {"metadata": {..}, "tensors": [{"name", "dtype", "shape", "offset", "nbytes"}]}
//! data      ...       tensor payloads, row-major, concatenated in header order
//! digest    32 bytes  SHA-256 of every preceding byte
//! ```
//!
//! `dtype` is `"f32"` for exported parameters and adapters, `"f64"` for
//! training checkpoints that must round-trip losslessly. Tensor names are
//! hierarchical dot-separated paths (`double_blocks.0.txt_attn.q.weight`)
//! and are written in sorted order, so identical content always produces
//! identical bytes.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Mat;

const MAGIC: &[u8; 8] = b"WCONPC\0\x01";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: DType,
    shape: [usize; 2],
    offset: usize,
    nbytes: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    metadata: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// A decoded container: free-form metadata plus named matrices.
#[derive(Debug, Clone)]
pub struct Container {
    pub metadata: serde_json::Value,
    pub tensors: BTreeMap<String, Mat>,
}

pub fn encode_container(
    metadata: &serde_json::Value,
    tensors: &BTreeMap<String, Mat>,
    dtype: DType,
) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0;
    for (name, m) in tensors {
        let nbytes = m.len() * dtype.width();
        entries.push(TensorEntry {
            name: name.clone(),
            dtype,
            shape: [m.rows(), m.cols()],
            offset,
            nbytes,
        });
        offset += nbytes;
    }
    let header = serde_json::to_vec(&Header {
        metadata: metadata.clone(),
        tensors: entries,
    })?;
    let mut out = Vec::with_capacity(8 + 8 + header.len() + offset + 32);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for m in tensors.values() {
        match dtype {
            DType::F32 => m
                .data()
                .iter()
                .for_each(|&x| out.extend_from_slice(&(x as f32).to_le_bytes())),
            DType::F64 => m
                .data()
                .iter()
                .for_each(|&x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

pub fn decode_container(bytes: &[u8], path: &Path) -> Result<Container> {
    let fail = |reason: &str| Error::Integrity {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < 8 + 8 + 32 {
        return Err(fail("file too short"));
    }
    if &bytes[..8] != MAGIC {
        return Err(fail("bad magic or unsupported version"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(fail("checksum mismatch (truncated or corrupted)"));
    }
    let hlen = u64::from_le_bytes(body[8..16].try_into().unwrap()) as usize;
    let data_start = 16usize
        .checked_add(hlen)
        .filter(|&e| e <= body.len())
        .ok_or_else(|| fail("header overruns file"))?;
    let header: Header = serde_json::from_slice(&body[16..data_start])
        .map_err(|e| fail(&format!("bad header: {e}")))?;
    let data = &body[data_start..];
    let mut tensors = BTreeMap::new();
    for e in header.tensors {
        let n = e.shape[0] * e.shape[1];
        if e.nbytes != n * e.dtype.width() || e.offset + e.nbytes > data.len() {
            return Err(fail(&format!("tensor {} has inconsistent extents", e.name)));
        }
        let raw = &data[e.offset..e.offset + e.nbytes];
        let values: Vec<f64> = match e.dtype {
            DType::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            DType::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        };
        tensors.insert(e.name, Mat::from_vec(e.shape[0], e.shape[1], values));
    }
    Ok(Container {
        metadata: header.metadata,
        tensors,
    })
}

pub fn write_container(
    path: &Path,
    metadata: &serde_json::Value,
    tensors: &BTreeMap<String, Mat>,
    dtype: DType,
) -> Result<()> {
    let bytes = encode_container(metadata, tensors, dtype)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_container(path: &Path) -> Result<Container> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_container(&bytes, path)
}

/// Model parameters keyed by hierarchical name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Mat>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn from_map(tensors: BTreeMap<String, Mat>) -> Self {
        ParamStore { tensors }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Mat) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Mat> {
        self.tensors.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Mat> {
        self.get(name)
            .ok_or_else(|| Error::shape(format!("missing parameter {name}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Mat::len).sum()
    }

    pub fn as_map(&self) -> &BTreeMap<String, Mat> {
        &self.tensors
    }

    /// SHA-256 over names, shapes and exact `f64` bit patterns.
    pub fn content_hash(&self) -> String {
        hash_tensors(self.tensors.iter().map(|(k, v)| (k.as_str(), v)))
    }

    pub fn save(&self, path: &Path, metadata: &serde_json::Value, dtype: DType) -> Result<()> {
        write_container(path, metadata, &self.tensors, dtype)
    }

    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        let c = read_container(path)?;
        Ok((ParamStore { tensors: c.tensors }, c.metadata))
    }
}

pub fn hash_tensors<'a>(items: impl Iterator<Item = (&'a str, &'a Mat)>) -> String {
    let mut h = Sha256::new();
    for (name, m) in items {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        h.update((m.rows() as u64).to_le_bytes());
        h.update((m.cols() as u64).to_le_bytes());
        for x in m.data() {
            h.update(x.to_bits().to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// SHA-256 of the canonical (sorted-key) JSON form of `value`.
pub fn json_hash<T: Serialize>(value: &T) -> String {
    let v = serde_json::to_value(value).expect("serialisable config");
    hex::encode(Sha256::digest(serde_json::to_vec(&v).expect("json")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> BTreeMap<String, Mat> {
        let mut m = BTreeMap::new();
        m.insert(
            "b.weight".into(),
            Mat::from_vec(2, 3, vec![1.0, -2.5, 3.25, 0.0, 1e-3, 7.0]),
        );
        m.insert("a.bias".into(), Mat::row_vector(vec![0.1, 0.2]));
        m
    }

    #[test]
    fn f64_round_trip_is_exact_and_bytes_stable() {
        let meta = serde_json::json!({"kind": "test", "z": 1, "a": [1, 2]});
        let bytes = encode_container(&meta, &sample(), DType::F64).unwrap();
        let c = decode_container(&bytes, Path::new("mem")).unwrap();
        assert_eq!(c.tensors, sample());
        assert_eq!(c.metadata, meta);
        let again = encode_container(&c.metadata, &c.tensors, DType::F64).unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn f32_round_trip_rounds_to_single_precision() {
        let bytes = encode_container(&serde_json::json!({}), &sample(), DType::F32).unwrap();
        let c = decode_container(&bytes, Path::new("mem")).unwrap();
        let w = &c.tensors["b.weight"];
        assert_eq!(w.get(1, 1), 1e-3f32 as f64);
    }

    #[test]
    fn truncation_and_bit_flips_are_detected() {
        let bytes = encode_container(&serde_json::json!({}), &sample(), DType::F64).unwrap();
        let truncated = &bytes[..bytes.len() - 5];
        assert!(matches!(
            decode_container(truncated, Path::new("t")),
            Err(Error::Integrity { .. })
        ));
        let mut flipped = bytes.clone();
        let mid = flipped.len() / 2;
        flipped[mid] ^= 0x40;
        assert!(matches!(
            decode_container(&flipped, Path::new("t")),
            Err(Error::Integrity { .. })
        ));
        assert!(matches!(
            decode_container(b"short", Path::new("t")),
            Err(Error::Integrity { .. })
        ));
    }
}
