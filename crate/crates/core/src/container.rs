//! Binary tensor container.
//!
//! Layout:
//!
//! ```text
//! "MFWEIGHT"            8 bytes magic
//! header_len            u32 little-endian
//! header                header_len bytes of UTF-8 JSON
//! payload               row-major little-endian f32 values
//! ```
//!
//! The JSON header maps each tensor name to `{"shape": [..], "offset": n}`
//! where `offset` is the byte offset of the tensor inside the payload. The
//! reserved key `__metadata__` holds an arbitrary JSON object (model config,
//! index tables, provenance). Tensors are written in name order so that equal
//! inputs produce byte-identical files.

use std::collections::BTreeMap;
use std::path::Path;

use serde_json::{Map, Value};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"MFWEIGHT";
const METADATA_KEY: &str = "__metadata__";
/// Upper bound on the JSON header; anything larger is treated as corrupt.
const MAX_HEADER_LEN: usize = 64 << 20;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    pub metadata: Map<String, Value>,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Container {
    pub fn new(metadata: Map<String, Value>) -> Self {
        Self {
            metadata,
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = Map::new();
        header.insert(
            METADATA_KEY.to_string(),
            Value::Object(self.metadata.clone()),
        );
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            let mut entry = Map::new();
            entry.insert("shape".into(), Value::from(t.shape.clone()));
            entry.insert("offset".into(), Value::from(offset));
            header.insert(name.clone(), Value::Object(entry));
            offset += t.data.len() * 4;
        }
        let header = serde_json::to_vec(&Value::Object(header)).expect("header serializes");

        let mut out = Vec::with_capacity(12 + header.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.tensors.values() {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Decodes a container from untrusted bytes. Never panics.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |msg: String| Error::Container(msg);
        if bytes.len() < 12 {
            return Err(corrupt("file shorter than the 12-byte preamble".into()));
        }
        if &bytes[..8] != MAGIC {
            return Err(corrupt("bad magic, expected \"MFWEIGHT\"".into()));
        }
        let header_len = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize;
        if header_len > MAX_HEADER_LEN || 12 + header_len > bytes.len() {
            return Err(corrupt(format!(
                "header length {header_len} exceeds file size {}",
                bytes.len()
            )));
        }
        let header: Value = serde_json::from_slice(&bytes[12..12 + header_len])
            .map_err(|e| corrupt(format!("header is not valid JSON: {e}")))?;
        let Value::Object(header) = header else {
            return Err(corrupt("header must be a JSON object".into()));
        };
        let payload = &bytes[12 + header_len..];

        let mut metadata = Map::new();
        let mut tensors = BTreeMap::new();
        let mut spans: Vec<(usize, usize, String)> = Vec::new();
        for (name, entry) in header {
            if name == METADATA_KEY {
                match entry {
                    Value::Object(m) => metadata = m,
                    _ => return Err(corrupt("__metadata__ must be an object".into())),
                }
                continue;
            }
            let shape = entry
                .get("shape")
                .and_then(Value::as_array)
                .ok_or_else(|| corrupt(format!("tensor `{name}` has no shape array")))?
                .iter()
                .map(|d| {
                    d.as_u64()
                        .and_then(|d| usize::try_from(d).ok())
                        .ok_or_else(|| corrupt(format!("tensor `{name}` has a non-integer dim")))
                })
                .collect::<Result<Vec<usize>>>()?;
            let offset = entry
                .get("offset")
                .and_then(Value::as_u64)
                .and_then(|o| usize::try_from(o).ok())
                .ok_or_else(|| corrupt(format!("tensor `{name}` has no byte offset")))?;
            let count = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| corrupt(format!("tensor `{name}` shape overflows")))?;
            let nbytes = count
                .checked_mul(4)
                .ok_or_else(|| corrupt(format!("tensor `{name}` shape overflows")))?;
            let end = offset
                .checked_add(nbytes)
                .filter(|&e| e <= payload.len())
                .ok_or_else(|| {
                    corrupt(format!(
                        "tensor `{name}` spans bytes {offset}..{} beyond payload of {} bytes",
                        offset.saturating_add(nbytes),
                        payload.len()
                    ))
                })?;
            if offset % 4 != 0 {
                return Err(corrupt(format!("tensor `{name}` offset {offset} is not 4-aligned")));
            }
            let data = payload[offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            spans.push((offset, end, name.clone()));
            tensors.insert(name, Tensor { shape, data });
        }
        spans.sort();
        for pair in spans.windows(2) {
            if pair[1].0 < pair[0].1 {
                return Err(corrupt(format!(
                    "tensors `{}` and `{}` overlap",
                    pair[0].2, pair[1].2
                )));
            }
        }
        Ok(Self { metadata, tensors })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(Container::from_bytes(b"short").is_err());
        assert!(Container::from_bytes(b"NOTMAGIC\0\0\0\0").is_err());
        let mut c = Container::default();
        c.insert("a", Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let bytes = c.to_bytes();
        assert!(Container::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn rejects_overlapping_tensors() {
        let header = br#"{"a":{"shape":[2],"offset":0},"b":{"shape":[2],"offset":4}}"#;
        let mut bytes = MAGIC.to_vec();
        bytes.extend_from_slice(&(header.len() as u32).to_le_bytes());
        bytes.extend_from_slice(header);
        bytes.extend_from_slice(&[0u8; 12]);
        let err = Container::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("overlap"), "{err}");
    }

    proptest! {
        #[test]
        fn round_trip(values in proptest::collection::vec(-1e6f32..1e6, 0..64), cols in 1usize..4) {
            let rows = values.len() / cols;
            let data = values[..rows * cols].to_vec();
            let mut meta = Map::new();
            meta.insert("k".into(), Value::from("v"));
            let mut c = Container::new(meta);
            c.insert("t", Tensor::new(vec![rows, cols], data));
            c.insert("s", Tensor::new(vec![1], vec![0.5]));
            let back = Container::from_bytes(&c.to_bytes()).unwrap();
            prop_assert_eq!(back, c);
        }
    }
}
