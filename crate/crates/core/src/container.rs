//! The `SABT` tensor container shared by checkpoints and activation records.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "SABT" | u32 version (=1) | u64 header length | UTF-8 JSON header
//! zero padding to a 64-byte file offset
//! payload: f32 tensors, each starting at a 64-byte aligned offset
//! ```
//!
//! The JSON header is an object whose `"tensors"` member maps each tensor
//! name to `{"dtype": "f32", "shape": [...], "offset": n}`, with `offset`
//! counted from the start of the payload. All other members are free-form
//! metadata. Tensor order is the payload order.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SABT";
pub const VERSION: u32 = 1;
pub const ALIGN: usize = 64;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IndexEntry {
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
}

/// Metadata plus ordered named tensors.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Container {
    pub meta: Map<String, Value>,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

fn align_up(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

impl Container {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut index = BTreeMap::new();
        let mut offset = 0usize;
        let mut offsets = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            if index.contains_key(name) {
                return Err(Error::Format(format!("duplicate tensor name `{name}`")));
            }
            index.insert(
                name.clone(),
                IndexEntry {
                    dtype: "f32".into(),
                    shape: t.shape().to_vec(),
                    offset: offset as u64,
                },
            );
            offsets.push(offset);
            // empty tensors still get their own slot so offsets stay strictly increasing
            offset = align_up(offset + (4 * t.numel()).max(1));
        }
        if self.meta.contains_key("tensors") {
            return Err(Error::Format("metadata may not define `tensors`".into()));
        }
        let mut header = self.meta.clone();
        header.insert("tensors".into(), serde_json::to_value(&index)?);
        let json = serde_json::to_vec(&Value::Object(header))?;

        let payload_start = align_up(4 + 4 + 8 + json.len());
        let mut out = Vec::with_capacity(payload_start + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.resize(payload_start, 0);
        for ((_, t), off) in self.tensors.iter().zip(offsets) {
            out.resize(payload_start + off, 0);
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.resize(payload_start + offset, 0);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Format(m.to_string());
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("missing SABT magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let json_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let json_end = 16usize
            .checked_add(json_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("header length exceeds file"))?;
        let header: Value = serde_json::from_slice(&bytes[16..json_end])?;
        let Value::Object(mut meta) = header else {
            return Err(bad("header is not a JSON object"));
        };
        let index: BTreeMap<String, IndexEntry> = match meta.remove("tensors") {
            Some(v) => serde_json::from_value(v)?,
            None => return Err(bad("header has no tensor index")),
        };
        let payload = &bytes[align_up(json_end).min(bytes.len())..];
        let mut entries: Vec<(String, IndexEntry)> = index.into_iter().collect();
        entries.sort_by_key(|(_, e)| e.offset);
        let mut tensors = Vec::with_capacity(entries.len());
        for (name, e) in entries {
            if e.dtype != "f32" {
                return Err(Error::Format(format!(
                    "tensor `{name}` has unsupported dtype {}",
                    e.dtype
                )));
            }
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            if !start.is_multiple_of(ALIGN) {
                return Err(Error::Format(format!("tensor `{name}` is misaligned")));
            }
            let raw = payload
                .get(start..start + 4 * n)
                .ok_or_else(|| Error::Format(format!("tensor `{name}` runs past end of file")))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push((name, Tensor::new(e.shape, data)?));
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
