//! Checkpoint file: magic line, little-endian u64 header length, JSON
//! header, then raw little-endian f32 tensor data.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tensor::{Scalar, Tensor};

pub const CHECKPOINT_MAGIC: &[u8] = b"CAMLMLAB1\n";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    tensors: Vec<Entry>,
    data_bytes: usize,
    #[serde(default)]
    extra: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub tensors: Vec<(String, Tensor<f32>)>,
    /// Free-form metadata such as the optimizer step and training config.
    pub extra: serde_json::Value,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

/// Writes atomically through a temporary file in the same directory.
pub fn write_checkpoint<T: Scalar>(
    path: &Path,
    model: &ModelConfig,
    tensors: &[(String, &Tensor<T>)],
    extra: serde_json::Value,
) -> Result<()> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0;
    for (name, t) in tensors {
        entries.push(Entry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += 4 * t.len();
    }
    let header = Header {
        model: model.clone(),
        tensors: entries,
        data_bytes: offset,
        extra,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let mut buf = Vec::with_capacity(CHECKPOINT_MAGIC.len() + 8 + json.len() + offset);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, t) in tensors {
        for v in t.data() {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    let tmp = path.with_extension("tmp");
    let io = |e| Error::io(format!("writing {}", tmp.display()), e);
    let mut f = std::fs::File::create(&tmp).map_err(io)?;
    f.write_all(&buf).map_err(io)?;
    f.sync_all().map_err(io)?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(format!("renaming to {}", path.display()), e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes =
        std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let bad = |msg: String| Error::Checkpoint {
        path: path.to_path_buf(),
        msg,
    };
    let rest = bytes
        .strip_prefix(CHECKPOINT_MAGIC)
        .ok_or_else(|| bad("bad magic".into()))?;
    if rest.len() < 8 {
        return Err(bad("truncated header length".into()));
    }
    let hlen = u64::from_le_bytes(rest[..8].try_into().unwrap()) as usize;
    let rest = &rest[8..];
    if rest.len() < hlen {
        return Err(bad("truncated header".into()));
    }
    let header: Header =
        serde_json::from_slice(&rest[..hlen]).map_err(|e| bad(format!("header: {e}")))?;
    let data = &rest[hlen..];
    if data.len() != header.data_bytes {
        return Err(bad(format!(
            "data section has {} bytes, header says {}",
            data.len(),
            header.data_bytes
        )));
    }
    let mut tensors = Vec::with_capacity(header.tensors.len());
    let mut expected = 0;
    for e in header.tensors {
        let n: usize = e.shape.iter().product();
        if e.offset != expected || e.offset + 4 * n > data.len() {
            return Err(bad(format!("tensor {} has an inconsistent offset", e.name)));
        }
        let values = data[e.offset..e.offset + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        expected = e.offset + 4 * n;
        tensors.push((e.name, Tensor::new(e.shape, values)?));
    }
    if expected != data.len() {
        return Err(bad("trailing bytes after last tensor".into()));
    }
    Ok(Checkpoint {
        model: header.model,
        tensors,
        extra: header.extra,
    })
}
