use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ParamSet, Tensor};
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"SPLVCKPT";
const FORMAT: &str = "spectlv-checkpoint-1";

/// Named tensors plus free-form metadata (architecture config, epoch, ...).
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor)>,
    pub meta: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    dtype: String,
    byte_order: String,
    tensors: Vec<Entry>,
    meta: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

impl Checkpoint {
    pub fn from_params(params: &ParamSet, meta: serde_json::Value) -> Self {
        Checkpoint { tensors: params.named_tensors(), meta }
    }
}

/// Layout: magic, u64 LE header length, JSON header, f32 LE payload.
pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let header = Header {
        format: FORMAT.into(),
        dtype: "f32".into(),
        byte_order: "little".into(),
        tensors: ckpt.tensors.iter().map(|(n, t)| Entry { name: n.clone(), shape: t.shape().to_vec() }).collect(),
        meta: ckpt.meta.clone(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, t) in &ckpt.tensors {
        for &v in t.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    if buf.len() < 16 || &buf[..8] != MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a checkpoint", path.display())));
    }
    let hlen = u64::from_le_bytes(buf[8..16].try_into().expect("8 bytes")) as usize;
    let body = buf.get(16..16usize.saturating_add(hlen)).ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if header.format != FORMAT || header.dtype != "f32" || header.byte_order != "little" {
        return Err(Error::Checkpoint(format!(
            "unsupported layout {} / {} / {}",
            header.format, header.dtype, header.byte_order
        )));
    }
    let mut payload = &buf[16 + hlen..];
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in header.tensors {
        let n: usize = e.shape.iter().product();
        if payload.len() < 4 * n {
            return Err(Error::Checkpoint(format!("payload truncated in `{}`", e.name)));
        }
        let data = payload[..4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        payload = &payload[4 * n..];
        tensors.push((e.name, Tensor::new(e.shape, data)?));
    }
    if !payload.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", payload.len())));
    }
    Ok(Checkpoint { tensors, meta: header.meta })
}
