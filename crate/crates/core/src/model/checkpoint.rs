//! Binary tensor files.
//!
//! ```text
//! "DLMC" | version: u32 LE | header_len: u64 LE | header: UTF-8 JSON
//! | zero padding to a 64-byte boundary | payloads
//! ```
//!
//! The header is `{"meta": …, "tensors": [{name, dtype, shape, offset}, …]}`.
//! `offset` is relative to the start of the payload section; every payload
//! starts on a 64-byte boundary of the file and holds little-endian IEEE-754
//! values in row-major order.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::atomic_write;
use crate::numerics::Matrix;

use super::{Attention, Layer, Mlp, ModelConfig, ModelParams};

pub(crate) const MAGIC: &[u8; 4] = b"DLMC";
pub(crate) const VERSION: u32 = 1;
const ALIGN: usize = 64;
const PREAMBLE: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header<M> {
    meta: M,
    tensors: Vec<TensorEntry>,
}

fn align_up(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

fn header_err(reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        tensor: "<header>".into(),
        reason: reason.into(),
    }
}

pub(crate) fn encode_tensor_file<M: Serialize>(meta: &M, tensors: &[(String, &Matrix)]) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0usize;
    for (name, t) in tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            dtype: "f64".into(),
            shape: vec![t.rows(), t.cols()],
            offset: offset as u64,
        });
        offset = align_up(offset + t.len() * 8);
    }
    let header = serde_json::to_vec(&Header {
        meta,
        tensors: entries,
    })?;
    let data_start = align_up(PREAMBLE + header.len());
    let mut out = Vec::with_capacity(data_start + offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in tensors {
        out.resize(align_up(out.len()), 0);
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.resize(data_start + offset, 0);
    Ok(out)
}

pub(crate) fn decode_tensor_file<M: DeserializeOwned>(bytes: &[u8]) -> Result<(M, Vec<(String, Matrix)>)> {
    if bytes.len() < PREAMBLE || &bytes[..4] != MAGIC {
        return Err(header_err("bad magic bytes"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(header_err(format!("unsupported version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let header_end = PREAMBLE
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| header_err("header extends past end of file"))?;
    let header: Header<M> = serde_json::from_slice(&bytes[PREAMBLE..header_end])
        .map_err(|e| header_err(format!("invalid header json: {e}")))?;
    let data_start = align_up(header_end);
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in header.tensors {
        let fail = |reason: String| Error::Checkpoint {
            tensor: entry.name.clone(),
            reason,
        };
        if entry.dtype != "f64" {
            return Err(fail(format!("unsupported dtype {}", entry.dtype)));
        }
        let &[rows, cols] = entry.shape.as_slice() else {
            return Err(fail(format!("expected 2-d shape, got {:?}", entry.shape)));
        };
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| fail("shape overflows".into()))?;
        let start = usize::try_from(entry.offset)
            .ok()
            .and_then(|o| o.checked_add(data_start))
            .ok_or_else(|| fail("offset overflows".into()))?;
        if start % ALIGN != 0 {
            return Err(fail(format!("payload at {start} is not {ALIGN}-byte aligned")));
        }
        let end = start
            .checked_add(n)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| fail(format!("needs {n} bytes at {start}, file has {}", bytes.len())))?;
        let data: Vec<f64> = bytes[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(fail("non-finite value".into()));
        }
        tensors.push((entry.name, Matrix::new(rows, cols, data)?));
    }
    Ok((header.meta, tensors))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AttnLayout {
    heads: Vec<usize>,
    kv_heads: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MlpLayout {
    channels: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerLayout {
    attn: Option<AttnLayout>,
    mlp: Option<MlpLayout>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelMeta {
    config: ModelConfig,
    layers: Vec<LayerLayout>,
}

/// Serializes a model to the checkpoint byte format.
pub fn write_checkpoint(params: &ModelParams) -> Result<Vec<u8>> {
    params.validate()?;
    let meta = ModelMeta {
        config: params.config.clone(),
        layers: params
            .layers
            .iter()
            .map(|l| LayerLayout {
                attn: l.attn.as_ref().map(|a| AttnLayout {
                    heads: a.heads.clone(),
                    kv_heads: a.kv_heads.clone(),
                }),
                mlp: l.mlp.as_ref().map(|m| MlpLayout {
                    channels: m.channels.clone(),
                }),
            })
            .collect(),
    };
    encode_tensor_file(&meta, &params.tensors())
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<ModelParams> {
    let (meta, tensors): (ModelMeta, _) = decode_tensor_file(bytes)?;
    meta.config.validate()?;
    let mut map: std::collections::HashMap<String, Matrix> = tensors.into_iter().collect();
    let mut take = |name: String| {
        map.remove(&name).ok_or(Error::Checkpoint {
            tensor: name,
            reason: "missing from manifest".into(),
        })
    };
    let embedding = take("embedding".into())?;
    let mut layers = Vec::with_capacity(meta.layers.len());
    for (i, layout) in meta.layers.into_iter().enumerate() {
        let attn = match layout.attn {
            Some(a) => Some(Attention {
                norm: take(format!("layers.{i}.attn.norm"))?,
                wq: take(format!("layers.{i}.attn.wq"))?,
                wk: take(format!("layers.{i}.attn.wk"))?,
                wv: take(format!("layers.{i}.attn.wv"))?,
                wo: take(format!("layers.{i}.attn.wo"))?,
                heads: a.heads,
                kv_heads: a.kv_heads,
            }),
            None => None,
        };
        let mlp = match layout.mlp {
            Some(m) => Some(Mlp {
                norm: take(format!("layers.{i}.mlp.norm"))?,
                w_gate: take(format!("layers.{i}.mlp.w_gate"))?,
                w_up: take(format!("layers.{i}.mlp.w_up"))?,
                w_down: take(format!("layers.{i}.mlp.w_down"))?,
                channels: m.channels,
            }),
            None => None,
        };
        layers.push(Layer { attn, mlp });
    }
    let final_norm = take("final_norm".into())?;
    let head = take("head".into())?;
    if let Some(name) = map.into_keys().next() {
        return Err(Error::Checkpoint {
            tensor: name,
            reason: "not part of the model layout".into(),
        });
    }
    let params = ModelParams {
        config: meta.config,
        embedding,
        layers,
        final_norm,
        head,
    };
    params.validate()?;
    Ok(params)
}

/// Writes a checkpoint atomically (temp file + rename).
pub fn save_checkpoint(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    atomic_write(path.as_ref(), &write_checkpoint(params)?)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes)
}
