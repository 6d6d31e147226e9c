//! Binary checkpoints: `HIFI`, format version, header length (all u32
//! little-endian after the magic), a JSON header, then little-endian `f32`
//! values for every tensor in manifest order.

use std::path::Path;

use ndarr::Tensor;
use serde::{Deserialize, Serialize};

use super::state::{ModelConfig, ModelState};
use crate::error::{HifiError, Result};
use crate::image::write_atomic;

const MAGIC: &[u8; 4] = b"HIFI";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ModelConfig,
    step: u64,
    #[serde(default)]
    meta: serde_json::Value,
    tensors: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

/// Model parameters plus any extra named tensors (optimizer moments).
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub state: ModelState,
    pub step: u64,
    pub meta: serde_json::Value,
    pub extra: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(state: ModelState) -> Self {
        Self {
            state,
            step: 0,
            meta: serde_json::Value::Null,
            extra: Vec::new(),
        }
    }

    pub fn extra(&self, name: &str) -> Option<&Tensor> {
        self.extra.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let layout = &self.state.layout;
        let named = (0..layout.len())
            .map(|i| (layout.name(i), &self.state.params[i]))
            .chain(self.extra.iter().map(|(n, t)| (n.as_str(), t)));
        let mut tensors = Vec::new();
        let mut body = Vec::new();
        for (name, t) in named {
            tensors.push(Entry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            });
            for &v in t.data() {
                body.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let header = serde_json::to_vec(&Header {
            config: self.state.config.clone(),
            step: self.step,
            meta: self.meta.clone(),
            tensors,
        })
        .map_err(|e| HifiError::Contract(format!("cannot encode checkpoint header: {e}")))?;
        let mut out = Vec::with_capacity(12 + header.len() + body.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&body);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |msg: &str| HifiError::format(path, msg);
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
        let version = word(4);
        if version != VERSION {
            return Err(bad(&format!("unsupported checkpoint version {version}")));
        }
        let hlen = word(8) as usize;
        let hend = 12usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header =
            serde_json::from_slice(&bytes[12..hend]).map_err(|e| bad(&format!("header: {e}")))?;
        let mut state = ModelState::init(&header.config, 0).map_err(|e| bad(&e.to_string()))?;
        let mut cursor = hend;
        let mut extra = Vec::new();
        let mut seen = vec![false; state.layout.len()];
        for entry in header.tensors {
            let n: usize = entry.shape.iter().product();
            let end = cursor
                .checked_add(n * 4)
                .filter(|&e| e <= bytes.len())
                .ok_or_else(|| bad("truncated tensor data"))?;
            let data: Vec<f64> = bytes[cursor..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            cursor = end;
            let t = Tensor::new(&entry.shape, data).map_err(|e| bad(&e.to_string()))?;
            match state.layout.index_of(&entry.name) {
                Some(i) => {
                    if state.layout.shape(i) != entry.shape.as_slice() {
                        return Err(bad(&format!("shape mismatch for {}", entry.name)));
                    }
                    state.params[i] = t;
                    seen[i] = true;
                }
                None => extra.push((entry.name, t)),
            }
        }
        if cursor != bytes.len() {
            return Err(bad("trailing bytes after tensor data"));
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(bad(&format!("missing parameter {}", state.layout.name(i))));
        }
        Ok(Self {
            state,
            step: header.step,
            meta: header.meta,
            extra,
        })
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    write_atomic(path, &ckpt.to_bytes()?)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| HifiError::io(path, e))?;
    Checkpoint::from_bytes(&bytes, path)
}
