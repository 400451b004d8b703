//! Binary checkpoint container.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic    8 bytes  "MEHTCKPT"
//! version  u32
//! header   u64 length + canonical JSON (sorted keys, compact)
//! count    u64
//! records  count × { u32 name length, name, u8 dtype (0 = f32),
//!                    u32 rank, rank × u64 extents, u64 byte length, payload }
//! ```
//!
//! Records are written in name order. Names carry a role prefix:
//! `param/`, `buffer/`, `adam_m/`, `adam_v/`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;
use serde_json::{json, Value};

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Scalar, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MEHTCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// JSON object; `model` holds the [`ModelConfig`] when present.
    pub header: Value,
    pub tensors: BTreeMap<String, Tensor<f32>>,
}

impl Checkpoint {
    pub fn new(kind: &str) -> Self {
        Checkpoint { header: json!({ "kind": kind }), tensors: BTreeMap::new() }
    }

    pub fn from_model<T: Scalar>(model: &Model<T>) -> Result<Self> {
        let mut ck = Checkpoint::new("model");
        ck.set("model", &model.config)?;
        ck.add_store(&model.store, "");
        Ok(ck)
    }

    pub fn set(&mut self, key: &str, value: impl Serialize) -> Result<()> {
        let v = serde_json::to_value(value)?;
        self.header
            .as_object_mut()
            .ok_or_else(|| Error::data("checkpoint header is not an object"))?
            .insert(key.to_string(), v);
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&Value> {
        self.header.get(key)
    }

    pub fn kind(&self) -> &str {
        self.header.get("kind").and_then(Value::as_str).unwrap_or("")
    }

    /// Adds parameters as `param/{prefix}{name}` and buffers as
    /// `buffer/{prefix}{name}`.
    pub fn add_store<T: Scalar>(&mut self, store: &ParamStore<T>, prefix: &str) {
        for (n, t) in store.params() {
            self.tensors.insert(format!("param/{prefix}{n}"), t.cast());
        }
        for (n, t) in store.buffers() {
            self.tensors.insert(format!("buffer/{prefix}{n}"), t.cast());
        }
    }

    /// Parameters and buffers under `prefix`, with the prefix stripped.
    pub fn store<T: Scalar>(&self, prefix: &str) -> ParamStore<T> {
        let mut store = ParamStore::new();
        for (k, t) in &self.tensors {
            if let Some(n) = k.strip_prefix("param/").and_then(|r| r.strip_prefix(prefix)) {
                store.insert(n, t.cast());
            } else if let Some(n) = k.strip_prefix("buffer/").and_then(|r| r.strip_prefix(prefix)) {
                store.insert_buffer(n, t.cast());
            }
        }
        store
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let v = self.get("model").ok_or_else(|| Error::data("checkpoint has no model configuration"))?;
        Ok(serde_json::from_value(v.clone())?)
    }

    /// Rebuilds a model; every expected parameter must be present with the
    /// expected shape and no extra ones are allowed.
    pub fn model<T: Scalar>(&self, prefix: &str) -> Result<Model<T>> {
        let config = self.model_config()?;
        let reference: Model<T> = super::build_model(config.clone(), 0)?;
        let store = self.store::<T>(prefix);
        for (name, t) in reference.store.params() {
            let got = store.get(name).map_err(|_| Error::data(format!("checkpoint lacks parameter `{name}`")))?;
            if got.shape() != t.shape() {
                return Err(Error::data(format!(
                    "parameter `{name}` has shape {:?}, config implies {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        if let Some(extra) = store.names().find(|n| !reference.store.contains(n)) {
            return Err(Error::data(format!("checkpoint parameter `{extra}` is not part of the model")));
        }
        for (name, t) in reference.store.buffers() {
            let got = store.buffer(name).map_err(|_| Error::data(format!("checkpoint lacks buffer `{name}`")))?;
            if got.shape() != t.shape() {
                return Err(Error::data(format!("buffer `{name}` has wrong shape {:?}", got.shape())));
            }
        }
        Ok(Model { config, store })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::with_capacity(64 + header.len() + self.tensors.values().map(|t| 4 * t.len() + 64).sum::<usize>());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F32);
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&((4 * t.len()) as u64).to_le_bytes());
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::data("not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::data(format!("unsupported checkpoint version {version}")));
        }
        let hlen = r.u64()? as usize;
        let header: Value = serde_json::from_slice(r.take(hlen)?)?;
        if !header.is_object() {
            return Err(Error::data("checkpoint header is not a JSON object"));
        }
        let count = r.u64()? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec()).map_err(|_| Error::data("record name is not UTF-8"))?;
            let dtype = r.take(1)?[0];
            if dtype != DTYPE_F32 {
                return Err(Error::data(format!("record `{name}` has unknown dtype {dtype}")));
            }
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let blen = r.u64()? as usize;
            let payload = r.take(blen)?;
            let data: Vec<f32> = payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::data(format!("record `{name}`: {e}")))?;
            if tensors.insert(name.clone(), t).is_some() {
                return Err(Error::data(format!("duplicate record `{name}`")));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::data("trailing bytes after checkpoint records"));
        }
        Ok(Checkpoint { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes).map_err(|e| Error::format(path, e.to_string()))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| Error::data("truncated checkpoint"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let mut a = [0u8; 8];
        a.copy_from_slice(self.take(8)?);
        Ok(u64::from_le_bytes(a))
    }
}
