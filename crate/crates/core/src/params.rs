//! Named parameter registry, tape binding, and the checkpoint file format.
//!
//! # Checkpoint layout
//!
//! ```text
//! offset 0   8 bytes   magic "LABCKPT1"
//! offset 8   8 bytes   header length H, u64 little-endian
//! offset 16  H bytes   UTF-8 JSON header
//! offset 16+H          data section: f64 little-endian values
//! ```
//!
//! The header is `{"format_version": 1, "meta": {...}, "base_hash": null |
//! "<sha256 hex>", "arrays": [{"name", "shape", "offset"}]}` where `offset` is
//! the byte offset of the array inside the data section. Arrays are written in
//! name order, so a store always serializes to the same bytes.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"LABCKPT1";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const ADAPTER_PREFIX: &str = "adapter/";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.params.insert(name.into(), t.with_requires_grad(false));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.params.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn numel_where(&self, pred: impl Fn(&str) -> bool) -> usize {
        self.params
            .iter()
            .filter(|(n, _)| pred(n))
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// Copies every entry of `other` into `self`, overwriting duplicates.
    pub fn merge(&mut self, other: &ParamStore) {
        for (n, t) in other.iter() {
            self.params.insert(n.clone(), t.clone());
        }
    }

    /// Sub-store with the entries whose names satisfy `pred`.
    pub fn filtered(&self, pred: impl Fn(&str) -> bool) -> ParamStore {
        ParamStore {
            params: self
                .params
                .iter()
                .filter(|(n, _)| pred(n))
                .map(|(n, t)| (n.clone(), t.clone()))
                .collect(),
        }
    }

    /// SHA-256 of one parameter's shape and little-endian bytes.
    pub fn param_hash(&self, name: &str) -> Result<String> {
        Ok(tensor_hash(self.get(name)?))
    }

    /// Per-parameter hashes, used to prove frozen weights are untouched.
    pub fn hashes_where(&self, pred: impl Fn(&str) -> bool) -> BTreeMap<String, String> {
        self.params
            .iter()
            .filter(|(n, _)| pred(n))
            .map(|(n, t)| (n.clone(), tensor_hash(t)))
            .collect()
    }

    /// One hash over the names, shapes and values selected by `pred`; the
    /// identity a delta checkpoint records for its base.
    pub fn content_hash(&self, pred: impl Fn(&str) -> bool) -> String {
        let mut h = Sha256::new();
        for (n, t) in self.params.iter().filter(|(n, _)| pred(n)) {
            h.update((n.len() as u64).to_le_bytes());
            h.update(n.as_bytes());
            h.update(tensor_hash(t).as_bytes());
        }
        hex::encode(h.finalize())
    }
}

pub fn tensor_hash(t: &Tensor) -> String {
    let mut h = Sha256::new();
    for d in t.shape() {
        h.update((*d as u64).to_le_bytes());
    }
    for x in t.data() {
        h.update(x.to_le_bytes());
    }
    hex::encode(h.finalize())
}

pub fn bytes_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn is_adapter_param(name: &str) -> bool {
    name.starts_with(ADAPTER_PREFIX)
}

/// Binds store entries to tape leaves on first use during one forward pass.
pub struct Binder<'a> {
    store: &'a ParamStore,
    trainable: &'a dyn Fn(&str) -> bool,
    vars: BTreeMap<String, Var>,
}

impl<'a> Binder<'a> {
    pub fn new(store: &'a ParamStore, trainable: &'a dyn Fn(&str) -> bool) -> Self {
        Self {
            store,
            trainable,
            vars: BTreeMap::new(),
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn has(&self, name: &str) -> bool {
        self.store.contains(name)
    }

    pub fn get(&mut self, tape: &mut Tape, name: &str) -> Result<Var> {
        if let Some(v) = self.vars.get(name) {
            return Ok(*v);
        }
        let t = self.store.get(name)?.clone();
        let v = if (self.trainable)(name) {
            tape.param(t)?
        } else {
            tape.constant(t)?
        };
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    /// Gradients of the bound trainable parameters. Trainable parameters that
    /// did not influence the loss get explicit zero gradients.
    pub fn grads(&self, mut g: Gradients) -> Result<BTreeMap<String, Tensor>> {
        let mut out = BTreeMap::new();
        for (name, v) in &self.vars {
            if !(self.trainable)(name) {
                continue;
            }
            let t = match g.take(*v) {
                Some(t) => t,
                None => Tensor::zeros(self.store.get(name)?.shape()),
            };
            out.insert(name.clone(), t);
        }
        Ok(out)
    }
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize, Debug, Clone)]
struct Header {
    format_version: u32,
    #[serde(default)]
    meta: serde_json::Value,
    #[serde(default)]
    base_hash: Option<String>,
    arrays: Vec<ArrayEntry>,
}

/// In-memory form of a checkpoint file.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ParamStore,
    pub meta: serde_json::Value,
    /// Hash of the base checkpoint bytes; present on one-shot delta files.
    pub base_hash: Option<String>,
}

impl Checkpoint {
    pub fn new(params: ParamStore, meta: serde_json::Value) -> Self {
        Self {
            params,
            meta,
            base_hash: None,
        }
    }

    /// A delta holds only `adapter/*` arrays plus the hash of its base.
    pub fn is_delta(&self) -> bool {
        self.base_hash.is_some() && self.params.names().all(|n| is_adapter_param(n))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut arrays = Vec::new();
        let mut data = Vec::new();
        for (name, t) in self.params.iter() {
            arrays.push(ArrayEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset: data.len() as u64,
            });
            for x in t.data() {
                data.extend_from_slice(&x.to_le_bytes());
            }
        }
        let header = Header {
            format_version: CHECKPOINT_VERSION,
            meta: self.meta.clone(),
            base_hash: self.base_hash.clone(),
            arrays,
        };
        let hjson = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + hjson.len() + data.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(hjson.len() as u64).to_le_bytes());
        out.extend_from_slice(&hjson);
        out.extend_from_slice(&data);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not a lab checkpoint (bad magic)"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let hend = 16usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[16..hend])?;
        if header.format_version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "checkpoint format version {} is not supported (expected {CHECKPOINT_VERSION})",
                header.format_version
            )));
        }
        let data = &bytes[hend..];
        let mut params = ParamStore::new();
        for a in &header.arrays {
            let n: usize = a.shape.iter().product();
            let start = a.offset as usize;
            let end = start + n * 8;
            if end > data.len() {
                return Err(Error::Checkpoint(format!("array {} overruns data section", a.name)));
            }
            let vals = data[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            params.insert(a.name.clone(), Tensor::new(&a.shape, vals)?);
        }
        Ok(Self {
            params,
            meta: header.meta,
            base_hash: header.base_hash,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_store() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("encoder/w", Tensor::new(&[2, 2], vec![1.0, -2.5, 3.0, 1e-300]).unwrap());
        s.insert("adapter/ftm.gamma", Tensor::zeros(&[3]));
        s
    }

    #[test]
    fn roundtrip_preserves_bits() {
        let ck = Checkpoint::new(sample_store(), serde_json::json!({"kind": "base"}));
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(&bytes[..8], CHECKPOINT_MAGIC);
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn header_offsets_are_byte_offsets() {
        let bytes = Checkpoint::new(sample_store(), serde_json::Value::Null).to_bytes().unwrap();
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[16..16 + hlen]).unwrap();
        let arrays = header["arrays"].as_array().unwrap();
        // name order: adapter/... then encoder/...
        assert_eq!(arrays[0]["name"], "adapter/ftm.gamma");
        assert_eq!(arrays[1]["offset"], 24);
        let data = &bytes[16 + hlen..];
        assert_eq!(f64::from_le_bytes(data[24..32].try_into().unwrap()), 1.0);
    }

    #[test]
    fn rejects_garbage_and_future_versions() {
        assert!(Checkpoint::from_bytes(b"nope").is_err());
        let mut bytes = Checkpoint::new(sample_store(), serde_json::Value::Null).to_bytes().unwrap();
        let key = b"\"format_version\":1";
        let at = bytes.windows(key.len()).position(|w| w == key).unwrap();
        bytes[at + key.len() - 1] = b'9';
        let err = Checkpoint::from_bytes(&bytes).unwrap_err().to_string();
        assert!(err.contains("version 9"), "{err}");
    }

    #[test]
    fn delta_detection() {
        let mut ck = Checkpoint::new(sample_store().filtered(is_adapter_param), serde_json::Value::Null);
        assert!(!ck.is_delta());
        ck.base_hash = Some(bytes_hash(b"base"));
        assert!(ck.is_delta());
        let mut full = Checkpoint::new(sample_store(), serde_json::Value::Null);
        full.base_hash = Some("x".into());
        assert!(!full.is_delta());
    }

    #[test]
    fn binder_reports_zero_grad_for_unused_trainables() {
        let store = sample_store();
        let all = |_: &str| true;
        let mut b = Binder::new(&store, &all);
        let mut tape = Tape::new();
        let w = b.get(&mut tape, "encoder/w").unwrap();
        let _g = b.get(&mut tape, "adapter/ftm.gamma").unwrap();
        let loss = tape.sum(w).unwrap();
        let grads = b.grads(tape.backward(loss).unwrap()).unwrap();
        assert_eq!(grads["encoder/w"].data(), &[1.0; 4]);
        assert_eq!(grads["adapter/ftm.gamma"].data(), &[0.0; 3]);
    }
}
