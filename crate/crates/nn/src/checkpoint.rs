//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! | offset | size | content                                  |
//! |--------|------|------------------------------------------|
//! | 0      | 8    | magic `TVLACKPT`                         |
//! | 8      | 4    | `u32` format version (currently 1)       |
//! | 12     | 8    | `u64` header length `n` in bytes         |
//! | 20     | n    | UTF-8 JSON header                        |
//! | 20 + n | ...  | raw `f64` values, tensors in header order |
//!
//! The header lists every tensor as `{name, kind, shape, requires_grad, adam_t}`
//! where `kind` is `param`, `adam_m` or `adam_v`, plus a free-form `metadata`
//! object (model config, action statistics, run manifest).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::optim::Adam;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"TVLACKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    Param,
    AdamM,
    AdamV,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Entry {
    pub name: String,
    pub kind: EntryKind,
    pub shape: Vec<usize>,
    #[serde(default)]
    pub requires_grad: bool,
    #[serde(default)]
    pub adam_t: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    metadata: serde_json::Value,
    tensors: Vec<Entry>,
}

pub type OptimizerMoments = Vec<(String, u64, Tensor, Tensor)>;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub store: ParamStore,
    pub optimizer: Option<OptimizerMoments>,
    pub metadata: serde_json::Value,
}

pub fn write_checkpoint<W: Write>(
    mut w: W,
    store: &ParamStore,
    optimizer: Option<&Adam>,
    metadata: &serde_json::Value,
) -> Result<()> {
    let mut entries = Vec::new();
    let mut blobs: Vec<&[f64]> = Vec::new();
    for (_, p) in store.iter() {
        entries.push(Entry {
            name: p.name.clone(),
            kind: EntryKind::Param,
            shape: p.value.shape().to_vec(),
            requires_grad: p.requires_grad,
            adam_t: 0,
        });
        blobs.push(p.value.data());
    }
    let moments = optimizer.map(|o| o.export(store)).unwrap_or_default();
    for (name, t, m, v) in &moments {
        for (kind, data) in [(EntryKind::AdamM, m), (EntryKind::AdamV, v)] {
            entries.push(Entry {
                name: name.clone(),
                kind,
                shape: data.shape().to_vec(),
                requires_grad: false,
                adam_t: *t,
            });
            blobs.push(data.data());
        }
    }
    let header = serde_json::to_vec(&Header {
        format_version: FORMAT_VERSION,
        metadata: metadata.clone(),
        tensors: entries,
    })?;
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(&header)?;
    for blob in blobs {
        let mut buf = Vec::with_capacity(blob.len() * 8);
        for v in blob {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Checkpoint> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(NnError::Checkpoint("bad magic".into()));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != FORMAT_VERSION {
        return Err(NnError::Checkpoint(format!("unsupported format version {version}")));
    }
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    let hlen = u64::from_le_bytes(b8) as usize;
    let mut hbuf = vec![0u8; hlen];
    r.read_exact(&mut hbuf)?;
    let header: Header = serde_json::from_slice(&hbuf)?;
    if header.format_version != version {
        return Err(NnError::Checkpoint("header/preamble version disagree".into()));
    }

    let mut store = ParamStore::new();
    let mut pending_m: Vec<(String, u64, Tensor)> = Vec::new();
    let mut moments = Vec::new();
    for e in header.tensors {
        let n: usize = e.shape.iter().product();
        let mut raw = vec![0u8; n * 8];
        r.read_exact(&mut raw)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let t = Tensor::new(e.shape.clone(), data)?;
        match e.kind {
            EntryKind::Param => {
                let id = store.add(e.name, t)?;
                store.get_mut(id).requires_grad = e.requires_grad;
            }
            EntryKind::AdamM => pending_m.push((e.name, e.adam_t, t)),
            EntryKind::AdamV => {
                let pos = pending_m
                    .iter()
                    .position(|(n, _, _)| *n == e.name)
                    .ok_or_else(|| NnError::Checkpoint(format!("second moment without first for {}", e.name)))?;
                let (name, tm, m) = pending_m.remove(pos);
                moments.push((name, tm, m, t));
            }
        }
    }
    if !pending_m.is_empty() {
        return Err(NnError::Checkpoint("unpaired optimizer moments".into()));
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(NnError::Checkpoint("trailing bytes after tensor data".into()));
    }
    Ok(Checkpoint {
        store,
        optimizer: if moments.is_empty() { None } else { Some(moments) },
        metadata: header.metadata,
    })
}

pub fn save(path: &Path, store: &ParamStore, optimizer: Option<&Adam>, metadata: &serde_json::Value) -> Result<()> {
    let f = File::create(path)?;
    write_checkpoint(BufWriter::new(f), store, optimizer, metadata)
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let f = File::open(path)?;
    read_checkpoint(BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::AdamConfig;

    #[test]
    fn round_trip_with_optimizer() {
        let mut store = ParamStore::new();
        let a = store.add("enc.w", Tensor::from_fn(&[2, 3], |i| i as f64 - 1.5)).unwrap();
        store.add("enc.b", Tensor::full(&[3], 0.25)).unwrap();
        store.get_mut(a).requires_grad = false;
        store.get_mut(store.id("enc.b").unwrap()).grad = Tensor::full(&[3], 1.0);
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut store).unwrap();
        let meta = serde_json::json!({"arm": "gated"});
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &store, Some(&adam), &meta).unwrap();
        let ck = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(ck.store.checksum(""), store.checksum(""));
        assert!(!ck.store.get(ck.store.id("enc.w").unwrap()).requires_grad);
        assert_eq!(ck.metadata, meta);
        let moments = ck.optimizer.unwrap();
        assert_eq!(moments.len(), 1);
        assert_eq!(moments[0].1, 1);
    }

    #[test]
    fn rejects_wrong_version() {
        let store = ParamStore::new();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &store, None, &serde_json::Value::Null).unwrap();
        buf[8] = 9;
        assert!(matches!(read_checkpoint(buf.as_slice()), Err(NnError::Checkpoint(_))));
    }
}
