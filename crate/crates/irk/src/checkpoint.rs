//! Single-file checkpoints.
//!
//! Layout: the 8-byte magic `IRKCKPT\0`, a little-endian `u32` version, a
//! little-endian `u64` header length, the JSON header, then every tensor as
//! little-endian `f32` in parameter-store order. Header offsets are relative
//! to the start of the payload.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use irk_core::model::{Model, ModelConfig};
use irk_core::ParamStore;
use serde::{Deserialize, Serialize};

use crate::error::{format_err, io_err, Result};

pub const MAGIC: [u8; 8] = *b"IRKCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
    len: u64,
    frozen: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    num_ids: usize,
    step: u64,
    tensors: BTreeMap<String, TensorEntry>,
}

/// A model rebuilt from a checkpoint.
pub struct Checkpoint {
    pub model: Model,
    pub store: ParamStore<f32>,
    /// Optimisation steps taken before the checkpoint was written.
    pub step: u64,
}

pub fn encode(model: &Model, store: &ParamStore<f32>, step: u64) -> Result<Vec<u8>> {
    let mut tensors = BTreeMap::new();
    let mut payload = Vec::with_capacity(4 * store.num_elements());
    for (_, p) in store.iter() {
        let offset = payload.len() as u64;
        for v in p.tensor.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        let entry = TensorEntry {
            shape: p.tensor.shape().to_vec(),
            dtype: "f32".into(),
            offset,
            len: payload.len() as u64 - offset,
            frozen: p.frozen,
        };
        if tensors.insert(p.name.clone(), entry).is_some() {
            return Err(format_err("<checkpoint>", format!("duplicate parameter {}", p.name)));
        }
    }
    let header = Header {
        model: model.config.clone(),
        num_ids: model.num_ids,
        step,
        tensors,
    };
    let json = serde_json::to_vec(&header).map_err(|e| format_err("<checkpoint>", e.to_string()))?;
    let mut out = Vec::with_capacity(20 + json.len() + payload.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Parses a checkpoint. The architecture is rebuilt from the stored config
/// and every parameter is then overwritten from the payload, so a file that
/// lacks or adds a tensor is rejected.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let bad = |m: String| format_err(path, m);
    if bytes.len() < 20 || bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
    let body = &bytes[20..];
    let hlen = usize::try_from(hlen)
        .ok()
        .filter(|&n| n <= body.len())
        .ok_or_else(|| bad("header length exceeds the file".into()))?;
    let header: Header =
        serde_json::from_slice(&body[..hlen]).map_err(|e| bad(format!("checkpoint header: {e}")))?;
    let payload = &body[hlen..];

    let mut store = ParamStore::new();
    let model = Model::init_seeded(header.model.clone(), header.num_ids, &mut store, 0)?;
    if store.len() != header.tensors.len() {
        return Err(bad(format!(
            "checkpoint holds {} tensors, the model has {}",
            header.tensors.len(),
            store.len()
        )));
    }
    let mut covered = 0u64;
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.name(id).to_string();
        let e = header
            .tensors
            .get(&name)
            .ok_or_else(|| bad(format!("tensor {name} missing")))?;
        if e.dtype != "f32" {
            return Err(bad(format!("tensor {name}: unsupported dtype {}", e.dtype)));
        }
        if e.shape != store.get(id).shape() {
            return Err(bad(format!(
                "tensor {name}: shape {:?}, model expects {:?}",
                e.shape,
                store.get(id).shape()
            )));
        }
        let n = store.get(id).numel() as u64;
        let end = e.offset.checked_add(e.len).filter(|&x| x <= payload.len() as u64);
        let end = match end {
            Some(end) if e.len == 4 * n => end as usize,
            _ => return Err(bad(format!("tensor {name}: payload range out of bounds"))),
        };
        let values: Vec<f32> = payload[e.offset as usize..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        store.set_values(id, &values)?;
        store.set_frozen(id, e.frozen);
        covered += e.len;
    }
    if covered != payload.len() as u64 {
        return Err(bad(format!(
            "payload has {} bytes, tensors cover {covered}",
            payload.len()
        )));
    }
    Ok(Checkpoint {
        model,
        store,
        step: header.step,
    })
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode(&bytes, path)
}

/// Writes through a temporary sibling and a rename, so a crash never leaves
/// a half-written file at `path`.
pub fn save(path: &Path, model: &Model, store: &ParamStore<f32>, step: u64) -> Result<()> {
    write_atomic(path, &encode(model, store, step)?)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = PathBuf::from(path);
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    tmp.set_file_name(name);
    let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(bytes).map_err(io_err(&tmp))?;
    f.sync_all().map_err(io_err(&tmp))?;
    drop(f);
    fs::rename(&tmp, path).map_err(io_err(path))
}
