//! Binary checkpoint layout (little endian):
//!
//! ```text
//! magic "DTMOECKP" | u32 version | u64 n | n bytes JSON manifest
//! | u64 m | m bytes f64 values | 32 bytes SHA-256 of everything before
//! ```
//!
//! The manifest carries the configuration, model structure (pools, heads,
//! memory, event log) and parameter shapes; values follow in manifest order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

use super::{Model, ModelStructure};

const MAGIC: &[u8; 8] = b"DTMOECKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    id: ParamId,
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    structure: ModelStructure,
    next_param_id: u64,
    params: Vec<ParamEntry>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn write_checkpoint(model: &Model, mut out: impl Write) -> Result<()> {
    let manifest = Manifest {
        structure: model.structure.clone(),
        next_param_id: model.store.next_id(),
        params: model
            .store
            .iter()
            .map(|(id, p)| ParamEntry {
                id,
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| corrupt(e.to_string()))?;
    let mut buf = Vec::with_capacity(json.len() + 8 * model.store.scalar_count() + 64);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    buf.extend_from_slice(&((model.store.scalar_count() * 8) as u64).to_le_bytes());
    for (_, p) in model.store.iter() {
        for v in p.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let sum = Sha256::digest(&buf);
    buf.extend_from_slice(&sum);
    out.write_all(&buf)?;
    Ok(())
}

fn take<'a>(buf: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if buf.len() < n {
        return Err(corrupt("checkpoint is truncated"));
    }
    let (head, rest) = buf.split_at(n);
    *buf = rest;
    Ok(head)
}

fn take_u64(buf: &mut &[u8]) -> Result<u64> {
    Ok(u64::from_le_bytes(take(buf, 8)?.try_into().expect("8 bytes")))
}

pub fn read_checkpoint(mut input: impl Read) -> Result<Model> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    if bytes.len() < MAGIC.len() + 4 + 32 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(corrupt("not a checkpoint file"));
    }
    let (body, sum) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != sum {
        return Err(corrupt("checksum mismatch"));
    }
    let mut cur = &body[MAGIC.len()..];
    let version = u32::from_le_bytes(take(&mut cur, 4)?.try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(corrupt(format!("unsupported checkpoint version {version}")));
    }
    let n = take_u64(&mut cur)? as usize;
    let manifest: Manifest =
        serde_json::from_slice(take(&mut cur, n)?).map_err(|e| corrupt(format!("bad manifest: {e}")))?;
    let m = take_u64(&mut cur)? as usize;
    let mut blob = take(&mut cur, m)?;
    if !cur.is_empty() {
        return Err(corrupt("trailing bytes after parameter blob"));
    }
    let mut store = ParamStore::new();
    for p in manifest.params {
        let len: usize = p.shape.iter().product();
        let raw = take(&mut blob, len * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let value = Tensor::new(&p.shape, data).map_err(|e| corrupt(e.to_string()))?;
        store.insert_with_id(p.id, p.name, value);
    }
    if !blob.is_empty() {
        return Err(corrupt("parameter blob longer than the manifest describes"));
    }
    store.set_next_id(manifest.next_param_id);
    let model = Model {
        structure: manifest.structure,
        store,
    };
    model.check_params().map_err(|e| corrupt(e.to_string()))?;
    Ok(model)
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(model, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    read_checkpoint(BufReader::new(File::open(path)?))
}

impl Model {
    /// Every parameter the structure refers to exists in the store.
    fn check_params(&self) -> Result<()> {
        self.config().validate()?;
        let mut ids = self.shared_params();
        ids.extend(self.head_params());
        for l in &self.structure.layers {
            for e in &l.pool.experts {
                ids.extend(e.param_ids());
            }
            if l.pool.len() != l.router.head.len() {
                return Err(Error::Contract("expert pool and router head disagree".into()));
            }
        }
        match ids.iter().find(|id| !self.store.contains(**id)) {
            Some(id) => Err(Error::Contract(format!("parameter {} missing", id.0))),
            None => Ok(()),
        }
    }
}
