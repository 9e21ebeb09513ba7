//! Single-file training snapshots.
//!
//! Layout: magic `CSTDCKPT`, `u32` version, `u64` payload length, payload,
//! SHA-256 of the payload. The payload is a `u64`-prefixed JSON header
//! followed by little-endian `f64` blobs: parameters in header order, then
//! the first and second optimizer moments.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{CoModel, ModelConfig};
use crate::optim::AdamW;
use crate::train::{TrainConfig, Trainer};

const MAGIC: &[u8; 8] = b"CSTDCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RngState {
    seed: String,
    stream: u64,
    word_pos: u128,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    train: TrainConfig,
    model: ModelConfig,
    epoch: usize,
    step: usize,
    params: Vec<ParamEntry>,
    adam_step: u64,
    adam_betas: (f64, f64),
    adam_eps: f64,
    weight_decay: f64,
    rng: RngState,
}

fn push_f64s(buf: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn encode(trainer: &Trainer) -> Result<Vec<u8>> {
    let store = &trainer.model.store;
    let opt = &trainer.optimizer;
    let header = Header {
        train: trainer.config.clone(),
        model: trainer.model.config.clone(),
        epoch: trainer.epoch,
        step: trainer.step,
        params: store.iter().map(|(n, t)| ParamEntry { name: n.to_string(), shape: t.shape().to_vec() }).collect(),
        adam_step: opt.step,
        adam_betas: (opt.beta1, opt.beta2),
        adam_eps: opt.eps,
        weight_decay: opt.weight_decay,
        rng: RngState {
            seed: hex::encode(trainer.rng.get_seed()),
            stream: trainer.rng.get_stream(),
            word_pos: trainer.rng.get_word_pos(),
        },
    };
    let json = serde_json::to_vec(&header)?;
    let mut payload = Vec::new();
    payload.extend_from_slice(&(json.len() as u64).to_le_bytes());
    payload.extend_from_slice(&json);
    for (_, t) in store.iter() {
        push_f64s(&mut payload, t.data());
    }
    for m in opt.m.iter().chain(&opt.v) {
        push_f64s(&mut payload, m);
    }
    let mut out = Vec::with_capacity(payload.len() + 52);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
    out.extend_from_slice(&Sha256::digest(&payload));
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::CheckpointCorrupt("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::CheckpointCorrupt("size overflow".into()))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}

fn decode(bytes: &[u8]) -> Result<Trainer> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(Error::CheckpointCorrupt("missing magic".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion { found: version, expected: CHECKPOINT_VERSION });
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    if bytes.len() != 20 + len + 32 {
        return Err(Error::CheckpointCorrupt("length does not match header".into()));
    }
    let payload = &bytes[20..20 + len];
    if Sha256::digest(payload).as_slice() != &bytes[20 + len..] {
        return Err(Error::CheckpointCorrupt("checksum mismatch".into()));
    }
    let mut r = Reader { bytes: payload, pos: 0 };
    let hlen = r.u64()? as usize;
    let header: Header = serde_json::from_slice(r.take(hlen)?)
        .map_err(|e| Error::CheckpointCorrupt(format!("header: {e}")))?;

    let mut model = CoModel::new(header.model.clone(), header.train.seed)?;
    let ids: Vec<_> = model.store.ids().collect();
    if ids.len() != header.params.len() {
        return Err(Error::CheckpointMismatch("parameter count differs from the declared model".into()));
    }
    for (id, entry) in ids.iter().zip(&header.params) {
        let t = model.store.get(*id);
        if model.store.name(*id) != entry.name || t.shape() != entry.shape.as_slice() {
            return Err(Error::CheckpointMismatch(format!("parameter `{}`", entry.name)));
        }
    }
    for id in &ids {
        let n = model.store.get(*id).len();
        let values = r.f64s(n)?;
        model.store.get_mut(*id).data_mut().copy_from_slice(&values);
    }
    let mut optimizer = AdamW::new(&model.store, header.weight_decay);
    for i in 0..ids.len() {
        optimizer.m[i] = r.f64s(optimizer.m[i].len())?;
    }
    for i in 0..ids.len() {
        optimizer.v[i] = r.f64s(optimizer.v[i].len())?;
    }
    if r.pos != payload.len() {
        return Err(Error::CheckpointCorrupt("trailing bytes".into()));
    }
    optimizer.step = header.adam_step;
    (optimizer.beta1, optimizer.beta2) = header.adam_betas;
    optimizer.eps = header.adam_eps;

    let seed: [u8; 32] = hex::decode(&header.rng.seed)
        .ok()
        .and_then(|s| s.try_into().ok())
        .ok_or_else(|| Error::CheckpointCorrupt("rng seed".into()))?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(header.rng.stream);
    rng.set_word_pos(header.rng.word_pos);
    Ok(Trainer {
        config: header.train,
        model,
        optimizer,
        rng,
        epoch: header.epoch,
        step: header.step,
        log: Vec::new(),
    })
}

pub fn checkpoint_bytes(trainer: &Trainer) -> Result<Vec<u8>> {
    encode(trainer)
}

pub fn save_checkpoint(trainer: &Trainer, path: &Path) -> Result<()> {
    let bytes = encode(trainer)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Trainer> {
    decode(&fs::read(path)?)
}

/// Loads a checkpoint and rejects it unless its model matches `expected`.
pub fn load_checkpoint_for(path: &Path, expected: &ModelConfig) -> Result<Trainer> {
    let trainer = load_checkpoint(path)?;
    let found = &trainer.model.config;
    if found.encoder.feature_dim != expected.encoder.feature_dim {
        return Err(Error::CheckpointMismatch(format!(
            "feature size {} but {} was requested",
            found.encoder.feature_dim, expected.encoder.feature_dim
        )));
    }
    if found != expected {
        return Err(Error::CheckpointMismatch("model configuration differs".into()));
    }
    Ok(trainer)
}

/// Hex SHA-256 of a file's bytes.
pub fn file_hash(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}
