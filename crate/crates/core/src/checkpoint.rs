//! Single-file checkpoint container.
//!
//! Layout (little-endian): magic `COBRACKP`, `u32` version, `u64` header
//! length, a JSON header, then every tensor as contiguous `f64`. The header
//! carries the model config, extractor registry, seed, code version and a
//! tensor index. Query tensors are named `query.*`, key tensors `key.*`.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::contrastive::{KeyModel, ModelConfig, QueryModel};
use crate::error::{Error, Result};
use crate::params::{NamedView, NamedViewMut, Parameters};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"COBRACKP";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Crate version plus `git describe` output at build time.
pub const CODE_VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "+", env!("COBRA_GIT_DESCRIBE"));

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the payload, in elements.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub code_version: String,
    pub seed: u64,
    pub epoch: usize,
    pub model: ModelConfig,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub query: QueryModel,
    pub key: KeyModel,
}

fn prefixed<'a>(prefix: &str, views: Vec<NamedView<'a>>) -> impl Iterator<Item = NamedView<'a>> + 'a {
    let prefix = prefix.to_string();
    views.into_iter().map(move |(n, v)| (format!("{prefix}.{n}"), v))
}

pub fn encode_checkpoint(query: &QueryModel, key: &KeyModel, model: &ModelConfig, meta: CheckpointMeta) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    let mut offset = 0;
    for (name, view) in prefixed("query", query.tensors()).chain(prefixed("key", key.tensors())) {
        tensors.push(TensorEntry {
            name,
            shape: view.shape().to_vec(),
            offset,
        });
        offset += view.len();
        for &x in view.iter() {
            payload.extend_from_slice(&x.to_le_bytes());
        }
    }
    let header = CheckpointHeader {
        format_version: CHECKPOINT_VERSION,
        code_version: CODE_VERSION.to_string(),
        seed: meta.seed,
        epoch: meta.epoch,
        model: model.clone(),
        tensors,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(20 + json.len() + payload.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn save_checkpoint(path: &Path, query: &QueryModel, key: &KeyModel, model: &ModelConfig, meta: CheckpointMeta) -> Result<()> {
    let bytes = encode_checkpoint(query, key, model, meta)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptCheckpoint(msg.into())
}

fn fill(prefix: &str, views: Vec<NamedViewMut<'_>>, header: &CheckpointHeader, payload: &[u8]) -> Result<()> {
    for (name, mut view) in views {
        let full = format!("{prefix}.{name}");
        let entry = header
            .tensors
            .iter()
            .find(|t| t.name == full)
            .ok_or_else(|| corrupt(format!("tensor `{full}` missing")))?;
        if entry.shape != view.shape() {
            return Err(corrupt(format!(
                "tensor `{full}` has shape {:?}, model expects {:?}",
                entry.shape,
                view.shape()
            )));
        }
        let start = entry.offset * 8;
        let end = start + view.len() * 8;
        let bytes = payload
            .get(start..end)
            .ok_or_else(|| corrupt(format!("tensor `{full}` extends past the payload")))?;
        for (dst, chunk) in view.iter_mut().zip(bytes.chunks_exact(8)) {
            *dst = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
        }
    }
    Ok(())
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let json = bytes
        .get(20..20usize.saturating_add(header_len))
        .ok_or_else(|| corrupt("header truncated"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(json).map_err(|e| corrupt(format!("header is not valid JSON: {e}")))?;
    let payload = &bytes[20 + header_len..];
    let expected: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    if payload.len() != expected * 8 {
        return Err(corrupt(format!(
            "payload holds {} bytes, index describes {}",
            payload.len(),
            expected * 8
        )));
    }
    header.model.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut query = QueryModel::new(&header.model, &mut rng)?;
    let mut key = query.key_copy();
    fill("query", query.tensors_mut(), &header, payload)?;
    fill("key", key.tensors_mut(), &header, payload)?;
    if !query.all_finite() || !key.all_finite() {
        return Err(corrupt("non-finite parameter"));
    }
    Ok(Checkpoint { header, query, key })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feature_store::ExtractorSpec;

    fn tiny() -> (ModelConfig, QueryModel, KeyModel) {
        let mut cfg = ModelConfig::desk();
        cfg.encoder.d_model = 8;
        cfg.encoder.d_hidden = 8;
        cfg.encoder.ssd_heads = 2;
        cfg.encoder.d_state = 3;
        cfg.encoder.attn_heads = 2;
        cfg.encoder.attn_dim = 4;
        cfg.encoder.extractors = vec![ExtractorSpec::new("a", 6, 1)];
        cfg.heads.proj_hidden = 5;
        cfg.heads.proj_dim = 4;
        cfg.heads.pred_hidden = 5;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = QueryModel::new(&cfg, &mut rng).unwrap();
        let mut k = q.key_copy();
        k.projector.fc1.weight[[0, 0]] += 1.0;
        (cfg, q, k)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (cfg, q, k) = tiny();
        let meta = CheckpointMeta { seed: 9, epoch: 4 };
        let bytes = encode_checkpoint(&q, &k, &cfg, meta).unwrap();
        let ck = decode_checkpoint(&bytes).unwrap();
        assert_eq!(ck.query, q);
        assert_eq!(ck.key, k);
        assert_eq!(ck.header.seed, 9);
        assert_eq!(ck.header.epoch, 4);
        assert_eq!(ck.header.model, cfg);
        assert_eq!(ck.header.code_version, CODE_VERSION);
    }

    #[test]
    fn damaged_files_are_rejected() {
        let (cfg, q, k) = tiny();
        let bytes = encode_checkpoint(&q, &k, &cfg, CheckpointMeta { seed: 0, epoch: 0 }).unwrap();
        assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 8]), Err(Error::CorruptCheckpoint(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(Error::CorruptCheckpoint(_))));
        assert!(matches!(decode_checkpoint(&bytes[..10]), Err(Error::CorruptCheckpoint(_))));
    }
}
