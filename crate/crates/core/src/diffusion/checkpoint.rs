//! Checkpoint container.
//!
//! ```text
//! magic    8 bytes   "HDRLCKPT"
//! version  u32 LE
//! hlen     u64 LE    length of the JSON header
//! header   hlen bytes
//! payload  f64 LE values; the header gives each tensor's offset
//! ```
//!
//! The header records the model and training configs, the run position, the
//! latent scale, the LDR encoder checksum, every parameter (name, shape,
//! trainable flag, offset) and the optimizer moments.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{LatentDiffusion, ModelConfig};
use super::train::{TrainConfig, TrainState, Trainer};
use crate::error::{Error, Result};
use crate::optim::AdamW;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"HDRLCKPT";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct MomentEntry {
    index: usize,
    m: usize,
    v: usize,
}

#[derive(Serialize, Deserialize)]
struct OptimizerEntry {
    step: u64,
    moments: Vec<MomentEntry>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    train: Option<TrainConfig>,
    state: TrainState,
    latent_scale: f64,
    ldr_checksum: String,
    tensors: Vec<TensorEntry>,
    optimizer: Option<OptimizerEntry>,
    payload_len: usize,
}

/// A restored model with whatever training state was saved alongside it.
pub struct Checkpoint {
    pub model: LatentDiffusion,
    pub train: Option<TrainConfig>,
    pub state: TrainState,
    pub optimizer: Option<AdamW>,
}

impl Checkpoint {
    /// Rebuilds the trainer the checkpoint was taken from.
    pub fn into_trainer(self) -> Result<Trainer> {
        match (self.train, self.optimizer) {
            (Some(cfg), Some(opt)) => Trainer::resume(self.model, cfg, opt, self.state),
            _ => Err(Error::Checkpoint("checkpoint holds no training state".into())),
        }
    }
}

fn push(payload: &mut Vec<f64>, t: &Tensor) -> usize {
    let off = payload.len();
    payload.extend_from_slice(t.data());
    off
}

/// Serialises a model and, optionally, the trainer state.
pub fn to_bytes(model: &LatentDiffusion, train: Option<&Trainer>) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    let store = &model.store;
    let tensors = store
        .ids()
        .map(|id| TensorEntry {
            name: store.name(id).to_string(),
            shape: store.value(id).shape().to_vec(),
            trainable: store.is_trainable(id),
            offset: push(&mut payload, store.value(id)),
        })
        .collect();
    let optimizer = train.map(|t| {
        let moments = t
            .optimizer
            .m
            .iter()
            .zip(&t.optimizer.v)
            .enumerate()
            .filter_map(|(index, (m, v))| match (m, v) {
                (Some(m), Some(v)) => Some(MomentEntry { index, m: push(&mut payload, m), v: push(&mut payload, v) }),
                _ => None,
            })
            .collect();
        OptimizerEntry { step: t.optimizer.step, moments }
    });
    let header = Header {
        model: model.config.clone(),
        train: train.map(|t| t.config.clone()),
        state: train.map(|t| t.state).unwrap_or_default(),
        latent_scale: model.latent_scale,
        ldr_checksum: model.ldr_encoder_checksum(),
        tensors,
        optimizer,
        payload_len: payload.len(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut out = Vec::with_capacity(20 + json.len() + 8 * payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn slice(payload: &[f64], off: usize, shape: &[usize]) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let data = payload
        .get(off..off + n)
        .ok_or_else(|| Error::Checkpoint(format!("tensor at {off} of {n} values runs past the payload")))?;
    Ok(Tensor::new(shape.to_vec(), data.to_vec()))
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = bytes.get(20..20usize.saturating_add(hlen)).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    let raw = &bytes[20 + hlen..];
    if raw.len() != 8 * header.payload_len {
        return Err(Error::Checkpoint(format!("payload is {} bytes, expected {}", raw.len(), 8 * header.payload_len)));
    }
    let payload: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();

    let mut model = LatentDiffusion::new(header.model.clone(), 0)?;
    if header.tensors.len() != model.store.len() {
        return Err(Error::Checkpoint(format!(
            "{} tensors stored, the configured model has {}",
            header.tensors.len(),
            model.store.len()
        )));
    }
    for e in &header.tensors {
        let id = model.store.find(&e.name).ok_or_else(|| Error::Checkpoint(format!("unknown tensor `{}`", e.name)))?;
        if model.store.value(id).shape() != e.shape.as_slice() {
            return Err(Error::Checkpoint(format!("tensor `{}` has shape {:?}", e.name, e.shape)));
        }
        *model.store.value_mut(id) = slice(&payload, e.offset, &e.shape)?;
        model.store.set_trainable(id, e.trainable);
    }
    model.latent_scale = header.latent_scale;
    let sum = model.ldr_encoder_checksum();
    if sum != header.ldr_checksum {
        return Err(Error::Checkpoint(format!("LDR encoder checksum mismatch: stored {}, computed {sum}", header.ldr_checksum)));
    }
    let optimizer = match (&header.optimizer, &header.train) {
        (Some(o), Some(cfg)) => {
            let n = model.store.len();
            let mut opt = AdamW::new(
                crate::optim::AdamWConfig { weight_decay: cfg.weight_decay, ..crate::optim::AdamWConfig::with_lr(cfg.lr) },
                n,
            );
            opt.step = o.step;
            for me in &o.moments {
                if me.index >= n {
                    return Err(bad("optimizer moment for a missing parameter"));
                }
                let shape = model.store.value(crate::nn::ParamStore::id_at(me.index)).shape().to_vec();
                opt.m[me.index] = Some(slice(&payload, me.m, &shape)?);
                opt.v[me.index] = Some(slice(&payload, me.v, &shape)?);
            }
            Some(opt)
        }
        _ => None,
    };
    Ok(Checkpoint { model, train: header.train, state: header.state, optimizer })
}

/// Writes through a temporary file in the same directory.
pub fn save_checkpoint(path: &Path, model: &LatentDiffusion, train: Option<&Trainer>) -> Result<()> {
    let bytes = to_bytes(model, train)?;
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    from_bytes(&bytes)
}
