use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{Batch, LatentDiffusion, TrainableMask};
use crate::data::mix;
use crate::error::{Error, Result};
use crate::hdr::ToneCurve;
use crate::material::LossWeights;
use crate::optim::{clip_grad_norm, warmup_cosine, AdamW, AdamWConfig};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub lambda_mat: f64,
    pub mu: f64,
    pub seed: u64,
    pub mask: TrainableMask,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            weight_decay: 0.01,
            lambda_mat: LossWeights::DEFAULT_LAMBDA,
            mu: ToneCurve::default().mu,
            seed: 0,
            mask: TrainableMask::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("train.lr", format!("must be positive, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("train.weight_decay", "must be non-negative"));
        }
        if !(self.mu > 0.0) {
            return Err(Error::config("loss.mu", "must be positive"));
        }
        LossWeights::new(self.lambda_mat).map(|_| ())
    }

    fn optimizer(&self) -> AdamWConfig {
        AdamWConfig { weight_decay: self.weight_decay, ..AdamWConfig::with_lr(self.lr) }
    }
}

/// Position in the training run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainState {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: u64,
    /// Batches already consumed in the current epoch.
    pub batch_in_epoch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub epoch: usize,
    pub step: u64,
    pub l_d: f64,
    pub l_mat: f64,
    pub l_full: f64,
}

fn norm(t: &Tensor) -> f64 {
    t.data().iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Diffusion-stage optimisation of a model.
pub struct Trainer {
    pub model: LatentDiffusion,
    pub optimizer: AdamW,
    pub config: TrainConfig,
    pub state: TrainState,
    ldr_checksum: String,
}

impl Trainer {
    pub fn new(mut model: LatentDiffusion, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        model.apply_mask(config.mask);
        let optimizer = AdamW::new(config.optimizer(), model.store.len());
        let ldr_checksum = model.ldr_encoder_checksum();
        Ok(Self { model, optimizer, config, state: TrainState::default(), ldr_checksum })
    }

    /// Resumes with a restored optimizer and position.
    pub fn resume(model: LatentDiffusion, config: TrainConfig, optimizer: AdamW, state: TrainState) -> Result<Self> {
        let mut t = Self::new(model, config)?;
        if optimizer.m.len() != t.model.store.len() {
            return Err(Error::Checkpoint("optimizer state does not match the parameter count".into()));
        }
        t.optimizer = AdamW { config: t.config.optimizer(), ..optimizer };
        t.state = state;
        Ok(t)
    }

    /// The checksum the frozen encoder must keep.
    pub fn expected_ldr_checksum(&self) -> &str {
        &self.ldr_checksum
    }

    pub fn verify_frozen(&self) -> Result<()> {
        let now = self.model.ldr_encoder_checksum();
        if now != self.ldr_checksum {
            return Err(Error::Numeric(format!("frozen LDR encoder changed: {} -> {now}", self.ldr_checksum)));
        }
        Ok(())
    }

    /// Timesteps and noise for the next step; a pure function of the seed and
    /// the step counter.
    pub fn draw(&self, n: usize, latent_shape: &[usize]) -> (Vec<usize>, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.config.seed, self.state.step));
        let t_max = self.model.schedule.timesteps();
        let ts = (0..n).map(|_| rng.random_range(1..=t_max)).collect();
        let mut shape = vec![n];
        shape.extend_from_slice(latent_shape);
        (ts, Tensor::randn(&shape, &mut rng))
    }

    /// One optimisation step on `batch`.
    pub fn step(&mut self, batch: &Batch) -> Result<StepStats> {
        if batch.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let c = self.model.config.vae.latent_channels;
        let f = self.model.config.vae.downsample();
        let (h, w) = (batch.hdr.dim(2) / f, batch.hdr.dim(3) / f);
        let (ts, eps) = self.draw(batch.len(), &[c, h, w]);
        let weights = LossWeights::new(self.config.lambda_mat)?;
        let curve = ToneCurve::mu_law(self.config.mu)?;
        let mut tape = Tape::new();
        let loss = self.model.loss_graph(&mut tape, batch, &ts, &eps, weights, &curve)?;
        let (l_d, l_mat, l_full) =
            (tape.value(loss.l_d).item(), tape.value(loss.l_mat).item(), tape.value(loss.l_full).item());
        let grads = tape.backward(loss.l_full).into_param_grads();
        let grad_norm = grads.values().map(|g| norm(g).powi(2)).sum::<f64>().sqrt();
        if !l_full.is_finite() || !grad_norm.is_finite() {
            return Err(Error::NonFinite {
                step: self.state.step,
                detail: format!(
                    "t={ts:?} L_d={l_d} L_mat={l_mat} |eps|={:.4} |grad|={grad_norm}",
                    norm(&eps)
                ),
            });
        }
        self.optimizer.step(&mut self.model.store, &grads);
        let stats = StepStats { epoch: self.state.epoch, step: self.state.step, l_d, l_mat, l_full };
        self.state.step += 1;
        self.state.batch_in_epoch += 1;
        Ok(stats)
    }

    /// Closes an epoch after checking the frozen encoder.
    pub fn end_epoch(&mut self) -> Result<()> {
        self.verify_frozen()?;
        self.state.epoch += 1;
        self.state.batch_in_epoch = 0;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        Self { steps: 3000, lr: 3e-3, batch_size: 8, seed: 0 }
    }
}

const AE_CLIP: f64 = 1.0;
const AE_WARMUP: usize = 100;

/// Reconstruction training of the HDR encoder and decoder on HDR images and
/// LDR inputs (both as `[1, 3, h, w]` tensors in `[0, 1]`; LDR values are
/// linearised first). Copies the result
/// onto the LDR encoder and sets the latent scale to the inverse standard
/// deviation of the HDR latents. Gradients are clipped to norm 1 and the
/// learning rate follows a warmup/cosine schedule. Returns the per-step loss.
pub fn pretrain_autoencoder(
    model: &mut LatentDiffusion,
    hdrs: &[Tensor],
    ldrs: &[Tensor],
    cfg: &AutoencoderConfig,
) -> Result<Vec<f64>> {
    if hdrs.is_empty() {
        return Err(Error::Data("no images for autoencoder pretraining".into()));
    }
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(Error::config("vae.batch_size", "batch size and learning rate must be positive"));
    }
    let linear: Vec<Tensor> = ldrs.iter().map(|l| model.linearize_ldr(l)).collect();
    let images: Vec<&Tensor> = hdrs.iter().chain(&linear).collect();
    let saved: Vec<bool> = model.store.ids().map(|id| model.store.is_trainable(id)).collect();
    for id in model.store.ids().collect::<Vec<_>>() {
        let name = model.store.name(id);
        let on = name.starts_with(super::model::HDR_ENCODER) || name.starts_with(super::model::DECODER);
        model.store.set_trainable(id, on);
    }
    let scale = model.latent_scale;
    model.latent_scale = 1.0;
    let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..AdamWConfig::with_lr(cfg.lr) }, model.store.len());
    let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, 0xae));
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut cursor = order.len();
    let mut losses = Vec::with_capacity(cfg.steps);
    let result = (|| {
        for step in 0..cfg.steps {
            let mut pick = Vec::with_capacity(cfg.batch_size);
            while pick.len() < cfg.batch_size.min(images.len()) {
                if cursor == order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                pick.push(images[order[cursor]].clone());
                cursor += 1;
            }
            let x = Tensor::cat_batch(&pick);
            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let z = model.encode_raw(&mut tape, xv)?;
            let y_hat = model.decode_encoded(&mut tape, z);
            let y = model.encode_signal(&mut tape, xv);
            let d = tape.sub(y_hat, y);
            let sq = tape.square(d);
            let l2 = tape.mean_all(sq);
            let ab = tape.abs(d);
            let l1 = tape.mean_all(ab);
            let loss = tape.add(l2, l1);
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::NonFinite { step: step as u64, detail: "autoencoder reconstruction loss".into() });
            }
            let mut grads = tape.backward(loss).into_param_grads();
            clip_grad_norm(&mut grads, AE_CLIP);
            opt.config.lr = cfg.lr * warmup_cosine(step, AE_WARMUP.min(cfg.steps / 10), cfg.steps);
            opt.step(&mut model.store, &grads);
            losses.push(value);
        }
        Ok(())
    })();
    for (id, on) in model.store.ids().collect::<Vec<_>>().into_iter().zip(saved) {
        model.store.set_trainable(id, on);
    }
    if let Err(e) = result {
        model.latent_scale = scale;
        return Err(e);
    }
    model.sync_ldr_encoder();
    model.latent_scale = latent_scale_for(model, hdrs)?;
    Ok(losses)
}

/// Inverse standard deviation of the raw HDR latents.
pub fn latent_scale_for(model: &LatentDiffusion, hdrs: &[Tensor]) -> Result<f64> {
    let mut acc = Vec::new();
    for h in hdrs {
        let mut tape = Tape::new();
        let x = tape.constant(h.clone());
        let z = model.encode_raw(&mut tape, x)?;
        acc.extend_from_slice(tape.value(z).data());
    }
    let n = acc.len() as f64;
    let mean = acc.iter().sum::<f64>() / n;
    let var = acc.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    if !(var > 1e-12) {
        return Err(Error::Numeric("HDR latents have no spread; cannot set the latent scale".into()));
    }
    Ok(1.0 / var.sqrt())
}
