use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::schedule::{NoiseSchedule, ScheduleConfig};
use super::unet::{UNet, UNetConfig};
use super::vae::{Decoder, Encoder, VaeConfig};
use crate::encoders::{AblationFlags, ConditionConfig, ConditionEncoder, ConditionInputs, EncoderRegistry};
use crate::error::{Error, Result};
use crate::hdr::{HdrImage, LdrImage, ToneCurve};
use crate::material::{decompose_var, material_loss_var, LossWeights};
use crate::nn::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const HDR_ENCODER: &str = "vae.enc.";
pub const LDR_ENCODER: &str = "vae.ldr_enc.";
pub const DECODER: &str = "vae.dec.";
pub const DENOISER: &str = "unet.";
pub const CONDITION: &str = "cond.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Side of the square training images.
    pub resolution: usize,
    pub vae: VaeConfig,
    pub unet: UNetConfig,
    pub condition: ConditionConfig,
    pub schedule: ScheduleConfig,
    pub encoders: EncoderRegistry,
    /// Channels produced by the illumination provider.
    pub ill_channels: usize,
    /// Bound on x0 estimates, in scaled latent units.
    pub latent_clip: f64,
    /// Gain `g` of the signal encoding `ln(1 + g x) / ln(1 + g)`.
    pub log_gain: f64,
    /// Display gamma undone on LDR inputs before encoding.
    pub ldr_gamma: f64,
}

impl ModelConfig {
    /// 64x64 images, 8x8x3 latents, two-level denoiser.
    pub fn desk(flags: AblationFlags) -> Self {
        let vae = VaeConfig::desk();
        let grid = 64 / vae.downsample();
        let d = 64;
        Self {
            resolution: 64,
            unet: UNetConfig::desk(vae.latent_channels, d),
            condition: ConditionConfig { grid_h: grid, grid_w: grid, k: 8, d_embed: d, patch: 2, flags },
            vae,
            schedule: ScheduleConfig::default(),
            encoders: EncoderRegistry::default(),
            ill_channels: 3,
            latent_clip: 4.0,
            log_gain: 5000.0,
            ldr_gamma: 2.2,
        }
    }

    /// 512x512 images, 64x64x3 latents.
    pub fn full(flags: AblationFlags) -> Self {
        let vae = VaeConfig { channels: vec![128, 256, 512, 512], latent_channels: 3 };
        let grid = 512 / vae.downsample();
        let d = 768;
        Self {
            resolution: 512,
            unet: UNetConfig {
                in_channels: 6,
                out_channels: 3,
                widths: vec![320, 640, 1280, 1280],
                d_embed: d,
                time_dim: 1280,
                groups: 32,
            },
            condition: ConditionConfig { grid_h: grid, grid_w: grid, k: 8, d_embed: d, patch: 8, flags },
            vae,
            schedule: ScheduleConfig::default(),
            encoders: EncoderRegistry::default(),
            ill_channels: 3,
            latent_clip: 4.0,
            log_gain: 5000.0,
            ldr_gamma: 2.2,
        }
    }

    /// Pixel multiple every input side must be divisible by.
    pub fn size_multiple(&self) -> usize {
        self.vae.downsample() * self.unet.downsample()
    }

    pub fn latent_side(&self) -> usize {
        self.resolution / self.vae.downsample()
    }

    pub fn validate(&self) -> Result<()> {
        self.vae.validate()?;
        let c = self.vae.latent_channels;
        if self.resolution == 0 || self.resolution % self.size_multiple() != 0 {
            return Err(Error::config(
                "model.resolution",
                format!("{} is not a positive multiple of {}", self.resolution, self.size_multiple()),
            ));
        }
        if self.unet.in_channels != 2 * c || self.unet.out_channels != c {
            return Err(Error::config(
                "model.unet",
                format!("denoiser must map {} channels to {c}, configured {} -> {}", 2 * c, self.unet.in_channels, self.unet.out_channels),
            ));
        }
        if self.unet.d_embed != self.condition.d_embed {
            return Err(Error::config("model.d_embed", "denoiser and condition widths differ"));
        }
        if self.unet.widths.iter().any(|w| w % self.unet.groups != 0) {
            return Err(Error::config("model.groups", "every denoiser width must be divisible by the group count"));
        }
        if !(self.latent_clip > 0.0) {
            return Err(Error::config("model.latent_clip", "must be positive"));
        }
        if !(self.log_gain > 0.0 && self.log_gain.is_finite()) {
            return Err(Error::config("model.log_gain", "must be positive"));
        }
        if !(self.ldr_gamma > 0.0 && self.ldr_gamma.is_finite()) {
            return Err(Error::config("model.ldr_gamma", "must be positive"));
        }
        self.condition.flags.validate()
    }
}

/// Which parameter groups the diffusion stage updates. The LDR encoder is
/// never among them.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainableMask {
    pub unet: bool,
    pub cond: bool,
    pub encoder: bool,
    pub decoder: bool,
}

impl Default for TrainableMask {
    fn default() -> Self {
        Self { unet: true, cond: true, encoder: true, decoder: true }
    }
}

impl TrainableMask {
    /// Comma-separated subset of `unet`, `cond`, `enc`, `dec`.
    pub fn parse(s: &str) -> Result<Self> {
        let mut m = Self { unet: false, cond: false, encoder: false, decoder: false };
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "unet" => m.unet = true,
                "cond" => m.cond = true,
                "enc" => m.encoder = true,
                "dec" => m.decoder = true,
                "ldr_enc" => return Err(Error::config("train.trainable", "the LDR encoder is frozen")),
                other => return Err(Error::config("train.trainable", format!("unknown module `{other}`"))),
            }
        }
        Ok(m)
    }

    pub fn to_list(&self) -> String {
        let mut v = Vec::new();
        for (on, name) in [(self.unet, "unet"), (self.cond, "cond"), (self.encoder, "enc"), (self.decoder, "dec")] {
            if on {
                v.push(name);
            }
        }
        v.join(",")
    }
}

/// Loss terms of one batch, as tape variables.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub l_d: Var,
    pub l_mat: Var,
    pub l_full: Var,
}

/// A batch ready for the model: planar tensors plus the fixed condition
/// features.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `[n, 3, h, w]` in `[0, 1]`.
    pub ldr: Tensor,
    /// `[n, 3, h, w]` normalised radiance.
    pub hdr: Tensor,
    pub cond: ConditionInputs,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.ldr.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// HDR and LDR encoders, decoder, denoiser and condition encoder over one
/// parameter store.
pub struct LatentDiffusion {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub schedule: NoiseSchedule,
    /// Multiplier applied to raw encoder outputs.
    pub latent_scale: f64,
    hdr_encoder: Encoder,
    ldr_encoder: Encoder,
    decoder: Decoder,
    denoiser: UNet,
    condition: ConditionEncoder,
}

impl LatentDiffusion {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let schedule = NoiseSchedule::new(config.schedule)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let hdr_encoder = Encoder::new(&mut store, HDR_ENCODER.trim_end_matches('.'), &config.vae, &mut rng);
        let ldr_encoder = Encoder::new(&mut store, LDR_ENCODER.trim_end_matches('.'), &config.vae, &mut rng);
        let decoder = Decoder::new(&mut store, DECODER.trim_end_matches('.'), &config.vae, &mut rng);
        let denoiser = UNet::new(&mut store, DENOISER.trim_end_matches('.'), &config.unet, &mut rng)?;
        let condition = ConditionEncoder::new(&mut store, config.condition, config.ill_channels, &mut rng)?;
        let mut model =
            Self { config, store, schedule, latent_scale: 1.0, hdr_encoder, ldr_encoder, decoder, denoiser, condition };
        model.sync_ldr_encoder();
        Ok(model)
    }

    /// Copies the HDR encoder onto the LDR encoder and freezes the copy.
    pub fn sync_ldr_encoder(&mut self) {
        self.store.copy_prefix(HDR_ENCODER, LDR_ENCODER);
        self.store.set_trainable_prefix(LDR_ENCODER, false);
    }

    pub fn ldr_encoder_checksum(&self) -> String {
        self.store.checksum(LDR_ENCODER)
    }

    pub fn apply_mask(&mut self, mask: TrainableMask) {
        self.store.set_trainable_prefix(DENOISER, mask.unet);
        self.store.set_trainable_prefix(CONDITION, mask.cond);
        self.store.set_trainable_prefix(HDR_ENCODER, mask.encoder);
        self.store.set_trainable_prefix(DECODER, mask.decoder);
        self.store.set_trainable_prefix(LDR_ENCODER, false);
    }

    /// Takes encoder, LDR encoder and decoder weights plus the latent scale
    /// from a model with the same autoencoder layout.
    pub fn copy_autoencoder_from(&mut self, other: &LatentDiffusion) -> Result<()> {
        if self.config.vae != other.config.vae {
            return Err(Error::config("model.vae", "autoencoder layouts differ"));
        }
        for id in other.store.ids() {
            let name = other.store.name(id);
            if name.starts_with("vae.") {
                let dst = self.store.find(name).ok_or_else(|| Error::Checkpoint(format!("missing `{name}`")))?;
                *self.store.value_mut(dst) = other.store.value(id).clone();
            }
        }
        self.latent_scale = other.latent_scale;
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.store.count(|_| true)
    }

    fn check_image(&self, x: &Tensor) -> Result<()> {
        let s = x.shape();
        let m = self.config.size_multiple();
        if s.len() != 4 || s[1] != 3 || s[2] == 0 || s[2] % m != 0 || s[3] == 0 || s[3] % m != 0 {
            return Err(Error::Shape(format!("image batch {s:?} must be [n, 3, h, w] with sides divisible by {m}")));
        }
        Ok(())
    }

    /// `ln(1 + g x) / ln(1 + g)` on the tape.
    pub fn encode_signal(&self, tape: &mut Tape, x: Var) -> Var {
        let g = self.config.log_gain;
        let y = tape.scale(x, g);
        let y = tape.log1p(y);
        tape.scale(y, 1.0 / g.ln_1p())
    }

    /// Inverse of [`encode_signal`](Self::encode_signal). `y` is clamped to
    /// `[-1, 2]` first, so radiance stays below `g + 2`.
    pub fn decode_signal(&self, tape: &mut Tape, y: Var) -> Var {
        let g = self.config.log_gain;
        let y = tape.clamp(y, -1.0, 2.0);
        let x = tape.scale(y, g.ln_1p());
        let x = tape.expm1(x);
        tape.scale(x, 1.0 / g)
    }

    /// Display values in `[0, 1]` to linear radiance.
    pub fn linearize_ldr(&self, l: &Tensor) -> Tensor {
        let gamma = self.config.ldr_gamma;
        l.map(|v| v.powf(gamma))
    }

    /// Raw encoder output for radiance `x`, before latent scaling.
    pub fn encode_raw(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let y = self.encode_signal(tape, x);
        self.hdr_encoder.forward(tape, &self.store, y)
    }

    pub fn encode_hdr(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let z = self.encode_raw(tape, x)?;
        Ok(tape.scale(z, self.latent_scale))
    }

    /// Latent of linearised LDR radiance through the frozen encoder.
    pub fn encode_ldr(&self, tape: &mut Tape, linear: Var) -> Result<Var> {
        let y = self.encode_signal(tape, linear);
        let z = self.ldr_encoder.forward(tape, &self.store, y)?;
        Ok(tape.scale(z, self.latent_scale))
    }

    /// Decoder output in the encoded signal domain.
    pub fn decode_encoded(&self, tape: &mut Tape, z: Var) -> Var {
        let z = tape.scale(z, 1.0 / self.latent_scale);
        self.decoder.forward(tape, &self.store, z)
    }

    /// Decoded radiance, clamped at 0.
    pub fn decode(&self, tape: &mut Tape, z: Var) -> Var {
        let y = self.decode_encoded(tape, z);
        let x = self.decode_signal(tape, y);
        tape.clamp(x, 0.0, f64::INFINITY)
    }

    pub fn extract_conditions(&self, ldrs: &[LdrImage]) -> Result<ConditionInputs> {
        if ldrs.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        self.config.encoders.extract(ldrs, &self.config.condition)
    }

    pub fn condition_tokens(&self, tape: &mut Tape, inputs: &ConditionInputs) -> Result<Var> {
        self.condition.forward(tape, &self.store, inputs)
    }

    /// Noise estimate for `z_t` given the LDR latent and condition tokens.
    pub fn predict_noise(&self, tape: &mut Tape, zt: Var, zl: Var, ts: &[usize], tokens: Var) -> Result<Var> {
        let (a, b) = (tape.shape(zt).to_vec(), tape.shape(zl).to_vec());
        if a != b {
            return Err(Error::Shape(format!("noisy latent {a:?} and LDR latent {b:?} differ")));
        }
        for &t in ts {
            self.schedule.check_t(t)?;
        }
        let x = tape.concat(&[zt, zl], 1);
        self.denoiser.forward(tape, &self.store, x, ts, tokens)
    }

    /// Builds a batch from LDR/HDR pairs that share one size.
    pub fn batch(&self, ldrs: &[LdrImage], hdrs: &[HdrImage]) -> Result<Batch> {
        self.batch_with(ldrs, hdrs, None)
    }

    /// As [`batch`](Self::batch), reusing already extracted condition
    /// features when given.
    pub fn batch_with(&self, ldrs: &[LdrImage], hdrs: &[HdrImage], cond: Option<ConditionInputs>) -> Result<Batch> {
        if ldrs.is_empty() || ldrs.len() != hdrs.len() {
            return Err(Error::Data(format!("batch needs matching non-empty lists, got {} and {}", ldrs.len(), hdrs.len())));
        }
        let (h, w) = (hdrs[0].height(), hdrs[0].width());
        for (l, x) in ldrs.iter().zip(hdrs) {
            if x.height() != h || x.width() != w || l.height() != h || l.width() != w {
                return Err(Error::Shape(format!("all batch images must be {h}x{w}")));
            }
        }
        let ldr = Tensor::cat_batch(&ldrs.iter().map(LdrImage::to_unit_tensor).collect::<Vec<_>>());
        let hdr = Tensor::cat_batch(&hdrs.iter().map(HdrImage::to_tensor).collect::<Vec<_>>());
        self.check_image(&ldr)?;
        let cond = match cond {
            Some(c) if c.batch == ldrs.len() => c,
            Some(c) => return Err(Error::Shape(format!("{} condition rows for {} images", c.batch, ldrs.len()))),
            None => self.extract_conditions(ldrs)?,
        };
        Ok(Batch { ldr, hdr, cond })
    }

    /// Target latents `E(h)` as plain values.
    pub fn target_latents(&self, hdr: &Tensor) -> Result<Tensor> {
        self.check_image(hdr)?;
        let mut tape = Tape::new();
        let h = tape.constant(hdr.clone());
        let z = self.encode_hdr(&mut tape, h)?;
        Ok(tape.value(z).clone())
    }

    /// LDR latents `Ē(l)` as plain values; `ldr` holds display values in
    /// `[0, 1]`.
    pub fn ldr_latents(&self, ldr: &Tensor) -> Result<Tensor> {
        self.check_image(ldr)?;
        let mut tape = Tape::new();
        let l = tape.constant(self.linearize_ldr(ldr));
        let z = self.encode_ldr(&mut tape, l)?;
        Ok(tape.value(z).clone())
    }

    /// Noisy latents for per-sample timesteps.
    pub fn noised(&self, z0: &Tensor, ts: &[usize], eps: &Tensor) -> Result<Tensor> {
        if z0.dim(0) != ts.len() || z0.shape() != eps.shape() {
            return Err(Error::Shape(format!("{} timesteps for latents {:?}, noise {:?}", ts.len(), z0.shape(), eps.shape())));
        }
        let parts = ts
            .iter()
            .enumerate()
            .map(|(i, &t)| self.schedule.forward_noise(&z0.narrow_batch(i, 1), t, &eps.narrow_batch(i, 1)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::cat_batch(&parts))
    }

    /// Builds `L_d`, `L_mat` and `L_full` for fixed timesteps and noise.
    /// The target latent is held constant; the material term reaches the
    /// denoiser through the one-step x0 estimate and the decoder.
    pub fn loss_graph(
        &self,
        tape: &mut Tape,
        batch: &Batch,
        ts: &[usize],
        eps: &Tensor,
        weights: LossWeights,
        curve: &ToneCurve,
    ) -> Result<LossVars> {
        let n = batch.len();
        if ts.len() != n || batch.cond.batch != n {
            return Err(Error::Shape(format!("batch of {n} with {} timesteps", ts.len())));
        }
        let z0 = self.target_latents(&batch.hdr)?;
        let zl = self.ldr_latents(&batch.ldr)?;
        let zt = self.noised(&z0, ts, eps)?;

        let zt = tape.constant(zt);
        let zl = tape.constant(zl);
        let tokens = self.condition_tokens(tape, &batch.cond)?;
        let eps_hat = self.predict_noise(tape, zt, zl, ts, tokens)?;
        let eps_v = tape.constant(eps.clone());
        let diff = tape.sub(eps_hat, eps_v);
        let sq = tape.square(diff);
        let l_d = tape.mean_all(sq);

        let mut inv_a = Vec::with_capacity(n);
        let mut s_over_a = Vec::with_capacity(n);
        for &t in ts {
            let ab = self.schedule.alpha_bar(t);
            if ab <= 0.0 {
                return Err(Error::Numeric(format!("alpha_bar({t}) is zero; x0 cannot be recovered")));
            }
            inv_a.push(1.0 / ab.sqrt());
            s_over_a.push((1.0 - ab).sqrt() / ab.sqrt());
        }
        let inv_a = tape.constant(Tensor::new(vec![n, 1, 1, 1], inv_a));
        let s_over_a = tape.constant(Tensor::new(vec![n, 1, 1, 1], s_over_a));
        let a = tape.mul(zt, inv_a);
        let b = tape.mul(eps_hat, s_over_a);
        let x0 = tape.sub(a, b);
        let clip = self.config.latent_clip;
        let x0 = tape.clamp(x0, -clip, clip);
        let h_hat = self.decode(tape, x0);
        let h = tape.constant(batch.hdr.clone());
        let gt = decompose_var(tape, h);
        let pred = decompose_var(tape, h_hat);
        let l_mat = material_loss_var(tape, &gt, &pred, curve);
        let l_full = if weights.lambda_mat == 0.0 {
            l_d
        } else {
            let m = tape.scale(l_mat, weights.lambda_mat);
            tape.add(l_d, m)
        };
        Ok(LossVars { l_d, l_mat, l_full })
    }
}
