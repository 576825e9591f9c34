//! Run configuration: flat `key = value` text, presets, overrides.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use hdrlift_core::data::{ExposureParams, ExposurePick, SplitConfig};
use hdrlift_core::diffusion::{AutoencoderConfig, ModelConfig, ScheduleConfig, TrainConfig, TrainableMask};
use hdrlift_core::encoders::{AblationFlags, EncoderRegistry};
use hdrlift_core::material::{LossWeights, MaterialProvider};
use hdrlift_core::metrics::{MetricConfig, PerceptualProvider, VdpProvider};
use hdrlift_core::{Error, Result, ToneCurve};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Desk,
    Full,
}

impl Preset {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Self::Desk),
            "full" => Ok(Self::Full),
            other => Err(Error::config("preset", format!("expected `desk` or `full`, got `{other}`"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Desk => "desk",
            Self::Full => "full",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: Preset,
    pub train_manifest: Option<PathBuf>,
    pub test_manifest: Option<PathBuf>,
    pub train_fraction: f64,
    pub exposure_pick: ExposurePick,
    pub augment: Vec<ExposureParams>,
    pub workers: usize,
    pub resolution: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub lambda_mat: f64,
    pub seed: u64,
    /// Stop after this many optimizer steps; 0 means no limit.
    pub max_steps: u64,
    pub checkpoint_every: usize,
    pub trainable: TrainableMask,
    pub vae_steps: usize,
    pub vae_lr: f64,
    pub vae_batch: usize,
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub sample_steps: usize,
    pub mu: f64,
    pub illumination: String,
    pub depth: String,
    pub embedding: String,
    pub material: String,
    pub perceptual: String,
    pub vdp: String,
    pub metric_threads: usize,
    pub flags: AblationFlags,
    /// Allows flag combinations outside the ladder.
    pub custom_flags: bool,
    pub concurrent_rows: bool,
}

/// Every accepted key, in snapshot order.
pub const KEYS: &[&str] = &[
    "preset",
    "data.train_manifest",
    "data.test_manifest",
    "data.train_fraction",
    "data.exposure_pick",
    "data.augment_exposures",
    "data.workers",
    "data.resolution",
    "train.epochs",
    "train.batch_size",
    "train.lr",
    "train.weight_decay",
    "train.lambda_mat",
    "train.seed",
    "train.max_steps",
    "train.checkpoint_every",
    "train.trainable",
    "vae.steps",
    "vae.lr",
    "vae.batch_size",
    "diffusion.timesteps",
    "diffusion.beta_start",
    "diffusion.beta_end",
    "sample.steps",
    "loss.mu",
    "encoders.illumination",
    "encoders.depth",
    "encoders.embedding",
    "material.provider",
    "metrics.perceptual",
    "metrics.vdp",
    "metrics.threads",
    "ablation.clip",
    "ablation.depth",
    "ablation.illum",
    "ablation.fusion",
    "ablation.emb",
    "ablation.custom",
    "ablation.concurrent",
];

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::config(key, format!("cannot parse `{v}`")))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::config(key, format!("expected a boolean, got `{v}`"))),
    }
}

fn path_or_none(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        let desk = Self {
            preset: Preset::Desk,
            train_manifest: None,
            test_manifest: None,
            train_fraction: 0.8,
            exposure_pick: ExposurePick::Middle,
            augment: Vec::new(),
            workers: 1,
            resolution: 64,
            epochs: 200,
            batch_size: 8,
            lr: 1e-3,
            weight_decay: 0.01,
            lambda_mat: LossWeights::DEFAULT_LAMBDA,
            seed: 0,
            max_steps: 0,
            checkpoint_every: 50,
            trainable: TrainableMask::default(),
            vae_steps: 3000,
            vae_lr: 3e-3,
            vae_batch: 8,
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 2e-2,
            sample_steps: 50,
            mu: ToneCurve::default().mu,
            illumination: "toy".into(),
            depth: "toy".into(),
            embedding: "toy".into(),
            material: "toy".into(),
            perceptual: "toy".into(),
            vdp: "stub".into(),
            metric_threads: 1,
            flags: AblationFlags::FULL,
            custom_flags: false,
            concurrent_rows: false,
        };
        match p {
            Preset::Desk => desk,
            Preset::Full => Self {
                preset: Preset::Full,
                resolution: 512,
                epochs: 200,
                batch_size: 10,
                lr: 1e-5,
                checkpoint_every: 10,
                vae_steps: 20_000,
                vae_lr: 1e-4,
                vae_batch: 10,
                sample_steps: 1000,
                ..desk
            },
        }
    }

    /// Sets one key. Switching `preset` resets every other value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "preset" => *self = Self::preset(Preset::parse(v)?),
            "data.train_manifest" => self.train_manifest = path_or_none(v),
            "data.test_manifest" => self.test_manifest = path_or_none(v),
            "data.train_fraction" => self.train_fraction = num(key, v)?,
            "data.exposure_pick" => self.exposure_pick = ExposurePick::parse(v),
            "data.augment_exposures" => {
                self.augment = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| ExposureParams::parse(s).map_err(|e| Error::config(key, e.to_string())))
                    .collect::<Result<_>>()?
            }
            "data.workers" => self.workers = num(key, v)?,
            "data.resolution" => self.resolution = num(key, v)?,
            "train.epochs" => self.epochs = num(key, v)?,
            "train.batch_size" => self.batch_size = num(key, v)?,
            "train.lr" => self.lr = num(key, v)?,
            "train.weight_decay" => self.weight_decay = num(key, v)?,
            "train.lambda_mat" => self.lambda_mat = num(key, v)?,
            "train.seed" => self.seed = num(key, v)?,
            "train.max_steps" => self.max_steps = num(key, v)?,
            "train.checkpoint_every" => self.checkpoint_every = num(key, v)?,
            "train.trainable" => self.trainable = TrainableMask::parse(v)?,
            "vae.steps" => self.vae_steps = num(key, v)?,
            "vae.lr" => self.vae_lr = num(key, v)?,
            "vae.batch_size" => self.vae_batch = num(key, v)?,
            "diffusion.timesteps" => self.timesteps = num(key, v)?,
            "diffusion.beta_start" => self.beta_start = num(key, v)?,
            "diffusion.beta_end" => self.beta_end = num(key, v)?,
            "sample.steps" => self.sample_steps = num(key, v)?,
            "loss.mu" => self.mu = num(key, v)?,
            "encoders.illumination" => self.illumination = v.to_string(),
            "encoders.depth" => self.depth = v.to_string(),
            "encoders.embedding" => self.embedding = v.to_string(),
            "material.provider" => self.material = v.to_string(),
            "metrics.perceptual" => self.perceptual = v.to_string(),
            "metrics.vdp" => self.vdp = v.to_string(),
            "metrics.threads" => self.metric_threads = num(key, v)?,
            "ablation.clip" => self.flags.clip = flag(key, v)?,
            "ablation.depth" => self.flags.depth = flag(key, v)?,
            "ablation.illum" => self.flags.illum = flag(key, v)?,
            "ablation.fusion" => self.flags.fusion = flag(key, v)?,
            "ablation.emb" => self.flags.emb = flag(key, v)?,
            "ablation.custom" => self.custom_flags = flag(key, v)?,
            "ablation.concurrent" => self.concurrent_rows = flag(key, v)?,
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let p = |x: &Option<PathBuf>| x.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        Some(match key {
            "preset" => self.preset.as_str().into(),
            "data.train_manifest" => p(&self.train_manifest),
            "data.test_manifest" => p(&self.test_manifest),
            "data.train_fraction" => self.train_fraction.to_string(),
            "data.exposure_pick" => self.exposure_pick.as_str().into(),
            "data.augment_exposures" => {
                self.augment.iter().map(|e| format!("{}:{}", e.alpha, e.beta)).collect::<Vec<_>>().join(",")
            }
            "data.workers" => self.workers.to_string(),
            "data.resolution" => self.resolution.to_string(),
            "train.epochs" => self.epochs.to_string(),
            "train.batch_size" => self.batch_size.to_string(),
            "train.lr" => self.lr.to_string(),
            "train.weight_decay" => self.weight_decay.to_string(),
            "train.lambda_mat" => self.lambda_mat.to_string(),
            "train.seed" => self.seed.to_string(),
            "train.max_steps" => self.max_steps.to_string(),
            "train.checkpoint_every" => self.checkpoint_every.to_string(),
            "train.trainable" => self.trainable.to_list(),
            "vae.steps" => self.vae_steps.to_string(),
            "vae.lr" => self.vae_lr.to_string(),
            "vae.batch_size" => self.vae_batch.to_string(),
            "diffusion.timesteps" => self.timesteps.to_string(),
            "diffusion.beta_start" => self.beta_start.to_string(),
            "diffusion.beta_end" => self.beta_end.to_string(),
            "sample.steps" => self.sample_steps.to_string(),
            "loss.mu" => self.mu.to_string(),
            "encoders.illumination" => self.illumination.clone(),
            "encoders.depth" => self.depth.clone(),
            "encoders.embedding" => self.embedding.clone(),
            "material.provider" => self.material.clone(),
            "metrics.perceptual" => self.perceptual.clone(),
            "metrics.vdp" => self.vdp.clone(),
            "metrics.threads" => self.metric_threads.to_string(),
            "ablation.clip" => self.flags.clip.to_string(),
            "ablation.depth" => self.flags.depth.to_string(),
            "ablation.illum" => self.flags.illum.to_string(),
            "ablation.fusion" => self.flags.fusion.to_string(),
            "ablation.emb" => self.flags.emb.to_string(),
            "ablation.custom" => self.custom_flags.to_string(),
            "ablation.concurrent" => self.concurrent_rows.to_string(),
            _ => return None,
        })
    }

    /// Applies `key = value` lines. `#` starts a comment. A `preset` line
    /// must come first, since it resets everything else. Relative manifest
    /// paths resolve against `base`.
    pub fn apply_text(&mut self, text: &str, base: Option<&Path>) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}", lineno + 1), format!("expected `key = value`, got `{line}`")))?;
            let (k, v) = (k.trim(), v.trim());
            self.set(k, v)?;
            if let (Some(b), "data.train_manifest" | "data.test_manifest") = (base, k) {
                if !v.is_empty() && Path::new(v).is_relative() {
                    self.set(k, &b.join(v).display().to_string())?;
                }
            }
        }
        Ok(())
    }

    /// Preset, then the optional file, then `key=value` overrides.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = Self::preset(Preset::Desk);
        let preset_override = overrides.iter().find_map(|o| o.strip_prefix("preset=").map(str::trim));
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            cfg.apply_text(&text, path.parent())?;
        }
        if let Some(p) = preset_override {
            let mut fresh = Self::preset(Preset::parse(p)?);
            if let Some(path) = file {
                let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                let rest: String =
                    text.lines().filter(|l| !l.trim_start().starts_with("preset")).map(|l| format!("{l}\n")).collect();
                fresh.apply_text(&rest, path.parent())?;
            }
            cfg = fresh;
        }
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| Error::config(o.clone(), "override must be key=value"))?;
            if k.trim() != "preset" {
                cfg.set(k.trim(), v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every key with its current value, one `key = value` line each.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in KEYS {
            let _ = writeln!(s, "{k} = {}", self.get(k).expect("listed key"));
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("train.epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config("train.lr", "must be positive"));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::config("train.checkpoint_every", "must be at least 1"));
        }
        if self.workers == 0 || self.metric_threads == 0 {
            return Err(Error::config("data.workers", "worker and thread counts must be at least 1"));
        }
        if self.sample_steps == 0 || self.sample_steps > self.timesteps {
            return Err(Error::config("sample.steps", format!("must lie in [1, {}]", self.timesteps)));
        }
        SplitConfig::new(self.train_fraction, self.seed).map_err(|e| Error::config("data.train_fraction", e.to_string()))?;
        if !self.custom_flags && self.flags.ladder_label().is_none() {
            return Err(Error::config(
                "ablation",
                "flags are not a ladder row; set ablation.custom = true to allow other combinations",
            ));
        }
        MaterialProvider::from_config(&self.material)?;
        self.metric_config()?;
        self.train_config()?.validate()?;
        self.model_config()?.validate()?;
        Ok(())
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut m = match self.preset {
            Preset::Desk => ModelConfig::desk(self.flags),
            Preset::Full => ModelConfig::full(self.flags),
        };
        let f = m.vae.downsample();
        if self.resolution == 0 || self.resolution % f != 0 {
            return Err(Error::config("data.resolution", format!("must be a positive multiple of {f}")));
        }
        m.resolution = self.resolution;
        m.condition.grid_h = self.resolution / f;
        m.condition.grid_w = self.resolution / f;
        m.schedule = ScheduleConfig { timesteps: self.timesteps, beta_start: self.beta_start, beta_end: self.beta_end };
        m.encoders = EncoderRegistry::from_config(&self.illumination, &self.depth, &self.embedding)?;
        Ok(m)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            lambda_mat: self.lambda_mat,
            mu: self.mu,
            seed: self.seed,
            mask: self.trainable,
        })
    }

    pub fn autoencoder_config(&self) -> AutoencoderConfig {
        AutoencoderConfig { steps: self.vae_steps, lr: self.vae_lr, batch_size: self.vae_batch, seed: self.seed }
    }

    pub fn metric_config(&self) -> Result<MetricConfig> {
        Ok(MetricConfig {
            curve: ToneCurve::mu_law(self.mu)?,
            perceptual: PerceptualProvider::from_config(&self.perceptual)?,
            vdp: VdpProvider::from_config(&self.vdp)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snapshot_roundtrips() {
        let mut cfg = RunConfig::preset(Preset::Desk);
        cfg.set("train.lambda_mat", "0").unwrap();
        cfg.set("data.augment_exposures", "1:0,2:-10").unwrap();
        let mut back = RunConfig::preset(Preset::Desk);
        back.apply_text(&cfg.to_text(), None).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(KEYS.len(), cfg.to_text().lines().count());
    }

    #[test]
    fn rejects_unknown_keys_with_their_name() {
        let mut cfg = RunConfig::preset(Preset::Desk);
        match cfg.apply_text("train.learning_rate = 1e-3\n", None) {
            Err(Error::Config { key, .. }) => assert_eq!(key, "train.learning_rate"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn off_ladder_flags_need_custom() {
        let mut cfg = RunConfig::preset(Preset::Desk);
        cfg.set("ablation.clip", "true").unwrap();
        cfg.set("ablation.emb", "false").unwrap();
        cfg.set("ablation.fusion", "false").unwrap();
        assert!(cfg.validate().is_err());
        cfg.set("ablation.custom", "true").unwrap();
        cfg.validate().unwrap();
    }

    #[test]
    fn comments_and_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("run.cfg");
        std::fs::write(&f, "# desk run\ntrain.epochs = 3  # short\ndata.train_manifest = m.txt\n").unwrap();
        let cfg = RunConfig::load(Some(&f), &["train.epochs=5".into()]).unwrap();
        assert_eq!(cfg.epochs, 5);
        assert_eq!(cfg.train_manifest.unwrap(), dir.path().join("m.txt"));
        let full = RunConfig::load(Some(&f), &["preset=full".into()]).unwrap();
        assert_eq!((full.preset, full.epochs, full.resolution), (Preset::Full, 3, 512));
    }
}
