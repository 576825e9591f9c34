//! Data preparation, the epoch loop and test-set evaluation shared by the
//! commands.

use std::collections::HashMap;

use hdrlift_core::data::{
    make_pairs, mix, select_single_exposure, split_dataset, DatasetManifest, EntryError, PairOptions, SplitConfig,
    TrainingPair,
};
use hdrlift_core::diffusion::{
    checkpoint, pretrain_autoencoder, sample_batch, LatentDiffusion, StepStats, Trainer,
};
use hdrlift_core::encoders::ConditionInputs;
use hdrlift_core::metrics::{evaluate, EvalPair, MetricReport, MetricRow};
use hdrlift_core::{Error, Result};
use log::{info, warn};

use crate::config::RunConfig;
use crate::run::{RunDir, TrainLog};

pub struct Datasets {
    pub train: DatasetManifest,
    pub test: DatasetManifest,
}

/// Loads the manifests, keeps one exposure per scene and splits when no
/// test manifest is given.
pub fn prepare_data(cfg: &RunConfig) -> Result<Datasets> {
    let path = cfg.train_manifest.as_deref().ok_or_else(|| Error::config("data.train_manifest", "not set"))?;
    let all = select_single_exposure(&DatasetManifest::load(path)?, &cfg.exposure_pick)?;
    match &cfg.test_manifest {
        Some(t) => {
            let test = select_single_exposure(&DatasetManifest::load(t)?, &cfg.exposure_pick)?;
            Ok(Datasets { train: all, test })
        }
        None => {
            let (train, test) = split_dataset(&all, SplitConfig::new(cfg.train_fraction, cfg.seed)?)?;
            Ok(Datasets { train, test })
        }
    }
}

/// One epoch's pairs in delivery order, plus per-entry failures.
pub fn load_pairs(m: &DatasetManifest, cfg: &RunConfig, epoch: u64, shuffle: bool) -> Result<(Vec<TrainingPair>, Vec<EntryError>)> {
    let opts = PairOptions {
        height: cfg.resolution,
        width: cfg.resolution,
        exposures: if shuffle { cfg.augment.clone() } else { Vec::new() },
        seed: cfg.seed,
        epoch,
        shuffle,
        workers: cfg.workers,
    };
    let (ok, errs) = make_pairs(m, &opts)?.partition();
    for e in &errs {
        warn!("skipping {}: {}", e.path.display(), e.message);
    }
    if ok.is_empty() {
        return Err(Error::Data(format!("{}: none of {} entries could be loaded", m.name, errs.len())));
    }
    Ok((ok, errs))
}

pub struct TrainOutcome {
    pub trainer: Trainer,
    pub rows: Vec<StepStats>,
    pub data_errors: usize,
    pub autoencoder_losses: Vec<f64>,
}

/// Where a training run starts from.
pub enum Start<'a> {
    Fresh,
    /// Reuse a pretrained autoencoder instead of pretraining one.
    SharedAutoencoder(&'a LatentDiffusion),
    Resume(checkpoint::Checkpoint),
}

/// Pretrains the autoencoder (fresh runs), then runs the diffusion epochs,
/// logging every step and checkpointing into `run`.
pub fn train(cfg: &RunConfig, data: &Datasets, run: &mut RunDir, start: Start<'_>) -> Result<TrainOutcome> {
    let mut autoencoder_losses = Vec::new();
    let mut trainer = match start {
        Start::Resume(ck) => {
            let t = ck.into_trainer()?;
            if t.model.config != cfg.model_config()? {
                return Err(Error::config("checkpoint", "model settings differ from the configuration"));
            }
            if t.config != cfg.train_config()? {
                return Err(Error::config("checkpoint", "training settings differ from the configuration"));
            }
            t
        }
        Start::Fresh | Start::SharedAutoencoder(_) => {
            let mut model = LatentDiffusion::new(cfg.model_config()?, cfg.seed)?;
            match start {
                Start::SharedAutoencoder(src) => model.copy_autoencoder_from(src)?,
                _ => {
                    let (pairs, _) = load_pairs(&data.train, cfg, 0, false)?;
                    autoencoder_losses = pretrain_with(&mut model, &pairs, cfg)?;
                }
            }
            model.sync_ldr_encoder();
            Trainer::new(model, cfg.train_config()?)?
        }
    };
    let ck_dir = run.subdir("checkpoints")?;
    let log_path = run.join("train_log.jsonl");
    let mut log = TrainLog::open(&log_path, trainer.state.step)?;
    run.record(&log_path, "training log");
    let mut rows = Vec::new();
    let mut data_errors = 0;
    let mut cache: HashMap<String, ConditionInputs> = HashMap::new();
    let limit = (cfg.max_steps > 0).then_some(cfg.max_steps);
    'epochs: while trainer.state.epoch < cfg.epochs {
        let epoch = trainer.state.epoch;
        let (pairs, errs) = load_pairs(&data.train, cfg, epoch as u64, true)?;
        data_errors += errs.len();
        for chunk in pairs.chunks(cfg.batch_size).skip(trainer.state.batch_in_epoch) {
            if limit.is_some_and(|l| trainer.state.step >= l) {
                break 'epochs;
            }
            let cond = chunk
                .iter()
                .map(|p| match cache.get(&p.id) {
                    Some(c) => Ok(c.clone()),
                    None => {
                        let c = trainer.model.extract_conditions(std::slice::from_ref(&p.ldr))?;
                        cache.insert(p.id.clone(), c.clone());
                        Ok(c)
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            let ldrs: Vec<_> = chunk.iter().map(|p| p.ldr.clone()).collect();
            let hdrs: Vec<_> = chunk.iter().map(|p| p.hdr.clone()).collect();
            let batch = trainer.model.batch_with(&ldrs, &hdrs, Some(ConditionInputs::stack(&cond)?))?;
            let stats = trainer.step(&batch)?;
            log.append(&stats)?;
            rows.push(stats);
        }
        trainer.end_epoch()?;
        info!("epoch {} done at step {}", epoch, trainer.state.step);
        if (epoch + 1) % cfg.checkpoint_every == 0 {
            let p = ck_dir.join(format!("epoch-{:04}.ckpt", epoch + 1));
            checkpoint::save_checkpoint(&p, &trainer.model, Some(&trainer))?;
            run.record(&p, "checkpoint");
        }
    }
    trainer.verify_frozen()?;
    let last = run.join("last.ckpt");
    checkpoint::save_checkpoint(&last, &trainer.model, Some(&trainer))?;
    run.record(&last, "checkpoint");
    Ok(TrainOutcome { trainer, rows, data_errors, autoencoder_losses })
}

/// Autoencoder reconstruction pretraining on the given pairs.
pub fn pretrain_with(model: &mut LatentDiffusion, pairs: &[TrainingPair], cfg: &RunConfig) -> Result<Vec<f64>> {
    let hdrs: Vec<_> = pairs.iter().map(|p| p.hdr.to_tensor()).collect();
    let ldrs: Vec<_> = pairs.iter().map(|p| p.ldr.to_unit_tensor()).collect();
    let losses = pretrain_autoencoder(model, &hdrs, &ldrs, &cfg.autoencoder_config())?;
    if let Some(l) = losses.last() {
        info!("autoencoder pretraining: final loss {l:.5}, latent scale {:.4}", model.latent_scale);
    }
    Ok(losses)
}

/// Per-image sampling seed for evaluation.
pub fn eval_seed(seed: u64, index: usize) -> u64 {
    mix(seed, index as u64)
}

/// Samples every test image and scores it against its reference.
pub fn evaluate_model(model: &LatentDiffusion, test: &DatasetManifest, cfg: &RunConfig) -> Result<MetricReport> {
    let (pairs, errs) = load_pairs(test, cfg, 0, false)?;
    let mut eval = Vec::with_capacity(pairs.len());
    for (ci, chunk) in pairs.chunks(8).enumerate() {
        let ldrs: Vec<_> = chunk.iter().map(|p| p.ldr.clone()).collect();
        let seeds: Vec<u64> = (0..chunk.len()).map(|i| eval_seed(cfg.seed, ci * 8 + i)).collect();
        let preds = sample_batch(model, &ldrs, cfg.sample_steps, &seeds)?;
        for (p, pred) in chunk.iter().zip(preds) {
            eval.push(EvalPair { id: p.id.clone(), gt: p.hdr.clone(), pred });
        }
    }
    let metric_cfg = cfg.metric_config()?;
    let report = evaluate(&eval, &metric_cfg, cfg.metric_threads)?;
    if errs.is_empty() {
        return Ok(report);
    }
    let mut rows = report.rows;
    rows.extend(errs.into_iter().map(|e| MetricRow {
        id: e.path.display().to_string(),
        psnr_db: None,
        ssim: None,
        perceptual: None,
        vdp_q: None,
        error: Some(e.message),
    }));
    Ok(MetricReport::from_rows(rows, &report.vdp_source))
}
