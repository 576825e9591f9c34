//! `train`, `infer`, `eval` and `synth-data`.

use std::path::{Path, PathBuf};

use hdrlift_core::data::{
    load_hdr, mix, resize_hdr, resize_ldr, select_single_exposure, simulate_ldr, synth_exposure, synthetic_scene,
    DatasetManifest, ExposureParams, ManifestEntry,
};
use hdrlift_core::diffusion::{load_checkpoint, sample};
use hdrlift_core::hdr::{reinhard_display, write_rgbe_file};
use hdrlift_core::metrics::MetricReport;
use hdrlift_core::{Error, HdrImage, LdrImage, Result};
use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::RunConfig;
use crate::pipeline::{self, Datasets, Start, TrainOutcome};
use crate::run::RunDir;

pub const CONFIG_SNAPSHOT: &str = "config.cfg";

/// Copy of `m` with every path made absolute, so it can live anywhere.
pub fn absolute(m: &DatasetManifest) -> DatasetManifest {
    let root = std::path::absolute(&m.root).unwrap_or_else(|_| m.root.clone());
    let entries = m
        .entries
        .iter()
        .map(|e| ManifestEntry { ldr: root.join(&e.ldr), hdr: root.join(&e.hdr), exposure_tag: e.exposure_tag.clone() })
        .collect();
    DatasetManifest { name: m.name.clone(), root: PathBuf::new(), entries }
}

/// Saves the config snapshot and the train/test manifests actually used.
pub fn record_inputs(run: &mut RunDir, cfg: &RunConfig, data: &Datasets) -> Result<()> {
    let mut snap = cfg.clone();
    for p in [&mut snap.train_manifest, &mut snap.test_manifest].into_iter().flatten() {
        *p = std::path::absolute(&*p).map_err(|e| Error::io(&*p, e))?;
    }
    run.write_text(CONFIG_SNAPSHOT, &snap.to_text(), "config snapshot")?;
    run.write_text("split/train.txt", &absolute(&data.train).to_text(), "train manifest")?;
    run.write_text("split/test.txt", &absolute(&data.test).to_text(), "test manifest")?;
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct TrainSummary {
    pub epochs: usize,
    pub steps: u64,
    pub final_l_d: Option<f64>,
    pub final_l_mat: Option<f64>,
    pub final_l_full: Option<f64>,
    pub data_errors: usize,
    pub latent_scale: f64,
    pub parameters: usize,
}

impl TrainSummary {
    fn of(out: &TrainOutcome) -> Self {
        let last = out.rows.last();
        Self {
            epochs: out.trainer.state.epoch,
            steps: out.trainer.state.step,
            final_l_d: last.map(|r| r.l_d),
            final_l_mat: last.map(|r| r.l_mat),
            final_l_full: last.map(|r| r.l_full),
            data_errors: out.data_errors,
            latent_scale: out.trainer.model.latent_scale,
            parameters: out.trainer.model.param_count(),
        }
    }
}

/// Trains into `run_dir`, optionally resuming from a checkpoint.
pub fn cmd_train(cfg: &RunConfig, run_dir: &Path, resume: Option<&Path>) -> Result<TrainSummary> {
    let data = pipeline::prepare_data(cfg)?;
    let mut run = RunDir::create(run_dir)?;
    record_inputs(&mut run, cfg, &data)?;
    let start = match resume {
        Some(p) => Start::Resume(load_checkpoint(p)?),
        None => Start::Fresh,
    };
    let out = pipeline::train(cfg, &data, &mut run, start)?;
    if out.data_errors > 0 {
        log::warn!("{} entries failed to load during training", out.data_errors);
    }
    let summary = TrainSummary::of(&out);
    if !out.autoencoder_losses.is_empty() {
        let text: String = out.autoencoder_losses.iter().map(|l| format!("{l}\n")).collect();
        run.write_text("autoencoder_loss.txt", &text, "autoencoder loss")?;
    }
    run.write_text("summary.json", &(serde_json::to_string_pretty(&summary).expect("summary") + "\n"), "summary")?;
    run.finish()?;
    Ok(summary)
}

pub struct InferArgs<'a> {
    pub checkpoint: &'a Path,
    pub input: &'a Path,
    pub output: &'a Path,
    pub display: Option<&'a Path>,
    pub steps: usize,
    pub seed: u64,
}

/// Reconstructs one LDR image; writes RGBE at the input's size plus a
/// display PNG. Returns the two paths.
pub fn cmd_infer(a: &InferArgs<'_>) -> Result<(PathBuf, PathBuf)> {
    let model = load_checkpoint(a.checkpoint)?.model;
    let ldr = LdrImage::read_png(a.input)?;
    let r = model.config.resolution;
    let small = resize_ldr(&ldr, r, r)?;
    let pred = sample(&model, &small, a.steps, a.seed)?;
    let hdr = resize_hdr(&pred, ldr.height(), ldr.width())?;
    let dir = a.output.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut run = RunDir::create(dir)?;
    write_rgbe_file(&hdr, a.output)?;
    run.record(a.output, "hdr");
    let display = a.display.map(Path::to_path_buf).unwrap_or_else(|| a.output.with_extension("png"));
    reinhard_display(&hdr).write_png(&display)?;
    run.record(&display, "display");
    run.finish()?;
    info!("wrote {} and {}", a.output.display(), display.display());
    Ok((a.output.to_path_buf(), display))
}

/// Samples and scores every entry of `manifest`; writes `report.csv` and
/// `report.json` into `run_dir`.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, manifest: &Path, run_dir: &Path) -> Result<MetricReport> {
    let model = load_checkpoint(checkpoint)?.model;
    let mut cfg = cfg.clone();
    cfg.resolution = model.config.resolution;
    let test = select_single_exposure(&DatasetManifest::load(manifest)?, &cfg.exposure_pick)?;
    let mut run = RunDir::create(run_dir)?;
    run.write_text(CONFIG_SNAPSHOT, &cfg.to_text(), "config snapshot")?;
    let report = pipeline::evaluate_model(&model, &test, &cfg)?;
    let (csv, json) = (run.join("report.csv"), run.join("report.json"));
    report.write(&csv, &json)?;
    run.record(&csv, "report");
    run.record(&json, "report");
    run.finish()?;
    Ok(report)
}

pub struct SynthArgs<'a> {
    pub hdr_dir: &'a Path,
    pub out_dir: &'a Path,
    pub exposures: Vec<ExposureParams>,
    pub seed: u64,
    /// Mean radiance maps to this value before the camera curve.
    pub key: f64,
    pub gamma: f64,
    /// Writes this many procedural scenes into `hdr_dir` first.
    pub generate: usize,
    pub resolution: usize,
}

fn is_hdr_file(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("hdr" | "pic" | "rgbe" | "hrf" | "raw")
    )
}

fn mean(h: &HdrImage) -> f64 {
    h.data().iter().sum::<f64>() / h.data().len() as f64
}

/// Simulates a camera capture per HDR file, derives one LDR per exposure
/// setting and writes `manifest.txt` next to them. Tags number the
/// exposures from darkest to brightest.
pub fn cmd_synth_data(a: &SynthArgs<'_>) -> Result<PathBuf> {
    if !(a.key > 0.0) {
        return Err(Error::config("key", "must be positive"));
    }
    std::fs::create_dir_all(a.hdr_dir).map_err(|e| Error::io(a.hdr_dir, e))?;
    for i in 0..a.generate {
        let p = a.hdr_dir.join(format!("scene{i:04}.hdr"));
        write_rgbe_file(&synthetic_scene(mix(a.seed, i as u64), a.resolution, a.resolution), &p)?;
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(a.hdr_dir)
        .map_err(|e| Error::io(a.hdr_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_hdr_file(p))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Data(format!("no HDR files in {}", a.hdr_dir.display())));
    }
    let mut exposures = if a.exposures.is_empty() { vec![ExposureParams::new(1.0, 0.0)?] } else { a.exposures.clone() };
    exposures.sort_by(|x, y| (x.alpha * 127.5 + x.beta).total_cmp(&(y.alpha * 127.5 + y.beta)));
    let ldr_dir = a.out_dir.join("ldr");
    std::fs::create_dir_all(&ldr_dir).map_err(|e| Error::io(&ldr_dir, e))?;
    let mut run = RunDir::create(a.out_dir)?;
    let mut entries = Vec::new();
    for (i, f) in files.iter().enumerate() {
        let h = load_hdr(f)?;
        let m = mean(&h);
        if !(m > 0.0) {
            return Err(Error::Data(format!("{}: image is black", f.display())));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix(a.seed, i as u64));
        let jitter = 2f64.powf(rng.random_range(-0.5..0.5));
        let base = simulate_ldr(&h, a.key * jitter / m, a.gamma)?;
        let stem = f.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| format!("{i}"));
        let hdr_abs = std::path::absolute(f).map_err(|e| Error::io(f, e))?;
        for (k, p) in exposures.iter().enumerate() {
            let ldr = synth_exposure(&base, *p);
            let rel = PathBuf::from("ldr").join(format!("{stem}_e{k}.png"));
            let out = a.out_dir.join(&rel);
            ldr.write_png(&out)?;
            run.record(&out, "ldr");
            let tag = (exposures.len() > 1).then(|| k.to_string());
            entries.push(ManifestEntry { ldr: rel, hdr: hdr_abs.clone(), exposure_tag: tag });
        }
    }
    let manifest = DatasetManifest::new("manifest", a.out_dir, entries)?;
    let path = a.out_dir.join("manifest.txt");
    manifest.save(&path)?;
    run.record(&path, "manifest");
    run.finish()?;
    Ok(path)
}
