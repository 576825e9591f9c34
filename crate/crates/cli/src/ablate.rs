//! Component ladder and loss ablation on one split and seed.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use hdrlift_core::diffusion::LatentDiffusion;
use hdrlift_core::encoders::AblationFlags;
use hdrlift_core::metrics::MetricReport;
use hdrlift_core::Result;
use log::{info, warn};
use serde::Serialize;

use crate::commands::record_inputs;
use crate::config::{Preset, RunConfig};
use crate::pipeline::{self, Datasets, Start};
use crate::run::RunDir;

pub const LOSS_ROWS: [(&str, f64); 2] = [("L_d", 0.0), ("L_d + L_mat", 0.2)];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    /// `components` or `loss`.
    pub group: String,
    pub label: String,
    pub lambda_mat: f64,
    pub psnr_db: Option<f64>,
    pub ssim: Option<f64>,
    pub perceptual: Option<f64>,
    pub vdp_q: Option<f64>,
    pub steps: u64,
    pub dir: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

struct Job {
    group: &'static str,
    label: String,
    slug: String,
    cfg: RunConfig,
}

fn slug(label: &str) -> String {
    let s: String = label
        .chars()
        .map(|c| match c {
            'a'..='z' | 'A'..='Z' | '0'..='9' => c.to_ascii_lowercase(),
            '+' => 'p',
            '⊕' => 'x',
            _ => '_',
        })
        .collect();
    s.trim_matches('_').to_string()
}

fn jobs(base: &RunConfig) -> Vec<Job> {
    let mut out = Vec::new();
    for (label, flags) in AblationFlags::ladder() {
        let mut cfg = base.clone();
        cfg.flags = flags;
        cfg.custom_flags = false;
        out.push(Job { group: "components", label: label.into(), slug: format!("c{}_{}", out.len(), slug(label)), cfg });
    }
    for (label, lambda) in LOSS_ROWS {
        let mut cfg = base.clone();
        cfg.flags = AblationFlags::FULL;
        cfg.custom_flags = false;
        cfg.lambda_mat = lambda;
        out.push(Job { group: "loss", label: label.into(), slug: format!("l{}_{}", out.len() - 6, slug(label)), cfg });
    }
    out
}

struct Outcome {
    report: MetricReport,
    steps: u64,
}

fn run_job(job: &Job, data: &Datasets, shared: &LatentDiffusion, dir: &Path) -> Result<Outcome> {
    let mut run = RunDir::create(dir)?;
    record_inputs(&mut run, &job.cfg, data)?;
    let out = pipeline::train(&job.cfg, data, &mut run, Start::SharedAutoencoder(shared))?;
    let report = pipeline::evaluate_model(&out.trainer.model, &data.test, &job.cfg)?;
    let (csv, json) = (run.join("report.csv"), run.join("report.json"));
    report.write(&csv, &json)?;
    run.record(&csv, "report");
    run.record(&json, "report");
    run.finish()?;
    Ok(Outcome { report, steps: out.trainer.state.step })
}

fn row(job: &Job, dir: &Path, res: &Result<Outcome>) -> AblationRow {
    let mean = |s: f64| s.is_finite().then_some(s);
    let mut r = AblationRow {
        group: job.group.into(),
        label: job.label.clone(),
        lambda_mat: job.cfg.lambda_mat,
        psnr_db: None,
        ssim: None,
        perceptual: None,
        vdp_q: None,
        steps: 0,
        dir: dir.display().to_string(),
        error: None,
    };
    match res {
        Ok(o) => {
            let a = &o.report.aggregates;
            r.psnr_db = mean(a.psnr_db.mean);
            r.ssim = mean(a.ssim.mean);
            r.perceptual = mean(a.perceptual.mean);
            r.vdp_q = mean(a.vdp_q.mean);
            r.steps = o.steps;
        }
        Err(e) => r.error = Some(e.to_string()),
    }
    r
}

/// Trains and scores the six ladder rows and the two loss rows. The
/// autoencoder is pretrained once and shared; a row whose configuration
/// matches an earlier row reuses that row's result. Failing rows are
/// recorded and the rest continue.
pub fn cmd_ablate(base: &RunConfig, out_dir: &Path) -> Result<AblationTable> {
    if base.preset == Preset::Full {
        warn!("ablation on the full preset trains eight models at full scale");
    }
    let data = pipeline::prepare_data(base)?;
    let mut run = RunDir::create(out_dir)?;
    record_inputs(&mut run, base, &data)?;
    let mut shared = LatentDiffusion::new(base.model_config()?, base.seed)?;
    let (pairs, _) = pipeline::load_pairs(&data.train, base, 0, false)?;
    pipeline::pretrain_with(&mut shared, &pairs, base)?;

    let jobs = jobs(base);
    let dirs: Vec<PathBuf> = jobs.iter().map(|j| out_dir.join("rows").join(&j.slug)).collect();
    let firsts: Vec<usize> = jobs.iter().map(|j| jobs.iter().position(|k| k.cfg == j.cfg).expect("self")).collect();
    let unique: Vec<usize> = (0..jobs.len()).filter(|&i| firsts[i] == i).collect();
    let mut results: Vec<Option<Result<Outcome>>> = (0..jobs.len()).map(|_| None).collect();
    let exec = |i: usize| {
        info!("ablation row {}", jobs[i].label);
        run_job(&jobs[i], &data, &shared, &dirs[i])
    };
    if base.concurrent_rows {
        let done: Vec<(usize, Result<Outcome>)> = std::thread::scope(|s| {
            let handles: Vec<_> = unique.iter().map(|&i| (i, s.spawn(move || exec(i)))).collect();
            handles.into_iter().map(|(i, h)| (i, h.join().expect("ablation row panicked"))).collect()
        });
        for (i, r) in done {
            results[i] = Some(r);
        }
    } else {
        for &i in &unique {
            results[i] = Some(exec(i));
        }
    }

    let rows: Vec<AblationRow> = (0..jobs.len())
        .map(|i| {
            let r = row(&jobs[i], &dirs[firsts[i]], results[firsts[i]].as_ref().expect("row ran"));
            if let Some(e) = &r.error {
                warn!("ablation row {} failed: {e}", r.label);
            }
            r
        })
        .collect();
    let table = AblationTable { rows };
    run.write_text("ablation.csv", &table.to_csv(), "ablation table")?;
    run.write_text("ablation.json", &(serde_json::to_string_pretty(&table).expect("table") + "\n"), "ablation table")?;
    run.write_text("ablation.md", &table.to_markdown(), "ablation table")?;
    for d in &dirs {
        run.record(&d.join("artifacts.json"), "row artifacts");
    }
    run.finish()?;
    Ok(table)
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_default()
}

impl AblationTable {
    pub fn group(&self, g: &str) -> impl Iterator<Item = &AblationRow> {
        let g = g.to_string();
        self.rows.iter().filter(move |r| r.group == g)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("group,label,lambda_mat,psnr_db,ssim,perceptual,vdp_q,steps,error\n");
        for r in &self.rows {
            let err = r.error.as_deref().unwrap_or("").replace(['"', '\n'], " ");
            let _ = writeln!(
                s,
                "{},\"{}\",{},{},{},{},{},{},\"{}\"",
                r.group,
                r.label,
                r.lambda_mat,
                cell(r.psnr_db),
                cell(r.ssim),
                cell(r.perceptual),
                cell(r.vdp_q),
                r.steps,
                err
            );
        }
        s
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        for (g, title) in [("components", "Components"), ("loss", "Loss")] {
            let _ = writeln!(s, "### {title}\n\n| | PSNR | SSIM | perceptual | VDP Q |\n|---|---|---|---|---|");
            for r in self.group(g) {
                match &r.error {
                    Some(e) => {
                        let _ = writeln!(s, "| {} | failed: {} | | | |", r.label, e.replace('|', "/"));
                    }
                    None => {
                        let _ = writeln!(
                            s,
                            "| {} | {} | {} | {} | {} |",
                            r.label,
                            cell(r.psnr_db),
                            cell(r.ssim),
                            cell(r.perceptual),
                            cell(r.vdp_q)
                        );
                    }
                }
            }
            s.push('\n');
        }
        s
    }
}
