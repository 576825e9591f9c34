//! Image quality metrics and report aggregation.

use std::path::Path;
use std::process::Command;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hdr::{mu_law, write_rgbe_file, HdrImage, ToneCurve};

pub const PSNR_CAP_DB: f64 = 100.0;
const LUMA: [f64; 3] = [0.2126, 0.7152, 0.0722];

fn check_dims(gt: &HdrImage, pred: &HdrImage) -> Result<()> {
    if !gt.same_dims(pred) {
        return Err(Error::Shape(format!(
            "metric inputs differ: {}x{} vs {}x{}",
            gt.height(),
            gt.width(),
            pred.height(),
            pred.width()
        )));
    }
    Ok(())
}

fn gt_scale(gt: &HdrImage) -> f64 {
    let m = gt.max_value();
    if m > 0.0 {
        m
    } else {
        1.0
    }
}

/// PSNR between mu-law curves of both images, each divided by the ground
/// truth maximum (prediction clipped at 1). Capped at 100 dB.
pub fn psnr_mu(gt: &HdrImage, pred: &HdrImage, curve: &ToneCurve) -> Result<f64> {
    check_dims(gt, pred)?;
    let s = gt_scale(gt);
    let mse = gt
        .data()
        .iter()
        .zip(pred.data())
        .map(|(&g, &p)| {
            let d = mu_law((g / s).min(1.0), curve.mu) - mu_law((p / s).min(1.0), curve.mu);
            d * d
        })
        .sum::<f64>()
        / gt.data().len() as f64;
    Ok(psnr_from_mse(mse))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP_DB
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
    }
}

fn luminance(img: &HdrImage) -> Vec<f64> {
    img.data().chunks(3).map(|p| LUMA[0] * p[0] + LUMA[1] * p[1] + LUMA[2] * p[2]).collect()
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let w: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode filtering.
fn filter_valid(x: &[f64], h: usize, w: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x0 in 0..ow {
            rows[y * ow + x0] = (0..n).map(|i| k[i] * x[y * w + x0 + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y0 in 0..oh {
        for x0 in 0..ow {
            out[y0 * ow + x0] = (0..n).map(|i| k[i] * rows[(y0 + i) * ow + x0]).sum();
        }
    }
    (out, oh, ow)
}

/// Single-scale SSIM on luminance of linear radiance with an 11x11 Gaussian
/// window (sigma 1.5) and dynamic range set to the ground-truth maximum.
/// Images smaller than the window use the largest odd window that fits.
pub fn ssim_linear(gt: &HdrImage, pred: &HdrImage) -> Result<f64> {
    check_dims(gt, pred)?;
    let (h, w) = (gt.height(), gt.width());
    let mut size = 11.min(h).min(w);
    if size % 2 == 0 {
        size -= 1;
    }
    let k = gaussian_window(size, 1.5);
    let range = gt_scale(gt);
    let c1 = (0.01 * range).powi(2);
    let c2 = (0.03 * range).powi(2);
    let a = luminance(gt);
    let b = luminance(pred);
    let prod = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(x, y)| x * y).collect::<Vec<_>>();
    let (mu_a, _, _) = filter_valid(&a, h, w, &k);
    let (mu_b, _, _) = filter_valid(&b, h, w, &k);
    let (aa, _, _) = filter_valid(&prod(&a, &a), h, w, &k);
    let (bb, _, _) = filter_valid(&prod(&b, &b), h, w, &k);
    let (ab, _, _) = filter_valid(&prod(&a, &b), h, w, &k);
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok((total / n as f64).clamp(-1.0, 1.0))
}

fn pool2(x: &[f64], c: usize, h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            for x0 in 0..ow {
                let at = |yy: usize, xx: usize| x[ch * h * w + yy * w + xx];
                out[ch * oh * ow + y * ow + x0] =
                    0.25 * (at(2 * y, 2 * x0) + at(2 * y + 1, 2 * x0) + at(2 * y, 2 * x0 + 1) + at(2 * y + 1, 2 * x0 + 1));
            }
        }
    }
    (out, oh, ow)
}

fn unit_features(x: &[f64], h: usize, w: usize) -> Vec<[f64; 9]> {
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x0 in 0..w {
            let mut f = [0.0; 9];
            for c in 0..3 {
                let at = |yy: usize, xx: usize| x[c * h * w + yy * w + xx];
                let v = at(y, x0);
                f[3 * c] = v;
                f[3 * c + 1] = if x0 + 1 < w { at(y, x0 + 1) - v } else { 0.0 };
                f[3 * c + 2] = if y + 1 < h { at(y + 1, x0) - v } else { 0.0 };
            }
            let norm = f.iter().map(|v| v * v).sum::<f64>().sqrt() + 1e-10;
            out.push(f.map(|v| v / norm));
        }
    }
    out
}

/// Multi-scale distance between unit-normalised log intensity and gradient
/// features. Zero for identical inputs and symmetric.
pub fn toy_perceptual(gt: &HdrImage, pred: &HdrImage) -> Result<f64> {
    check_dims(gt, pred)?;
    let planar = |img: &HdrImage| img.to_tensor().into_data().into_iter().map(f64::ln_1p).collect::<Vec<_>>();
    let (mut a, mut b) = (planar(gt), planar(pred));
    let (mut h, mut w) = (gt.height(), gt.width());
    let mut total = 0.0;
    let mut scales = 0;
    for _ in 0..4 {
        let fa = unit_features(&a, h, w);
        let fb = unit_features(&b, h, w);
        let d: f64 = fa.iter().zip(&fb).map(|(p, q)| p.iter().zip(q).map(|(u, v)| (u - v) * (u - v)).sum::<f64>()).sum();
        total += d / fa.len() as f64;
        scales += 1;
        if h < 2 || w < 2 {
            break;
        }
        (a, _, _) = pool2(&a, 3, h, w);
        let (nb, nh, nw) = pool2(&b, 3, h, w);
        b = nb;
        h = nh;
        w = nw;
    }
    Ok(total / scales as f64)
}

/// Built-in quality surrogate, not a visual difference predictor:
/// `10 - min(10, log10(1 + 1e6 * mse))` on ground-truth-normalised radiance.
pub fn vdp_stub(gt: &HdrImage, pred: &HdrImage) -> Result<f64> {
    check_dims(gt, pred)?;
    let s = gt_scale(gt);
    let mse = gt.data().iter().zip(pred.data()).map(|(&g, &p)| ((g - p) / s).powi(2)).sum::<f64>() / gt.data().len() as f64;
    Ok(10.0 - (1.0 + 1e6 * mse).log10().min(10.0))
}

/// Runs `<program> [args..] <gt.hdr> <pred.hdr>` and parses the first token
/// of standard output.
pub fn run_external_scorer(command: &str, id: &str, gt: &HdrImage, pred: &HdrImage) -> Result<f64> {
    let eval_err = |message: String| Error::Evaluation { id: id.to_string(), message };
    let mut parts = command.split_whitespace();
    let program = parts.next().ok_or_else(|| eval_err("empty scorer command".into()))?;
    let dir = tempfile::tempdir().map_err(|e| eval_err(e.to_string()))?;
    let gp = dir.path().join("gt.hdr");
    let pp = dir.path().join("pred.hdr");
    write_rgbe_file(gt, &gp)?;
    write_rgbe_file(pred, &pp)?;
    let out = Command::new(program)
        .args(parts)
        .arg(&gp)
        .arg(&pp)
        .output()
        .map_err(|e| eval_err(format!("cannot run `{program}`: {e}")))?;
    if !out.status.success() {
        return Err(eval_err(format!("`{command}` exited with {}", out.status)));
    }
    let text = String::from_utf8_lossy(&out.stdout);
    let tok = text.split_whitespace().next().ok_or_else(|| eval_err(format!("`{command}` printed nothing")))?;
    tok.parse::<f64>().map_err(|_| eval_err(format!("`{command}` printed `{tok}`, not a number")))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PerceptualProvider {
    Toy,
    Exec(String),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum VdpProvider {
    Stub,
    Exec(String),
}

fn parse_exec(key: &str, value: &str) -> Result<Option<String>> {
    match value.strip_prefix("exec:") {
        Some(cmd) if !cmd.trim().is_empty() => Ok(Some(cmd.trim().to_string())),
        Some(_) => Err(Error::config(key, "exec adapter needs a command")),
        None => Ok(None),
    }
}

impl PerceptualProvider {
    pub fn from_config(value: &str) -> Result<Self> {
        if value == "toy" {
            return Ok(Self::Toy);
        }
        parse_exec("metrics.perceptual", value)?
            .map(Self::Exec)
            .ok_or_else(|| Error::config("metrics.perceptual", format!("expected `toy` or `exec:<command>`, got `{value}`")))
    }
}

impl VdpProvider {
    pub fn from_config(value: &str) -> Result<Self> {
        if value == "stub" {
            return Ok(Self::Stub);
        }
        parse_exec("metrics.vdp", value)?
            .map(Self::Exec)
            .ok_or_else(|| Error::config("metrics.vdp", format!("expected `stub` or `exec:<command>`, got `{value}`")))
    }

    pub fn label(&self) -> &'static str {
        match self {
            Self::Stub => "surrogate (not HDR-VDP)",
            Self::Exec(_) => "external",
        }
    }
}

#[derive(Clone, Debug)]
pub struct MetricConfig {
    pub curve: ToneCurve,
    pub perceptual: PerceptualProvider,
    pub vdp: VdpProvider,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self { curve: ToneCurve::default(), perceptual: PerceptualProvider::Toy, vdp: VdpProvider::Stub }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub id: String,
    pub psnr_db: Option<f64>,
    pub ssim: Option<f64>,
    pub perceptual: Option<f64>,
    pub vdp_q: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    /// Mean and population standard deviation.
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self { mean: f64::NAN, std: f64::NAN };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub psnr_db: Stat,
    pub ssim: Stat,
    pub perceptual: Stat,
    pub vdp_q: Stat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
    pub aggregates: Aggregates,
    pub evaluated: usize,
    pub failed: usize,
    pub vdp_source: String,
}

impl MetricReport {
    pub fn from_rows(mut rows: Vec<MetricRow>, vdp_source: &str) -> Self {
        rows.sort_by(|a, b| a.id.cmp(&b.id));
        let ok: Vec<&MetricRow> = rows.iter().filter(|r| r.error.is_none()).collect();
        let col = |f: fn(&MetricRow) -> Option<f64>| Stat::of(&ok.iter().filter_map(|r| f(r)).collect::<Vec<_>>());
        let aggregates = Aggregates {
            psnr_db: col(|r| r.psnr_db),
            ssim: col(|r| r.ssim),
            perceptual: col(|r| r.perceptual),
            vdp_q: col(|r| r.vdp_q),
        };
        let evaluated = ok.len();
        let failed = rows.len() - evaluated;
        Self { rows, aggregates, evaluated, failed, vdp_source: vdp_source.to_string() }
    }

    pub fn to_csv(&self) -> String {
        let cell = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        let mut s = String::from("id,psnr_db,ssim,perceptual,vdp_q\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                r.id,
                cell(r.psnr_db),
                cell(r.ssim),
                cell(r.perceptual),
                cell(r.vdp_q)
            ));
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    pub fn write(&self, csv_path: &Path, json_path: &Path) -> Result<()> {
        std::fs::write(csv_path, self.to_csv()).map_err(|e| Error::io(csv_path, e))?;
        std::fs::write(json_path, self.to_json()).map_err(|e| Error::io(json_path, e))
    }
}

/// One evaluation input: identifier, ground truth, reconstruction.
pub struct EvalPair {
    pub id: String,
    pub gt: HdrImage,
    pub pred: HdrImage,
}

fn evaluate_one(p: &EvalPair, cfg: &MetricConfig) -> MetricRow {
    let run = || -> Result<[f64; 4]> {
        let psnr = psnr_mu(&p.gt, &p.pred, &cfg.curve)?;
        let ssim = ssim_linear(&p.gt, &p.pred)?;
        let perc = match &cfg.perceptual {
            PerceptualProvider::Toy => toy_perceptual(&p.gt, &p.pred)?,
            PerceptualProvider::Exec(cmd) => run_external_scorer(cmd, &p.id, &p.gt, &p.pred)?,
        };
        let vdp = match &cfg.vdp {
            VdpProvider::Stub => vdp_stub(&p.gt, &p.pred)?,
            VdpProvider::Exec(cmd) => run_external_scorer(cmd, &p.id, &p.gt, &p.pred)?,
        };
        Ok([psnr, ssim, perc, vdp])
    };
    match run() {
        Ok([psnr, ssim, perc, vdp]) => MetricRow {
            id: p.id.clone(),
            psnr_db: Some(psnr),
            ssim: Some(ssim),
            perceptual: Some(perc),
            vdp_q: Some(vdp),
            error: None,
        },
        Err(e) => MetricRow { id: p.id.clone(), psnr_db: None, ssim: None, perceptual: None, vdp_q: None, error: Some(e.to_string()) },
    }
}

/// Scores every pair on up to `threads` threads. Row order is by id
/// whatever the completion order.
pub fn evaluate(pairs: &[EvalPair], cfg: &MetricConfig, threads: usize) -> Result<MetricReport> {
    if pairs.is_empty() {
        return Err(Error::Data("evaluation needs at least one pair".into()));
    }
    let threads = threads.clamp(1, pairs.len());
    let chunk = pairs.len().div_ceil(threads);
    let rows: Vec<MetricRow> = std::thread::scope(|s| {
        let handles: Vec<_> = pairs
            .chunks(chunk)
            .map(|c| s.spawn(move || c.iter().map(|p| evaluate_one(p, cfg)).collect::<Vec<_>>()))
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("metric worker panicked")).collect()
    });
    let report = MetricReport::from_rows(rows, cfg.vdp.label());
    if report.failed > 0 {
        log::warn!("{} of {} pairs failed evaluation", report.failed, pairs.len());
    }
    Ok(report)
}
