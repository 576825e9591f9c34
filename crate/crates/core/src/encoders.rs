//! Illumination and depth features from the LDR input, their fusion, and
//! the token sequence that conditions the denoiser.

use std::path::Path;
use std::process::Command;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::resize_planes;
use crate::error::{Error, Result};
use crate::hdr::LdrImage;
use crate::nn::{Conv2d, Linear, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

const LUMA: [f64; 3] = [0.2126, 0.7152, 0.0722];
const LOG_EPS: f64 = 1e-4;
const HIGHLIGHT_LEVEL: u8 = 250;

fn luminance(l: &LdrImage) -> Vec<f64> {
    l.data()
        .chunks(3)
        .map(|p| (LUMA[0] * f64::from(p[0]) + LUMA[1] * f64::from(p[1]) + LUMA[2] * f64::from(p[2])) / 255.0)
        .collect()
}

fn cell_bounds(n: usize, cells: usize, i: usize) -> (usize, usize) {
    (i * n / cells, (i + 1) * n / cells)
}

fn check_grid(l: &LdrImage, gh: usize, gw: usize) -> Result<()> {
    if gh == 0 || gw == 0 || gh > l.height() || gw > l.width() {
        return Err(Error::Shape(format!(
            "feature grid {gh}x{gw} does not fit a {}x{} image",
            l.height(),
            l.width()
        )));
    }
    Ok(())
}

/// Toy illumination features, `[1, 3, gh, gw]`: per cell the mean of
/// normalised log-luminance, the variance of log-luminance, and the fraction
/// of pixels whose brightest channel reaches 250.
pub fn encode_illumination(l: &LdrImage, gh: usize, gw: usize) -> Result<Tensor> {
    check_grid(l, gh, gw)?;
    let (h, w) = (l.height(), l.width());
    let y = luminance(l);
    let lo = LOG_EPS.ln();
    let hi = (1.0 + LOG_EPS).ln();
    let logy: Vec<f64> = y.iter().map(|v| (v + LOG_EPS).ln()).collect();
    let mut out = vec![0.0; 3 * gh * gw];
    for cy in 0..gh {
        let (y0, y1) = cell_bounds(h, gh, cy);
        for cx in 0..gw {
            let (x0, x1) = cell_bounds(w, gw, cx);
            let n = ((y1 - y0) * (x1 - x0)) as f64;
            let mut sum = 0.0;
            let mut sum_sq = 0.0;
            let mut bright = 0usize;
            for yy in y0..y1 {
                for xx in x0..x1 {
                    let v = logy[yy * w + xx];
                    sum += v;
                    sum_sq += v * v;
                    if l.pixel(yy, xx).iter().any(|&c| c >= HIGHLIGHT_LEVEL) {
                        bright += 1;
                    }
                }
            }
            let mean = sum / n;
            let var = (sum_sq / n - mean * mean).max(0.0);
            let at = cy * gw + cx;
            out[at] = (mean - lo) / (hi - lo);
            out[gh * gw + at] = var;
            out[2 * gh * gw + at] = bright as f64 / n;
        }
    }
    Ok(Tensor::new(vec![1, 3, gh, gw], out))
}

fn box_blur3(x: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for xx in 0..w {
            let mut s = 0.0;
            let mut n = 0.0;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (yy, xq) = (y as i64 + dy, xx as i64 + dx);
                    if yy >= 0 && yy < h as i64 && xq >= 0 && xq < w as i64 {
                        s += x[yy as usize * w + xq as usize];
                        n += 1.0;
                    }
                }
            }
            out[y * w + xx] = s / n;
        }
    }
    out
}

fn min_max(mut v: Vec<f64>) -> Vec<f64> {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo <= 1e-12 {
        v.iter_mut().for_each(|x| *x = 0.0);
    } else {
        v.iter_mut().for_each(|x| *x = ((*x - lo) / (hi - lo)).clamp(0.0, 1.0));
    }
    v
}

/// Toy pseudo-depth, `[1, 1, gh, gw]`: blurred inverse luminance averaged
/// per cell and min-max normalised. A stand-in, not a depth estimate.
pub fn encode_depth(l: &LdrImage, gh: usize, gw: usize) -> Result<Tensor> {
    check_grid(l, gh, gw)?;
    let (h, w) = (l.height(), l.width());
    let inv: Vec<f64> = luminance(l).into_iter().map(|v| 1.0 - v).collect();
    let blurred = box_blur3(&inv, h, w);
    let mut cells = vec![0.0; gh * gw];
    for cy in 0..gh {
        let (y0, y1) = cell_bounds(h, gh, cy);
        for cx in 0..gw {
            let (x0, x1) = cell_bounds(w, gw, cx);
            let n = ((y1 - y0) * (x1 - x0)) as f64;
            cells[cy * gw + cx] = (y0..y1).flat_map(|yy| (x0..x1).map(move |xx| (yy, xx))).map(|(yy, xx)| blurred[yy * w + xx]).sum::<f64>() / n;
        }
    }
    Ok(Tensor::new(vec![1, 1, gh, gw], min_max(cells)))
}

/// The LDR input in `[0, 1]`, bilinearly resampled to `[1, 3, gh, gw]`.
pub fn ldr_thumbnail(l: &LdrImage, gh: usize, gw: usize) -> Result<Tensor> {
    let t = l.to_unit_tensor();
    let data = resize_planes(t.data(), 3, l.height(), l.width(), gh, gw)?;
    Ok(Tensor::new(vec![1, 3, gh, gw], data))
}

/// Where a feature map comes from: the built-in toy encoder or an external
/// program. The program receives `<ldr.png> <grid_h> <grid_w>` and prints
/// the channel count followed by `channels * grid_h * grid_w` values.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureProvider {
    Toy,
    Exec(String),
}

fn program_exists(program: &str) -> bool {
    let p = Path::new(program);
    if p.components().count() > 1 {
        return p.is_file();
    }
    std::env::var_os("PATH").is_some_and(|paths| std::env::split_paths(&paths).any(|d| d.join(program).is_file()))
}

impl FeatureProvider {
    pub fn from_config(key: &str, value: &str) -> Result<Self> {
        if value == "toy" {
            return Ok(Self::Toy);
        }
        let Some(cmd) = value.strip_prefix("exec:").map(str::trim) else {
            return Err(Error::config(key, format!("expected `toy` or `exec:<command>`, got `{value}`")));
        };
        let program = cmd.split_whitespace().next().ok_or_else(|| Error::config(key, "exec adapter needs a command"))?;
        if !program_exists(program) {
            return Err(Error::config(key, format!("adapter program `{program}` not found")));
        }
        Ok(Self::Exec(cmd.to_string()))
    }

    fn run_exec(cmd: &str, l: &LdrImage, gh: usize, gw: usize) -> Result<Tensor> {
        let dir = tempfile::tempdir().map_err(|e| Error::Adapter(e.to_string()))?;
        let path = dir.path().join("ldr.png");
        l.write_png(&path)?;
        let mut parts = cmd.split_whitespace();
        let program = parts.next().unwrap_or_default();
        let out = Command::new(program)
            .args(parts)
            .arg(&path)
            .arg(gh.to_string())
            .arg(gw.to_string())
            .output()
            .map_err(|e| Error::Adapter(format!("cannot run `{cmd}`: {e}")))?;
        if !out.status.success() {
            return Err(Error::Adapter(format!("`{cmd}` exited with {}", out.status)));
        }
        let text = String::from_utf8_lossy(&out.stdout);
        let nums: Vec<f64> = text
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| Error::Adapter(format!("`{cmd}` printed `{t}`"))))
            .collect::<Result<_>>()?;
        let c = nums.first().copied().unwrap_or(0.0) as usize;
        if c == 0 || nums.len() != 1 + c * gh * gw || nums.iter().any(|v| !v.is_finite()) {
            return Err(Error::Adapter(format!("`{cmd}` returned {} values for a {gh}x{gw} grid", nums.len())));
        }
        Ok(Tensor::new(vec![1, c, gh, gw], nums[1..].to_vec()))
    }

    fn illumination(&self, l: &LdrImage, gh: usize, gw: usize) -> Result<Tensor> {
        match self {
            Self::Toy => encode_illumination(l, gh, gw),
            Self::Exec(cmd) => Self::run_exec(cmd, l, gh, gw),
        }
    }

    fn depth(&self, l: &LdrImage, gh: usize, gw: usize) -> Result<Tensor> {
        match self {
            Self::Toy => encode_depth(l, gh, gw),
            Self::Exec(cmd) => {
                let t = Self::run_exec(cmd, l, gh, gw)?;
                Ok(Tensor::new(t.shape().to_vec(), min_max(t.into_data())))
            }
        }
    }
}

/// Which condition branches feed the denoiser.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    pub clip: bool,
    pub depth: bool,
    pub illum: bool,
    pub fusion: bool,
    pub emb: bool,
}

impl AblationFlags {
    pub const FULL: Self = Self { clip: false, depth: true, illum: true, fusion: true, emb: true };

    /// The six-row ladder, components added one at a time.
    pub fn ladder() -> [(&'static str, Self); 6] {
        let f = |clip, depth, illum, fusion, emb| Self { clip, depth, illum, fusion, emb };
        [
            ("baseline", f(false, false, false, false, false)),
            ("+CLIP", f(true, false, false, false, false)),
            ("+l_dep", f(true, true, false, false, false)),
            ("+l_ill", f(true, false, true, false, false)),
            ("+l_dep⊕l_ill", f(true, true, true, true, false)),
            ("+l_emb", Self::FULL),
        ]
    }

    pub fn ladder_label(&self) -> Option<&'static str> {
        Self::ladder().into_iter().find(|(_, f)| f == self).map(|(l, _)| l)
    }

    pub fn validate(&self) -> Result<()> {
        if self.fusion && !(self.depth && self.illum) {
            return Err(Error::config("ablation.fusion", "fusion needs both depth and illumination"));
        }
        if self.emb && !self.fusion {
            return Err(Error::config("ablation.emb", "the embedding consumes the fused map; enable fusion"));
        }
        Ok(())
    }
}

/// Provider choice per condition branch. The embedding is learned inside
/// the model, so only `toy` is accepted for it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderRegistry {
    pub illumination: FeatureProvider,
    pub depth: FeatureProvider,
}

impl Default for EncoderRegistry {
    fn default() -> Self {
        Self { illumination: FeatureProvider::Toy, depth: FeatureProvider::Toy }
    }
}

impl EncoderRegistry {
    pub fn from_config(illumination: &str, depth: &str, embedding: &str) -> Result<Self> {
        if embedding != "toy" {
            return Err(Error::config(
                "encoders.embedding",
                format!("`{embedding}` is not available; the embedding must stay differentiable and only `toy` is built in"),
            ));
        }
        Ok(Self {
            illumination: FeatureProvider::from_config("encoders.illumination", illumination)?,
            depth: FeatureProvider::from_config("encoders.depth", depth)?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditionConfig {
    pub grid_h: usize,
    pub grid_w: usize,
    pub k: usize,
    pub d_embed: usize,
    pub patch: usize,
    pub flags: AblationFlags,
}

/// Fixed (non-learned) features for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionInputs {
    pub batch: usize,
    pub illumination: Option<Tensor>,
    pub depth: Option<Tensor>,
    pub thumbnail: Option<Tensor>,
}

impl EncoderRegistry {
    /// Runs the feature extractors the flags ask for over a batch.
    pub fn extract(&self, ldrs: &[LdrImage], cfg: &ConditionConfig) -> Result<ConditionInputs> {
        let (gh, gw) = (cfg.grid_h, cfg.grid_w);
        let stack = |f: &dyn Fn(&LdrImage) -> Result<Tensor>| -> Result<Tensor> {
            let parts = ldrs.iter().map(f).collect::<Result<Vec<_>>>()?;
            let c = parts[0].dim(1);
            if parts.iter().any(|p| p.dim(1) != c) {
                return Err(Error::Adapter("feature channel count changed between images".into()));
            }
            Ok(Tensor::cat_batch(&parts))
        };
        let f = cfg.flags;
        Ok(ConditionInputs {
            batch: ldrs.len(),
            illumination: if f.illum { Some(stack(&|l| self.illumination.illumination(l, gh, gw))?) } else { None },
            depth: if f.depth { Some(stack(&|l| self.depth.depth(l, gh, gw))?) } else { None },
            thumbnail: if f.clip { Some(stack(&|l| ldr_thumbnail(l, gh, gw))?) } else { None },
        })
    }
}

impl ConditionInputs {
    /// Concatenates per-image (or per-batch) inputs along the batch axis.
    pub fn stack(parts: &[ConditionInputs]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::Data("no condition inputs to stack".into()))?;
        let cat = |get: &dyn Fn(&ConditionInputs) -> &Option<Tensor>| -> Result<Option<Tensor>> {
            if get(first).is_none() {
                if parts.iter().any(|p| get(p).is_some()) {
                    return Err(Error::Shape("condition branches differ between stacked inputs".into()));
                }
                return Ok(None);
            }
            let ts = parts
                .iter()
                .map(|p| get(p).clone().ok_or_else(|| Error::Shape("condition branches differ between stacked inputs".into())))
                .collect::<Result<Vec<_>>>()?;
            if ts.iter().any(|t| t.shape()[1..] != ts[0].shape()[1..]) {
                return Err(Error::Shape("condition feature shapes differ".into()));
            }
            Ok(Some(Tensor::cat_batch(&ts)))
        };
        Ok(Self {
            batch: parts.iter().map(|p| p.batch).sum(),
            illumination: cat(&|p| &p.illumination)?,
            depth: cat(&|p| &p.depth)?,
            thumbnail: cat(&|p| &p.thumbnail)?,
        })
    }

    pub fn narrow(&self, start: usize, len: usize) -> Self {
        let n = |t: &Option<Tensor>| t.as_ref().map(|t| t.narrow_batch(start, len));
        Self { batch: len, illumination: n(&self.illumination), depth: n(&self.depth), thumbnail: n(&self.thumbnail) }
    }
}

/// Splits `[n, c, h, w]` into non-overlapping `p x p` patches,
/// `[n, (h/p)(w/p), c p p]`.
pub fn patchify(tape: &mut Tape, x: Var, p: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 4 || s[2] % p != 0 || s[3] % p != 0 {
        return Err(Error::Shape(format!("cannot cut {s:?} into {p}x{p} patches")));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let r = tape.reshape(x, &[n, c, h / p, p, w / p, p]);
    let t = tape.permute(r, &[0, 2, 4, 1, 3, 5]);
    Ok(tape.reshape(t, &[n, (h / p) * (w / p), c * p * p]))
}

fn mean_pool_token(tape: &mut Tape, x: Var) -> Var {
    let s = tape.shape(x).to_vec();
    let pooled = tape.reduce_to(x, &[s[0], s[1], 1, 1]);
    let pooled = tape.scale(pooled, 1.0 / (s[2] * s[3]) as f64);
    tape.reshape(pooled, &[s[0], 1, s[1]])
}

/// Learned half of the conditioning path: 1x1 projections, fusion, and the
/// token embedding. Parameters live under `cond.`.
#[derive(Clone, Debug)]
pub struct ConditionEncoder {
    pub cfg: ConditionConfig,
    proj_ill: Option<Conv2d>,
    proj_dep: Option<Conv2d>,
    clip: Option<Linear>,
    pool: Option<Linear>,
    embed: Option<Linear>,
}

impl ConditionEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: ConditionConfig, ill_channels: usize, rng: &mut R) -> Result<Self> {
        let f = cfg.flags;
        f.validate()?;
        if cfg.grid_h % cfg.patch != 0 || cfg.grid_w % cfg.patch != 0 {
            return Err(Error::config("model.patch", format!("patch {} does not tile the {}x{} grid", cfg.patch, cfg.grid_h, cfg.grid_w)));
        }
        let proj_ill = f.illum.then(|| Conv2d::pointwise(store, "cond.proj_ill", ill_channels, cfg.k, rng));
        let proj_dep = f.depth.then(|| Conv2d::pointwise(store, "cond.proj_dep", 1, cfg.k, rng));
        let clip = f.clip.then(|| Linear::new(store, "cond.clip", 3 * cfg.patch * cfg.patch, cfg.d_embed, true, rng));
        let pooled_in = match (f.emb, f.fusion, f.depth, f.illum) {
            (true, ..) => 0,
            (false, true, ..) => 2 * cfg.k,
            (false, false, true, true) => 2 * cfg.k,
            (false, false, true, false) | (false, false, false, true) => cfg.k,
            _ => 0,
        };
        let pool = (pooled_in > 0).then(|| Linear::new(store, "cond.pool", pooled_in, cfg.d_embed, true, rng));
        let embed = f.emb.then(|| Linear::new(store, "cond.embed", 2 * cfg.k * cfg.patch * cfg.patch, cfg.d_embed, true, rng));
        Ok(Self { cfg, proj_ill, proj_dep, clip, pool, embed })
    }

    /// Number of tokens produced per image.
    pub fn n_tokens(&self) -> usize {
        let patches = (self.cfg.grid_h / self.cfg.patch) * (self.cfg.grid_w / self.cfg.patch);
        let mut n = 0;
        if self.clip.is_some() {
            n += patches;
        }
        if self.pool.is_some() {
            n += 1;
        }
        if self.embed.is_some() {
            n += patches;
        }
        n.max(1)
    }

    /// Projects both maps to `k` channels each and concatenates them.
    pub fn fuse(&self, tape: &mut Tape, store: &ParamStore, ill: Var, dep: Var) -> Result<Var> {
        let (si, sd) = (tape.shape(ill).to_vec(), tape.shape(dep).to_vec());
        if si.len() != 4 || sd.len() != 4 || si[0] != sd[0] || si[2..] != sd[2..] {
            return Err(Error::Shape(format!("cannot fuse illumination {si:?} with depth {sd:?}")));
        }
        let (pi, pd) = match (&self.proj_ill, &self.proj_dep) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(Error::config("ablation.fusion", "fusion needs both projections")),
        };
        let a = pi.forward(tape, store, ill);
        let b = pd.forward(tape, store, dep);
        Ok(tape.concat(&[a, b], 1))
    }

    /// Patch embedding of a fused map, `[n, tokens, d_embed]`.
    pub fn embed(&self, tape: &mut Tape, store: &ParamStore, fused: Var) -> Result<Var> {
        let lin = self.embed.as_ref().ok_or_else(|| Error::config("ablation.emb", "embedding disabled"))?;
        let patches = patchify(tape, fused, self.cfg.patch)?;
        Ok(lin.forward(tape, store, patches))
    }

    /// The conditioning token sequence for a batch.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, inputs: &ConditionInputs) -> Result<Var> {
        let n = inputs.batch;
        let mut tokens = Vec::new();
        if let Some(clip) = &self.clip {
            let t = inputs.thumbnail.clone().ok_or_else(|| Error::Shape("missing LDR thumbnail".into()))?;
            let x = tape.constant(t);
            let patches = patchify(tape, x, self.cfg.patch)?;
            tokens.push(clip.forward(tape, store, patches));
        }
        let ill = match (&self.proj_ill, &inputs.illumination) {
            (Some(_), Some(t)) => Some(tape.constant(t.clone())),
            (Some(_), None) => return Err(Error::Shape("missing illumination features".into())),
            _ => None,
        };
        let dep = match (&self.proj_dep, &inputs.depth) {
            (Some(_), Some(t)) => Some(tape.constant(t.clone())),
            (Some(_), None) => return Err(Error::Shape("missing depth features".into())),
            _ => None,
        };
        let map = match (ill, dep) {
            (Some(i), Some(d)) => Some(self.fuse(tape, store, i, d)?),
            (Some(i), None) => Some(self.proj_ill.as_ref().unwrap().forward(tape, store, i)),
            (None, Some(d)) => Some(self.proj_dep.as_ref().unwrap().forward(tape, store, d)),
            (None, None) => None,
        };
        if let Some(m) = map {
            if self.embed.is_some() {
                tokens.push(self.embed(tape, store, m)?);
            } else if let Some(pool) = &self.pool {
                let tok = mean_pool_token(tape, m);
                tokens.push(pool.forward(tape, store, tok));
            }
        }
        if tokens.is_empty() {
            return Ok(tape.constant(Tensor::zeros(&[n, 1, self.cfg.d_embed])));
        }
        Ok(if tokens.len() == 1 { tokens[0] } else { tape.concat(&tokens, 1) })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn textured(h: usize, w: usize, gain: f64) -> LdrImage {
        LdrImage::from_fn(h, w, |y, x, c| (gain * (20.0 + ((y * 7 + x * 3 + c * 5) % 40) as f64)).round() as u8).unwrap()
    }

    fn cfg(flags: AblationFlags) -> ConditionConfig {
        ConditionConfig { grid_h: 8, grid_w: 8, k: 8, d_embed: 64, patch: 2, flags }
    }

    #[test]
    fn illumination_shape_and_constant_variance() {
        let l = LdrImage::filled(16, 16, 128).unwrap();
        let f = encode_illumination(&l, 4, 4).unwrap();
        assert_eq!(f.shape(), &[1, 3, 4, 4]);
        assert!(f.data()[16..32].iter().all(|&v| v == 0.0));
        assert_eq!(f, encode_illumination(&l, 4, 4).unwrap());
    }

    #[test]
    fn variance_channel_ignores_global_gain() {
        let a = encode_illumination(&textured(16, 16, 1.0), 4, 4).unwrap();
        let b = encode_illumination(&textured(16, 16, 2.0), 4, 4).unwrap();
        for i in 16..32 {
            assert!((a.data()[i] - b.data()[i]).abs() < 1e-3 * a.data()[i].max(1e-6), "{} vs {}", a.data()[i], b.data()[i]);
        }
        assert!(a.data()[..16].iter().zip(&b.data()[..16]).any(|(x, y)| x != y));
    }

    #[test]
    fn highlight_fraction_counts_near_white() {
        let l = LdrImage::from_fn(4, 4, |y, _, c| if y < 2 && c == 1 { 255 } else { 10 }).unwrap();
        let f = encode_illumination(&l, 1, 1).unwrap();
        assert_eq!(f.data()[2], 0.5);
    }

    #[test]
    fn depth_is_normalised() {
        let d = encode_depth(&textured(32, 32, 1.5), 8, 8).unwrap();
        assert_eq!(d.shape(), &[1, 1, 8, 8]);
        assert!(d.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(d.min(), 0.0);
        assert_eq!(d.max(), 1.0);
        let flat = encode_depth(&LdrImage::filled(16, 16, 77).unwrap(), 4, 4).unwrap();
        assert!(flat.data().iter().all(|&v| v == 0.0));
        assert!(encode_depth(&LdrImage::filled(2, 2, 1).unwrap(), 4, 4).is_err());
    }

    #[test]
    fn fusion_channels_and_zero_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let enc = ConditionEncoder::new(&mut store, cfg(AblationFlags::FULL), 3, &mut rng).unwrap();
        let mut tape = Tape::new();
        let ill = tape.constant(Tensor::randn(&[2, 3, 8, 8], &mut rng));
        let dep = tape.constant(Tensor::randn(&[2, 1, 8, 8], &mut rng));
        let fused = enc.fuse(&mut tape, &store, ill, dep).unwrap();
        assert_eq!(tape.shape(fused), &[2, 16, 8, 8]);
        let bad = tape.constant(Tensor::zeros(&[2, 1, 4, 4]));
        assert!(matches!(enc.fuse(&mut tape, &store, ill, bad), Err(Error::Shape(_))));

        for id in store.ids().collect::<Vec<_>>() {
            if store.name(id).starts_with("cond.proj") {
                store.value_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let mut tape = Tape::new();
        let ill = tape.constant(Tensor::randn(&[1, 3, 8, 8], &mut rng));
        let dep = tape.constant(Tensor::randn(&[1, 1, 8, 8], &mut rng));
        let fused = enc.fuse(&mut tape, &store, ill, dep).unwrap();
        assert!(tape.value(fused).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn patch_embedding_token_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let c = ConditionConfig { grid_h: 16, grid_w: 16, k: 8, d_embed: 64, patch: 4, flags: AblationFlags::FULL };
        let enc = ConditionEncoder::new(&mut store, c, 3, &mut rng).unwrap();
        let mut tape = Tape::new();
        let fused = tape.constant(Tensor::randn(&[1, 16, 16, 16], &mut rng));
        let e = enc.embed(&mut tape, &store, fused).unwrap();
        assert_eq!(tape.shape(e), &[1, 16, 64]);
        assert_eq!(enc.n_tokens(), 16);

        for id in store.ids().collect::<Vec<_>>() {
            if store.name(id).starts_with("cond.embed") {
                store.value_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let mut tape = Tape::new();
        let zero = tape.constant(Tensor::zeros(&[1, 16, 16, 16]));
        let e = enc.embed(&mut tape, &store, zero).unwrap();
        assert!(tape.value(e).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn patchify_layout() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[1, 2, 4, 4], |i| i as f64));
        let p = patchify(&mut tape, x, 2).unwrap();
        assert_eq!(tape.shape(p), &[1, 4, 8]);
        // first patch: channel 0 rows 0..2 cols 0..2 then channel 1
        assert_eq!(&tape.value(p).data()[..8], &[0.0, 1.0, 4.0, 5.0, 16.0, 17.0, 20.0, 21.0]);
    }

    #[test]
    fn every_ladder_row_builds_tokens() {
        let ldrs = vec![textured(64, 64, 1.0), textured(64, 64, 2.0)];
        let reg = EncoderRegistry::default();
        for (label, flags) in AblationFlags::ladder() {
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let mut store = ParamStore::new();
            let c = cfg(flags);
            let enc = ConditionEncoder::new(&mut store, c, 3, &mut rng).unwrap();
            let inputs = reg.extract(&ldrs, &c).unwrap();
            let mut tape = Tape::new();
            let t = enc.forward(&mut tape, &store, &inputs).unwrap();
            assert_eq!(tape.shape(t), &[2, enc.n_tokens(), 64], "{label}");
            let again = {
                let mut tape2 = Tape::new();
                let t2 = enc.forward(&mut tape2, &store, &inputs).unwrap();
                tape2.value(t2).clone()
            };
            assert_eq!(tape.value(t), &again, "{label}");
            assert_eq!(flags.ladder_label(), Some(label));
        }
        assert_eq!(AblationFlags::ladder()[0].1, AblationFlags::default());
    }

    #[test]
    fn registry_rejects_unknown_providers() {
        assert!(EncoderRegistry::from_config("toy", "toy", "toy").is_ok());
        assert!(matches!(EncoderRegistry::from_config("toy", "toy", "clip-vit"), Err(Error::Config { .. })));
        assert!(EncoderRegistry::from_config("vit", "toy", "toy").is_err());
        assert!(EncoderRegistry::from_config("toy", "exec:/nonexistent/depth-model", "toy").is_err());
        assert!(AblationFlags { emb: true, ..Default::default() }.validate().is_err());
    }
}
