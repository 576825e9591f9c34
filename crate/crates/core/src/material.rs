//! Albedo / roughness / metallic decomposition and the tone-mapped L1
//! material loss.

use crate::error::{Error, Result};
use crate::hdr::{HdrImage, ToneCurve};
use crate::tape::{Tape, Unary, Var};
use crate::tensor::Tensor;

const LUMA: [f64; 3] = [0.2126, 0.7152, 0.0722];
const ALBEDO_EPS: f64 = 1e-3;
const ROUGHNESS_GAIN: f64 = 50.0;
const HIGHLIGHT_GAIN: f64 = 12.0;
const SAT_EPS: f64 = 1e-6;

/// Per-image maps, planar: albedo `[3,H,W]`, roughness and metallic `[1,H,W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaterialMaps {
    pub height: usize,
    pub width: usize,
    pub albedo: Vec<f64>,
    pub roughness: Vec<f64>,
    pub metallic: Vec<f64>,
}

impl MaterialMaps {
    pub fn new(height: usize, width: usize, albedo: Vec<f64>, roughness: Vec<f64>, metallic: Vec<f64>) -> Result<Self> {
        let n = height * width;
        if n == 0 || albedo.len() != 3 * n || roughness.len() != n || metallic.len() != n {
            return Err(Error::Shape(format!(
                "material maps for {height}x{width} need 3n/n/n values, got {}/{}/{}",
                albedo.len(),
                roughness.len(),
                metallic.len()
            )));
        }
        let maps = Self { height, width, albedo, roughness, metallic };
        if maps.values().any(|v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Range("material map values must lie in [0, 1]".into()));
        }
        Ok(maps)
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        let n = height * width;
        Self::new(height, width, vec![value; 3 * n], vec![value; n], vec![value; n])
    }

    fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.albedo.iter().chain(&self.roughness).chain(&self.metallic).copied()
    }
}

/// Maps on the tape for a batch: albedo `[N,3,H,W]`, the others `[N,1,H,W]`.
#[derive(Clone, Copy, Debug)]
pub struct MapVars {
    pub albedo: Var,
    pub roughness: Var,
    pub metallic: Var,
}

/// Material decomposition provider. Only the built-in toy provider can sit
/// inside the training graph.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum MaterialProvider {
    Toy,
}

impl MaterialProvider {
    pub fn from_config(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::Toy),
            other => Err(Error::config(
                "material.provider",
                format!("unknown provider `{other}`; the loss needs a differentiable provider and only `toy` is built in"),
            )),
        }
    }
}

/// Toy decomposition of a batch of normalised linear radiance `[N,3,H,W]`.
/// Albedo is chroma-normalised colour, roughness grows with local luminance
/// gradient energy, metallic scores bright desaturated highlights.
pub fn decompose_var(tape: &mut Tape, x: Var) -> MapVars {
    let s = tape.shape(x).to_vec();
    assert!(s.len() == 4 && s[1] == 3, "decompose expects [N,3,H,W], got {s:?}");
    let (n, h, w) = (s[0], s[2], s[3]);
    let one = [n, 1, h, w];

    let sum = tape.reduce_to(x, &one);
    let denom = tape.add_scalar(sum, ALBEDO_EPS);
    let ratio = tape.div(x, denom);
    let albedo = tape.clamp(ratio, 0.0, 1.0);

    let luma_w = tape.constant(Tensor::new(vec![1, 3, 1, 1], LUMA.to_vec()));
    let weighted = tape.mul(x, luma_w);
    let luma = tape.reduce_to(weighted, &one);
    let gx = tape.forward_diff(luma, 3);
    let gy = tape.forward_diff(luma, 2);
    let gx2 = tape.square(gx);
    let gy2 = tape.square(gy);
    let energy = tape.add(gx2, gy2);
    let e = tape.scale(energy, -ROUGHNESS_GAIN);
    let decay = tape.exp(e);
    let rough = tape.scale(decay, -1.0);
    let rough = tape.add_scalar(rough, 1.0);
    let roughness = tape.clamp(rough, 0.0, 1.0);

    let mean = tape.scale(sum, 1.0 / 3.0);
    let dev = tape.sub(x, mean);
    let dev2 = tape.square(dev);
    let spread = tape.reduce_to(dev2, &one);
    let sq = tape.square(x);
    let energy_c = tape.reduce_to(sq, &one);
    let energy_c = tape.add_scalar(energy_c, SAT_EPS);
    let sat = tape.div(spread, energy_c);
    let neutral = tape.scale(sat, -1.0);
    let neutral = tape.add_scalar(neutral, 1.0);
    let shifted = tape.add_scalar(luma, -0.5);
    let shifted = tape.scale(shifted, HIGHLIGHT_GAIN);
    let highlight = tape.sigmoid(shifted);
    let met = tape.mul(highlight, neutral);
    let metallic = tape.clamp(met, 0.0, 1.0);

    MapVars { albedo, roughness, metallic }
}

/// Toy decomposition of one image, normalised by its own maximum first.
pub fn decompose(img: &HdrImage) -> MaterialMaps {
    let norm = crate::hdr::normalize_radiance(img);
    let mut tape = Tape::new();
    let x = tape.constant(norm.image.to_tensor());
    let v = decompose_var(&mut tape, x);
    let (h, w) = (img.height(), img.width());
    MaterialMaps::new(
        h,
        w,
        tape.value(v.albedo).data().to_vec(),
        tape.value(v.roughness).data().to_vec(),
        tape.value(v.metallic).data().to_vec(),
    )
    .expect("toy maps are clamped to [0, 1]")
}

/// Batch material loss on the tape: for each map, mean absolute difference
/// of the mu-law curves over all pixels, summed over maps, averaged over the
/// batch.
pub fn material_loss_var(tape: &mut Tape, gt: &MapVars, pred: &MapVars, curve: &ToneCurve) -> Var {
    let mut terms = Vec::with_capacity(3);
    for (a, b) in [(gt.albedo, pred.albedo), (gt.roughness, pred.roughness), (gt.metallic, pred.metallic)] {
        let ta = tape.unary(a, Unary::MuLaw(curve.mu));
        let tb = tape.unary(b, Unary::MuLaw(curve.mu));
        let d = tape.sub(ta, tb);
        let d = tape.abs(d);
        terms.push(tape.mean_all(d));
    }
    let s = tape.add(terms[0], terms[1]);
    tape.add(s, terms[2])
}

/// Material loss over a batch of map triplets.
pub fn material_loss(gt: &[MaterialMaps], pred: &[MaterialMaps], curve: &ToneCurve) -> Result<f64> {
    if gt.is_empty() || gt.len() != pred.len() {
        return Err(Error::Shape(format!("material loss needs equal non-empty batches, got {} and {}", gt.len(), pred.len())));
    }
    let t = |v: f64| crate::hdr::mu_law(v, curve.mu);
    let l1 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(&x, &y)| (t(x) - t(y)).abs()).sum::<f64>() / a.len() as f64;
    let mut total = 0.0;
    for (g, p) in gt.iter().zip(pred) {
        if (g.height, g.width) != (p.height, p.width) {
            return Err(Error::Shape(format!(
                "material maps {}x{} vs {}x{}",
                g.height, g.width, p.height, p.width
            )));
        }
        for m in [g, p] {
            if m.values().any(|v| !(0.0..=1.0).contains(&v)) {
                return Err(Error::Range("material map values must lie in [0, 1]".into()));
            }
        }
        total += l1(&g.albedo, &p.albedo) + l1(&g.roughness, &p.roughness) + l1(&g.metallic, &p.metallic);
    }
    Ok(total / gt.len() as f64)
}

/// Weight of the material term in the full objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_mat: f64,
}

impl LossWeights {
    pub const DEFAULT_LAMBDA: f64 = 0.2;

    pub fn new(lambda_mat: f64) -> Result<Self> {
        if !(lambda_mat >= 0.0 && lambda_mat.is_finite()) {
            return Err(Error::config("material.lambda", format!("must be a finite value >= 0, got {lambda_mat}")));
        }
        Ok(Self { lambda_mat })
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_mat: Self::DEFAULT_LAMBDA }
    }
}

/// `L_d + lambda * L_mat`.
pub fn total_loss(l_d: f64, l_mat: f64, w: LossWeights) -> Result<f64> {
    if !l_d.is_finite() || !l_mat.is_finite() || l_d < 0.0 || l_mat < 0.0 {
        return Err(Error::Numeric(format!("losses must be finite and non-negative, got L_d={l_d}, L_mat={l_mat}")));
    }
    Ok(l_d + w.lambda_mat * l_mat)
}
