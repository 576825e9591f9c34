use crate::error::{Error, Result};

use super::{HdrImage, LdrImage};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ToneKind {
    MuLaw,
    Reinhard,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ToneCurve {
    pub kind: ToneKind,
    pub mu: f64,
}

impl ToneCurve {
    pub const DEFAULT_MU: f64 = 5000.0;

    pub fn mu_law(mu: f64) -> Result<Self> {
        if !(mu > 0.0 && mu.is_finite()) {
            return Err(Error::Range(format!("mu-law constant must be positive, got {mu}")));
        }
        Ok(Self { kind: ToneKind::MuLaw, mu })
    }
}

impl Default for ToneCurve {
    fn default() -> Self {
        Self { kind: ToneKind::MuLaw, mu: Self::DEFAULT_MU }
    }
}

/// `ln(1 + mu x) / ln(1 + mu)`.
#[inline]
pub fn mu_law(x: f64, mu: f64) -> f64 {
    (mu * x).ln_1p() / mu.ln_1p()
}

/// An image divided by its own maximum, with the divisor kept so the
/// mapping can be undone.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalized {
    pub image: HdrImage,
    pub scale: f64,
}

/// Divides by the image maximum. An all-zero image is returned unchanged
/// with scale 1.
pub fn normalize_radiance(h: &HdrImage) -> Normalized {
    let m = h.max_value();
    if m > 0.0 {
        let image = h.map(|v| (v / m).min(1.0)).expect("scaling keeps radiance valid");
        Normalized { image, scale: m }
    } else {
        Normalized { image: h.clone(), scale: 1.0 }
    }
}

/// Applies the mu-law curve to an image already normalised into `[0, 1]`.
pub fn mu_law_tonemap(x: &HdrImage, curve: &ToneCurve) -> Result<HdrImage> {
    if !(curve.mu > 0.0) {
        return Err(Error::Range(format!("mu-law constant must be positive, got {}", curve.mu)));
    }
    if let Some(v) = x.data().iter().find(|v| **v > 1.0) {
        return Err(Error::Range(format!("mu-law input must lie in [0, 1], found {v}")));
    }
    x.map(|v| mu_law(v, curve.mu))
}

/// Global per-channel `x / (1 + x)`, gamma 2.2 encode, 8-bit quantise.
pub fn reinhard_display(h: &HdrImage) -> LdrImage {
    let data = h
        .data()
        .iter()
        .map(|&x| {
            let compressed = if x.is_infinite() { 1.0 } else { x / (1.0 + x) };
            (255.0 * compressed.powf(1.0 / 2.2)).round().clamp(0.0, 255.0) as u8
        })
        .collect();
    LdrImage::new(h.height(), h.width(), data).expect("dimensions preserved")
}
