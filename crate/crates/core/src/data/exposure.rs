use crate::error::{Error, Result};
use crate::hdr::{HdrImage, LdrImage};

/// Gain and offset for scale-and-saturate exposure synthesis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExposureParams {
    pub alpha: f64,
    pub beta: f64,
}

impl ExposureParams {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) || !beta.is_finite() {
            return Err(Error::Range(format!("exposure needs alpha > 0 and finite beta, got ({alpha}, {beta})")));
        }
        Ok(Self { alpha, beta })
    }

    /// Parses `alpha:beta`.
    pub fn parse(s: &str) -> Result<Self> {
        let (a, b) = s.split_once(':').ok_or_else(|| Error::Range(format!("expected alpha:beta, got `{s}`")))?;
        let parse = |v: &str| v.trim().parse::<f64>().map_err(|_| Error::Range(format!("bad number `{v}` in `{s}`")));
        Self::new(parse(a)?, parse(b)?)
    }
}

/// `clamp(round(alpha * x + beta), 0, 255)` per sample, rounding half away
/// from zero.
pub fn synth_exposure(l: &LdrImage, p: ExposureParams) -> LdrImage {
    let data = l
        .data()
        .iter()
        .map(|&x| (p.alpha * f64::from(x) + p.beta).round().clamp(0.0, 255.0) as u8)
        .collect();
    LdrImage::new(l.height(), l.width(), data).expect("dimensions preserved")
}

/// Camera model: exposure scaling, clipping at 1, gamma response, 8-bit
/// quantisation.
pub fn simulate_ldr(h: &HdrImage, exposure: f64, gamma: f64) -> Result<LdrImage> {
    if !(exposure > 0.0) || !(gamma > 0.0) {
        return Err(Error::Range(format!("exposure and gamma must be positive, got {exposure}, {gamma}")));
    }
    let data = h
        .data()
        .iter()
        .map(|&x| (255.0 * (exposure * x).min(1.0).powf(1.0 / gamma)).round().clamp(0.0, 255.0) as u8)
        .collect();
    LdrImage::new(h.height(), h.width(), data)
}
