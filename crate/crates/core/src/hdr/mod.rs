//! Image domain types shared by every stage, tone curves, and HDR file I/O.

mod rawfloat;
mod rgbe;
mod tonemap;

pub use rawfloat::{read_raw_float, read_raw_planes, write_raw_float, write_raw_planes, RAW_FLOAT_MAGIC};
pub use rgbe::{decode_rgbe_pixel, encode_rgbe_pixel, read_rgbe, read_rgbe_file, write_rgbe, write_rgbe_file};
pub use tonemap::{mu_law, mu_law_tonemap, normalize_radiance, reinhard_display, Normalized, ToneCurve, ToneKind};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Linear scene radiance, RGB, row-major with interleaved channels.
#[derive(Clone, Debug, PartialEq)]
pub struct HdrImage {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl HdrImage {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidImage(format!("empty image {height}x{width}")));
        }
        if data.len() != height * width * 3 {
            return Err(Error::InvalidImage(format!(
                "{height}x{width}x3 image needs {} values, got {}",
                height * width * 3,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::InvalidImage(format!("radiance must be finite and non-negative, found {v}")));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height * width * 3])
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    data.push(f(y, x, c));
                }
            }
        }
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn max_value(&self) -> f64 {
        self.data.iter().copied().fold(0.0, f64::max)
    }

    pub fn same_dims(&self, other: &HdrImage) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Planar `[1, 3, h, w]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        interleaved_to_planar(self.height, self.width, self.data.iter().copied())
    }

    /// Inverse of [`to_tensor`](Self::to_tensor) for one batch item;
    /// negative values are clamped to 0.
    pub fn from_tensor(t: &Tensor, index: usize) -> Result<Self> {
        let (h, w) = (t.dim(2), t.dim(3));
        let data = planar_to_interleaved(t, index).into_iter().map(|v| v.max(0.0)).collect();
        Self::new(h, w, data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(self.height, self.width, self.data.iter().map(|&v| f(v)).collect())
    }
}

/// 8-bit display-referred RGB, row-major with interleaved channels.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LdrImage {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LdrImage {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidImage(format!("empty image {height}x{width}")));
        }
        if data.len() != height * width * 3 {
            return Err(Error::InvalidImage(format!(
                "{height}x{width}x3 image needs {} values, got {}",
                height * width * 3,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Result<Self> {
        Self::new(height, width, vec![value; height * width * 3])
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize, usize) -> u8) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    data.push(f(y, x, c));
                }
            }
        }
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Planar `[1, 3, h, w]` tensor scaled to `[0, 1]`.
    pub fn to_unit_tensor(&self) -> Tensor {
        interleaved_to_planar(self.height, self.width, self.data.iter().map(|&v| f64::from(v) / 255.0))
    }

    pub fn read_png(path: &std::path::Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::Codec { path: path.to_path_buf(), message: e.to_string() })?
            .to_rgb8();
        let (w, h) = img.dimensions();
        Self::new(h as usize, w as usize, img.into_raw())
    }

    pub fn write_png(&self, path: &std::path::Path) -> Result<()> {
        let img = image::RgbImage::from_raw(self.width as u32, self.height as u32, self.data.clone())
            .expect("buffer length checked at construction");
        img.save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::Codec { path: path.to_path_buf(), message: e.to_string() })
    }
}

fn interleaved_to_planar(h: usize, w: usize, values: impl Iterator<Item = f64>) -> Tensor {
    let mut out = vec![0.0; 3 * h * w];
    for (i, v) in values.enumerate() {
        let (p, c) = (i / 3, i % 3);
        out[c * h * w + p] = v;
    }
    Tensor::new(vec![1, 3, h, w], out)
}

fn planar_to_interleaved(t: &Tensor, index: usize) -> Vec<f64> {
    assert_eq!(t.rank(), 4);
    assert_eq!(t.dim(1), 3, "expected a 3-channel tensor");
    let (h, w) = (t.dim(2), t.dim(3));
    let base = index * 3 * h * w;
    let d = t.data();
    let mut out = Vec::with_capacity(3 * h * w);
    for p in 0..h * w {
        for c in 0..3 {
            out.push(d[base + c * h * w + p]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_invalid_radiance() {
        assert!(HdrImage::new(1, 1, vec![1.0, -0.1, 0.0]).is_err());
        assert!(HdrImage::new(1, 1, vec![1.0, f64::NAN, 0.0]).is_err());
        assert!(HdrImage::new(0, 1, vec![]).is_err());
        assert!(HdrImage::new(1, 2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn tensor_layout_roundtrip() {
        let img = HdrImage::from_fn(2, 3, |y, x, c| (y * 100 + x * 10 + c) as f64).unwrap();
        let t = img.to_tensor();
        assert_eq!(t.shape(), &[1, 3, 2, 3]);
        // channel 1 plane, pixel (1, 2)
        assert_eq!(t.data()[6 + 5], 121.0);
        assert_eq!(HdrImage::from_tensor(&t, 0).unwrap(), img);
    }

    #[test]
    fn ldr_unit_tensor() {
        let img = LdrImage::filled(2, 2, 255).unwrap();
        assert!(img.to_unit_tensor().data().iter().all(|&v| v == 1.0));
    }
}
