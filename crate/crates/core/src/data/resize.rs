use crate::error::{Error, Result};
use crate::hdr::{HdrImage, LdrImage};

/// Bilinear resampling of `channels` planes of `h x w` with half-pixel
/// centres and edge clamping.
pub fn resize_planes(data: &[f64], channels: usize, h: usize, w: usize, th: usize, tw: usize) -> Result<Vec<f64>> {
    if th == 0 || tw == 0 {
        return Err(Error::Range(format!("resize target must be at least 1x1, got {th}x{tw}")));
    }
    assert_eq!(data.len(), channels * h * w);
    if (th, tw) == (h, w) {
        return Ok(data.to_vec());
    }
    let axis = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
        (0..out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * inp as f64 / out as f64 - 0.5).clamp(0.0, (inp - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, src - i0 as f64)
            })
            .collect()
    };
    let ys = axis(th, h);
    let xs = axis(tw, w);
    let mut out = Vec::with_capacity(channels * th * tw);
    for c in 0..channels {
        let plane = &data[c * h * w..(c + 1) * h * w];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Ok(out)
}

fn to_planes(h: usize, w: usize, interleaved: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut out = vec![0.0; 3 * h * w];
    for (i, v) in interleaved.enumerate() {
        out[(i % 3) * h * w + i / 3] = v;
    }
    out
}

fn to_interleaved(h: usize, w: usize, planes: &[f64]) -> impl Iterator<Item = f64> + '_ {
    (0..h * w).flat_map(move |p| (0..3).map(move |c| planes[c * h * w + p]))
}

pub fn resize_hdr(img: &HdrImage, th: usize, tw: usize) -> Result<HdrImage> {
    let (h, w) = (img.height(), img.width());
    let planes = resize_planes(&to_planes(h, w, img.data().iter().copied()), 3, h, w, th, tw)?;
    HdrImage::new(th, tw, to_interleaved(th, tw, &planes).map(|v| v.max(0.0)).collect())
}

pub fn resize_ldr(img: &LdrImage, th: usize, tw: usize) -> Result<LdrImage> {
    let (h, w) = (img.height(), img.width());
    let planes = resize_planes(&to_planes(h, w, img.data().iter().map(|&v| f64::from(v))), 3, h, w, th, tw)?;
    LdrImage::new(th, tw, to_interleaved(th, tw, &planes).map(|v| v.round().clamp(0.0, 255.0) as u8).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn two_by_two_to_one_is_average() {
        let out = resize_planes(&[0.0, 1.0, 0.0, 1.0], 1, 2, 2, 1, 1).unwrap();
        assert_eq!(out, vec![0.5]);
    }

    #[test]
    fn same_size_is_identity() {
        let img = HdrImage::from_fn(5, 4, |y, x, c| (y * 31 + x * 7 + c) as f64).unwrap();
        assert_eq!(resize_hdr(&img, 5, 4).unwrap(), img);
    }

    #[test]
    fn zero_target_rejected() {
        let img = LdrImage::filled(2, 2, 9).unwrap();
        assert!(resize_ldr(&img, 0, 3).is_err());
        assert!(resize_ldr(&img, 3, 0).is_err());
    }

    proptest! {
        #[test]
        fn constant_stays_constant(c in 0.0f64..100.0, h in 1usize..9, w in 1usize..9, th in 1usize..17, tw in 1usize..17) {
            let img = HdrImage::filled(h, w, c).unwrap();
            let out = resize_hdr(&img, th, tw).unwrap();
            prop_assert_eq!((out.height(), out.width()), (th, tw));
            for &v in out.data() {
                prop_assert!((v - c).abs() <= 1e-12 * c.max(1.0));
            }
        }
    }
}
