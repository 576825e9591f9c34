use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::hdr::HdrImage;

struct Disc {
    cx: f64,
    cy: f64,
    r: f64,
    color: [f64; 3],
    shine: f64,
}

/// Procedural test scene: a graded sky, shaded discs with highlights and a
/// few small emitters far above display white.
pub fn synthetic_scene(seed: u64, height: usize, width: usize) -> HdrImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let top: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.1..0.6));
    let bottom: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.02..0.3));
    let discs: Vec<Disc> = (0..rng.random_range(2..5))
        .map(|_| Disc {
            cx: rng.random_range(0.15..0.85),
            cy: rng.random_range(0.2..0.9),
            r: rng.random_range(0.08..0.25),
            color: std::array::from_fn(|_| rng.random_range(0.05..0.9)),
            shine: rng.random_range(0.0..1.0),
        })
        .collect();
    let lights: Vec<(f64, f64, f64, f64)> = (0..rng.random_range(1..3))
        .map(|_| (rng.random_range(0.1..0.9), rng.random_range(0.05..0.5), rng.random_range(0.02..0.06), rng.random_range(8.0..60.0)))
        .collect();
    let (lx, ly) = (rng.random_range(-0.7..0.7), rng.random_range(-0.9..-0.2));
    let lz = (1.0f64 - lx * lx - ly * ly).max(0.05).sqrt();
    HdrImage::from_fn(height, width, |y, x, c| {
        let u = (x as f64 + 0.5) / width as f64;
        let v = (y as f64 + 0.5) / height as f64;
        let mut value = top[c] * (1.0 - v) + bottom[c] * v;
        for d in &discs {
            let (dx, dy) = ((u - d.cx) / d.r, (v - d.cy) / d.r);
            let q = dx * dx + dy * dy;
            if q < 1.0 {
                let nz = (1.0 - q).sqrt();
                let lambert = (dx * lx + dy * ly + nz * lz).max(0.0);
                let spec = lambert.powf(40.0) * d.shine * 6.0;
                value = d.color[c] * (0.1 + lambert) + spec;
            }
        }
        for &(cx, cy, r, power) in &lights {
            let q = ((u - cx).powi(2) + (v - cy).powi(2)) / (r * r);
            value += power * (-q).exp();
        }
        value
    })
    .expect("scene radiance is finite and non-negative")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenes_are_seeded_and_exceed_display_range() {
        let a = synthetic_scene(3, 32, 48);
        assert_eq!(a, synthetic_scene(3, 32, 48));
        assert_ne!(a, synthetic_scene(4, 32, 48));
        assert_eq!((a.height(), a.width()), (32, 48));
        assert!(a.max_value() > 4.0);
        assert!(a.data().iter().all(|v| v.is_finite() && *v >= 0.0));
    }
}
