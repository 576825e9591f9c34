//! Shared inputs for the benchmarks.

use hdrlift_core::data::{simulate_ldr, synthetic_scene};
use hdrlift_core::diffusion::{LatentDiffusion, ModelConfig};
use hdrlift_core::encoders::AblationFlags;
use hdrlift_core::hdr::normalize_radiance;
use hdrlift_core::{HdrImage, LdrImage};

/// `n` procedural scenes at `side`x`side` with their simulated captures.
pub fn scenes(n: usize, side: usize) -> (Vec<LdrImage>, Vec<HdrImage>) {
    let hdrs: Vec<_> = (0..n).map(|i| normalize_radiance(&synthetic_scene(i as u64, side, side)).image).collect();
    let ldrs = hdrs.iter().map(|h| simulate_ldr(h, 4.0, 2.2).expect("valid exposure")).collect();
    (ldrs, hdrs)
}

pub fn desk_model() -> LatentDiffusion {
    LatentDiffusion::new(ModelConfig::desk(AblationFlags::FULL), 0).expect("desk config is valid")
}
