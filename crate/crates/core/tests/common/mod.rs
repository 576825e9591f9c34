#![allow(dead_code)]

use hdrlift_core::data::{simulate_ldr, synthetic_scene};
use hdrlift_core::diffusion::{ModelConfig, UNetConfig, VaeConfig};
use hdrlift_core::encoders::{AblationFlags, ConditionConfig};
use hdrlift_core::hdr::normalize_radiance;
use hdrlift_core::{HdrImage, LdrImage};

/// 16x16 images, 4x4x2 latents, a few thousand parameters.
pub fn tiny(flags: AblationFlags) -> ModelConfig {
    let d = 8;
    ModelConfig {
        resolution: 16,
        vae: VaeConfig { channels: vec![4, 4, 4], latent_channels: 2 },
        unet: UNetConfig { in_channels: 4, out_channels: 2, widths: vec![4, 8], d_embed: d, time_dim: 8, groups: 4 },
        condition: ConditionConfig { grid_h: 4, grid_w: 4, k: 4, d_embed: d, patch: 2, flags },
        ..ModelConfig::desk(flags)
    }
}

pub fn pairs(n: usize, side: usize, seed: u64) -> (Vec<LdrImage>, Vec<HdrImage>) {
    let hdrs: Vec<_> = (0..n).map(|i| normalize_radiance(&synthetic_scene(seed + i as u64, side, side)).image).collect();
    let ldrs = hdrs.iter().map(|h| simulate_ldr(h, 4.0, 2.2).unwrap()).collect();
    (ldrs, hdrs)
}
