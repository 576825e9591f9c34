use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, ParamStore};
use crate::tape::{Tape, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VaeConfig {
    /// Width after the stem, then after each stride-2 stage.
    pub channels: Vec<usize>,
    pub latent_channels: usize,
}

impl VaeConfig {
    pub fn desk() -> Self {
        Self { channels: vec![8, 16, 32, 32], latent_channels: 3 }
    }

    pub fn downsample(&self) -> usize {
        1 << (self.channels.len() - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.len() < 2 || self.channels.contains(&0) || self.latent_channels == 0 {
            return Err(Error::config("model.vae_channels", "need a stem width and at least one stage"));
        }
        Ok(())
    }
}

struct Stage {
    a: Conv2d,
    b: Conv2d,
}

/// Image to latent: 3x3 stem, stride-2 stages, 1x1 head.
pub struct Encoder {
    stem: Conv2d,
    stages: Vec<Stage>,
    head: Conv2d,
    factor: usize,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, cfg: &VaeConfig, rng: &mut R) -> Self {
        let c = &cfg.channels;
        let stem = Conv2d::same3(store, &format!("{prefix}.stem"), 3, c[0], rng);
        let stages = (1..c.len())
            .map(|i| Stage {
                a: Conv2d::new(store, &format!("{prefix}.down{i}.a"), c[i - 1], c[i], 3, 2, 1, rng),
                b: Conv2d::same3(store, &format!("{prefix}.down{i}.b"), c[i], c[i], rng),
            })
            .collect();
        let head = Conv2d::pointwise(store, &format!("{prefix}.head"), c[c.len() - 1], cfg.latent_channels, rng);
        Self { stem, stages, head, factor: cfg.downsample() }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        if s.len() != 4 || s[1] != 3 || s[2] % self.factor != 0 || s[3] % self.factor != 0 {
            return Err(Error::Shape(format!("encoder input {s:?} must be [n, 3, h, w] with h, w divisible by {}", self.factor)));
        }
        let mut h = self.stem.forward(tape, store, x);
        h = tape.silu(h);
        for st in &self.stages {
            h = st.a.forward(tape, store, h);
            h = tape.silu(h);
            h = st.b.forward(tape, store, h);
            h = tape.silu(h);
        }
        Ok(self.head.forward(tape, store, h))
    }
}

/// Latent to image, mirroring the encoder with nearest upsampling.
pub struct Decoder {
    stem: Conv2d,
    stages: Vec<Stage>,
    head: Conv2d,
}

impl Decoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, cfg: &VaeConfig, rng: &mut R) -> Self {
        let c = &cfg.channels;
        let last = c.len() - 1;
        let stem = Conv2d::pointwise(store, &format!("{prefix}.stem"), cfg.latent_channels, c[last], rng);
        let stages = (1..c.len())
            .rev()
            .map(|i| Stage {
                a: Conv2d::same3(store, &format!("{prefix}.up{i}.a"), c[i], c[i - 1], rng),
                b: Conv2d::same3(store, &format!("{prefix}.up{i}.b"), c[i - 1], c[i - 1], rng),
            })
            .collect();
        let head = Conv2d::same3(store, &format!("{prefix}.head"), c[0], 3, rng);
        Self { stem, stages, head }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, z: Var) -> Var {
        let mut h = self.stem.forward(tape, store, z);
        h = tape.silu(h);
        for st in &self.stages {
            h = tape.upsample2x(h);
            h = st.a.forward(tape, store, h);
            h = tape.silu(h);
            h = st.b.forward(tape, store, h);
            h = tape.silu(h);
        }
        self.head.forward(tape, store, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn shapes_follow_the_downsample_factor() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let cfg = VaeConfig::desk();
        assert_eq!(cfg.downsample(), 8);
        let e = Encoder::new(&mut store, "e", &cfg, &mut rng);
        let d = Decoder::new(&mut store, "d", &cfg, &mut rng);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::randn(&[2, 3, 64, 64], &mut rng));
        let z = e.forward(&mut tape, &store, x).unwrap();
        assert_eq!(tape.shape(z), &[2, 3, 8, 8]);
        let y = d.forward(&mut tape, &store, z);
        assert_eq!(tape.shape(y), &[2, 3, 64, 64]);
        let bad = tape.constant(Tensor::zeros(&[1, 3, 60, 64]));
        assert!(matches!(e.forward(&mut tape, &store, bad), Err(Error::Shape(_))));
    }
}
