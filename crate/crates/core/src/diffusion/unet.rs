use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, GroupNorm, LayerNorm, Linear, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Width at each resolution, finest first.
    pub widths: Vec<usize>,
    pub d_embed: usize,
    pub time_dim: usize,
    pub groups: usize,
}

impl UNetConfig {
    pub fn desk(latent_channels: usize, d_embed: usize) -> Self {
        Self {
            in_channels: 2 * latent_channels,
            out_channels: latent_channels,
            widths: vec![32, 64, 64],
            d_embed,
            time_dim: 64,
            groups: 8,
        }
    }

    /// Spatial reduction between the input and the bottleneck.
    pub fn downsample(&self) -> usize {
        1 << (self.widths.len() - 1)
    }
}

/// Sinusoidal features of the timestep, `[n, dim]`.
pub fn timestep_features(ts: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = vec![0.0; ts.len() * dim];
    for (i, &t) in ts.iter().enumerate() {
        for k in 0..half {
            let freq = (-(10_000f64).ln() * k as f64 / half as f64).exp();
            let a = t as f64 * freq;
            out[i * dim + k] = a.sin();
            out[i * dim + half + k] = a.cos();
        }
    }
    Tensor::new(vec![ts.len(), dim], out)
}

struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    temb: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
    out_ch: usize,
}

impl ResBlock {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cin: usize, cout: usize, cfg: &UNetConfig, rng: &mut R) -> Self {
        Self {
            norm1: GroupNorm::new(store, &format!("{name}.norm1"), cin, cfg.groups),
            conv1: Conv2d::same3(store, &format!("{name}.conv1"), cin, cout, rng),
            temb: Linear::new(store, &format!("{name}.temb"), cfg.time_dim, cout, true, rng),
            norm2: GroupNorm::new(store, &format!("{name}.norm2"), cout, cfg.groups),
            conv2: Conv2d::same3(store, &format!("{name}.conv2"), cout, cout, rng),
            skip: (cin != cout).then(|| Conv2d::pointwise(store, &format!("{name}.skip"), cin, cout, rng)),
            out_ch: cout,
        }
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, temb: Var) -> Var {
        let n = tape.shape(x)[0];
        let h = self.norm1.forward(tape, store, x);
        let h = tape.silu(h);
        let h = self.conv1.forward(tape, store, h);
        let t = self.temb.forward(tape, store, temb);
        let t = tape.reshape(t, &[n, self.out_ch, 1, 1]);
        let h = tape.add(h, t);
        let h = self.norm2.forward(tape, store, h);
        let h = tape.silu(h);
        let h = self.conv2.forward(tape, store, h);
        let s = match &self.skip {
            Some(c) => c.forward(tape, store, x),
            None => x,
        };
        tape.add(s, h)
    }
}

/// Single-head cross-attention from image positions to condition tokens.
struct CrossAttention {
    norm: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    dim: usize,
}

impl CrossAttention {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, ch: usize, d_embed: usize, rng: &mut R) -> Self {
        Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), ch),
            q: Linear::new(store, &format!("{name}.q"), ch, ch, false, rng),
            k: Linear::new(store, &format!("{name}.k"), d_embed, ch, false, rng),
            v: Linear::new(store, &format!("{name}.v"), d_embed, ch, false, rng),
            o: Linear::new(store, &format!("{name}.o"), ch, ch, true, rng),
            dim: ch,
        }
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, cond: Var) -> Var {
        let s = tape.shape(x).to_vec();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let seq = tape.reshape(x, &[n, c, h * w]);
        let seq = tape.permute(seq, &[0, 2, 1]);
        let normed = self.norm.forward(tape, store, seq);
        let q = self.q.forward(tape, store, normed);
        let k = self.k.forward(tape, store, cond);
        let v = self.v.forward(tape, store, cond);
        let scores = tape.matmul(q, k, false, true);
        let scores = tape.scale(scores, 1.0 / (self.dim as f64).sqrt());
        let attn = tape.softmax(scores);
        let mixed = tape.matmul(attn, v, false, false);
        let out = self.o.forward(tape, store, mixed);
        let out = tape.add(seq, out);
        let out = tape.permute(out, &[0, 2, 1]);
        tape.reshape(out, &[n, c, h, w])
    }
}

struct Level {
    res: ResBlock,
    attn: CrossAttention,
}

/// Noise predictor: residual blocks with timestep injection and
/// cross-attention at every resolution, skip connections across the
/// bottleneck.
pub struct UNet {
    pub config: UNetConfig,
    time1: Linear,
    time2: Linear,
    stem: Conv2d,
    down: Vec<Level>,
    downsample: Vec<Conv2d>,
    mid1: ResBlock,
    mid_attn: CrossAttention,
    mid2: ResBlock,
    up: Vec<Level>,
    out_norm: GroupNorm,
    out_conv: Conv2d,
}

impl UNet {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, cfg: &UNetConfig, rng: &mut R) -> Result<Self> {
        if cfg.widths.is_empty() || cfg.time_dim % 2 != 0 {
            return Err(Error::config("model.unet_widths", "need at least one width and an even time dimension"));
        }
        let w = &cfg.widths;
        let last = w.len() - 1;
        let time1 = Linear::new(store, &format!("{prefix}.time1"), cfg.time_dim, cfg.time_dim, true, rng);
        let time2 = Linear::new(store, &format!("{prefix}.time2"), cfg.time_dim, cfg.time_dim, true, rng);
        let stem = Conv2d::same3(store, &format!("{prefix}.stem"), cfg.in_channels, w[0], rng);
        let mut down = Vec::new();
        let mut downsample = Vec::new();
        for i in 0..last {
            down.push(Level {
                res: ResBlock::new(store, &format!("{prefix}.down{i}.res"), w[i], w[i], cfg, rng),
                attn: CrossAttention::new(store, &format!("{prefix}.down{i}.attn"), w[i], cfg.d_embed, rng),
            });
            downsample.push(Conv2d::new(store, &format!("{prefix}.down{i}.pool"), w[i], w[i + 1], 3, 2, 1, rng));
        }
        let mid1 = ResBlock::new(store, &format!("{prefix}.mid.res1"), w[last], w[last], cfg, rng);
        let mid_attn = CrossAttention::new(store, &format!("{prefix}.mid.attn"), w[last], cfg.d_embed, rng);
        let mid2 = ResBlock::new(store, &format!("{prefix}.mid.res2"), w[last], w[last], cfg, rng);
        let mut up = Vec::new();
        for i in (0..last).rev() {
            up.push(Level {
                res: ResBlock::new(store, &format!("{prefix}.up{i}.res"), w[i + 1] + w[i], w[i], cfg, rng),
                attn: CrossAttention::new(store, &format!("{prefix}.up{i}.attn"), w[i], cfg.d_embed, rng),
            });
        }
        let out_norm = GroupNorm::new(store, &format!("{prefix}.out_norm"), w[0], cfg.groups);
        let out_conv = Conv2d::same3(store, &format!("{prefix}.out_conv"), w[0], cfg.out_channels, rng);
        Ok(Self { config: cfg.clone(), time1, time2, stem, down, downsample, mid1, mid_attn, mid2, up, out_norm, out_conv })
    }

    /// `x` is `[n, in_channels, h, w]`, `ts` one timestep per sample, `cond`
    /// `[n, tokens, d_embed]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, ts: &[usize], cond: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        let f = self.config.downsample();
        if s.len() != 4 || s[1] != self.config.in_channels || s[2] % f != 0 || s[3] % f != 0 || s[0] != ts.len() {
            return Err(Error::Shape(format!(
                "denoiser input {s:?} needs {} channels, sides divisible by {f}, one timestep per sample",
                self.config.in_channels
            )));
        }
        let cs = tape.shape(cond).to_vec();
        if cs.len() != 3 || cs[0] != s[0] || cs[2] != self.config.d_embed {
            return Err(Error::Shape(format!("condition {cs:?} does not match batch {} and width {}", s[0], self.config.d_embed)));
        }
        let tf = tape.constant(timestep_features(ts, self.config.time_dim));
        let temb = self.time1.forward(tape, store, tf);
        let temb = tape.silu(temb);
        let temb = self.time2.forward(tape, store, temb);
        let temb = tape.silu(temb);

        let mut h = self.stem.forward(tape, store, x);
        let mut skips = Vec::new();
        for (lvl, pool) in self.down.iter().zip(&self.downsample) {
            h = lvl.res.forward(tape, store, h, temb);
            h = lvl.attn.forward(tape, store, h, cond);
            skips.push(h);
            h = pool.forward(tape, store, h);
        }
        h = self.mid1.forward(tape, store, h, temb);
        h = self.mid_attn.forward(tape, store, h, cond);
        h = self.mid2.forward(tape, store, h, temb);
        for lvl in &self.up {
            h = tape.upsample2x(h);
            let skip = skips.pop().expect("one skip per level");
            h = tape.concat(&[h, skip], 1);
            h = lvl.res.forward(tape, store, h, temb);
            h = lvl.attn.forward(tape, store, h, cond);
        }
        let h = self.out_norm.forward(tape, store, h);
        let h = tape.silu(h);
        Ok(self.out_conv.forward(tape, store, h))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn six_in_three_out() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let cfg = UNetConfig::desk(3, 64);
        assert_eq!(cfg.in_channels, 6);
        let net = UNet::new(&mut store, "unet", &cfg, &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::randn(&[2, 6, 8, 8], &mut rng));
        let c = tape.constant(Tensor::randn(&[2, 5, 64], &mut rng));
        let y = net.forward(&mut tape, &store, x, &[3, 700], c).unwrap();
        assert_eq!(tape.shape(y), &[2, 3, 8, 8]);
        let y2 = {
            let mut t2 = Tape::new();
            let x = t2.constant(tape.value(x).clone());
            let c = t2.constant(tape.value(c).clone());
            let y = net.forward(&mut t2, &store, x, &[3, 700], c).unwrap();
            t2.value(y).clone()
        };
        assert_eq!(tape.value(y), &y2);
        let bad = tape.constant(Tensor::zeros(&[2, 3, 8, 8]));
        assert!(net.forward(&mut tape, &store, bad, &[1, 1], c).is_err());
    }

    #[test]
    fn timestep_features_are_bounded_and_distinct() {
        let f = timestep_features(&[1, 2, 1000], 16);
        assert!(f.data().iter().all(|v| v.abs() <= 1.0));
        assert_ne!(&f.data()[..16], &f.data()[16..32]);
    }
}
