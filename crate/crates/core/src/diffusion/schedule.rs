use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { timesteps: 1000, beta_start: 1e-4, beta_end: 2e-2 }
    }
}

/// Variance-preserving noise schedule with a linear beta ramp. Index `t`
/// runs over `1..=T`; `alpha_bar(0)` is 1.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub config: ScheduleConfig,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(config: ScheduleConfig) -> Result<Self> {
        let ScheduleConfig { timesteps, beta_start, beta_end } = config;
        if timesteps == 0 {
            return Err(Error::config("diffusion.timesteps", "must be at least 1"));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::config(
                "diffusion.beta_start",
                format!("need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"),
            ));
        }
        let betas: Vec<f64> = (0..timesteps)
            .map(|i| {
                if timesteps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (timesteps - 1) as f64
                }
            })
            .collect();
        let mut alpha_bars = Vec::with_capacity(timesteps + 1);
        alpha_bars.push(1.0);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(Self { config, betas, alpha_bars })
    }

    pub fn timesteps(&self) -> usize {
        self.config.timesteps
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// Cumulative product of `1 - beta` up to `t`, for `t` in `0..=T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.timesteps() {
            return Err(Error::Range(format!("timestep {t} outside [1, {}]", self.timesteps())));
        }
        Ok(())
    }

    /// `sqrt(ab) z0 + sqrt(1 - ab) eps`.
    pub fn forward_noise(&self, z0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
        self.check_t(t)?;
        same_shape(z0, eps)?;
        let ab = self.alpha_bar(t);
        let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(z0.zip_map(eps, |z, e| a * z + s * e))
    }

    /// Inverts `forward_noise` given a noise estimate.
    pub fn predict_x0(&self, zt: &Tensor, t: usize, eps_hat: &Tensor) -> Result<Tensor> {
        self.check_t(t)?;
        same_shape(zt, eps_hat)?;
        let ab = self.alpha_bar(t);
        if ab <= 0.0 {
            return Err(Error::Numeric(format!("alpha_bar({t}) is zero; x0 cannot be recovered")));
        }
        let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(zt.zip_map(eps_hat, |z, e| (z - s * e) / a))
    }

    /// `steps` descending timesteps spread over `[1, T]`, ending at 1 and
    /// starting at `T`.
    pub fn strided(&self, steps: usize) -> Result<Vec<usize>> {
        let t_max = self.timesteps();
        if steps == 0 || steps > t_max {
            return Err(Error::Range(format!("sampling steps {steps} outside [1, {t_max}]")));
        }
        if steps == 1 {
            return Ok(vec![t_max]);
        }
        let span = (t_max - 1) as f64 / (steps - 1) as f64;
        let mut ts: Vec<usize> = (0..steps).map(|i| ((1.0 + i as f64 * span).round() as usize).clamp(1, t_max)).collect();
        ts.dedup();
        ts.reverse();
        Ok(ts)
    }
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Mean squared error over all elements.
pub fn diffusion_loss(eps: &Tensor, eps_hat: &Tensor) -> Result<f64> {
    same_shape(eps, eps_hat)?;
    Ok(eps.data().iter().zip(eps_hat.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / eps.numel() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sched() -> NoiseSchedule {
        NoiseSchedule::new(ScheduleConfig::default()).unwrap()
    }

    #[test]
    fn alpha_bar_is_strictly_decreasing_in_unit_interval() {
        let s = sched();
        assert_eq!(s.alpha_bar(0), 1.0);
        for t in 1..=1000 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            assert!(s.alpha_bar(t) > 0.0 && s.alpha_bar(t) <= 1.0);
            assert!(s.beta(t) > 0.0 && s.beta(t) < 1.0);
        }
        assert!((s.beta(1) - 1e-4).abs() < 1e-18);
        assert!((s.beta(1000) - 2e-2).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(NoiseSchedule::new(ScheduleConfig { timesteps: 0, ..Default::default() }).is_err());
        assert!(NoiseSchedule::new(ScheduleConfig { timesteps: 10, beta_start: 0.1, beta_end: 0.01 }).is_err());
        assert!(NoiseSchedule::new(ScheduleConfig { timesteps: 10, beta_start: 0.1, beta_end: 1.0 }).is_err());
    }

    #[test]
    fn forward_noise_limits() {
        let s = sched();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let eps = Tensor::randn(&[2, 3, 4, 4], &mut rng);
        let zero = Tensor::zeros(&[2, 3, 4, 4]);
        let zt = s.forward_noise(&zero, 500, &eps).unwrap();
        let k = (1.0 - s.alpha_bar(500)).sqrt();
        for (a, b) in zt.data().iter().zip(eps.data()) {
            assert!((a - k * b).abs() < 1e-15);
        }
        assert!(s.forward_noise(&zero, 0, &eps).is_err());
        assert!(s.forward_noise(&zero, 1001, &eps).is_err());
        // the last step of a long schedule is close to pure noise
        let z0 = Tensor::full(&[2, 3, 4, 4], 1.0);
        let zt = s.forward_noise(&z0, 1000, &eps).unwrap();
        assert!(zt.zip_map(&eps, |a, b| (a - b).abs()).max() < 0.01);
        // the first step barely moves z0
        let z1 = s.forward_noise(&z0, 1, &Tensor::zeros(&[2, 3, 4, 4])).unwrap();
        assert!(z1.zip_map(&z0, |a, b| (a - b).abs()).max() < 1e-4);
    }

    #[test]
    fn predict_x0_guards_zero_alpha_bar() {
        let s = NoiseSchedule::new(ScheduleConfig { timesteps: 2, beta_start: 0.5, beta_end: 0.999_999_999_999 }).unwrap();
        assert!(s.alpha_bar(2) > 0.0);
        let mut degenerate = s.clone();
        degenerate.alpha_bars[2] = 0.0;
        let z = Tensor::zeros(&[1]);
        assert!(matches!(degenerate.predict_x0(&z, 2, &z), Err(Error::Numeric(_))));
    }

    #[test]
    fn loss_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let eps = Tensor::randn(&[4, 3, 8, 8], &mut rng);
        assert_eq!(diffusion_loss(&eps, &eps).unwrap(), 0.0);
        let shifted = eps.map(|v| v + 0.3);
        assert!((diffusion_loss(&eps, &shifted).unwrap() - 0.09).abs() < 1e-12);
        assert!(diffusion_loss(&eps, &Tensor::zeros(&[4, 3, 8, 7])).is_err());
    }

    #[test]
    fn strided_timesteps() {
        let s = sched();
        let full = s.strided(1000).unwrap();
        assert_eq!(full.len(), 1000);
        assert_eq!((full[0], full[999]), (1000, 1));
        let half = s.strided(500).unwrap();
        assert_eq!((half.len(), half[0], half[499]), (500, 1000, 1));
        assert_eq!(s.strided(1).unwrap(), vec![1000]);
        assert!(s.strided(0).is_err());
        assert!(s.strided(1001).is_err());
    }

    proptest! {
        #[test]
        fn forward_then_invert_roundtrips(seed in 0u64..1000, t in 1usize..=1000) {
            let s = sched();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z0 = Tensor::randn(&[1, 3, 4, 4], &mut rng);
            let eps = Tensor::randn(&[1, 3, 4, 4], &mut rng);
            let zt = s.forward_noise(&z0, t, &eps).unwrap();
            let back = s.predict_x0(&zt, t, &eps).unwrap();
            prop_assert!(back.zip_map(&z0, |a, b| (a - b).abs()).max() < 1e-5);
        }
    }
}
