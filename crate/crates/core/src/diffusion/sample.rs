use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::model::LatentDiffusion;
use crate::error::{Error, Result};
use crate::hdr::{HdrImage, LdrImage};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Strided ancestral sampling for a batch of LDR images, one seed each.
/// Every image draws its noise from its own generator, so results do not
/// depend on how images are grouped. Output is normalised radiance.
pub fn sample_batch(model: &LatentDiffusion, ldrs: &[LdrImage], steps: usize, seeds: &[u64]) -> Result<Vec<HdrImage>> {
    if ldrs.len() != seeds.len() || ldrs.is_empty() {
        return Err(Error::Data(format!("{} images with {} seeds", ldrs.len(), seeds.len())));
    }
    let ts = model.schedule.strided(steps)?;
    let (h, w) = (ldrs[0].height(), ldrs[0].width());
    if ldrs.iter().any(|l| l.height() != h || l.width() != w) {
        return Err(Error::Shape("all images in a sampling batch must share a size".into()));
    }
    let n = ldrs.len();
    let ldr = Tensor::cat_batch(&ldrs.iter().map(LdrImage::to_unit_tensor).collect::<Vec<_>>());
    let zl = model.ldr_latents(&ldr)?;
    let inputs = model.extract_conditions(ldrs)?;
    let tokens = {
        let mut tape = Tape::new();
        let t = model.condition_tokens(&mut tape, &inputs)?;
        tape.value(t).clone()
    };
    let item_shape = zl.shape()[1..].to_vec();
    let mut rngs: Vec<ChaCha8Rng> = seeds.iter().map(|&s| ChaCha8Rng::seed_from_u64(s)).collect();
    let mut z = Tensor::cat_batch(
        &rngs
            .iter_mut()
            .map(|r| {
                let mut s = vec![1];
                s.extend_from_slice(&item_shape);
                Tensor::randn(&s, r)
            })
            .collect::<Vec<_>>(),
    );
    let clip = model.config.latent_clip;
    let inner = z.numel() / n;
    for (i, &t) in ts.iter().enumerate() {
        let t_prev = ts.get(i + 1).copied().unwrap_or(0);
        let eps_hat = {
            let mut tape = Tape::new();
            let zt = tape.constant(z.clone());
            let zlv = tape.constant(zl.clone());
            let tok = tape.constant(tokens.clone());
            let e = model.predict_noise(&mut tape, zt, zlv, &vec![t; n], tok)?;
            tape.value(e).clone()
        };
        let x0 = model.schedule.predict_x0(&z, t, &eps_hat)?.map(|v| v.clamp(-clip, clip));
        if t_prev == 0 {
            z = x0;
            break;
        }
        let ab_t = model.schedule.alpha_bar(t);
        let ab_p = model.schedule.alpha_bar(t_prev);
        let alpha = ab_t / ab_p;
        let beta = 1.0 - alpha;
        let c0 = ab_p.sqrt() * beta / (1.0 - ab_t);
        let ct = alpha.sqrt() * (1.0 - ab_p) / (1.0 - ab_t);
        let sigma = (beta * (1.0 - ab_p) / (1.0 - ab_t)).sqrt();
        let mut next = x0.zip_map(&z, |a, b| c0 * a + ct * b);
        for (k, r) in rngs.iter_mut().enumerate() {
            let noise = Tensor::randn(&[inner], r);
            for (v, e) in next.data_mut()[k * inner..(k + 1) * inner].iter_mut().zip(noise.data()) {
                *v += sigma * e;
            }
        }
        z = next;
    }
    let mut tape = Tape::new();
    let zv = tape.constant(z);
    let x = model.decode(&mut tape, zv);
    let out = tape.value(x);
    if !out.all_finite() {
        return Err(Error::Numeric("sampled image is not finite".into()));
    }
    (0..n).map(|i| HdrImage::from_tensor(out, i)).collect()
}

/// Samples one image.
pub fn sample(model: &LatentDiffusion, ldr: &LdrImage, steps: usize, seed: u64) -> Result<HdrImage> {
    Ok(sample_batch(model, std::slice::from_ref(ldr), steps, &[seed])?.remove(0))
}
