mod common;

use hdrlift_core::diffusion::{
    checkpoint, sample, sample_batch, LatentDiffusion, TrainConfig, TrainableMask, Trainer,
};
use hdrlift_core::encoders::AblationFlags;
use hdrlift_core::material::LossWeights;
use hdrlift_core::tape::Tape;
use hdrlift_core::{Error, Tensor, ToneCurve};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn trained(steps: usize, mask: TrainableMask) -> Trainer {
    let model = LatentDiffusion::new(common::tiny(AblationFlags::FULL), 1).unwrap();
    let (ldrs, hdrs) = common::pairs(2, 16, 0);
    let batch = model.batch(&ldrs, &hdrs).unwrap();
    let mut tr = Trainer::new(model, TrainConfig { lr: 1e-2, mask, ..Default::default() }).unwrap();
    for _ in 0..steps {
        tr.step(&batch).unwrap();
    }
    tr
}

#[test]
fn checkpoint_roundtrip_is_bit_exact() {
    let tr = trained(3, TrainableMask::default());
    let bytes = checkpoint::to_bytes(&tr.model, Some(&tr)).unwrap();
    let back = checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back.state, tr.state);
    assert_eq!(back.train.as_ref(), Some(&tr.config));
    assert_eq!(back.model.latent_scale.to_bits(), tr.model.latent_scale.to_bits());
    for id in tr.model.store.ids() {
        let (a, b) = (tr.model.store.value(id), back.model.store.value(id));
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()), "{}", tr.model.store.name(id));
    }
    let restored = back.into_trainer().unwrap();
    let again = checkpoint::to_bytes(&restored.model, Some(&restored)).unwrap();
    assert_eq!(again, bytes);
}

#[test]
fn tampered_frozen_encoder_is_rejected() {
    let tr = trained(1, TrainableMask::default());
    let mut bytes = checkpoint::to_bytes(&tr.model, None).unwrap();
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let header: serde_json::Value = serde_json::from_slice(&bytes[20..20 + hlen]).unwrap();
    let entry = header["tensors"]
        .as_array()
        .unwrap()
        .iter()
        .find(|t| t["name"].as_str().unwrap().starts_with("vae.ldr_enc."))
        .unwrap();
    let at = 20 + hlen + 8 * entry["offset"].as_u64().unwrap() as usize;
    let v = f64::from_le_bytes(bytes[at..at + 8].try_into().unwrap()) + 0.5;
    bytes[at..at + 8].copy_from_slice(&v.to_le_bytes());
    assert!(matches!(checkpoint::from_bytes(&bytes), Err(Error::Checkpoint(m)) if m.contains("checksum")));
}

#[test]
fn bad_containers_are_rejected() {
    let tr = trained(0, TrainableMask::default());
    let bytes = checkpoint::to_bytes(&tr.model, None).unwrap();
    assert!(checkpoint::from_bytes(&bytes[..bytes.len() - 8]).is_err());
    assert!(checkpoint::from_bytes(b"not a checkpoint at all").is_err());
    let mut v = bytes.clone();
    v[8] = 9;
    assert!(checkpoint::from_bytes(&v).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn frozen_encoder_never_moves(steps in 1usize..4, unet: bool, cond: bool, encoder: bool, decoder: bool) {
        let mask = TrainableMask { unet, cond, encoder, decoder };
        let before = LatentDiffusion::new(common::tiny(AblationFlags::FULL), 1).unwrap().ldr_encoder_checksum();
        let tr = trained(steps, mask);
        prop_assert_eq!(tr.model.ldr_encoder_checksum(), before);
        prop_assert!(tr.verify_frozen().is_ok());
    }
}

#[test]
fn mask_cannot_unfreeze_the_ldr_encoder() {
    assert!(TrainableMask::parse("unet,ldr_enc").is_err());
    let m = TrainableMask::parse("unet,dec").unwrap();
    assert_eq!((m.unet, m.cond, m.encoder, m.decoder), (true, false, false, true));
}

#[test]
fn zero_lambda_objective_is_the_denoising_loss() {
    let model = LatentDiffusion::new(common::tiny(AblationFlags::FULL), 2).unwrap();
    let (ldrs, hdrs) = common::pairs(2, 16, 5);
    let batch = model.batch(&ldrs, &hdrs).unwrap();
    let eps = Tensor::randn(&[2, 2, 4, 4], &mut ChaCha8Rng::seed_from_u64(0));
    let curve = ToneCurve::default();
    let mut tape = Tape::new();
    let v = model.loss_graph(&mut tape, &batch, &[5, 700], &eps, LossWeights::new(0.0).unwrap(), &curve).unwrap();
    assert_eq!(tape.value(v.l_full).item(), tape.value(v.l_d).item());
    let mut tape = Tape::new();
    let w = model.loss_graph(&mut tape, &batch, &[5, 700], &eps, LossWeights::new(0.2).unwrap(), &curve).unwrap();
    let (d, m, f) = (tape.value(w.l_d).item(), tape.value(w.l_mat).item(), tape.value(w.l_full).item());
    assert!(d >= 0.0 && m >= 0.0);
    assert!((f - (d + 0.2 * m)).abs() < 1e-12);
}

#[test]
fn sampling_is_finite_for_full_and_strided_schedules() {
    let model = LatentDiffusion::new(common::tiny(AblationFlags::FULL), 3).unwrap();
    let (ldrs, _) = common::pairs(1, 16, 9);
    let t = model.schedule.timesteps();
    for steps in [t, t / 2, 1] {
        let out = sample(&model, &ldrs[0], steps, 4).unwrap();
        assert!(out.data().iter().all(|v| v.is_finite() && *v >= 0.0), "steps {steps}");
        assert_eq!((out.height(), out.width()), (16, 16));
    }
    assert!(sample(&model, &ldrs[0], 0, 4).is_err());
    assert!(sample(&model, &ldrs[0], t + 1, 4).is_err());
}

#[test]
fn seed_and_condition_change_the_output() {
    let model = LatentDiffusion::new(common::tiny(AblationFlags::FULL), 3).unwrap();
    let (ldrs, _) = common::pairs(2, 16, 20);
    let a = sample(&model, &ldrs[0], 20, 1).unwrap();
    assert_eq!(a, sample(&model, &ldrs[0], 20, 1).unwrap());
    assert_ne!(a, sample(&model, &ldrs[0], 20, 2).unwrap());
    assert_ne!(a, sample(&model, &ldrs[1], 20, 1).unwrap());

    // the condition tokens alone move the noise estimate
    let mut tape = Tape::new();
    let zt = tape.constant(Tensor::randn(&[1, 2, 4, 4], &mut ChaCha8Rng::seed_from_u64(1)));
    let zl = tape.constant(Tensor::zeros(&[1, 2, 4, 4]));
    let c0 = model.extract_conditions(&ldrs[..1]).unwrap();
    let c1 = model.extract_conditions(&ldrs[1..]).unwrap();
    let t0 = model.condition_tokens(&mut tape, &c0).unwrap();
    let t1 = model.condition_tokens(&mut tape, &c1).unwrap();
    let e0 = model.predict_noise(&mut tape, zt, zl, &[100], t0).unwrap();
    let e1 = model.predict_noise(&mut tape, zt, zl, &[100], t1).unwrap();
    assert_ne!(tape.value(e0), tape.value(e1));
}

#[test]
fn batched_sampling_matches_single_images() {
    let model = LatentDiffusion::new(common::tiny(AblationFlags::FULL), 3).unwrap();
    let (ldrs, _) = common::pairs(3, 16, 30);
    let batch = sample_batch(&model, &ldrs, 10, &[7, 8, 9]).unwrap();
    for (i, l) in ldrs.iter().enumerate() {
        assert_eq!(batch[i], sample(&model, l, 10, 7 + i as u64).unwrap());
    }
}

#[test]
fn every_ladder_row_trains() {
    let (ldrs, hdrs) = common::pairs(2, 16, 40);
    for (label, flags) in AblationFlags::ladder() {
        let model = LatentDiffusion::new(common::tiny(flags), 0).unwrap();
        let batch = model.batch(&ldrs, &hdrs).unwrap();
        let mut tr = Trainer::new(model, TrainConfig::default()).unwrap();
        let s = tr.step(&batch).unwrap();
        assert!(s.l_full.is_finite() && s.l_d >= 0.0 && s.l_mat >= 0.0, "{label}");
    }
}

#[test]
fn decode_stays_finite_for_extreme_latents() {
    let model = LatentDiffusion::new(common::tiny(AblationFlags::FULL), 1).unwrap();
    let (c, f) = (model.config.vae.latent_channels, model.config.vae.downsample());
    let side = model.config.resolution / f;
    for v in [-1e6, -40.0, 40.0, 1e6] {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::full(&[1, c, side, side], v));
        let x = model.decode(&mut tape, z);
        let gain = model.config.log_gain;
        let bad: Vec<f64> = tape.value(x).data().iter().copied().filter(|x| !(x.is_finite() && (0.0..=gain + 2.0 + 1e-6).contains(x))).take(3).collect();
        assert!(bad.is_empty(), "{v}: {bad:?}");
    }
}
