use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::DatasetManifest;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitConfig {
    pub train_fraction: f64,
    pub seed: u64,
}

impl SplitConfig {
    pub fn new(train_fraction: f64, seed: u64) -> Result<Self> {
        if !(train_fraction > 0.0 && train_fraction < 1.0) {
            return Err(Error::Split(format!("train fraction must lie in (0, 1), got {train_fraction}")));
        }
        Ok(Self { train_fraction, seed })
    }
}

/// Seeded shuffle, then the first `round(fraction * n)` entries train. Both
/// sides are kept non-empty; each side preserves manifest order.
pub fn split_dataset(m: &DatasetManifest, cfg: SplitConfig) -> Result<(DatasetManifest, DatasetManifest)> {
    let cfg = SplitConfig::new(cfg.train_fraction, cfg.seed)?;
    let n = m.len();
    if n < 2 {
        return Err(Error::Split(format!("{} has {n} entries, need at least 2", m.name)));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let n_train = ((cfg.train_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut train = idx[..n_train].to_vec();
    let mut test = idx[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok((m.subset(format!("{}-train", m.name), &train), m.subset(format!("{}-test", m.name), &test)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ManifestEntry;
    use std::collections::HashSet;

    fn manifest(n: usize) -> DatasetManifest {
        let entries = (0..n)
            .map(|i| ManifestEntry { ldr: format!("{i}.png").into(), hdr: format!("{i}.hdr").into(), exposure_tag: None })
            .collect();
        DatasetManifest::new("m", ".", entries).unwrap()
    }

    #[test]
    fn eighty_twenty() {
        let (tr, te) = split_dataset(&manifest(10), SplitConfig::new(0.8, 3).unwrap()).unwrap();
        assert_eq!((tr.len(), te.len()), (8, 2));
    }

    #[test]
    fn partition_is_disjoint_and_exhaustive() {
        let m = manifest(37);
        let (tr, te) = split_dataset(&m, SplitConfig::new(0.8, 11).unwrap()).unwrap();
        let a: HashSet<_> = tr.entries.iter().collect();
        let b: HashSet<_> = te.entries.iter().collect();
        assert!(a.is_disjoint(&b));
        assert_eq!(a.len() + b.len(), 37);
        assert_eq!(tr.len(), 30);
    }

    #[test]
    fn deterministic_per_seed() {
        let m = manifest(1000);
        let s1 = split_dataset(&m, SplitConfig::new(0.8, 1).unwrap()).unwrap();
        let s1b = split_dataset(&m, SplitConfig::new(0.8, 1).unwrap()).unwrap();
        let s2 = split_dataset(&m, SplitConfig::new(0.8, 2).unwrap()).unwrap();
        assert_eq!(s1.0.to_text(), s1b.0.to_text());
        assert_eq!(s1.1.to_text(), s1b.1.to_text());
        assert_ne!(s1.0.to_text(), s2.0.to_text());
    }

    #[test]
    fn too_small_or_bad_fraction() {
        assert!(matches!(split_dataset(&manifest(1), SplitConfig { train_fraction: 0.8, seed: 0 }), Err(Error::Split(_))));
        assert!(SplitConfig::new(1.0, 0).is_err());
        assert!(SplitConfig::new(0.0, 0).is_err());
        let (tr, te) = split_dataset(&manifest(2), SplitConfig::new(0.8, 0).unwrap()).unwrap();
        assert_eq!((tr.len(), te.len()), (1, 1));
    }
}
