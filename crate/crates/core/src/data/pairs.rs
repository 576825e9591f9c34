use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{mpsc, Arc};
use std::thread::JoinHandle;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::hdr::{normalize_radiance, read_raw_float, read_rgbe_file, HdrImage, LdrImage};

use super::{resize_hdr, resize_ldr, synth_exposure, DatasetManifest, ExposureParams};

/// A loaded sample: LDR input and max-normalised HDR target at the working
/// resolution. `scale` maps the target back to scene radiance.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingPair {
    pub id: String,
    pub ldr: LdrImage,
    pub hdr: HdrImage,
    pub scale: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EntryError {
    pub index: usize,
    pub path: PathBuf,
    pub message: String,
}

impl std::fmt::Display for EntryError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "entry {} ({}): {}", self.index, self.path.display(), self.message)
    }
}

#[derive(Clone, Debug)]
pub struct PairOptions {
    pub height: usize,
    pub width: usize,
    pub exposures: Vec<ExposureParams>,
    pub seed: u64,
    pub epoch: u64,
    pub shuffle: bool,
    pub workers: usize,
}

impl PairOptions {
    pub fn new(resolution: usize, seed: u64) -> Self {
        Self { height: resolution, width: resolution, exposures: Vec::new(), seed, epoch: 0, shuffle: true, workers: 1 }
    }
}

/// SplitMix-style hash of two words, used to derive per-step seeds.
pub fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Reads an HDR file by extension: `.hrf`/`.raw` raw float, anything else
/// Radiance RGBE.
pub fn load_hdr(path: &Path) -> Result<HdrImage> {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("hrf" | "raw") => {
            let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
            read_raw_float(std::io::BufReader::new(f))
        }
        _ => read_rgbe_file(path),
    }
}

struct Job {
    manifest: DatasetManifest,
    opts: PairOptions,
    augment: bool,
}

impl Job {
    fn load(&self, index: usize) -> std::result::Result<TrainingPair, EntryError> {
        let e = &self.manifest.entries[index];
        let fail = |path: &Path, err: Error| EntryError { index, path: path.to_path_buf(), message: err.to_string() };
        let ldr_path = self.manifest.resolve(&e.ldr);
        let hdr_path = self.manifest.resolve(&e.hdr);
        let ldr = LdrImage::read_png(&ldr_path).map_err(|err| fail(&ldr_path, err))?;
        let hdr = load_hdr(&hdr_path).map_err(|err| fail(&hdr_path, err))?;
        let (h, w) = (self.opts.height, self.opts.width);
        let mut ldr = resize_ldr(&ldr, h, w).map_err(|err| fail(&ldr_path, err))?;
        let hdr = resize_hdr(&hdr, h, w).map_err(|err| fail(&hdr_path, err))?;
        let mut id = e.id();
        if self.augment {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(mix(self.opts.seed, self.opts.epoch), index as u64));
            let k = rng.random_range(0..self.opts.exposures.len());
            ldr = synth_exposure(&ldr, self.opts.exposures[k]);
            id = format!("{id}#x{k}");
        }
        let norm = normalize_radiance(&hdr);
        Ok(TrainingPair { id, ldr, hdr: norm.image, scale: norm.scale })
    }
}

/// Iterator over the pairs of one epoch. Delivery order depends only on
/// `(seed, epoch)`, never on the worker count.
pub struct PairIter {
    job: Arc<Job>,
    order: Arc<Vec<usize>>,
    next: usize,
    pending: BTreeMap<usize, std::result::Result<TrainingPair, EntryError>>,
    rx: Option<mpsc::Receiver<(usize, std::result::Result<TrainingPair, EntryError>)>>,
    handles: Vec<JoinHandle<()>>,
    stop: Arc<AtomicUsize>,
    errors: usize,
}

impl PairIter {
    /// Entry indices in delivery order.
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn error_count(&self) -> usize {
        self.errors
    }

    /// Drains the iterator, separating loaded pairs from per-entry failures.
    pub fn partition(self) -> (Vec<TrainingPair>, Vec<EntryError>) {
        let mut ok = Vec::new();
        let mut bad = Vec::new();
        for r in self {
            match r {
                Ok(p) => ok.push(p),
                Err(e) => bad.push(e),
            }
        }
        if !bad.is_empty() {
            log::warn!("{} of {} entries failed to load", bad.len(), bad.len() + ok.len());
        }
        (ok, bad)
    }
}

impl Iterator for PairIter {
    type Item = std::result::Result<TrainingPair, EntryError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.order.len() {
            return None;
        }
        let pos = self.next;
        let item = match &self.rx {
            None => self.job.load(self.order[pos]),
            Some(rx) => loop {
                if let Some(r) = self.pending.remove(&pos) {
                    break r;
                }
                let (p, r) = rx.recv().expect("prefetch worker exited early");
                self.pending.insert(p, r);
            },
        };
        self.next += 1;
        if item.is_err() {
            self.errors += 1;
        }
        Some(item)
    }
}

impl Drop for PairIter {
    fn drop(&mut self) {
        self.stop.store(usize::MAX / 2, Ordering::SeqCst);
        self.rx = None;
        for h in self.handles.drain(..) {
            let _ = h.join();
        }
    }
}

/// Loads, resizes and normalises every manifest entry once, in a seeded
/// order. With a non-empty exposure list and single-exposure entries, each
/// LDR is re-exposed with one seeded choice from the list.
pub fn make_pairs(m: &DatasetManifest, opts: &PairOptions) -> Result<PairIter> {
    if opts.height == 0 || opts.width == 0 {
        return Err(Error::Range("pair resolution must be at least 1x1".into()));
    }
    let mut order: Vec<usize> = (0..m.len()).collect();
    if opts.shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(opts.seed, opts.epoch)));
    }
    let augment = !opts.exposures.is_empty() && m.entries.iter().all(|e| e.exposure_tag.is_none());
    let job = Arc::new(Job { manifest: m.clone(), opts: opts.clone(), augment });
    let order = Arc::new(order);
    let stop = Arc::new(AtomicUsize::new(0));
    let mut it = PairIter {
        job: job.clone(),
        order: order.clone(),
        next: 0,
        pending: BTreeMap::new(),
        rx: None,
        handles: Vec::new(),
        stop: stop.clone(),
        errors: 0,
    };
    if opts.workers > 1 && order.len() > 1 {
        let (tx, rx) = mpsc::sync_channel(opts.workers * 2);
        for _ in 0..opts.workers {
            let (tx, job, order, cursor) = (tx.clone(), job.clone(), order.clone(), stop.clone());
            it.handles.push(std::thread::spawn(move || loop {
                let pos = cursor.fetch_add(1, Ordering::SeqCst);
                if pos >= order.len() {
                    break;
                }
                if tx.send((pos, job.load(order[pos]))).is_err() {
                    break;
                }
            }));
        }
        it.rx = Some(rx);
    }
    Ok(it)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ManifestEntry;
    use crate::hdr::write_rgbe_file;

    fn fixture(n: usize) -> (tempfile::TempDir, DatasetManifest) {
        let dir = tempfile::tempdir().unwrap();
        let mut entries = Vec::new();
        for i in 0..n {
            let hdr = HdrImage::from_fn(8, 8, |y, x, c| 0.1 + (i + y + x + c) as f64 * 0.05).unwrap();
            let ldr = LdrImage::from_fn(8, 8, |y, x, c| ((i * 20 + y * 8 + x + c) % 256) as u8).unwrap();
            write_rgbe_file(&hdr, &dir.path().join(format!("{i}.hdr"))).unwrap();
            ldr.write_png(&dir.path().join(format!("{i}.png"))).unwrap();
            entries.push(ManifestEntry { ldr: format!("{i}.png").into(), hdr: format!("{i}.hdr").into(), exposure_tag: None });
        }
        let m = DatasetManifest::new("fx", dir.path(), entries).unwrap();
        (dir, m)
    }

    #[test]
    fn every_entry_once_and_normalised() {
        let (_d, m) = fixture(6);
        let (pairs, errs) = make_pairs(&m, &PairOptions::new(4, 1)).unwrap().partition();
        assert!(errs.is_empty());
        let mut ids: Vec<_> = pairs.iter().map(|p| p.id.clone()).collect();
        ids.sort();
        assert_eq!(ids, (0..6).map(|i| i.to_string()).collect::<Vec<_>>());
        for p in &pairs {
            assert_eq!((p.hdr.height(), p.ldr.width()), (4, 4));
            assert!((p.hdr.max_value() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn worker_count_does_not_change_order() {
        let (_d, m) = fixture(9);
        let mut opts = PairOptions::new(4, 7);
        opts.exposures = vec![ExposureParams::new(1.0, 0.0).unwrap(), ExposureParams::new(2.0, -10.0).unwrap()];
        let single: Vec<_> = make_pairs(&m, &opts).unwrap().map(|r| r.unwrap()).collect();
        opts.workers = 4;
        let multi: Vec<_> = make_pairs(&m, &opts).unwrap().map(|r| r.unwrap()).collect();
        assert_eq!(single, multi);
        opts.epoch = 1;
        let next_epoch: Vec<_> = make_pairs(&m, &opts).unwrap().map(|r| r.unwrap().id).collect();
        assert_ne!(single.iter().map(|p| p.id.clone()).collect::<Vec<_>>(), next_epoch);
    }

    #[test]
    fn unreadable_entry_is_reported_and_skipped() {
        let (d, m) = fixture(4);
        std::fs::write(d.path().join("2.hdr"), b"garbage").unwrap();
        let mut opts = PairOptions::new(4, 0);
        opts.workers = 2;
        let (ok, bad) = make_pairs(&m, &opts).unwrap().partition();
        assert_eq!((ok.len(), bad.len()), (3, 1));
        assert!(bad[0].path.ends_with("2.hdr"));
    }

    #[test]
    fn early_drop_joins_workers() {
        let (_d, m) = fixture(8);
        let mut opts = PairOptions::new(4, 0);
        opts.workers = 3;
        let mut it = make_pairs(&m, &opts).unwrap();
        assert!(it.next().unwrap().is_ok());
        drop(it);
    }
}
