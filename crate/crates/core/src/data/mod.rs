//! Dataset ingestion: manifests, camera simulation, exposure synthesis,
//! deterministic splits, resizing and pair loading.

mod exposure;
mod manifest;
mod pairs;
mod resize;
mod split;
mod synthetic;

pub use exposure::{simulate_ldr, synth_exposure, ExposureParams};
pub use manifest::{select_single_exposure, DatasetManifest, ExposurePick, ManifestEntry};
pub use pairs::{load_hdr, make_pairs, mix, EntryError, PairIter, PairOptions, TrainingPair};
pub use resize::{resize_hdr, resize_ldr, resize_planes};
pub use split::{split_dataset, SplitConfig};
pub use synthetic::synthetic_scene;
