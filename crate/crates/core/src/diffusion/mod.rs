//! Latent diffusion: autoencoder, denoiser, noise schedule, training and
//! sampling.

pub mod checkpoint;
pub mod model;
pub mod sample;
pub mod schedule;
pub mod train;
pub mod unet;
pub mod vae;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use model::{Batch, LatentDiffusion, LossVars, ModelConfig, TrainableMask};
pub use sample::{sample, sample_batch};
pub use schedule::{diffusion_loss, NoiseSchedule, ScheduleConfig};
pub use train::{latent_scale_for, pretrain_autoencoder, AutoencoderConfig, StepStats, TrainConfig, TrainState, Trainer};
pub use unet::{timestep_features, UNet, UNetConfig};
pub use vae::{Decoder, Encoder, VaeConfig};
