//! Single-image HDR reconstruction with a conditioned latent diffusion model.

pub mod data;
pub mod diffusion;
pub mod encoders;
pub mod error;
pub mod hdr;
pub mod material;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use hdr::{HdrImage, LdrImage, ToneCurve};
pub use tensor::Tensor;
