pub mod checkpoint;
pub mod denoiser;
pub mod error;
pub mod finetune;
pub mod latent;
pub mod metrics;
pub mod reward;
pub mod sampler;
pub mod schedule;
pub mod tensor;
pub mod workbench;

pub use error::{Error, Result};
