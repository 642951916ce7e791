//! Self-trained controllable GAN with a normalized-ICA latent model learned
//! by factorizing higher-order moments of discriminator features.

pub mod cp_factor;
pub mod datasets;
pub mod error;
pub mod image;
pub mod losses;
pub mod lvm;
pub mod metrics;
pub mod moments;
pub mod runconfig;
pub mod nets;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
