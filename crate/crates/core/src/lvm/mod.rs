//! Latent variable models over discriminator features: the normalized ICA
//! model assembled from a CP fit, and a small feature-space VAE.

mod ica;
mod vae;

pub use ica::{max_normalize, max_normalize_rows, IcaLvm, SignalDist};
pub use vae::{ElboNodes, FeatureVae};

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::Matrix;

/// Source of latent codes for the generator.
pub trait LatentSampler {
    fn latent_dim(&self) -> usize;

    /// Raw draws before max-normalization.
    fn sample_signals(&self, n: usize, rng: &mut ChaCha8Rng) -> Matrix;

    /// Generator-ready codes in `[−1, 1]`.
    fn sample_codes(&self, n: usize, rng: &mut ChaCha8Rng) -> Matrix {
        let mut h = self.sample_signals(n, rng);
        max_normalize_rows(&mut h);
        h
    }
}

impl LatentSampler for IcaLvm {
    fn latent_dim(&self) -> usize {
        IcaLvm::latent_dim(self)
    }

    fn sample_signals(&self, n: usize, rng: &mut ChaCha8Rng) -> Matrix {
        self.sample_latent_with(n, rng)
    }
}

impl LatentSampler for FeatureVae {
    fn latent_dim(&self) -> usize {
        FeatureVae::latent_dim(self)
    }

    fn sample_signals(&self, n: usize, rng: &mut ChaCha8Rng) -> Matrix {
        self.sample_latent_with(n, rng)
    }
}

/// Standard normal prior of the given width.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GaussianPrior(pub usize);

impl LatentSampler for GaussianPrior {
    fn latent_dim(&self) -> usize {
        self.0
    }

    fn sample_signals(&self, n: usize, rng: &mut ChaCha8Rng) -> Matrix {
        let data = (0..n * self.0).map(|_| StandardNormal.sample(rng)).collect();
        Matrix::from_vec(n, self.0, data).expect("shape")
    }
}
