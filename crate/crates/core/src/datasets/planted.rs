use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::lvm::{IcaLvm, SignalDist};
use crate::tensor::Matrix;

/// Ground-truth description of a planted ICA vector dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedIcaSpec {
    pub mixing: Matrix,
    pub noise_sigma: f64,
    pub signal_dist: SignalDist,
    pub samples: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct PlantedIca {
    /// `n × d_f` observations.
    pub samples: Matrix,
    /// `n × R` hidden signals.
    pub latents: Matrix,
    pub mixing: Matrix,
}

impl PlantedIcaSpec {
    pub fn feature_dim(&self) -> usize {
        self.mixing.rows()
    }

    pub fn rank(&self) -> usize {
        self.mixing.cols()
    }
}

/// A mixing matrix with unit-norm columns `e_j + c·noise`, full column rank
/// for moderate `spread`.
pub fn random_mixing(d_f: usize, rank: usize, spread: f64, seed: u64) -> Result<Matrix> {
    if rank == 0 || rank > d_f {
        return Err(Error::InvalidArgument(format!("rank {rank} for feature dim {d_f}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = Matrix::zeros(d_f, rank);
    for j in 0..rank {
        let mut col: Vec<f64> = (0..d_f).map(|_| spread * rng.random_range(-1.0..1.0)).collect();
        col[j] += 1.0;
        let n = crate::tensor::norm(&col);
        for (i, v) in col.iter().enumerate() {
            m.set(i, j, v / n);
        }
    }
    Ok(m)
}

pub fn planted_ica(spec: &PlantedIcaSpec) -> Result<PlantedIca> {
    if spec.samples == 0 {
        return dim_err("planted dataset needs at least one sample");
    }
    let lvm = IcaLvm::from_mixing(spec.mixing.clone(), spec.noise_sigma, spec.signal_dist)?;
    if lvm.is_rank_deficient() {
        return Err(Error::InvalidArgument("planted mixing matrix must have full column rank".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let latents = lvm.sample_latent_with(spec.samples, &mut rng);
    let samples = lvm.observe(&latents, &mut rng)?;
    Ok(PlantedIca {
        samples,
        latents,
        mixing: spec.mixing.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_noiseless_samples_equal_latents() {
        let spec = PlantedIcaSpec {
            mixing: Matrix::identity(4),
            noise_sigma: 0.0,
            signal_dist: SignalDist::default(),
            samples: 50,
            seed: 3,
        };
        let p = planted_ica(&spec).unwrap();
        assert_eq!(p.samples, p.latents);
        let q = planted_ica(&spec).unwrap();
        assert_eq!(p.samples, q.samples);
    }

    #[test]
    fn rejects_rank_deficient_truth() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
        let spec = PlantedIcaSpec {
            mixing: m,
            noise_sigma: 0.0,
            signal_dist: SignalDist::Uniform,
            samples: 5,
            seed: 0,
        };
        assert!(planted_ica(&spec).is_err());
    }
}
