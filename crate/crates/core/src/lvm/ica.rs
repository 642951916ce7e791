use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cp_factor::CpModel;
use crate::error::{dim_err, Error, Result};
use crate::tensor::Matrix;

/// Distribution of each hidden signal, always supported on `[−1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SignalDist {
    /// `2·Beta(α, β) − 1`.
    SkewedBeta { alpha: f64, beta: f64 },
    Uniform,
}

impl Default for SignalDist {
    fn default() -> Self {
        SignalDist::SkewedBeta { alpha: 2.0, beta: 5.0 }
    }
}

impl SignalDist {
    pub fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        match *self {
            SignalDist::SkewedBeta { alpha, beta } => {
                let b = Beta::new(alpha, beta).expect("valid beta parameters");
                2.0 * b.sample(rng) - 1.0
            }
            SignalDist::Uniform => rng.random_range(-1.0..=1.0),
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            SignalDist::SkewedBeta { alpha, beta } => 2.0 * alpha / (alpha + beta) - 1.0,
            SignalDist::Uniform => 0.0,
        }
    }

    pub fn variance(&self) -> f64 {
        match *self {
            SignalDist::SkewedBeta { alpha, beta } => {
                let s = alpha + beta;
                4.0 * alpha * beta / (s * s * (s + 1.0))
            }
            SignalDist::Uniform => 1.0 / 3.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            SignalDist::SkewedBeta { alpha, beta } if !(alpha > 0.0 && beta > 0.0) => {
                Err(Error::InvalidArgument(format!("beta parameters must be positive, got ({alpha}, {beta})")))
            }
            _ => Ok(()),
        }
    }
}

/// Normalized-ICA model `y = M h + ε` with `h_j ∈ [−1, 1]` independent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IcaLvm {
    mixing: Matrix,
    noise_sigma: f64,
    signal_dist: SignalDist,
    pinv: Matrix,
    rank_deficient: bool,
    /// Subtract a fresh noise draw before inverting; off by default.
    pub subtract_noise_on_infer: bool,
}

const PINV_EPS: f64 = 1e-12;

impl IcaLvm {
    pub fn from_mixing(mixing: Matrix, noise_sigma: f64, signal_dist: SignalDist) -> Result<Self> {
        if mixing.rows() == 0 || mixing.cols() == 0 {
            return dim_err("mixing matrix must be nonempty");
        }
        if !mixing.is_finite() {
            return Err(Error::NonFinite("mixing matrix".into()));
        }
        if !(noise_sigma >= 0.0) {
            return Err(Error::InvalidArgument(format!("noise sigma {noise_sigma}")));
        }
        signal_dist.validate()?;
        let svd = mixing.to_nalgebra().svd(true, true);
        let smax = svd.singular_values.max();
        let rank = svd.rank(PINV_EPS * smax.max(1e-300));
        let rank_deficient = rank < mixing.cols();
        if rank_deficient {
            log::warn!("mixing matrix has rank {rank} < {} columns; using pseudo-inverse", mixing.cols());
        }
        let pinv = svd
            .pseudo_inverse(PINV_EPS * smax.max(1e-300))
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        Ok(Self {
            pinv: Matrix::from_nalgebra(&pinv),
            mixing,
            noise_sigma,
            signal_dist,
            rank_deficient,
            subtract_noise_on_infer: false,
        })
    }

    /// Column `j` of the mixing matrix is `λ_j a_j`.
    pub fn build_mixing(cp: &CpModel, noise_sigma: f64, signal_dist: SignalDist) -> Result<Self> {
        cp.validate()?;
        let (d, r) = (cp.dim(), cp.rank());
        let mut m = Matrix::zeros(d, r);
        for (j, (l, a)) in cp.lambda.iter().zip(&cp.factors).enumerate() {
            for i in 0..d {
                m.set(i, j, l * a[i]);
            }
        }
        Self::from_mixing(m, noise_sigma, signal_dist)
    }

    pub fn mixing(&self) -> &Matrix {
        &self.mixing
    }

    pub fn pinv(&self) -> &Matrix {
        &self.pinv
    }

    pub fn noise_sigma(&self) -> f64 {
        self.noise_sigma
    }

    pub fn signal_dist(&self) -> SignalDist {
        self.signal_dist
    }

    pub fn is_rank_deficient(&self) -> bool {
        self.rank_deficient
    }

    pub fn latent_dim(&self) -> usize {
        self.mixing.cols()
    }

    pub fn feature_dim(&self) -> usize {
        self.mixing.rows()
    }

    /// `n × R` matrix of i.i.d. signal draws.
    pub fn sample_latent(&self, n: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.sample_latent_with(n, &mut rng)
    }

    pub fn sample_latent_with<R: Rng>(&self, n: usize, rng: &mut R) -> Matrix {
        let r = self.latent_dim();
        let data = (0..n * r).map(|_| self.signal_dist.sample(rng)).collect();
        Matrix::from_vec(n, r, data).expect("shape")
    }

    /// `M h + ε` for each row of `h`.
    pub fn observe<R: Rng>(&self, h: &Matrix, rng: &mut R) -> Result<Matrix> {
        if h.cols() != self.latent_dim() {
            return dim_err(format!("latent width {} vs {}", h.cols(), self.latent_dim()));
        }
        let mut y = h.matmul(&self.mixing.transpose())?;
        if self.noise_sigma > 0.0 {
            let normal = Normal::new(0.0, self.noise_sigma).expect("sigma");
            y.as_mut_slice().iter_mut().for_each(|v| *v += normal.sample(rng));
        }
        Ok(y)
    }

    /// `h = M† Φ`.
    pub fn infer_latent(&self, phi: &[f64]) -> Result<Vec<f64>> {
        if phi.len() != self.feature_dim() {
            return dim_err(format!("feature of length {} vs {}", phi.len(), self.feature_dim()));
        }
        self.pinv.matvec(phi)
    }

    /// Row-wise inference; honours [`Self::subtract_noise_on_infer`].
    pub fn infer_rows<R: Rng>(&self, phi: &Matrix, rng: &mut R) -> Result<Matrix> {
        if phi.cols() != self.feature_dim() {
            return dim_err(format!("feature width {} vs {}", phi.cols(), self.feature_dim()));
        }
        let mut x = phi.clone();
        if self.subtract_noise_on_infer && self.noise_sigma > 0.0 {
            let normal = Normal::new(0.0, self.noise_sigma).expect("sigma");
            x.as_mut_slice().iter_mut().for_each(|v| *v -= normal.sample(rng));
        }
        x.matmul(&self.pinv.transpose())
    }
}

/// Divides a code by its largest absolute entry so that it lies in `[−1, 1]`.
/// The zero vector is returned unchanged.
pub fn max_normalize(h: &mut [f64]) {
    let m = h.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if m > 0.0 && m.is_finite() {
        h.iter_mut().for_each(|v| *v /= m);
    }
}

pub fn max_normalize_rows(h: &mut Matrix) {
    for r in 0..h.rows() {
        max_normalize(h.row_mut(r));
    }
}
