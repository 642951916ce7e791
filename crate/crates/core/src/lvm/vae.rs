use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::nets::autodiff::{GradStore, Graph, NodeId, ParamId, ParamStore, RmsOptimizer};
use crate::tensor::Matrix;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct VaeIds {
    enc_w: ParamId,
    enc_b: ParamId,
    mu_w: ParamId,
    mu_b: ParamId,
    lv_w: ParamId,
    lv_b: ParamId,
    dec_w: ParamId,
    dec_b: ParamId,
    out_w: ParamId,
    out_b: ParamId,
}

/// Gaussian VAE over feature vectors with one tanh hidden layer on each side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVae {
    pub params: ParamStore,
    pub optimizer: RmsOptimizer,
    feature_dim: usize,
    latent_dim: usize,
    ids: VaeIds,
}

/// Graph nodes of one negative-ELBO evaluation.
#[derive(Debug, Clone, Copy)]
pub struct ElboNodes {
    pub loss: NodeId,
    pub kl: NodeId,
    pub mean: NodeId,
    pub log_var: NodeId,
    pub sample: NodeId,
}

fn init(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let s = (1.0 / rows as f64).sqrt();
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| s * rng.sample::<f64, _>(StandardNormal)).collect()).expect("shape")
}

impl FeatureVae {
    pub fn new(feature_dim: usize, latent_dim: usize, hidden: usize, lr: f64, seed: u64) -> Result<Self> {
        if feature_dim == 0 || latent_dim == 0 || hidden == 0 {
            return Err(Error::Config("VAE sizes must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let ids = VaeIds {
            enc_w: p.add("vae.enc.w", init(&mut rng, feature_dim, hidden))?,
            enc_b: p.add("vae.enc.b", Matrix::zeros(1, hidden))?,
            mu_w: p.add("vae.mu.w", init(&mut rng, hidden, latent_dim))?,
            mu_b: p.add("vae.mu.b", Matrix::zeros(1, latent_dim))?,
            lv_w: p.add("vae.logvar.w", init(&mut rng, hidden, latent_dim).scaled(0.1))?,
            lv_b: p.add("vae.logvar.b", Matrix::zeros(1, latent_dim))?,
            dec_w: p.add("vae.dec.w", init(&mut rng, latent_dim, hidden))?,
            dec_b: p.add("vae.dec.b", Matrix::zeros(1, hidden))?,
            out_w: p.add("vae.out.w", init(&mut rng, hidden, feature_dim))?,
            out_b: p.add("vae.out.b", Matrix::zeros(1, feature_dim))?,
        };
        let optimizer = RmsOptimizer::new(&p, lr, 0.99);
        Ok(Self {
            params: p,
            optimizer,
            feature_dim,
            latent_dim,
            ids,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    fn affine(g: &mut Graph, x: NodeId, w: ParamId, b: ParamId) -> Result<NodeId> {
        let wn = g.param(w);
        let bn = g.param(b);
        let m = g.matmul(x, wn)?;
        g.add_row(m, bn)
    }

    /// Encoder mean and log-variance.
    pub fn encode_graph(&self, g: &mut Graph, phi: NodeId) -> Result<(NodeId, NodeId)> {
        if g.value(phi).cols() != self.feature_dim {
            return dim_err(format!("feature width {} vs {}", g.value(phi).cols(), self.feature_dim));
        }
        let h = Self::affine(g, phi, self.ids.enc_w, self.ids.enc_b)?;
        let h = g.tanh(h);
        let mu = Self::affine(g, h, self.ids.mu_w, self.ids.mu_b)?;
        let lv = Self::affine(g, h, self.ids.lv_w, self.ids.lv_b)?;
        Ok((mu, lv))
    }

    pub fn decode_graph(&self, g: &mut Graph, h: NodeId) -> Result<NodeId> {
        let z = Self::affine(g, h, self.ids.dec_w, self.ids.dec_b)?;
        let z = g.tanh(z);
        Self::affine(g, z, self.ids.out_w, self.ids.out_b)
    }

    /// Batch-mean negative ELBO with unit-variance Gaussian likelihood, using
    /// the supplied standard-normal draws `eps` for the reparameterization.
    pub fn neg_elbo_graph(&self, g: &mut Graph, phi: NodeId, eps: Matrix) -> Result<ElboNodes> {
        let n = g.value(phi).rows();
        if eps.shape() != (n, self.latent_dim) {
            return dim_err(format!("noise shape {:?} vs ({n}, {})", eps.shape(), self.latent_dim));
        }
        if n == 0 {
            return Err(Error::EmptyDataset("empty VAE batch".into()));
        }
        let (mu, lv) = self.encode_graph(g, phi)?;
        if !g.value(mu).is_finite() || !g.value(lv).is_finite() {
            return Err(Error::NonFinite("VAE encoder output".into()));
        }
        let half = g.scale(lv, 0.5);
        let std = g.exp(half);
        let e = g.input(eps);
        let noise = g.hadamard(std, e)?;
        let sample = g.add(mu, noise)?;
        let recon = self.decode_graph(g, sample)?;
        let diff = g.sub(recon, phi)?;
        let sq = g.square(diff);
        let rec = g.sum(sq);
        let rec = g.scale(rec, 0.5 / n as f64);
        // KL(N(μ, σ²) ‖ N(0, I)) = ½ Σ (μ² + σ² − 1 − ln σ²)
        let mu2 = g.square(mu);
        let var = g.exp(lv);
        let a = g.add(mu2, var)?;
        let a = g.sub(a, lv)?;
        let a = g.add_scalar(a, -1.0);
        let kl = g.sum(a);
        let kl = g.scale(kl, 0.5 / n as f64);
        let loss = g.add(rec, kl)?;
        let loss = g.add_scalar(loss, 0.5 * self.feature_dim as f64 * LN_2PI);
        Ok(ElboNodes {
            loss,
            kl,
            mean: mu,
            log_var: lv,
            sample,
        })
    }

    fn noise(&self, n: usize, rng: &mut ChaCha8Rng) -> Matrix {
        let data = (0..n * self.latent_dim).map(|_| StandardNormal.sample(rng)).collect();
        Matrix::from_vec(n, self.latent_dim, data).expect("shape")
    }

    /// Negative ELBO of a single feature vector and one reparameterized sample.
    pub fn vae_elbo(&self, phi: &[f64], seed: u64) -> Result<(f64, Vec<f64>)> {
        let m = Matrix::from_vec(1, phi.len(), phi.to_vec())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let eps = self.noise(1, &mut rng);
        let mut g = Graph::new(&self.params);
        let p = g.input(m);
        let out = self.neg_elbo_graph(&mut g, p, eps)?;
        Ok((g.scalar(out.loss), g.value(out.sample).as_slice().to_vec()))
    }

    /// One optimizer step on a feature batch; returns the pre-step loss.
    pub fn train_step(&mut self, phi: &Matrix, rng: &mut ChaCha8Rng) -> Result<f64> {
        let eps = self.noise(phi.rows(), rng);
        let mut grads = GradStore::for_store(&self.params);
        let loss = {
            let mut g = Graph::new(&self.params);
            let p = g.input(phi.clone());
            let out = self.neg_elbo_graph(&mut g, p, eps)?;
            g.backward(out.loss, &mut grads)?;
            g.scalar(out.loss)
        };
        grads.clip_global_norm(10.0);
        let ids: Vec<ParamId> = self.params.ids().collect();
        self.optimizer.apply(&mut self.params, &grads, &ids);
        Ok(loss)
    }

    /// Encoder means, used as the inferred latent code.
    pub fn infer_rows(&self, phi: &Matrix) -> Result<Matrix> {
        let mut g = Graph::new(&self.params);
        let p = g.input(phi.clone());
        let (mu, _) = self.encode_graph(&mut g, p)?;
        Ok(g.value(mu).clone())
    }

    /// Prior draws `N(0, I)`.
    pub fn sample_latent_with<R: Rng>(&self, n: usize, rng: &mut R) -> Matrix {
        let data = (0..n * self.latent_dim).map(|_| StandardNormal.sample(rng)).collect();
        Matrix::from_vec(n, self.latent_dim, data).expect("shape")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_encoder(vae: &mut FeatureVae) {
        for id in [vae.ids.mu_w, vae.ids.mu_b, vae.ids.lv_w, vae.ids.lv_b] {
            vae.params.get_mut(id).as_mut_slice().fill(0.0);
        }
    }

    #[test]
    fn prior_matching_encoder_has_zero_kl() {
        let mut vae = FeatureVae::new(6, 3, 5, 1e-3, 1).unwrap();
        zero_encoder(&mut vae);
        let mut g = Graph::new(&vae.params);
        let p = g.input(Matrix::filled(4, 6, 0.3));
        let out = vae.neg_elbo_graph(&mut g, p, Matrix::filled(4, 3, 0.7)).unwrap();
        assert_eq!(g.scalar(out.kl), 0.0);
    }

    #[test]
    fn perfect_reconstruction_leaves_likelihood_constant() {
        let mut vae = FeatureVae::new(6, 3, 5, 1e-3, 2).unwrap();
        zero_encoder(&mut vae);
        let phi = [0.1, -0.2, 0.3, 0.4, -0.5, 0.6];
        vae.params.get_mut(vae.ids.out_w).as_mut_slice().fill(0.0);
        vae.params.get_mut(vae.ids.out_b).as_mut_slice().copy_from_slice(&phi);
        let (loss, _) = vae.vae_elbo(&phi, 0).unwrap();
        let expect = 0.5 * 6.0 * (2.0 * std::f64::consts::PI).ln();
        assert!((loss - expect).abs() < 1e-12, "{loss} vs {expect}");
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let vae = FeatureVae::new(6, 3, 5, 1e-3, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let phi = Matrix::from_vec(4, 6, (0..24).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let eps = vae.noise(4, &mut rng);
        let eval = |store: &ParamStore, grads: Option<&mut GradStore>| {
            let v = FeatureVae {
                params: store.clone(),
                ..vae.clone()
            };
            let mut g = Graph::new(&v.params);
            let p = g.input(phi.clone());
            let out = v.neg_elbo_graph(&mut g, p, eps.clone()).unwrap();
            if let Some(gr) = grads {
                g.backward(out.loss, gr).unwrap();
            }
            g.scalar(out.loss)
        };
        let mut grads = GradStore::for_store(&vae.params);
        eval(&vae.params, Some(&mut grads));
        for id in vae.params.ids() {
            for i in 0..vae.params.get(id).as_slice().len() {
                let mut s = vae.params.clone();
                s.get_mut(id).as_mut_slice()[i] += 1e-6;
                let up = eval(&s, None);
                s.get_mut(id).as_mut_slice()[i] -= 2e-6;
                let dn = eval(&s, None);
                let fd = (up - dn) / 2e-6;
                let an = grads.get(id).as_slice()[i];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-5);
                assert!(rel <= 1e-4, "{}[{i}] fd {fd} an {an}", vae.params.name(id));
            }
        }
    }

    #[test]
    fn training_lowers_loss() {
        let mut vae = FeatureVae::new(4, 2, 8, 1e-2, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let phi = Matrix::from_vec(64, 4, (0..256).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let first = vae.train_step(&phi, &mut rng).unwrap();
        let mut last = first;
        for _ in 0..300 {
            last = vae.train_step(&phi, &mut rng).unwrap();
        }
        assert!(last < first, "{last} !< {first}");
        assert_eq!(vae.infer_rows(&phi).unwrap().shape(), (64, 2));
    }
}
