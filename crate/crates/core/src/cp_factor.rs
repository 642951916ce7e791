//! Weighted symmetric CP factorization of the moment terms.
//!
//! The objective couples a rank-R symmetric matrix fit of `M1 + w1·M2` with a
//! rank-R symmetric tensor fit of `T1 + Σ_{k≥2} w_k T_k`, sharing the weights
//! `λ` and factors `a_j`, plus an orthogonality penalty `γ_o‖AᵀA − I‖²_F`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::moments::{MomentCotangent, SymmetricMomentSet};
use crate::tensor::{cp_reconstruct, cp_reconstruct2, dot, norm, Matrix, Tensor3};

/// Cross-term weights that turn the moment terms into the classical second
/// and third cumulants.
pub const CUMULANT_WEIGHTS: [f64; 5] = [-1.0, -1.0, -1.0, -1.0, 2.0];

pub const MAX_FACTOR_NORM: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CpModel {
    /// `w[0]` weighs `M2`; `w[1..5]` weigh `T2..T5`.
    pub w: [f64; 5],
    pub lambda: Vec<f64>,
    pub factors: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CpFitConfig {
    pub rank: usize,
    pub gamma_o: f64,
    pub steps: usize,
    pub lr: f64,
    /// Standard deviation of the initial factor entries; `None` means `1/√d`.
    pub init_scale: Option<f64>,
    pub seed: u64,
    /// Absolute loss below which the run stops early.
    pub tol: f64,
    /// Largest loss increase accepted between two steps.
    pub backtrack_tol: f64,
    /// Sort components by |λ| after fitting. Warm-started refits inside
    /// training turn this off so component order stays stable.
    pub canonicalize: bool,
}

impl Default for CpFitConfig {
    fn default() -> Self {
        Self {
            rank: 1,
            gamma_o: 0.1,
            steps: 2000,
            lr: 0.05,
            init_scale: None,
            seed: 0,
            tol: 1e-10,
            backtrack_tol: 0.0,
            canonicalize: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CpGradient {
    pub w: [f64; 5],
    pub lambda: Vec<f64>,
    pub factors: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct FitReport {
    pub model: CpModel,
    pub final_loss: f64,
    pub steps_taken: usize,
    /// Loss after every accepted step, starting with the initial loss.
    pub loss_history: Vec<f64>,
}

impl CpModel {
    pub fn new(w: [f64; 5], lambda: Vec<f64>, factors: Vec<Vec<f64>>) -> Result<Self> {
        let m = Self { w, lambda, factors };
        m.validate()?;
        Ok(m)
    }

    /// Gaussian factors with the given scale, unit weights, cumulant `w`.
    pub fn init_random(dim: usize, rank: usize, scale: f64, seed: u64) -> Result<Self> {
        if rank == 0 || dim == 0 {
            return Err(Error::InvalidArgument("rank and dim must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, scale).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let factors = (0..rank)
            .map(|_| (0..dim).map(|_| normal.sample(&mut rng)).collect())
            .collect();
        Self::new(CUMULANT_WEIGHTS, vec![1.0; rank], factors)
    }

    pub fn rank(&self) -> usize {
        self.lambda.len()
    }

    pub fn dim(&self) -> usize {
        self.factors.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda.is_empty() || self.lambda.len() != self.factors.len() {
            return dim_err(format!("{} weights for {} factors", self.lambda.len(), self.factors.len()));
        }
        let d = self.dim();
        if d == 0 || self.factors.iter().any(|f| f.len() != d) {
            return dim_err("factor lengths differ");
        }
        let finite = self.w.iter().chain(&self.lambda).chain(self.factors.iter().flatten()).all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite("cp model".into()));
        }
        Ok(())
    }

    /// Gram matrix `AᵀA` of the factors.
    pub fn gram(&self) -> Matrix {
        let r = self.rank();
        let mut g = Matrix::zeros(r, r);
        for i in 0..r {
            for j in 0..r {
                g.set(i, j, dot(&self.factors[i], &self.factors[j]));
            }
        }
        g
    }

    /// `‖AᵀA − I‖_F`.
    pub fn gram_residual(&self) -> f64 {
        self.gram().sub(&Matrix::identity(self.rank())).map(|m| m.frob_norm_sq().sqrt()).unwrap_or(f64::NAN)
    }

    /// Sorts components by `|λ|` descending. Ties keep their original order.
    pub fn canonicalize(&mut self) {
        let mut order: Vec<usize> = (0..self.rank()).collect();
        order.sort_by(|&a, &b| self.lambda[b].abs().total_cmp(&self.lambda[a].abs()));
        self.lambda = order.iter().map(|&i| self.lambda[i]).collect();
        self.factors = order.iter().map(|&i| self.factors[i].clone()).collect();
    }

    fn project(&mut self) {
        for f in &mut self.factors {
            let n = norm(f);
            if n > MAX_FACTOR_NORM {
                f.iter_mut().for_each(|v| *v *= MAX_FACTOR_NORM / n);
            }
        }
    }

    fn to_flat(&self) -> Vec<f64> {
        let mut v = self.w.to_vec();
        v.extend(&self.lambda);
        v.extend(self.factors.iter().flatten());
        v
    }

    fn from_flat(&self, flat: &[f64]) -> CpModel {
        let r = self.rank();
        let d = self.dim();
        let mut w = [0.0; 5];
        w.copy_from_slice(&flat[..5]);
        CpModel {
            w,
            lambda: flat[5..5 + r].to_vec(),
            factors: (0..r).map(|j| flat[5 + r + j * d..5 + r + (j + 1) * d].to_vec()).collect(),
        }
    }
}

impl CpGradient {
    fn to_flat(&self) -> Vec<f64> {
        let mut v = self.w.to_vec();
        v.extend(&self.lambda);
        v.extend(self.factors.iter().flatten());
        v
    }
}

fn check_dims(model: &CpModel, moments: &SymmetricMomentSet) -> Result<()> {
    model.validate()?;
    let d = moments.dim();
    if model.dim() != d || moments.m2.shape() != (d, d) || moments.t.iter().any(|t| t.dims() != [d, d, d]) {
        return dim_err(format!("model dim {} vs moments dim {}", model.dim(), d));
    }
    Ok(())
}

/// Residuals `R2 = M1 + w1 M2 − Σλaa` and `R3 = T1 + Σw_k T_k − Σλaaa`.
pub fn residuals(model: &CpModel, moments: &SymmetricMomentSet) -> Result<(Matrix, Tensor3)> {
    check_dims(model, moments)?;
    let recon2 = cp_reconstruct2(&model.lambda, &model.factors)?;
    let mut r2 = moments.m1.clone();
    for ((r, m2), c) in r2.as_mut_slice().iter_mut().zip(moments.m2.as_slice()).zip(recon2.as_slice()) {
        *r += model.w[0] * m2 - c;
    }
    let mut r3 = moments.t[0].clone();
    for k in 1..5 {
        r3.axpy(model.w[k], &moments.t[k])?;
    }
    r3.axpy(-1.0, &cp_reconstruct(&model.lambda, &model.factors)?)?;
    Ok((r2, r3))
}

fn ortho_penalty(model: &CpModel) -> f64 {
    let g = model.gram();
    let r = model.rank();
    let mut s = 0.0;
    for i in 0..r {
        for j in 0..r {
            let e = g.get(i, j) - if i == j { 1.0 } else { 0.0 };
            s += e * e;
        }
    }
    s
}

/// The factorization loss with orthogonality weight `gamma_o`.
pub fn loss_l(model: &CpModel, moments: &SymmetricMomentSet, gamma_o: f64) -> Result<f64> {
    let (r2, r3) = residuals(model, moments)?;
    let mut loss = r2.frob_norm_sq() + r3.frob_norm_sq();
    if gamma_o != 0.0 {
        loss += gamma_o * ortho_penalty(model);
    }
    Ok(loss)
}

/// `R(·, a, a)` + `R(a, ·, a)` + `R(a, a, ·)`.
fn contract_all_modes(r3: &Tensor3, a: &[f64]) -> Vec<f64> {
    let d = a.len();
    let mut out = vec![0.0; d];
    for i in 0..d {
        for j in 0..d {
            for k in 0..d {
                let v = r3.get(i, j, k);
                out[i] += v * a[j] * a[k];
                out[j] += v * a[i] * a[k];
                out[k] += v * a[i] * a[j];
            }
        }
    }
    out
}

fn full_contract(r3: &Tensor3, a: &[f64]) -> f64 {
    let d = a.len();
    let mut s = 0.0;
    for i in 0..d {
        for j in 0..d {
            let aij = a[i] * a[j];
            for k in 0..d {
                s += r3.get(i, j, k) * aij * a[k];
            }
        }
    }
    s
}

/// Analytic gradient of [`loss_l`] with respect to `w`, `λ` and the factors.
pub fn grad_loss_l(model: &CpModel, moments: &SymmetricMomentSet, gamma_o: f64) -> Result<CpGradient> {
    let (r2, r3) = residuals(model, moments)?;
    grad_from_residuals(model, moments, &r2, &r3, gamma_o)
}

fn grad_from_residuals(
    model: &CpModel,
    moments: &SymmetricMomentSet,
    r2: &Matrix,
    r3: &Tensor3,
    gamma_o: f64,
) -> Result<CpGradient> {
    let mut gw = [0.0; 5];
    gw[0] = 2.0 * dot(r2.as_slice(), moments.m2.as_slice());
    for k in 1..5 {
        gw[k] = 2.0 * dot(r3.as_slice(), moments.t[k].as_slice());
    }
    let r2s = r2.add(&r2.transpose())?;
    let r = model.rank();
    let mut glambda = vec![0.0; r];
    let mut gfactors = Vec::with_capacity(r);
    let gram = if gamma_o != 0.0 { Some(model.gram()) } else { None };
    for j in 0..r {
        let a = &model.factors[j];
        let r2a = r2.matvec(a)?;
        glambda[j] = -2.0 * dot(a, &r2a) - 2.0 * full_contract(r3, a);
        let r2sa = r2s.matvec(a)?;
        let c3 = contract_all_modes(r3, a);
        let mut g: Vec<f64> = r2sa.iter().zip(&c3).map(|(x, y)| -2.0 * model.lambda[j] * (x + y)).collect();
        if let Some(gram) = &gram {
            for l in 0..r {
                let e = gram.get(j, l) - if j == l { 1.0 } else { 0.0 };
                for (gi, al) in g.iter_mut().zip(&model.factors[l]) {
                    *gi += 4.0 * gamma_o * e * al;
                }
            }
        }
        gfactors.push(g);
    }
    Ok(CpGradient {
        w: gw,
        lambda: glambda,
        factors: gfactors,
    })
}

/// Cotangents of [`loss_l`] with respect to every moment term, for pulling the
/// loss back onto the features that produced the moments.
pub fn moment_cotangent(model: &CpModel, moments: &SymmetricMomentSet) -> Result<MomentCotangent> {
    let (r2, r3) = residuals(model, moments)?;
    let g2 = r2.scaled(2.0);
    let g3 = r3.scaled(2.0);
    Ok(MomentCotangent {
        m2: g2.scaled(model.w[0]),
        m1: g2,
        t: [
            g3.clone(),
            g3.scaled(model.w[1]),
            g3.scaled(model.w[2]),
            g3.scaled(model.w[3]),
            g3.scaled(model.w[4]),
        ],
    })
}

/// Fits a model from a fresh random initialization.
pub fn fit(moments: &SymmetricMomentSet, config: &CpFitConfig) -> Result<FitReport> {
    let d = moments.dim();
    if config.rank == 0 || config.rank > d {
        return Err(Error::InvalidArgument(format!("rank {} must lie in 1..={d}", config.rank)));
    }
    let scale = config.init_scale.unwrap_or(1.0 / (d as f64).sqrt());
    let init = CpModel::init_random(d, config.rank, scale, config.seed)?;
    fit_from(init, moments, config)
}

/// Gradient descent with per-parameter RMS step scaling and backtracking.
///
/// A candidate step is accepted only if it raises the loss by at most
/// `backtrack_tol`; otherwise the step size is halved and retried.
pub fn fit_from(init: CpModel, moments: &SymmetricMomentSet, config: &CpFitConfig) -> Result<FitReport> {
    if !(config.lr > 0.0) || config.gamma_o < 0.0 {
        return Err(Error::InvalidArgument("lr must be positive and gamma_o nonnegative".into()));
    }
    check_dims(&init, moments)?;
    const BETA: f64 = 0.99;
    const EPS: f64 = 1e-12;
    const MAX_HALVINGS: usize = 40;

    let mut model = init;
    model.project();
    let mut loss = loss_l(&model, moments, config.gamma_o)?;
    if !loss.is_finite() {
        return Err(Error::Divergence { step: 0, loss });
    }
    let mut history = vec![loss];
    let mut theta = model.to_flat();
    let mut v = vec![0.0; theta.len()];
    let mut lr = config.lr;
    let mut steps = 0;
    let mut t = 0i32;
    'outer: while steps < config.steps {
        if loss <= config.tol {
            break;
        }
        let g = grad_loss_l(&model, moments, config.gamma_o)?.to_flat();
        t += 1;
        for (vi, gi) in v.iter_mut().zip(&g) {
            *vi = BETA * *vi + (1.0 - BETA) * gi * gi;
        }
        let bias = 1.0 - BETA.powi(t);
        let mut halvings = 0;
        loop {
            let cand: Vec<f64> = theta
                .iter()
                .zip(&g)
                .zip(&v)
                .map(|((p, gi), vi)| p - lr * gi / ((vi / bias).sqrt() + EPS))
                .collect();
            let mut cm = model.from_flat(&cand);
            cm.project();
            let cl = loss_l(&cm, moments, config.gamma_o)?;
            if cl.is_finite() && cl <= loss + config.backtrack_tol {
                model = cm;
                theta = model.to_flat();
                loss = cl;
                history.push(loss);
                lr = (lr * 1.2).min(config.lr);
                break;
            }
            halvings += 1;
            lr *= 0.5;
            if halvings > MAX_HALVINGS {
                if !cl.is_finite() && !loss.is_finite() {
                    return Err(Error::Divergence { step: steps, loss: cl });
                }
                // no descent direction at representable step sizes
                break 'outer;
            }
        }
        steps += 1;
    }
    if !loss.is_finite() {
        return Err(Error::Divergence { step: steps, loss });
    }
    if config.canonicalize {
        model.canonicalize();
    }
    Ok(FitReport {
        model,
        final_loss: loss,
        steps_taken: steps,
        loss_history: history,
    })
}

/// Best absolute cosine similarity matching between two factor sets, found by
/// exhaustive search over assignments. Returns the matched cosines in the
/// order of `truth`.
pub fn match_factors(found: &[Vec<f64>], truth: &[Vec<f64>]) -> Vec<f64> {
    let n = truth.len();
    let cos: Vec<Vec<f64>> = truth
        .iter()
        .map(|t| found.iter().map(|f| (dot(t, f) / (norm(t) * norm(f)).max(1e-300)).abs()).collect())
        .collect();
    let mut best = (f64::NEG_INFINITY, vec![]);
    let mut perm: Vec<usize> = (0..found.len()).collect();
    permute_search(&mut perm, 0, n, &cos, &mut best);
    best.1
}

fn permute_search(perm: &mut Vec<usize>, k: usize, n: usize, cos: &[Vec<f64>], best: &mut (f64, Vec<f64>)) {
    if k == n {
        let vals: Vec<f64> = (0..n).map(|i| cos[i][perm[i]]).collect();
        let s: f64 = vals.iter().sum();
        if s > best.0 {
            *best = (s, vals);
        }
        return;
    }
    for i in k..perm.len() {
        perm.swap(k, i);
        permute_search(perm, k + 1, n, cos, best);
        perm.swap(k, i);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::outer3;
    use rand::Rng;

    fn planted(lambda: &[f64], factors: &[Vec<f64>]) -> SymmetricMomentSet {
        SymmetricMomentSet::from_targets(
            cp_reconstruct2(lambda, factors).unwrap(),
            cp_reconstruct(lambda, factors).unwrap(),
        )
        .unwrap()
    }

    fn random_moments(rng: &mut ChaCha8Rng, d: usize) -> SymmetricMomentSet {
        let mut acc = crate::moments::MomentAccumulator::new(d);
        for _ in 0..40 {
            let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.5)).collect();
            acc.push(&v).unwrap();
        }
        acc.finalize().unwrap()
    }

    fn random_model(rng: &mut ChaCha8Rng, d: usize, r: usize) -> CpModel {
        let mut w = [0.0; 5];
        w.iter_mut().for_each(|x| *x = rng.random_range(-1.5..1.0));
        CpModel::new(
            w,
            (0..r).map(|_| rng.random_range(-1.0..2.0)).collect(),
            (0..r).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect(),
        )
        .unwrap()
    }

    /// Straightforward evaluation of the objective from its definition.
    fn loss_oracle(m: &CpModel, mo: &SymmetricMomentSet, gamma_o: f64) -> f64 {
        let d = m.dim();
        let mut l2 = 0.0;
        for i in 0..d {
            for j in 0..d {
                let mut v = mo.m1.get(i, j) + m.w[0] * mo.m2.get(i, j);
                for (lam, a) in m.lambda.iter().zip(&m.factors) {
                    v -= lam * a[i] * a[j];
                }
                l2 += v * v;
            }
        }
        let mut l3 = 0.0;
        for i in 0..d {
            for j in 0..d {
                for k in 0..d {
                    let mut v = mo.t[0].get(i, j, k);
                    for q in 1..5 {
                        v += m.w[q] * mo.t[q].get(i, j, k);
                    }
                    for (lam, a) in m.lambda.iter().zip(&m.factors) {
                        v -= lam * a[i] * a[j] * a[k];
                    }
                    l3 += v * v;
                }
            }
        }
        let mut lo = 0.0;
        for p in 0..m.rank() {
            for q in 0..m.rank() {
                let g: f64 = (0..d).map(|i| m.factors[p][i] * m.factors[q][i]).sum();
                let e = g - if p == q { 1.0 } else { 0.0 };
                lo += e * e;
            }
        }
        l2 + l3 + gamma_o * lo
    }

    #[test]
    fn zero_model_gives_moment_norms() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mo = random_moments(&mut rng, 4);
        let m = CpModel::new([0.0; 5], vec![0.0], vec![vec![0.3, 0.1, 0.0, 0.2]]).unwrap();
        let l = loss_l(&m, &mo, 0.0).unwrap();
        let expect = mo.m1.frob_norm_sq() + mo.t[0].frob_norm_sq();
        assert!((l - expect).abs() < 1e-12 * expect);
    }

    #[test]
    fn planted_optimum_has_zero_loss_and_gradient() {
        let lambda = vec![2.0, -0.7];
        let factors = vec![vec![0.6, 0.8, 0.0], vec![0.0, 0.3, -1.0]];
        let mo = planted(&lambda, &factors);
        let m = CpModel::new([0.4, -1.0, 0.2, 0.0, 3.0], lambda, factors).unwrap();
        assert!(loss_l(&m, &mo, 0.0).unwrap() < 1e-28);
        let g = grad_loss_l(&m, &mo, 0.0).unwrap();
        assert!(g.to_flat().iter().all(|v| v.abs() <= 1e-9));
    }

    #[test]
    fn loss_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mo = random_moments(&mut rng, 5);
        let m = random_model(&mut rng, 5, 3);
        for gamma_o in [0.0, 0.3] {
            let a = loss_l(&m, &mo, gamma_o).unwrap();
            let b = loss_oracle(&m, &mo, gamma_o);
            assert!((a - b).abs() <= 1e-12 * b.abs(), "{a} vs {b}");
        }
    }

    fn fd_check(m: &CpModel, mo: &SymmetricMomentSet, gamma_o: f64, tol: f64) {
        let g = grad_loss_l(m, mo, gamma_o).unwrap().to_flat();
        let theta = m.to_flat();
        let h = 1e-5;
        for i in 0..theta.len() {
            let mut p = theta.clone();
            p[i] += h;
            let up = loss_oracle(&m.from_flat(&p), mo, gamma_o);
            p[i] -= 2.0 * h;
            let dn = loss_oracle(&m.from_flat(&p), mo, gamma_o);
            let fd = (up - dn) / (2.0 * h);
            let rel = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-6);
            assert!(rel <= tol, "coord {i}: fd {fd} analytic {}", g[i]);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mo = random_moments(&mut rng, 6);
        let m = random_model(&mut rng, 6, 3);
        fd_check(&m, &mo, 0.0, 1e-5);
        fd_check(&m, &mo, 0.25, 1e-5);
    }

    #[test]
    fn gradient_under_moment_scaling() {
        // scaling every moment by c is checked against finite differences at
        // the scaled problem
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mo = random_moments(&mut rng, 6);
        let m = random_model(&mut rng, 6, 3);
        let scaled = mo.scaled(3.5);
        fd_check(&m, &scaled, 0.1, 1e-5);
        // the w-gradient is bilinear in (residual, moment): at λ=0 it scales by c²
        let mut z = m.clone();
        z.lambda.iter_mut().for_each(|l| *l = 0.0);
        let g1 = grad_loss_l(&z, &mo, 0.0).unwrap();
        let g2 = grad_loss_l(&z, &scaled, 0.0).unwrap();
        for k in 0..5 {
            assert!((g2.w[k] - 3.5 * 3.5 * g1.w[k]).abs() <= 1e-10 * g2.w[k].abs().max(1.0));
        }
    }

    #[test]
    fn permutation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mo = random_moments(&mut rng, 4);
        let m = random_model(&mut rng, 4, 3);
        let mut p = m.clone();
        p.lambda.swap(0, 2);
        p.factors.swap(0, 2);
        let (a, b) = (loss_l(&m, &mo, 0.2).unwrap(), loss_l(&p, &mo, 0.2).unwrap());
        assert!((a - b).abs() <= 1e-12 * a);
    }

    #[test]
    fn sign_flip_keeps_tensor_term_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mo = random_moments(&mut rng, 4);
        let m = random_model(&mut rng, 4, 2);
        let mut f = m.clone();
        f.lambda[1] = -f.lambda[1];
        f.factors[1].iter_mut().for_each(|v| *v = -*v);
        let t_a = cp_reconstruct(&m.lambda, &m.factors).unwrap();
        let t_b = cp_reconstruct(&f.lambda, &f.factors).unwrap();
        assert!(crate::tensor::frob_dist(&t_a, &t_b).unwrap() < 1e-12);
        let (la, lb) = (loss_l(&m, &mo, 0.0).unwrap(), loss_l(&f, &mo, 0.0).unwrap());
        assert!((la - lb).abs() > 1e-6);
    }

    #[test]
    fn fit_recovers_rank_one() {
        let e1 = vec![1.0, 0.0, 0.0];
        let mo = SymmetricMomentSet::from_targets(
            Matrix::outer(&e1, &e1).scaled(2.0),
            outer3(&e1, &e1, &e1).unwrap().scaled(2.0),
        )
        .unwrap();
        let cfg = CpFitConfig {
            rank: 1,
            gamma_o: 0.0,
            seed: 3,
            ..Default::default()
        };
        let rep = fit(&mo, &cfg).unwrap();
        assert!(rep.final_loss <= 1e-6, "loss {}", rep.final_loss);
        assert!((rep.model.lambda[0] - 2.0).abs() < 1e-2);
        let a = &rep.model.factors[0];
        assert!(a[0].abs() > 0.99 && a[1].abs() < 1e-2);
    }

    fn orthonormal(rng: &mut ChaCha8Rng, d: usize, r: usize) -> Vec<Vec<f64>> {
        let mut out: Vec<Vec<f64>> = Vec::new();
        while out.len() < r {
            let mut v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            for u in &out {
                let p = dot(&v, u);
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
            }
            let n = norm(&v);
            out.push(v.into_iter().map(|x| x / n).collect());
        }
        out
    }

    #[test]
    fn fit_recovers_planted_orthogonal_rank_four() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let factors = orthonormal(&mut rng, 10, 4);
        let lambda = vec![3.0, 2.2, 1.5, 0.8];
        let mo = planted(&lambda, &factors);
        let cfg = CpFitConfig {
            rank: 4,
            gamma_o: 0.0,
            seed: 1,
            ..Default::default()
        };
        let rep = fit(&mo, &cfg).unwrap();
        let cos = match_factors(&rep.model.factors, &factors);
        assert!(cos.iter().all(|&c| c >= 0.99), "cosines {cos:?}, loss {}", rep.final_loss);
    }

    #[test]
    fn orthogonality_weight_shrinks_gram_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let factors = orthonormal(&mut rng, 10, 4);
        let lambda = vec![3.0, 2.2, 1.5, 0.8];
        let mo = planted(&lambda, &factors);
        let base = CpFitConfig {
            rank: 4,
            gamma_o: 0.0,
            seed: 2,
            steps: 600,
            ..Default::default()
        };
        let plain = fit(&mo, &base).unwrap();
        let ortho = fit(&mo, &CpFitConfig { gamma_o: 0.1, ..base }).unwrap();
        assert!(
            ortho.model.gram_residual() < plain.model.gram_residual(),
            "{} vs {}",
            ortho.model.gram_residual(),
            plain.model.gram_residual()
        );
    }

    #[test]
    fn fit_is_deterministic_and_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mo = random_moments(&mut rng, 5);
        let cfg = CpFitConfig {
            rank: 3,
            steps: 200,
            seed: 4,
            ..Default::default()
        };
        let a = fit(&mo, &cfg).unwrap();
        let b = fit(&mo, &cfg).unwrap();
        assert_eq!(a.model, b.model);
        assert!(a.loss_history.windows(2).all(|w| w[1] <= w[0] + cfg.backtrack_tol));
    }

    #[test]
    fn fit_rejects_rank_above_dim() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mo = random_moments(&mut rng, 3);
        let cfg = CpFitConfig { rank: 4, ..Default::default() };
        assert!(matches!(fit(&mo, &cfg), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn canonical_order_by_weight_magnitude() {
        let mut m = CpModel::new([0.0; 5], vec![0.5, -3.0, 1.0], vec![vec![1.0], vec![2.0], vec![3.0]]).unwrap();
        m.canonicalize();
        assert_eq!(m.lambda, vec![-3.0, 1.0, 0.5]);
        assert_eq!(m.factors, vec![vec![2.0], vec![3.0], vec![1.0]]);
    }
}
