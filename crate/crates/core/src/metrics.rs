//! Controllability and quality measures: per-element perturbation sweeps
//! with MAE and a perceptual proxy, a Fréchet distance on probe features,
//! and factor consistency against a supervised oracle on synthetic data.
//!
//! LPIPS and Inception features are replaced by a fixed random-weight
//! multi-scale convolutional probe, so values are only comparable between
//! runs that share the probe seed.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::image::{Image, ImageShape};
use crate::lvm::LatentSampler;
use crate::nets::model::ImageGenerator;
use crate::tensor::Matrix;

pub fn mae(a: &Image, b: &Image) -> Result<f64> {
    if a.shape != b.shape {
        return dim_err(format!("MAE of {:?} and {:?}", a.shape, b.shape));
    }
    Ok(mae_slices(&a.data, &b.data))
}

fn mae_slices(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len().max(1) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ProbeLayer {
    /// Input downsampling factor.
    pool: usize,
    /// `out × in × 3 × 3`.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

/// Seed-pinned random feature extractor. Every layer is
/// `relu(conv3x3(avgpool_p(x)))` applied directly to the image at a
/// different scale, so pre-activations are linear in the input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerceptualProbe {
    pub shape: ImageShape,
    pub channels: usize,
    pub seed: u64,
    layers: Vec<ProbeLayer>,
}

pub const DEFAULT_PROBE_SEED: u64 = 0x5eed_0f_9a11;

impl PerceptualProbe {
    pub fn new(shape: ImageShape, channels: usize, seed: u64) -> Result<Self> {
        if shape.is_empty() || channels == 0 {
            return Err(Error::InvalidArgument("probe needs a nonempty image and channels".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = (1.0 / (9 * shape.channels) as f64).sqrt();
        let wn = Normal::new(0.0, std).expect("std");
        let bn = Normal::new(0.0, 0.1).expect("std");
        let mut layers = Vec::new();
        let mut pool = 1;
        while shape.height / pool >= 4 && shape.width / pool >= 4 && layers.len() < 4 {
            layers.push(ProbeLayer {
                pool,
                weights: (0..channels * shape.channels * 9).map(|_| wn.sample(&mut rng)).collect(),
                bias: (0..channels).map(|_| bn.sample(&mut rng)).collect(),
            });
            pool *= 2;
        }
        if layers.is_empty() {
            layers.push(ProbeLayer {
                pool: 1,
                weights: (0..channels * shape.channels * 9).map(|_| wn.sample(&mut rng)).collect(),
                bias: (0..channels).map(|_| bn.sample(&mut rng)).collect(),
            });
        }
        Ok(Self {
            shape,
            channels,
            seed,
            layers,
        })
    }

    pub fn default_for(shape: ImageShape) -> Self {
        Self::new(shape, 8, DEFAULT_PROBE_SEED).expect("nonempty shape")
    }

    /// Feature maps per layer, each `channels × h × w` flattened.
    pub fn feature_maps(&self, img: &[f64]) -> Result<Vec<(ImageShape, Vec<f64>)>> {
        if img.len() != self.shape.len() {
            return dim_err(format!("probe expects {} values, got {}", self.shape.len(), img.len()));
        }
        let ImageShape { channels: c_in, height, width } = self.shape;
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let p = layer.pool;
            let (h, w) = (height / p, width / p);
            let mut pooled = vec![0.0; c_in * h * w];
            let inv = 1.0 / (p * p) as f64;
            for c in 0..c_in {
                for y in 0..h {
                    for x in 0..w {
                        let mut s = 0.0;
                        for dy in 0..p {
                            let row = (c * height + y * p + dy) * width + x * p;
                            s += img[row..row + p].iter().sum::<f64>();
                        }
                        pooled[(c * h + y) * w + x] = s * inv;
                    }
                }
            }
            let mut maps = vec![0.0; self.channels * h * w];
            for o in 0..self.channels {
                for y in 0..h {
                    for x in 0..w {
                        let mut acc = layer.bias[o];
                        for c in 0..c_in {
                            for ky in 0..3 {
                                let sy = y as isize + ky as isize - 1;
                                if sy < 0 || sy >= h as isize {
                                    continue;
                                }
                                for kx in 0..3 {
                                    let sx = x as isize + kx as isize - 1;
                                    if sx < 0 || sx >= w as isize {
                                        continue;
                                    }
                                    acc += layer.weights[((o * c_in + c) * 3 + ky) * 3 + kx] * pooled[(c * h + sy as usize) * w + sx as usize];
                                }
                            }
                        }
                        maps[(o * h + y) * w + x] = acc.max(0.0);
                    }
                }
            }
            out.push((ImageShape::new(self.channels, h, w), maps));
        }
        Ok(out)
    }

    /// Mean over layers of the size-normalized L2 distance between maps.
    pub fn distance(&self, a: &[f64], b: &[f64]) -> Result<f64> {
        let fa = self.feature_maps(a)?;
        let fb = self.feature_maps(b)?;
        let total: f64 = fa
            .iter()
            .zip(&fb)
            .map(|((_, x), (_, y))| (x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / x.len() as f64).sqrt())
            .sum();
        Ok(total / fa.len() as f64)
    }

    /// Summary vector for Fréchet statistics: channel means of every layer
    /// plus a 2×2 spatial pooling of the coarsest layer.
    pub fn embedding(&self, img: &[f64]) -> Result<Vec<f64>> {
        let maps = self.feature_maps(img)?;
        let mut v = Vec::new();
        for (s, m) in &maps {
            let n = s.height * s.width;
            for c in 0..s.channels {
                v.push(m[c * n..(c + 1) * n].iter().sum::<f64>() / n as f64);
            }
        }
        let (s, m) = maps.last().expect("at least one layer");
        let (hh, hw) = (s.height.div_ceil(2), s.width.div_ceil(2));
        for c in 0..s.channels {
            for qy in 0..2 {
                for qx in 0..2 {
                    let (mut acc, mut cnt) = (0.0, 0usize);
                    for y in (qy * hh)..((qy + 1) * hh).min(s.height) {
                        for x in (qx * hw)..((qx + 1) * hw).min(s.width) {
                            acc += m[(c * s.height + y) * s.width + x];
                            cnt += 1;
                        }
                    }
                    v.push(if cnt > 0 { acc / cnt as f64 } else { 0.0 });
                }
            }
        }
        Ok(v)
    }

    pub fn embed_rows(&self, images: &Matrix) -> Result<Matrix> {
        let rows: Vec<Vec<f64>> = (0..images.rows()).map(|r| self.embedding(images.row(r))).collect::<Result<_>>()?;
        Matrix::from_rows(&rows)
    }
}

pub fn perceptual_proxy(a: &Image, b: &Image, probe: &PerceptualProbe) -> Result<f64> {
    if a.shape != b.shape || a.shape != probe.shape {
        return dim_err("perceptual proxy on mismatched shapes");
    }
    probe.distance(&a.data, &b.data)
}

fn mean_cov(x: &Matrix) -> (Vec<f64>, DMatrix<f64>) {
    let (n, d) = x.shape();
    let mut mu = vec![0.0; d];
    for r in 0..n {
        for (m, v) in mu.iter_mut().zip(x.row(r)) {
            *m += v;
        }
    }
    mu.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = DMatrix::zeros(d, d);
    for r in 0..n {
        let c: Vec<f64> = x.row(r).iter().zip(&mu).map(|(v, m)| v - m).collect();
        for i in 0..d {
            for j in i..d {
                cov[(i, j)] += c[i] * c[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov[(i, j)] / (n - 1) as f64;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    (mu, cov)
}

const FID_JITTER: f64 = 1e-6;

fn sym_fn(a: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let sym = (a + a.transpose()) * 0.5;
    let e = SymmetricEigen::new(sym);
    let d = DMatrix::from_diagonal(&e.eigenvalues.map(|l| f(l.max(0.0))));
    &e.eigenvectors * d * e.eigenvectors.transpose()
}

/// A square root `S` of the product `A·B` of two symmetric positive
/// definite matrices, built as `A^{1/2} (A^{1/2} B A^{1/2})^{1/2} A^{-1/2}`.
pub fn sqrt_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let ra = sym_fn(a, f64::sqrt);
    let ra_inv = sym_fn(a, |l| if l > 0.0 { 1.0 / l.sqrt() } else { 0.0 });
    let inner = &ra * b * &ra;
    let rs = sym_fn(&inner, f64::sqrt);
    &ra * rs * ra_inv
}

/// `‖μ_r − μ_f‖² + tr(Σ_r + Σ_f − 2(Σ_r Σ_f)^{1/2})` with `ε·I` jitter.
pub fn frechet_proxy(real: &Matrix, fake: &Matrix) -> Result<f64> {
    if real.rows() < 2 || fake.rows() < 2 {
        return Err(Error::InvalidArgument("Fréchet distance needs at least two samples per set".into()));
    }
    if real.cols() != fake.cols() {
        return dim_err("feature sets differ in width");
    }
    let (mr, mut cr) = mean_cov(real);
    let (mf, mut cf) = mean_cov(fake);
    for i in 0..real.cols() {
        cr[(i, i)] += FID_JITTER;
        cf[(i, i)] += FID_JITTER;
    }
    let dm: f64 = mr.iter().zip(&mf).map(|(a, b)| (a - b) * (a - b)).sum();
    // tr (Σ_r Σ_f)^{1/2} = tr (Σ_r^{1/2} Σ_f Σ_r^{1/2})^{1/2}
    let ra = sym_fn(&cr, f64::sqrt);
    let inner = &ra * &cf * &ra;
    let sym = (&inner + inner.transpose()) * 0.5;
    let tr_sqrt: f64 = SymmetricEigen::new(sym).eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();
    let v = dm + cr.trace() + cf.trace() - 2.0 * tr_sqrt;
    if !v.is_finite() {
        return Err(Error::NonFinite("Fréchet distance".into()));
    }
    Ok(v.max(0.0))
}

/// Fréchet proxy between `n` generated samples and `n` dataset rows.
pub fn generator_fid(
    generator: &dyn ImageGenerator,
    sampler: &dyn LatentSampler,
    real: &Matrix,
    probe: &PerceptualProbe,
    n: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let codes = sampler.sample_codes(n, &mut rng);
    let fake = generator.generate_batch(&codes)?;
    let idx: Vec<usize> = (0..n.min(real.rows())).map(|_| rng.random_range(0..real.rows())).collect();
    let real = real.select_rows(&idx);
    frechet_proxy(&probe.embed_rows(&real)?, &probe.embed_rows(&fake)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationReport {
    pub per_element_mae: Vec<f64>,
    pub per_element_perceptual: Vec<f64>,
    pub mean_mae: f64,
    pub mean_perceptual: f64,
    pub pairs: usize,
}

impl PerturbationReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("element,mae,perceptual\n");
        for (j, (m, p)) in self.per_element_mae.iter().zip(&self.per_element_perceptual).enumerate() {
            s.push_str(&format!("{j},{m},{p}\n"));
        }
        s.push_str(&format!("mean,{},{}\n", self.mean_mae, self.mean_perceptual));
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub per_element: usize,
    /// Perturbations are drawn from `(−range, range)`; 0 disables them.
    pub range: f64,
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            per_element: 10,
            range: 1.0,
            seed: 0,
        }
    }
}

/// One perturbed pair per (element, draw): shared base code, one element moved.
fn perturbed_pairs(sampler: &dyn LatentSampler, cfg: &SweepConfig) -> (Matrix, Matrix, Vec<f64>) {
    let d = sampler.latent_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = d * cfg.per_element;
    let base = sampler.sample_codes(n, &mut rng);
    let mut pert = base.clone();
    let mut delta = Vec::with_capacity(n);
    for j in 0..d {
        for k in 0..cfg.per_element {
            let r = j * cfg.per_element + k;
            let u = if cfg.range > 0.0 { rng.random_range(-cfg.range..cfg.range) } else { 0.0 };
            let row = pert.row_mut(r);
            let before = row[j];
            row[j] = (before + u).clamp(-1.0, 1.0);
            delta.push(row[j] - before);
        }
    }
    (base, pert, delta)
}

pub fn perturbation_sweep(
    generator: &dyn ImageGenerator,
    sampler: &dyn LatentSampler,
    probe: &PerceptualProbe,
    cfg: &SweepConfig,
) -> Result<PerturbationReport> {
    let d = sampler.latent_dim();
    if d == 0 || d != generator.latent_dim() {
        return dim_err(format!("sampler width {d} vs generator {}", generator.latent_dim()));
    }
    if cfg.per_element == 0 {
        return Err(Error::InvalidArgument("at least one perturbation per element".into()));
    }
    let (base, pert, _) = perturbed_pairs(sampler, cfg);
    let a = generator.generate_batch(&base)?;
    let b = generator.generate_batch(&pert)?;
    let mut per_mae = vec![0.0; d];
    let mut per_p = vec![0.0; d];
    for j in 0..d {
        for k in 0..cfg.per_element {
            let r = j * cfg.per_element + k;
            per_mae[j] += mae_slices(a.row(r), b.row(r)) / cfg.per_element as f64;
            per_p[j] += probe.distance(a.row(r), b.row(r))? / cfg.per_element as f64;
        }
    }
    Ok(PerturbationReport {
        mean_mae: per_mae.iter().sum::<f64>() / d as f64,
        mean_perceptual: per_p.iter().sum::<f64>() / d as f64,
        per_element_mae: per_mae,
        per_element_perceptual: per_p,
        pairs: d * cfg.per_element,
    })
}

/// Border-referenced foreground mass, centroid, and second and third
/// central moments (scale-normalized) of the first channel.
fn shape_moments(img: &[f64], shape: ImageShape) -> Vec<f64> {
    let (h, w) = (shape.height, shape.width);
    let px = |y: usize, x: usize| img[y * w + x];
    let mut border = 0.0;
    for x in 0..w {
        border += px(0, x) + px(h - 1, x);
    }
    for y in 0..h {
        border += px(y, 0) + px(y, w - 1);
    }
    let bg = border / (2 * (h + w)) as f64;
    let (mut m0, mut mx, mut my, mut peak) = (0.0, 0.0, 0.0, bg);
    for y in 0..h {
        for x in 0..w {
            let v = (px(y, x) - bg).abs();
            m0 += v;
            mx += v * x as f64;
            my += v * y as f64;
            if (px(y, x) - bg).abs() > (peak - bg).abs() {
                peak = px(y, x);
            }
        }
    }
    if m0 <= 1e-9 {
        return vec![bg, peak, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
    }
    let (cx, cy) = (mx / m0, my / m0);
    let mut c = [0.0; 7];
    for y in 0..h {
        for x in 0..w {
            let v = (px(y, x) - bg).abs() / m0;
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            c[0] += v * dx * dx;
            c[1] += v * dx * dy;
            c[2] += v * dy * dy;
            c[3] += v * dx * dx * dx;
            c[4] += v * dx * dx * dy;
            c[5] += v * dx * dy * dy;
            c[6] += v * dy * dy * dy;
        }
    }
    let r = (c[0] + c[2]).sqrt().max(1e-9);
    let mut out = vec![bg, peak, m0 / (h * w) as f64, cx / w as f64, cy / h as f64, r / w as f64];
    out.extend(c[..3].iter().map(|v| v / (r * r)));
    out.extend(c[3..].iter().map(|v| v / (r * r * r)));
    out
}

/// Ridge regression from pixels and probe embeddings to ground-truth factors.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorOracle {
    probe: PerceptualProbe,
    feat_mean: Vec<f64>,
    feat_scale: Vec<f64>,
    /// `(features + 1) × factors`, last row is the intercept.
    weights: DMatrix<f64>,
}

impl FactorOracle {
    fn raw_features(probe: &PerceptualProbe, img: &[f64]) -> Result<Vec<f64>> {
        let mut f = img.to_vec();
        f.extend(probe.embedding(img)?);
        let m = shape_moments(img, probe.shape);
        // quadratic expansion of the moment summary
        for i in 0..m.len() {
            for j in i..m.len() {
                f.push(m[i] * m[j]);
            }
        }
        f.extend(m);
        Ok(f)
    }

    pub fn fit(images: &Matrix, factors: &Matrix, probe: PerceptualProbe, ridge: f64) -> Result<Self> {
        if images.rows() != factors.rows() || images.rows() < 2 {
            return dim_err("oracle needs matching image/factor rows");
        }
        let rows: Vec<Vec<f64>> = (0..images.rows()).map(|r| Self::raw_features(&probe, images.row(r))).collect::<Result<_>>()?;
        let (n, p) = (rows.len(), rows[0].len());
        let mut feat_mean = vec![0.0; p];
        for r in &rows {
            feat_mean.iter_mut().zip(r).for_each(|(m, v)| *m += v / n as f64);
        }
        let mut feat_scale = vec![0.0; p];
        for r in &rows {
            feat_scale.iter_mut().zip(r.iter().zip(&feat_mean)).for_each(|(s, (v, m))| *s += (v - m) * (v - m) / n as f64);
        }
        feat_scale.iter_mut().for_each(|s| *s = if *s > 1e-12 { 1.0 / s.sqrt() } else { 0.0 });
        let x = DMatrix::from_fn(n, p + 1, |i, j| if j == p { 1.0 } else { (rows[i][j] - feat_mean[j]) * feat_scale[j] });
        let y = DMatrix::from_fn(n, factors.cols(), |i, j| factors.get(i, j));
        let mut xtx = x.transpose() * &x;
        for j in 0..p {
            xtx[(j, j)] += ridge;
        }
        let xty = x.transpose() * y;
        let weights = xtx.cholesky().ok_or_else(|| Error::InvalidArgument("oracle normal equations not positive definite".into()))?.solve(&xty);
        Ok(Self {
            probe,
            feat_mean,
            feat_scale,
            weights,
        })
    }

    pub fn predict(&self, images: &Matrix) -> Result<Matrix> {
        let p = self.feat_mean.len();
        let k = self.weights.ncols();
        let mut out = Matrix::zeros(images.rows(), k);
        for r in 0..images.rows() {
            let f = Self::raw_features(&self.probe, images.row(r))?;
            for c in 0..k {
                let mut acc = self.weights[(p, c)];
                for j in 0..p {
                    acc += (f[j] - self.feat_mean[j]) * self.feat_scale[j] * self.weights[(j, c)];
                }
                out.set(r, c, acc);
            }
        }
        Ok(out)
    }

    /// Coefficient of determination per factor.
    pub fn r_squared(&self, images: &Matrix, factors: &Matrix) -> Result<Vec<f64>> {
        let pred = self.predict(images)?;
        let n = factors.rows() as f64;
        Ok((0..factors.cols())
            .map(|c| {
                let mean = (0..factors.rows()).map(|r| factors.get(r, c)).sum::<f64>() / n;
                let (mut ss_res, mut ss_tot) = (0.0, 0.0);
                for r in 0..factors.rows() {
                    ss_res += (factors.get(r, c) - pred.get(r, c)).powi(2);
                    ss_tot += (factors.get(r, c) - mean).powi(2);
                }
                1.0 - ss_res / ss_tot.max(1e-300)
            })
            .collect())
    }
}

/// `|r|` between each element's signed perturbation and each predicted factor
/// change, plus the strongest factor per element.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorTable {
    pub abs_corr: Matrix,
    pub best: Vec<(usize, f64)>,
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa <= 0.0 || sbb <= 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}

pub fn factor_consistency(
    generator: &dyn ImageGenerator,
    sampler: &dyn LatentSampler,
    oracle: &FactorOracle,
    cfg: &SweepConfig,
) -> Result<FactorTable> {
    let d = sampler.latent_dim();
    if d != generator.latent_dim() {
        return dim_err("sampler and generator widths differ");
    }
    let (base, pert, delta) = perturbed_pairs(sampler, cfg);
    let fa = oracle.predict(&generator.generate_batch(&base)?)?;
    let fb = oracle.predict(&generator.generate_batch(&pert)?)?;
    let k = fa.cols();
    let mut abs_corr = Matrix::zeros(d, k);
    let mut best = Vec::with_capacity(d);
    for j in 0..d {
        let rows = j * cfg.per_element..(j + 1) * cfg.per_element;
        let dj = &delta[rows.clone()];
        let mut top = (0, 0.0);
        for c in 0..k {
            let df: Vec<f64> = rows.clone().map(|r| fb.get(r, c) - fa.get(r, c)).collect();
            let r = pearson(dj, &df).abs();
            abs_corr.set(j, c, r);
            if r > top.1 {
                top = (c, r);
            }
        }
        best.push(top);
    }
    Ok(FactorTable { abs_corr, best })
}
