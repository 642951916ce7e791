//! Hinge GAN loss, consistency, Mixup and masking losses, and the weighted
//! composite objective.
//!
//! Each loss has a plain scalar form, used by tests and evaluation, and a
//! graph form that the trainer differentiates.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::image::Image;
use crate::nets::autodiff::{log_sum_exp, Graph, NodeId};
use crate::nets::model::{GanModel, Mode};
use crate::tensor::Matrix;

/// `(loss_D, loss_G)` of the hinge formulation.
pub fn gan_loss(d_real: &[f64], d_fake: &[f64]) -> Result<(f64, f64)> {
    if d_real.is_empty() || d_fake.is_empty() {
        return Err(Error::EmptyDataset("GAN loss needs nonempty score batches".into()));
    }
    if d_real.iter().chain(d_fake).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("discriminator scores".into()));
    }
    let mean = |v: &[f64], f: &dyn Fn(f64) -> f64| v.iter().map(|&x| f(x)).sum::<f64>() / v.len() as f64;
    let loss_d = mean(d_real, &|x| (1.0 - x).max(0.0)) + mean(d_fake, &|x| (1.0 + x).max(0.0));
    let loss_g = -mean(d_fake, &|x| x);
    Ok((loss_d, loss_g))
}

pub fn consistency_loss(h: &[f64], phi: &[f64]) -> Result<f64> {
    if h.len() != phi.len() {
        return dim_err(format!("code length {} vs feature length {}", h.len(), phi.len()));
    }
    Ok(h.iter().zip(phi).map(|(a, b)| (a - b) * (a - b)).sum())
}

/// `‖h_s − Φ(I_s)‖²` with `I_s = t·I_r + (1−t)·I_f` and `h_s` blended alike.
pub fn mixup_loss(model: &GanModel, real: &Image, fake: &Image, h_r: &[f64], h_f: &[f64], t: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidArgument(format!("mix coefficient {t} outside [0, 1]")));
    }
    if h_r.len() != h_f.len() {
        return dim_err("mixup codes differ in length");
    }
    let blended = real.blend(fake, 1.0 - t)?;
    let (_, _, phi) = model.discriminate(&blended)?;
    let hs: Vec<f64> = h_r.iter().zip(h_f).map(|(r, f)| t * r + (1.0 - t) * f).collect();
    consistency_loss(&hs, &phi)
}

/// `h` with element `j` moved by `u` and clamped to `[−1, 1]`.
pub fn perturb(h: &[f64], j: usize, u: f64) -> Result<Vec<f64>> {
    if j >= h.len() {
        return Err(Error::IndexOutOfRange { index: j, len: h.len() });
    }
    let mut out = h.to_vec();
    out[j] = (out[j] + u).clamp(-1.0, 1.0);
    Ok(out)
}

/// Cross-entropy of the masking head against target `j`, and its argmax.
pub fn masking_loss(model: &GanModel, generator: &dyn crate::nets::model::ImageGenerator, h: &[f64], j: usize, u: f64) -> Result<(f64, usize)> {
    let hp = perturb(h, j, u)?;
    if model.arch.latent_dim != h.len() {
        return dim_err(format!("masking head has {} classes, code has {}", model.arch.latent_dim, h.len()));
    }
    let both = Matrix::from_rows(&[h.to_vec(), hp])?;
    let imgs = generator.generate_batch(&both)?;
    let phi = model.features(&imgs)?;
    let delta: Vec<f64> = phi.row(1).iter().zip(phi.row(0)).map(|(a, b)| a - b).collect();
    let logits = masking_logits_value(model, &delta)?;
    let ce = log_sum_exp(&logits) - logits[j];
    let pred = argmax(&logits);
    Ok((ce, pred))
}

fn masking_logits_value(model: &GanModel, delta: &[f64]) -> Result<Vec<f64>> {
    let mut g = Graph::new(&model.params);
    let d = g.input(Matrix::from_vec(1, delta.len(), delta.to_vec())?);
    let l = model.masking_logits(&mut g, d, Mode::Frozen)?;
    Ok(g.value(l).as_slice().to_vec())
}

pub fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}

/// Linear ramp between two anchor iterations, zero before the first anchor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaRamp {
    pub start_iter: u64,
    pub start_value: f64,
    pub end_iter: u64,
    pub end_value: f64,
}

impl Default for GammaRamp {
    fn default() -> Self {
        Self {
            start_iter: 2000,
            start_value: 1.0,
            end_iter: 10000,
            end_value: 100.0,
        }
    }
}

impl GammaRamp {
    pub fn value(&self, iteration: u64) -> f64 {
        if iteration < self.start_iter {
            return 0.0;
        }
        if iteration >= self.end_iter || self.end_iter <= self.start_iter {
            return self.end_value;
        }
        let f = (iteration - self.start_iter) as f64 / (self.end_iter - self.start_iter) as f64;
        self.start_value + f * (self.end_value - self.start_value)
    }

    /// Same ramp with both values multiplied by `c`; `c = 0` disables it.
    pub fn scaled(&self, c: f64) -> Self {
        Self {
            start_value: self.start_value * c,
            end_value: self.end_value * c,
            ..*self
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub gamma_l: f64,
    pub gamma_s: f64,
    pub gamma_c: f64,
    pub gamma_m: GammaRamp,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            gamma_l: 1.0,
            gamma_s: 0.1,
            gamma_c: 0.1,
            gamma_m: GammaRamp::default(),
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            gamma_l: 0.0,
            gamma_s: 0.0,
            gamma_c: 0.0,
            gamma_m: GammaRamp::default().scaled(0.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.gamma_m;
        let vals = [self.gamma_l, self.gamma_s, self.gamma_c, r.start_value, r.end_value];
        if vals.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be finite and nonnegative: {vals:?}")));
        }
        Ok(())
    }
}

/// Unweighted component losses of one step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub gan: f64,
    pub l: f64,
    pub s: f64,
    pub c: f64,
    pub m: f64,
}

pub fn composite_loss(parts: &LossParts, weights: &LossWeights, iteration: u64) -> Result<f64> {
    for (name, v) in [("gan", parts.gan), ("L_l", parts.l), ("L_s", parts.s), ("L_c", parts.c), ("L_m", parts.m)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss part {name} = {v}")));
        }
    }
    Ok(parts.gan
        + weights.gamma_l * parts.l
        + weights.gamma_s * parts.s
        + weights.gamma_c * parts.c
        + weights.gamma_m.value(iteration) * parts.m)
}

// ---- graph forms ----

/// `mean(relu(1 − real)) + mean(relu(1 + fake))`.
pub fn hinge_d_graph(g: &mut Graph, real: NodeId, fake: NodeId) -> Result<NodeId> {
    let r = g.scale(real, -1.0);
    let r = g.add_scalar(r, 1.0);
    let r = g.relu(r);
    let r = g.mean(r);
    let f = g.add_scalar(fake, 1.0);
    let f = g.relu(f);
    let f = g.mean(f);
    g.add(r, f)
}

pub fn hinge_g_graph(g: &mut Graph, fake: NodeId) -> NodeId {
    let m = g.mean(fake);
    g.scale(m, -1.0)
}

/// Batch mean of row-wise squared distances.
pub fn sq_dist_graph(g: &mut Graph, a: NodeId, b: NodeId) -> Result<NodeId> {
    let n = g.value(a).rows().max(1);
    let d = g.sub(a, b)?;
    let s = g.square(d);
    let s = g.sum(s);
    Ok(g.scale(s, 1.0 / n as f64))
}

/// Mixup loss on a batch: rows of `real`/`fake` are blended with per-row `t`.
pub fn mixup_graph(
    g: &mut Graph,
    model: &GanModel,
    real: NodeId,
    fake: NodeId,
    h_r: NodeId,
    h_f: NodeId,
    t: &[f64],
    disc: Mode,
) -> Result<NodeId> {
    let one_minus: Vec<f64> = t.iter().map(|v| 1.0 - v).collect();
    let a = g.row_scale(real, t.to_vec())?;
    let b = g.row_scale(fake, one_minus.clone())?;
    let is = g.add(a, b)?;
    let ha = g.row_scale(h_r, t.to_vec())?;
    let hb = g.row_scale(h_f, one_minus)?;
    let hs = g.add(ha, hb)?;
    let out = model.discriminator_graph(g, is, disc)?;
    sq_dist_graph(g, hs, out.phi)
}

/// Masking batch: base codes, their perturbed versions and target indices.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskingBatch {
    pub base: Matrix,
    pub perturbed: Matrix,
    pub targets: Vec<usize>,
}

impl MaskingBatch {
    /// Row `i` perturbs element `(offset + i) mod d` by `noise[i]`.
    pub fn cycled(base: &Matrix, offset: usize, noise: &[f64]) -> Result<Self> {
        if noise.len() != base.rows() {
            return dim_err("one noise value per row required");
        }
        let d = base.cols();
        let mut perturbed = base.clone();
        let mut targets = Vec::with_capacity(base.rows());
        for (i, &u) in noise.iter().enumerate() {
            let j = (offset + i) % d;
            let row = perturbed.row_mut(i);
            row[j] = (row[j] + u).clamp(-1.0, 1.0);
            targets.push(j);
        }
        Ok(Self {
            base: base.clone(),
            perturbed,
            targets,
        })
    }

    /// Every row perturbed at every element; `noise` is `rows × d`.
    pub fn sweep(base: &Matrix, noise: &Matrix) -> Result<Self> {
        if noise.shape() != base.shape() {
            return dim_err("sweep noise must match the code batch");
        }
        let (n, d) = base.shape();
        let mut b = Vec::with_capacity(n * d);
        let mut p = Vec::with_capacity(n * d);
        let mut targets = Vec::with_capacity(n * d);
        for i in 0..n {
            for j in 0..d {
                let row = base.row(i);
                b.push(row.to_vec());
                let mut q = row.to_vec();
                q[j] = (q[j] + noise.get(i, j)).clamp(-1.0, 1.0);
                p.push(q);
                targets.push(j);
            }
        }
        Ok(Self {
            base: Matrix::from_rows(&b)?,
            perturbed: Matrix::from_rows(&p)?,
            targets,
        })
    }
}

/// Masking cross-entropy given the feature nodes of base and perturbed images.
pub fn masking_graph(g: &mut Graph, model: &GanModel, phi_base: NodeId, phi_pert: NodeId, targets: Vec<usize>, head: Mode) -> Result<NodeId> {
    let delta = g.sub(phi_pert, phi_base)?;
    let logits = model.masking_logits(g, delta, head)?;
    g.softmax_ce(logits, targets)
}
