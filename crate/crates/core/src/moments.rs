//! Streaming estimation of the second- and third-order moment terms of
//! feature vectors, and their vector-Jacobian product back onto a batch.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::tensor::{Matrix, Tensor3};

/// Running sums of `Φ`, `Φ⊗Φ` and `Φ⊗Φ⊗Φ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentAccumulator {
    dim: usize,
    count: usize,
    sum1: Vec<f64>,
    sum2: Matrix,
    sum3: Tensor3,
}

/// Moment terms of a feature distribution.
///
/// `m1 = E[Φ⊗Φ]`, `m2 = E[Φ]⊗E[Φ]`, `t[0] = E[Φ⊗Φ⊗Φ]` and `t[1..5]` the
/// mixed terms `E[Φ⊗Φ]⊗μ`, `E[Φ⊗μ⊗Φ]`, `μ⊗E[Φ⊗Φ]`, `μ⊗μ⊗μ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymmetricMomentSet {
    pub m1: Matrix,
    pub m2: Matrix,
    pub t: [Tensor3; 5],
}

impl SymmetricMomentSet {
    pub fn dim(&self) -> usize {
        self.m1.rows()
    }

    /// A set whose only nonzero terms are `m1` and `t1`.
    pub fn from_targets(m1: Matrix, t1: Tensor3) -> Result<Self> {
        let d = m1.rows();
        if m1.cols() != d || t1.dims() != [d, d, d] {
            return dim_err("target moments must share one dimension");
        }
        let z = Tensor3::cube(d);
        Ok(Self {
            m1,
            m2: Matrix::zeros(d, d),
            t: [t1, z.clone(), z.clone(), z.clone(), z],
        })
    }

    /// Builds the full set from a mean and a second moment `E[Φ⊗Φ]` plus
    /// the raw third moment.
    pub fn from_parts(mean: &[f64], second: Matrix, third: Tensor3) -> Self {
        let d = mean.len();
        let mut t2 = Tensor3::cube(d);
        let mut t3 = Tensor3::cube(d);
        let mut t4 = Tensor3::cube(d);
        let mut t5 = Tensor3::cube(d);
        for i in 0..d {
            for j in 0..d {
                for k in 0..d {
                    t2.set(i, j, k, second.get(i, j) * mean[k]);
                    t3.set(i, j, k, second.get(i, k) * mean[j]);
                    t4.set(i, j, k, mean[i] * second.get(j, k));
                    t5.set(i, j, k, mean[i] * mean[j] * mean[k]);
                }
            }
        }
        Self {
            m1: second,
            m2: Matrix::outer(mean, mean),
            t: [third, t2, t3, t4, t5],
        }
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            m1: self.m1.scaled(c),
            m2: self.m2.scaled(c),
            t: [
                self.t[0].scaled(c),
                self.t[1].scaled(c),
                self.t[2].scaled(c),
                self.t[3].scaled(c),
                self.t[4].scaled(c),
            ],
        }
    }
}

impl MomentAccumulator {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            count: 0,
            sum1: vec![0.0; dim],
            sum2: Matrix::zeros(dim, dim),
            sum3: Tensor3::cube(dim.max(1)),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn push(&mut self, phi: &[f64]) -> Result<()> {
        if phi.len() != self.dim {
            return dim_err(format!("feature of length {} for dim {}", phi.len(), self.dim));
        }
        if !phi.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("feature vector".into()));
        }
        let d = self.dim;
        for i in 0..d {
            self.sum1[i] += phi[i];
            let row = self.sum2.row_mut(i);
            for j in 0..d {
                row[j] += phi[i] * phi[j];
            }
        }
        let s3 = self.sum3.as_mut_slice();
        let mut o = 0;
        for i in 0..d {
            for j in 0..d {
                let pij = phi[i] * phi[j];
                for k in 0..d {
                    s3[o] += pij * phi[k];
                    o += 1;
                }
            }
        }
        self.count += 1;
        Ok(())
    }

    /// Adds every vector of `batch`; on error the accumulator is unchanged.
    pub fn accumulate<V: AsRef<[f64]>>(&mut self, batch: &[V]) -> Result<()> {
        if let Some(bad) = batch.iter().find(|v| v.as_ref().len() != self.dim) {
            return dim_err(format!("feature of length {} for dim {}", bad.as_ref().len(), self.dim));
        }
        let mut next = self.clone();
        for v in batch {
            next.push(v.as_ref())?;
        }
        *self = next;
        Ok(())
    }

    pub fn accumulate_rows(&mut self, batch: &Matrix) -> Result<()> {
        let rows: Vec<&[f64]> = (0..batch.rows()).map(|r| batch.row(r)).collect();
        self.accumulate(&rows)
    }

    pub fn merge(&self, other: &MomentAccumulator) -> Result<MomentAccumulator> {
        if self.dim != other.dim {
            return dim_err(format!("merge dims {} vs {}", self.dim, other.dim));
        }
        let mut out = self.clone();
        out.count += other.count;
        for (a, b) in out.sum1.iter_mut().zip(&other.sum1) {
            *a += b;
        }
        for (a, b) in out.sum2.as_mut_slice().iter_mut().zip(other.sum2.as_slice()) {
            *a += b;
        }
        out.sum3.axpy(1.0, &other.sum3)?;
        Ok(out)
    }

    pub fn mean(&self) -> Result<Vec<f64>> {
        if self.count == 0 {
            return Err(Error::EmptyAccumulator);
        }
        let n = self.count as f64;
        Ok(self.sum1.iter().map(|v| v / n).collect())
    }

    pub fn finalize(&self) -> Result<SymmetricMomentSet> {
        let mean = self.mean()?;
        let n = self.count as f64;
        Ok(SymmetricMomentSet::from_parts(
            &mean,
            self.sum2.scaled(1.0 / n),
            self.sum3.scaled(1.0 / n),
        ))
    }
}

/// Ring buffer of the most recent feature vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureBuffer {
    dim: usize,
    capacity: usize,
    items: VecDeque<Vec<f64>>,
}

impl FeatureBuffer {
    pub fn new(dim: usize, capacity: usize) -> Self {
        Self {
            dim,
            capacity: capacity.max(1),
            items: VecDeque::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push_rows(&mut self, batch: &Matrix) -> Result<()> {
        if batch.cols() != self.dim {
            return dim_err(format!("buffer dim {} got {}", self.dim, batch.cols()));
        }
        for r in 0..batch.rows() {
            if self.items.len() == self.capacity {
                self.items.pop_front();
            }
            self.items.push_back(batch.row(r).to_vec());
        }
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.items.iter()
    }

    pub fn moments(&self) -> Result<SymmetricMomentSet> {
        let mut acc = MomentAccumulator::new(self.dim);
        for v in &self.items {
            acc.push(v)?;
        }
        acc.finalize()
    }

    pub fn map_in_place(&mut self, mut f: impl FnMut(f64) -> f64) {
        for v in self.items.iter_mut().flat_map(|v| v.iter_mut()) {
            *v = f(*v);
        }
    }
}

/// Cotangents of a scalar with respect to each moment term.
#[derive(Debug, Clone)]
pub struct MomentCotangent {
    pub m1: Matrix,
    pub m2: Matrix,
    pub t: [Tensor3; 5],
}

/// Pulls moment cotangents back onto the batch `phi` (rows are samples) whose
/// empirical moments were computed with [`MomentAccumulator::finalize`].
pub fn moments_vjp(phi: &Matrix, cot: &MomentCotangent) -> Result<Matrix> {
    let (n, d) = phi.shape();
    if n == 0 {
        return Err(Error::EmptyAccumulator);
    }
    if cot.m1.shape() != (d, d) || cot.t.iter().any(|t| t.dims() != [d, d, d]) {
        return dim_err("cotangent dimension does not match features");
    }
    let nf = n as f64;
    let mut mean = vec![0.0; d];
    for r in 0..n {
        for (m, v) in mean.iter_mut().zip(phi.row(r)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= nf);
    let mut second = Matrix::zeros(d, d);
    super::tensor::gemm(true, false, phi, phi, 0.0, &mut second);
    let second = second.scaled(1.0 / nf);

    // cotangents on S = E[ΦΦᵀ] and μ
    let mut g_s = cot.m1.clone();
    let mut g_mu = vec![0.0; d];
    let g2 = cot.m2.add(&cot.m2.transpose())?;
    for a in 0..d {
        g_mu[a] += (0..d).map(|b| g2.get(a, b) * mean[b]).sum::<f64>();
    }
    let [_, t2, t3, t4, t5] = &cot.t;
    for a in 0..d {
        for b in 0..d {
            for c in 0..d {
                let v2 = t2.get(a, b, c);
                let v3 = t3.get(a, b, c);
                let v4 = t4.get(a, b, c);
                let v5 = t5.get(a, b, c);
                // T2 = S_ab μ_c, T3 = S_ac μ_b, T4 = μ_a S_bc
                let sab = g_s.get(a, b) + v2 * mean[c];
                g_s.set(a, b, sab);
                let sac = g_s.get(a, c) + v3 * mean[b];
                g_s.set(a, c, sac);
                let sbc = g_s.get(b, c) + v4 * mean[a];
                g_s.set(b, c, sbc);
                g_mu[c] += v2 * second.get(a, b);
                g_mu[b] += v3 * second.get(a, c);
                g_mu[a] += v4 * second.get(b, c);
                g_mu[a] += v5 * mean[b] * mean[c];
                g_mu[b] += v5 * mean[a] * mean[c];
                g_mu[c] += v5 * mean[a] * mean[b];
            }
        }
    }
    let g_s_sym = g_s.add(&g_s.transpose())?;

    let t1 = &cot.t[0];
    let mut out = Matrix::zeros(n, d);
    let mut pp = vec![0.0; d * d];
    for r in 0..n {
        let x = phi.row(r);
        for i in 0..d {
            for j in 0..d {
                pp[i * d + j] = x[i] * x[j];
            }
        }
        let g = out.row_mut(r);
        for a in 0..d {
            for b in 0..d {
                for c in 0..d {
                    let v = t1.get(a, b, c);
                    if v == 0.0 {
                        continue;
                    }
                    g[a] += v * pp[b * d + c];
                    g[b] += v * pp[a * d + c];
                    g[c] += v * pp[a * d + b];
                }
            }
        }
        for a in 0..d {
            let s: f64 = (0..d).map(|b| g_s_sym.get(a, b) * x[b]).sum();
            g[a] += s + g_mu[a];
        }
        g.iter_mut().for_each(|v| *v /= nf);
    }
    Ok(out)
}
