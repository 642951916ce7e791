//! Dense row-major matrices and third-order tensors.
//!
//! Everything here is `f64` and summed in index order so that repeated runs
//! are bit-reproducible.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return dim_err(format!(
                "matrix {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return dim_err("ragged rows");
        }
        let data = rows.iter().flatten().copied().collect();
        Self::from_vec(rows.len(), cols, data)
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn col(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return dim_err(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            ));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        gemm(false, false, self, other, 0.0, &mut out);
        Ok(out)
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return dim_err(format!("matvec {}x{} by {}", self.rows, self.cols, v.len()));
        }
        Ok((0..self.rows)
            .map(|r| self.row(r).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect())
    }

    pub fn zip_map(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return dim_err(format!("shapes {:?} vs {:?}", self.shape(), other.shape()));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scaled(&self, s: f64) -> Matrix {
        self.map(|v| v * s)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn frob_norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        self.rows == self.cols
            && (0..self.rows)
                .all(|i| (0..i).all(|j| (self.get(i, j) - self.get(j, i)).abs() <= tol))
    }

    /// `u vᵀ`.
    pub fn outer(u: &[f64], v: &[f64]) -> Matrix {
        let mut out = Matrix::zeros(u.len(), v.len());
        for (i, &a) in u.iter().enumerate() {
            for (j, &b) in v.iter().enumerate() {
                out.data[i * v.len() + j] = a * b;
            }
        }
        out
    }

    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn to_nalgebra(&self) -> nalgebra::DMatrix<f64> {
        nalgebra::DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }

    pub fn from_nalgebra(m: &nalgebra::DMatrix<f64>) -> Matrix {
        let mut out = Matrix::zeros(m.nrows(), m.ncols());
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                out.data[r * m.ncols() + c] = m[(r, c)];
            }
        }
        out
    }
}

/// `out = op(a) · op(b) + beta · out` where `op` optionally transposes.
pub(crate) fn gemm(trans_a: bool, trans_b: bool, a: &Matrix, b: &Matrix, beta: f64, out: &mut Matrix) {
    let (m, k) = if trans_a { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (k2, n) = if trans_b { (b.cols, b.rows) } else { (b.rows, b.cols) };
    assert_eq!(k, k2, "gemm inner dimension");
    assert_eq!((out.rows, out.cols), (m, n), "gemm output shape");
    let (rsa, csa) = if trans_a { (1, a.cols as isize) } else { (a.cols as isize, 1) };
    let (rsb, csb) = if trans_b { (1, b.cols as isize) } else { (b.cols as isize, 1) };
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        out.data.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    // SAFETY: strides and extents describe the row-major buffers above, and
    // `out` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.data.as_mut_ptr(),
            out.cols as isize,
            1,
        );
    }
}

/// Row-major dense third-order tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor3 {
    dims: [usize; 3],
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(dims: [usize; 3]) -> Self {
        Self {
            dims,
            data: vec![0.0; dims[0] * dims[1] * dims[2]],
        }
    }

    pub fn cube(d: usize) -> Self {
        Self::zeros([d, d, d])
    }

    pub fn from_vec(dims: [usize; 3], data: Vec<f64>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return dim_err(format!("tensor dims must be positive, got {dims:?}"));
        }
        if data.len() != dims.iter().product::<usize>() {
            return dim_err(format!("tensor {dims:?} needs {} entries", dims.iter().product::<usize>()));
        }
        Ok(Self { dims, data })
    }

    #[inline]
    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    #[inline]
    fn offset(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.dims[1] + j) * self.dims[2] + k
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.offset(i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: f64) {
        let o = self.offset(i, j, k);
        self.data[o] = v;
    }

    #[inline]
    pub fn add_at(&mut self, i: usize, j: usize, k: usize, v: f64) {
        let o = self.offset(i, j, k);
        self.data[o] += v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn scaled(&self, s: f64) -> Tensor3 {
        Tensor3 {
            dims: self.dims,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn frob_norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self += s · other`.
    pub fn axpy(&mut self, s: f64, other: &Tensor3) -> Result<()> {
        if self.dims != other.dims {
            return dim_err(format!("tensor dims {:?} vs {:?}", self.dims, other.dims));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    /// Reorders modes: `out[idx[perm[0]], idx[perm[1]], idx[perm[2]]]` view,
    /// i.e. mode `m` of the output is mode `perm[m]` of `self`.
    pub fn permute(&self, perm: [usize; 3]) -> Tensor3 {
        let nd = [self.dims[perm[0]], self.dims[perm[1]], self.dims[perm[2]]];
        let mut out = Tensor3::zeros(nd);
        for a in 0..nd[0] {
            for b in 0..nd[1] {
                for c in 0..nd[2] {
                    let mut src = [0usize; 3];
                    src[perm[0]] = a;
                    src[perm[1]] = b;
                    src[perm[2]] = c;
                    out.set(a, b, c, self.get(src[0], src[1], src[2]));
                }
            }
        }
        out
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        let [d0, d1, d2] = self.dims;
        if d0 != d1 || d1 != d2 {
            return false;
        }
        (0..d0).all(|i| {
            (0..d0).all(|j| {
                (0..d0).all(|k| {
                    let v = self.get(i, j, k);
                    PERMS.iter().all(|p| {
                        let ix = [i, j, k];
                        (self.get(ix[p[0]], ix[p[1]], ix[p[2]]) - v).abs() <= tol
                    })
                })
            })
        })
    }
}

/// The six permutations of three modes.
pub const PERMS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];

fn check_vec(name: &str, v: &[f64]) -> Result<()> {
    if v.is_empty() {
        return dim_err(format!("{name} is empty"));
    }
    if !v.iter().all(|x| x.is_finite()) {
        return Err(Error::NonFinite(name.to_string()));
    }
    Ok(())
}

/// `u ⊗ v ⊗ w`.
pub fn outer3(u: &[f64], v: &[f64], w: &[f64]) -> Result<Tensor3> {
    check_vec("u", u)?;
    check_vec("v", v)?;
    check_vec("w", w)?;
    let mut data = Vec::with_capacity(u.len() * v.len() * w.len());
    for &a in u {
        for &b in v {
            let ab = a * b;
            data.extend(w.iter().map(|&c| ab * c));
        }
    }
    Tensor3::from_vec([u.len(), v.len(), w.len()], data)
}

/// Average over all six mode permutations.
///
/// Every entry of an orbit is computed from the same canonical index triple
/// in the same order, so the output is bitwise symmetric and a second
/// application returns it unchanged.
pub fn symmetrize(t: &Tensor3) -> Result<Tensor3> {
    let [d, d1, d2] = t.dims;
    if d != d1 || d != d2 {
        return dim_err(format!("symmetrize needs a cubic tensor, got {:?}", t.dims));
    }
    let mut out = Tensor3::cube(d);
    for a in 0..d {
        for b in a..d {
            for c in b..d {
                let ix = [a, b, c];
                let base = t.get(a, b, c);
                let mut dev = 0.0;
                for p in &PERMS {
                    dev += t.get(ix[p[0]], ix[p[1]], ix[p[2]]) - base;
                }
                let v = base + dev / 6.0;
                for p in &PERMS {
                    out.set(ix[p[0]], ix[p[1]], ix[p[2]], v);
                }
            }
        }
    }
    Ok(out)
}

/// `Σ_j λ_j a_j ⊗ a_j ⊗ a_j`, bitwise symmetric.
pub fn cp_reconstruct(lambda: &[f64], factors: &[Vec<f64>]) -> Result<Tensor3> {
    if lambda.is_empty() || lambda.len() != factors.len() {
        return dim_err(format!("{} weights for {} factors", lambda.len(), factors.len()));
    }
    let d = factors[0].len();
    if d == 0 || factors.iter().any(|f| f.len() != d) {
        return dim_err("factor lengths differ");
    }
    let mut out = Tensor3::cube(d);
    for a in 0..d {
        for b in a..d {
            for c in b..d {
                let mut v = 0.0;
                for (l, f) in lambda.iter().zip(factors) {
                    v += l * f[a] * f[b] * f[c];
                }
                let ix = [a, b, c];
                for p in &PERMS {
                    out.set(ix[p[0]], ix[p[1]], ix[p[2]], v);
                }
            }
        }
    }
    Ok(out)
}

/// `Σ_j λ_j a_j a_jᵀ`.
pub fn cp_reconstruct2(lambda: &[f64], factors: &[Vec<f64>]) -> Result<Matrix> {
    if lambda.is_empty() || lambda.len() != factors.len() {
        return dim_err(format!("{} weights for {} factors", lambda.len(), factors.len()));
    }
    let d = factors[0].len();
    if factors.iter().any(|f| f.len() != d) {
        return dim_err("factor lengths differ");
    }
    let mut out = Matrix::zeros(d, d);
    for a in 0..d {
        for b in a..d {
            let v: f64 = lambda.iter().zip(factors).map(|(l, f)| l * f[a] * f[b]).sum();
            out.set(a, b, v);
            out.set(b, a, v);
        }
    }
    Ok(out)
}

/// Shape and flat data, for distance computations across dense types.
pub trait Dense {
    fn shape_vec(&self) -> Vec<usize>;
    fn flat(&self) -> &[f64];
}

impl Dense for Matrix {
    fn shape_vec(&self) -> Vec<usize> {
        vec![self.rows, self.cols]
    }
    fn flat(&self) -> &[f64] {
        &self.data
    }
}

impl Dense for Tensor3 {
    fn shape_vec(&self) -> Vec<usize> {
        self.dims.to_vec()
    }
    fn flat(&self) -> &[f64] {
        &self.data
    }
}

/// Frobenius distance `√Σ(a−b)²`.
pub fn frob_dist<T: Dense>(a: &T, b: &T) -> Result<f64> {
    if a.shape_vec() != b.shape_vec() {
        return dim_err(format!("shapes {:?} vs {:?}", a.shape_vec(), b.shape_vec()));
    }
    Ok(a.flat()
        .iter()
        .zip(b.flat())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt())
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn rand_tensor(rng: &mut ChaCha8Rng, d: usize) -> Tensor3 {
        Tensor3::from_vec([d, d, d], rand_vec(rng, d * d * d)).unwrap()
    }

    #[test]
    fn outer3_entries() {
        let t = outer3(&[1.0, 2.0], &[1.0, 2.0], &[1.0, 2.0]).unwrap();
        assert_eq!(t.get(0, 0, 1), 2.0);
        assert_eq!(t.get(1, 1, 1), 8.0);

        let e = [1.0, 0.0, 0.0];
        let t = outer3(&e, &e, &e).unwrap();
        assert_eq!(t.get(0, 0, 0), 1.0);
        assert_eq!(t.as_slice().iter().filter(|&&v| v != 0.0).count(), 1);
    }

    #[test]
    fn outer3_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (u, v, w) = (rand_vec(&mut rng, 3), rand_vec(&mut rng, 3), rand_vec(&mut rng, 3));
        let t = outer3(&u, &v, &w).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    assert_eq!(t.get(i, j, k), u[i] * v[j] * w[k]);
                }
            }
        }
    }

    #[test]
    fn outer3_rejects_empty_and_nan() {
        assert!(outer3(&[], &[1.0], &[1.0]).is_err());
        assert!(matches!(outer3(&[f64::NAN], &[1.0], &[1.0]), Err(Error::NonFinite(_))));
    }

    #[test]
    fn symmetrize_single_entry() {
        let mut t = Tensor3::cube(3);
        t.set(0, 1, 2, 6.0);
        let s = symmetrize(&t).unwrap();
        for p in &PERMS {
            let ix = [0, 1, 2];
            assert_eq!(s.get(ix[p[0]], ix[p[1]], ix[p[2]]), 1.0);
        }
        assert_eq!(s.as_slice().iter().filter(|&&v| v != 0.0).count(), 6);
    }

    #[test]
    fn symmetrize_matches_permutation_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = rand_tensor(&mut rng, 4);
        let s = symmetrize(&t).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                for k in 0..4 {
                    let oracle = (t.get(i, j, k)
                        + t.get(i, k, j)
                        + t.get(j, i, k)
                        + t.get(j, k, i)
                        + t.get(k, i, j)
                        + t.get(k, j, i))
                        / 6.0;
                    assert!((s.get(i, j, k) - oracle).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn symmetrize_leaves_symmetric_tensor_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = symmetrize(&rand_tensor(&mut rng, 5)).unwrap();
        assert_eq!(symmetrize(&s).unwrap(), s);
    }

    #[test]
    fn symmetrize_rejects_non_cubic() {
        assert!(matches!(symmetrize(&Tensor3::zeros([2, 3, 3])), Err(Error::Dimension(_))));
    }

    #[test]
    fn cp_reconstruct_small_cases() {
        let t = cp_reconstruct(&[2.0], &[vec![1.0, 0.0, 0.0]]).unwrap();
        assert_eq!(t.get(0, 0, 0), 2.0);
        assert_eq!(t.as_slice().iter().filter(|&&v| v != 0.0).count(), 1);

        let t = cp_reconstruct(&[1.0, 1.0], &[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(t.as_slice(), &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn cp_reconstruct_matches_naive_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let lambda = rand_vec(&mut rng, 3);
        let factors: Vec<_> = (0..3).map(|_| rand_vec(&mut rng, 5)).collect();
        let t = cp_reconstruct(&lambda, &factors).unwrap();
        let mut naive = Tensor3::cube(5);
        for (l, f) in lambda.iter().zip(&factors) {
            naive.axpy(*l, &outer3(f, f, f).unwrap()).unwrap();
        }
        let rel = frob_dist(&t, &naive).unwrap() / naive.frob_norm_sq().sqrt();
        assert!(rel < 1e-12, "rel err {rel}");
    }

    #[test]
    fn cp_reconstruct_rejects_mismatch() {
        assert!(cp_reconstruct(&[1.0, 1.0], &[vec![1.0, 0.0], vec![1.0]]).is_err());
        assert!(cp_reconstruct(&[1.0], &[vec![1.0], vec![1.0]]).is_err());
    }

    #[test]
    fn frob_dist_cases() {
        let a = Matrix::from_vec(1, 3, vec![0.0, 0.0, 0.0]).unwrap();
        let b = Matrix::from_vec(1, 3, vec![3.0, 0.0, 4.0]).unwrap();
        assert_eq!(frob_dist(&a, &a).unwrap(), 0.0);
        assert_eq!(frob_dist(&a, &b).unwrap(), 5.0);
        let c = Matrix::zeros(3, 1);
        assert!(frob_dist(&a, &c).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (x, y) = (rand_tensor(&mut rng, 3), rand_tensor(&mut rng, 3));
        let mut acc = 0.0;
        for i in 0..27 {
            let dlt = x.as_slice()[i] - y.as_slice()[i];
            acc += dlt * dlt;
        }
        assert!((frob_dist(&x, &y).unwrap() - acc.sqrt()).abs() < 1e-14);
    }

    #[test]
    fn gemm_transposes_agree_with_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = Matrix::from_vec(3, 4, rand_vec(&mut rng, 12)).unwrap();
        let b = Matrix::from_vec(4, 2, rand_vec(&mut rng, 8)).unwrap();
        let c = a.matmul(&b).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let v: f64 = (0..4).map(|k| a.get(i, k) * b.get(k, j)).sum();
                assert!((c.get(i, j) - v).abs() < 1e-14);
            }
        }
        let mut c2 = Matrix::zeros(3, 2);
        gemm(true, true, &a.transpose(), &b.transpose(), 0.0, &mut c2);
        assert!(frob_dist(&c, &c2).unwrap() < 1e-14);
    }

    #[test]
    fn permute_moves_modes() {
        let t = outer3(&[1.0, 2.0], &[3.0, 5.0, 7.0], &[11.0]).unwrap();
        let p = t.permute([2, 0, 1]);
        assert_eq!(p.dims(), [1, 2, 3]);
        assert_eq!(p.get(0, 1, 2), t.get(1, 2, 0));
    }
}
