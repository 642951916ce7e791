//! Tape-based reverse-mode differentiation over row-major matrices.
//!
//! Rows are batch samples. A [`Graph`] borrows a [`ParamStore`] for the
//! duration of one forward pass; [`Graph::backward`] adds parameter
//! gradients into a [`GradStore`] without resetting it.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::cp_factor::{self, CpModel};
use crate::error::{dim_err, Error, Result};
use crate::moments::{moments_vjp, MomentAccumulator};
use crate::tensor::{gemm, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: Matrix,
}

/// Named parameter matrices with fixed shapes.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Param>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter name {name}")));
        }
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Param { name, value });
        Ok(ParamId(id))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.as_slice().len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
    }

    pub fn rebuild_index(&mut self) {
        self.index = self.params.iter().enumerate().map(|(i, p)| (p.name.clone(), i)).collect();
    }

    pub fn map_values(&mut self, mut f: impl FnMut(f64) -> f64) {
        for p in &mut self.params {
            p.value.as_mut_slice().iter_mut().for_each(|v| *v = f(*v));
        }
    }
}

/// Gradient accumulators parallel to a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradStore {
    grads: Vec<Matrix>,
}

impl GradStore {
    pub fn for_store(store: &ParamStore) -> Self {
        Self {
            grads: store.params.iter().map(|p| Matrix::zeros(p.value.rows(), p.value.cols())).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.grads[id.0]
    }

    pub fn zero(&mut self) {
        for g in &mut self.grads {
            g.as_mut_slice().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.iter().map(Matrix::frob_norm_sq).sum::<f64>().sqrt()
    }

    /// Rescales so the global norm is at most `max_norm`; returns the norm
    /// before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let n = self.global_norm();
        if n > max_norm && n.is_finite() {
            let s = max_norm / n;
            for g in &mut self.grads {
                g.as_mut_slice().iter_mut().for_each(|v| *v *= s);
            }
        }
        n
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().all(Matrix::is_finite)
    }
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Hadamard(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    RowScale(NodeId, Vec<f64>),
    Tanh(NodeId),
    Relu(NodeId),
    LeakyRelu(NodeId, f64),
    Exp(NodeId),
    Square(NodeId),
    SumAll(NodeId),
    MeanAll(NodeId),
    RowSum(NodeId),
    SliceCols(NodeId, usize, usize),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    SoftmaxCe(NodeId, Vec<usize>),
    CpFeatureLoss(NodeId, Box<CpModel>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::AddRow(..) => "add_row",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Hadamard(..) => "hadamard",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::RowScale(..) => "row_scale",
            Op::Tanh(_) => "tanh",
            Op::Relu(_) => "relu",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Exp(_) => "exp",
            Op::Square(_) => "square",
            Op::SumAll(_) => "sum",
            Op::MeanAll(_) => "mean",
            Op::RowSum(_) => "row_sum",
            Op::SliceCols(..) => "slice_cols",
            Op::ConcatCols(_) => "concat_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::SoftmaxCe(..) => "softmax_cross_entropy",
            Op::CpFeatureLoss(..) => "cp_feature_loss",
        }
    }
}

struct Node {
    value: Option<Matrix>,
    op: Op,
    requires_grad: bool,
}

/// One forward pass. Parameters are read from the borrowed store, or treated
/// as constants when registered through [`Graph::frozen_param`].
pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self { store, nodes: Vec::new() }
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        let n = &self.nodes[id.0];
        match (&n.value, &n.op) {
            (Some(v), _) => v,
            (None, Op::Param(p)) => self.store.get(*p),
            _ => unreachable!("node without value"),
        }
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.value(id).as_slice()[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn input(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Input, false)
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            requires_grad: true,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A parameter read as a constant: no gradient is produced for it.
    pub fn frozen_param(&mut self, id: ParamId) -> NodeId {
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            requires_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.rows() {
            return dim_err(format!("matmul {:?} x {:?}", va.shape(), vb.shape()));
        }
        let mut out = Matrix::zeros(va.rows(), vb.cols());
        gemm(false, false, va, vb, 0.0, &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// Adds the `1 × m` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if vb.rows() != 1 || vb.cols() != va.cols() {
            return dim_err(format!("add_row {:?} + {:?}", va.shape(), vb.shape()));
        }
        let mut out = va.clone();
        for r in 0..out.rows() {
            for (o, bv) in out.row_mut(r).iter_mut().zip(vb.as_slice()) {
                *o += bv;
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::AddRow(a, b), rg))
    }

    fn zip(&mut self, a: NodeId, b: NodeId, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<NodeId> {
        let out = self.value(a).zip_map(self.value(b), f)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, op, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip(a, b, Op::Hadamard(a, b), |x, y| x * y)
    }

    fn unary(&mut self, a: NodeId, op: Op, f: impl Fn(f64) -> f64) -> NodeId {
        let out = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(out, op, rg)
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        self.unary(a, Op::Scale(a, s), |x| x * s)
    }

    pub fn add_scalar(&mut self, a: NodeId, s: f64) -> NodeId {
        self.unary(a, Op::AddScalar(a), |x| x + s)
    }

    /// Multiplies row `r` of `a` by `s[r]`.
    pub fn row_scale(&mut self, a: NodeId, s: Vec<f64>) -> Result<NodeId> {
        let va = self.value(a);
        if s.len() != va.rows() {
            return dim_err(format!("row_scale {} factors for {} rows", s.len(), va.rows()));
        }
        let mut out = va.clone();
        for (r, &sr) in s.iter().enumerate() {
            out.row_mut(r).iter_mut().for_each(|v| *v *= sr);
        }
        let rg = self.rg(a);
        Ok(self.push(out, Op::RowScale(a, s), rg))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> NodeId {
        self.unary(a, Op::LeakyRelu(a, slope), |x| if x > 0.0 { x } else { slope * x })
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.value(a).as_slice().iter().sum();
        let rg = self.rg(a);
        self.push(Matrix::filled(1, 1, s), Op::SumAll(a), rg)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let s = v.as_slice().iter().sum::<f64>() / v.as_slice().len().max(1) as f64;
        let rg = self.rg(a);
        self.push(Matrix::filled(1, 1, s), Op::MeanAll(a), rg)
    }

    /// `n × m → n × 1` sums along each row.
    pub fn row_sum(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let data = (0..v.rows()).map(|r| v.row(r).iter().sum()).collect();
        let out = Matrix::from_vec(v.rows(), 1, data).expect("shape");
        let rg = self.rg(a);
        self.push(out, Op::RowSum(a), rg)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let v = self.value(a);
        if start > end || end > v.cols() {
            return dim_err(format!("slice {start}..{end} of {} columns", v.cols()));
        }
        let mut out = Matrix::zeros(v.rows(), end - start);
        for r in 0..v.rows() {
            out.row_mut(r).copy_from_slice(&v.row(r)[start..end]);
        }
        let rg = self.rg(a);
        Ok(self.push(out, Op::SliceCols(a, start, end), rg))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let rows = self.value(parts[0]).rows();
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return dim_err("concat_cols row counts differ");
        }
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut c0 = 0;
            for &p in parts {
                let v = self.value(p);
                out.row_mut(r)[c0..c0 + v.cols()].copy_from_slice(v.row(r));
                c0 += v.cols();
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let cols = self.value(parts[0]).cols();
        if parts.iter().any(|&p| self.value(p).cols() != cols) {
            return dim_err("concat_rows column counts differ");
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).as_slice());
        }
        let rows = data.len() / cols.max(1);
        let out = Matrix::from_vec(rows, cols, data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Mean softmax cross-entropy of `logits` (rows) against class indices.
    pub fn softmax_ce(&mut self, logits: NodeId, targets: Vec<usize>) -> Result<NodeId> {
        let v = self.value(logits);
        if targets.len() != v.rows() {
            return dim_err(format!("{} targets for {} rows", targets.len(), v.rows()));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= v.cols()) {
            return Err(Error::IndexOutOfRange { index: t, len: v.cols() });
        }
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            total += log_sum_exp(v.row(r)) - v.row(r)[t];
        }
        let out = Matrix::filled(1, 1, total / v.rows().max(1) as f64);
        let rg = self.rg(logits);
        Ok(self.push(out, Op::SoftmaxCe(logits, targets), rg))
    }

    /// Factorization loss of the empirical moments of `phi` (rows are
    /// samples) under a fixed CP model, orthogonality term excluded.
    pub fn cp_feature_loss(&mut self, phi: NodeId, model: &CpModel) -> Result<NodeId> {
        let v = self.value(phi);
        let mut acc = MomentAccumulator::new(v.cols());
        acc.accumulate_rows(v)?;
        let moments = acc.finalize()?;
        let loss = cp_factor::loss_l(model, &moments, 0.0)?;
        let rg = self.rg(phi);
        Ok(self.push(Matrix::filled(1, 1, loss), Op::CpFeatureLoss(phi, Box::new(model.clone())), rg))
    }

    /// Reverse sweep from the scalar `root`, adding parameter gradients into
    /// `grads`.
    pub fn backward(&self, root: NodeId, grads: &mut GradStore) -> Result<()> {
        let root_v = self.value(root);
        if root_v.shape() != (1, 1) {
            return dim_err(format!("backward root must be scalar, got {:?}", root_v.shape()));
        }
        if let Some((i, n)) = self.nodes[..=root.0]
            .iter()
            .enumerate()
            .find(|(i, _)| !self.value(NodeId(*i)).is_finite())
        {
            return Err(Error::NonFinite(format!("{} (node {i})", n.op.name())));
        }
        let mut adj: Vec<Option<Matrix>> = vec![None; root.0 + 1];
        adj[root.0] = Some(Matrix::filled(1, 1, 1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(i, &node.op, g, &mut adj, grads)?;
        }
        Ok(())
    }

    fn acc(&self, adj: &mut [Option<Matrix>], id: NodeId, g: Matrix) {
        if !self.rg(id) {
            return;
        }
        match &mut adj[id.0] {
            Some(a) => a.as_mut_slice().iter_mut().zip(g.as_slice()).for_each(|(x, y)| *x += y),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, op: &Op, g: Matrix, adj: &mut [Option<Matrix>], grads: &mut GradStore) -> Result<()> {
        let out = self.value(NodeId(i));
        match op {
            Op::Input => {}
            Op::Param(p) => {
                let dst = grads.get_mut(*p);
                dst.as_mut_slice().iter_mut().zip(g.as_slice()).for_each(|(x, y)| *x += y);
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let mut da = Matrix::zeros(va.rows(), va.cols());
                    gemm(false, true, &g, vb, 0.0, &mut da);
                    self.acc(adj, *a, da);
                }
                if self.rg(*b) {
                    let mut db = Matrix::zeros(vb.rows(), vb.cols());
                    gemm(true, false, va, &g, 0.0, &mut db);
                    self.acc(adj, *b, db);
                }
            }
            Op::AddRow(a, b) => {
                if self.rg(*b) {
                    let mut db = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        db.as_mut_slice().iter_mut().zip(g.row(r)).for_each(|(x, y)| *x += y);
                    }
                    self.acc(adj, *b, db);
                }
                self.acc(adj, *a, g);
            }
            Op::Add(a, b) => {
                self.acc(adj, *b, g.clone());
                self.acc(adj, *a, g);
            }
            Op::Sub(a, b) => {
                self.acc(adj, *b, g.scaled(-1.0));
                self.acc(adj, *a, g);
            }
            Op::Hadamard(a, b) => {
                if self.rg(*a) {
                    self.acc(adj, *a, g.zip_map(self.value(*b), |x, y| x * y)?);
                }
                if self.rg(*b) {
                    self.acc(adj, *b, g.zip_map(self.value(*a), |x, y| x * y)?);
                }
            }
            Op::Scale(a, s) => self.acc(adj, *a, g.scaled(*s)),
            Op::AddScalar(a) => self.acc(adj, *a, g),
            Op::RowScale(a, s) => {
                let mut d = g;
                for (r, &sr) in s.iter().enumerate() {
                    d.row_mut(r).iter_mut().for_each(|v| *v *= sr);
                }
                self.acc(adj, *a, d);
            }
            Op::Tanh(a) => self.acc(adj, *a, g.zip_map(out, |x, y| x * (1.0 - y * y))?),
            Op::Relu(a) => {
                let d = g.zip_map(self.value(*a), |x, y| if y > 0.0 { x } else { 0.0 })?;
                self.acc(adj, *a, d);
            }
            Op::LeakyRelu(a, s) => {
                let d = g.zip_map(self.value(*a), |x, y| if y > 0.0 { x } else { s * x })?;
                self.acc(adj, *a, d);
            }
            Op::Exp(a) => self.acc(adj, *a, g.zip_map(out, |x, y| x * y)?),
            Op::Square(a) => self.acc(adj, *a, g.zip_map(self.value(*a), |x, y| 2.0 * x * y)?),
            Op::SumAll(a) => {
                let (r, c) = self.value(*a).shape();
                self.acc(adj, *a, Matrix::filled(r, c, g.as_slice()[0]));
            }
            Op::MeanAll(a) => {
                let (r, c) = self.value(*a).shape();
                let n = (r * c).max(1) as f64;
                self.acc(adj, *a, Matrix::filled(r, c, g.as_slice()[0] / n));
            }
            Op::RowSum(a) => {
                let (r, c) = self.value(*a).shape();
                let mut d = Matrix::zeros(r, c);
                for row in 0..r {
                    let gv = g.get(row, 0);
                    d.row_mut(row).iter_mut().for_each(|v| *v = gv);
                }
                self.acc(adj, *a, d);
            }
            Op::SliceCols(a, s, e) => {
                let (r, c) = self.value(*a).shape();
                let mut d = Matrix::zeros(r, c);
                for row in 0..r {
                    d.row_mut(row)[*s..*e].copy_from_slice(g.row(row));
                }
                self.acc(adj, *a, d);
            }
            Op::ConcatCols(parts) => {
                let mut c0 = 0;
                for &p in parts {
                    let (r, c) = self.value(p).shape();
                    if self.rg(p) {
                        let mut d = Matrix::zeros(r, c);
                        for row in 0..r {
                            d.row_mut(row).copy_from_slice(&g.row(row)[c0..c0 + c]);
                        }
                        self.acc(adj, p, d);
                    }
                    c0 += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut r0 = 0;
                for &p in parts {
                    let (r, c) = self.value(p).shape();
                    if self.rg(p) {
                        let d = Matrix::from_vec(r, c, g.as_slice()[r0 * c..(r0 + r) * c].to_vec())?;
                        self.acc(adj, p, d);
                    }
                    r0 += r;
                }
            }
            Op::SoftmaxCe(a, targets) => {
                let v = self.value(*a);
                let n = v.rows().max(1) as f64;
                let gs = g.as_slice()[0] / n;
                let mut d = Matrix::zeros(v.rows(), v.cols());
                for (r, &t) in targets.iter().enumerate() {
                    let lse = log_sum_exp(v.row(r));
                    for (c, dv) in d.row_mut(r).iter_mut().enumerate() {
                        let p = (v.get(r, c) - lse).exp();
                        *dv = gs * (p - if c == t { 1.0 } else { 0.0 });
                    }
                }
                self.acc(adj, *a, d);
            }
            Op::CpFeatureLoss(phi, model) => {
                let v = self.value(*phi);
                let mut acc = MomentAccumulator::new(v.cols());
                acc.accumulate_rows(v)?;
                let moments = acc.finalize()?;
                let cot = cp_factor::moment_cotangent(model, &moments)?;
                let d = moments_vjp(v, &cot)?.scaled(g.as_slice()[0]);
                self.acc(adj, *phi, d);
            }
        }
        Ok(())
    }
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    if !m.is_finite() {
        return m;
    }
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Adam without momentum (`β1 = 0`): per-parameter RMS step scaling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmsOptimizer {
    pub lr: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub second_moment: Vec<Matrix>,
}

impl RmsOptimizer {
    pub fn new(store: &ParamStore, lr: f64, beta2: f64) -> Self {
        Self {
            lr,
            beta2,
            eps: 1e-8,
            step: 0,
            second_moment: store.params.iter().map(|p| Matrix::zeros(p.value.rows(), p.value.cols())).collect(),
        }
    }

    /// Applies one update to the parameters selected by `ids`.
    pub fn apply(&mut self, store: &mut ParamStore, grads: &GradStore, ids: &[ParamId]) {
        self.step += 1;
        let bias = 1.0 - self.beta2.powi(self.step.min(i32::MAX as u64) as i32);
        for &id in ids {
            let g = grads.get(id).as_slice();
            let v = self.second_moment[id.0].as_mut_slice();
            let p = store.get_mut(id).as_mut_slice();
            for ((pi, vi), gi) in p.iter_mut().zip(v.iter_mut()).zip(g) {
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                *pi -= self.lr * gi / ((*vi / bias).sqrt() + self.eps);
            }
        }
    }

    pub fn map_state(&mut self, mut f: impl FnMut(f64) -> f64) {
        for m in &mut self.second_moment {
            m.as_mut_slice().iter_mut().for_each(|v| *v = f(*v));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Central differences over every entry of parameter `pid` for a scalar
    /// graph built by `f`.
    fn check_op(store: &ParamStore, pid: ParamId, f: &dyn Fn(&mut Graph) -> NodeId, tol: f64) {
        let mut grads = GradStore::for_store(store);
        {
            let mut g = Graph::new(store);
            let root = f(&mut g);
            g.backward(root, &mut grads).unwrap();
        }
        let h = 1e-6;
        let n = store.get(pid).as_slice().len();
        for i in 0..n {
            let eval = |delta: f64| {
                let mut s = store.clone();
                s.get_mut(pid).as_mut_slice()[i] += delta;
                let mut g = Graph::new(&s);
                let r = f(&mut g);
                g.scalar(r)
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let an = grads.get(pid).as_slice()[i];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-4);
            assert!(rel <= tol, "entry {i}: fd {fd} analytic {an}");
        }
    }

    fn store_with(rng: &mut ChaCha8Rng, shapes: &[(usize, usize)]) -> (ParamStore, Vec<ParamId>) {
        let mut s = ParamStore::new();
        let ids = shapes
            .iter()
            .enumerate()
            .map(|(i, &(r, c))| s.add(format!("p{i}"), rand_matrix(rng, r, c)).unwrap())
            .collect();
        (s, ids)
    }

    #[test]
    fn sum_of_squares_gradient_is_twice_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (s, ids) = store_with(&mut rng, &[(3, 4)]);
        let mut grads = GradStore::for_store(&s);
        let mut g = Graph::new(&s);
        let p = g.param(ids[0]);
        let sq = g.square(p);
        let root = g.sum(sq);
        g.backward(root, &mut grads).unwrap();
        let expect = s.get(ids[0]).scaled(2.0);
        assert_eq!(grads.get(ids[0]), &expect);
        g.backward(root, &mut grads).unwrap();
        assert_eq!(grads.get(ids[0]), &expect.scaled(2.0));
    }

    #[test]
    fn affine_and_activations() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (s, ids) = store_with(&mut rng, &[(4, 3), (1, 3), (5, 4)]);
        let x = rand_matrix(&mut rng, 5, 4);
        for act in 0..4 {
            let f = |g: &mut Graph| {
                let xi = g.param(ids[2]);
                let _ = &x;
                let w = g.param(ids[0]);
                let b = g.param(ids[1]);
                let m = g.matmul(xi, w).unwrap();
                let a = g.add_row(m, b).unwrap();
                let y = match act {
                    0 => g.tanh(a),
                    1 => g.relu(a),
                    2 => g.leaky_relu(a, 0.2),
                    _ => g.exp(a),
                };
                let sq = g.square(y);
                g.mean(sq)
            };
            for &id in &ids {
                check_op(&s, id, &f, 1e-5);
            }
        }
    }

    #[test]
    fn hadamard_scale_rows_slices() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (s, ids) = store_with(&mut rng, &[(3, 4), (3, 4)]);
        let f = |g: &mut Graph| {
            let a = g.param(ids[0]);
            let b = g.param(ids[1]);
            let h = g.hadamard(a, b).unwrap();
            let h = g.add_scalar(h, 1.0);
            let h = g.scale(h, 0.7);
            let h = g.row_scale(h, vec![1.0, -2.0, 0.5]).unwrap();
            let l = g.slice_cols(h, 1, 3).unwrap();
            let r = g.slice_cols(a, 0, 2).unwrap();
            let c = g.concat_cols(&[l, r]).unwrap();
            let d = g.concat_rows(&[c, c]).unwrap();
            let e = g.sub(d, d).unwrap();
            let e = g.add(e, d).unwrap();
            let rs = g.row_sum(e);
            let sq = g.square(rs);
            g.sum(sq)
        };
        check_op(&s, ids[0], &f, 1e-5);
        check_op(&s, ids[1], &f, 1e-5);
    }

    #[test]
    fn softmax_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (s, ids) = store_with(&mut rng, &[(4, 5)]);
        let f = |g: &mut Graph| {
            let a = g.param(ids[0]);
            g.softmax_ce(a, vec![0, 4, 2, 2]).unwrap()
        };
        check_op(&s, ids[0], &f, 1e-5);

        let mut g = Graph::new(&s);
        let z = g.input(Matrix::zeros(2, 8));
        let ce = g.softmax_ce(z, vec![3, 5]).unwrap();
        assert!((g.scalar(ce) - 8f64.ln()).abs() < 1e-12);
        assert!(matches!(g.softmax_ce(z, vec![8, 0]), Err(Error::IndexOutOfRange { .. })));
    }

    #[test]
    fn cp_feature_loss_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (s, ids) = store_with(&mut rng, &[(9, 3)]);
        let model = CpModel::new(
            [-0.9, -1.1, -1.0, -0.8, 2.1],
            vec![0.7, -0.4],
            vec![vec![0.5, -0.2, 0.3], vec![0.1, 0.8, -0.4]],
        )
        .unwrap();
        let f = |g: &mut Graph| {
            let a = g.param(ids[0]);
            let t = g.tanh(a);
            g.cp_feature_loss(t, &model).unwrap()
        };
        check_op(&s, ids[0], &f, 1e-5);
    }

    #[test]
    fn non_finite_values_name_the_op() {
        let mut s = ParamStore::new();
        let id = s.add("p", Matrix::filled(1, 1, 1000.0)).unwrap();
        let mut grads = GradStore::for_store(&s);
        let mut g = Graph::new(&s);
        let p = g.param(id);
        let e = g.exp(p);
        let root = g.sum(e);
        match g.backward(root, &mut grads) {
            Err(Error::NonFinite(msg)) => assert!(msg.contains("exp"), "{msg}"),
            other => panic!("expected non-finite error, got {other:?}"),
        }
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut s = ParamStore::new();
        let id = s.add("p", Matrix::filled(1, 2, 1.0)).unwrap();
        let mut grads = GradStore::for_store(&s);
        let mut g = Graph::new(&s);
        let p = g.frozen_param(id);
        let sq = g.square(p);
        let root = g.sum(sq);
        g.backward(root, &mut grads).unwrap();
        assert_eq!(grads.global_norm(), 0.0);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.add("a", Matrix::zeros(1, 1)).unwrap();
        assert!(s.add("a", Matrix::zeros(1, 1)).is_err());
    }

    #[test]
    fn clipping_bounds_global_norm() {
        let mut s = ParamStore::new();
        let id = s.add("a", Matrix::zeros(1, 2)).unwrap();
        let mut g = GradStore::for_store(&s);
        g.get_mut(id).as_mut_slice().copy_from_slice(&[30.0, 40.0]);
        assert_eq!(g.clip_global_norm(10.0), 50.0);
        assert!((g.global_norm() - 10.0).abs() < 1e-12);
    }
}
