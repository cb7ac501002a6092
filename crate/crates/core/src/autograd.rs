//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Tape`] records every operation of one forward pass. Calling
//! [`Tape::backward`] on a scalar node walks the tape in reverse and returns
//! the gradient of that scalar with respect to every parameter that was
//! pulled onto the tape with [`Tape::param`].

use alloc::vec;
use alloc::vec::Vec;

use crate::params::{ParamId, ParamStore};
use crate::tensor::{dot, Matrix};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Identity,
    Tanh,
    Sigmoid,
    Relu,
    LeakyRelu(f64),
    Gelu,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Act(Var, Activation),
    Transpose(Var),
    HCat(Vec<Var>),
    VCat(Vec<Var>),
    Gather(Var, Vec<usize>),
    ShiftRows(Var, isize),
    SliceCols(Var, usize, usize),
    MeanRows(Var),
    SumAll(Var),
    SoftmaxRows(Var),
    MaxRows(Var, Vec<usize>),
    MulColBroadcast(Var, Var),
    SegmentSum(Var, Vec<usize>),
    SegmentSoftmax(Var, Vec<usize>),
    BlockDot(Var, Var, usize),
    BceWithLogits(Var, Matrix),
    BernoulliKl(Var, Vec<f64>, f64),
    SoftmaxNll(Var, Vec<Option<usize>>),
    Mse(Var, Matrix),
}

struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Gradients of a scalar with respect to parameters, indexed by [`ParamId`].
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Matrix> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Matrix)> {
        self.grads.iter().enumerate().filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    /// Adds `other` into `self`, parameter by parameter.
    pub fn accumulate(&mut self, other: &Gradients) {
        if self.grads.len() < other.grads.len() {
            self.grads.resize(other.grads.len(), None);
        }
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                match &mut self.grads[i] {
                    Some(acc) => acc.add_assign(g),
                    slot @ None => *slot = Some(g.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.iter_mut().flatten() {
            *g = g.scale(s);
        }
    }

    /// Global L2 norm, summed in parameter order.
    pub fn global_norm(&self) -> f64 {
        libm::sqrt(self.grads.iter().flatten().map(Matrix::norm_sq).sum())
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(Matrix::is_finite)
    }
}

/// Records a forward computation for later differentiation.
pub struct Tape<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<Var>>,
    leaf_params: Vec<(Var, ParamId)>,
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * core::f64::consts::FRAC_1_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * core::f64::consts::FRAC_1_SQRT_2));
    let pdf = libm::exp(-0.5 * x * x) / libm::sqrt(2.0 * core::f64::consts::PI);
    cdf + x * pdf
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Tanh => libm::tanh(x),
            Activation::Sigmoid => sigmoid(x),
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu(slope) => {
                if x > 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            Activation::Gelu => gelu(x),
        }
    }

    /// Derivative given the input `x` and output `y`.
    fn grad(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu(slope) => {
                if x > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Activation::Gelu => gelu_grad(x),
        }
    }
}

fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in v.iter_mut() {
        *x = libm::exp(*x - max);
        total += *x;
    }
    for x in v.iter_mut() {
        *x /= total;
    }
}

/// Row-wise softmax of a plain matrix.
pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    out
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + libm::log1p(libm::exp(-libm::fabs(x)))
}

/// `p·ln(p/q) + (1−p)·ln((1−p)/(1−q))` with `0·ln 0 = 0`.
pub fn bernoulli_kl(p: f64, q: f64) -> f64 {
    let term = |a: f64, b: f64| if a <= 0.0 { 0.0 } else { a * libm::log(a / b) };
    term(p, q) + term(1.0 - p, 1.0 - q)
}

impl<'s> Tape<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self { store, nodes: Vec::new(), param_nodes: vec![None; store.len()], leaf_params: Vec::new() }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf, false)
    }

    /// Pulls a parameter onto the tape. Each parameter appears at most once
    /// per tape, so repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.0] {
            return v;
        }
        let entry = self.store.entry(id);
        let v = self.push(entry.value.clone(), Op::Leaf, entry.trainable);
        self.param_nodes[id.0] = Some(v);
        self.leaf_params.push((v, id));
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b), rg)
    }

    /// Adds a `1 × n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (rows, cols) = self.shape(a);
        assert_eq!(self.shape(row), (1, cols), "add_row expects a 1×n row");
        let mut value = self.value(a).clone();
        let r = self.value(row).row(0).to_vec();
        for i in 0..rows {
            for (x, b) in value.row_mut(i).iter_mut().zip(&r) {
                *x += b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        self.push(value, Op::AddRow(a, row), rg)
    }

    /// `x · W + b` with `W: in × out` and `b: 1 × out`.
    pub fn linear(&mut self, x: Var, w: ParamId, b: Option<ParamId>) -> Var {
        let w = self.param(w);
        let y = self.matmul(x, w);
        match b {
            Some(b) => {
                let b = self.param(b);
                self.add_row(y, b)
            }
            None => y,
        }
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, s), rg)
    }

    pub fn act(&mut self, a: Var, f: Activation) -> Var {
        if f == Activation::Identity {
            return a;
        }
        let value = self.value(a).map(|x| f.apply(x));
        let rg = self.rg(a);
        self.push(value, Op::Act(a, f), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.act(a, Activation::Tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.act(a, Activation::Sigmoid)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(value, Op::Transpose(a), rg)
    }

    /// Concatenates along columns; all inputs must share a row count.
    pub fn hcat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.shape(parts[0]).0;
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut value = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let src = self.value(p);
                assert_eq!(src.rows(), rows, "hcat row mismatch");
                value.row_mut(r)[off..off + src.cols()].copy_from_slice(src.row(r));
                off += src.cols();
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(value, Op::HCat(parts.to_vec()), rg)
    }

    /// Concatenates along rows; all inputs must share a column count.
    pub fn vcat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.shape(parts[0]).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let src = self.value(p);
            assert_eq!(src.cols(), cols, "vcat column mismatch");
            data.extend_from_slice(src.data());
            rows += src.rows();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Matrix::from_vec(rows, cols, data), Op::VCat(parts.to_vec()), rg)
    }

    /// Selects rows by index (repetition allowed).
    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Var {
        let src = self.value(a);
        let cols = src.cols();
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            data.extend_from_slice(src.row(i));
        }
        let rg = self.rg(a);
        self.push(Matrix::from_vec(idx.len(), cols, data), Op::Gather(a, idx.to_vec()), rg)
    }

    pub fn row(&mut self, a: Var, r: usize) -> Var {
        self.gather(a, &[r])
    }

    /// `out[r] = a[r + offset]`, zero where out of range.
    pub fn shift_rows(&mut self, a: Var, offset: isize) -> Var {
        let src = self.value(a);
        let (rows, cols) = src.shape();
        let mut value = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let s = r as isize + offset;
            if s >= 0 && (s as usize) < rows {
                value.row_mut(r).copy_from_slice(src.row(s as usize));
            }
        }
        let rg = self.rg(a);
        self.push(value, Op::ShiftRows(a, offset), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let src = self.value(a);
        let rows = src.rows();
        assert!(start <= end && end <= src.cols());
        let mut value = Matrix::zeros(rows, end - start);
        for r in 0..rows {
            value.row_mut(r).copy_from_slice(&src.row(r)[start..end]);
        }
        let rg = self.rg(a);
        self.push(value, Op::SliceCols(a, start, end), rg)
    }

    /// Column-wise mean over rows, `1 × n`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let (rows, cols) = src.shape();
        assert!(rows > 0, "mean of zero rows");
        let mut value = Matrix::zeros(1, cols);
        for r in 0..rows {
            for (o, x) in value.row_mut(0).iter_mut().zip(src.row(r)) {
                *o += x;
            }
        }
        let value = value.scale(1.0 / rows as f64);
        let rg = self.rg(a);
        self.push(value, Op::MeanRows(a), rg)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Matrix::filled(1, 1, self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::SumAll(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a));
        let rg = self.rg(a);
        self.push(value, Op::SoftmaxRows(a), rg)
    }

    /// Column-wise max over rows, `1 × n`. Ties resolve to the first row.
    pub fn max_rows(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let (rows, cols) = src.shape();
        assert!(rows > 0, "max of zero rows");
        let mut arg = vec![0usize; cols];
        let mut value = Matrix::zeros(1, cols);
        for c in 0..cols {
            let mut best = src.get(0, c);
            for r in 1..rows {
                if src.get(r, c) > best {
                    best = src.get(r, c);
                    arg[c] = r;
                }
            }
            value.set(0, c, best);
        }
        let rg = self.rg(a);
        self.push(value, Op::MaxRows(a, arg), rg)
    }

    /// Scales row `e` of `x` by the scalar `w[e, 0]`.
    pub fn mul_col_broadcast(&mut self, x: Var, w: Var) -> Var {
        let (rows, _) = self.shape(x);
        assert_eq!(self.shape(w), (rows, 1));
        let mut value = self.value(x).clone();
        for r in 0..rows {
            let s = self.value(w).get(r, 0);
            for v in value.row_mut(r) {
                *v *= s;
            }
        }
        let rg = self.rg(x) || self.rg(w);
        self.push(value, Op::MulColBroadcast(x, w), rg)
    }

    /// Sums rows into `n_segments` buckets: `out[seg[e]] += x[e]`.
    pub fn segment_sum(&mut self, x: Var, seg: &[usize], n_segments: usize) -> Var {
        let src = self.value(x);
        assert_eq!(src.rows(), seg.len());
        let mut value = Matrix::zeros(n_segments, src.cols());
        for (e, &s) in seg.iter().enumerate() {
            for (o, v) in value.row_mut(s).iter_mut().zip(src.row(e)) {
                *o += v;
            }
        }
        let rg = self.rg(x);
        self.push(value, Op::SegmentSum(x, seg.to_vec()), rg)
    }

    /// Softmax of an `E × 1` column within each segment.
    pub fn segment_softmax(&mut self, s: Var, seg: &[usize], n_segments: usize) -> Var {
        let src = self.value(s);
        assert_eq!(src.shape(), (seg.len(), 1));
        let mut max = vec![f64::NEG_INFINITY; n_segments];
        for (e, &g) in seg.iter().enumerate() {
            max[g] = max[g].max(src.get(e, 0));
        }
        let mut total = vec![0.0; n_segments];
        let mut value = Matrix::zeros(seg.len(), 1);
        for (e, &g) in seg.iter().enumerate() {
            let v = libm::exp(src.get(e, 0) - max[g]);
            value.set(e, 0, v);
            total[g] += v;
        }
        for (e, &g) in seg.iter().enumerate() {
            value.set(e, 0, value.get(e, 0) / total[g]);
        }
        let rg = self.rg(s);
        self.push(value, Op::SegmentSoftmax(s, seg.to_vec()), rg)
    }

    /// `out[p, r] = Σ_j x[p, r·d + j] · t[p, j]` for `x: P × (R·d)`, `t: P × d`.
    pub fn block_dot(&mut self, x: Var, t: Var, blocks: usize) -> Var {
        let xv = self.value(x);
        let tv = self.value(t);
        let (p, d) = tv.shape();
        assert_eq!(xv.shape(), (p, blocks * d), "block_dot shape mismatch");
        let mut value = Matrix::zeros(p, blocks);
        for i in 0..p {
            let xr = xv.row(i);
            let tr = tv.row(i);
            for r in 0..blocks {
                value.set(i, r, dot(&xr[r * d..(r + 1) * d], tr));
            }
        }
        let rg = self.rg(x) || self.rg(t);
        self.push(value, Op::BlockDot(x, t, blocks), rg)
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against 0/1 targets.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Matrix) -> Var {
        let z = self.value(logits);
        assert_eq!(z.shape(), targets.shape());
        let n = z.len().max(1) as f64;
        let total: f64 = z.data().iter().zip(targets.data()).map(|(&z, &y)| softplus(z) - y * z).sum();
        let rg = self.rg(logits);
        self.push(Matrix::filled(1, 1, total / n), Op::BceWithLogits(logits, targets), rg)
    }

    /// `Σ_k KL(Bernoulli(p_k) ‖ Bernoulli(q_k))` with `q = clamp(sigmoid(logit), eps, 1−eps)`.
    pub fn bernoulli_kl_sum(&mut self, logits: Var, teacher: Vec<f64>, eps: f64) -> Var {
        let z = self.value(logits);
        assert_eq!(z.len(), teacher.len());
        let total: f64 = z
            .data()
            .iter()
            .zip(&teacher)
            .map(|(&z, &p)| bernoulli_kl(p, sigmoid(z).clamp(eps, 1.0 - eps)))
            .sum();
        let rg = self.rg(logits);
        self.push(Matrix::filled(1, 1, total), Op::BernoulliKl(logits, teacher, eps), rg)
    }

    /// Summed negative log-likelihood of row-wise softmax; rows with `None`
    /// targets contribute nothing.
    pub fn softmax_nll_sum(&mut self, scores: Var, targets: Vec<Option<usize>>) -> Var {
        let s = self.value(scores);
        assert_eq!(s.rows(), targets.len());
        let mut total = 0.0;
        if s.cols() > 0 {
            let probs = softmax_rows(s);
            for (r, t) in targets.iter().enumerate() {
                if let Some(t) = *t {
                    total -= libm::log(probs.get(r, t));
                }
            }
        }
        let rg = self.rg(scores);
        self.push(Matrix::filled(1, 1, total), Op::SoftmaxNll(scores, targets), rg)
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, a: Var, target: Matrix) -> Var {
        let v = self.value(a);
        assert_eq!(v.shape(), target.shape());
        let n = v.len().max(1) as f64;
        let total: f64 = v.data().iter().zip(target.data()).map(|(x, y)| (x - y) * (x - y)).sum();
        let rg = self.rg(a);
        self.push(Matrix::filled(1, 1, total / n), Op::Mse(a, target), rg)
    }

    /// Backpropagates from a `1 × 1` node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward expects a scalar");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }

        let mut out = Gradients { grads: vec![None; self.store.len()] };
        for &(v, id) in &self.leaf_params {
            if self.nodes[v.0].requires_grad {
                out.grads[id.0] = grads[v.0].take();
            }
        }
        out
    }

    fn backprop_node(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let mut acc = |v: Var, delta: Matrix| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    acc(*a, g.matmul_t(self.value(*b)));
                }
                if self.rg(*b) {
                    acc(*b, self.value(*a).t_matmul(g));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    acc(*a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.rg(*b) {
                    acc(*b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                if self.rg(*row) {
                    let mut s = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, x) in s.row_mut(0).iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                    acc(*row, s);
                }
            }
            Op::Scale(a, s) => acc(*a, g.scale(*s)),
            Op::Act(a, f) => {
                let x = self.value(*a);
                let y = &node.value;
                let mut d = g.clone();
                for ((d, &x), &y) in d.data_mut().iter_mut().zip(x.data()).zip(y.data()) {
                    *d *= f.grad(x, y);
                }
                acc(*a, d);
            }
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::HCat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (rows, cols) = self.shape(p);
                    if self.rg(p) {
                        let mut d = Matrix::zeros(rows, cols);
                        for r in 0..rows {
                            d.row_mut(r).copy_from_slice(&g.row(r)[off..off + cols]);
                        }
                        acc(p, d);
                    }
                    off += cols;
                }
            }
            Op::VCat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let rows = self.shape(p).0;
                    if self.rg(p) {
                        acc(p, g.slice_rows(off, off + rows));
                    }
                    off += rows;
                }
            }
            Op::Gather(a, idx) => {
                let (rows, cols) = self.shape(*a);
                let mut d = Matrix::zeros(rows, cols);
                for (r, &i) in idx.iter().enumerate() {
                    for (o, x) in d.row_mut(i).iter_mut().zip(g.row(r)) {
                        *o += x;
                    }
                }
                acc(*a, d);
            }
            Op::ShiftRows(a, offset) => {
                let (rows, cols) = self.shape(*a);
                let mut d = Matrix::zeros(rows, cols);
                for r in 0..rows {
                    let s = r as isize + offset;
                    if s >= 0 && (s as usize) < rows {
                        d.row_mut(s as usize).copy_from_slice(g.row(r));
                    }
                }
                acc(*a, d);
            }
            Op::SliceCols(a, start, end) => {
                let (rows, cols) = self.shape(*a);
                let mut d = Matrix::zeros(rows, cols);
                for r in 0..rows {
                    d.row_mut(r)[*start..*end].copy_from_slice(g.row(r));
                }
                acc(*a, d);
            }
            Op::MeanRows(a) => {
                let (rows, cols) = self.shape(*a);
                let inv = 1.0 / rows as f64;
                let mut d = Matrix::zeros(rows, cols);
                for r in 0..rows {
                    for (o, x) in d.row_mut(r).iter_mut().zip(g.row(0)) {
                        *o = x * inv;
                    }
                }
                acc(*a, d);
            }
            Op::SumAll(a) => {
                let (rows, cols) = self.shape(*a);
                acc(*a, Matrix::filled(rows, cols, g.scalar()));
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut d = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let gy = dot(g.row(r), y.row(r));
                    for c in 0..y.cols() {
                        d.set(r, c, y.get(r, c) * (g.get(r, c) - gy));
                    }
                }
                acc(*a, d);
            }
            Op::MaxRows(a, arg) => {
                let (rows, cols) = self.shape(*a);
                let mut d = Matrix::zeros(rows, cols);
                for (c, &r) in arg.iter().enumerate() {
                    d.set(r, c, g.get(0, c));
                }
                acc(*a, d);
            }
            Op::MulColBroadcast(x, w) => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                if self.rg(*x) {
                    let mut d = g.clone();
                    for r in 0..d.rows() {
                        let s = wv.get(r, 0);
                        for v in d.row_mut(r) {
                            *v *= s;
                        }
                    }
                    acc(*x, d);
                }
                if self.rg(*w) {
                    let mut d = Matrix::zeros(wv.rows(), 1);
                    for r in 0..wv.rows() {
                        d.set(r, 0, dot(g.row(r), xv.row(r)));
                    }
                    acc(*w, d);
                }
            }
            Op::SegmentSum(x, seg) => {
                let cols = self.shape(*x).1;
                let mut d = Matrix::zeros(seg.len(), cols);
                for (e, &s) in seg.iter().enumerate() {
                    d.row_mut(e).copy_from_slice(g.row(s));
                }
                acc(*x, d);
            }
            Op::SegmentSoftmax(s, seg) => {
                let y = &node.value;
                let n_seg = seg.iter().copied().max().map_or(0, |m| m + 1);
                let mut gy = vec![0.0; n_seg];
                for (e, &k) in seg.iter().enumerate() {
                    gy[k] += g.get(e, 0) * y.get(e, 0);
                }
                let mut d = Matrix::zeros(seg.len(), 1);
                for (e, &k) in seg.iter().enumerate() {
                    d.set(e, 0, y.get(e, 0) * (g.get(e, 0) - gy[k]));
                }
                acc(*s, d);
            }
            Op::BlockDot(x, t, blocks) => {
                let xv = self.value(*x);
                let tv = self.value(*t);
                let (p, dim) = tv.shape();
                if self.rg(*x) {
                    let mut dx = Matrix::zeros(p, blocks * dim);
                    for i in 0..p {
                        for r in 0..*blocks {
                            let gr = g.get(i, r);
                            for j in 0..dim {
                                dx.set(i, r * dim + j, gr * tv.get(i, j));
                            }
                        }
                    }
                    acc(*x, dx);
                }
                if self.rg(*t) {
                    let mut dt = Matrix::zeros(p, dim);
                    for i in 0..p {
                        for r in 0..*blocks {
                            let gr = g.get(i, r);
                            for j in 0..dim {
                                dt.set(i, j, dt.get(i, j) + gr * xv.get(i, r * dim + j));
                            }
                        }
                    }
                    acc(*t, dt);
                }
            }
            Op::BceWithLogits(z, targets) => {
                let zv = self.value(*z);
                let n = zv.len().max(1) as f64;
                let s = g.scalar() / n;
                acc(*z, zv.zip_map(targets, |z, y| (sigmoid(z) - y) * s));
            }
            Op::BernoulliKl(z, teacher, eps) => {
                let zv = self.value(*z);
                let s = g.scalar();
                let mut d = Matrix::zeros(zv.rows(), zv.cols());
                for (k, (dv, &zz)) in d.data_mut().iter_mut().zip(zv.data()).enumerate() {
                    let q = sigmoid(zz);
                    // Clamped outputs are locally constant.
                    if q > *eps && q < 1.0 - *eps {
                        *dv = s * (q - teacher[k]);
                    }
                }
                acc(*z, d);
            }
            Op::SoftmaxNll(scores, targets) => {
                let sv = self.value(*scores);
                let s = g.scalar();
                let mut d = Matrix::zeros(sv.rows(), sv.cols());
                if sv.cols() > 0 {
                    let probs = softmax_rows(sv);
                    for (r, t) in targets.iter().enumerate() {
                        if let Some(t) = *t {
                            for c in 0..sv.cols() {
                                let onehot = if c == t { 1.0 } else { 0.0 };
                                d.set(r, c, s * (probs.get(r, c) - onehot));
                            }
                        }
                    }
                }
                acc(*scores, d);
            }
            Op::Mse(a, target) => {
                let v = self.value(*a);
                let n = v.len().max(1) as f64;
                let s = 2.0 * g.scalar() / n;
                acc(*a, v.zip_map(target, |x, y| (x - y) * s));
            }
        }
    }
}
