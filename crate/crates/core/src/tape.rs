//! Define-by-run reverse-mode autodiff over 2-D tensors.
//!
//! Every forward pass records onto a fresh [`Tape`]. Nodes are appended in
//! evaluation order, so parents always precede children and a single reverse
//! sweep visits each node once. Parameters enter the tape through
//! [`Tape::param`], which binds a [`ParamId`] to a leaf once per tape.
//!
//! Vectors are `1 × n` matrices and scalars are `1 × 1`.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{contract, shape_err, Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise function and its derivative, the latter given `(x, y)`.
pub type UnaryFn<T> = fn(T) -> T;
pub type UnaryDeriv<T> = fn(T, T) -> T;

enum Op<T> {
    Leaf,
    Param,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    ScaleBy(Var, Var, usize),
    AddConst(Var),
    MulConst(Var, Vec<T>),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Unary(Var, UnaryDeriv<T>),
    Slice {
        x: Var,
        r0: usize,
        c0: usize,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    SumAll(Var),
    MeanAll(Var),
    MeanRows(Var),
    SqDistPairs(Var, Vec<(usize, usize)>),
    L2NormalizeRows(Var, Vec<T>),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Option<Vec<bool>>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation. Build one per forward pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    bound: BTreeMap<ParamId, Var>,
    grad_enabled: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bound: BTreeMap::new(),
            grad_enabled: true,
        }
    }

    /// A tape that records values only; nothing on it requires a gradient.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    /// Value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn as_matrix(t: Tensor<T>) -> Tensor<T> {
        if t.shape().len() == 2 {
            t
        } else {
            let (r, c) = (t.rows(), t.cols());
            Tensor::matrix(r, c, t.into_data())
        }
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(Self::as_matrix(t), Op::Leaf, false)
    }

    /// Input whose gradient is reported by [`Gradients::of`].
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(Self::as_matrix(t), Op::Leaf, true)
    }

    /// Binds a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let t = Self::as_matrix(store.get(id).clone());
        let rg = !store.is_frozen(id);
        let v = self.push(t, Op::Param, rg);
        self.bound.insert(id, v);
        v
    }

    // ----- linear algebra ---------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(shape_err(
                "matmul",
                self.value(a).shape(),
                self.value(b).shape(),
            ));
        }
        let out = mm(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::matrix(m, n, out), Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let src = self.value(a).data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.rg(&[a]);
        self.push(Tensor::matrix(n, m, out), Op::Transpose(a), rg)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err(op, self.value(a).shape(), self.value(b).shape()));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let (m, n) = self.shape(a);
        let rg = self.rg(&[a, b]);
        self.push(Tensor::matrix(m, n, out), op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    /// `x[m×n] + b[1×n]`, broadcasting `b` over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (m, n) = self.shape(x);
        if self.shape(b) != (1, n) {
            return Err(shape_err("add_row", self.value(x).shape(), self.value(b).shape()));
        }
        let bias = self.value(b).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(n) {
            for (o, &bb) in row.iter_mut().zip(bias) {
                *o = *o + bb;
            }
        }
        let rg = self.rg(&[x, b]);
        Ok(self.push(Tensor::matrix(m, n, out), Op::AddRow(x, b), rg))
    }

    /// `x · w + b` for `w[in×out]`, `b[1×out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let t = self.value(x).map(|v| v * c);
        let rg = self.rg(&[x]);
        self.push(t, Op::Scale(x, c), rg)
    }

    /// `x * s[idx]` where `s` is a `1 × k` node.
    pub fn scale_by(&mut self, x: Var, s: Var, idx: usize) -> Result<Var> {
        let sv = self.value(s);
        if sv.rows() != 1 || idx >= sv.cols() {
            return Err(contract(format!(
                "scale_by index {idx} outside {:?}",
                sv.shape()
            )));
        }
        let c = sv.data()[idx];
        let t = self.value(x).map(|v| v * c);
        let rg = self.rg(&[x, s]);
        Ok(self.push(t, Op::ScaleBy(x, s, idx), rg))
    }

    pub fn add_const(&mut self, x: Var, c: &Tensor<T>) -> Result<Var> {
        if c.numel() != self.value(x).numel() {
            return Err(shape_err("add_const", self.value(x).shape(), c.shape()));
        }
        let (m, n) = self.shape(x);
        let out = self
            .value(x)
            .data()
            .iter()
            .zip(c.data())
            .map(|(&a, &b)| a + b)
            .collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::matrix(m, n, out), Op::AddConst(x), rg))
    }

    pub fn mul_const(&mut self, x: Var, c: Vec<T>) -> Result<Var> {
        if c.len() != self.value(x).numel() {
            return Err(shape_err("mul_const", self.value(x).shape(), &[c.len()]));
        }
        let (m, n) = self.shape(x);
        let out = self
            .value(x)
            .data()
            .iter()
            .zip(&c)
            .map(|(&a, &b)| a * b)
            .collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::matrix(m, n, out), Op::MulConst(x, c), rg))
    }

    // ----- nonlinearities ---------------------------------------------------

    /// Softmax over the last axis, stabilised by subtracting the row max.
    pub fn softmax(&mut self, x: Var) -> Var {
        let (m, n) = self.shape(x);
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::matrix(m, n, out), Op::Softmax(x), rg)
    }

    /// Per-row normalisation with epsilon 1e-5, then `gamma ⊙ x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (m, n) = self.shape(x);
        if self.shape(gamma) != (1, n) || self.shape(beta) != (1, n) {
            return Err(shape_err(
                "layer_norm",
                self.value(x).shape(),
                self.value(gamma).shape(),
            ));
        }
        let eps = T::from_f64(LAYER_NORM_EPS);
        let nf = T::from_f64(n as f64);
        let xs = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![T::zero(); m * n];
        let mut rstd = vec![T::zero(); m];
        let mut out = vec![T::zero(); m * n];
        for r in 0..m {
            let row = &xs[r * n..(r + 1) * n];
            let mean = row.iter().fold(T::zero(), |a, &v| a + v) / nf;
            let var = row
                .iter()
                .fold(T::zero(), |a, &v| a + (v - mean) * (v - mean))
                / nf;
            let rs = T::one() / (var + eps).det_sqrt();
            rstd[r] = rs;
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                xhat[r * n + c] = h;
                out[r * n + c] = g[c] * h + b[c];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::matrix(m, n, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Elementwise map with a user-supplied derivative `d(x, y)`.
    pub fn unary(&mut self, x: Var, f: UnaryFn<T>, deriv: UnaryDeriv<T>) -> Var {
        let t = self.value(x).map(f);
        let rg = self.rg(&[x]);
        self.push(t, Op::Unary(x, deriv), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(
            x,
            |v| if v > T::zero() { v } else { T::zero() },
            |v, _| if v > T::zero() { T::one() } else { T::zero() },
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, gelu_value, gelu_deriv)
    }

    // ----- structure --------------------------------------------------------

    /// Block `[r0, r0+rows) × [c0, c0+cols)`.
    pub fn slice(&mut self, x: Var, r0: usize, rows: usize, c0: usize, cols: usize) -> Result<Var> {
        let (m, n) = self.shape(x);
        if rows == 0 || cols == 0 || r0 + rows > m || c0 + cols > n {
            return Err(contract(format!(
                "slice [{r0}+{rows}, {c0}+{cols}] outside {m}x{n}"
            )));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(rows * cols);
        for r in r0..r0 + rows {
            out.extend_from_slice(&src[r * n + c0..r * n + c0 + cols]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::matrix(rows, cols, out), Op::Slice { x, r0, c0 }, rg))
    }

    pub fn rows(&mut self, x: Var, r0: usize, rows: usize) -> Result<Var> {
        let n = self.shape(x).1;
        self.slice(x, r0, rows, 0, n)
    }

    pub fn cols(&mut self, x: Var, c0: usize, cols: usize) -> Result<Var> {
        let m = self.shape(x).0;
        self.slice(x, 0, m, c0, cols)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| contract("concat_rows of nothing"))?;
        let n = self.shape(first).1;
        let mut out = Vec::new();
        let mut m = 0;
        for &p in parts {
            let (pm, pn) = self.shape(p);
            if pn != n {
                return Err(shape_err(
                    "concat_rows",
                    self.value(first).shape(),
                    self.value(p).shape(),
                ));
            }
            out.extend_from_slice(self.value(p).data());
            m += pm;
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::matrix(m, n, out), Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| contract("concat_cols of nothing"))?;
        let m = self.shape(first).0;
        let mut n = 0;
        for &p in parts {
            if self.shape(p).0 != m {
                return Err(shape_err(
                    "concat_cols",
                    self.value(first).shape(),
                    self.value(p).shape(),
                ));
            }
            n += self.shape(p).1;
        }
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::matrix(m, n, out), Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Rows of `x` picked by index (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.shape(x);
        if idx.is_empty() {
            return Err(contract("gather_rows with no indices"));
        }
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            if i >= m {
                return Err(contract(format!("gather_rows index {i} >= {m}")));
            }
            out.extend_from_slice(self.value(x).row(i));
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::matrix(idx.len(), n, out),
            Op::GatherRows(x, idx.to_vec()),
            rg,
        ))
    }

    // ----- reductions -------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().fold(T::zero(), |a, &v| a + v);
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().fold(T::zero(), |a, &v| a + v) / T::from_f64(t.numel() as f64);
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::MeanAll(x), rg)
    }

    /// Column-wise mean: `m × n → 1 × n`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let (m, n) = self.shape(x);
        let mut out = vec![T::zero(); n];
        for row in self.value(x).data().chunks(n) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o = *o + v;
            }
        }
        let mf = T::from_f64(m as f64);
        out.iter_mut().for_each(|o| *o = *o / mf);
        let rg = self.rg(&[x]);
        self.push(Tensor::matrix(1, n, out), Op::MeanRows(x), rg)
    }

    /// `‖x_i − x_j‖²` for each pair, as a `1 × pairs` row.
    pub fn sq_dist_pairs(&mut self, x: Var, pairs: &[(usize, usize)]) -> Result<Var> {
        let (m, n) = self.shape(x);
        if pairs.is_empty() {
            return Err(contract("sq_dist_pairs with no pairs"));
        }
        let xs = self.value(x);
        let mut out = Vec::with_capacity(pairs.len());
        for &(i, j) in pairs {
            if i >= m || j >= m {
                return Err(contract(format!("pair ({i}, {j}) outside {m} rows")));
            }
            let d = xs
                .row(i)
                .iter()
                .zip(xs.row(j))
                .fold(T::zero(), |a, (&p, &q)| a + (p - q) * (p - q));
            out.push(d);
        }
        let _ = n;
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::matrix(1, pairs.len(), out),
            Op::SqDistPairs(x, pairs.to_vec()),
            rg,
        ))
    }

    /// Divides each row by its Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.shape(x);
        let mut out = self.value(x).data().to_vec();
        let mut norms = Vec::with_capacity(m);
        for row in out.chunks_mut(n) {
            let norm = row.iter().fold(T::zero(), |a, &v| a + v * v).det_sqrt();
            if !(norm > T::zero()) || !norm.is_finite() {
                return Err(Error::Numeric("cannot normalise a zero-norm row".into()));
            }
            row.iter_mut().for_each(|v| *v = *v / norm);
            norms.push(norm);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::matrix(m, n, out), Op::L2NormalizeRows(x, norms), rg))
    }

    /// Mean softmax cross-entropy of `logits[B×K]` against class indices.
    ///
    /// With a mask, entries where the mask is `false` are dropped from that
    /// row's partition function. Every target entry must be unmasked.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        mask: Option<Vec<bool>>,
    ) -> Result<Var> {
        let (b, k) = self.shape(logits);
        if targets.len() != b {
            return Err(shape_err("cross_entropy", self.value(logits).shape(), &[targets.len()]));
        }
        if let Some(mk) = &mask {
            if mk.len() != b * k {
                return Err(shape_err("cross_entropy mask", self.value(logits).shape(), &[mk.len()]));
            }
        }
        let z = self.value(logits).data();
        let mut probs = vec![T::zero(); b * k];
        let mut total = T::zero();
        for r in 0..b {
            let t = targets[r];
            if t >= k {
                return Err(contract(format!("target class {t} out of range 0..{k}")));
            }
            let allowed = |c: usize| mask.as_ref().map_or(true, |mk| mk[r * k + c]);
            if !allowed(t) {
                return Err(contract("cross_entropy target is masked out"));
            }
            let row = &z[r * k..(r + 1) * k];
            let mx = (0..k)
                .filter(|&c| allowed(c))
                .map(|c| row[c])
                .fold(T::neg_infinity(), T::max);
            let mut denom = T::zero();
            for c in (0..k).filter(|&c| allowed(c)) {
                let e = (row[c] - mx).det_exp();
                probs[r * k + c] = e;
                denom = denom + e;
            }
            for c in 0..k {
                probs[r * k + c] = probs[r * k + c] / denom;
            }
            total = total + (denom.det_ln() + mx - row[t]);
        }
        let loss = total / T::from_f64(b as f64);
        if !loss.is_finite() {
            return Err(Error::Numeric("non-finite cross-entropy".into()));
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask,
                probs,
            },
            rg,
        ))
    }

    // ----- backward ---------------------------------------------------------

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.backprop(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        let mut params = BTreeMap::new();
        for (&id, &v) in &self.bound {
            if v.0 <= loss.0 && self.nodes[v.0].requires_grad {
                if let Some(g) = grads[v.0].take() {
                    params.insert(id, g);
                }
            }
        }
        Ok(Gradients {
            nodes: grads,
            params,
        })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let n = node.value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn acc(&self, grads: &mut [Option<Vec<T>>], v: Var, contrib: impl Fn(usize) -> T) {
        if let Some(s) = self.slot(grads, v) {
            for (i, o) in s.iter_mut().enumerate() {
                *o = *o + contrib(i);
            }
        }
    }

    fn backprop(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.shape(*a);
                let n = self.shape(*b).1;
                if self.nodes[a.0].requires_grad {
                    let da = mm_nt(g, self.value(*b).data(), m, n, k);
                    self.acc(grads, *a, |j| da[j]);
                }
                if self.nodes[b.0].requires_grad {
                    let db = mm_tn(self.value(*a).data(), g, k, m, n);
                    self.acc(grads, *b, |j| db[j]);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = self.shape(*a);
                // g is n×m
                self.acc(grads, *a, |j| {
                    let (r, c) = (j / n, j % n);
                    g[c * m + r]
                });
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, |j| g[j]);
                self.acc(grads, *b, |j| g[j]);
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |j| g[j]);
                self.acc(grads, *b, |j| -g[j]);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |j| g[j] * bv[j]);
                self.acc(grads, *b, |j| g[j] * av[j]);
            }
            Op::AddRow(x, b) => {
                self.acc(grads, *x, |j| g[j]);
                let n = self.shape(*b).1;
                if let Some(s) = self.slot(grads, *b) {
                    for row in g.chunks(n) {
                        for (o, &v) in s.iter_mut().zip(row) {
                            *o = *o + v;
                        }
                    }
                }
            }
            Op::Scale(x, c) => {
                let c = *c;
                self.acc(grads, *x, |j| g[j] * c);
            }
            Op::ScaleBy(x, s, idx) => {
                let c = self.value(*s).data()[*idx];
                self.acc(grads, *x, |j| g[j] * c);
                let xv = self.value(*x).data();
                let dot = g.iter().zip(xv).fold(T::zero(), |a, (&p, &q)| a + p * q);
                if let Some(sl) = self.slot(grads, *s) {
                    sl[*idx] = sl[*idx] + dot;
                }
            }
            Op::AddConst(x) => self.acc(grads, *x, |j| g[j]),
            Op::MulConst(x, c) => self.acc(grads, *x, |j| g[j] * c[j]),
            Op::Softmax(x) => {
                let n = node.value.cols();
                let mut dx = vec![T::zero(); y.len()];
                for ((dxr, yr), gr) in dx.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                    let dot = yr.iter().zip(gr).fold(T::zero(), |a, (&p, &q)| a + p * q);
                    for c in 0..n {
                        dxr[c] = yr[c] * (gr[c] - dot);
                    }
                }
                self.acc(grads, *x, |j| dx[j]);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = node.value.cols();
                let gm = self.value(*gamma).data();
                if self.nodes[x.0].requires_grad {
                    let nf = T::from_f64(n as f64);
                    let mut dx = vec![T::zero(); y.len()];
                    for (r, (dxr, (gr, hr))) in dx
                        .chunks_mut(n)
                        .zip(g.chunks(n).zip(xhat.chunks(n)))
                        .enumerate()
                    {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for c in 0..n {
                            let dh = gr[c] * gm[c];
                            s1 = s1 + dh;
                            s2 = s2 + dh * hr[c];
                        }
                        let (m1, m2) = (s1 / nf, s2 / nf);
                        for c in 0..n {
                            let dh = gr[c] * gm[c];
                            dxr[c] = rstd[r] * (dh - m1 - hr[c] * m2);
                        }
                    }
                    self.acc(grads, *x, |j| dx[j]);
                }
                if let Some(s) = self.slot(grads, *gamma) {
                    for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for c in 0..n {
                            s[c] = s[c] + gr[c] * hr[c];
                        }
                    }
                }
                if let Some(s) = self.slot(grads, *beta) {
                    for gr in g.chunks(n) {
                        for c in 0..n {
                            s[c] = s[c] + gr[c];
                        }
                    }
                }
            }
            Op::Unary(x, d) => {
                let xv = self.value(*x).data();
                let d = *d;
                self.acc(grads, *x, |j| g[j] * d(xv[j], y[j]));
            }
            Op::Slice { x, r0, c0 } => {
                let (rows, cols) = (node.value.rows(), node.value.cols());
                let n = self.shape(*x).1;
                if let Some(s) = self.slot(grads, *x) {
                    for r in 0..rows {
                        let dst = &mut s[(r0 + r) * n + c0..(r0 + r) * n + c0 + cols];
                        for (o, &v) in dst.iter_mut().zip(&g[r * cols..(r + 1) * cols]) {
                            *o = *o + v;
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    self.acc(grads, p, |j| g[off + j]);
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let n = node.value.cols();
                let mut c0 = 0;
                for &p in parts {
                    let pn = self.shape(p).1;
                    self.acc(grads, p, |j| {
                        let (r, c) = (j / pn, j % pn);
                        g[r * n + c0 + c]
                    });
                    c0 += pn;
                }
            }
            Op::GatherRows(x, idx) => {
                let n = node.value.cols();
                if let Some(s) = self.slot(grads, *x) {
                    for (k, &r) in idx.iter().enumerate() {
                        for c in 0..n {
                            s[r * n + c] = s[r * n + c] + g[k * n + c];
                        }
                    }
                }
            }
            Op::SumAll(x) => {
                let g0 = g[0];
                self.acc(grads, *x, |_| g0);
            }
            Op::MeanAll(x) => {
                let g0 = g[0] / T::from_f64(self.value(*x).numel() as f64);
                self.acc(grads, *x, |_| g0);
            }
            Op::MeanRows(x) => {
                let (m, n) = self.shape(*x);
                let mf = T::from_f64(m as f64);
                self.acc(grads, *x, |j| g[j % n] / mf);
            }
            Op::SqDistPairs(x, pairs) => {
                let n = self.shape(*x).1;
                let xv = self.value(*x);
                if let Some(s) = self.slot(grads, *x) {
                    let two = T::from_f64(2.0);
                    for (p, &(a, b)) in pairs.iter().enumerate() {
                        for c in 0..n {
                            let d = two * (xv.at(a, c) - xv.at(b, c)) * g[p];
                            s[a * n + c] = s[a * n + c] + d;
                            s[b * n + c] = s[b * n + c] - d;
                        }
                    }
                }
            }
            Op::L2NormalizeRows(x, norms) => {
                let n = node.value.cols();
                let mut dx = vec![T::zero(); y.len()];
                for (r, (dxr, (yr, gr))) in dx
                    .chunks_mut(n)
                    .zip(y.chunks(n).zip(g.chunks(n)))
                    .enumerate()
                {
                    let dot = yr.iter().zip(gr).fold(T::zero(), |a, (&p, &q)| a + p * q);
                    for c in 0..n {
                        dxr[c] = (gr[c] - yr[c] * dot) / norms[r];
                    }
                }
                self.acc(grads, *x, |j| dx[j]);
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
            } => {
                let k = self.shape(*logits).1;
                let scale = g[0] / T::from_f64(targets.len() as f64);
                self.acc(grads, *logits, |j| {
                    let (r, c) = (j / k, j % k);
                    if mask.as_ref().is_some_and(|mk| !mk[j]) {
                        return T::zero();
                    }
                    let onehot = if targets[r] == c { T::one() } else { T::zero() };
                    (probs[j] - onehot) * scale
                });
            }
        }
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    nodes: Vec<Option<Vec<T>>>,
    params: BTreeMap<ParamId, Vec<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient w.r.t. a node, or `None` if the loss does not depend on it.
    pub fn of(&self, v: Var) -> Option<&[T]> {
        self.nodes.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&[T]> {
        self.params.get(&id).map(|g| g.as_slice())
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[T])> {
        self.params.iter().map(|(&k, v)| (k, v.as_slice()))
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - mx).det_exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

fn gelu_value<T: Scalar>(x: T) -> T {
    let k = T::from_f64(GELU_K);
    let c = T::from_f64(GELU_C);
    let half = T::from_f64(0.5);
    half * x * (T::one() + (k * (x + c * x * x * x)).det_tanh())
}

fn gelu_deriv<T: Scalar>(x: T, _y: T) -> T {
    let k = T::from_f64(GELU_K);
    let c = T::from_f64(GELU_C);
    let half = T::from_f64(0.5);
    let t = (k * (x + c * x * x * x)).det_tanh();
    half * (T::one() + t)
        + half * x * (T::one() - t * t) * k * (T::one() + T::from_f64(3.0) * c * x * x)
}

/// `a[m×k] · b[k×n]`.
pub(crate) fn mm<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in crow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    c
}

/// `a[m×k] · b[n×k]ᵀ`.
pub(crate) fn mm_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut bt = vec![T::zero(); k * n];
    for j in 0..n {
        for p in 0..k {
            bt[p * n + j] = b[j * k + p];
        }
    }
    mm(a, &bt, m, k, n)
}

/// `a[k×m]ᵀ · b[k×n]`.
pub(crate) fn mm_tn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = arow[i];
            if av == T::zero() {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (o, &bv) in crow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    c
}
