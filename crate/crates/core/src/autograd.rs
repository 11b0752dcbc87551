//! A small reverse-mode automatic differentiation tape over [`Matrix`].
//!
//! Nodes are appended in evaluation order, so a single reverse sweep over
//! the node list is a valid topological order for backpropagation. Nodes
//! whose inputs never reach a gradient-carrying leaf are skipped, which is
//! what keeps the frozen backbone cheap: its weights enter as constants and
//! only activation gradients flow through it.

use crate::tensor::{dot, Matrix};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    /// Adds a `1 x n` row to every row of `a`.
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Abs(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Matrix,
        rstd: Vec<f64>,
    },
    Softmax(Var),
    LogSoftmax(Var),
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    MeanRows(Var),
    RowSum(Var),
    SumAll(Var),
    Gather(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Records operations for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`, or `None` when `v` does not require
    /// gradients or does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(v, Op::MatMul(a, b), rg)
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_t(self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(v, Op::MatMulT(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1, "add_row expects a 1 x n row");
        let mut v = self.value(a).clone();
        assert_eq!(v.cols(), r.cols(), "add_row width");
        for i in 0..v.rows() {
            for (x, &b) in v.row_mut(i).iter_mut().zip(r.row(0)) {
                *x += b;
            }
        }
        let rg = self.rg(&[a, row]);
        self.push(v, Op::AddRow(a, row), rg)
    }

    /// `x · w + b` with `w` of shape `(in, out)` and `b` a `1 x out` row.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_row(y, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scaled(s);
        let rg = self.rg(&[a]);
        self.push(v, Op::Scale(a, s), rg)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        let rg = self.rg(&[a]);
        self.push(v, Op::AddConst(a), rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::abs);
        let rg = self.rg(&[a]);
        self.push(v, Op::Abs(a), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(gelu);
        let rg = self.rg(&[a]);
        self.push(v, Op::Gelu(a), rg)
    }

    /// Row-wise layer normalization with affine `1 x n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let g = self.value(gain).row(0).to_vec();
        let b = self.value(bias).row(0).to_vec();
        let mut xhat = Matrix::zeros(rows, cols);
        let mut out = Matrix::zeros(rows, cols);
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd.push(rs);
            let xh = xhat.row_mut(r);
            for (h, &v) in xh.iter_mut().zip(row) {
                *h = (v - mean) * rs;
            }
            let o = out.row_mut(r);
            for c in 0..cols {
                o[c] = xh[c] * g[c] + b[c];
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        )
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut out = Matrix::zeros(av.rows(), av.cols());
        for r in 0..av.rows() {
            out.row_mut(r).copy_from_slice(&crate::tensor::softmax(av.row(r)));
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::Softmax(a), rg)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut out = Matrix::zeros(av.rows(), av.cols());
        for r in 0..av.rows() {
            let row = av.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
            for (o, &x) in out.row_mut(r).iter_mut().zip(row) {
                *o = x - lse;
            }
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::LogSoftmax(a), rg)
    }

    /// L2-normalizes each row. Zero rows stay zero; callers that must reject
    /// them check beforehand.
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = xv.clone();
        let mut norms = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let n = dot(xv.row(r), xv.row(r)).sqrt();
            norms.push(n);
            if n > 0.0 {
                out.row_mut(r).iter_mut().for_each(|v| *v /= n);
            }
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::NormalizeRows { x, norms }, rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Matrix::vstack(&mats).expect("concat_rows widths");
        let rg = self.rg(parts);
        self.push(v, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let pv = self.value(p);
                assert_eq!(pv.rows(), rows, "concat_cols heights");
                out.row_mut(r)[off..off + pv.cols()].copy_from_slice(pv.row(r));
                off += pv.cols();
            }
        }
        let rg = self.rg(parts);
        self.push(out, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice_rows(start, len);
        let rg = self.rg(&[a]);
        self.push(v, Op::SliceRows(a, start), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        let mut out = Matrix::zeros(av.rows(), len);
        for r in 0..av.rows() {
            out.row_mut(r).copy_from_slice(&av.row(r)[start..start + len]);
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::SliceCols(a, start), rg)
    }

    /// Mean over rows, producing a `1 x n` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut out = Matrix::zeros(1, av.cols());
        for r in 0..av.rows() {
            for (o, &x) in out.row_mut(0).iter_mut().zip(av.row(r)) {
                *o += x;
            }
        }
        let n = av.rows() as f64;
        out.data_mut().iter_mut().for_each(|x| *x /= n);
        let rg = self.rg(&[a]);
        self.push(out, Op::MeanRows(a), rg)
    }

    /// Sum of each row, producing a column.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = av.iter_rows().map(|r| r.iter().sum()).collect();
        let out = Matrix::from_vec(av.rows(), 1, data).expect("row_sum");
        let rg = self.rg(&[a]);
        self.push(out, Op::RowSum(a), rg)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(&[a]);
        self.push(Matrix::scalar(s), Op::SumAll(a), rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Picks `a[i, idx[i]]` for every row, producing a column.
    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Var {
        let av = self.value(a);
        assert_eq!(av.rows(), idx.len(), "gather index count");
        let data = idx.iter().enumerate().map(|(i, &j)| av.get(i, j)).collect();
        let out = Matrix::from_vec(idx.len(), 1, data).expect("gather");
        let rg = self.rg(&[a]);
        self.push(out, Op::Gather(a, idx.to_vec()), rg)
    }

    /// Backpropagates from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        // Only keep gradients of leaves and interior nodes that need them.
        Gradients { grads }
    }

    fn propagate(&self, i: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[i];
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, d: Matrix| accumulate(grads, v, d);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if needs(*a) {
                    acc(*a, g.matmul_t(self.value(*b)));
                }
                if needs(*b) {
                    acc(*b, self.value(*a).t_matmul(g));
                }
            }
            Op::MatMulT(a, b) => {
                // y = a bᵀ: da = g b, db = gᵀ a
                if needs(*a) {
                    acc(*a, g.matmul(self.value(*b)));
                }
                if needs(*b) {
                    acc(*b, g.t_matmul(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                if needs(*a) {
                    acc(*a, g.clone());
                }
                if needs(*b) {
                    acc(*b, g.clone());
                }
            }
            Op::AddRow(a, row) => {
                if needs(*a) {
                    acc(*a, g.clone());
                }
                if needs(*row) {
                    let mut s = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, &x) in s.row_mut(0).iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                    acc(*row, s);
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    acc(*a, g.clone());
                }
                if needs(*b) {
                    acc(*b, g.scaled(-1.0));
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    acc(*a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if needs(*b) {
                    acc(*b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::Scale(a, s) => {
                if needs(*a) {
                    acc(*a, g.scaled(*s));
                }
            }
            Op::AddConst(a) => {
                if needs(*a) {
                    acc(*a, g.clone());
                }
            }
            Op::Abs(a) => {
                if needs(*a) {
                    acc(*a, g.zip_map(self.value(*a), |d, x| d * sign(x)));
                }
            }
            Op::Gelu(a) => {
                if needs(*a) {
                    acc(*a, g.zip_map(self.value(*a), |d, x| d * gelu_grad(x)));
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (rows, cols) = g.shape();
                if needs(*gain) {
                    let mut dg = Matrix::zeros(1, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            dg.data_mut()[c] += g.get(r, c) * xhat.get(r, c);
                        }
                    }
                    acc(*gain, dg);
                }
                if needs(*bias) {
                    let mut db = Matrix::zeros(1, cols);
                    for r in 0..rows {
                        for (o, &v) in db.row_mut(0).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    acc(*bias, db);
                }
                if needs(*x) {
                    let gv = self.value(*gain).row(0);
                    let mut dx = Matrix::zeros(rows, cols);
                    let n = cols as f64;
                    for r in 0..rows {
                        let xh = xhat.row(r);
                        let dxh: Vec<f64> = g.row(r).iter().zip(gv).map(|(a, b)| a * b).collect();
                        let mean_d = dxh.iter().sum::<f64>() / n;
                        let mean_dx = dot(&dxh, xh) / n;
                        for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                            *o = rstd[r] * (dxh[c] - mean_d - xh[c] * mean_dx);
                        }
                    }
                    acc(*x, dx);
                }
            }
            Op::Softmax(a) => {
                if needs(*a) {
                    let y = &node.value;
                    let mut d = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let s = dot(yr, gr);
                        for (c, o) in d.row_mut(r).iter_mut().enumerate() {
                            *o = yr[c] * (gr[c] - s);
                        }
                    }
                    acc(*a, d);
                }
            }
            Op::LogSoftmax(a) => {
                if needs(*a) {
                    let y = &node.value;
                    let mut d = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let gr = g.row(r);
                        let s: f64 = gr.iter().sum();
                        for (c, o) in d.row_mut(r).iter_mut().enumerate() {
                            *o = gr[c] - y.get(r, c).exp() * s;
                        }
                    }
                    acc(*a, d);
                }
            }
            Op::NormalizeRows { x, norms } => {
                if needs(*x) {
                    let y = &node.value;
                    let mut d = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        if norms[r] == 0.0 {
                            continue;
                        }
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let s = dot(yr, gr);
                        for (c, o) in d.row_mut(r).iter_mut().enumerate() {
                            *o = (gr[c] - yr[c] * s) / norms[r];
                        }
                    }
                    acc(*x, d);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).rows();
                    if needs(p) {
                        acc(p, g.slice_rows(off, n));
                    }
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if needs(p) {
                        let mut d = Matrix::zeros(g.rows(), w);
                        for r in 0..g.rows() {
                            d.row_mut(r).copy_from_slice(&g.row(r)[off..off + w]);
                        }
                        acc(p, d);
                    }
                    off += w;
                }
            }
            Op::SliceRows(a, start) => {
                if needs(*a) {
                    let av = self.value(*a);
                    let mut d = Matrix::zeros(av.rows(), av.cols());
                    for r in 0..g.rows() {
                        d.row_mut(start + r).copy_from_slice(g.row(r));
                    }
                    acc(*a, d);
                }
            }
            Op::SliceCols(a, start) => {
                if needs(*a) {
                    let av = self.value(*a);
                    let mut d = Matrix::zeros(av.rows(), av.cols());
                    for r in 0..g.rows() {
                        d.row_mut(r)[*start..start + g.cols()].copy_from_slice(g.row(r));
                    }
                    acc(*a, d);
                }
            }
            Op::MeanRows(a) => {
                if needs(*a) {
                    let av = self.value(*a);
                    let n = av.rows() as f64;
                    let mut d = Matrix::zeros(av.rows(), av.cols());
                    for r in 0..av.rows() {
                        for (o, &x) in d.row_mut(r).iter_mut().zip(g.row(0)) {
                            *o = x / n;
                        }
                    }
                    acc(*a, d);
                }
            }
            Op::RowSum(a) => {
                if needs(*a) {
                    let av = self.value(*a);
                    let mut d = Matrix::zeros(av.rows(), av.cols());
                    for r in 0..av.rows() {
                        let gr = g.get(r, 0);
                        d.row_mut(r).iter_mut().for_each(|x| *x = gr);
                    }
                    acc(*a, d);
                }
            }
            Op::SumAll(a) => {
                if needs(*a) {
                    let av = self.value(*a);
                    acc(*a, Matrix::filled(av.rows(), av.cols(), g.item()));
                }
            }
            Op::Gather(a, idx) => {
                if needs(*a) {
                    let av = self.value(*a);
                    let mut d = Matrix::zeros(av.rows(), av.cols());
                    for (r, &j) in idx.iter().enumerate() {
                        d.set(r, j, g.get(r, 0));
                    }
                    acc(*a, d);
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, d: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&d),
        slot @ None => *slot = Some(d),
    }
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

#[inline]
fn gelu(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    /// Compares the tape gradient of `f` at `x` with central differences.
    fn check(x: Matrix, f: impl Fn(&mut Tape, Var) -> Var) {
        let mut tape = Tape::new();
        let xv = tape.param(x.clone());
        let loss = f(&mut tape, xv);
        let analytic = tape.backward(loss).get(xv).unwrap().clone();
        let h = 1e-6;
        for i in 0..x.len() {
            let eval = |delta: f64| {
                let mut xp = x.clone();
                xp.data_mut()[i] += delta;
                let mut t = Tape::new();
                let v = t.param(xp);
                let l = f(&mut t, v);
                t.value(l).item()
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.data()[i];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            assert!(
                (a - numeric).abs() / denom < 1e-5 || (a - numeric).abs() < 1e-8,
                "element {i}: analytic {a} vs numeric {numeric}"
            );
        }
    }

    #[test]
    fn elementwise_and_reduction_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = random(3, 4, &mut rng);
        check(random(2, 3, &mut rng), |t, x| {
            let wv = t.constant(w.clone());
            let y = t.matmul(x, wv);
            let y = t.gelu(y);
            let y = t.abs(y);
            let y = t.add_const(y, 0.5);
            let y = t.mul(y, y);
            t.sum_all(y)
        });
    }

    #[test]
    fn matmul_t_gradients_on_both_sides() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = random(5, 4, &mut rng);
        check(random(3, 4, &mut rng), |t, x| {
            let bv = t.constant(b.clone());
            let y = t.matmul_t(x, bv);
            let z = t.matmul_t(bv, x);
            let y = t.softmax(y);
            let z = t.log_softmax(z);
            let a = t.mean_all(y);
            let c = t.mean_all(z);
            let s = t.sub(a, c);
            t.scale(s, 3.0)
        });
    }

    #[test]
    fn layer_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = random(1, 5, &mut rng);
        let b = random(1, 5, &mut rng);
        let target = random(4, 5, &mut rng);
        check(random(4, 5, &mut rng), |t, x| {
            let gv = t.constant(g.clone());
            let bv = t.constant(b.clone());
            let y = t.layer_norm(x, gv, bv);
            let tv = t.constant(target.clone());
            let y = t.mul(y, tv);
            t.sum_all(y)
        });
        // and w.r.t. the affine parameters
        let x = random(4, 5, &mut rng);
        check(g.clone(), |t, gv| {
            let xv = t.constant(x.clone());
            let bv = t.param(b.clone());
            let y = t.layer_norm(xv, gv, bv);
            let y = t.mul(y, y);
            t.sum_all(y)
        });
    }

    #[test]
    fn structural_op_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let other = random(2, 6, &mut rng);
        check(random(3, 6, &mut rng), |t, x| {
            let o = t.constant(other.clone());
            let cat = t.concat_rows(&[o, x, o]);
            let mid = t.slice_rows(cat, 1, 4);
            let left = t.slice_cols(mid, 0, 2);
            let right = t.slice_cols(mid, 2, 4);
            let joined = t.concat_cols(&[right, left]);
            let n = t.normalize_rows(joined);
            let m = t.mean_rows(n);
            let r = t.row_sum(joined);
            let picked = t.gather(joined, &[0, 3, 5, 1]);
            let a = t.sum_all(m);
            let b = t.sum_all(r);
            let c = t.sum_all(picked);
            let ab = t.add(a, b);
            t.add(ab, c)
        });
    }

    #[test]
    fn add_row_gradient_reaches_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(3, 4, &mut rng);
        check(random(1, 4, &mut rng), |t, b| {
            let xv = t.constant(x.clone());
            let y = t.add_row(xv, b);
            let y = t.mul(y, y);
            t.sum_all(y)
        });
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let c = t.constant(Matrix::scalar(2.0));
        let p = t.param(Matrix::scalar(3.0));
        let y = t.mul(c, p);
        let g = t.backward(y);
        assert!(g.get(c).is_none());
        assert_eq!(g.get(p).unwrap().item(), 2.0);
    }
}
