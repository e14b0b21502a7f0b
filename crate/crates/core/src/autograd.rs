//! Tape-based reverse-mode differentiation over [`Matrix`] values.
//!
//! A [`Graph`] borrows a [`ParamSet`], records every operation applied to its
//! nodes, and on [`Graph::backward`] walks the tape in reverse to produce
//! per-parameter gradients. Graphs are cheap and built fresh per example.

use std::collections::HashMap;

use crate::params::{Gradients, ParamSet};
use crate::tensor::{log_sum_exp, Matrix};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(String),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Swish(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    Im2Col {
        x: Var,
        kernel: usize,
        stride: usize,
    },
    DepthwiseConv {
        x: Var,
        w: Var,
        pad: usize,
    },
    Gather(Var, Vec<usize>),
    WeightedSum(Vec<(Var, f64)>),
    /// Scalar loss with a precomputed gradient w.r.t. its input.
    Loss(Var, Matrix),
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
    param_vars: HashMap<String, Var>,
    track: bool,
}

impl<'p> Graph<'p> {
    /// Graph that records parameter gradients.
    pub fn new(params: &'p ParamSet) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            track: true,
        }
    }

    /// Graph for inference only; `backward` yields no gradients.
    pub fn inference(params: &'p ParamSet) -> Self {
        Self {
            track: false,
            ..Self::new(params)
        }
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.len(), 1);
        m.data()[0]
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn input(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Input, false)
    }

    /// Looks up a parameter by name. Panics if it is missing: model code
    /// only asks for names it created.
    pub fn param(&mut self, name: &str) -> Var {
        if let Some(&v) = self.param_vars.get(name) {
            return v;
        }
        let value = self
            .params
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
            .clone();
        let v = self.push(value, Op::Param(name.to_string()), self.track);
        self.param_vars.insert(name.to_string(), v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_nt(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMulNt(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Add(a, b), ng)
    }

    /// Adds the `1 x n` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let bias = self.value(b);
        assert_eq!(bias.rows(), 1);
        assert_eq!(bias.cols(), self.value(a).cols());
        let mut value = self.value(a).clone();
        let bias = bias.row(0).to_vec();
        for r in 0..value.rows() {
            for (x, b) in value.row_mut(r).iter_mut().zip(&bias) {
                *x += b;
            }
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::AddRow(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape());
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let value = Matrix::from_vec(va.rows(), va.cols(), data);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x * s);
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, s), ng)
    }

    /// Adds a constant matrix (e.g. an attention mask); gradient passes through.
    pub fn add_const(&mut self, a: Var, c: &Matrix) -> Var {
        let mut value = self.value(a).clone();
        value.add_assign(c);
        let ng = self.ng(a);
        self.push(value, Op::AddConst(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        let ng = self.ng(a);
        self.push(value, Op::Relu(a), ng)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let value = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        let ng = self.ng(a);
        self.push(value, Op::LeakyRelu(a, slope), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let ng = self.ng(a);
        self.push(value, Op::Sigmoid(a), ng)
    }

    /// `x · σ(x)`
    pub fn swish(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * sigmoid(x));
        let ng = self.ng(a);
        self.push(value, Op::Swish(a), ng)
    }

    /// Row-wise layer normalisation with learned `1 x n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        const EPS: f64 = 1e-5;
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let mut xhat = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + EPS).sqrt();
            inv_std.push(is);
            for (o, v) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
        }
        let g = self.value(gamma).row(0).to_vec();
        let b = self.value(beta).row(0).to_vec();
        let mut value = xhat.clone();
        for r in 0..rows {
            for ((o, g), b) in value.row_mut(r).iter_mut().zip(&g).zip(&b) {
                *o = *o * g + b;
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        )
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for r in 0..value.rows() {
            let lse = log_sum_exp(value.row(r));
            for v in value.row_mut(r) {
                *v = (*v - lse).exp();
            }
        }
        let ng = self.ng(a);
        self.push(value, Op::SoftmaxRows(a), ng)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let value = crate::tensor::log_softmax_rows(self.value(a));
        let ng = self.ng(a);
        self.push(value, Op::LogSoftmaxRows(a), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        assert!(start + len <= av.cols());
        let mut value = Matrix::zeros(av.rows(), len);
        for r in 0..av.rows() {
            value
                .row_mut(r)
                .copy_from_slice(&av.row(r)[start..start + len]);
        }
        let ng = self.ng(a);
        self.push(value, Op::SliceCols(a, start), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut value = Matrix::zeros(rows, total);
        let mut off = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows(), rows);
            for r in 0..rows {
                value.row_mut(r)[off..off + pv.cols()].copy_from_slice(pv.row(r));
            }
            off += pv.cols();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), ng)
    }

    /// Unfolds `T x C` into `T' x (kernel·C)` windows, `T' = (T − kernel)/stride + 1`.
    /// Inputs shorter than the kernel are zero-padded on the right to one window.
    pub fn im2col(&mut self, x: Var, kernel: usize, stride: usize) -> Var {
        let xv = self.value(x);
        let (t, c) = xv.shape();
        let t_out = conv_out_len(t, kernel, stride);
        let mut value = Matrix::zeros(t_out, kernel * c);
        for o in 0..t_out {
            for k in 0..kernel {
                let src = o * stride + k;
                if src < t {
                    value.row_mut(o)[k * c..(k + 1) * c].copy_from_slice(xv.row(src));
                }
            }
        }
        let ng = self.ng(x);
        self.push(value, Op::Im2Col { x, kernel, stride }, ng)
    }

    /// Per-channel convolution over time with 'same' padding; `w` is `kernel x C`.
    pub fn depthwise_conv(&mut self, x: Var, w: Var) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let (t, c) = xv.shape();
        let kernel = wv.rows();
        assert_eq!(wv.cols(), c);
        assert!(kernel % 2 == 1, "depthwise kernel must be odd");
        let pad = kernel / 2;
        let mut value = Matrix::zeros(t, c);
        for o in 0..t {
            for k in 0..kernel {
                let src = o as isize + k as isize - pad as isize;
                if src < 0 || src >= t as isize {
                    continue;
                }
                let xr = xv.row(src as usize);
                let wr = wv.row(k);
                for ((out, xx), ww) in value.row_mut(o).iter_mut().zip(xr).zip(wr) {
                    *out += xx * ww;
                }
            }
        }
        let ng = self.ng(x) || self.ng(w);
        self.push(value, Op::DepthwiseConv { x, w, pad }, ng)
    }

    /// Row lookup (embedding).
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let tv = self.value(table);
        let mut value = Matrix::zeros(ids.len(), tv.cols());
        for (r, &id) in ids.iter().enumerate() {
            value.row_mut(r).copy_from_slice(tv.row(id));
        }
        let ng = self.ng(table);
        self.push(value, Op::Gather(table, ids.to_vec()), ng)
    }

    /// `Σ wᵢ · xᵢ` over `1 x 1` scalars.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let total = terms.iter().map(|&(v, w)| w * self.scalar(v)).sum();
        let ng = terms.iter().any(|&(v, _)| self.ng(v));
        self.push(
            Matrix::from_vec(1, 1, vec![total]),
            Op::WeightedSum(terms.to_vec()),
            ng,
        )
    }

    /// Records a scalar loss of `input` whose gradient w.r.t. `input` was
    /// computed outside the graph.
    pub fn loss(&mut self, input: Var, value: f64, grad: Matrix) -> Var {
        assert_eq!(grad.shape(), self.value(input).shape());
        let ng = self.ng(input);
        self.push(Matrix::from_vec(1, 1, vec![value]), Op::Loss(input, grad), ng)
    }

    /// Back-propagates from the scalar `root` and returns parameter gradients.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut out = Gradients::new();
        if !self.ng(root) {
            return out;
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Matrix::filled(1, 1, 1.0));
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads, &mut out);
        }
        out
    }

    fn propagate(
        &self,
        node: &Node,
        g: &Matrix,
        grads: &mut [Option<Matrix>],
        out: &mut Gradients,
    ) {
        let send = |v: Var, delta: Matrix, grads: &mut [Option<Matrix>]| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Input => {}
            Op::Param(name) => out.accumulate(name, g),
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    send(*a, g.matmul_nt(self.value(*b)), grads);
                }
                if self.ng(*b) {
                    send(*b, self.value(*a).matmul_tn(g), grads);
                }
            }
            Op::MatMulNt(a, b) => {
                // out = a bᵀ: da = g b, db = gᵀ a
                if self.ng(*a) {
                    send(*a, g.matmul(self.value(*b)), grads);
                }
                if self.ng(*b) {
                    send(*b, g.matmul_tn(self.value(*a)), grads);
                }
            }
            Op::Add(a, b) => {
                send(*a, g.clone(), grads);
                send(*b, g.clone(), grads);
            }
            Op::AddRow(a, b) => {
                send(*a, g.clone(), grads);
                let mut db = Matrix::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (d, x) in db.row_mut(0).iter_mut().zip(g.row(r)) {
                        *d += x;
                    }
                }
                send(*b, db, grads);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    send(*a, zip_map(g, vb, |x, y| x * y), grads);
                }
                if self.ng(*b) {
                    send(*b, zip_map(g, va, |x, y| x * y), grads);
                }
            }
            Op::Scale(a, s) => send(*a, g.map(|x| x * s), grads),
            Op::AddConst(a) => send(*a, g.clone(), grads),
            Op::Relu(a) => {
                let d = zip_map(g, self.value(*a), |gg, x| if x > 0.0 { gg } else { 0.0 });
                send(*a, d, grads);
            }
            Op::LeakyRelu(a, slope) => {
                let d = zip_map(g, self.value(*a), |gg, x| if x > 0.0 { gg } else { gg * slope });
                send(*a, d, grads);
            }
            Op::Sigmoid(a) => {
                let d = zip_map(g, &node.value, |gg, y| gg * y * (1.0 - y));
                send(*a, d, grads);
            }
            Op::Swish(a) => {
                let d = zip_map(g, self.value(*a), |gg, x| {
                    let s = sigmoid(x);
                    gg * (s + x * s * (1.0 - s))
                });
                send(*a, d, grads);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (rows, cols) = g.shape();
                let gam = self.value(*gamma).row(0);
                if self.ng(*gamma) || self.ng(*beta) {
                    let mut dg = Matrix::zeros(1, cols);
                    let mut db = Matrix::zeros(1, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            dg.data_mut()[c] += g.get(r, c) * xhat.get(r, c);
                            db.data_mut()[c] += g.get(r, c);
                        }
                    }
                    send(*gamma, dg, grads);
                    send(*beta, db, grads);
                }
                if self.ng(*x) {
                    let n = cols as f64;
                    let mut dx = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        let dxhat: Vec<f64> = (0..cols).map(|c| g.get(r, c) * gam[c]).collect();
                        let mean_d = dxhat.iter().sum::<f64>() / n;
                        let mean_dx = dxhat
                            .iter()
                            .enumerate()
                            .map(|(c, d)| d * xhat.get(r, c))
                            .sum::<f64>()
                            / n;
                        for c in 0..cols {
                            dx.set(
                                r,
                                c,
                                inv_std[r] * (dxhat[c] - mean_d - xhat.get(r, c) * mean_dx),
                            );
                        }
                    }
                    send(*x, dx, grads);
                }
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut d = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(a, b)| a * b).sum();
                    for c in 0..y.cols() {
                        d.set(r, c, y.get(r, c) * (g.get(r, c) - dot));
                    }
                }
                send(*a, d, grads);
            }
            Op::LogSoftmaxRows(a) => {
                let y = &node.value;
                let mut d = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let gs: f64 = g.row(r).iter().sum();
                    for c in 0..y.cols() {
                        d.set(r, c, g.get(r, c) - y.get(r, c).exp() * gs);
                    }
                }
                send(*a, d, grads);
            }
            Op::SliceCols(a, start) => {
                let av = self.value(*a);
                let mut d = Matrix::zeros(av.rows(), av.cols());
                for r in 0..g.rows() {
                    d.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                send(*a, d, grads);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let cols = self.value(p).cols();
                    if self.ng(p) {
                        let mut d = Matrix::zeros(g.rows(), cols);
                        for r in 0..g.rows() {
                            d.row_mut(r).copy_from_slice(&g.row(r)[off..off + cols]);
                        }
                        send(p, d, grads);
                    }
                    off += cols;
                }
            }
            Op::Im2Col { x, kernel, stride } => {
                let (t, c) = self.value(*x).shape();
                let mut d = Matrix::zeros(t, c);
                for o in 0..g.rows() {
                    for k in 0..*kernel {
                        let src = o * stride + k;
                        if src < t {
                            let gr = &g.row(o)[k * c..(k + 1) * c];
                            for (dd, gg) in d.row_mut(src).iter_mut().zip(gr) {
                                *dd += gg;
                            }
                        }
                    }
                }
                send(*x, d, grads);
            }
            Op::DepthwiseConv { x, w, pad } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (t, c) = xv.shape();
                let kernel = wv.rows();
                let mut dx = Matrix::zeros(t, c);
                let mut dw = Matrix::zeros(kernel, c);
                for o in 0..t {
                    for k in 0..kernel {
                        let src = o as isize + k as isize - *pad as isize;
                        if src < 0 || src >= t as isize {
                            continue;
                        }
                        let src = src as usize;
                        for ch in 0..c {
                            let gg = g.get(o, ch);
                            dx.data_mut()[src * c + ch] += gg * wv.get(k, ch);
                            dw.data_mut()[k * c + ch] += gg * xv.get(src, ch);
                        }
                    }
                }
                send(*x, dx, grads);
                send(*w, dw, grads);
            }
            Op::Gather(table, ids) => {
                let tv = self.value(*table);
                let mut d = Matrix::zeros(tv.rows(), tv.cols());
                for (r, &id) in ids.iter().enumerate() {
                    for (dd, gg) in d.row_mut(id).iter_mut().zip(g.row(r)) {
                        *dd += gg;
                    }
                }
                send(*table, d, grads);
            }
            Op::WeightedSum(terms) => {
                let up = g.data()[0];
                for &(v, w) in terms {
                    send(v, Matrix::filled(1, 1, up * w), grads);
                }
            }
            Op::Loss(input, lg) => {
                let up = g.data()[0];
                send(*input, lg.map(|x| x * up), grads);
            }
        }
    }
}

/// Output length of a valid (unpadded) 1-D convolution; at least one window.
pub fn conv_out_len(t: usize, kernel: usize, stride: usize) -> usize {
    if t < kernel {
        1
    } else {
        (t - kernel) / stride + 1
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn zip_map(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Matrix::from_vec(a.rows(), a.cols(), data)
}
