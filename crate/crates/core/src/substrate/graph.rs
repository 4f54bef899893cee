//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation as it is evaluated. Nodes are appended
//! in evaluation order, so the tape order is already a topological order and
//! [`Graph::backward`] visits each node exactly once, in reverse.

use std::sync::Arc;

use super::params::{ParamId, ParamStore};
use super::tensor::{gemm_into, Tensor};
use super::SubstrateError;

/// Handle to a node of one [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Relu,
    Gelu,
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Neg,
}

#[derive(Debug)]
enum Op {
    Constant,
    Input,
    Param(ParamId),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { a: Var, row: Var },
    MulCol { a: Var, col: Var },
    Scale(Var, f64),
    AddScalar(Var),
    Unary(Var, Unary),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { a: Var, gamma: Var, beta: Var, xhat: Tensor, inv_std: Vec<f64> },
    Transpose(Var),
    SliceRows { a: Var, start: usize },
    SliceCols { a: Var, start: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Gather { a: Var, index: Vec<usize> },
    Unfold { a: Var, half: usize },
    Sum(Var),
    MeanRows(Var),
    RowDot(Var, Var),
    L2NormRows { a: Var, norms: Vec<f64> },
    Nll { logp: Var, picks: Vec<(usize, usize, f64)> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow { .. } => "add_row",
            Op::MulCol { .. } => "mul_col",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Unary(_, u) => match u {
                Unary::Relu => "relu",
                Unary::Gelu => "gelu",
                Unary::Exp => "exp",
                Unary::Log => "log",
                Unary::Tanh => "tanh",
                Unary::Sigmoid => "sigmoid",
                Unary::Neg => "neg",
            },
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Transpose(_) => "transpose",
            Op::SliceRows { .. } => "slice_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::ConcatCols(_) => "concat_cols",
            Op::Gather { .. } => "gather",
            Op::Unfold { .. } => "unfold",
            Op::Sum(_) => "sum",
            Op::MeanRows(_) => "mean_rows",
            Op::RowDot(..) => "row_dot",
            Op::L2NormRows { .. } => "l2_normalize",
            Op::Nll { .. } => "nll",
        }
    }
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    needs_grad: bool,
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Gradients produced by one backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    pub fn of(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients of every parameter leaf that received one.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().filter_map(|&(id, node)| self.grads[node].as_ref().map(|g| (id, g)))
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    sign_flip: Option<&'static str>,
    no_grad: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), sign_flip: None, no_grad: false }
    }

    /// A graph for inference: parameter leaves never require gradient.
    pub fn inference() -> Self {
        Self { nodes: Vec::new(), sign_flip: None, no_grad: true }
    }

    /// Fault injection for verifier sanity checks: every backward rule of the
    /// named op propagates the negated gradient.
    pub fn inject_sign_flip(&mut self, op: &'static str) {
        self.sign_flip = Some(op);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.push_shared(Arc::new(value), op, needs_grad)
    }

    fn push_shared(&mut self, value: Arc<Tensor>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant, false)
    }

    /// A leaf that receives gradient (used for probes and checks).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, true)
    }

    /// A parameter leaf. Frozen stores produce leaves without gradient.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let value = store.shared_value(id);
        self.push_shared(value, Op::Param(id), !store.is_frozen() && !self.no_grad)
    }

    /// The first node holding a non-finite value, with the op that produced it.
    pub fn first_non_finite(&self) -> Option<(Var, &'static str)> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.all_finite())
            .map(|(i, n)| (Var(i), n.op.name()))
    }

    /// Parameters read by this graph, in first-use order, without repeats.
    pub fn params_used(&self) -> Vec<ParamId> {
        let mut out: Vec<ParamId> = Vec::new();
        for n in &self.nodes {
            if let Op::Param(id) = n.op {
                if !out.contains(&id) {
                    out.push(id);
                }
            }
        }
        out
    }

    pub fn ensure_finite(&self) -> Result<(), SubstrateError> {
        match self.first_non_finite() {
            Some((v, op)) => Err(SubstrateError::NonFinite { op, node: v.0 }),
            None => Ok(()),
        }
    }

    // ---- forward ops ----

    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let out = self.value(a).matmul_t(self.value(b), ta, tb);
        let ng = self.ng(&[a, b]);
        self.push(out, Op::MatMul { a, b, ta, tb }, ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false, false)
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "{} shape mismatch", op.name());
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_vec(va.rows(), va.cols(), data);
        let ng = self.ng(&[a, b]);
        self.push(out, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a `1 × c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (va, vr) = (self.value(a), self.value(row));
        assert_eq!((1, va.cols()), vr.shape(), "add_row expects a 1x{} row", va.cols());
        let mut out = va.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(vr.data()) {
                *o += b;
            }
        }
        let ng = self.ng(&[a, row]);
        self.push(out, Op::AddRow { a, row }, ng)
    }

    /// Scales row `i` of `a` by `col[i]`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (va, vc) = (self.value(a), self.value(col));
        assert_eq!((va.rows(), 1), vc.shape(), "mul_col expects a {}x1 column", va.rows());
        let mut out = va.clone();
        for r in 0..out.rows() {
            let s = vc.data()[r];
            out.row_mut(r).iter_mut().for_each(|v| *v *= s);
        }
        let ng = self.ng(&[a, col]);
        self.push(out, Op::MulCol { a, col }, ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|v| v * s);
        let ng = self.ng(&[a]);
        self.push(out, Op::Scale(a, s), ng)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|v| v + s);
        let ng = self.ng(&[a]);
        self.push(out, Op::AddScalar(a), ng)
    }

    pub fn unary(&mut self, a: Var, u: Unary) -> Var {
        let f: fn(f64) -> f64 = match u {
            Unary::Relu => |x| x.max(0.0),
            Unary::Gelu => |x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()),
            Unary::Exp => f64::exp,
            Unary::Log => f64::ln,
            Unary::Tanh => f64::tanh,
            Unary::Sigmoid => |x| 1.0 / (1.0 + (-x).exp()),
            Unary::Neg => |x| -x,
        };
        let out = self.value(a).map(f);
        let ng = self.ng(&[a]);
        self.push(out, Op::Unary(a, u), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Relu)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Gelu)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Log)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    /// Row softmax. Where `mask` is given (row-major, `true` = attend), masked
    /// entries are exactly zero.
    pub fn softmax_masked(&mut self, a: Var, mask: Option<Arc<Vec<bool>>>) -> Var {
        let va = self.value(a);
        if let Some(m) = &mask {
            assert_eq!(m.len(), va.len(), "softmax mask shape mismatch");
        }
        let mut out = Tensor::zeros(va.rows(), va.cols());
        let c = va.cols();
        for r in 0..va.rows() {
            let row = va.row(r);
            let allowed = |j: usize| mask.as_ref().is_none_or(|m| m[r * c + j]);
            let mut mx = f64::NEG_INFINITY;
            for (j, &v) in row.iter().enumerate() {
                if allowed(j) && v > mx {
                    mx = v;
                }
            }
            if mx == f64::NEG_INFINITY {
                continue;
            }
            let o = out.row_mut(r);
            let mut z = 0.0;
            for j in 0..c {
                if allowed(j) {
                    let e = (row[j] - mx).exp();
                    o[j] = e;
                    z += e;
                }
            }
            o.iter_mut().for_each(|v| *v /= z);
        }
        let ng = self.ng(&[a]);
        self.push(out, Op::Softmax(a), ng)
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        self.softmax_masked(a, None)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let mut out = va.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let ng = self.ng(&[a]);
        self.push(out, Op::LogSoftmax(a), ng)
    }

    /// Row-wise layer normalisation with `1 × c` gain and bias.
    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var) -> Var {
        let va = self.value(a);
        let (n, c) = va.shape();
        let (vg, vb) = (self.value(gamma), self.value(beta));
        assert_eq!(vg.shape(), (1, c));
        assert_eq!(vb.shape(), (1, c));
        let mut xhat = Tensor::zeros(n, c);
        let mut out = Tensor::zeros(n, c);
        let mut inv_std = Vec::with_capacity(n);
        for r in 0..n {
            let row = va.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            for j in 0..c {
                let xh = (row[j] - mean) * is;
                xhat.set(r, j, xh);
                out.set(r, j, xh * vg.data()[j] + vb.data()[j]);
            }
        }
        let ng = self.ng(&[a, gamma, beta]);
        self.push(out, Op::LayerNorm { a, gamma, beta, xhat, inv_std }, ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let ng = self.ng(&[a]);
        self.push(out, Op::Transpose(a), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let va = self.value(a);
        assert!(start + len <= va.rows(), "slice_rows out of range");
        let c = va.cols();
        let out = Tensor::from_vec(len, c, va.data()[start * c..(start + len) * c].to_vec());
        let ng = self.ng(&[a]);
        self.push(out, Op::SliceRows { a, start }, ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let va = self.value(a);
        assert!(start + len <= va.cols(), "slice_cols out of range");
        let mut out = Tensor::zeros(va.rows(), len);
        for r in 0..va.rows() {
            out.row_mut(r).copy_from_slice(&va.row(r)[start..start + len]);
        }
        let ng = self.ng(&[a]);
        self.push(out, Op::SliceCols { a, start }, ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let c = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols(), c, "concat_rows width mismatch");
            data.extend_from_slice(v.data());
            rows += v.rows();
        }
        let ng = self.ng(parts);
        self.push(Tensor::from_vec(rows, c, data), Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let n = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(n, total);
        let mut off = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.rows(), n, "concat_cols height mismatch");
            for r in 0..n {
                out.row_mut(r)[off..off + v.cols()].copy_from_slice(v.row(r));
            }
            off += v.cols();
        }
        let ng = self.ng(parts);
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    /// Row `k` of the result is row `index[k]` of `a` (embedding lookup).
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Var {
        let va = self.value(a);
        let c = va.cols();
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in index {
            assert!(i < va.rows(), "gather index {i} out of range for {} rows", va.rows());
            data.extend_from_slice(va.row(i));
        }
        let ng = self.ng(&[a]);
        self.push(Tensor::from_vec(index.len(), c, data), Op::Gather { a, index: index.to_vec() }, ng)
    }

    /// Row `i` of the result concatenates rows `i-half ..= i+half` of `a`,
    /// with zero rows past either end.
    pub fn unfold(&mut self, a: Var, half: usize) -> Var {
        let va = self.value(a);
        let (n, c) = va.shape();
        let w = 2 * half + 1;
        let mut out = Tensor::zeros(n, w * c);
        for i in 0..n {
            for k in 0..w {
                let src = i as isize + k as isize - half as isize;
                if src >= 0 && (src as usize) < n {
                    out.row_mut(i)[k * c..(k + 1) * c].copy_from_slice(va.row(src as usize));
                }
            }
        }
        let ng = self.ng(&[a]);
        self.push(out, Op::Unfold { a, half }, ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let ng = self.ng(&[a]);
        self.push(out, Op::Sum(a), ng)
    }

    /// Column means, `n × c → 1 × c`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let (n, c) = va.shape();
        let mut out = Tensor::zeros(1, c);
        for r in 0..n {
            for (o, v) in out.data_mut().iter_mut().zip(va.row(r)) {
                *o += v;
            }
        }
        out.scale_assign(1.0 / n as f64);
        let ng = self.ng(&[a]);
        self.push(out, Op::MeanRows(a), ng)
    }

    /// Row-wise dot products, `n × c, n × c → n × 1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "row_dot shape mismatch");
        let data = (0..va.rows()).map(|r| va.row(r).iter().zip(vb.row(r)).map(|(x, y)| x * y).sum()).collect();
        let out = Tensor::from_vec(va.rows(), 1, data);
        let ng = self.ng(&[a, b]);
        self.push(out, Op::RowDot(a, b), ng)
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let mut out = va.clone();
        let mut norms = Vec::with_capacity(va.rows());
        for r in 0..va.rows() {
            let row = out.row_mut(r);
            let nrm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            row.iter_mut().for_each(|v| *v /= nrm);
            norms.push(nrm);
        }
        let ng = self.ng(&[a]);
        self.push(out, Op::L2NormRows { a, norms }, ng)
    }

    /// `-Σ w · logp[r, c]` over `(r, c, w)` picks.
    pub fn nll(&mut self, logp: Var, picks: Vec<(usize, usize, f64)>) -> Var {
        let v = self.value(logp);
        let total: f64 = picks.iter().map(|&(r, c, w)| if w == 0.0 { 0.0 } else { -w * v.get(r, c) }).sum();
        let ng = self.ng(&[logp]);
        self.push(Tensor::scalar(total), Op::Nll { logp, picks }, ng)
    }

    /// Sum of several `1 × 1` scalars.
    pub fn add_all(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let mut acc = parts[0];
        for &p in &parts[1..] {
            acc = self.add(acc, p);
        }
        acc
    }

    // ---- backward ----

    /// Reverse pass from a `1 × 1` output.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.value(output).shape(), (1, 1), "backward needs a scalar output");
        self.backward_with(output, Tensor::scalar(1.0))
    }

    /// Reverse pass seeded with an arbitrary upstream gradient.
    pub fn backward_with(&self, output: Var, seed: Tensor) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed);
        let mut params = Vec::new();
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Op::Param(id) = node.op {
                params.push((id, i));
                continue;
            }
            let Some(mut g) = grads[i].take() else { continue };
            if self.sign_flip == Some(node.op.name()) {
                g.scale_assign(-1.0);
            }
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads, params }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut Tensor)) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            let (r, c) = self.value(v).shape();
            *slot = Some(Tensor::zeros(r, c));
        }
        f(slot.as_mut().expect("initialised above"));
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Constant | Op::Input | Op::Param(_) => {}
            &Op::MatMul { a, b, ta, tb } => {
                let (va, vb) = (self.value(a), self.value(b));
                self.acc(grads, a, |ga| {
                    if ta {
                        gemm_into(vb, tb, g, true, ga, 1.0, 1.0);
                    } else {
                        gemm_into(g, false, vb, !tb, ga, 1.0, 1.0);
                    }
                });
                self.acc(grads, b, |gb| {
                    if tb {
                        gemm_into(g, true, va, ta, gb, 1.0, 1.0);
                    } else {
                        gemm_into(va, !ta, g, false, gb, 1.0, 1.0);
                    }
                });
            }
            &Op::Add(a, b) => {
                self.acc(grads, a, |ga| ga.add_assign(g));
                self.acc(grads, b, |gb| gb.add_assign(g));
            }
            &Op::Sub(a, b) => {
                self.acc(grads, a, |ga| ga.add_assign(g));
                self.acc(grads, b, |gb| {
                    for (o, d) in gb.data_mut().iter_mut().zip(g.data()) {
                        *o -= d;
                    }
                });
            }
            &Op::Mul(a, b) => {
                let (va, vb) = (self.value(a), self.value(b));
                self.acc(grads, a, |ga| {
                    for ((o, d), x) in ga.data_mut().iter_mut().zip(g.data()).zip(vb.data()) {
                        *o += d * x;
                    }
                });
                self.acc(grads, b, |gb| {
                    for ((o, d), x) in gb.data_mut().iter_mut().zip(g.data()).zip(va.data()) {
                        *o += d * x;
                    }
                });
            }
            &Op::AddRow { a, row } => {
                self.acc(grads, a, |ga| ga.add_assign(g));
                self.acc(grads, row, |gr| {
                    for r in 0..g.rows() {
                        for (o, d) in gr.data_mut().iter_mut().zip(g.row(r)) {
                            *o += d;
                        }
                    }
                });
            }
            &Op::MulCol { a, col } => {
                let (va, vc) = (self.value(a), self.value(col));
                self.acc(grads, a, |ga| {
                    for r in 0..g.rows() {
                        let s = vc.data()[r];
                        for (o, d) in ga.row_mut(r).iter_mut().zip(g.row(r)) {
                            *o += d * s;
                        }
                    }
                });
                self.acc(grads, col, |gc| {
                    for r in 0..g.rows() {
                        gc.data_mut()[r] += g.row(r).iter().zip(va.row(r)).map(|(d, x)| d * x).sum::<f64>();
                    }
                });
            }
            &Op::Scale(a, s) => {
                self.acc(grads, a, |ga| {
                    for (o, d) in ga.data_mut().iter_mut().zip(g.data()) {
                        *o += d * s;
                    }
                });
            }
            &Op::AddScalar(a) => self.acc(grads, a, |ga| ga.add_assign(g)),
            &Op::Unary(a, u) => {
                let x = self.value(a);
                self.acc(grads, a, |ga| {
                    let it = ga.data_mut().iter_mut().zip(g.data()).zip(x.data().iter().zip(y.data()));
                    for ((o, &d), (&xv, &yv)) in it {
                        let local = match u {
                            Unary::Relu => {
                                if xv > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Unary::Gelu => {
                                let inner = GELU_C * (xv + 0.044715 * xv * xv * xv);
                                let t = inner.tanh();
                                let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * xv * xv);
                                0.5 * (1.0 + t) + 0.5 * xv * (1.0 - t * t) * dinner
                            }
                            Unary::Exp => yv,
                            Unary::Log => 1.0 / xv,
                            Unary::Tanh => 1.0 - yv * yv,
                            Unary::Sigmoid => yv * (1.0 - yv),
                            Unary::Neg => -1.0,
                        };
                        *o += d * local;
                    }
                });
            }
            &Op::Softmax(a) => {
                self.acc(grads, a, |ga| {
                    for r in 0..g.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let dot: f64 = yr.iter().zip(gr).map(|(p, d)| p * d).sum();
                        for ((o, p), d) in ga.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *o += p * (d - dot);
                        }
                    }
                });
            }
            &Op::LogSoftmax(a) => {
                self.acc(grads, a, |ga| {
                    for r in 0..g.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let s: f64 = gr.iter().sum();
                        for ((o, lp), d) in ga.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *o += d - lp.exp() * s;
                        }
                    }
                });
            }
            Op::LayerNorm { a, gamma, beta, xhat, inv_std } => {
                let vg = self.value(*gamma);
                let c = xhat.cols();
                self.acc(grads, *a, |ga| {
                    let mut dxh = vec![0.0; c];
                    for r in 0..g.rows() {
                        let gr = g.row(r);
                        let xr = xhat.row(r);
                        for j in 0..c {
                            dxh[j] = gr[j] * vg.data()[j];
                        }
                        let m1 = dxh.iter().sum::<f64>() / c as f64;
                        let m2 = dxh.iter().zip(xr).map(|(d, x)| d * x).sum::<f64>() / c as f64;
                        let is = inv_std[r];
                        for (j, o) in ga.row_mut(r).iter_mut().enumerate() {
                            *o += is * (dxh[j] - m1 - xr[j] * m2);
                        }
                    }
                });
                self.acc(grads, *gamma, |gg| {
                    for r in 0..g.rows() {
                        for ((o, d), x) in gg.data_mut().iter_mut().zip(g.row(r)).zip(xhat.row(r)) {
                            *o += d * x;
                        }
                    }
                });
                self.acc(grads, *beta, |gb| {
                    for r in 0..g.rows() {
                        for (o, d) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *o += d;
                        }
                    }
                });
            }
            &Op::Transpose(a) => self.acc(grads, a, |ga| ga.add_assign(&g.transpose())),
            &Op::SliceRows { a, start } => {
                self.acc(grads, a, |ga| {
                    let c = g.cols();
                    for (o, d) in ga.data_mut()[start * c..].iter_mut().zip(g.data()) {
                        *o += d;
                    }
                });
            }
            &Op::SliceCols { a, start } => {
                self.acc(grads, a, |ga| {
                    for r in 0..g.rows() {
                        for (o, d) in ga.row_mut(r)[start..].iter_mut().zip(g.row(r)) {
                            *o += d;
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let c = g.cols();
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).rows();
                    self.acc(grads, p, |gp| {
                        for (o, d) in gp.data_mut().iter_mut().zip(&g.data()[off * c..(off + n) * c]) {
                            *o += d;
                        }
                    });
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    self.acc(grads, p, |gp| {
                        for r in 0..g.rows() {
                            for (o, d) in gp.row_mut(r).iter_mut().zip(&g.row(r)[off..off + w]) {
                                *o += d;
                            }
                        }
                    });
                    off += w;
                }
            }
            Op::Gather { a, index } => {
                self.acc(grads, *a, |ga| {
                    for (k, &src) in index.iter().enumerate() {
                        for (o, d) in ga.row_mut(src).iter_mut().zip(g.row(k)) {
                            *o += d;
                        }
                    }
                });
            }
            &Op::Unfold { a, half } => {
                self.acc(grads, a, |ga| {
                    let (n, c) = ga.shape();
                    let w = 2 * half + 1;
                    for i in 0..n {
                        for k in 0..w {
                            let src = i as isize + k as isize - half as isize;
                            if src >= 0 && (src as usize) < n {
                                let gr = &g.row(i)[k * c..(k + 1) * c];
                                for (o, d) in ga.row_mut(src as usize).iter_mut().zip(gr) {
                                    *o += d;
                                }
                            }
                        }
                    }
                });
            }
            &Op::Sum(a) => {
                let d = g.item();
                self.acc(grads, a, |ga| ga.data_mut().iter_mut().for_each(|o| *o += d));
            }
            &Op::MeanRows(a) => {
                self.acc(grads, a, |ga| {
                    let n = ga.rows() as f64;
                    for r in 0..ga.rows() {
                        for (o, d) in ga.row_mut(r).iter_mut().zip(g.data()) {
                            *o += d / n;
                        }
                    }
                });
            }
            &Op::RowDot(a, b) => {
                let (va, vb) = (self.value(a), self.value(b));
                self.acc(grads, a, |ga| {
                    for r in 0..ga.rows() {
                        let d = g.data()[r];
                        for (o, x) in ga.row_mut(r).iter_mut().zip(vb.row(r)) {
                            *o += d * x;
                        }
                    }
                });
                self.acc(grads, b, |gb| {
                    for r in 0..gb.rows() {
                        let d = g.data()[r];
                        for (o, x) in gb.row_mut(r).iter_mut().zip(va.row(r)) {
                            *o += d * x;
                        }
                    }
                });
            }
            Op::L2NormRows { a, norms } => {
                self.acc(grads, *a, |ga| {
                    for r in 0..g.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let dot: f64 = yr.iter().zip(gr).map(|(p, d)| p * d).sum();
                        for ((o, p), d) in ga.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *o += (d - p * dot) / norms[r];
                        }
                    }
                });
            }
            Op::Nll { logp, picks } => {
                let d = g.item();
                self.acc(grads, *logp, |gl| {
                    for &(r, c, w) in picks {
                        let v = gl.get(r, c);
                        gl.set(r, c, v - w * d);
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_matches_definition() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(1, 3, vec![-1.0, 0.0, 2.0]));
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::filled(2, 5, 0.3));
        let y = g.softmax(x);
        assert!(g.value(y).data().iter().all(|&p| (p - 0.2).abs() < 1e-15));
    }

    #[test]
    fn masked_softmax_zeroes_masked_entries() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(2, 3, vec![1.0, 2.0, 3.0, 0.5, -1.0, 4.0]));
        let mask = Arc::new(vec![true, false, true, true, true, false]);
        let y = g.softmax_masked(x, Some(mask));
        let v = g.value(y);
        assert_eq!(v.get(0, 1), 0.0);
        assert_eq!(v.get(1, 2), 0.0);
        for r in 0..2 {
            assert!((v.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn bilinear_with_identity_is_dot_product() {
        let mut g = Graph::new();
        let u = g.constant(Tensor::from_vec(1, 3, vec![1.0, -2.0, 0.5]));
        let w = g.constant(Tensor::identity(3));
        let v = g.constant(Tensor::from_vec(1, 3, vec![4.0, 1.0, 2.0]));
        let uw = g.matmul(u, w);
        let s = g.matmul_t(uw, v, false, true);
        assert_eq!(g.scalar(s), 1.0 * 4.0 - 2.0 + 1.0);
    }

    #[test]
    fn unfold_zero_pads_both_ends() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(3, 1, vec![1.0, 2.0, 3.0]));
        let u = g.unfold(x, 1);
        assert_eq!(g.value(u).data(), &[0.0, 1.0, 2.0, 1.0, 2.0, 3.0, 2.0, 3.0, 0.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::scalar(2.0));
        let x = g.input(Tensor::scalar(3.0));
        let y = g.mul(c, x);
        let grads = g.backward(y);
        assert!(grads.of(c).is_none());
        assert_eq!(grads.of(x).unwrap().item(), 2.0);
    }

    #[test]
    fn non_finite_values_name_the_op() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(1, 2, vec![1.0, -1.0]));
        let _ = g.log(x);
        let err = g.ensure_finite().unwrap_err();
        assert!(err.to_string().contains("log"), "{err}");
    }
}
