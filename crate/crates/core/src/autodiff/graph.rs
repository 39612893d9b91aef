use std::collections::HashMap;

use super::{ParamId, ParamStore, Scalar, Tensor};
use crate::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Coefficients of the tanh approximation to GELU.
pub const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
pub const GELU_CUBIC: f64 = 0.044_715;

#[derive(Debug)]
enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    Transpose(Var),
    Reshape(Var),
    Relu(Var),
    Gelu(Var),
    Softmax { x: Var, outer: usize, len: usize, inner: usize },
    LogSoftmax { x: Var, outer: usize, len: usize, inner: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<S>, inv_std: Vec<S> },
    MeanRows(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    WeightedSum { weights: Var, inputs: Vec<Var> },
    ReplaceRows { x: Var, fill: Var, mask: Vec<bool> },
    Sum(Var),
    /// Scalar-valued function whose gradient w.r.t. its input was computed
    /// alongside the value (losses).
    Fused { x: Var, grad: Vec<S> },
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Tape of tensor operations recorded in execution order.
///
/// Every op checks shapes and rejects non-finite outputs. Nodes only carry
/// gradients when some trainable leaf feeds them, so a frozen backbone is
/// skipped entirely during [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Graph<S: Scalar = f32> {
    nodes: Vec<Node<S>>,
    params: HashMap<ParamId, Var>,
    consumed: bool,
}

/// Result of a backward pass.
#[derive(Debug)]
pub struct Gradients<S> {
    by_var: Vec<Option<Tensor<S>>>,
    by_param: HashMap<ParamId, Tensor<S>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of a trainable parameter; `None` for frozen or unused ones.
    pub fn param(&self, id: ParamId) -> Option<&Tensor<S>> {
        self.by_param.get(&id)
    }

    pub fn var(&self, v: Var) -> Option<&Tensor<S>> {
        self.by_var.get(v.0).and_then(Option::as_ref)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<S>)> {
        self.by_param.iter().map(|(k, v)| (*k, v))
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    }
}

/// (outer, len, inner) decomposition of `shape` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::InvalidAxis {
            axis,
            rank: shape.len(),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

pub(crate) fn matmul_raw<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == S::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// out[k×n] += aᵀ·g for a[m×k], g[m×n].
fn matmul_at_b<S: Scalar>(a: &[S], g: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == S::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

/// out[m×k] += g·bᵀ for g[m×n], b[k×n].
fn matmul_a_bt<S: Scalar>(g: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = S::zero();
            for (&gv, &bv) in grow.iter().zip(brow) {
                acc += gv * bv;
            }
            out[i * k + p] += acc;
        }
    }
}

fn gelu<S: Scalar>(x: S) -> S {
    let c = S::of(GELU_SQRT_2_OVER_PI);
    let u = c * (x + S::of(GELU_CUBIC) * x * x * x);
    S::of(0.5) * x * (S::one() + u.tanh())
}

fn gelu_grad<S: Scalar>(x: S) -> S {
    let c = S::of(GELU_SQRT_2_OVER_PI);
    let a = S::of(GELU_CUBIC);
    let t = (c * (x + a * x * x * x)).tanh();
    let half = S::of(0.5);
    half * (S::one() + t) + half * x * (S::one() - t * t) * c * (S::one() + S::of(3.0) * a * x * x)
}

fn softmax_into<S: Scalar>(x: &[S], out: &mut [S], outer: usize, len: usize, inner: usize, log: bool) {
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let mut mx = S::neg_infinity();
            for j in 0..len {
                mx = mx.max(x[idx(j)]);
            }
            let mut z = S::zero();
            for j in 0..len {
                z += (x[idx(j)] - mx).exp();
            }
            let lz = z.ln();
            for j in 0..len {
                let v = x[idx(j)] - mx - lz;
                out[idx(j)] = if log { v } else { v.exp() };
            }
        }
    }
}

/// Numerically stable log-softmax of a single vector.
pub fn log_softmax_vec<S: Scalar>(x: &[S]) -> Vec<S> {
    let mut out = vec![S::zero(); x.len()];
    softmax_into(x, &mut out, 1, x.len(), 1, true);
    out
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn check(&self, v: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::StaleGraph);
        }
        if v.0 >= self.nodes.len() {
            return Err(Error::ForeignVar);
        }
        Ok(())
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<S>, op: Op<S>, inputs: &[Var]) -> Result<Var> {
        value.check_finite(op_name)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn push_leaf(&mut self, value: Tensor<S>, requires_grad: bool, param: Option<ParamId>) -> Result<Var> {
        if self.consumed {
            return Err(Error::StaleGraph);
        }
        value.check_finite("leaf")?;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            param,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor<S>) -> Result<Var> {
        self.push_leaf(value, false, None)
    }

    /// Free leaf that receives a gradient (not tied to a parameter).
    pub fn leaf(&mut self, value: Tensor<S>) -> Result<Var> {
        self.push_leaf(value, true, None)
    }

    /// Leaf for a stored parameter. Repeated calls return the same node, and
    /// the node requires a gradient exactly when the parameter is trainable.
    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.params.get(&id) {
            return Ok(v);
        }
        let v = self.push_leaf(store.value(id).clone(), store.is_trainable(id), Some(id))?;
        self.params.insert(id, v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let (Some((m, k)), Some((k2, n))) = (av.dims2(), bv.dims2()) else {
            return Err(shape_err("matmul", av.shape(), bv.shape()));
        };
        if k != k2 {
            return Err(shape_err("matmul", av.shape(), bv.shape()));
        }
        let out = matmul_raw(av.data(), bv.data(), m, k, n);
        self.push("matmul", Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), &[a, b])
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(S, S) -> S, op: Op<S>) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err(name, av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::from_parts(av.shape().to_vec(), data);
        self.push(name, t, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// `x[..×d] + bias[d]`, broadcasting the bias over leading axes.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.check(x)?;
        self.check(bias)?;
        let (xv, bv) = (self.value(x), self.value(bias));
        let d = *xv.shape().last().unwrap_or(&0);
        if bv.rank() != 1 || bv.numel() != d || d == 0 {
            return Err(shape_err("add_row", xv.shape(), bv.shape()));
        }
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(d) {
            for (o, &b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let t = Tensor::from_parts(xv.shape().to_vec(), data);
        self.push("add_row", t, Op::AddRow(x, bias), &[x, bias])
    }

    pub fn scale(&mut self, x: Var, factor: S) -> Result<Var> {
        self.check(x)?;
        let xv = self.value(x);
        let t = Tensor::from_parts(xv.shape().to_vec(), xv.data().iter().map(|&v| v * factor).collect());
        self.push("scale", t, Op::Scale(x, factor), &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let xv = self.value(x);
        let Some((r, c)) = xv.dims2() else {
            return Err(shape_err("transpose", xv.shape(), &[]));
        };
        let mut out = vec![S::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xv.data()[i * c + j];
            }
        }
        self.push("transpose", Tensor::from_parts(vec![c, r], out), Op::Transpose(x), &[x])
    }

    /// Same data under a new shape with equal element count.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.check(x)?;
        let xv = self.value(x);
        if shape.iter().product::<usize>() != xv.numel() {
            return Err(shape_err("reshape", xv.shape(), shape));
        }
        let t = Tensor::from_parts(shape.to_vec(), xv.data().to_vec());
        self.push("reshape", t, Op::Reshape(x), &[x])
    }

    fn map(&mut self, x: Var, name: &'static str, f: impl Fn(S) -> S, op: Op<S>) -> Result<Var> {
        self.check(x)?;
        let xv = self.value(x);
        let t = Tensor::from_parts(xv.shape().to_vec(), xv.data().iter().map(|&v| f(v)).collect());
        self.push(name, t, op, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map(x, "relu", |v| v.max(S::zero()), Op::Relu(x))
    }

    /// GELU, tanh approximation: `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.map(x, "gelu", gelu, Op::Gelu(x))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(x, axis, false)
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(x, axis, true)
    }

    fn softmax_impl(&mut self, x: Var, axis: usize, log: bool) -> Result<Var> {
        self.check(x)?;
        let xv = self.value(x);
        let (outer, len, inner) = split_axis(xv.shape(), axis)?;
        if len == 0 {
            return Err(Error::EmptySequence { op: "softmax" });
        }
        let mut out = vec![S::zero(); xv.numel()];
        softmax_into(xv.data(), &mut out, outer, len, inner, log);
        let t = Tensor::from_parts(xv.shape().to_vec(), out);
        if log {
            self.push("log_softmax", t, Op::LogSoftmax { x, outer, len, inner }, &[x])
        } else {
            self.push("softmax", t, Op::Softmax { x, outer, len, inner }, &[x])
        }
    }

    /// Normalizes each position over the last axis, then applies `gamma`
    /// and `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        self.check(x)?;
        self.check(gamma)?;
        self.check(beta)?;
        if eps.is_nan() || eps <= 0.0 {
            return Err(Error::config("layer_norm eps must be positive"));
        }
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let d = *xv.shape().last().unwrap_or(&0);
        if d == 0 || gv.shape() != [d] {
            return Err(shape_err("layer_norm", xv.shape(), gv.shape()));
        }
        if bv.shape() != [d] {
            return Err(shape_err("layer_norm", xv.shape(), bv.shape()));
        }
        let rows = xv.numel() / d;
        let dn = S::of(d as f64);
        let eps = S::of(eps);
        let mut xhat = vec![S::zero(); xv.numel()];
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = vec![S::zero(); xv.numel()];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<S>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / dn;
            let is = S::one() / (var + eps).sqrt();
            inv_std.push(is);
            for j in 0..d {
                let xh = (row[j] - mean) * is;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * gv.data()[j] + bv.data()[j];
            }
        }
        let t = Tensor::from_parts(xv.shape().to_vec(), out);
        self.push(
            "layer_norm",
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    /// Average over the time (first) axis of a `[T×d]` tensor.
    pub fn mean_over_time(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let xv = self.value(x);
        let Some((t, d)) = xv.dims2() else {
            return Err(shape_err("mean_over_time", xv.shape(), &[]));
        };
        if t == 0 {
            return Err(Error::EmptySequence { op: "mean_over_time" });
        }
        let mut out = vec![S::zero(); d];
        for row in xv.data().chunks(d) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let inv = S::one() / S::of(t as f64);
        out.iter_mut().for_each(|o| *o *= inv);
        self.push("mean_over_time", Tensor::from_parts(vec![d], out), Op::MeanRows(x), &[x])
    }

    /// Columns `start..start+len` of a `[r×c]` tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.check(x)?;
        let xv = self.value(x);
        let Some((r, c)) = xv.dims2() else {
            return Err(shape_err("slice_cols", xv.shape(), &[start, len]));
        };
        if start + len > c {
            return Err(shape_err("slice_cols", xv.shape(), &[start, len]));
        }
        let mut out = Vec::with_capacity(r * len);
        for row in xv.data().chunks(c) {
            out.extend_from_slice(&row[start..start + len]);
        }
        self.push("slice_cols", Tensor::from_parts(vec![r, len], out), Op::SliceCols { x, start }, &[x])
    }

    /// Concatenates `[r×cᵢ]` tensors along columns.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or(Error::EmptySequence { op: "concat_cols" })?;
        for &x in xs {
            self.check(x)?;
        }
        let Some((r, _)) = self.value(first).dims2() else {
            return Err(shape_err("concat_cols", self.shape(first), &[]));
        };
        let mut total = 0;
        for &x in xs {
            match self.value(x).dims2() {
                Some((rr, c)) if rr == r => total += c,
                _ => return Err(shape_err("concat_cols", self.shape(first), self.shape(x))),
            }
        }
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &x in xs {
                out.extend_from_slice(self.value(x).row(i));
            }
        }
        self.push("concat_cols", Tensor::from_parts(vec![r, total], out), Op::ConcatCols(xs.to_vec()), xs)
    }

    /// `Σᵢ weights[i]·inputs[i]` for same-shape inputs and a `[n]` weight vector.
    pub fn weighted_sum(&mut self, weights: Var, inputs: &[Var]) -> Result<Var> {
        self.check(weights)?;
        let first = *inputs.first().ok_or(Error::EmptySequence { op: "weighted_sum" })?;
        let wv = self.value(weights);
        if wv.shape() != [inputs.len()] {
            return Err(shape_err("weighted_sum", wv.shape(), &[inputs.len()]));
        }
        let shape = self.shape(first).to_vec();
        let mut out = vec![S::zero(); self.value(first).numel()];
        for (i, &x) in inputs.iter().enumerate() {
            self.check(x)?;
            let xv = self.value(x);
            if xv.shape() != shape.as_slice() {
                return Err(shape_err("weighted_sum", &shape, xv.shape()));
            }
            let w = self.value(weights).data()[i];
            for (o, &v) in out.iter_mut().zip(xv.data()) {
                *o += w * v;
            }
        }
        let mut deps = vec![weights];
        deps.extend_from_slice(inputs);
        self.push(
            "weighted_sum",
            Tensor::from_parts(shape, out),
            Op::WeightedSum {
                weights,
                inputs: inputs.to_vec(),
            },
            &deps,
        )
    }

    /// Replaces every row `r` of `x[T×d]` with `mask[r]` set by `fill[d]`.
    pub fn replace_rows(&mut self, x: Var, fill: Var, mask: &[bool]) -> Result<Var> {
        self.check(x)?;
        self.check(fill)?;
        let (xv, fv) = (self.value(x), self.value(fill));
        let Some((t, d)) = xv.dims2() else {
            return Err(shape_err("replace_rows", xv.shape(), fv.shape()));
        };
        if fv.shape() != [d] || mask.len() != t {
            return Err(shape_err("replace_rows", xv.shape(), fv.shape()));
        }
        let mut out = xv.data().to_vec();
        for (r, &m) in mask.iter().enumerate() {
            if m {
                out[r * d..(r + 1) * d].copy_from_slice(fv.data());
            }
        }
        let t = Tensor::from_parts(xv.shape().to_vec(), out);
        self.push(
            "replace_rows",
            t,
            Op::ReplaceRows {
                x,
                fill,
                mask: mask.to_vec(),
            },
            &[x, fill],
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let s = self.value(x).data().iter().copied().sum::<S>();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Mean of scalar nodes.
    pub fn mean_scalars(&mut self, xs: &[Var]) -> Result<Var> {
        let mut acc = *xs.first().ok_or(Error::EmptySequence { op: "mean_scalars" })?;
        for &x in &xs[1..] {
            acc = self.add(acc, x)?;
        }
        self.scale(acc, S::one() / S::of(xs.len() as f64))
    }

    /// Records a scalar-valued function of `x` whose gradient `grad`
    /// (same length as `x`) was computed together with `value`.
    pub fn fused_scalar(&mut self, x: Var, name: &'static str, value: S, grad: Vec<S>) -> Result<Var> {
        self.check(x)?;
        if grad.len() != self.value(x).numel() {
            return Err(shape_err(name, self.shape(x), &[grad.len()]));
        }
        if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite { op: name });
        }
        self.push(name, Tensor::scalar(value), Op::Fused { x, grad }, &[x])
    }

    /// `−log_softmax(logits)[label]` for a `[C]` logit vector.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        self.check(logits)?;
        let lv = self.value(logits);
        if lv.rank() != 1 {
            return Err(shape_err("cross_entropy", lv.shape(), &[]));
        }
        let c = lv.numel();
        if label >= c {
            return Err(Error::LabelOutOfRange { label, classes: c });
        }
        let lp = log_softmax_vec(lv.data());
        let mut grad: Vec<S> = lp.iter().map(|v| v.exp()).collect();
        grad[label] -= S::one();
        self.fused_scalar(logits, "cross_entropy", -lp[label], grad)
    }

    /// Mean squared error between `pred[T×D]` and `target[T×D]` over the rows
    /// selected by `mask`. Zero (with zero gradient) when no row is selected.
    pub fn masked_mse(&mut self, pred: Var, target: &Tensor<S>, mask: &[bool]) -> Result<Var> {
        self.check(pred)?;
        let pv = self.value(pred);
        let Some((t, d)) = pv.dims2() else {
            return Err(shape_err("masked_mse", pv.shape(), target.shape()));
        };
        if pv.shape() != target.shape() || mask.len() != t {
            return Err(shape_err("masked_mse", pv.shape(), target.shape()));
        }
        let count = mask.iter().filter(|&&m| m).count() * d;
        let mut grad = vec![S::zero(); t * d];
        let mut loss = S::zero();
        if count > 0 {
            let inv = S::one() / S::of(count as f64);
            for r in (0..t).filter(|&r| mask[r]) {
                for j in 0..d {
                    let diff = pv.data()[r * d + j] - target.data()[r * d + j];
                    loss += diff * diff * inv;
                    grad[r * d + j] = S::of(2.0) * diff * inv;
                }
            }
        }
        self.fused_scalar(pred, "masked_mse", loss, grad)
    }

    /// Reverse pass from a scalar `loss`. Consumes the graph: a second call
    /// fails with [`Error::StaleGraph`].
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<S>> {
        self.check(loss)?;
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss {
                shape: lv.shape().to_vec(),
            });
        }
        self.consumed = true;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<S>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        let mut by_param = HashMap::new();
        let mut by_var = Vec::with_capacity(n);
        for (i, g) in grads.into_iter().enumerate() {
            let node = &self.nodes[i];
            let t = match g {
                Some(g) if node.requires_grad => {
                    let t = Tensor::from_parts(node.value.shape().to_vec(), g);
                    t.check_finite("backward")?;
                    Some(t)
                }
                _ => None,
            };
            if let (Some(pid), Some(t)) = (node.param, &t) {
                by_param.insert(pid, t.clone());
            }
            by_var.push(t);
        }
        Ok(Gradients { by_var, by_param })
    }

    fn backprop_node(&self, idx: usize, g: &[S], grads: &mut [Option<Vec<S>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let nodes = &self.nodes;
        // Accumulates into an input's gradient buffer if that input needs one.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [S])| {
            if nodes[v.0].requires_grad {
                let buf = grads[v.0].get_or_insert_with(|| vec![S::zero(); nodes[v.0].value.numel()]);
                f(buf);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k) = av.dims2().expect("matmul lhs");
                let n = bv.dims2().expect("matmul rhs").1;
                acc(*a, &mut |buf| matmul_a_bt(g, bv.data(), m, k, n, buf));
                acc(*b, &mut |buf| matmul_at_b(av.data(), g, m, k, n, buf));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |buf| add_into(buf, g));
                acc(*b, &mut |buf| add_into(buf, g));
            }
            Op::AddRow(x, b) => {
                acc(*x, &mut |buf| add_into(buf, g));
                let d = nodes[b.0].value.numel();
                acc(*b, &mut |buf| {
                    for row in g.chunks(d) {
                        add_into(buf, row);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                acc(*a, &mut |buf| {
                    for ((o, &gv), &y) in buf.iter_mut().zip(g).zip(bv) {
                        *o += gv * y;
                    }
                });
                acc(*b, &mut |buf| {
                    for ((o, &gv), &x) in buf.iter_mut().zip(g).zip(av) {
                        *o += gv * x;
                    }
                });
            }
            Op::Scale(x, f) => acc(*x, &mut |buf| {
                for (o, &gv) in buf.iter_mut().zip(g) {
                    *o += gv * *f;
                }
            }),
            Op::Transpose(x) => {
                let (r, c) = nodes[x.0].value.dims2().expect("transpose");
                acc(*x, &mut |buf| {
                    for i in 0..r {
                        for j in 0..c {
                            buf[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &mut |buf| add_into(buf, g)),
            Op::Relu(x) => {
                let xv = nodes[x.0].value.data();
                acc(*x, &mut |buf| {
                    for ((o, &gv), &v) in buf.iter_mut().zip(g).zip(xv) {
                        if v > S::zero() {
                            *o += gv;
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = nodes[x.0].value.data();
                acc(*x, &mut |buf| {
                    for ((o, &gv), &v) in buf.iter_mut().zip(g).zip(xv) {
                        *o += gv * gelu_grad(v);
                    }
                });
            }
            Op::Softmax { x, outer, len, inner } => {
                let y = node.value.data();
                let (outer, len, inner) = (*outer, *len, *inner);
                acc(*x, &mut |buf| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| (o * len + j) * inner + i;
                            let dot: S = (0..len).map(|j| g[idx(j)] * y[idx(j)]).sum();
                            for j in 0..len {
                                buf[idx(j)] += y[idx(j)] * (g[idx(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LogSoftmax { x, outer, len, inner } => {
                let y = node.value.data();
                let (outer, len, inner) = (*outer, *len, *inner);
                acc(*x, &mut |buf| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| (o * len + j) * inner + i;
                            let gs: S = (0..len).map(|j| g[idx(j)]).sum();
                            for j in 0..len {
                                buf[idx(j)] += g[idx(j)] - y[idx(j)].exp() * gs;
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gam = nodes[gamma.0].value.data();
                let d = gam.len();
                let dn = S::of(d as f64);
                acc(*x, &mut |buf| {
                    for (r, &is) in inv_std.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let xh = &xhat[r * d..(r + 1) * d];
                        let mut sum_gy = S::zero();
                        let mut sum_gy_xh = S::zero();
                        for j in 0..d {
                            let gy = gr[j] * gam[j];
                            sum_gy += gy;
                            sum_gy_xh += gy * xh[j];
                        }
                        for j in 0..d {
                            let gy = gr[j] * gam[j];
                            buf[r * d + j] += is / dn * (dn * gy - sum_gy - xh[j] * sum_gy_xh);
                        }
                    }
                });
                acc(*gamma, &mut |buf| {
                    for (gr, xh) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            buf[j] += gr[j] * xh[j];
                        }
                    }
                });
                acc(*beta, &mut |buf| {
                    for gr in g.chunks(d) {
                        add_into(buf, gr);
                    }
                });
            }
            Op::MeanRows(x) => {
                let (t, _) = nodes[x.0].value.dims2().expect("mean rows");
                let inv = S::one() / S::of(t as f64);
                acc(*x, &mut |buf| {
                    for row in buf.chunks_mut(g.len()) {
                        for (o, &gv) in row.iter_mut().zip(g) {
                            *o += gv * inv;
                        }
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let (_, c) = nodes[x.0].value.dims2().expect("slice");
                let len = node.value.dims2().expect("slice").1;
                acc(*x, &mut |buf| {
                    for (brow, grow) in buf.chunks_mut(c).zip(g.chunks(len)) {
                        add_into(&mut brow[*start..*start + len], grow);
                    }
                });
            }
            Op::ConcatCols(xs) => {
                let total = node.value.dims2().expect("concat").1;
                let mut offset = 0;
                for &x in xs {
                    let c = nodes[x.0].value.dims2().expect("concat").1;
                    acc(x, &mut |buf| {
                        for (brow, grow) in buf.chunks_mut(c).zip(g.chunks(total)) {
                            add_into(brow, &grow[offset..offset + c]);
                        }
                    });
                    offset += c;
                }
            }
            Op::WeightedSum { weights, inputs } => {
                let w = nodes[weights.0].value.data();
                acc(*weights, &mut |buf| {
                    for (i, x) in inputs.iter().enumerate() {
                        let dot: S = nodes[x.0].value.data().iter().zip(g).map(|(&a, &b)| a * b).sum();
                        buf[i] += dot;
                    }
                });
                for (i, &x) in inputs.iter().enumerate() {
                    acc(x, &mut |buf| {
                        for (o, &gv) in buf.iter_mut().zip(g) {
                            *o += w[i] * gv;
                        }
                    });
                }
            }
            Op::ReplaceRows { x, fill, mask } => {
                let d = nodes[fill.0].value.numel();
                acc(*x, &mut |buf| {
                    for (r, (brow, grow)) in buf.chunks_mut(d).zip(g.chunks(d)).enumerate() {
                        if !mask[r] {
                            add_into(brow, grow);
                        }
                    }
                });
                acc(*fill, &mut |buf| {
                    for (r, grow) in g.chunks(d).enumerate() {
                        if mask[r] {
                            add_into(buf, grow);
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |buf| {
                for o in buf.iter_mut() {
                    *o += g[0];
                }
            }),
            Op::Fused { x, grad } => acc(*x, &mut |buf| {
                for (o, &d) in buf.iter_mut().zip(grad) {
                    *o += g[0] * d;
                }
            }),
        }
        Ok(())
    }
}

fn add_into<S: Scalar>(buf: &mut [S], g: &[S]) {
    for (o, &v) in buf.iter_mut().zip(g) {
        *o += v;
    }
}
