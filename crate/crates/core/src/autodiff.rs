//! Tape-based reverse-mode differentiation over the crate's tensor kernels.
//!
//! Every operation evaluates eagerly, appends a node holding its value and
//! inputs, and returns a [`Var`] handle. [`GradientTape::backward`] then walks
//! the nodes in reverse and accumulates adjoints. Gradients flow through
//! convolutions, activations, pooling, the dense and sparse non-local
//! distance, softmax and warp, and the losses. The sparsity pattern of a
//! sparse similarity is structure, not a differentiable input.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::nonlocal::approx::{sparse_distance, sparse_softmax, SparsePattern};
use crate::nonlocal::exact::{
    nl_warp_matrix, pairwise_distance_vectorized, similarity_from_distance, Matrix,
};
use crate::nonlocal::{DenseDistance, SparseSimilarity};
use crate::tensor::{
    avg_pool, avg_pool_backward, conv2d, conv2d_backward, elementwise, Activation, Kernel,
    LayerSpec, Tensor,
};

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Value {
    Tensor(Tensor),
    Kernel(Kernel),
    Vector(Vec<f64>),
    Matrix(Matrix),
    /// Values stored on a sparsity pattern (distances or similarities).
    Sparse(Arc<SparsePattern>, Vec<f64>),
    Scalar(f64),
}

impl Value {
    pub fn data(&self) -> &[f64] {
        match self {
            Value::Tensor(t) => t.data(),
            Value::Kernel(k) => k.data(),
            Value::Vector(v) => v,
            Value::Matrix(m) => m.data(),
            Value::Sparse(_, v) => v,
            Value::Scalar(s) => std::slice::from_ref(s),
        }
    }

    fn data_mut(&mut self) -> &mut [f64] {
        match self {
            Value::Tensor(t) => t.data_mut(),
            Value::Kernel(k) => k.data_mut(),
            Value::Vector(v) => v,
            Value::Matrix(m) => m.data_mut(),
            Value::Sparse(_, v) => v,
            Value::Scalar(s) => std::slice::from_mut(s),
        }
    }

    pub fn len(&self) -> usize {
        self.data().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn kind(&self) -> &'static str {
        match self {
            Value::Tensor(_) => "tensor",
            Value::Kernel(_) => "kernel",
            Value::Vector(_) => "vector",
            Value::Matrix(_) => "matrix",
            Value::Sparse(..) => "sparse",
            Value::Scalar(_) => "scalar",
        }
    }

    fn same_layout(&self, other: &Value) -> bool {
        match (self, other) {
            (Value::Tensor(a), Value::Tensor(b)) => a.same_shape(b),
            (Value::Scalar(_), Value::Scalar(_)) => true,
            (Value::Vector(a), Value::Vector(b)) => a.len() == b.len(),
            (Value::Matrix(a), Value::Matrix(b)) => {
                a.rows() == b.rows() && a.cols() == b.cols()
            }
            _ => false,
        }
    }

    fn with_data(&self, data: Vec<f64>) -> Value {
        let mut v = self.clone();
        v.data_mut().copy_from_slice(&data);
        v
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    /// `‖ŷ − y‖₂`.
    Norm,
    /// `mean((ŷ − y)²)`.
    MeanSquared,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        spec: LayerSpec,
    },
    Activation {
        input: Var,
        act: Activation,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Concat(Vec<Var>),
    Slice {
        input: Var,
        start: usize,
        len: usize,
    },
    AvgPool {
        input: Var,
        p: usize,
    },
    Distance {
        prev: Var,
        cur: Var,
    },
    Softmax {
        dist: Var,
        beta: f64,
    },
    Warp {
        state: Var,
        sim: Var,
    },
    SparseDistance {
        prev: Var,
        cur: Var,
    },
    SparseSoftmax {
        dist: Var,
        beta: f64,
    },
    SparseWarp {
        state: Var,
        sim: Var,
    },
    Loss {
        pred: Var,
        target: Var,
        kind: LossKind,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d {
                input,
                weight,
                bias,
                ..
            } => vec![*input, *weight, *bias],
            Op::Activation { input, .. }
            | Op::Scale(input, _)
            | Op::Slice { input, .. }
            | Op::AvgPool { input, .. } => vec![*input],
            Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Concat(parts) => parts.clone(),
            Op::Distance { prev, cur } | Op::SparseDistance { prev, cur } => vec![*prev, *cur],
            Op::Softmax { dist, .. } | Op::SparseSoftmax { dist, .. } => vec![*dist],
            Op::Warp { state, sim } | Op::SparseWarp { state, sim } => vec![*state, *sim],
            Op::Loss { pred, target, .. } => vec![*pred, *target],
        }
    }
}

struct Node {
    value: Value,
    op: Op,
    requires_grad: bool,
}

/// Recorded forward pass.
#[derive(Default)]
pub struct GradientTape {
    nodes: Vec<Node>,
    params: Vec<Var>,
    consumed: bool,
}

/// Adjoints of every parameter registered on the tape.
#[derive(Clone, Debug)]
pub struct Gradients {
    params: Vec<Var>,
    grads: Vec<Vec<f64>>,
}

impl Gradients {
    /// Gradient for a parameter; zeros if the loss does not depend on it.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.params
            .iter()
            .position(|&p| p == var)
            .map(|i| self.grads[i].as_slice())
    }

    /// `(parameter, gradient)` pairs in registration order.
    pub fn iter(&self) -> impl Iterator<Item = (Var, &[f64])> {
        self.params.iter().copied().zip(self.grads.iter().map(|g| g.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }
}

impl GradientTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a trainable leaf.
    pub fn param(&mut self, value: Value) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.params.push(v);
        v
    }

    pub fn constant(&mut self, value: Value) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Value {
        &self.nodes[v.0].value
    }

    pub fn tensor(&self, v: Var) -> Result<&Tensor> {
        match self.value(v) {
            Value::Tensor(t) => Ok(t),
            other => Err(Error::invalid(
                "tape",
                format!("expected a tensor, found a {}", other.kind()),
            )),
        }
    }

    pub fn scalar(&self, v: Var) -> Result<f64> {
        match self.value(v) {
            Value::Scalar(s) => Ok(*s),
            other => Err(Error::invalid(
                "tape",
                format!("expected a scalar, found a {}", other.kind()),
            )),
        }
    }

    fn push(&mut self, value: Value, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, value: Value, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, op, requires_grad)
    }

    fn kernel(&self, v: Var) -> Result<&Kernel> {
        match self.value(v) {
            Value::Kernel(k) => Ok(k),
            other => Err(Error::invalid(
                "tape",
                format!("expected a kernel, found a {}", other.kind()),
            )),
        }
    }

    fn vector(&self, v: Var) -> Result<&[f64]> {
        match self.value(v) {
            Value::Vector(b) => Ok(b),
            other => Err(Error::invalid(
                "tape",
                format!("expected a vector, found a {}", other.kind()),
            )),
        }
    }

    fn matrix(&self, v: Var) -> Result<&Matrix> {
        match self.value(v) {
            Value::Matrix(m) => Ok(m),
            other => Err(Error::invalid(
                "tape",
                format!("expected a matrix, found a {}", other.kind()),
            )),
        }
    }

    fn sparse(&self, v: Var) -> Result<(&Arc<SparsePattern>, &[f64])> {
        match self.value(v) {
            Value::Sparse(p, vals) => Ok((p, vals)),
            other => Err(Error::invalid(
                "tape",
                format!("expected sparse values, found a {}", other.kind()),
            )),
        }
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, spec: LayerSpec) -> Result<Var> {
        let out = conv2d(self.tensor(input)?, self.kernel(weight)?, self.vector(bias)?, &spec)?;
        Ok(self.record(
            Value::Tensor(out),
            Op::Conv2d {
                input,
                weight,
                bias,
                spec,
            },
        ))
    }

    pub fn activation(&mut self, input: Var, act: Activation) -> Result<Var> {
        let out = elementwise(self.tensor(input)?, act);
        Ok(self.record(Value::Tensor(out), Op::Activation { input, act }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.record(out, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.record(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let va = self.value(a);
        let out = va.with_data(va.data().iter().map(|x| x * s).collect());
        Ok(self.record(out, Op::Scale(a, s)))
    }

    fn binary(&self, a: Var, b: Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Value> {
        let (va, vb) = (self.value(a), self.value(b));
        if !va.same_layout(vb) {
            return Err(Error::shape(
                op,
                format!("{} with {} operands of different layout", va.kind(), vb.kind()),
            ));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(va.with_data(data))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors = parts
            .iter()
            .map(|&p| self.tensor(p))
            .collect::<Result<Vec<_>>>()?;
        let out = Tensor::concat_channels(&tensors)?;
        Ok(self.record(Value::Tensor(out), Op::Concat(parts.to_vec())))
    }

    pub fn slice_channels(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.tensor(input)?.slice_channels(start, len)?;
        Ok(self.record(Value::Tensor(out), Op::Slice { input, start, len }))
    }

    pub fn avg_pool(&mut self, input: Var, p: usize) -> Result<Var> {
        let out = avg_pool(self.tensor(input)?, p)?;
        Ok(self.record(Value::Tensor(out), Op::AvgPool { input, p }))
    }

    /// Dense distance matrix between two feature maps.
    pub fn distance(&mut self, prev: Var, cur: Var) -> Result<Var> {
        let d = pairwise_distance_vectorized(self.tensor(prev)?, self.tensor(cur)?)?;
        Ok(self.record(Value::Matrix(d.0), Op::Distance { prev, cur }))
    }

    /// Column softmax of `−D/β`.
    pub fn softmax(&mut self, dist: Var, beta: f64) -> Result<Var> {
        let d = DenseDistance(self.matrix(dist)?.clone());
        let s = similarity_from_distance(&d, beta)?;
        Ok(self.record(Value::Matrix(s.matrix().clone()), Op::Softmax { dist, beta }))
    }

    pub fn warp(&mut self, state: Var, sim: Var) -> Result<Var> {
        let out = nl_warp_matrix(self.tensor(state)?, self.matrix(sim)?)?;
        Ok(self.record(Value::Tensor(out), Op::Warp { state, sim }))
    }

    /// Distances on a fixed sparsity pattern.
    pub fn sparse_distance(
        &mut self,
        prev: Var,
        cur: Var,
        pattern: &Arc<SparsePattern>,
    ) -> Result<Var> {
        let d = sparse_distance(self.tensor(prev)?, self.tensor(cur)?, pattern)?;
        Ok(self.record(
            Value::Sparse(Arc::clone(pattern), d.values().to_vec()),
            Op::SparseDistance { prev, cur },
        ))
    }

    /// Softmax over each target pixel's stored candidates.
    pub fn sparse_softmax(&mut self, dist: Var, beta: f64) -> Result<Var> {
        let (pattern, values) = self.sparse(dist)?;
        let d = crate::nonlocal::approx::SparseDistance::from_parts(Arc::clone(pattern), values.to_vec());
        let s = sparse_softmax(&d, beta)?;
        Ok(self.record(
            Value::Sparse(Arc::clone(s.pattern()), s.weights().to_vec()),
            Op::SparseSoftmax { dist, beta },
        ))
    }

    pub fn sparse_warp(&mut self, state: Var, sim: Var) -> Result<Var> {
        let (pattern, weights) = self.sparse(sim)?;
        let s = SparseSimilarity::from_parts(Arc::clone(pattern), weights.to_vec());
        let out = crate::nonlocal::sparse_nl_warp(self.tensor(state)?, &s)?;
        Ok(self.record(Value::Tensor(out), Op::SparseWarp { state, sim }))
    }

    pub fn loss(&mut self, pred: Var, target: Var, kind: LossKind) -> Result<Var> {
        let (p, t) = (self.tensor(pred)?, self.tensor(target)?);
        let value = loss_value(p, t, kind)?;
        Ok(self.record(Value::Scalar(value), Op::Loss { pred, target, kind }))
    }

    /// Propagates adjoints from the scalar `loss` to every registered
    /// parameter. A tape can be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        self.scalar(loss)?;
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[idx] = Some(g);
                continue;
            }
            for (input, contribution) in self.input_grads(idx, &g)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => {
                        for (a, c) in acc.iter_mut().zip(&contribution) {
                            *a += c;
                        }
                    }
                    slot @ None => *slot = Some(contribution),
                }
            }
        }
        let params = self.params.clone();
        let grads = params
            .iter()
            .map(|p| {
                grads
                    .get(p.0)
                    .and_then(|g| g.clone())
                    .unwrap_or_else(|| vec![0.0; self.nodes[p.0].value.len()])
            })
            .collect();
        Ok(Gradients { params, grads })
    }

    fn input_grads(&self, idx: usize, g: &[f64]) -> Result<Vec<(Var, Vec<f64>)>> {
        let node = &self.nodes[idx];
        let out = &node.value;
        Ok(match &node.op {
            Op::Leaf => vec![],
            Op::Conv2d {
                input,
                weight,
                bias,
                spec,
            } => {
                let x = self.tensor(*input)?;
                let go = Tensor::from_vec(spec.out_channels, x.height(), x.width(), g.to_vec())?;
                let grads = conv2d_backward(x, self.kernel(*weight)?, &go, spec)?;
                vec![
                    (*input, grads.input.into_vec()),
                    (*weight, grads.weights.data().to_vec()),
                    (*bias, grads.bias),
                ]
            }
            Op::Activation { input, act } => {
                let gi = out
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&y, &gy)| gy * act.derivative_from_output(y))
                    .collect();
                vec![(*input, gi)]
            }
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                vec![
                    (*a, g.iter().zip(vb).map(|(x, y)| x * y).collect()),
                    (*b, g.iter().zip(va).map(|(x, y)| x * y).collect()),
                ]
            }
            Op::Scale(a, s) => vec![(*a, g.iter().map(|x| x * s).collect())],
            Op::Concat(parts) => {
                let mut offset = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let n = self.value(p).len();
                        let piece = g[offset..offset + n].to_vec();
                        offset += n;
                        (p, piece)
                    })
                    .collect()
            }
            Op::Slice { input, start, len } => {
                let x = self.tensor(*input)?;
                let n = x.pixels();
                let mut gi = vec![0.0; x.data().len()];
                gi[start * n..(start + len) * n].copy_from_slice(g);
                vec![(*input, gi)]
            }
            Op::AvgPool { input, p } => {
                let x = self.tensor(*input)?;
                let Value::Tensor(y) = out else {
                    unreachable!("pooling yields a tensor")
                };
                let go = Tensor::from_vec(y.channels(), y.height(), y.width(), g.to_vec())?;
                vec![(*input, avg_pool_backward(&go, x.shape(), *p)?.into_vec())]
            }
            Op::Distance { prev, cur } => {
                let d = self.matrix_of(out);
                let (a, b) = (self.tensor(*prev)?, self.tensor(*cur)?);
                let (ga, gb) = distance_backward(a, b, d.data(), g, |i, j| i * d.cols() + j, d.rows(), d.cols());
                vec![(*prev, ga), (*cur, gb)]
            }
            Op::Softmax { beta, dist } => {
                let s = self.matrix_of(out);
                let (rows, cols) = (s.rows(), s.cols());
                let sd = s.data();
                let mut gd = vec![0.0; sd.len()];
                for j in 0..cols {
                    let dot: f64 = (0..rows).map(|i| sd[i * cols + j] * g[i * cols + j]).sum();
                    for i in 0..rows {
                        let e = i * cols + j;
                        gd[e] = -sd[e] * (g[e] - dot) / beta;
                    }
                }
                vec![(*dist, gd)]
            }
            Op::Warp { state, sim } => {
                let x = self.tensor(*state)?;
                let s = self.matrix(*sim)?;
                let (n, ch) = (s.cols(), x.channels());
                let sd = s.data();
                let mut gx = vec![0.0; x.data().len()];
                let mut gs = vec![0.0; sd.len()];
                for c in 0..ch {
                    let xc = x.plane(c);
                    let gc = &g[c * n..(c + 1) * n];
                    for i in 0..n {
                        let row = &sd[i * n..(i + 1) * n];
                        gx[c * n + i] = row.iter().zip(gc).map(|(w, go)| w * go).sum();
                        let xi = xc[i];
                        for (gsv, go) in gs[i * n..(i + 1) * n].iter_mut().zip(gc) {
                            *gsv += xi * go;
                        }
                    }
                }
                vec![(*state, gx), (*sim, gs)]
            }
            Op::SparseDistance { prev, cur } => {
                let Value::Sparse(pattern, d) = out else {
                    unreachable!("sparse distance yields sparse values")
                };
                let (a, b) = (self.tensor(*prev)?, self.tensor(*cur)?);
                let (ga, gb) = sparse_distance_backward(a, b, pattern, d, g);
                vec![(*prev, ga), (*cur, gb)]
            }
            Op::SparseSoftmax { dist, beta } => {
                let Value::Sparse(pattern, s) = out else {
                    unreachable!("sparse softmax yields sparse values")
                };
                let mut gd = vec![0.0; s.len()];
                for j in 0..pattern.n_target() {
                    let r = pattern.row(j);
                    let dot: f64 = s[r.clone()].iter().zip(&g[r.clone()]).map(|(a, b)| a * b).sum();
                    for e in r {
                        gd[e] = -s[e] * (g[e] - dot) / beta;
                    }
                }
                vec![(*dist, gd)]
            }
            Op::SparseWarp { state, sim } => {
                let x = self.tensor(*state)?;
                let (pattern, w) = self.sparse(*sim)?;
                let (n, ch) = (x.pixels(), x.channels());
                let mut gx = vec![0.0; x.data().len()];
                let mut gw = vec![0.0; w.len()];
                for j in 0..pattern.n_target() {
                    let r = pattern.row(j);
                    for (e, &i) in r.clone().zip(pattern.sources(j)) {
                        let i = i as usize;
                        let mut acc = 0.0;
                        for c in 0..ch {
                            let go = g[c * n + j];
                            gx[c * n + i] += w[e] * go;
                            acc += x.data()[c * n + i] * go;
                        }
                        gw[e] = acc;
                    }
                }
                vec![(*state, gx), (*sim, gw)]
            }
            Op::Loss { pred, target, kind } => {
                let (p, t) = (self.tensor(*pred)?, self.tensor(*target)?);
                let seed = g[0];
                let diff: Vec<f64> = p.data().iter().zip(t.data()).map(|(a, b)| a - b).collect();
                let scale = match kind {
                    LossKind::Norm => {
                        let norm = self.scalar(Var(idx))?;
                        if norm == 0.0 {
                            0.0
                        } else {
                            seed / norm
                        }
                    }
                    LossKind::MeanSquared => 2.0 * seed / diff.len() as f64,
                };
                let gp: Vec<f64> = diff.iter().map(|d| d * scale).collect();
                let gt = gp.iter().map(|v| -v).collect();
                vec![(*pred, gp), (*target, gt)]
            }
        })
    }

    fn matrix_of<'a>(&self, v: &'a Value) -> &'a Matrix {
        match v {
            Value::Matrix(m) => m,
            _ => unreachable!("dense non-local ops yield matrices"),
        }
    }
}

/// Adjoints of `D(i, j) = ‖a_i − b_j‖` given `g(i, j)`.
fn distance_backward(
    a: &Tensor,
    b: &Tensor,
    d: &[f64],
    g: &[f64],
    at: impl Fn(usize, usize) -> usize,
    rows: usize,
    cols: usize,
) -> (Vec<f64>, Vec<f64>) {
    let ch = a.channels();
    // w(i, j) = g / D, zero where the distance vanishes
    let mut w = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            let e = at(i, j);
            if d[e] > 0.0 {
                w[i * cols + j] = g[e] / d[e];
            }
        }
    }
    let row_sum: Vec<f64> = (0..rows).map(|i| w[i * cols..(i + 1) * cols].iter().sum()).collect();
    let mut col_sum = vec![0.0; cols];
    for i in 0..rows {
        for (cs, wv) in col_sum.iter_mut().zip(&w[i * cols..(i + 1) * cols]) {
            *cs += wv;
        }
    }
    let mut ga = vec![0.0; a.data().len()];
    let mut gb = vec![0.0; b.data().len()];
    for c in 0..ch {
        let (ac, bc) = (a.plane(c), b.plane(c));
        for i in 0..rows {
            let wr = &w[i * cols..(i + 1) * cols];
            let wb: f64 = wr.iter().zip(bc).map(|(x, y)| x * y).sum();
            ga[c * rows + i] = ac[i] * row_sum[i] - wb;
            for (gbv, wv) in gb[c * cols..(c + 1) * cols].iter_mut().zip(wr) {
                *gbv -= wv * ac[i];
            }
        }
        for j in 0..cols {
            gb[c * cols + j] += bc[j] * col_sum[j];
        }
    }
    (ga, gb)
}

fn sparse_distance_backward(
    a: &Tensor,
    b: &Tensor,
    pattern: &SparsePattern,
    d: &[f64],
    g: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let (ch, n) = (a.channels(), a.pixels());
    let mut ga = vec![0.0; a.data().len()];
    let mut gb = vec![0.0; b.data().len()];
    for j in 0..pattern.n_target() {
        for (e, &i) in pattern.row(j).zip(pattern.sources(j)) {
            if d[e] <= 0.0 {
                continue;
            }
            let i = i as usize;
            let w = g[e] / d[e];
            for c in 0..ch {
                let diff = a.data()[c * n + i] - b.data()[c * n + j];
                ga[c * n + i] += w * diff;
                gb[c * n + j] -= w * diff;
            }
        }
    }
    (ga, gb)
}

/// Loss between a prediction and its reference.
pub fn loss_value(pred: &Tensor, target: &Tensor, kind: LossKind) -> Result<f64> {
    pred.ensure_same_shape(target, "loss")?;
    let sq: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(match kind {
        LossKind::Norm => sq.sqrt(),
        LossKind::MeanSquared => sq / pred.data().len() as f64,
    })
}
