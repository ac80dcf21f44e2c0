use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use rand::Rng;

use super::tensor::{gemm, gemm_nt, gemm_tn, Tensor};
use crate::error::{Error, Result};

type CustomBackward = Rc<dyn Fn(&[Rc<Tensor>], &Tensor, &[f64]) -> Vec<Option<Vec<f64>>>>;

enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    Tanh(usize),
    Sigmoid(usize),
    Relu(usize),
    Exp(usize),
    Mask(usize, Rc<Vec<f64>>),
    Concat {
        parts: Vec<usize>,
        outer: usize,
        inner: usize,
        lens: Vec<usize>,
    },
    Slice {
        src: usize,
        outer: usize,
        inner: usize,
        src_len: usize,
        start: usize,
        len: usize,
    },
    Transpose(usize),
    Reshape(usize),
    GatherRows {
        src: usize,
        index: Vec<usize>,
    },
    CumSum {
        src: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Softmax {
        src: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Conv1d {
        x: usize,
        w: usize,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    BatchNormTrain {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        valid: Vec<bool>,
        count: usize,
    },
    BatchNormEval {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        valid: Vec<bool>,
    },
    Sum(usize),
    Mse {
        a: usize,
        b: usize,
        row_weights: Option<Rc<Vec<f64>>>,
        denom: f64,
    },
    BceLogits {
        logits: usize,
        targets: Rc<Vec<f64>>,
        weights: Rc<Vec<f64>>,
        pos_weight: f64,
        denom: f64,
    },
    LogAbsDet {
        w: usize,
        inv_t: Vec<f64>,
    },
    Custom {
        inputs: Vec<usize>,
        backward: CustomBackward,
    },
}

#[derive(Clone, Copy)]
struct ConvGeom {
    t_in: usize,
    t_out: usize,
    c_in: usize,
    c_out: usize,
    k: usize,
    pad: usize,
    dilation: usize,
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Operation trace for one forward pass. Nodes are appended in execution
/// order, so reverse index order is a valid reverse topological order.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Batch-norm statistics computed in training mode, for running-average updates.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub enum BatchNormMode<'a> {
    /// Normalize with statistics of the valid rows of this input.
    Train,
    /// Normalize with recorded running statistics; `None` means nothing was recorded yet.
    Eval(Option<(&'a [f64], &'a [f64])>),
}

pub const BATCHNORM_EPS: f64 = 1e-5;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf that receives a gradient.
    pub fn param(&self, t: Tensor) -> Var<'_> {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.push(t, Op::Leaf, false)
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn rg(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Concatenate along `axis`; all parts must agree on every other extent.
    pub fn concat<'g>(&'g self, parts: &[Var<'g>], axis: usize) -> Result<Var<'g>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?
            .shape();
        if axis >= first.len() {
            return Err(Error::invalid(format!("concat axis {axis} out of range")));
        }
        let mut lens = Vec::with_capacity(parts.len());
        for p in parts {
            let s = p.shape();
            if s.len() != first.len()
                || s[..axis] != first[..axis]
                || s[axis + 1..] != first[axis + 1..]
            {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s,
                });
            }
            lens.push(s[axis]);
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let total: usize = lens.iter().sum();
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| self.value(p.id)).collect();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &l) in values.iter().zip(&lens) {
                out.extend_from_slice(&v.data()[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let rg = parts.iter().any(|p| self.rg(p.id));
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Concat {
                parts: parts.iter().map(|p| p.id).collect(),
                outer,
                inner,
                lens,
            },
            rg,
        ))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.numel() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            backprop(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: usize, g: Vec<f64>) {
    match &mut grads[id] {
        Some(existing) => existing.iter_mut().zip(&g).for_each(|(e, v)| *e += v),
        slot => *slot = Some(g),
    }
}

fn accumulate_with(grads: &mut [Option<Vec<f64>>], id: usize, len: usize, f: impl FnOnce(&mut [f64])) {
    let slot = grads[id].get_or_insert_with(|| vec![0.0; len]);
    f(slot);
}

#[allow(clippy::too_many_lines)]
fn backprop(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let rg = |i: usize| nodes[i].requires_grad;
    let val = |i: usize| &nodes[i].value;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = val(*a).dims2();
            let n = val(*b).cols();
            if rg(*a) {
                let bv = val(*b).data();
                accumulate_with(grads, *a, m * k, |da| gemm_nt(m, n, k, g, bv, da, true));
            }
            if rg(*b) {
                let av = val(*a).data();
                accumulate_with(grads, *b, k * n, |db| gemm_tn(k, m, n, av, g, db, true));
            }
        }
        Op::Add(a, b) => {
            if rg(*a) {
                accumulate(grads, *a, g.to_vec());
            }
            if rg(*b) {
                accumulate(grads, *b, g.to_vec());
            }
        }
        Op::Sub(a, b) => {
            if rg(*a) {
                accumulate(grads, *a, g.to_vec());
            }
            if rg(*b) {
                accumulate(grads, *b, g.iter().map(|v| -v).collect());
            }
        }
        Op::Mul(a, b) => {
            if rg(*a) {
                let bv = val(*b).data();
                accumulate(grads, *a, g.iter().zip(bv).map(|(g, b)| g * b).collect());
            }
            if rg(*b) {
                let av = val(*a).data();
                accumulate(grads, *b, g.iter().zip(av).map(|(g, a)| g * a).collect());
            }
        }
        Op::AddRow(a, b) => {
            if rg(*a) {
                accumulate(grads, *a, g.to_vec());
            }
            if rg(*b) {
                let n = val(*b).numel();
                accumulate_with(grads, *b, n, |db| {
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                });
            }
        }
        Op::Scale(a, s) => {
            if rg(*a) {
                accumulate(grads, *a, g.iter().map(|v| v * s).collect());
            }
        }
        Op::Tanh(a) => {
            if rg(*a) {
                let y = nodes[id].value.data();
                accumulate(grads, *a, g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect());
            }
        }
        Op::Sigmoid(a) => {
            if rg(*a) {
                let y = nodes[id].value.data();
                accumulate(grads, *a, g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect());
            }
        }
        Op::Relu(a) => {
            if rg(*a) {
                let x = val(*a).data();
                accumulate(
                    grads,
                    *a,
                    g.iter()
                        .zip(x)
                        .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                        .collect(),
                );
            }
        }
        Op::Exp(a) => {
            if rg(*a) {
                let y = nodes[id].value.data();
                accumulate(grads, *a, g.iter().zip(y).map(|(g, y)| g * y).collect());
            }
        }
        Op::Mask(a, mask) => {
            if rg(*a) {
                accumulate(grads, *a, g.iter().zip(mask.iter()).map(|(g, m)| g * m).collect());
            }
        }
        Op::Concat {
            parts,
            outer,
            inner,
            lens,
        } => {
            let total: usize = lens.iter().sum();
            let mut offset = 0;
            for (p, &l) in parts.iter().zip(lens) {
                if rg(*p) {
                    let mut d = Vec::with_capacity(outer * l * inner);
                    for o in 0..*outer {
                        let base = (o * total + offset) * inner;
                        d.extend_from_slice(&g[base..base + l * inner]);
                    }
                    accumulate(grads, *p, d);
                }
                offset += l;
            }
        }
        Op::Slice {
            src,
            outer,
            inner,
            src_len,
            start,
            len,
        } => {
            if rg(*src) {
                accumulate_with(grads, *src, outer * src_len * inner, |d| {
                    for o in 0..*outer {
                        let dst = (o * src_len + start) * inner;
                        let from = o * len * inner;
                        d[dst..dst + len * inner]
                            .iter_mut()
                            .zip(&g[from..from + len * inner])
                            .for_each(|(d, v)| *d += v);
                    }
                });
            }
        }
        Op::Transpose(a) => {
            if rg(*a) {
                let (r, c) = val(*a).dims2();
                let gt = Tensor::from_parts(vec![c, r], g.to_vec()).transpose();
                accumulate(grads, *a, gt.into_data());
            }
        }
        Op::Reshape(a) => {
            if rg(*a) {
                accumulate(grads, *a, g.to_vec());
            }
        }
        Op::GatherRows { src, index } => {
            if rg(*src) {
                let (r, c) = val(*src).dims2();
                accumulate_with(grads, *src, r * c, |d| {
                    for (i, &row) in index.iter().enumerate() {
                        d[row * c..(row + 1) * c]
                            .iter_mut()
                            .zip(&g[i * c..(i + 1) * c])
                            .for_each(|(d, v)| *d += v);
                    }
                });
            }
        }
        Op::CumSum {
            src,
            outer,
            len,
            inner,
        } => {
            if rg(*src) {
                let mut d = g.to_vec();
                for o in 0..*outer {
                    for i in 0..*inner {
                        let mut acc = 0.0;
                        for l in (0..*len).rev() {
                            let idx = (o * len + l) * inner + i;
                            acc += g[idx];
                            d[idx] = acc;
                        }
                    }
                }
                accumulate(grads, *src, d);
            }
        }
        Op::Softmax {
            src,
            outer,
            len,
            inner,
        } => {
            if rg(*src) {
                let y = nodes[id].value.data();
                let mut d = vec![0.0; y.len()];
                for o in 0..*outer {
                    for i in 0..*inner {
                        let at = |l: usize| (o * len + l) * inner + i;
                        let dot: f64 = (0..*len).map(|l| g[at(l)] * y[at(l)]).sum();
                        for l in 0..*len {
                            d[at(l)] = y[at(l)] * (g[at(l)] - dot);
                        }
                    }
                }
                accumulate(grads, *src, d);
            }
        }
        Op::Conv1d { x, w, geom, cols } => {
            let ck = geom.c_in * geom.k;
            if rg(*w) {
                accumulate_with(grads, *w, geom.c_out * ck, |dw| {
                    gemm_tn(geom.c_out, geom.t_out, ck, g, cols, dw, true)
                });
            }
            if rg(*x) {
                let mut dcols = vec![0.0; geom.t_out * ck];
                gemm(geom.t_out, geom.c_out, ck, g, val(*w).data(), &mut dcols, false);
                accumulate_with(grads, *x, geom.t_in * geom.c_in, |dx| {
                    col2im(&dcols, geom, dx)
                });
            }
        }
        Op::BatchNormTrain {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            valid,
            count,
        } => {
            let c = inv_std.len();
            let gm = val(*gamma).data();
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            for (r, ok) in valid.iter().enumerate() {
                if !ok {
                    continue;
                }
                for j in 0..c {
                    dgamma[j] += g[r * c + j] * xhat[r * c + j];
                    dbeta[j] += g[r * c + j];
                }
            }
            if rg(*x) {
                let n = *count as f64;
                let mut dx = vec![0.0; valid.len() * c];
                for (r, ok) in valid.iter().enumerate() {
                    if !ok {
                        continue;
                    }
                    for j in 0..c {
                        let dxhat = g[r * c + j] * gm[j];
                        // Σdxhat = γ·dβ, Σ dxhat·xhat = γ·dγ
                        dx[r * c + j] = inv_std[j] / n
                            * (n * dxhat - gm[j] * dbeta[j] - xhat[r * c + j] * gm[j] * dgamma[j]);
                    }
                }
                accumulate(grads, *x, dx);
            }
            if rg(*gamma) {
                accumulate(grads, *gamma, dgamma);
            }
            if rg(*beta) {
                accumulate(grads, *beta, dbeta);
            }
        }
        Op::BatchNormEval {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            valid,
        } => {
            let c = inv_std.len();
            let gm = val(*gamma).data();
            if rg(*x) {
                let mut dx = vec![0.0; valid.len() * c];
                for (r, ok) in valid.iter().enumerate() {
                    if *ok {
                        for j in 0..c {
                            dx[r * c + j] = g[r * c + j] * gm[j] * inv_std[j];
                        }
                    }
                }
                accumulate(grads, *x, dx);
            }
            if rg(*gamma) || rg(*beta) {
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for (r, ok) in valid.iter().enumerate() {
                    if *ok {
                        for j in 0..c {
                            dgamma[j] += g[r * c + j] * xhat[r * c + j];
                            dbeta[j] += g[r * c + j];
                        }
                    }
                }
                if rg(*gamma) {
                    accumulate(grads, *gamma, dgamma);
                }
                if rg(*beta) {
                    accumulate(grads, *beta, dbeta);
                }
            }
        }
        Op::Sum(a) => {
            if rg(*a) {
                accumulate(grads, *a, vec![g[0]; val(*a).numel()]);
            }
        }
        Op::Mse {
            a,
            b,
            row_weights,
            denom,
        } => {
            let av = val(*a).data();
            let bv = val(*b).data();
            let cols = val(*a).cols();
            let scale = 2.0 * g[0] / denom;
            let d: Vec<f64> = av
                .iter()
                .zip(bv)
                .enumerate()
                .map(|(i, (x, y))| {
                    let w = row_weights.as_ref().map_or(1.0, |w| w[i / cols]);
                    scale * w * (x - y)
                })
                .collect();
            if rg(*b) {
                accumulate(grads, *b, d.iter().map(|v| -v).collect());
            }
            if rg(*a) {
                accumulate(grads, *a, d);
            }
        }
        Op::BceLogits {
            logits,
            targets,
            weights,
            pos_weight,
            denom,
        } => {
            if rg(*logits) {
                let x = val(*logits).data();
                let d = x
                    .iter()
                    .zip(targets.iter())
                    .zip(weights.iter())
                    .map(|((x, y), w)| {
                        let s = sigmoid(*x);
                        g[0] * w / denom * (pos_weight * y * (s - 1.0) + (1.0 - y) * s)
                    })
                    .collect();
                accumulate(grads, *logits, d);
            }
        }
        Op::LogAbsDet { w, inv_t } => {
            if rg(*w) {
                accumulate(grads, *w, inv_t.iter().map(|v| v * g[0]).collect());
            }
        }
        Op::Custom { inputs, backward } => {
            let values: Vec<Rc<Tensor>> = inputs.iter().map(|&i| Rc::clone(val(i))).collect();
            let out = backward(&values, &nodes[id].value, g);
            for (&i, d) in inputs.iter().zip(out) {
                if let (true, Some(d)) = (rg(i), d) {
                    accumulate(grads, i, d);
                }
            }
        }
    }
}

fn col2im(dcols: &[f64], geom: &ConvGeom, dx: &mut [f64]) {
    let ck = geom.c_in * geom.k;
    for t in 0..geom.t_out {
        for k in 0..geom.k {
            let src = t as isize + (k * geom.dilation) as isize - geom.pad as isize;
            if src < 0 || src as usize >= geom.t_in {
                continue;
            }
            let src = src as usize;
            for ci in 0..geom.c_in {
                dx[src * geom.c_in + ci] += dcols[t * ck + ci * geom.k + k];
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + eˣ)` without overflow.
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<'g> Var<'g> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.rg(self.id)
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> f64 {
        self.value().data()[0]
    }

    fn unary(&self, value: Tensor, op: Op) -> Var<'g> {
        self.graph.push(value, op, self.requires_grad())
    }

    fn map(&self, f: impl Fn(f64) -> f64, op: Op) -> Var<'g> {
        let v = self.value();
        let out = Tensor::from_parts(v.shape().to_vec(), v.data().iter().map(|&x| f(x)).collect());
        self.unary(out, op)
    }

    fn same_shape(&self, other: &Var<'g>, op: &'static str) -> Result<(Rc<Tensor>, Rc<Tensor>)> {
        let a = self.value();
        let b = other.value();
        if a.shape() != b.shape() {
            return Err(Error::ShapeMismatch {
                op,
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        Ok((a, b))
    }

    fn binary(&self, other: &Var<'g>, op: &'static str, f: impl Fn(f64, f64) -> f64, make: Op) -> Result<Var<'g>> {
        let (a, b) = self.same_shape(other, op)?;
        let out = Tensor::from_parts(
            a.shape().to_vec(),
            a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect(),
        );
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.graph.push(out, make, rg))
    }

    /// Matrix product of rank-2 tensors (rank-1 operands are treated as a single row).
    pub fn matmul(&self, other: &Var<'g>) -> Result<Var<'g>> {
        let a = self.value();
        let b = other.value();
        let (m, k) = a.dims2();
        let (k2, n) = b.dims2();
        if a.rank() > 2 || b.rank() != 2 || k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, a.data(), b.data(), &mut out, false);
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self
            .graph
            .push(Tensor::from_parts(vec![m, n], out), Op::MatMul(self.id, other.id), rg))
    }

    pub fn add(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    /// Adds a length-`n` vector to every row of an `[m, n]` tensor.
    pub fn add_row(&self, row: &Var<'g>) -> Result<Var<'g>> {
        let a = self.value();
        let b = row.value();
        let n = a.cols();
        if b.numel() != n {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let mut out = a.data().to_vec();
        for chunk in out.chunks_mut(n) {
            chunk.iter_mut().zip(b.data()).for_each(|(o, v)| *o += v);
        }
        let rg = self.requires_grad() || row.requires_grad();
        Ok(self.graph.push(
            Tensor::from_parts(a.shape().to_vec(), out),
            Op::AddRow(self.id, row.id),
            rg,
        ))
    }

    pub fn scale(&self, s: f64) -> Var<'g> {
        self.map(|x| x * s, Op::Scale(self.id, s))
    }

    pub fn tanh(&self) -> Var<'g> {
        self.map(f64::tanh, Op::Tanh(self.id))
    }

    pub fn sigmoid(&self) -> Var<'g> {
        self.map(sigmoid, Op::Sigmoid(self.id))
    }

    pub fn relu(&self) -> Var<'g> {
        self.map(|x| x.max(0.0), Op::Relu(self.id))
    }

    pub fn exp(&self) -> Var<'g> {
        self.map(f64::exp, Op::Exp(self.id))
    }

    /// Elementwise product with a constant mask.
    pub fn mask(&self, mask: Rc<Vec<f64>>) -> Result<Var<'g>> {
        let v = self.value();
        if mask.len() != v.numel() {
            return Err(Error::ShapeMismatch {
                op: "mask",
                lhs: v.shape().to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let out = Tensor::from_parts(
            v.shape().to_vec(),
            v.data().iter().zip(mask.iter()).map(|(x, m)| x * m).collect(),
        );
        Ok(self.unary(out, Op::Mask(self.id, mask)))
    }

    /// Inverted dropout. With `active == false` or `p == 0` this is the identity.
    pub fn dropout<R: Rng>(&self, p: f64, active: bool, rng: &mut R) -> Var<'g> {
        if !active || p <= 0.0 {
            return *self;
        }
        let keep = 1.0 - p;
        let mask: Vec<f64> = (0..self.value().numel())
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        self.mask(Rc::new(mask)).expect("mask sized from input")
    }

    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Var<'g>> {
        let v = self.value();
        let shape = v.shape();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(Error::invalid(format!(
                "slice [{start}, {}) on axis {axis} of {shape:?}",
                start + len
            )));
        }
        let (outer, src_len, inner) = split_axis(shape, axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * src_len + start) * inner;
            out.extend_from_slice(&v.data()[base..base + len * inner]);
        }
        let mut new_shape = shape.to_vec();
        new_shape[axis] = len;
        Ok(self.unary(
            Tensor::from_parts(new_shape, out),
            Op::Slice {
                src: self.id,
                outer,
                inner,
                src_len,
                start,
                len,
            },
        ))
    }

    pub fn transpose(&self) -> Var<'g> {
        let t = self.value().transpose();
        self.unary(t, Op::Transpose(self.id))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'g>> {
        let t = (*self.value()).clone().reshape(shape.to_vec())?;
        Ok(self.unary(t, Op::Reshape(self.id)))
    }

    /// Selects rows of a rank-2 tensor (embedding lookup, frame repetition).
    pub fn gather_rows(&self, index: &[usize]) -> Result<Var<'g>> {
        let v = self.value();
        let (r, c) = v.dims2();
        let mut out = Vec::with_capacity(index.len() * c);
        for &i in index {
            if i >= r {
                return Err(Error::invalid(format!("row index {i} out of range for {r} rows")));
            }
            out.extend_from_slice(v.row(i));
        }
        if index.is_empty() {
            return Err(Error::invalid("gather of zero rows"));
        }
        Ok(self.unary(
            Tensor::from_parts(vec![index.len(), c], out),
            Op::GatherRows {
                src: self.id,
                index: index.to_vec(),
            },
        ))
    }

    pub fn cumsum(&self, axis: usize) -> Result<Var<'g>> {
        let v = self.value();
        if axis >= v.rank() {
            return Err(Error::invalid(format!("cumsum axis {axis} out of range")));
        }
        let (outer, len, inner) = split_axis(v.shape(), axis);
        let mut out = v.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let mut acc = 0.0;
                for l in 0..len {
                    let idx = (o * len + l) * inner + i;
                    acc += out[idx];
                    out[idx] = acc;
                }
            }
        }
        Ok(self.unary(
            Tensor::from_parts(v.shape().to_vec(), out),
            Op::CumSum {
                src: self.id,
                outer,
                len,
                inner,
            },
        ))
    }

    /// Softmax along `axis`, stabilized by subtracting the maximum.
    pub fn softmax(&self, axis: usize) -> Result<Var<'g>> {
        let v = self.value();
        if axis >= v.rank() {
            return Err(Error::invalid(format!("softmax axis {axis} out of range")));
        }
        if v.data().iter().any(|x| x.is_nan()) {
            return Err(Error::NonFinite("softmax input"));
        }
        let (outer, len, inner) = split_axis(v.shape(), axis);
        let x = v.data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let max = (0..len).map(|l| x[at(l)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for l in 0..len {
                    let e = (x[at(l)] - max).exp();
                    out[at(l)] = e;
                    total += e;
                }
                for l in 0..len {
                    out[at(l)] /= total;
                }
            }
        }
        Ok(self.unary(
            Tensor::from_parts(v.shape().to_vec(), out),
            Op::Softmax {
                src: self.id,
                outer,
                len,
                inner,
            },
        ))
    }

    /// Cross-correlation of a `[T, C_in]` sequence with `[C_out, C_in, K]` kernels,
    /// zero padded by `pad` on both ends. Output is `[T + 2·pad − dilation·(K−1), C_out]`.
    pub fn conv1d(&self, kernels: &Var<'g>, pad: usize, dilation: usize) -> Result<Var<'g>> {
        let x = self.value();
        let w = kernels.value();
        let (t_in, c_in) = x.dims2();
        let ws = w.shape();
        if x.rank() != 2 || ws.len() != 3 || ws[1] != c_in || dilation == 0 {
            return Err(Error::ShapeMismatch {
                op: "conv1d",
                lhs: x.shape().to_vec(),
                rhs: ws.to_vec(),
            });
        }
        let (c_out, k) = (ws[0], ws[2]);
        let span = dilation * (k - 1);
        if t_in + 2 * pad <= span {
            return Err(Error::invalid(format!(
                "conv1d: input length {t_in} too short for kernel span {}",
                span + 1
            )));
        }
        let t_out = t_in + 2 * pad - span;
        let geom = ConvGeom {
            t_in,
            t_out,
            c_in,
            c_out,
            k,
            pad,
            dilation,
        };
        let ck = c_in * k;
        let xd = x.data();
        let mut cols = vec![0.0; t_out * ck];
        for t in 0..t_out {
            let row = &mut cols[t * ck..(t + 1) * ck];
            for kk in 0..k {
                let src = t as isize + (kk * dilation) as isize - pad as isize;
                if src < 0 || src as usize >= t_in {
                    continue;
                }
                let src = src as usize;
                for ci in 0..c_in {
                    row[ci * k + kk] = xd[src * c_in + ci];
                }
            }
        }
        let mut out = vec![0.0; t_out * c_out];
        gemm_nt(t_out, ck, c_out, &cols, w.data(), &mut out, false);
        let rg = self.requires_grad() || kernels.requires_grad();
        Ok(self.graph.push(
            Tensor::from_parts(vec![t_out, c_out], out),
            Op::Conv1d {
                x: self.id,
                w: kernels.id,
                geom,
                cols,
            },
            rg,
        ))
    }

    /// Batch normalization of a `[N, C]` input over its rows. Rows with
    /// `valid[r] == false` are excluded from statistics and produce zeros.
    pub fn batchnorm1d(
        &self,
        gamma: &Var<'g>,
        beta: &Var<'g>,
        mode: BatchNormMode<'_>,
        valid: Option<&[bool]>,
    ) -> Result<(Var<'g>, Option<BatchStats>)> {
        let x = self.value();
        let (n, c) = x.dims2();
        let gv = gamma.value();
        let bv = beta.value();
        if x.rank() != 2 || gv.numel() != c || bv.numel() != c {
            return Err(Error::ShapeMismatch {
                op: "batchnorm1d",
                lhs: x.shape().to_vec(),
                rhs: gv.shape().to_vec(),
            });
        }
        let valid: Vec<bool> = match valid {
            Some(v) if v.len() != n => {
                return Err(Error::invalid(format!("batchnorm mask has {} rows, input {n}", v.len())))
            }
            Some(v) => v.to_vec(),
            None => vec![true; n],
        };
        let count = valid.iter().filter(|v| **v).count();
        if count == 0 {
            return Err(Error::invalid("batchnorm over zero valid rows"));
        }
        let xd = x.data();
        let (mean, var, stats) = match mode {
            BatchNormMode::Train => {
                let mut mean = vec![0.0; c];
                for (r, _) in valid.iter().enumerate().filter(|(_, v)| **v) {
                    mean.iter_mut().zip(&xd[r * c..(r + 1) * c]).for_each(|(m, x)| *m += x);
                }
                mean.iter_mut().for_each(|m| *m /= count as f64);
                let mut var = vec![0.0; c];
                for (r, _) in valid.iter().enumerate().filter(|(_, v)| **v) {
                    for j in 0..c {
                        let d = xd[r * c + j] - mean[j];
                        var[j] += d * d;
                    }
                }
                var.iter_mut().for_each(|v| *v /= count as f64);
                (mean.clone(), var.clone(), Some(BatchStats { mean, var }))
            }
            BatchNormMode::Eval(Some((m, v))) => {
                if m.len() != c || v.len() != c {
                    return Err(Error::invalid("running statistics have wrong width"));
                }
                (m.to_vec(), v.to_vec(), None)
            }
            BatchNormMode::Eval(None) => {
                return Err(Error::invalid(
                    "batchnorm in eval mode before any running statistics were recorded",
                ))
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BATCHNORM_EPS).sqrt()).collect();
        let mut xhat = vec![0.0; n * c];
        let mut out = vec![0.0; n * c];
        for (r, ok) in valid.iter().enumerate() {
            if !ok {
                continue;
            }
            for j in 0..c {
                let h = (xd[r * c + j] - mean[j]) * inv_std[j];
                xhat[r * c + j] = h;
                out[r * c + j] = gv.data()[j] * h + bv.data()[j];
            }
        }
        let rg = self.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        let op = if stats.is_some() {
            Op::BatchNormTrain {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                inv_std,
                valid,
                count,
            }
        } else {
            Op::BatchNormEval {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                inv_std,
                valid,
            }
        };
        Ok((
            self.graph.push(Tensor::from_parts(vec![n, c], out), op, rg),
            stats,
        ))
    }

    pub fn sum(&self) -> Var<'g> {
        let s = self.value().sum();
        self.unary(Tensor::scalar(s), Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var<'g> {
        let n = self.value().numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Mean squared error, optionally weighting whole rows (frame masks).
    pub fn mse(&self, target: &Var<'g>, row_weights: Option<Rc<Vec<f64>>>) -> Result<Var<'g>> {
        let (a, b) = self.same_shape(target, "mse")?;
        let (rows, cols) = a.dims2();
        if let Some(w) = &row_weights {
            if w.len() != rows {
                return Err(Error::ShapeMismatch {
                    op: "mse weights",
                    lhs: a.shape().to_vec(),
                    rhs: vec![w.len()],
                });
            }
        }
        let wsum = row_weights.as_ref().map_or(rows as f64, |w| w.iter().sum());
        if wsum <= 0.0 {
            return Err(Error::invalid("mse over zero weighted rows"));
        }
        let denom = wsum * cols as f64;
        let total: f64 = a
            .data()
            .iter()
            .zip(b.data())
            .enumerate()
            .map(|(i, (x, y))| {
                let w = row_weights.as_ref().map_or(1.0, |w| w[i / cols]);
                w * (x - y) * (x - y)
            })
            .sum();
        let rg = self.requires_grad() || target.requires_grad();
        Ok(self.graph.push(
            Tensor::scalar(total / denom),
            Op::Mse {
                a: self.id,
                b: target.id,
                row_weights,
                denom,
            },
            rg,
        ))
    }

    /// Weighted binary cross-entropy on logits with positive-class weight.
    pub fn bce_with_logits(&self, targets: &[f64], weights: Option<&[f64]>, pos_weight: f64) -> Result<Var<'g>> {
        let v = self.value();
        let n = v.numel();
        let weights: Vec<f64> = weights.map_or_else(|| vec![1.0; n], <[f64]>::to_vec);
        if targets.len() != n || weights.len() != n {
            return Err(Error::ShapeMismatch {
                op: "bce_with_logits",
                lhs: v.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let denom: f64 = weights.iter().sum();
        if denom <= 0.0 {
            return Err(Error::invalid("bce over zero weighted elements"));
        }
        let total: f64 = v
            .data()
            .iter()
            .zip(targets)
            .zip(&weights)
            .map(|((x, y), w)| w * (pos_weight * y * softplus(-x) + (1.0 - y) * softplus(*x)))
            .sum();
        Ok(self.unary(
            Tensor::scalar(total / denom),
            Op::BceLogits {
                logits: self.id,
                targets: Rc::new(targets.to_vec()),
                weights: Rc::new(weights),
                pos_weight,
                denom,
            },
        ))
    }

    /// `ln|det W|` of a square matrix.
    pub fn log_abs_det(&self) -> Result<Var<'g>> {
        let w = self.value();
        let (r, c) = w.dims2();
        if w.rank() != 2 || r != c {
            return Err(Error::ShapeMismatch {
                op: "log_abs_det",
                lhs: w.shape().to_vec(),
                rhs: vec![r, r],
            });
        }
        let m = nalgebra::DMatrix::from_row_slice(r, c, w.data());
        let det = m.clone().lu().determinant();
        let inv = m
            .try_inverse()
            .filter(|_| det.abs() > 0.0)
            .ok_or_else(|| Error::invalid("log_abs_det of a singular matrix"))?;
        // d ln|det W| / dW = W⁻ᵀ; row-major storage of W⁻ᵀ is column-major of W⁻¹.
        let inv_t: Vec<f64> = inv.as_slice().to_vec();
        Ok(self.unary(Tensor::scalar(det.abs().ln()), Op::LogAbsDet { w: self.id, inv_t }))
    }
}

impl Graph {
    /// Op with a caller-supplied vector-Jacobian product. `backward` receives
    /// the input values, the output value and the output gradient.
    pub fn custom<'g>(
        &'g self,
        inputs: &[Var<'g>],
        value: Tensor,
        backward: impl Fn(&[Rc<Tensor>], &Tensor, &[f64]) -> Vec<Option<Vec<f64>>> + 'static,
    ) -> Var<'g> {
        let rg = inputs.iter().any(Var::requires_grad);
        self.push(
            value,
            Op::Custom {
                inputs: inputs.iter().map(|v| v.id).collect(),
                backward: Rc::new(backward),
            },
            rg,
        )
    }
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: &Var<'_>) -> Option<Tensor> {
        let g = self.grads.get(v.id)?.as_ref()?;
        Some(Tensor::from_parts(v.shape(), g.clone()))
    }

    /// Raw gradient data, or `None` when nothing flowed into the node.
    pub fn data(&self, v: &Var<'_>) -> Option<&[f64]> {
        self.grads.get(v.id)?.as_deref()
    }
}
