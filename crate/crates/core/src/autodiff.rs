//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles. Calling
//! [`Tape::backward`] on a scalar walks the record in reverse creation order,
//! so identical tapes always accumulate gradients in the same order and give
//! bit-identical results.

use std::cell::{Ref, RefCell};

use crate::error::{Error, Result};
use crate::tensor::{self, broadcast_offsets, broadcast_shape, Tensor};

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    Offset(usize),
    Square(usize),
    Abs(usize),
    Exp(usize),
    Log(usize),
    Gelu(usize),
    Relu(usize),
    Sum(usize),
    Mean(usize),
    SumAxis { src: usize, axis: usize },
    MatMul(usize, usize),
    Permute { src: usize, map: Vec<usize> },
    Reshape(usize),
    Softmax { src: usize, axis: usize },
    MaskedSoftmax { src: usize, valid: Vec<bool> },
    LogSoftmax(usize),
    LayerNorm { x: usize, gain: usize, bias: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    GatherRows { table: usize, ids: Vec<usize> },
    Pick { src: usize, indices: Vec<usize> },
    Fill { src: usize, mask: Vec<bool> },
    Concat(Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// The operation record. Never shared across threads; build one per
/// forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers an input; it receives a gradient iff `requires_grad` is set.
    pub fn leaf(&self, tensor: Tensor) -> Var<'_> {
        let needs_grad = tensor.requires_grad();
        self.push(tensor, Op::Leaf, needs_grad)
    }

    pub fn constant(&self, tensor: Tensor) -> Var<'_> {
        self.push(tensor.with_grad(false), Op::Leaf, false)
    }

    /// Flattens and joins `parts` into one vector.
    pub fn concat<'t>(&'t self, parts: &[Var<'t>]) -> Var<'t> {
        let ids: Vec<usize> = parts.iter().map(|v| v.id).collect();
        let data: Vec<f64> = parts.iter().flat_map(|v| v.value().data().to_vec()).collect();
        let needs = self.needs(&ids);
        self.push(Tensor::vector(data), Op::Concat(ids), needs)
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].needs_grad)
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        if nodes[loss.id].needs_grad {
            grads[loss.id] = Some(vec![1.0]);
        }
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            propagate(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(nodes.iter())
            .map(|(g, n)| {
                g.filter(|_| n.needs_grad)
                    .map(|d| Tensor::new(n.value.shape().to_vec(), d).expect("grad shape"))
            })
            .collect();
        Ok(Gradients { grads })
    }
}

fn slot<'g>(grads: &'g mut [Option<Vec<f64>>], nodes: &[Node], id: usize) -> Option<&'g mut Vec<f64>> {
    if !nodes[id].needs_grad {
        return None;
    }
    let len = nodes[id].value.len();
    Some(grads[id].get_or_insert_with(|| vec![0.0; len]))
}

fn unary(grads: &mut [Option<Vec<f64>>], nodes: &[Node], src: usize, g: &[f64], f: impl Fn(usize, f64) -> f64) {
    if let Some(gs) = slot(grads, nodes, src) {
        for (i, (acc, gi)) in gs.iter_mut().zip(g).enumerate() {
            *acc += f(i, *gi);
        }
    }
}

fn propagate(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        &Op::Add(a, b) | &Op::Sub(a, b) => {
            let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
            let oa = broadcast_offsets(nodes[a].value.shape(), out.shape());
            let ob = broadcast_offsets(nodes[b].value.shape(), out.shape());
            if let Some(ga) = slot(grads, nodes, a) {
                for (gi, &o) in g.iter().zip(&oa) {
                    ga[o] += gi;
                }
            }
            if let Some(gb) = slot(grads, nodes, b) {
                for (gi, &o) in g.iter().zip(&ob) {
                    gb[o] += sign * gi;
                }
            }
        }
        &Op::Mul(a, b) | &Op::Div(a, b) => {
            let div = matches!(node.op, Op::Div(..));
            let av = nodes[a].value.data();
            let bv = nodes[b].value.data();
            let oa = broadcast_offsets(nodes[a].value.shape(), out.shape());
            let ob = broadcast_offsets(nodes[b].value.shape(), out.shape());
            if let Some(ga) = slot(grads, nodes, a) {
                for i in 0..g.len() {
                    let d = if div { 1.0 / bv[ob[i]] } else { bv[ob[i]] };
                    ga[oa[i]] += g[i] * d;
                }
            }
            if let Some(gb) = slot(grads, nodes, b) {
                for i in 0..g.len() {
                    let d = if div {
                        -av[oa[i]] / (bv[ob[i]] * bv[ob[i]])
                    } else {
                        av[oa[i]]
                    };
                    gb[ob[i]] += g[i] * d;
                }
            }
        }
        &Op::Scale(a, c) => unary(grads, nodes, a, g, |_, gi| gi * c),
        &Op::Offset(a) | &Op::Reshape(a) => unary(grads, nodes, a, g, |_, gi| gi),
        &Op::Square(a) => {
            let x = nodes[a].value.data();
            unary(grads, nodes, a, g, |i, gi| 2.0 * x[i] * gi)
        }
        &Op::Abs(a) => {
            let x = nodes[a].value.data();
            unary(grads, nodes, a, g, |i, gi| sign0(x[i]) * gi)
        }
        &Op::Exp(a) => {
            let y = out.data();
            unary(grads, nodes, a, g, |i, gi| y[i] * gi)
        }
        &Op::Log(a) => {
            let x = nodes[a].value.data();
            unary(grads, nodes, a, g, |i, gi| gi / x[i])
        }
        &Op::Gelu(a) => {
            let x = nodes[a].value.data();
            unary(grads, nodes, a, g, |i, gi| gelu_grad(x[i]) * gi)
        }
        &Op::Relu(a) => {
            let x = nodes[a].value.data();
            unary(grads, nodes, a, g, |i, gi| if x[i] > 0.0 { gi } else { 0.0 })
        }
        &Op::Sum(a) => unary(grads, nodes, a, &vec![g[0]; nodes[a].value.len()], |_, gi| gi),
        &Op::Mean(a) => {
            let n = nodes[a].value.len() as f64;
            unary(grads, nodes, a, &vec![g[0] / n; nodes[a].value.len()], |_, gi| gi)
        }
        &Op::SumAxis { src, axis } => {
            let shape = nodes[src].value.shape();
            let (outer, len, inner) = split_axis(shape, axis);
            if let Some(gs) = slot(grads, nodes, src) {
                for o in 0..outer {
                    for j in 0..len {
                        for i in 0..inner {
                            gs[(o * len + j) * inner + i] += g[o * inner + i];
                        }
                    }
                }
            }
        }
        &Op::MatMul(a, b) => {
            let (sa, sb) = (nodes[a].value.shape(), nodes[b].value.shape());
            let (m, k, n) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]);
            let batch = &out.shape()[..out.rank() - 2];
            let oa = broadcast_offsets(&sa[..sa.len() - 2], batch);
            let ob = broadcast_offsets(&sb[..sb.len() - 2], batch);
            let av = nodes[a].value.data();
            let bv = nodes[b].value.data();
            if let Some(ga) = slot(grads, nodes, a) {
                for bi in 0..oa.len() {
                    let gc = &g[bi * m * n..(bi + 1) * m * n];
                    let bm = &bv[ob[bi] * k * n..(ob[bi] + 1) * k * n];
                    tensor::gemm_nt(gc, bm, &mut ga[oa[bi] * m * k..(oa[bi] + 1) * m * k], m, n, k);
                }
            }
            if let Some(gb) = slot(grads, nodes, b) {
                for bi in 0..ob.len() {
                    let gc = &g[bi * m * n..(bi + 1) * m * n];
                    let am = &av[oa[bi] * m * k..(oa[bi] + 1) * m * k];
                    tensor::gemm_tn(am, gc, &mut gb[ob[bi] * k * n..(ob[bi] + 1) * k * n], m, k, n);
                }
            }
        }
        Op::Permute { src, map } => {
            if let Some(gs) = slot(grads, nodes, *src) {
                for (gi, &o) in g.iter().zip(map) {
                    gs[o] += gi;
                }
            }
        }
        &Op::Softmax { src, axis } => {
            let (outer, len, inner) = split_axis(out.shape(), axis);
            let y = out.data();
            if let Some(gs) = slot(grads, nodes, src) {
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let dot: f64 = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            gs[at(j)] += y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
            }
        }
        Op::MaskedSoftmax { src, valid } => {
            let len = valid.len();
            let y = out.data();
            if let Some(gs) = slot(grads, nodes, *src) {
                for r in 0..y.len() / len {
                    let row = r * len..(r + 1) * len;
                    let dot: f64 = g[row.clone()].iter().zip(&y[row.clone()]).map(|(a, b)| a * b).sum();
                    for j in row {
                        gs[j] += y[j] * (g[j] - dot);
                    }
                }
            }
        }
        &Op::LogSoftmax(src) => {
            let len = *out.shape().last().unwrap();
            let y = out.data();
            if let Some(gs) = slot(grads, nodes, src) {
                for r in 0..y.len() / len {
                    let row = r * len..(r + 1) * len;
                    let total: f64 = g[row.clone()].iter().sum();
                    for j in row {
                        gs[j] += g[j] - y[j].exp() * total;
                    }
                }
            }
        }
        Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
            let d = *out.shape().last().unwrap();
            let gv = nodes[*gain].value.data();
            if let Some(gg) = slot(grads, nodes, *gain) {
                for (i, gi) in g.iter().enumerate() {
                    gg[i % d] += gi * xhat[i];
                }
            }
            if let Some(gb) = slot(grads, nodes, *bias) {
                for (i, gi) in g.iter().enumerate() {
                    gb[i % d] += gi;
                }
            }
            if let Some(gx) = slot(grads, nodes, *x) {
                for (r, &istd) in inv_std.iter().enumerate() {
                    let row = r * d..(r + 1) * d;
                    let mut mean_dh = 0.0;
                    let mut mean_dh_xh = 0.0;
                    for i in row.clone() {
                        let dh = g[i] * gv[i % d];
                        mean_dh += dh;
                        mean_dh_xh += dh * xhat[i];
                    }
                    mean_dh /= d as f64;
                    mean_dh_xh /= d as f64;
                    for i in row {
                        let dh = g[i] * gv[i % d];
                        gx[i] += istd * (dh - mean_dh - xhat[i] * mean_dh_xh);
                    }
                }
            }
        }
        Op::GatherRows { table, ids } => {
            let d = nodes[*table].value.shape()[1];
            if let Some(gt) = slot(grads, nodes, *table) {
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[id * d + j] += g[r * d + j];
                    }
                }
            }
        }
        Op::Pick { src, indices } => {
            if let Some(gs) = slot(grads, nodes, *src) {
                for (gi, &ix) in g.iter().zip(indices) {
                    gs[ix] += gi;
                }
            }
        }
        Op::Concat(parts) => {
            let mut at = 0;
            for &p in parts {
                let n = nodes[p].value.len();
                if let Some(gp) = slot(grads, nodes, p) {
                    for (acc, gi) in gp.iter_mut().zip(&g[at..at + n]) {
                        *acc += gi;
                    }
                }
                at += n;
            }
        }
        Op::Fill { src, mask } => {
            if let Some(gs) = slot(grads, nodes, *src) {
                for (i, gi) in g.iter().enumerate() {
                    if !mask[i] {
                        gs[i] += gi;
                    }
                }
            }
        }
    }
}

fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Gradients of one backward pass, indexed by the [`Var`] they belong to.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` when the variable does not require a gradient or does not
    /// influence the loss.
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient or zeros of the variable's shape.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Tensor {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(&var.shape()))
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn to_tensor(&self) -> Tensor {
        self.value().clone().with_grad(false)
    }

    fn derive(&self, value: Tensor, op: Op, parents: &[usize]) -> Var<'t> {
        let needs = self.tape.needs(parents);
        self.tape.push(value, op, needs)
    }

    fn map(&self, f: impl Fn(f64) -> f64, op: Op) -> Var<'t> {
        let value = {
            let v = self.value();
            Tensor::new(v.shape().to_vec(), v.data().iter().map(|&x| f(x)).collect()).unwrap()
        };
        self.derive(value, op, &[self.id])
    }

    fn zip(&self, other: Var<'t>, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let a = self.value();
        let b = other.value();
        let shape = broadcast_shape(name, a.shape(), b.shape())?;
        let oa = broadcast_offsets(a.shape(), &shape);
        let ob = broadcast_offsets(b.shape(), &shape);
        let data = oa.iter().zip(&ob).map(|(&i, &j)| f(a.data()[i], b.data()[j])).collect();
        Tensor::new(shape, data)
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.zip(other, "add", |a, b| a + b)?;
        Ok(self.derive(v, Op::Add(self.id, other.id), &[self.id, other.id]))
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.zip(other, "sub", |a, b| a - b)?;
        Ok(self.derive(v, Op::Sub(self.id, other.id), &[self.id, other.id]))
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.zip(other, "mul", |a, b| a * b)?;
        Ok(self.derive(v, Op::Mul(self.id, other.id), &[self.id, other.id]))
    }

    pub fn div(&self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.zip(other, "div", |a, b| a / b)?;
        Ok(self.derive(v, Op::Div(self.id, other.id), &[self.id, other.id]))
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        self.map(|x| x * c, Op::Scale(self.id, c))
    }

    /// Adds a constant to every element.
    pub fn offset(&self, c: f64) -> Var<'t> {
        self.map(|x| x + c, Op::Offset(self.id))
    }

    pub fn square(&self) -> Var<'t> {
        self.map(|x| x * x, Op::Square(self.id))
    }

    /// `|x|`, with subgradient 0 at the origin.
    pub fn abs(&self) -> Var<'t> {
        self.map(f64::abs, Op::Abs(self.id))
    }

    pub fn exp(&self) -> Var<'t> {
        self.map(f64::exp, Op::Exp(self.id))
    }

    pub fn log(&self) -> Result<Var<'t>> {
        if let Some(bad) = self.value().data().iter().find(|&&x| x <= 0.0 || x.is_nan()) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        Ok(self.map(f64::ln, Op::Log(self.id)))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&self) -> Var<'t> {
        self.map(gelu, Op::Gelu(self.id))
    }

    /// `max(0, x)`, with subgradient 0 at the origin.
    pub fn relu(&self) -> Var<'t> {
        self.map(|x| x.max(0.0), Op::Relu(self.id))
    }

    pub fn sum(&self) -> Var<'t> {
        let s = self.value().data().iter().sum();
        self.derive(Tensor::scalar(s), Op::Sum(self.id), &[self.id])
    }

    pub fn mean(&self) -> Var<'t> {
        let v = self.value();
        let m = v.data().iter().sum::<f64>() / v.len() as f64;
        drop(v);
        self.derive(Tensor::scalar(m), Op::Mean(self.id), &[self.id])
    }

    pub fn sum_axis(&self, axis: usize) -> Result<Var<'t>> {
        let value = {
            let v = self.value();
            if axis >= v.rank() {
                return Err(Error::Contract(format!("axis {axis} out of range for {:?}", v.shape())));
            }
            let (outer, len, inner) = split_axis(v.shape(), axis);
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for j in 0..len {
                    for i in 0..inner {
                        out[o * inner + i] += v.data()[(o * len + j) * inner + i];
                    }
                }
            }
            let mut shape = v.shape().to_vec();
            shape.remove(axis);
            Tensor::new(shape, out)?
        };
        Ok(self.derive(value, Op::SumAxis { src: self.id, axis }, &[self.id]))
    }

    /// Matrix product over the last two axes; leading axes broadcast.
    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let value = {
            let a = self.value();
            let b = other.value();
            let (sa, sb) = (a.shape(), b.shape());
            let mismatch = || Error::Shape {
                op: "matmul",
                left: sa.to_vec(),
                right: sb.to_vec(),
            };
            if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
                return Err(mismatch());
            }
            let (m, k, n) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]);
            let batch = broadcast_shape("matmul", &sa[..sa.len() - 2], &sb[..sb.len() - 2]).map_err(|_| mismatch())?;
            let oa = broadcast_offsets(&sa[..sa.len() - 2], &batch);
            let ob = broadcast_offsets(&sb[..sb.len() - 2], &batch);
            let mut out = vec![0.0; oa.len() * m * n];
            for bi in 0..oa.len() {
                tensor::gemm_nn(
                    &a.data()[oa[bi] * m * k..(oa[bi] + 1) * m * k],
                    &b.data()[ob[bi] * k * n..(ob[bi] + 1) * k * n],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
            let mut shape = batch;
            shape.extend([m, n]);
            Tensor::new(shape, out)?
        };
        Ok(self.derive(value, Op::MatMul(self.id, other.id), &[self.id, other.id]))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Var<'t>> {
        let (value, map) = {
            let v = self.value();
            let shape = v.shape();
            let mut seen = vec![false; shape.len()];
            if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
                return Err(Error::Contract(format!("invalid permutation {axes:?} for {shape:?}")));
            }
            let in_strides = tensor::strides(shape);
            let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
            let eff: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
            let n = v.len();
            let mut map = Vec::with_capacity(n);
            let mut idx = vec![0usize; shape.len()];
            let mut cur = 0usize;
            for _ in 0..n {
                map.push(cur);
                for ax in (0..out_shape.len()).rev() {
                    idx[ax] += 1;
                    cur += eff[ax];
                    if idx[ax] < out_shape[ax] {
                        break;
                    }
                    cur -= eff[ax] * idx[ax];
                    idx[ax] = 0;
                }
            }
            let data = map.iter().map(|&o| v.data()[o]).collect();
            (Tensor::new(out_shape, data)?, map)
        };
        Ok(self.derive(value, Op::Permute { src: self.id, map }, &[self.id]))
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Var<'t>> {
        let r = self.value().rank();
        if r < 2 {
            return Err(Error::Contract("transpose needs rank >= 2".into()));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(&axes)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let value = self.value().clone().with_grad(false).reshaped(shape.to_vec())?;
        Ok(self.derive(value, Op::Reshape(self.id), &[self.id]))
    }

    /// Softmax along `axis`, stabilized by subtracting the slice maximum.
    pub fn softmax(&self, axis: usize) -> Result<Var<'t>> {
        let value = {
            let v = self.value();
            if axis >= v.rank() {
                return Err(Error::Contract(format!("axis {axis} out of range for {:?}", v.shape())));
            }
            let (outer, len, inner) = split_axis(v.shape(), axis);
            let x = v.data();
            let mut out = vec![0.0; x.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * len + j) * inner + i;
                    let max = (0..len).map(|j| x[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                    let mut total = 0.0;
                    for j in 0..len {
                        let e = (x[at(j)] - max).exp();
                        out[at(j)] = e;
                        total += e;
                    }
                    for j in 0..len {
                        out[at(j)] /= total;
                    }
                }
            }
            Tensor::new(v.shape().to_vec(), out)?
        };
        Ok(self.derive(value, Op::Softmax { src: self.id, axis }, &[self.id]))
    }

    /// Softmax over the last axis where only columns flagged in `valid`
    /// take part; masked columns come out exactly zero.
    pub fn masked_softmax(&self, valid: &[bool]) -> Result<Var<'t>> {
        let value = {
            let v = self.value();
            let len = v.shape().last().copied().unwrap_or(0);
            if len != valid.len() {
                return Err(Error::Shape {
                    op: "masked_softmax",
                    left: v.shape().to_vec(),
                    right: vec![valid.len()],
                });
            }
            if !valid.iter().any(|&b| b) {
                return Err(Error::Contract("masked_softmax with every column masked".into()));
            }
            let x = v.data();
            let mut out = vec![0.0; x.len()];
            for r in 0..x.len() / len {
                let row = &x[r * len..(r + 1) * len];
                let max = row
                    .iter()
                    .zip(valid)
                    .filter(|(_, &ok)| ok)
                    .map(|(&a, _)| a)
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    if valid[j] {
                        let e = (row[j] - max).exp();
                        out[r * len + j] = e;
                        total += e;
                    }
                }
                for o in &mut out[r * len..(r + 1) * len] {
                    *o /= total;
                }
            }
            Tensor::new(v.shape().to_vec(), out)?
        };
        Ok(self.derive(
            value,
            Op::MaskedSoftmax {
                src: self.id,
                valid: valid.to_vec(),
            },
            &[self.id],
        ))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&self) -> Var<'t> {
        let value = {
            let v = self.value();
            let len = *v.shape().last().expect("log_softmax on a scalar");
            let x = v.data();
            let mut out = vec![0.0; x.len()];
            for r in 0..x.len() / len {
                let row = &x[r * len..(r + 1) * len];
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|&a| (a - max).exp()).sum::<f64>().ln();
                for j in 0..len {
                    out[r * len + j] = row[j] - lse;
                }
            }
            Tensor::new(v.shape().to_vec(), out).unwrap()
        };
        self.derive(value, Op::LogSoftmax(self.id), &[self.id])
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&self, gain: Var<'t>, bias: Var<'t>, eps: f64) -> Result<Var<'t>> {
        let (value, xhat, inv_std) = {
            let v = self.value();
            let d = v.shape().last().copied().unwrap_or(0);
            let (gv, bv) = (gain.value(), bias.value());
            if gv.shape() != [d] || bv.shape() != [d] {
                return Err(Error::Shape {
                    op: "layer_norm",
                    left: v.shape().to_vec(),
                    right: gv.shape().to_vec(),
                });
            }
            let x = v.data();
            let rows = x.len() / d;
            let mut out = vec![0.0; x.len()];
            let mut xhat = vec![0.0; x.len()];
            let mut inv_std = Vec::with_capacity(rows);
            for r in 0..rows {
                let row = &x[r * d..(r + 1) * d];
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / d as f64;
                let istd = 1.0 / (var + eps).sqrt();
                inv_std.push(istd);
                for j in 0..d {
                    let h = (row[j] - mean) * istd;
                    xhat[r * d + j] = h;
                    out[r * d + j] = h * gv.data()[j] + bv.data()[j];
                }
            }
            (Tensor::new(v.shape().to_vec(), out)?, xhat, inv_std)
        };
        Ok(self.derive(
            value,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                xhat,
                inv_std,
            },
            &[self.id, gain.id, bias.id],
        ))
    }

    /// Row lookup into a `[rows, width]` table (embedding).
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Var<'t>> {
        let value = {
            let t = self.value();
            if t.rank() != 2 {
                return Err(Error::Contract("gather_rows needs a matrix".into()));
            }
            let (rows, d) = (t.shape()[0], t.shape()[1]);
            let mut out = Vec::with_capacity(ids.len() * d);
            for &id in ids {
                if id >= rows {
                    return Err(Error::Contract(format!("row id {id} out of range for table of {rows} rows")));
                }
                out.extend_from_slice(&t.data()[id * d..(id + 1) * d]);
            }
            Tensor::new(vec![ids.len(), d], out)?
        };
        Ok(self.derive(
            value,
            Op::GatherRows {
                table: self.id,
                ids: ids.to_vec(),
            },
            &[self.id],
        ))
    }

    /// Selects elements by flat row-major index into a 1-D result.
    pub fn pick(&self, indices: &[usize]) -> Result<Var<'t>> {
        let value = {
            let v = self.value();
            let mut out = Vec::with_capacity(indices.len());
            for &ix in indices {
                out.push(*v.data().get(ix).ok_or_else(|| {
                    Error::Contract(format!("pick index {ix} out of range for {:?}", v.shape()))
                })?);
            }
            Tensor::vector(out)
        };
        Ok(self.derive(
            value,
            Op::Pick {
                src: self.id,
                indices: indices.to_vec(),
            },
            &[self.id],
        ))
    }

    /// Replaces flagged elements with `value`; they pass no gradient.
    pub fn fill(&self, mask: &[bool], value: f64) -> Result<Var<'t>> {
        let out = {
            let v = self.value();
            if mask.len() != v.len() {
                return Err(Error::Shape {
                    op: "fill",
                    left: v.shape().to_vec(),
                    right: vec![mask.len()],
                });
            }
            let data = v.data().iter().zip(mask).map(|(&x, &m)| if m { value } else { x }).collect();
            Tensor::new(v.shape().to_vec(), data)?
        };
        Ok(self.derive(
            out,
            Op::Fill {
                src: self.id,
                mask: mask.to_vec(),
            },
            &[self.id],
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf<'t>(tape: &'t Tape, shape: &[usize], data: &[f64]) -> Var<'t> {
        tape.leaf(Tensor::new(shape.to_vec(), data.to_vec()).unwrap().with_grad(true))
    }

    #[test]
    fn matmul_identity_and_dot() {
        let tape = Tape::new();
        let i = tape.constant(Tensor::matrix(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let b = tape.constant(Tensor::matrix(&[&[3.0, 4.0], &[5.0, 6.0]]));
        assert_eq!(i.matmul(b).unwrap().value().data(), &[3.0, 4.0, 5.0, 6.0]);
        let r = tape.constant(Tensor::matrix(&[&[1.0, 2.0]]));
        let c = tape.constant(Tensor::matrix(&[&[3.0], &[4.0]]));
        assert_eq!(r.matmul(c).unwrap().value().data(), &[11.0]);
    }

    #[test]
    fn matmul_names_both_shapes_on_mismatch() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = a.matmul(b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("matmul"), "{err}");
    }

    #[test]
    fn batched_matmul_broadcasts_rank_two_rhs() {
        let tape = Tape::new();
        let a = leaf(&tape, &[2, 1, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = leaf(&tape, &[2, 1], &[10.0, 1.0]);
        let c = a.matmul(b).unwrap();
        assert_eq!(c.shape(), vec![2, 1, 1]);
        assert_eq!(c.value().data(), &[12.0, 34.0]);
        let g = tape.backward(c.sum()).unwrap();
        // rhs gradient sums over the broadcast batch
        assert_eq!(g.get(b).unwrap().data(), &[4.0, 6.0]);
    }

    #[test]
    fn softmax_cases() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![0.0, 0.0]));
        assert_eq!(x.softmax(0).unwrap().value().data(), &[0.5, 0.5]);
        let big = tape.constant(Tensor::vector(vec![1000.0, 0.0]));
        let y = big.softmax(0).unwrap();
        assert!(y.value().all_finite());
        assert!((y.value().data()[0] - 1.0).abs() < 1e-12);
        let logs = tape.constant(Tensor::vector(vec![1f64.ln(), 3f64.ln()]));
        let z = logs.softmax(0).unwrap();
        assert!((z.value().data()[0] - 0.25).abs() < 1e-15);
        assert!((z.value().data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn masked_softmax_zeroes_masked_columns() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.5, 9.0]).unwrap());
        let y = x.masked_softmax(&[true, true, false]).unwrap();
        let v = y.value();
        assert_eq!(v.data()[2], 0.0);
        assert_eq!(v.data()[5], 0.0);
        assert!((v.data()[0] + v.data()[1] - 1.0).abs() < 1e-15);
        assert!(x.masked_softmax(&[false, false, false]).is_err());
    }

    #[test]
    fn layer_norm_examples() {
        let tape = Tape::new();
        let g = tape.constant(Tensor::ones(&[2]));
        let b = tape.constant(Tensor::zeros(&[2]));
        let x = tape.constant(Tensor::vector(vec![1.0, -1.0]));
        let y = x.layer_norm(g, b, 0.0).unwrap();
        assert_eq!(y.value().data(), &[1.0, -1.0]);
        let g3 = tape.constant(Tensor::ones(&[3]));
        let b3 = tape.constant(Tensor::zeros(&[3]));
        let c = tape.constant(Tensor::vector(vec![4.0, 4.0, 4.0]));
        assert_eq!(c.layer_norm(g3, b3, 1e-5).unwrap().value().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn elementwise_examples() {
        let tape = Tape::new();
        assert_eq!(tape.constant(Tensor::vector(vec![0.5])).square().value().data(), &[0.25]);
        assert_eq!(tape.constant(Tensor::vector(vec![-0.8])).abs().value().data(), &[0.8]);
        let bad = tape.constant(Tensor::vector(vec![1.0, 0.0]));
        assert!(matches!(bad.log(), Err(Error::Domain { .. })));
    }

    #[test]
    fn backward_basic_gradients() {
        let tape = Tape::new();
        let x = leaf(&tape, &[2, 3], &[1.0; 6]);
        let g = tape.backward(x.sum()).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 6]);

        let tape = Tape::new();
        let x = leaf(&tape, &[2], &[1.0, 2.0]);
        let g = tape.backward(x.square().sum()).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::new();
        let x = leaf(&tape, &[2], &[1.0, 2.0]);
        assert!(matches!(tape.backward(x.square()), Err(Error::Contract(_))));
    }

    #[test]
    fn abs_and_relu_have_zero_subgradient_at_origin() {
        let tape = Tape::new();
        let x = leaf(&tape, &[3], &[0.0, -2.0, 3.0]);
        let g = tape.backward(x.abs().sum()).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, -1.0, 1.0]);
        let tape = Tape::new();
        let x = leaf(&tape, &[3], &[0.0, -2.0, 3.0]);
        let g = tape.backward(x.relu().sum()).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn fill_blocks_gradient() {
        let tape = Tape::new();
        let x = leaf(&tape, &[2], &[3.0, 4.0]);
        let y = x.fill(&[true, false], 0.5).unwrap();
        assert_eq!(y.value().data(), &[0.5, 4.0]);
        let g = tape.backward(y.square().sum()).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 8.0]);
    }

    #[test]
    fn concat_routes_gradient_back() {
        let tape = Tape::new();
        let a = leaf(&tape, &[2], &[1.0, 2.0]);
        let b = leaf(&tape, &[1, 1], &[3.0]);
        let c = tape.concat(&[a, b]);
        assert_eq!(c.value().data(), &[1.0, 2.0, 3.0]);
        let w = tape.constant(Tensor::vector(vec![1.0, 10.0, 100.0]));
        let g = tape.backward(c.mul(w).unwrap().sum()).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[1.0, 10.0]);
        assert_eq!(g.get(b).unwrap().data(), &[100.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let tape = Tape::new();
        let x = leaf(&tape, &[1], &[2.0]);
        let c = tape.constant(Tensor::vector(vec![5.0]));
        let g = tape.backward(x.mul(c).unwrap().sum()).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap().data(), &[5.0]);
    }
}
