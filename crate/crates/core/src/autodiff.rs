//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every primitive applied during one forward pass. Nodes
//! are appended in execution order, so the tape is already topologically
//! sorted and [`Tape::backward`] replays it once in reverse. The tape is
//! consumed by `backward`; build a fresh one for every forward pass.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kan::SplineGrid;
use crate::nn::Activation;
use crate::tensor::{axis_split, broadcast_zip, gemm, numel, unbroadcast, Tensor};

pub type ParamId = u64;

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> ParamId {
    NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed)
}

/// A trainable tensor with its accumulated gradient.
///
/// Every parameter carries a process-unique id; cloning allocates a new id so
/// a clone never aliases the original on a shared tape.
#[derive(Debug)]
pub struct Parameter {
    id: ParamId,
    name: String,
    value: Tensor,
    grad: Tensor,
}

impl Clone for Parameter {
    fn clone(&self) -> Self {
        Parameter {
            id: fresh_id(),
            name: self.name.clone(),
            value: self.value.clone(),
            grad: self.grad.clone(),
        }
    }
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = Tensor::zeros_like(&value);
        Parameter {
            id: fresh_id(),
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn grad(&self) -> &Tensor {
        &self.grad
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }

    /// Mutable view of the values; the shape cannot change through it.
    pub fn values_mut(&mut self) -> &mut [f64] {
        self.value.data_mut()
    }

    /// Overwrites the value; the new tensor must have the same shape.
    pub fn set_value(&mut self, value: Tensor) -> Result<()> {
        if value.shape() != self.value.shape() {
            return Err(Error::shape(format!(
                "parameter {} has shape {:?}, got {:?}",
                self.name,
                self.value.shape(),
                value.shape()
            )));
        }
        self.value = value;
        Ok(())
    }

    pub fn fill(&mut self, v: f64) {
        self.value.data_mut().iter_mut().for_each(|x| *x = v);
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
    }

    pub(crate) fn accumulate(&mut self, g: &Tensor) {
        for (dst, src) in self.grad.data_mut().iter_mut().zip(g.data()) {
            *dst += src;
        }
    }

    pub(crate) fn grad_and_value_mut(&mut self) -> (&[f64], &mut [f64]) {
        (self.grad.data(), self.value.data_mut())
    }
}

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    Max,
}

#[derive(Debug)]
enum Op {
    Leaf(Option<ParamId>),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    ScaleShift(Var, f64),
    Square(Var),
    Sqrt(Var),
    Exp(Var),
    Act(Var, Activation),
    MatMul(Var, Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Reduce {
        input: Var,
        kind: ReduceKind,
        axis: usize,
    },
    SumAll(Var),
    MeanAll(Var),
    Stack(Vec<Var>, usize),
    Select {
        input: Var,
        axis: usize,
        index: usize,
    },
    Basis(Var, Arc<SplineGrid>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Ordered record of the primitives evaluated in one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: HashMap<ParamId, Tensor>,
}

impl Gradients {
    /// Gradient of the loss with respect to a recorded node, if reachable.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    /// Adds each reachable parameter's gradient into `Parameter::grad`.
    pub fn accumulate_into<'a>(&self, params: impl IntoIterator<Item = &'a mut Parameter>) {
        for p in params {
            if let Some(g) = self.params.get(&p.id) {
                p.accumulate(g);
            }
        }
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(existing) => {
            for (d, s) in existing.data_mut().iter_mut().zip(g.data()) {
                *d += s;
            }
        }
        None => *slot = Some(g),
    }
}

fn mul_elem(a: &Tensor, b: &Tensor) -> Tensor {
    broadcast_zip(a, b, |x, y| x * y).expect("matching shapes")
}

fn permute_tensor(t: &Tensor, perm: &[usize]) -> Tensor {
    let shape = t.shape();
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total = t.len();
    let mut data = Vec::with_capacity(total);
    let mut counter = vec![0usize; rank];
    let mut flat = 0usize;
    let src = t.data();
    for _ in 0..total {
        data.push(src[flat]);
        for ax in (0..rank).rev() {
            counter[ax] += 1;
            flat += strides[ax];
            if counter[ax] < out_shape[ax] {
                break;
            }
            flat -= strides[ax] * counter[ax];
            counter[ax] = 0;
        }
    }
    Tensor::new(out_shape, data).expect("permutation preserves size")
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records a non-trainable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf(None))
    }

    /// Records a parameter's current value as a trainable leaf.
    pub fn param(&mut self, p: &Parameter) -> Var {
        self.push(p.value.clone(), Op::Leaf(Some(p.id)))
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        broadcast_zip(self.value(a), self.value(b), f)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, |x, y| x / y)?;
        Ok(self.push(v, Op::Div(a, b)))
    }

    /// `scale * a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let v = self.value(a).map(|x| scale * x + shift);
        self.push(v, Op::ScaleShift(a, scale))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.affine(a, c, 0.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.affine(a, 1.0, c)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::sqrt);
        self.push(v, Op::Sqrt(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn activation(&mut self, a: Var, kind: Activation) -> Var {
        let v = self.value(a).map(|x| kind.apply(x));
        self.push(v, Op::Act(a, kind))
    }

    /// Rank-2 matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = crate::tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a)))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let rank = self.value(a).rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape(format!(
                "invalid permutation {perm:?} for rank {rank}"
            )));
        }
        let v = permute_tensor(self.value(a), perm);
        Ok(self.push(v, Op::Permute(a, perm.to_vec())))
    }

    /// Reduces one axis; the axis is removed from the result.
    pub fn reduce(&mut self, a: Var, kind: ReduceKind, axis: usize) -> Result<Var> {
        let t = self.value(a);
        if axis >= t.rank() {
            return Err(Error::shape(format!(
                "axis {axis} out of range for shape {:?}",
                t.shape()
            )));
        }
        let (outer, n, inner) = axis_split(t.shape(), axis);
        if n == 0 && kind != ReduceKind::Sum {
            return Err(Error::shape("reduction over an empty axis"));
        }
        let src = t.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let it = (0..n).map(|j| src[(o * n + j) * inner + i]);
                out[o * inner + i] = match kind {
                    ReduceKind::Sum => it.sum(),
                    ReduceKind::Mean => it.sum::<f64>() / n as f64,
                    ReduceKind::Max => it.fold(f64::NEG_INFINITY, f64::max),
                };
            }
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        let v = Tensor::new(shape, out)?;
        Ok(self.push(v, Op::Reduce { input: a, kind, axis }))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::SumAll(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).mean());
        self.push(v, Op::MeanAll(a))
    }

    /// Stacks equally shaped tensors along a new axis.
    pub fn stack(&mut self, vars: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = vars.first() else {
            return Err(Error::shape("stack of zero tensors"));
        };
        let shape = self.shape(first).to_vec();
        if axis > shape.len() {
            return Err(Error::shape(format!("stack axis {axis} out of range")));
        }
        if let Some(bad) = vars.iter().find(|&&v| self.shape(v) != shape.as_slice()) {
            return Err(Error::shape(format!(
                "stack operands disagree: {:?} vs {:?}",
                shape,
                self.shape(*bad)
            )));
        }
        let outer = numel(&shape[..axis]);
        let inner = numel(&shape[axis..]);
        let mut data = Vec::with_capacity(outer * inner * vars.len());
        for o in 0..outer {
            for &v in vars {
                data.extend_from_slice(&self.value(v).data()[o * inner..(o + 1) * inner]);
            }
        }
        let mut out_shape = shape;
        out_shape.insert(axis, vars.len());
        let v = Tensor::new(out_shape, data)?;
        Ok(self.push(v, Op::Stack(vars.to_vec(), axis)))
    }

    /// Takes index `index` along `axis`, dropping that axis.
    pub fn select(&mut self, a: Var, axis: usize, index: usize) -> Result<Var> {
        let t = self.value(a);
        if axis >= t.rank() || index >= t.shape()[axis] {
            return Err(Error::shape(format!(
                "select({axis}, {index}) out of range for {:?}",
                t.shape()
            )));
        }
        let (outer, n, inner) = axis_split(t.shape(), axis);
        let src = t.data();
        let mut data = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let start = (o * n + index) * inner;
            data.extend_from_slice(&src[start..start + inner]);
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        let v = Tensor::new(shape, data)?;
        Ok(self.push(v, Op::Select { input: a, axis, index }))
    }

    /// Evaluates the B-spline basis of `grid` at every entry of `a`, appending
    /// a basis axis.
    pub fn bspline_basis(&mut self, a: Var, grid: &Arc<SplineGrid>) -> Var {
        let v = grid.basis_tensor(self.value(a));
        self.push(v, Op::Basis(a, Arc::clone(grid)))
    }

    /// Replays the tape backward from a scalar loss.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        let mut params: HashMap<ParamId, Tensor> = HashMap::new();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let val = |v: Var| &self.nodes[v.0].value;
            match &node.op {
                Op::Leaf(Some(id)) => match params.get_mut(id) {
                    Some(existing) => {
                        for (d, s) in existing.data_mut().iter_mut().zip(g.data()) {
                            *d += s;
                        }
                    }
                    None => {
                        params.insert(*id, g.clone());
                    }
                },
                Op::Leaf(None) => {}
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], unbroadcast(&g, val(*a).shape()));
                    accumulate(&mut grads[b.0], unbroadcast(&g, val(*b).shape()));
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads[a.0], unbroadcast(&g, val(*a).shape()));
                    let gb = unbroadcast(&g, val(*b).shape()).map(|x| -x);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::Mul(a, b) => {
                    let ga = broadcast_zip(&g, val(*b), |x, y| x * y)?;
                    let gb = broadcast_zip(&g, val(*a), |x, y| x * y)?;
                    accumulate(&mut grads[a.0], unbroadcast(&ga, val(*a).shape()));
                    accumulate(&mut grads[b.0], unbroadcast(&gb, val(*b).shape()));
                }
                Op::Div(a, b) => {
                    let ga = broadcast_zip(&g, val(*b), |x, y| x / y)?;
                    // d(a/b)/db = -(a/b)/b
                    let t = broadcast_zip(&node.value, val(*b), |o, y| -o / y)?;
                    let gb = mul_elem(&g, &t);
                    accumulate(&mut grads[a.0], unbroadcast(&ga, val(*a).shape()));
                    accumulate(&mut grads[b.0], unbroadcast(&gb, val(*b).shape()));
                }
                Op::ScaleShift(a, s) => {
                    let s = *s;
                    accumulate(&mut grads[a.0], g.map(|x| x * s));
                }
                Op::Square(a) => {
                    let ga = broadcast_zip(&g, val(*a), |x, y| 2.0 * x * y)?;
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Sqrt(a) => {
                    let ga = broadcast_zip(&g, &node.value, |x, y| x / (2.0 * y))?;
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Exp(a) => {
                    accumulate(&mut grads[a.0], mul_elem(&g, &node.value));
                }
                Op::Act(a, kind) => {
                    let x = val(*a);
                    let data = g
                        .data()
                        .iter()
                        .zip(x.data())
                        .zip(node.value.data())
                        .map(|((&gv, &xv), &yv)| gv * kind.derivative(xv, yv))
                        .collect();
                    accumulate(&mut grads[a.0], Tensor::new(x.shape().to_vec(), data)?);
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (val(*a), val(*b));
                    let (m, k) = (ta.shape()[0], ta.shape()[1]);
                    let n = tb.shape()[1];
                    // dA = dC · Bᵀ
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), n as isize, 1, tb.data(), 1, n as isize, &mut da, 0.0);
                    // dB = Aᵀ · dC
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, ta.data(), 1, k as isize, g.data(), n as isize, 1, &mut db, 0.0);
                    accumulate(&mut grads[a.0], Tensor::new(vec![m, k], da)?);
                    accumulate(&mut grads[b.0], Tensor::new(vec![k, n], db)?);
                }
                Op::Reshape(a) => {
                    let shape = val(*a).shape().to_vec();
                    accumulate(&mut grads[a.0], g.clone().with_shape(shape));
                }
                Op::Permute(a, perm) => {
                    let mut inv = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inv[p] = i;
                    }
                    accumulate(&mut grads[a.0], permute_tensor(&g, &inv));
                }
                Op::Reduce { input, kind, axis } => {
                    let x = val(*input);
                    let (outer, n, inner) = axis_split(x.shape(), *axis);
                    let mut gx = vec![0.0; x.len()];
                    let gd = g.data();
                    let xd = x.data();
                    for o in 0..outer {
                        for i in 0..inner {
                            let go = gd[o * inner + i];
                            match kind {
                                ReduceKind::Sum => {
                                    for j in 0..n {
                                        gx[(o * n + j) * inner + i] = go;
                                    }
                                }
                                ReduceKind::Mean => {
                                    for j in 0..n {
                                        gx[(o * n + j) * inner + i] = go / n as f64;
                                    }
                                }
                                ReduceKind::Max => {
                                    let target = node.value.data()[o * inner + i];
                                    // ties resolve to the first maximal index
                                    if let Some(j) = (0..n).find(|&j| xd[(o * n + j) * inner + i] == target) {
                                        gx[(o * n + j) * inner + i] = go;
                                    }
                                }
                            }
                        }
                    }
                    accumulate(&mut grads[input.0], Tensor::new(x.shape().to_vec(), gx)?);
                }
                Op::SumAll(a) => {
                    let gv = g.data()[0];
                    accumulate(&mut grads[a.0], Tensor::full(val(*a).shape(), gv));
                }
                Op::MeanAll(a) => {
                    let x = val(*a);
                    let gv = g.data()[0] / x.len() as f64;
                    accumulate(&mut grads[a.0], Tensor::full(x.shape(), gv));
                }
                Op::Stack(vars, axis) => {
                    let shape = val(vars[0]).shape().to_vec();
                    let outer = numel(&shape[..*axis]);
                    let inner = numel(&shape[*axis..]);
                    let m = vars.len();
                    for (k, v) in vars.iter().enumerate() {
                        let mut part = Vec::with_capacity(outer * inner);
                        for o in 0..outer {
                            let start = (o * m + k) * inner;
                            part.extend_from_slice(&g.data()[start..start + inner]);
                        }
                        accumulate(&mut grads[v.0], Tensor::new(shape.clone(), part)?);
                    }
                }
                Op::Select { input, axis, index } => {
                    let x = val(*input);
                    let (outer, n, inner) = axis_split(x.shape(), *axis);
                    let mut gx = vec![0.0; x.len()];
                    for o in 0..outer {
                        let start = (o * n + index) * inner;
                        gx[start..start + inner].copy_from_slice(&g.data()[o * inner..(o + 1) * inner]);
                    }
                    accumulate(&mut grads[input.0], Tensor::new(x.shape().to_vec(), gx)?);
                }
                Op::Basis(a, grid) => {
                    let x = val(*a);
                    let nb = grid.num_basis();
                    let mut deriv = vec![0.0; nb];
                    let gx: Vec<f64> = x
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, &xv)| {
                            grid.basis_derivative_into(xv, &mut deriv);
                            g.data()[i * nb..(i + 1) * nb]
                                .iter()
                                .zip(&deriv)
                                .map(|(a, b)| a * b)
                                .sum()
                        })
                        .collect();
                    accumulate(&mut grads[a.0], Tensor::new(x.shape().to_vec(), gx)?);
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { nodes: grads, params })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hadamard_definition() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let b = t.constant(Tensor::vector(vec![4.0, 5.0, 6.0]));
        let c = t.mul(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[4.0, 10.0, 18.0]);
    }

    #[test]
    fn add_zero_is_identity() {
        let x = Tensor::new(vec![2, 2], vec![1.5, -2.0, 0.25, 9.0]).unwrap();
        let mut t = Tape::new();
        let a = t.constant(x.clone());
        let z = t.constant(Tensor::zeros_like(&x));
        let c = t.add(a, z).unwrap();
        assert_eq!(t.value(c), &x);
    }

    #[test]
    fn mismatched_shapes_error() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2]));
        assert!(matches!(t.add(a, b), Err(Error::Shape(_))));
        let c = t.constant(Tensor::zeros(&[4, 2]));
        assert!(matches!(t.matmul(a, c), Err(Error::Shape(_))));
    }

    #[test]
    fn sum_gives_all_ones_grad() {
        let p = Parameter::new("p", Tensor::new(vec![2, 2], vec![3.0, -1.0, 0.5, 2.0]).unwrap());
        let mut t = Tape::new();
        let v = t.param(&p);
        let loss = t.sum(v);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.param(p.id()).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn quadratic_grad() {
        let mut p = Parameter::new("p", Tensor::vector(vec![1.0, 2.0]));
        let mut t = Tape::new();
        let v = t.param(&p);
        let sq = t.mul(v, v).unwrap();
        let loss = t.sum(sq);
        let g = t.backward(loss).unwrap();
        g.accumulate_into([&mut p]);
        assert_eq!(p.grad().data(), &[2.0, 4.0]);
        p.zero_grad();
        assert!(p.grad().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn unreachable_parameter_untouched() {
        let p = Parameter::new("p", Tensor::vector(vec![1.0]));
        let mut q = Parameter::new("q", Tensor::vector(vec![1.0]));
        let mut t = Tape::new();
        let v = t.param(&p);
        let _unused = t.param(&q);
        let loss = t.sum(v);
        let g = t.backward(loss).unwrap();
        assert!(g.param(q.id()).is_none());
        g.accumulate_into([&mut q]);
        assert_eq!(q.grad().data(), &[0.0]);
    }

    #[test]
    fn non_scalar_loss_is_contract_error() {
        let mut t = Tape::new();
        let v = t.constant(Tensor::zeros(&[3]));
        assert!(matches!(t.backward(v), Err(Error::Contract(_))));
    }

    #[test]
    fn reduce_values() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let s = t.reduce(a, ReduceKind::Sum, 0).unwrap();
        assert_eq!(t.value(s).item().unwrap(), 6.0);
        let c = t.constant(Tensor::full(&[3, 4], 2.5));
        let m = t.reduce(c, ReduceKind::Mean, 1).unwrap();
        assert!(t.value(m).data().iter().all(|&v| v == 2.5));
        assert!(t.reduce(c, ReduceKind::Sum, 2).is_err());
    }

    #[test]
    fn max_tie_routes_to_first() {
        let mut t = Tape::new();
        let p = Parameter::new("p", Tensor::vector(vec![1.0, 5.0, 5.0, 2.0]));
        let v = t.param(&p);
        let m = t.reduce(v, ReduceKind::Max, 0).unwrap();
        let g = t.backward(m).unwrap();
        assert_eq!(g.param(p.id()).unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn clone_gets_new_id() {
        let p = Parameter::new("p", Tensor::scalar(1.0));
        let q = p.clone();
        assert_ne!(p.id(), q.id());
        assert_eq!(p.value(), q.value());
    }

    #[test]
    fn permute_roundtrip() {
        let x = Tensor::new(vec![2, 3, 4], (0..24).map(f64::from).collect()).unwrap();
        let mut t = Tape::new();
        let a = t.constant(x.clone());
        let p = t.permute(a, &[2, 0, 1]).unwrap();
        assert_eq!(t.shape(p), &[4, 2, 3]);
        assert_eq!(t.value(p).at(&[3, 1, 2]), x.at(&[1, 2, 3]));
        let back = t.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(t.value(back), &x);
        assert!(t.permute(a, &[0, 0, 1]).is_err());
    }

    #[test]
    fn stack_and_select() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = t.constant(Tensor::new(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap());
        let s = t.stack(&[a, b], 1).unwrap();
        assert_eq!(t.shape(s), &[2, 2, 2]);
        assert_eq!(t.value(s).data(), &[1.0, 2.0, 5.0, 6.0, 3.0, 4.0, 7.0, 8.0]);
        let back = t.select(s, 1, 1).unwrap();
        assert_eq!(t.value(back), t.value(b));
    }
}
