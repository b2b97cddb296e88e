//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation of one forward pass as a node holding its
//! output value. [`Graph::backward`] walks the tape in reverse, accumulating
//! vector-Jacobian products into every node that depends on a parameter.
//! Constants never receive gradients, which keeps input-heavy passes cheap.

use std::collections::HashMap;

use crate::error::{Result, TensorError};
use crate::param::{ParamId, ParamStore};
use crate::tensor::{gemm_tn, numel, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    MulConst(Var, Tensor),
    MatMul(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Abs(Var),
    SumAll(Var),
    SumAxis(Var, usize, bool),
    Concat(Vec<Var>, usize),
    Gather(Var, usize, Vec<usize>),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    BroadcastTo(Var),
    /// Straight-through on kept entries; the mask is a constant.
    TopkMask(Var, Tensor),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Gradients produced by one backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, v)| self.wrt(*v))
    }

    /// Parameter gradients for every parameter that took part in the pass.
    pub fn into_params(mut self) -> Vec<(ParamId, Tensor)> {
        let params = std::mem::take(&mut self.params);
        params
            .into_iter()
            .filter_map(|(p, v)| self.grads[v.0].take().map(|g| (p, g)))
            .collect()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf for a parameter; repeated calls for the same id return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Leaf, true);
        self.params.insert(id, v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_broadcast(self.value(b), "add", |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_broadcast(self.value(b), "sub", |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_broadcast(self.value(b), "mul", |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Mul(a, b), ng))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_broadcast(self.value(b), "div", |x, y| x / y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Div(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x * c);
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, c), ng)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        let ng = self.ng(a);
        self.push(v, Op::Offset(a), ng)
    }

    /// Elementwise product with a constant tensor of the same shape (masks, dropout).
    pub fn mul_const(&mut self, a: Var, c: Tensor) -> Result<Var> {
        if c.shape() != self.shape(a) {
            return Err(TensorError::Dimension {
                op: "mul_const",
                lhs: self.shape(a).to_vec(),
                rhs: c.shape().to_vec(),
            });
        }
        let v = self.value(a).zip_broadcast(&c, "mul_const", |x, y| x * y)?;
        let ng = self.ng(a);
        Ok(self.push(v, Op::MulConst(a, c), ng))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::MatMul(a, b), ng))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        let ng = self.ng(a);
        self.push(v, Op::Sigmoid(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        let ng = self.ng(a);
        self.push(v, Op::Tanh(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        let ng = self.ng(a);
        self.push(v, Op::Relu(a), ng)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::abs);
        let ng = self.ng(a);
        self.push(v, Op::Abs(a), ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).data().iter().sum());
        let ng = self.ng(a);
        self.push(v, Op::SumAll(a), ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).numel().max(1) as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize, keep: bool) -> Result<Var> {
        let v = self.value(a).sum_axis(axis, keep)?;
        let ng = self.ng(a);
        Ok(self.push(v, Op::SumAxis(a, axis, keep), ng))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize, keep: bool) -> Result<Var> {
        let len = *self
            .shape(a)
            .get(axis)
            .ok_or(TensorError::Axis {
                axis,
                rank: self.shape(a).len(),
            })?;
        let s = self.sum_axis(a, axis, keep)?;
        Ok(self.scale(s, 1.0 / len.max(1) as f64))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat(&tensors, axis)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(v, Op::Concat(parts.to_vec(), axis), ng))
    }

    pub fn gather(&mut self, a: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        let v = self.value(a).gather(axis, indices)?;
        let ng = self.ng(a);
        Ok(self.push(v, Op::Gather(a, axis, indices.to_vec()), ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(shape)?;
        let ng = self.ng(a);
        Ok(self.push(v, Op::Reshape(a), ng))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let v = self.value(a).permute(axes)?;
        let ng = self.ng(a);
        Ok(self.push(v, Op::Permute(a, axes.to_vec()), ng))
    }

    pub fn transpose_last(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(TensorError::Axis { axis: 1, rank: r });
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(a, &axes)
    }

    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).broadcast_to(shape)?;
        let ng = self.ng(a);
        Ok(self.push(v, Op::BroadcastTo(a), ng))
    }

    /// Keeps the `k` largest entries per row of the last axis (ties to the lower index).
    pub fn topk_row_mask(&mut self, a: Var, k: usize) -> Result<Var> {
        let mask = self.value(a).topk_mask(k)?;
        let v = self.value(a).zip_broadcast(&mask, "topk", |x, m| x * m)?;
        let ng = self.ng(a);
        Ok(self.push(v, Op::TopkMask(a, mask), ng))
    }

    /// Reverse pass from a scalar (single-element) output.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let out = self.value(loss);
        if out.numel() != 1 {
            return Err(TensorError::Eval(format!(
                "backward needs a scalar output, got shape {:?}",
                out.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::ones(out.shape()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        let params = self.params.iter().map(|(&p, &v)| (p, v)).collect();
        Ok(Gradients { grads, params })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.ng(v) {
            return;
        }
        let g = if g.shape() != self.shape(v) {
            g.sum_to(self.shape(v))
        } else {
            g
        };
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.ng(*b) {
                    self.accumulate(grads, *b, g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    let ga = g.zip_broadcast(self.value(*b), "mul", |x, y| x * y)?;
                    self.accumulate(grads, *a, ga);
                }
                if self.ng(*b) {
                    let gb = g.zip_broadcast(self.value(*a), "mul", |x, y| x * y)?;
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                if self.ng(*a) {
                    self.accumulate(grads, *a, g.zip_broadcast(bv, "div", |x, y| x / y)?);
                }
                if self.ng(*b) {
                    // d(a/b)/db = -(a/b)/b = -y/b
                    let t = g.zip_broadcast(y, "div", |x, q| x * q)?;
                    let gb = t.zip_broadcast(bv, "div", |x, d| -x / d)?;
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.map(|x| x * c)),
            Op::Offset(a) => self.accumulate(grads, *a, g.clone()),
            Op::MulConst(a, c) => {
                self.accumulate(grads, *a, g.zip_broadcast(c, "mul_const", |x, m| x * m)?)
            }
            Op::MatMul(a, b) => self.matmul_backward(*a, *b, g, grads)?,
            Op::Sigmoid(a) => {
                let ga = g.zip_broadcast(y, "sigmoid", |x, s| x * s * (1.0 - s))?;
                self.accumulate(grads, *a, ga);
            }
            Op::Tanh(a) => {
                let ga = g.zip_broadcast(y, "tanh", |x, t| x * (1.0 - t * t))?;
                self.accumulate(grads, *a, ga);
            }
            Op::Relu(a) => {
                let ga = g.zip_broadcast(self.value(*a), "relu", |x, u| if u > 0.0 { x } else { 0.0 })?;
                self.accumulate(grads, *a, ga);
            }
            Op::Abs(a) => {
                let ga = g.zip_broadcast(self.value(*a), "abs", |x, u| {
                    if u > 0.0 {
                        x
                    } else if u < 0.0 {
                        -x
                    } else {
                        0.0
                    }
                })?;
                self.accumulate(grads, *a, ga);
            }
            Op::SumAll(a) => {
                let shape = self.shape(*a).to_vec();
                self.accumulate(grads, *a, Tensor::full(&shape, g.item()));
            }
            Op::SumAxis(a, axis, keep) => {
                let src = self.shape(*a).to_vec();
                let mut kept = src.clone();
                kept[*axis] = 1;
                let gk = if *keep { g.clone() } else { g.reshape(&kept)? };
                self.accumulate(grads, *a, gk.broadcast_to(&src)?);
            }
            Op::Concat(parts, axis) => {
                let mut start = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    if self.ng(p) {
                        let idx: Vec<usize> = (start..start + len).collect();
                        self.accumulate(grads, p, g.gather(*axis, &idx)?);
                    }
                    start += len;
                }
            }
            Op::Gather(a, axis, idx) => {
                if self.ng(*a) {
                    let acc = grads[a.0].get_or_insert_with(|| Tensor::zeros(self.shape(*a)));
                    g.scatter_add_into(*axis, idx, acc)?;
                }
            }
            Op::Reshape(a) => {
                let shape = self.shape(*a).to_vec();
                self.accumulate(grads, *a, g.reshape(&shape)?);
            }
            Op::Permute(a, axes) => {
                let mut inv = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inv[ax] = i;
                }
                self.accumulate(grads, *a, g.permute(&inv)?);
            }
            // accumulate() reduces the expanded gradient back to the source shape
            Op::BroadcastTo(a) => self.accumulate(grads, *a, g.clone()),
            Op::TopkMask(a, mask) => {
                self.accumulate(grads, *a, g.zip_broadcast(mask, "topk", |x, m| x * m)?)
            }
        }
        Ok(())
    }

    fn matmul_backward(&self, a: Var, b: Var, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let av = self.value(a);
        let bv = self.value(b);
        if self.ng(a) {
            let ga = g.matmul(&bv.transpose_last()?)?;
            self.accumulate(grads, a, ga);
        }
        if self.ng(b) {
            if bv.rank() == 2 {
                let (k, n) = (bv.shape()[0], bv.shape()[1]);
                let rows = numel(&av.shape()[..av.rank() - 1]);
                let mut gb = Tensor::zeros(&[k, n]);
                gemm_tn(av.data(), g.data(), gb.data_mut(), rows, k, n);
                self.accumulate(grads, b, gb);
            } else {
                let gb = av.transpose_last()?.matmul(g)?;
                self.accumulate(grads, b, gb);
            }
        }
        Ok(())
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
