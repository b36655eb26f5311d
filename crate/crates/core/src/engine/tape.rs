//! Reverse-mode differentiation over a recorded list of operations.

use std::borrow::Cow;

use super::tensor::{conv_backward, conv_dims, conv_forward, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv1d { x: Var, k: Var, dilation: usize },
    AddBias { x: Var, b: Var },
    Relu { x: Var },
    Sum { x: Var },
    HalfSqNorm { x: Var },
    /// Divides every channel column `x[:, b, t]` by its L2 norm.
    NormalizeColumns { x: Var },
}

struct Node<'a, T: Clone> {
    value: Cow<'a, Tensor<T>>,
    op: Op,
    requires_grad: bool,
}

/// Values are owned, except constants recorded with [`Tape::constant_ref`].
#[derive(Default)]
pub struct Tape<'a, T: Real = f32> {
    nodes: Vec<Node<'a, T>>,
}

pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<'a, T: Real> Tape<'a, T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op, requires_grad: bool) -> Var {
        self.push_cow(Cow::Owned(value), op, requires_grad)
    }

    fn push_cow(&mut self, value: Cow<'a, Tensor<T>>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> Result<&Node<'a, T>> {
        self.nodes
            .get(v.0)
            .ok_or_else(|| Error::Graph(format!("variable {} is not on this tape", v.0)))
    }

    /// A value that does not receive gradients (inputs, data).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A borrowed constant; avoids copying large inputs onto the tape.
    pub fn constant_ref(&mut self, value: &'a Tensor<T>) -> Var {
        self.push_cow(Cow::Borrowed(value), Op::Leaf, false)
    }

    /// A value that receives gradients (parameters).
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn conv1d(&mut self, x: Var, k: Var, dilation: usize) -> Result<Var> {
        let (xv, kv) = (&self.node(x)?.value, &self.node(k)?.value);
        let d = conv_dims(xv, kv, dilation)?;
        let out = conv_forward(xv.data(), kv.data(), &d);
        let shape = if xv.shape().len() == 2 {
            vec![d.c_out, d.len_out]
        } else {
            vec![d.c_out, d.batch, d.len_out]
        };
        let rg = self.rg(x) || self.rg(k);
        Ok(self.push(Tensor::new(shape, out)?, Op::Conv1d { x, k, dilation }, rg))
    }

    /// Adds a per-channel bias `[C]` to a `[C, ...]` tensor.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (&self.node(x)?.value, &self.node(b)?.value);
        let c = xv.shape()[0];
        if bv.shape() != [c] {
            return Err(Error::Shape(format!(
                "bias {:?} does not match {c} channels",
                bv.shape()
            )));
        }
        let inner = xv.len() / c;
        let mut out = Tensor::clone(xv);
        for (ch, row) in out.data_mut().chunks_exact_mut(inner).enumerate() {
            let bias = bv.data()[ch];
            for v in row {
                *v = *v + bias;
            }
        }
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(out, Op::AddBias { x, b }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.node(x)?.value.map(|v| v.max(T::zero()));
        let rg = self.rg(x);
        Ok(self.push(out, Op::Relu { x }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: T = self.node(x)?.value.data().iter().copied().sum();
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), Op::Sum { x }, rg))
    }

    /// `||x||^2 / 2`
    pub fn half_sq_norm(&mut self, x: Var) -> Result<Var> {
        let s: T = self.node(x)?.value.data().iter().map(|&v| v * v).sum();
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s * T::of(0.5)), Op::HalfSqNorm { x }, rg))
    }

    pub fn normalize_columns(&mut self, x: Var) -> Result<Var> {
        let xv = &self.node(x)?.value;
        let c = xv.shape()[0];
        let inner = xv.len() / c;
        let norms = column_norms(xv.data(), c, inner);
        let mut out = Tensor::clone(xv);
        for ch in 0..c {
            for (j, n) in norms.iter().enumerate() {
                let v = &mut out.data_mut()[ch * inner + j];
                *v = *v / *n;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::NormalizeColumns { x }, rg))
    }

    /// Gradients of the scalar `loss` with respect to every recorded value.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let node = self.node(loss)?;
        if node.value.len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                node.value.shape()
            )));
        }
        if !node.value.all_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        self.backward_with(loss, Tensor::new(node.value.shape().to_vec(), vec![T::one()])?)
    }

    /// Propagates an upstream gradient `seed` (same shape as `output`).
    pub fn backward_with(&self, output: Var, seed: Tensor<T>) -> Result<Gradients<T>> {
        if self.nodes.is_empty() {
            return Err(Error::Graph("backward called on an empty tape".into()));
        }
        let out_node = self.node(output)?;
        if out_node.value.shape() != seed.shape() {
            return Err(Error::Shape(format!(
                "seed shape {:?} does not match output {:?}",
                seed.shape(),
                out_node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed);

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = Some(g);
                continue;
            }
            match node.op {
                Op::Leaf => {}
                Op::Conv1d { x, k, dilation } => {
                    let (xv, kv) = (&self.nodes[x.0].value, &self.nodes[k.0].value);
                    let d = conv_dims(xv, kv, dilation)?;
                    let (dx, dk) =
                        conv_backward(xv.data(), kv.data(), g.data(), &d, self.rg(x), self.rg(k));
                    if let Some(dx) = dx {
                        accumulate(&mut grads, x, Tensor::new(xv.shape().to_vec(), dx)?);
                    }
                    if let Some(dk) = dk {
                        accumulate(&mut grads, k, Tensor::new(kv.shape().to_vec(), dk)?);
                    }
                }
                Op::AddBias { x, b } => {
                    if self.rg(b) {
                        let c = g.shape()[0];
                        let inner = g.len() / c;
                        let db: Vec<T> = g
                            .data()
                            .chunks_exact(inner)
                            .map(|row| row.iter().copied().sum())
                            .collect();
                        accumulate(&mut grads, b, Tensor::new(vec![c], db)?);
                    }
                    if self.rg(x) {
                        accumulate(&mut grads, x, g.clone());
                    }
                }
                Op::Relu { x } => {
                    let xv = &self.nodes[x.0].value;
                    let dx = Tensor::new(
                        g.shape().to_vec(),
                        g.data()
                            .iter()
                            .zip(xv.data())
                            .map(|(&gv, &v)| if v > T::zero() { gv } else { T::zero() })
                            .collect(),
                    )?;
                    accumulate(&mut grads, x, dx);
                }
                Op::Sum { x } => {
                    let xv = &self.nodes[x.0].value;
                    let gv = g.data()[0];
                    accumulate(&mut grads, x, xv.map(|_| gv));
                }
                Op::HalfSqNorm { x } => {
                    let xv = &self.nodes[x.0].value;
                    let gv = g.data()[0];
                    accumulate(&mut grads, x, xv.map(|v| v * gv));
                }
                Op::NormalizeColumns { x } => {
                    let xv = &self.nodes[x.0].value;
                    let y = &node.value;
                    let c = xv.shape()[0];
                    let inner = xv.len() / c;
                    let norms = column_norms(xv.data(), c, inner);
                    let mut dx = vec![T::zero(); xv.len()];
                    for (j, n) in norms.iter().enumerate() {
                        let dot: T = (0..c)
                            .map(|ch| y.data()[ch * inner + j] * g.data()[ch * inner + j])
                            .sum();
                        for ch in 0..c {
                            let i = ch * inner + j;
                            dx[i] = (g.data()[i] - y.data()[i] * dot) / *n;
                        }
                    }
                    accumulate(&mut grads, x, Tensor::new(xv.shape().to_vec(), dx)?);
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn column_norms<T: Real>(data: &[T], c: usize, inner: usize) -> Vec<T> {
    (0..inner)
        .map(|j| {
            let s: T = (0..c).map(|ch| data[ch * inner + j] * data[ch * inner + j]).sum();
            s.sqrt().max(T::of(1e-12))
        })
        .collect()
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
