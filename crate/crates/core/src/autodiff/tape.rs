//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its output value and the indices
//! of its operands. [`GradTape::backward`] walks the nodes in reverse
//! execution order and accumulates gradients, so a leaf consumed by several
//! operations (the shared recursive layer) receives the sum of all
//! contributions.

use std::sync::atomic::{AtomicU64, Ordering};

use super::ops;
use super::tensor::{Scalar, Shape, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a particular [`GradTape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        input: usize,
        weight: usize,
        bias: usize,
    },
    Relu(usize),
    Add(usize, usize),
    WeightedSum {
        inputs: Vec<usize>,
        weights: usize,
    },
    Mse {
        pred: usize,
        target: usize,
        divisor: T,
    },
    Scale(usize, T),
    SquaredNorm(usize),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Debug)]
pub struct GradTape<T> {
    id: u64,
    nodes: Vec<Node<T>>,
}

/// Result of [`GradTape::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    tape: u64,
    grads: Vec<Option<Tensor<T>>>,
    visited: Vec<usize>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to a leaf, `None` if the leaf does
    /// not influence the loss or was recorded as a constant.
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get(var.index).and_then(Option::as_ref)
    }

    /// Like [`Gradients::get`] but yields zeros for leaves the loss does not
    /// depend on.
    pub fn get_or_zeros(&self, var: Var, shape: Shape) -> Result<Tensor<T>> {
        match self.get(var) {
            Some(g) => Ok(g.clone()),
            None => Tensor::zeros(shape),
        }
    }

    /// Indices of the non-leaf nodes processed, in processing order.
    pub fn visit_order(&self) -> &[usize] {
        &self.visited
    }
}

impl<T: Scalar> Default for GradTape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> GradTape<T> {
    pub fn new() -> Self {
        GradTape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn check(&self, var: Var) -> Result<usize> {
        if var.tape != self.id || var.index >= self.nodes.len() {
            return Err(Error::Usage(format!(
                "variable {var:?} was not recorded on this tape"
            )));
        }
        Ok(var.index)
    }

    fn requires(&self, index: usize) -> bool {
        self.nodes[index].requires_grad
    }

    /// A differentiable leaf (parameter or input whose gradient is wanted).
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, var: Var) -> Result<&Tensor<T>> {
        let i = self.check(var)?;
        Ok(&self.nodes[i].value)
    }

    /// Same-padded convolution; `bias` is a 1×out×1×1 tensor.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (i, w, b) = (self.check(input)?, self.check(weight)?, self.check(bias)?);
        let value = ops::conv2d_raw(
            &self.nodes[i].value,
            &self.nodes[w].value,
            self.nodes[b].value.data(),
        )?;
        let rg = self.requires(i) || self.requires(w) || self.requires(b);
        Ok(self.push(
            value,
            Op::Conv2d {
                input: i,
                weight: w,
                bias: b,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let i = self.check(input)?;
        let value = ops::relu(&self.nodes[i].value);
        let rg = self.requires(i);
        Ok(self.push(value, Op::Relu(i), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let value = ops::add(&self.nodes[ia].value, &self.nodes[ib].value)?;
        let rg = self.requires(ia) || self.requires(ib);
        Ok(self.push(value, Op::Add(ia, ib), rg))
    }

    /// `Σ_d weights[d] · inputs[d]`; `weights` holds one scalar per input.
    pub fn weighted_sum(&mut self, inputs: &[Var], weights: Var) -> Result<Var> {
        let idx = inputs
            .iter()
            .map(|&v| self.check(v))
            .collect::<Result<Vec<_>>>()?;
        let w = self.check(weights)?;
        let value = {
            let tensors: Vec<&Tensor<T>> = idx.iter().map(|&i| &self.nodes[i].value).collect();
            ops::weighted_sum(&tensors, self.nodes[w].value.data())?
        };
        let rg = self.requires(w) || idx.iter().any(|&i| self.requires(i));
        Ok(self.push(
            value,
            Op::WeightedSum {
                inputs: idx,
                weights: w,
            },
            rg,
        ))
    }

    /// Scalar `(1/divisor) · ½ Σ (pred − target)²`.
    pub fn mse_loss(&mut self, pred: Var, target: Var, divisor: T) -> Result<Var> {
        let (p, t) = (self.check(pred)?, self.check(target)?);
        let loss = ops::mse_loss(&self.nodes[p].value, &self.nodes[t].value, divisor)?;
        let rg = self.requires(p) || self.requires(t);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Mse {
                pred: p,
                target: t,
                divisor,
            },
            rg,
        ))
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Result<Var> {
        let i = self.check(input)?;
        let value = self.nodes[i].value.map(|v| v * factor);
        let rg = self.requires(i);
        Ok(self.push(value, Op::Scale(i, factor), rg))
    }

    /// Scalar sum of squared elements.
    pub fn squared_norm(&mut self, input: Var) -> Result<Var> {
        let i = self.check(input)?;
        let value = Tensor::scalar(self.nodes[i].value.squared_norm());
        let rg = self.requires(i);
        Ok(self.push(value, Op::SquaredNorm(i), rg))
    }

    /// Sum of several same-shaped values.
    pub fn sum(&mut self, terms: &[Var]) -> Result<Var> {
        let (&first, rest) = terms
            .split_first()
            .ok_or_else(|| Error::InvalidArgument("sum of an empty list".into()))?;
        rest.iter().try_fold(first, |acc, &v| self.add(acc, v))
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let li = self.check(loss)?;
        if self.nodes[li].value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {}",
                self.nodes[li].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut visited = Vec::new();
        grads[li] = Some(Tensor::scalar(T::one()));

        for i in (0..=li).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            visited.push(i);
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                } => {
                    let cg = ops::conv2d_backward(
                        &self.nodes[*input].value,
                        &self.nodes[*weight].value,
                        &g,
                        self.requires(*input),
                    )?;
                    if let Some(gi) = cg.input {
                        accumulate(&mut grads, *input, gi)?;
                    }
                    if self.requires(*weight) {
                        accumulate(&mut grads, *weight, cg.weight)?;
                    }
                    if self.requires(*bias) {
                        let bshape = self.nodes[*bias].value.shape();
                        accumulate(&mut grads, *bias, Tensor::from_vec(bshape, cg.bias)?)?;
                    }
                }
                Op::Relu(input) => {
                    let gi = ops::relu_backward(&node.value, &g);
                    accumulate(&mut grads, *input, gi)?;
                }
                Op::Add(a, b) => {
                    if self.requires(*a) {
                        accumulate(&mut grads, *a, g.clone())?;
                    }
                    if self.requires(*b) {
                        accumulate(&mut grads, *b, g)?;
                    }
                }
                Op::WeightedSum { inputs, weights } => {
                    let w = self.nodes[*weights].value.data();
                    let mut gw = vec![T::zero(); w.len()];
                    for (d, &inp) in inputs.iter().enumerate() {
                        let x = &self.nodes[inp].value;
                        gw[d] = x.data().iter().zip(g.data()).map(|(&a, &b)| a * b).sum();
                        if self.requires(inp) {
                            accumulate(&mut grads, inp, g.map(|v| v * w[d]))?;
                        }
                    }
                    if self.requires(*weights) {
                        let shape = self.nodes[*weights].value.shape();
                        accumulate(&mut grads, *weights, Tensor::from_vec(shape, gw)?)?;
                    }
                }
                Op::Mse {
                    pred,
                    target,
                    divisor,
                } => {
                    let upstream = g.item()? / *divisor;
                    let p = &self.nodes[*pred].value;
                    let t = &self.nodes[*target].value;
                    let diff: Vec<T> = p
                        .data()
                        .iter()
                        .zip(t.data())
                        .map(|(&a, &b)| (a - b) * upstream)
                        .collect();
                    if self.requires(*target) {
                        let neg = diff.iter().map(|&v| -v).collect();
                        accumulate(&mut grads, *target, Tensor::from_vec(t.shape(), neg)?)?;
                    }
                    if self.requires(*pred) {
                        accumulate(&mut grads, *pred, Tensor::from_vec(p.shape(), diff)?)?;
                    }
                }
                Op::Scale(input, factor) => {
                    accumulate(&mut grads, *input, g.map(|v| v * *factor))?;
                }
                Op::SquaredNorm(input) => {
                    let two_g = g.item()? * T::from_f64(2.0);
                    let gi = self.nodes[*input].value.map(|v| v * two_g);
                    accumulate(&mut grads, *input, gi)?;
                }
            }
        }
        Ok(Gradients {
            tape: self.id,
            grads,
            visited,
        })
    }
}

fn accumulate<T: Scalar>(
    grads: &mut [Option<Tensor<T>>],
    index: usize,
    g: Tensor<T>,
) -> Result<()> {
    match &mut grads[index] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}
