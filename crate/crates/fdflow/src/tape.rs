//! Reverse-mode automatic differentiation over a flat arena.
//!
//! Every operation runs eagerly and appends one node recording its inputs;
//! [`Tape::backward`] walks the arena once in reverse. Gradients of
//! intermediate nodes are dropped as soon as they have been propagated, so
//! after backward only leaves (parameters and inputs) hold gradients.

use crate::error::{Error, Result};
use crate::ops::conv::{conv2d_backward, conv2d_forward, conv_transpose2d_backward, conv_transpose2d_forward, ConvSpec};
use crate::ops::correlate::{correlate_backward, correlate_forward, CorrSpec};
use crate::ops::elementwise::{
    add_forward, concat_channels_backward, concat_channels_forward, leaky_relu_backward,
    leaky_relu_forward, scale_forward, sub_forward,
};
use crate::ops::loss::{norm_loss_backward, norm_loss_forward, NormKind};
use crate::ops::resample::{upsample2x_backward, upsample2x_forward};
use crate::ops::warp::{warp_backward, warp_forward};
use crate::tensor::{Elem, Tensor};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T: Elem> {
    Leaf,
    Conv { input: Var, weight: Var, bias: Var, spec: ConvSpec },
    ConvT { input: Var, weight: Var, bias: Var, stride: usize, padding: usize },
    LeakyRelu { input: Var, slope: T },
    Concat { inputs: Vec<Var> },
    Warp { input: Var, flow: Var },
    Correlate { f1: Var, f2: Var, spec: CorrSpec },
    Upsample2x { input: Var },
    Scale { input: Var, k: T },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    NormLoss { pred: Var, target: Tensor<T>, kind: NormKind },
    WeightedSum { terms: Vec<(T, Var)> },
}

pub struct Tape<T: Elem> {
    values: Vec<Tensor<T>>,
    ops: Vec<Op<T>>,
    requires: Vec<bool>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Elem> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Elem> Tape<T> {
    pub fn new() -> Self {
        Tape { values: Vec::new(), ops: Vec::new(), requires: Vec::new(), grads: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires: bool) -> Var {
        self.values.push(value);
        self.ops.push(op);
        self.requires.push(requires);
        self.grads.push(None);
        Var(self.values.len() - 1)
    }

    /// Input data: participates in the graph but accumulates no gradient.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable parameter: retains its gradient after backward.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    /// Gradient accumulated by the last [`Self::backward`] call. `None` for
    /// nodes that were not reached, did not require gradients, or whose
    /// gradient has already been consumed (all non-leaf nodes).
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0].take()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn any_requires(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.requires[v.0])
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, spec: ConvSpec) -> Result<Var> {
        let out = conv2d_forward(self.value(input), self.value(weight), self.value(bias), &spec)?;
        let req = self.any_requires(&[input, weight, bias]);
        Ok(self.push(out, Op::Conv { input, weight, bias, spec }, req))
    }

    pub fn conv_transpose2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let out = conv_transpose2d_forward(self.value(input), self.value(weight), self.value(bias), stride, padding)?;
        let req = self.any_requires(&[input, weight, bias]);
        Ok(self.push(out, Op::ConvT { input, weight, bias, stride, padding }, req))
    }

    pub fn leaky_relu(&mut self, input: Var, slope: T) -> Var {
        let out = leaky_relu_forward(self.value(input), slope);
        let req = self.requires[input.0];
        self.push(out, Op::LeakyRelu { input, slope }, req)
    }

    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor<T>> = inputs.iter().map(|v| self.value(*v)).collect();
        let out = concat_channels_forward(&tensors)?;
        let req = self.any_requires(inputs);
        Ok(self.push(out, Op::Concat { inputs: inputs.to_vec() }, req))
    }

    pub fn warp(&mut self, input: Var, flow: Var) -> Result<Var> {
        let out = warp_forward(self.value(input), self.value(flow))?;
        let req = self.any_requires(&[input, flow]);
        Ok(self.push(out, Op::Warp { input, flow }, req))
    }

    pub fn correlate(&mut self, f1: Var, f2: Var, spec: CorrSpec) -> Result<Var> {
        let out = correlate_forward(self.value(f1), self.value(f2), &spec)?;
        let req = self.any_requires(&[f1, f2]);
        Ok(self.push(out, Op::Correlate { f1, f2, spec }, req))
    }

    pub fn upsample2x(&mut self, input: Var) -> Result<Var> {
        let out = upsample2x_forward(self.value(input))?;
        let req = self.requires[input.0];
        Ok(self.push(out, Op::Upsample2x { input }, req))
    }

    pub fn scale(&mut self, input: Var, k: T) -> Var {
        let out = scale_forward(self.value(input), k);
        let req = self.requires[input.0];
        self.push(out, Op::Scale { input, k }, req)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = add_forward(self.value(a), self.value(b))?;
        let req = self.any_requires(&[a, b]);
        Ok(self.push(out, Op::Add { a, b }, req))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = sub_forward(self.value(a), self.value(b))?;
        let req = self.any_requires(&[a, b]);
        Ok(self.push(out, Op::Sub { a, b }, req))
    }

    /// Scalar loss node; the target is plain data, not a tape variable.
    pub fn norm_loss(&mut self, pred: Var, target: &Tensor<T>, kind: NormKind) -> Result<Var> {
        let loss = norm_loss_forward(self.value(pred), target, kind)?;
        let req = self.requires[pred.0];
        Ok(self.push(Tensor::scalar(loss), Op::NormLoss { pred, target: target.clone(), kind }, req))
    }

    /// `sum_i k_i * v_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(T, Var)]) -> Result<Var> {
        let mut acc = T::zero();
        for &(k, v) in terms {
            let t = self.value(v);
            if t.numel() != 1 {
                return Err(Error::shape("weighted_sum", format!("term has shape {:?}, wanted a scalar", t.shape())));
            }
            acc = acc + k * t.data()[0];
        }
        let vars: Vec<Var> = terms.iter().map(|&(_, v)| v).collect();
        let req = self.any_requires(&vars);
        Ok(self.push(Tensor::scalar(acc), Op::WeightedSum { terms: terms.to_vec() }, req))
    }

    fn accumulate(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        match &mut grads[v.0] {
            slot @ None => *slot = Some(g),
            Some(acc) => {
                debug_assert_eq!(acc.shape(), g.shape());
                for (a, &x) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a = *a + x;
                }
            }
        }
    }

    /// Reverse pass from a scalar `loss` node. Leaf gradients accumulate; call
    /// [`Self::grad`] or [`Self::take_grad`] afterwards.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[loss.0] = Some(Tensor::scalar(T::one()));

        for i in (0..self.ops.len()).rev() {
            if !self.requires[i] {
                self.grads[i] = None;
                continue;
            }
            let go = match self.ops[i] {
                Op::Leaf => continue, // leaves keep their accumulated gradient
                _ => match self.grads[i].take() {
                    Some(g) => g,
                    None => continue, // not on any path to the loss
                },
            };
            let grads = &mut self.grads;
            let values = &self.values;
            let requires = &self.requires;
            match &self.ops[i] {
                Op::Leaf => unreachable!(),
                Op::Conv { input, weight, bias, spec } => {
                    let g = conv2d_backward(&values[input.0], &values[weight.0], spec, &go, requires[input.0])?;
                    if let Some(gi) = g.input {
                        Self::accumulate(grads, *input, gi);
                    }
                    if requires[weight.0] {
                        Self::accumulate(grads, *weight, g.weight);
                    }
                    if requires[bias.0] {
                        Self::accumulate(grads, *bias, g.bias);
                    }
                }
                Op::ConvT { input, weight, bias, stride, padding } => {
                    let g = conv_transpose2d_backward(&values[input.0], &values[weight.0], *stride, *padding, &go, requires[input.0])?;
                    if let Some(gi) = g.input {
                        Self::accumulate(grads, *input, gi);
                    }
                    if requires[weight.0] {
                        Self::accumulate(grads, *weight, g.weight);
                    }
                    if requires[bias.0] {
                        Self::accumulate(grads, *bias, g.bias);
                    }
                }
                Op::LeakyRelu { input, slope } => {
                    let g = leaky_relu_backward(&values[input.0], *slope, &go);
                    Self::accumulate(grads, *input, g);
                }
                Op::Concat { inputs } => {
                    let channels: Vec<usize> = inputs.iter().map(|v| values[v.0].shape()[1]).collect();
                    let parts = concat_channels_backward(&channels, &go)?;
                    for (v, g) in inputs.iter().zip(parts) {
                        if requires[v.0] {
                            Self::accumulate(grads, *v, g);
                        }
                    }
                }
                Op::Warp { input, flow } => {
                    let g = warp_backward(&values[input.0], &values[flow.0], &go)?;
                    if requires[input.0] {
                        Self::accumulate(grads, *input, g.input);
                    }
                    if requires[flow.0] {
                        Self::accumulate(grads, *flow, g.flow);
                    }
                }
                Op::Correlate { f1, f2, spec } => {
                    let (g1, g2) = correlate_backward(&values[f1.0], &values[f2.0], spec, &go)?;
                    if requires[f1.0] {
                        Self::accumulate(grads, *f1, g1);
                    }
                    if requires[f2.0] {
                        Self::accumulate(grads, *f2, g2);
                    }
                }
                Op::Upsample2x { input } => {
                    let g = upsample2x_backward(values[input.0].shape(), &go)?;
                    Self::accumulate(grads, *input, g);
                }
                Op::Scale { input, k } => {
                    Self::accumulate(grads, *input, scale_forward(&go, *k));
                }
                Op::Add { a, b } => {
                    if requires[a.0] {
                        Self::accumulate(grads, *a, go.clone());
                    }
                    if requires[b.0] {
                        Self::accumulate(grads, *b, go);
                    }
                }
                Op::Sub { a, b } => {
                    if requires[a.0] {
                        Self::accumulate(grads, *a, go.clone());
                    }
                    if requires[b.0] {
                        Self::accumulate(grads, *b, scale_forward(&go, T::zero() - T::one()));
                    }
                }
                Op::NormLoss { pred, target, kind } => {
                    let g = norm_loss_backward(&values[pred.0], target, *kind, go.data()[0])?;
                    Self::accumulate(grads, *pred, g);
                }
                Op::WeightedSum { terms } => {
                    let g0 = go.data()[0];
                    for &(k, v) in terms {
                        if requires[v.0] {
                            Self::accumulate(grads, v, Tensor::scalar(k * g0));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}
