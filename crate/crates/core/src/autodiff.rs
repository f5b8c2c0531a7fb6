//! Reverse-mode differentiation over a recorded tape of primitive ops.
//!
//! Values live in slots indexed by [`Var`]. Each recorded node keeps whatever
//! its vector-Jacobian product needs (the unfolded conv input, the loss
//! gradient with respect to logits). `backward` walks the nodes once, last to
//! first, adding into gradient slots so fan-out accumulates.

use crate::error::{Error, Result};
use crate::ops::{self, ConvGeom, ConvSpec};
use crate::tensor::{Scalar, Tensor};

/// Handle to a value slot on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    Relu {
        input: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        input: Var,
        factor: T,
    },
    Sum {
        input: Var,
    },
    Upsample {
        input: Var,
        factor: usize,
    },
    /// Scalar loss whose gradient w.r.t. `logits` was computed in the forward pass.
    Loss {
        logits: Var,
        dlogits: Tensor<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records operations for one forward/backward pass.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    params: Vec<(String, Var)>,
    consumed: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: Vec::new(),
            consumed: false,
        }
    }

    /// Clears every recorded op so the tape can be reused.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.params.clear();
        self.consumed = false;
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
        Var(self.nodes.len() - 1)
    }

    fn grad_flows(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A constant input; no gradient is computed for it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A named trainable leaf; `backward` reports its gradient under `name`.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor<T>) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.params.push((name.into(), v));
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, spec: ConvSpec) -> Result<Var> {
        let (x, w, b) = (self.value(input), self.value(weight), self.value(bias));
        let geom = ConvGeom::resolve(x.shape(), w.shape(), b.shape(), spec)?;
        let cols = ops::im2col(x.data(), &geom);
        let out = ops::conv2d_from_cols(&cols, w, b, &geom);
        let rg = self.grad_flows(&[input, weight, bias]);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = ops::relu(self.value(input));
        let rg = self.grad_flows(&[input]);
        self.push(out, Op::Relu { input }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::Shape(format!("add {:?} + {:?}", x.shape(), y.shape())));
        }
        let mut out = x.clone();
        out.axpy(T::one(), y);
        let rg = self.grad_flows(&[a, b]);
        Ok(self.push(out, Op::Add { a, b }, rg))
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Var {
        let out = self.value(input).map(|v| v * factor);
        let rg = self.grad_flows(&[input]);
        self.push(out, Op::Scale { input, factor }, rg)
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let out = Tensor::scalar(self.value(input).sum());
        let rg = self.grad_flows(&[input]);
        self.push(out, Op::Sum { input }, rg)
    }

    pub fn bilinear_upsample(&mut self, input: Var, factor: usize) -> Result<Var> {
        let out = ops::bilinear_upsample(self.value(input), factor)?;
        let rg = self.grad_flows(&[input]);
        Ok(self.push(out, Op::Upsample { input, factor }, rg))
    }

    pub fn cross_entropy(&mut self, logits: Var, labels: &[u8]) -> Result<Var> {
        let ops::LossWithGrad { loss, dlogits } = ops::cross_entropy(self.value(logits), labels)?;
        let rg = self.grad_flows(&[logits]);
        Ok(self.push(Tensor::scalar(loss), Op::Loss { logits, dlogits }, rg))
    }

    /// `KL(target ‖ softmax(logits))`; `target` is treated as a constant.
    pub fn kl_divergence(&mut self, target: &Tensor<T>, logits: Var) -> Result<Var> {
        let ops::LossWithGrad { loss, dlogits } = ops::kl_divergence(target, self.value(logits))?;
        let rg = self.grad_flows(&[logits]);
        Ok(self.push(Tensor::scalar(loss), Op::Loss { logits, dlogits }, rg))
    }

    /// Back-propagates from the scalar `loss`. Every registered parameter gets
    /// a gradient, zero if the loss does not depend on it.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::BackwardTwice);
        }
        let loss_shape = self.value(loss).shape();
        if loss_shape != [1] {
            return Err(Error::NonScalarLoss(loss_shape.to_vec()));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    geom,
                    cols,
                } => {
                    let w = &self.nodes[weight.0].value;
                    let need_input = self.nodes[input.0].requires_grad;
                    let cg = ops::conv2d_backward(geom, cols, w, g.data(), need_input);
                    if let Some(di) = cg.input {
                        accumulate(&mut grads, &self.nodes, *input, di);
                    }
                    accumulate(&mut grads, &self.nodes, *weight, cg.weight);
                    accumulate(&mut grads, &self.nodes, *bias, cg.bias);
                }
                Op::Relu { input } => {
                    let di = ops::relu_backward(&self.nodes[input.0].value, g.data());
                    accumulate(&mut grads, &self.nodes, *input, di);
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, &self.nodes, *a, g.data().to_vec());
                    accumulate(&mut grads, &self.nodes, *b, g.into_data());
                }
                Op::Scale { input, factor } => {
                    let di = g.data().iter().map(|&v| v * *factor).collect();
                    accumulate(&mut grads, &self.nodes, *input, di);
                }
                Op::Sum { input } => {
                    let n = self.nodes[input.0].value.numel();
                    accumulate(&mut grads, &self.nodes, *input, vec![g.item(); n]);
                }
                Op::Upsample { input, factor } => {
                    let (c, h, w) = self.nodes[input.0].value.chw()?;
                    let di = ops::bilinear_upsample_backward(g.data(), c, h, w, *factor);
                    accumulate(&mut grads, &self.nodes, *input, di);
                }
                Op::Loss { logits, dlogits } => {
                    let up = g.item();
                    let di = dlogits.data().iter().map(|&v| v * up).collect();
                    accumulate(&mut grads, &self.nodes, *logits, di);
                }
            }
        }

        let named = self
            .params
            .iter()
            .map(|(name, v)| {
                let shape = self.nodes[v.0].value.shape();
                let g = grads[v.0].take().unwrap_or_else(|| Tensor::zeros(shape));
                (name.clone(), g)
            })
            .collect();
        Ok(Gradients { named })
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], nodes: &[Node<T>], target: Var, delta: Vec<T>) {
    if !nodes[target.0].requires_grad {
        return;
    }
    match &mut grads[target.0] {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(delta) {
                *a = *a + b;
            }
        }
        slot @ None => {
            let shape = nodes[target.0].value.shape().to_vec();
            *slot = Some(Tensor::new(shape, delta).expect("gradient matches value shape"));
        }
    }
}

/// Parameter gradients in registration order.
#[derive(Clone, Debug)]
pub struct Gradients<T = f32> {
    named: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.named.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.named.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn into_tensors(self) -> Vec<Tensor<T>> {
        self.named.into_iter().map(|(_, t)| t).collect()
    }
}
