//! Tape-based reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the tape is topologically
//! sorted by construction and `backward` is a single reverse sweep.

use super::kernels::{self, BatchNormSaved, ConvGeometry, PoolIndices, TransposedGeometry};
use super::Tensor;
use crate::error::{Error, Result};
use std::rc::Rc;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Conv {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeometry,
    },
    TransposedConv {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: TransposedGeometry,
    },
    MaxPool {
        input: Var,
        indices: Rc<PoolIndices>,
    },
    Unpool {
        input: Var,
        indices: Rc<PoolIndices>,
    },
    BatchNormTrain {
        input: Var,
        gamma: Var,
        beta: Var,
        saved: BatchNormSaved,
    },
    BatchNormInfer {
        input: Var,
        gamma: Var,
        beta: Var,
        normalized: Tensor,
        inv_std: Vec<f64>,
    },
    Relu {
        input: Var,
    },
    Softmax {
        input: Var,
    },
    Concat {
        a: Var,
        b: Var,
        split: usize,
    },
    ChannelFold {
        input: Var,
        channels: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        input: Var,
        factor: f64,
    },
    Sum {
        input: Var,
    },
    SoftDice {
        probs: Var,
        target: Rc<Tensor>,
        eps: f64,
    },
    CrossEntropy {
        probs: Var,
        target: Rc<Tensor>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that required one.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `var`; zeros when the scalar does not depend on it.
    pub fn wrt(&self, var: Var) -> Tensor {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }

    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads[var.0].as_ref()
    }

    pub fn take(&mut self, var: Var) -> Tensor {
        self.grads[var.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.0]))
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => acc
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
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

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn conv(&mut self, input: Var, kernel: Var, bias: Var, geom: ConvGeometry) -> Result<Var> {
        let value = kernels::conv_forward(self.value(input), self.value(kernel), self.value(bias), &geom)?;
        let rg = self.rg(&[input, kernel, bias]);
        Ok(self.push(
            value,
            Op::Conv {
                input,
                kernel,
                bias,
                geom,
            },
            rg,
        ))
    }

    pub fn transposed_conv(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        geom: TransposedGeometry,
    ) -> Result<Var> {
        let value = kernels::transposed_conv_forward(
            self.value(input),
            self.value(kernel),
            self.value(bias),
            &geom,
        )?;
        let rg = self.rg(&[input, kernel, bias]);
        Ok(self.push(
            value,
            Op::TransposedConv {
                input,
                kernel,
                bias,
                geom,
            },
            rg,
        ))
    }

    pub fn maxpool(&mut self, input: Var, factor: [usize; 3]) -> Result<(Var, Rc<PoolIndices>)> {
        let (value, indices) = kernels::maxpool_forward(self.value(input), factor)?;
        let indices = Rc::new(indices);
        let rg = self.rg(&[input]);
        let var = self.push(
            value,
            Op::MaxPool {
                input,
                indices: Rc::clone(&indices),
            },
            rg,
        );
        Ok((var, indices))
    }

    pub fn unpool(&mut self, input: Var, indices: Rc<PoolIndices>) -> Result<Var> {
        let value = kernels::unpool_forward(self.value(input), &indices)?;
        let rg = self.rg(&[input]);
        Ok(self.push(value, Op::Unpool { input, indices }, rg))
    }

    /// Training-mode batch norm. Also returns the batch mean and variance so
    /// the caller can update running statistics.
    pub fn batch_norm_train(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        if self.value(input).shape()[0] == 0 {
            return Err(Error::Degenerate("batch norm on an empty batch".into()));
        }
        let (value, saved) =
            kernels::batch_norm_train(self.value(input), self.value(gamma), self.value(beta), eps)?;
        let (mean, var) = (saved.mean.clone(), saved.var.clone());
        let rg = self.rg(&[input, gamma, beta]);
        let v = self.push(
            value,
            Op::BatchNormTrain {
                input,
                gamma,
                beta,
                saved,
            },
            rg,
        );
        Ok((v, mean, var))
    }

    pub fn batch_norm_infer(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let x = self.value(input);
        let ones = Tensor::full(&[mean.len()], 1.0);
        let zeros = Tensor::zeros(&[mean.len()]);
        let normalized = kernels::batch_norm_infer(x, &ones, &zeros, mean, var, eps)?;
        let value = kernels::batch_norm_infer(x, self.value(gamma), self.value(beta), mean, var, eps)?;
        let inv_std = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let rg = self.rg(&[input, gamma, beta]);
        Ok(self.push(
            value,
            Op::BatchNormInfer {
                input,
                gamma,
                beta,
                normalized,
                inv_std,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let value = self.value(input).map(|x| x.max(0.0));
        let rg = self.rg(&[input]);
        self.push(value, Op::Relu { input }, rg)
    }

    /// Softmax over axis 1.
    pub fn softmax(&mut self, input: Var) -> Result<Var> {
        let value = kernels::softmax_forward(self.value(input))?;
        let rg = self.rg(&[input]);
        Ok(self.push(value, Op::Softmax { input }, rg))
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = kernels::concat_channels(self.value(a), self.value(b))?;
        let split = self.value(a).shape()[1];
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Concat { a, b, split }, rg))
    }

    /// `[N, C, d, H, W] → [N, d·C, 1, H, W]`.
    pub fn channel_fold(&mut self, input: Var) -> Result<Var> {
        let channels = self.value(input).dims5()?[1];
        let value = kernels::channel_fold(self.value(input))?;
        let rg = self.rg(&[input]);
        Ok(self.push(value, Op::ChannelFold { input, channels }, rg))
    }

    fn same_shape(&self, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape(format!(
                "elementwise operands {:?} and {:?} differ",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let mut value = self.value(a).clone();
        value
            .data_mut()
            .iter_mut()
            .zip(self.nodes[b.0].value.data())
            .for_each(|(x, y)| *x += y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let mut value = self.value(a).clone();
        value
            .data_mut()
            .iter_mut()
            .zip(self.nodes[b.0].value.data())
            .for_each(|(x, y)| *x *= y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let value = self.value(input).map(|x| x * factor);
        let rg = self.rg(&[input]);
        self.push(value, Op::Scale { input, factor }, rg)
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let value = Tensor::scalar(self.value(input).sum());
        let rg = self.rg(&[input]);
        self.push(value, Op::Sum { input }, rg)
    }

    /// Class-averaged soft Dice loss against a constant one-hot target.
    pub fn soft_dice_loss(&mut self, probs: Var, target: Rc<Tensor>, eps: f64) -> Result<Var> {
        let value = kernels::soft_dice_forward(self.value(probs), &target, eps)?;
        let rg = self.rg(&[probs]);
        Ok(self.push(Tensor::scalar(value), Op::SoftDice { probs, target, eps }, rg))
    }

    /// Mean categorical cross-entropy against a constant one-hot target.
    pub fn cross_entropy(&mut self, probs: Var, target: Rc<Tensor>) -> Result<Var> {
        let value = kernels::cross_entropy_forward(self.value(probs), &target)?;
        let rg = self.rg(&[probs]);
        Ok(self.push(Tensor::scalar(value), Op::CrossEntropy { probs, target }, rg))
    }

    /// Reverse sweep from a scalar node. Leaf gradients are retained;
    /// intermediate gradients are released once propagated.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_value = self.value(loss);
        if !loss_value.is_scalar() {
            return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(loss_value.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (var, grad) in self.propagate(node, &g)? {
                accumulate(&mut grads[var.0], grad);
            }
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, node: &Node, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let need = |v: Var| self.nodes[v.0].requires_grad;
        let mut out = Vec::with_capacity(3);
        match &node.op {
            Op::Leaf => {}
            Op::Conv {
                input,
                kernel,
                bias,
                geom,
            } => {
                let (dx, dk, db) = kernels::conv_backward(
                    self.value(*input),
                    self.value(*kernel),
                    geom,
                    g,
                    need(*input),
                )?;
                if let Some(dx) = dx {
                    out.push((*input, dx));
                }
                if need(*kernel) {
                    out.push((*kernel, dk));
                }
                if need(*bias) {
                    out.push((*bias, db));
                }
            }
            Op::TransposedConv {
                input,
                kernel,
                bias,
                geom,
            } => {
                let (dx, dk, db) = kernels::transposed_conv_backward(
                    self.value(*input),
                    self.value(*kernel),
                    geom,
                    g,
                    need(*input),
                )?;
                if let Some(dx) = dx {
                    out.push((*input, dx));
                }
                if need(*kernel) {
                    out.push((*kernel, dk));
                }
                if need(*bias) {
                    out.push((*bias, db));
                }
            }
            Op::MaxPool { input, indices } => {
                if need(*input) {
                    out.push((*input, kernels::maxpool_backward(indices, g)?));
                }
            }
            Op::Unpool { input, indices } => {
                if need(*input) {
                    let shape = self.value(*input).shape();
                    out.push((*input, kernels::unpool_backward(indices, g, shape)?));
                }
            }
            Op::BatchNormTrain {
                input,
                gamma,
                beta,
                saved,
            } => {
                let (dx, dg, db) = kernels::batch_norm_train_backward(saved, self.value(*gamma), g)?;
                if need(*input) {
                    out.push((*input, dx));
                }
                if need(*gamma) {
                    out.push((*gamma, dg));
                }
                if need(*beta) {
                    out.push((*beta, db));
                }
            }
            Op::BatchNormInfer {
                input,
                gamma,
                beta,
                normalized,
                inv_std,
            } => {
                let s = g.shape();
                let (c, plane) = (s[1], s[2..].iter().product::<usize>());
                let gam = self.value(*gamma).data();
                let mut dx = g.clone();
                let mut dg = vec![0.0; c];
                let mut db = vec![0.0; c];
                for (j, chunk) in dx.data_mut().chunks_mut(plane).enumerate() {
                    let ch = j % c;
                    let off = j * plane;
                    for (k, v) in chunk.iter_mut().enumerate() {
                        dg[ch] += *v * normalized.data()[off + k];
                        db[ch] += *v;
                        *v *= gam[ch] * inv_std[ch];
                    }
                }
                if need(*input) {
                    out.push((*input, dx));
                }
                if need(*gamma) {
                    out.push((*gamma, Tensor::new(vec![c], dg)?));
                }
                if need(*beta) {
                    out.push((*beta, Tensor::new(vec![c], db)?));
                }
            }
            Op::Relu { input } => {
                let mut dx = g.clone();
                dx.data_mut()
                    .iter_mut()
                    .zip(node.value.data())
                    .for_each(|(d, &y)| {
                        if y <= 0.0 {
                            *d = 0.0
                        }
                    });
                out.push((*input, dx));
            }
            Op::Softmax { input } => {
                out.push((*input, kernels::softmax_backward(&node.value, g)?));
            }
            Op::Concat { a, b, split } => {
                let (ga, gb) = kernels::split_channels(g, *split)?;
                if need(*a) {
                    out.push((*a, ga));
                }
                if need(*b) {
                    out.push((*b, gb));
                }
            }
            Op::ChannelFold { input, channels } => {
                let unfolded = kernels::channel_unfold(g, *channels)?;
                out.push((*input, unfolded));
            }
            Op::Add { a, b } => {
                if need(*a) {
                    out.push((*a, g.clone()));
                }
                if need(*b) {
                    out.push((*b, g.clone()));
                }
            }
            Op::Mul { a, b } => {
                let prod = |other: Var| {
                    let mut d = g.clone();
                    d.data_mut()
                        .iter_mut()
                        .zip(self.value(other).data())
                        .for_each(|(x, y)| *x *= y);
                    d
                };
                if need(*a) {
                    out.push((*a, prod(*b)));
                }
                if need(*b) {
                    out.push((*b, prod(*a)));
                }
            }
            Op::Scale { input, factor } => {
                out.push((*input, g.map(|x| x * factor)));
            }
            Op::Sum { input } => {
                out.push((*input, Tensor::full(self.value(*input).shape(), g.data()[0])));
            }
            Op::SoftDice { probs, target, eps } => {
                let d = kernels::soft_dice_backward(self.value(*probs), target, *eps, g.data()[0])?;
                out.push((*probs, d));
            }
            Op::CrossEntropy { probs, target } => {
                let d = kernels::cross_entropy_backward(self.value(*probs), target, g.data()[0])?;
                out.push((*probs, d));
            }
        }
        Ok(out.into_iter().filter(|(v, _)| need(*v)).collect())
    }
}
