//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records each operation as it is evaluated. Nodes are appended
//! in evaluation order, so the tape is its own topological order and
//! [`Graph::backward`] walks it in reverse.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::ops::{self, BatchMoments, BatchNormCache};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch-norm evaluation mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
        stride: usize,
    },
    ConvTranspose2d {
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
    },
    MaxPool {
        input: NodeId,
        argmax: Vec<u32>,
    },
    BatchNorm {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        cache: BatchNormCache<T>,
    },
    Relu(NodeId),
    Sigmoid(NodeId),
    CenterCrop {
        input: NodeId,
        gamma: usize,
    },
    Upsample {
        input: NodeId,
        gamma: usize,
    },
    Concat(Vec<NodeId>),
    Bce {
        logits: NodeId,
        target: NodeId,
    },
    L2(Vec<NodeId>),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    Sum(NodeId),
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d {
                input,
                kernel,
                bias,
                ..
            }
            | Op::ConvTranspose2d {
                input,
                kernel,
                bias,
            } => vec![*input, *kernel, *bias],
            Op::BatchNorm {
                input, gamma, beta, ..
            } => vec![*input, *gamma, *beta],
            Op::MaxPool { input, .. }
            | Op::CenterCrop { input, .. }
            | Op::Upsample { input, .. } => vec![*input],
            Op::Relu(a) | Op::Sigmoid(a) | Op::Scale(a, _) | Op::Sum(a) => vec![*a],
            Op::Concat(v) | Op::L2(v) => v.clone(),
            Op::Bce { logits, target } => vec![*logits, *target],
            Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation plus its named parameter leaves.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: Vec<(String, NodeId)>,
    param_index: HashMap<String, NodeId>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: Vec::new(),
            param_index: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> NodeId {
        let requires_grad = op
            .inputs()
            .iter()
            .any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A leaf that does not receive gradients (data, targets, constants).
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Registers a named trainable parameter. Each name may be bound once.
    pub fn parameter(&mut self, name: &str, value: Tensor<T>) -> Result<NodeId> {
        if self.param_index.contains_key(name) {
            return Err(Error::invalid(
                "graph",
                format!("parameter '{name}' bound twice"),
            ));
        }
        let id = self.leaf(value, true);
        self.params.push((name.to_owned(), id));
        self.param_index.insert(name.to_owned(), id);
        Ok(id)
    }

    pub fn parameters(&self) -> &[(String, NodeId)] {
        &self.params
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> Shape {
        self.nodes[id.0].value.shape()
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
        stride: usize,
    ) -> Result<NodeId> {
        let v = ops::conv2d(self.value(input), self.value(kernel), self.value(bias), stride)?;
        Ok(self.push(
            v,
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
            },
        ))
    }

    pub fn conv_transpose2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
    ) -> Result<NodeId> {
        let v = ops::conv_transpose2d(self.value(input), self.value(kernel), self.value(bias))?;
        Ok(self.push(
            v,
            Op::ConvTranspose2d {
                input,
                kernel,
                bias,
            },
        ))
    }

    pub fn maxpool2d(&mut self, input: NodeId) -> Result<NodeId> {
        let (v, argmax) = ops::maxpool2d(self.value(input))?;
        Ok(self.push(v, Op::MaxPool { input, argmax }))
    }

    /// Train-mode batch norm; returns the batch moments so the caller can
    /// update its running averages.
    pub fn batchnorm_train(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: T,
    ) -> Result<(NodeId, BatchMoments<T>)> {
        let (v, cache, moments) =
            ops::batchnorm_train(self.value(input), self.value(gamma), self.value(beta), eps)?;
        let id = self.push(
            v,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                cache,
            },
        );
        Ok((id, moments))
    }

    pub fn batchnorm_infer(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &[T],
        running_var: &[T],
        eps: T,
    ) -> Result<NodeId> {
        let (v, cache) = ops::batchnorm_infer(
            self.value(input),
            self.value(gamma),
            self.value(beta),
            running_mean,
            running_var,
            eps,
        )?;
        Ok(self.push(
            v,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                cache,
            },
        ))
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let v = ops::relu(self.value(input));
        self.push(v, Op::Relu(input))
    }

    pub fn sigmoid(&mut self, input: NodeId) -> NodeId {
        let v = ops::sigmoid(self.value(input));
        self.push(v, Op::Sigmoid(input))
    }

    pub fn center_crop(&mut self, input: NodeId, gamma: usize) -> Result<NodeId> {
        let v = ops::center_crop(self.value(input), gamma)?;
        Ok(self.push(v, Op::CenterCrop { input, gamma }))
    }

    pub fn bilinear_upsample(&mut self, input: NodeId, gamma: usize) -> Result<NodeId> {
        let v = ops::bilinear_upsample(self.value(input), gamma)?;
        Ok(self.push(v, Op::Upsample { input, gamma }))
    }

    pub fn concat_channels(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        let vals: Vec<&Tensor<T>> = inputs.iter().map(|&i| self.value(i)).collect();
        let v = ops::concat_channels(&vals)?;
        Ok(self.push(v, Op::Concat(inputs.to_vec())))
    }

    /// Scalar mean binary cross entropy of `logits` against 0/1 `target`.
    pub fn bce_loss(&mut self, logits: NodeId, target: NodeId) -> Result<NodeId> {
        let loss = ops::bce_loss(self.value(logits), self.value(target))?;
        Ok(self.push(Tensor::scalar(loss), Op::Bce { logits, target }))
    }

    /// Scalar sum of squares over the given tensors.
    pub fn l2_penalty(&mut self, params: &[NodeId]) -> NodeId {
        let total: T = params.iter().map(|&p| self.value(p).sum_sq()).sum();
        self.push(Tensor::scalar(total), Op::L2(params.to_vec()))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(
                "add",
                format!("{} vs {}", va.shape(), vb.shape()),
            ));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let v = Tensor::from_vec(va.shape(), data)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(
                "mul",
                format!("{} vs {}", va.shape(), vb.shape()),
            ));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let v = Tensor::from_vec(va.shape(), data)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, factor: T) -> NodeId {
        let v = self.value(a).map(|x| x * factor);
        self.push(v, Op::Scale(a, factor))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        let shape = self.shape(loss);
        if !shape.is_scalar() {
            return Err(Error::NotScalar(shape));
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.op.inputs().iter().any(|inp| inp.0 >= i) {
                return Err(Error::GraphCycle { node: i });
            }
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            let contributions = self.local_grads(node, &g)?;
            grads[i] = Some(g);
            for (target, delta) in contributions {
                if !self.nodes[target.0].requires_grad {
                    continue;
                }
                match &mut grads[target.0] {
                    Some(acc) => acc.add_scaled(&delta, T::one()),
                    slot @ None => *slot = Some(delta),
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn local_grads(&self, node: &Node<T>, g: &Tensor<T>) -> Result<Vec<(NodeId, Tensor<T>)>> {
        let val = |id: NodeId| &self.nodes[id.0].value;
        Ok(match &node.op {
            Op::Leaf => vec![],
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
            } => {
                let (di, dk, db) = ops::conv2d_backward(val(*input), val(*kernel), *stride, g)?;
                vec![(*input, di), (*kernel, dk), (*bias, db)]
            }
            Op::ConvTranspose2d {
                input,
                kernel,
                bias,
            } => {
                let (di, dk, db) = ops::conv_transpose2d_backward(val(*input), val(*kernel), g)?;
                vec![(*input, di), (*kernel, dk), (*bias, db)]
            }
            Op::MaxPool { input, argmax } => {
                vec![(
                    *input,
                    ops::maxpool2d_backward(val(*input).shape(), argmax, g),
                )]
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                cache,
            } => {
                let (di, dg, db) = ops::batchnorm_backward(cache, val(*gamma), g);
                let dg = dg.reshape(val(*gamma).shape())?;
                let db = db.reshape(val(*beta).shape())?;
                vec![(*input, di), (*gamma, dg), (*beta, db)]
            }
            Op::Relu(a) => vec![(*a, ops::relu_backward(val(*a), g))],
            Op::Sigmoid(a) => vec![(*a, ops::sigmoid_backward(&node.value, g))],
            Op::CenterCrop { input, gamma } => vec![(
                *input,
                ops::center_crop_backward(val(*input).shape(), *gamma, g),
            )],
            Op::Upsample { input, gamma } => vec![(
                *input,
                ops::bilinear_upsample_backward(val(*input).shape(), *gamma, g),
            )],
            Op::Concat(inputs) => {
                let shapes: Vec<Shape> = inputs.iter().map(|&i| val(i).shape()).collect();
                inputs
                    .iter()
                    .copied()
                    .zip(ops::concat_channels_backward(&shapes, g))
                    .collect()
            }
            Op::Bce { logits, target } => vec![(
                *logits,
                ops::bce_loss_backward(val(*logits), val(*target), g.item()),
            )],
            Op::L2(params) => {
                let up = g.item();
                params
                    .iter()
                    .map(|&p| (p, val(p).map(|w| (w + w) * up)))
                    .collect()
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Mul(a, b) => {
                let prod = |x: &Tensor<T>| {
                    let d = x.data().iter().zip(g.data()).map(|(&u, &v)| u * v).collect();
                    Tensor::from_vec(x.shape(), d).expect("mul grad shape")
                };
                vec![(*a, prod(val(*b))), (*b, prod(val(*a)))]
            }
            Op::Scale(a, f) => vec![(*a, g.map(|v| v * *f))],
            Op::Sum(a) => vec![(*a, Tensor::full(val(*a).shape(), g.item()))],
        })
    }
}

/// Result of a backward sweep.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to a node; `None` when the node does not influence
    /// the loss or does not require gradients.
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient with respect to a node, zero-filled when it did not participate.
    pub fn get_or_zeros(&self, id: NodeId, shape: Shape) -> Tensor<T> {
        self.get(id).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}
