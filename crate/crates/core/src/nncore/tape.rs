//! Reverse-mode autodiff over a linear record of operations.

use super::ops::{self, BnCache, Padding};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: NodeId,
        k: NodeId,
        stride: usize,
        padding: Padding,
    },
    Depthwise {
        x: NodeId,
        k: NodeId,
        stride: usize,
        padding: Padding,
    },
    BatchNormTrain {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        cache: BnCache,
    },
    BatchNormInfer {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<f64>,
        var: Vec<f64>,
    },
    Relu6 {
        x: NodeId,
    },
    MaskColumns {
        x: NodeId,
        valid: Vec<usize>,
    },
    MeanAxis {
        x: NodeId,
        axis: usize,
    },
    MaskedMeanLast {
        x: NodeId,
        valid: Vec<usize>,
    },
    Conv1d {
        x: NodeId,
        k: NodeId,
        bias: Option<NodeId>,
    },
    SoftmaxCrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Tensor,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a forward pass so [`Tape::backward`] can differentiate it.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients indexed by [`NodeId`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Probabilities computed by a softmax-cross-entropy node.
    pub fn probs(&self, id: NodeId) -> Option<&Tensor> {
        match &self.nodes.get(id.0)?.op {
            Op::SoftmaxCrossEntropy { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Batch statistics computed by a training-mode batch-norm node.
    pub fn bn_cache(&self, id: NodeId) -> Option<&BnCache> {
        match &self.nodes.get(id.0)?.op {
            Op::BatchNormTrain { cache, .. } => Some(cache),
            _ => None,
        }
    }

    /// Input data (`requires_grad = false`) or a trainable parameter.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    pub fn conv2d(&mut self, x: NodeId, k: NodeId, stride: usize, padding: Padding) -> Result<NodeId> {
        let y = ops::conv2d(self.value(x), self.value(k), stride, padding)?;
        let rg = self.needs(&[x, k]);
        Ok(self.push(y, Op::Conv2d { x, k, stride, padding }, rg))
    }

    pub fn depthwise_conv2d(
        &mut self,
        x: NodeId,
        k: NodeId,
        stride: usize,
        padding: Padding,
    ) -> Result<NodeId> {
        let y = ops::depthwise_conv2d(self.value(x), self.value(k), stride, padding)?;
        let rg = self.needs(&[x, k]);
        Ok(self.push(y, Op::Depthwise { x, k, stride, padding }, rg))
    }

    pub fn batchnorm_train(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let (y, cache) = ops::batchnorm_train(self.value(x), self.value(gamma), self.value(beta))?;
        let rg = self.needs(&[x, gamma, beta]);
        Ok(self.push(y, Op::BatchNormTrain { x, gamma, beta, cache }, rg))
    }

    pub fn batchnorm_infer(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: &[f64],
        var: &[f64],
    ) -> Result<NodeId> {
        let y = ops::batchnorm_infer(self.value(x), self.value(gamma), self.value(beta), mean, var)?;
        let rg = self.needs(&[x, gamma, beta]);
        let op = Op::BatchNormInfer {
            x,
            gamma,
            beta,
            mean: mean.to_vec(),
            var: var.to_vec(),
        };
        Ok(self.push(y, op, rg))
    }

    pub fn relu6(&mut self, x: NodeId) -> NodeId {
        let y = ops::relu6(self.value(x));
        let rg = self.needs(&[x]);
        self.push(y, Op::Relu6 { x }, rg)
    }

    pub fn mask_columns(&mut self, x: NodeId, valid: &[usize]) -> Result<NodeId> {
        let y = ops::mask_columns(self.value(x), valid)?;
        let rg = self.needs(&[x]);
        Ok(self.push(y, Op::MaskColumns { x, valid: valid.to_vec() }, rg))
    }

    pub fn mean_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let y = ops::gap_over_axis(self.value(x), axis)?;
        let rg = self.needs(&[x]);
        Ok(self.push(y, Op::MeanAxis { x, axis }, rg))
    }

    pub fn masked_mean_last(&mut self, x: NodeId, valid: &[usize]) -> Result<NodeId> {
        let y = ops::masked_mean_last(self.value(x), valid)?;
        let rg = self.needs(&[x]);
        Ok(self.push(y, Op::MaskedMeanLast { x, valid: valid.to_vec() }, rg))
    }

    pub fn conv1d(&mut self, x: NodeId, k: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
        let y = ops::conv1d(self.value(x), self.value(k), bias.map(|b| self.value(b)))?;
        let mut ids = vec![x, k];
        ids.extend(bias);
        let rg = self.needs(&ids);
        Ok(self.push(y, Op::Conv1d { x, k, bias }, rg))
    }

    /// Mean cross-entropy of row-wise softmax; the node value is a scalar.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let (loss, probs) = ops::softmax_cross_entropy(self.value(logits), labels)?;
        let rg = self.needs(&[logits]);
        let op = Op::SoftmaxCrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.push(Tensor::scalar(loss), op, rg))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let Some(node) = self.nodes.get(loss.0) else {
            return Err(Error::State(
                "backward called on a node that was never recorded; run forward first".into(),
            ));
        };
        if node.value.numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar output, got {:?}",
                node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(node.value.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let contributions = self.local_backward(&node.op, &dy)?;
            grads[idx] = Some(dy);
            for (target, g) in contributions {
                if !self.nodes[target.0].requires_grad {
                    continue;
                }
                match &mut grads[target.0] {
                    Some(acc) => acc.add_assign(&g)?,
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn local_backward(&self, op: &Op, dy: &Tensor) -> Result<Vec<(NodeId, Tensor)>> {
        let mut out = Vec::new();
        match op {
            Op::Leaf => {}
            &Op::Conv2d { x, k, stride, padding } => {
                let (dx, dk) =
                    ops::conv2d_backward(self.value(x), self.value(k), stride, padding, dy, self.rg(x))?;
                out.push((k, dk));
                out.extend(dx.map(|d| (x, d)));
            }
            &Op::Depthwise { x, k, stride, padding } => {
                let (dx, dk) = ops::depthwise_conv2d_backward(
                    self.value(x),
                    self.value(k),
                    stride,
                    padding,
                    dy,
                    self.rg(x),
                )?;
                out.push((k, dk));
                out.extend(dx.map(|d| (x, d)));
            }
            Op::BatchNormTrain { x, gamma, beta, cache } => {
                let (dx, dg, db) = ops::batchnorm_train_backward(dy, self.value(*gamma), cache)?;
                out.extend([(*x, dx), (*gamma, dg), (*beta, db)]);
            }
            Op::BatchNormInfer { x, gamma, beta, mean, var } => {
                let (dx, dg, db) =
                    ops::batchnorm_infer_backward(self.value(*x), self.value(*gamma), mean, var, dy)?;
                out.extend([(*x, dx), (*gamma, dg), (*beta, db)]);
            }
            &Op::Relu6 { x } => out.push((x, ops::relu6_backward(self.value(x), dy)?)),
            Op::MaskColumns { x, valid } => out.push((*x, ops::mask_columns(dy, valid)?)),
            &Op::MeanAxis { x, axis } => {
                out.push((x, ops::gap_over_axis_backward(self.value(x).shape(), axis, dy)?))
            }
            Op::MaskedMeanLast { x, valid } => out.push((
                *x,
                ops::masked_mean_last_backward(self.value(*x).shape(), valid, dy)?,
            )),
            &Op::Conv1d { x, k, bias } => {
                let (dx, dk, db) = ops::conv1d_backward(
                    self.value(x),
                    self.value(k),
                    bias.map(|b| self.value(b)),
                    dy,
                    self.rg(x),
                )?;
                out.push((k, dk));
                out.extend(dx.map(|d| (x, d)));
                if let (Some(b), Some(db)) = (bias, db) {
                    out.push((b, db));
                }
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let g = ops::softmax_cross_entropy_backward(probs, labels, dy.data()[0])?;
                out.push((*logits, g));
            }
        }
        Ok(out)
    }
}
