use std::collections::BTreeMap;

use crate::kernels::{self, Upsample};
use crate::{Element, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    /// Constant or input; never receives a gradient.
    Constant,
    /// Differentiable leaf, optionally tagged with a parameter name.
    Leaf {
        name: Option<String>,
    },
    Conv3d {
        input: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        padding: usize,
    },
    Dense {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    Relu(NodeId),
    MaxPool3d {
        input: NodeId,
        argmax: Vec<usize>,
    },
    Upsample3d {
        input: NodeId,
        factor: usize,
        mode: Upsample,
    },
    SpatialMean(NodeId),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    Sum(NodeId),
    Mean(NodeId),
    Reshape(NodeId),
    Concat {
        inputs: Vec<NodeId>,
        axis: usize,
    },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Constant | Op::Leaf { .. } => vec![],
            Op::Conv3d {
                input, kernel, bias, ..
            } => {
                let mut v = vec![*input, *kernel];
                v.extend(bias);
                v
            }
            Op::Dense { input, weight, bias } => vec![*input, *weight, *bias],
            Op::Relu(a)
            | Op::MaxPool3d { input: a, .. }
            | Op::Upsample3d { input: a, .. }
            | Op::SpatialMean(a)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::Scale(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Reshape(a) => vec![*a],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Concat { inputs, .. } => inputs.clone(),
        }
    }
}

#[derive(Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only tape of tensor operations. Node ids are issued in creation
/// order, so every node's inputs precede it and the tape itself is a
/// topological order.
#[derive(Clone, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar with respect to the differentiable leaves of a graph.
#[derive(Clone)]
pub struct Gradients<T> {
    by_node: BTreeMap<NodeId, Tensor<T>>,
    by_name: BTreeMap<String, NodeId>,
}

impl<T: Element> std::fmt::Debug for Graph<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Graph").field("nodes", &self.nodes.len()).finish()
    }
}

impl<T: Element> std::fmt::Debug for Gradients<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_map()
            .entries(self.by_name.iter().map(|(k, id)| (k, self.by_node.get(id))))
            .finish()
    }
}

impl<T: Element> Gradients<T> {
    /// Gradient of a differentiable leaf; zeros when the loss does not reach it.
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.by_node.get(&id)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.by_name.get(name).and_then(|id| self.by_node.get(id))
    }

    /// Named parameter gradients, ordered by name.
    pub fn into_named(mut self) -> BTreeMap<String, Tensor<T>> {
        self.by_name
            .into_iter()
            .filter_map(|(name, id)| self.by_node.remove(&id).map(|g| (name, g)))
            .collect()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> NodeId {
        let requires_grad = match &op {
            Op::Constant => false,
            Op::Leaf { .. } => true,
            other => other.inputs().iter().any(|i| self.nodes[i.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A value that never receives a gradient (inputs, frozen parameters).
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Constant)
    }

    /// An anonymous differentiable leaf.
    pub fn variable(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf { name: None })
    }

    /// A named differentiable leaf; its gradient is reported under `name`.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor<T>) -> NodeId {
        self.push(
            value,
            Op::Leaf {
                name: Some(name.into()),
            },
        )
    }

    pub fn conv3d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let out = kernels::conv3d(
            self.value(input),
            self.value(kernel),
            bias.map(|b| self.value(b)),
            stride,
            padding,
        )?;
        Ok(self.push(
            out,
            Op::Conv3d {
                input,
                kernel,
                bias,
                stride,
                padding,
            },
        ))
    }

    pub fn dense(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let out = kernels::dense(self.value(input), self.value(weight), self.value(bias))?;
        Ok(self.push(out, Op::Dense { input, weight, bias }))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(|v| v.max(T::zero()));
        self.push(out, Op::Relu(a))
    }

    pub fn max_pool3d(&mut self, input: NodeId, size: usize) -> Result<NodeId> {
        let (out, argmax) = kernels::max_pool3d(self.value(input), size)?;
        Ok(self.push(out, Op::MaxPool3d { input, argmax }))
    }

    pub fn upsample3d(&mut self, input: NodeId, factor: usize, mode: Upsample) -> Result<NodeId> {
        let out = kernels::upsample3d(self.value(input), factor, mode)?;
        Ok(self.push(out, Op::Upsample3d { input, factor, mode }))
    }

    pub fn spatial_mean(&mut self, input: NodeId) -> Result<NodeId> {
        let out = kernels::spatial_mean(self.value(input))?;
        Ok(self.push(out, Op::SpatialMean(input)))
    }

    pub fn softmax(&mut self, input: NodeId) -> Result<NodeId> {
        let out = kernels::softmax(self.value(input))?;
        Ok(self.push(out, Op::Softmax(input)))
    }

    pub fn log_softmax(&mut self, input: NodeId) -> Result<NodeId> {
        let out = kernels::log_softmax(self.value(input))?;
        Ok(self.push(out, Op::LogSoftmax(input)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.value(a).sub(self.value(b))?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.value(a).mul(self.value(b))?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, s: T) -> NodeId {
        let out = self.value(a).scale(s);
        self.push(out, Op::Scale(a, s))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a))
    }

    /// Mean of all elements as a scalar.
    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let out = Tensor::scalar(self.value(a).mean());
        self.push(out, Op::Mean(a))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a)))
    }

    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId> {
        let parts: Vec<&Tensor<T>> = inputs.iter().map(|&i| self.value(i)).collect();
        let out = kernels::concat(&parts, axis)?;
        Ok(self.push(
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    /// Reverse sweep from a scalar node. Every recorded node is visited at most
    /// once, in reverse creation order; gradients of interior nodes are dropped
    /// as soon as they have been propagated.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        let loss_value = self.value(loss);
        if loss_value.len() != 1 {
            return Err(TensorError::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::ones(loss_value.shape()));
        let mut by_node = BTreeMap::new();

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf { .. } = node.op {
                let g = grads[idx].take().unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                by_node.insert(NodeId(idx), g);
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            for (input, dg) in self.local_grads(node, &g)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&dg)?,
                    slot => *slot = Some(dg),
                }
            }
        }

        // Leaves created after the loss node cannot influence it.
        for (idx, node) in self.nodes.iter().enumerate().skip(loss.0 + 1) {
            if let Op::Leaf { .. } = node.op {
                by_node.insert(NodeId(idx), Tensor::zeros(node.value.shape()));
            }
        }
        let by_name = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match &n.op {
                Op::Leaf { name: Some(name) } => Some((name.clone(), NodeId(i))),
                _ => None,
            })
            .collect();
        Ok(Gradients { by_node, by_name })
    }

    /// Vector-Jacobian products of one node for each of its inputs that
    /// requires a gradient.
    fn local_grads(&self, node: &Node<T>, g: &Tensor<T>) -> Result<Vec<(NodeId, Tensor<T>)>> {
        let needs = |id: NodeId| self.nodes[id.0].requires_grad;
        let v = |id: NodeId| &self.nodes[id.0].value;
        let mut out = Vec::new();
        match &node.op {
            Op::Constant | Op::Leaf { .. } => {}
            Op::Conv3d {
                input,
                kernel,
                bias,
                stride,
                padding,
            } => {
                let cg = kernels::conv3d_backward(
                    v(*input),
                    v(*kernel),
                    g,
                    *stride,
                    *padding,
                    needs(*input),
                    needs(*kernel),
                )?;
                out.extend(cg.input.map(|t| (*input, t)));
                out.extend(cg.kernel.map(|t| (*kernel, t)));
                if let Some(b) = bias {
                    out.push((*b, cg.bias));
                }
            }
            Op::Dense { input, weight, bias } => {
                let (di, dw, db) = kernels::dense_backward(v(*input), v(*weight), g)?;
                out.extend([(*input, di), (*weight, dw), (*bias, db)]);
            }
            Op::Relu(a) => {
                let d = v(*a).zip_map(g, "relu_backward", |x, gy| if x > T::zero() { gy } else { T::zero() })?;
                out.push((*a, d));
            }
            Op::MaxPool3d { input, argmax } => {
                out.push((*input, kernels::max_pool3d_backward(v(*input).shape(), argmax, g)));
            }
            Op::Upsample3d { input, factor, mode } => {
                out.push((
                    *input,
                    kernels::upsample3d_backward(v(*input).shape(), *factor, *mode, g)?,
                ));
            }
            Op::SpatialMean(a) => out.push((*a, kernels::spatial_mean_backward(v(*a).shape(), g))),
            Op::Softmax(a) => {
                let y = &node.value;
                let m = y.shape()[1];
                let mut d = Vec::with_capacity(y.len());
                for (yr, gr) in y.data().chunks_exact(m).zip(g.data().chunks_exact(m)) {
                    let dot = yr.iter().zip(gr).fold(T::zero(), |s, (&a, &b)| s + a * b);
                    d.extend(yr.iter().zip(gr).map(|(&yi, &gi)| yi * (gi - dot)));
                }
                out.push((*a, Tensor::from_parts(y.shape().to_vec(), d)));
            }
            Op::LogSoftmax(a) => {
                let y = &node.value;
                let m = y.shape()[1];
                let mut d = Vec::with_capacity(y.len());
                for (yr, gr) in y.data().chunks_exact(m).zip(g.data().chunks_exact(m)) {
                    let total = gr.iter().fold(T::zero(), |s, &b| s + b);
                    d.extend(yr.iter().zip(gr).map(|(&yi, &gi)| gi - yi.exp() * total));
                }
                out.push((*a, Tensor::from_parts(y.shape().to_vec(), d)));
            }
            Op::Add(a, b) => out.extend([(*a, g.clone()), (*b, g.clone())]),
            Op::Sub(a, b) => out.extend([(*a, g.clone()), (*b, g.scale(-T::one()))]),
            Op::Mul(a, b) => {
                if needs(*a) {
                    out.push((*a, g.mul(v(*b))?));
                }
                if needs(*b) {
                    out.push((*b, g.mul(v(*a))?));
                }
            }
            Op::Scale(a, s) => out.push((*a, g.scale(*s))),
            Op::Sum(a) => out.push((*a, Tensor::full(v(*a).shape(), g.item()?))),
            Op::Mean(a) => {
                let n = T::from_usize(v(*a).len().max(1)).unwrap();
                out.push((*a, Tensor::full(v(*a).shape(), g.item()? / n)));
            }
            Op::Reshape(a) => out.push((*a, g.reshape(v(*a).shape())?)),
            Op::Concat { inputs, axis } => {
                let shapes: Vec<Vec<usize>> = inputs.iter().map(|&i| v(i).shape().to_vec()).collect();
                out.extend(inputs.iter().copied().zip(kernels::concat_backward(&shapes, *axis, g)));
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut g = Graph::<f64>::new();
        let p = g.param("p", Tensor::from_fn(&[2, 3, 4], |i| i as f64 - 7.0));
        let s = g.sum(p);
        let grads = g.backward(s).unwrap();
        assert!(grads.param("p").unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn zero_scaled_loss_gives_zero_gradient() {
        let mut g = Graph::<f64>::new();
        let p = g.param("p", Tensor::from_fn(&[5], |i| i as f64));
        let sq = g.mul(p, p).unwrap();
        let s = g.sum(sq);
        let z = g.scale(s, 0.0);
        let grads = g.backward(z).unwrap();
        assert!(grads.param("p").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::<f64>::new();
        let p = g.param("p", Tensor::zeros(&[3]));
        assert!(matches!(g.backward(p), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn unreached_parameters_get_zero_gradients() {
        let mut g = Graph::<f64>::new();
        let p = g.param("used", Tensor::ones(&[2]));
        let _q = g.param("unused", Tensor::ones(&[3]));
        let s = g.sum(p);
        let late = g.param("late", Tensor::ones(&[1]));
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.param("unused").unwrap().data(), &[0.0; 3]);
        assert_eq!(grads.get(late).unwrap().data(), &[0.0]);
        let named = grads.into_named();
        assert_eq!(named.keys().collect::<Vec<_>>(), ["late", "unused", "used"]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let c = g.constant(Tensor::ones(&[2]));
        let p = g.variable(Tensor::ones(&[2]));
        let m = g.mul(c, p).unwrap();
        let s = g.sum(m);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(p).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn shared_input_accumulates() {
        let mut g = Graph::<f64>::new();
        let p = g.variable(Tensor::from_vec(vec![1], vec![3.0]).unwrap());
        let a = g.add(p, p).unwrap();
        let b = g.mul(a, p).unwrap(); // 2p^2
        let s = g.sum(b);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(p).unwrap().data(), &[12.0]);
    }
}
