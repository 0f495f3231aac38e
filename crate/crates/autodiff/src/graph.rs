use crate::error::{Error, Result};
use crate::ops::{self, PrimitiveKind};
use crate::tensor::Tensor;

/// Default bound applied to `exp` inputs.
pub const DEFAULT_EXP_CLAMP: f64 = 30.0;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Origin {
    Leaf,
    Constant,
    Op {
        kind: PrimitiveKind,
        inputs: Vec<NodeId>,
    },
}

#[derive(Debug)]
struct Node {
    origin: Origin,
    value: Tensor,
    requires_grad: bool,
}

/// Computation record: every primitive application in evaluation order.
///
/// Node ids are assigned sequentially, so inputs always precede the nodes
/// that consume them. `backward` borrows the record immutably and can be
/// called any number of times from different scalar nodes.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    exp_clamp: f64,
    clamped: usize,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::with_exp_clamp(DEFAULT_EXP_CLAMP)
    }

    pub fn with_exp_clamp(exp_clamp: f64) -> Self {
        Self {
            nodes: Vec::new(),
            exp_clamp,
            clamped: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of `exp` input entries that hit the clamp so far.
    pub fn clamp_events(&self) -> usize {
        self.clamped
    }

    fn push(&mut self, origin: Origin, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            origin,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A differentiable input; `backward` reports a gradient for it.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Origin::Leaf, value, true)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Origin::Constant, value, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn apply(&mut self, kind: PrimitiveKind, inputs: &[NodeId]) -> Result<NodeId> {
        if let Some(bad) = inputs.iter().find(|id| id.0 >= self.nodes.len()) {
            return Err(Error::UnknownNode(bad.0));
        }
        let values: Vec<&Tensor> = inputs.iter().map(|id| &self.nodes[id.0].value).collect();
        let out = ops::forward(&kind, &values, self.exp_clamp)?;
        if kind == PrimitiveKind::Exp {
            let c = self.exp_clamp;
            self.clamped += values[0].data().iter().filter(|v| v.abs() > c).count();
        }
        let requires_grad = inputs.iter().any(|id| self.nodes[id.0].requires_grad);
        Ok(self.push(
            Origin::Op {
                kind,
                inputs: inputs.to_vec(),
            },
            out,
            requires_grad,
        ))
    }

    /// Reverse-mode accumulation from a single-element node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let node = self.nodes.get(loss.0).ok_or(Error::UnknownNode(loss.0))?;
        if !node.value.is_scalar() {
            return Err(Error::NonScalarLoss(node.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(node.value.shape(), 1.0));
        let mut leaf_grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.origin {
                Origin::Leaf => leaf_grads[id] = Some(g),
                Origin::Constant => {}
                Origin::Op {
                    kind: PrimitiveKind::Slice { axis, start, len },
                    inputs,
                } => {
                    // scatter into the input's accumulator; a dense
                    // zero-padded copy per slice is quadratic for
                    // step-by-step consumers
                    let input = &self.nodes[inputs[0].0];
                    if !input.requires_grad {
                        continue;
                    }
                    let acc = grads[inputs[0].0].get_or_insert_with(|| Tensor::zeros(input.value.shape()));
                    ops::slice_accumulate(acc.data_mut(), input.value.shape(), &g, *axis, *start, *len);
                }
                Origin::Op { kind, inputs } => {
                    let need: Vec<bool> = inputs
                        .iter()
                        .map(|i| self.nodes[i.0].requires_grad)
                        .collect();
                    if !need.iter().any(|&n| n) {
                        continue;
                    }
                    let values: Vec<&Tensor> =
                        inputs.iter().map(|i| &self.nodes[i.0].value).collect();
                    let input_grads =
                        ops::vjp(kind, &values, &node.value, &g, &need, self.exp_clamp);
                    for (input, ig) in inputs.iter().zip(input_grads) {
                        let Some(ig) = ig else { continue };
                        match &mut grads[input.0] {
                            Some(acc) => acc
                                .data_mut()
                                .iter_mut()
                                .zip(ig.data())
                                .for_each(|(a, b)| *a += b),
                            slot @ None => *slot = Some(ig),
                        }
                    }
                }
            }
        }
        Ok(Gradients { grads: leaf_grads })
    }

    // -- convenience wrappers -------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(PrimitiveKind::MatMul, &[a, b])
    }
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(PrimitiveKind::Add, &[a, b])
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(PrimitiveKind::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(PrimitiveKind::Mul, &[a, b])
    }
    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(PrimitiveKind::Div, &[a, b])
    }
    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(PrimitiveKind::Exp, &[x])
    }
    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(PrimitiveKind::Log, &[x])
    }
    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(PrimitiveKind::Sigmoid, &[x])
    }
    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(PrimitiveKind::Tanh, &[x])
    }
    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(PrimitiveKind::Relu, &[x])
    }
    pub fn softplus(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(PrimitiveKind::Softplus, &[x])
    }
    pub fn abs(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(PrimitiveKind::Abs, &[x])
    }
    pub fn sqrt(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(PrimitiveKind::Sqrt, &[x])
    }
    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        self.apply(PrimitiveKind::Scale(c), &[x])
    }
    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        self.apply(PrimitiveKind::AddScalar(c), &[x])
    }
    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        self.apply(PrimitiveKind::Softmax { axis }, &[x])
    }
    pub fn sum(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        self.apply(PrimitiveKind::Sum { axis }, &[x])
    }
    pub fn mean(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        self.apply(PrimitiveKind::Mean { axis }, &[x])
    }
    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(PrimitiveKind::SumAll, &[x])
    }
    pub fn concat(&mut self, xs: &[NodeId], axis: usize) -> Result<NodeId> {
        self.apply(PrimitiveKind::Concat { axis }, xs)
    }
    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.apply(
            PrimitiveKind::Reshape {
                shape: shape.to_vec(),
            },
            &[x],
        )
    }
    pub fn transpose(&mut self, x: NodeId, a: usize, b: usize) -> Result<NodeId> {
        self.apply(PrimitiveKind::Transpose { a, b }, &[x])
    }
    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        self.apply(PrimitiveKind::Slice { axis, start, len }, &[x])
    }
    pub fn square(&mut self, x: NodeId) -> Result<NodeId> {
        self.mul(x, x)
    }

    /// Splits a flat vector node into consecutive pieces of the given shapes.
    pub fn split_flat(&mut self, flat: NodeId, shapes: &[Vec<usize>]) -> Result<Vec<NodeId>> {
        let total: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
        let have = self.value(flat).len();
        if total != have {
            return Err(Error::ShapeMismatch {
                op: "split_flat",
                lhs: vec![have],
                rhs: vec![total],
            });
        }
        let flat = self.reshape(flat, &[have])?;
        let mut start = 0;
        let mut out = Vec::with_capacity(shapes.len());
        for shape in shapes {
            let n: usize = shape.iter().product();
            let piece = self.slice(flat, 0, start, n)?;
            out.push(self.reshape(piece, shape)?);
            start += n;
        }
        Ok(out)
    }
}

/// Gradients of a scalar node with respect to every reachable leaf.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `leaf`, or `None` when the loss does not depend on it.
    pub fn get(&self, leaf: NodeId) -> Option<&Tensor> {
        self.grads.get(leaf.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `leaf`, with zeros substituted when the loss does not
    /// depend on it.
    pub fn get_or_zeros(&self, leaf: NodeId, shape: &[usize]) -> Tensor {
        self.get(leaf).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}
