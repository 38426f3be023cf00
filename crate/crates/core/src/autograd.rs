//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] is rebuilt for every forward pass. Nodes are appended in
//! evaluation order, so an input always precedes its consumers and
//! [`Graph::backward`] can walk the node list back to front.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Every trainable tensor of a model, in declaration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.params.push(Param { name: name.into(), value });
        ParamId(self.params.len() - 1)
    }

    /// A `(out, in, kh, kw)` weight tensor drawn from `U(-b, b)` with `b = sqrt(6 / fan_in)`.
    pub fn add_he_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        dims: [usize; 4],
        rng: &mut R,
    ) -> Result<ParamId> {
        let shape = Shape::new(&dims)?;
        let fan_in = (dims[1] * dims[2] * dims[3]) as f32;
        let bound = (6.0 / fan_in).sqrt();
        let values = (0..shape.numel()).map(|_| rng.random_range(-bound..bound)).collect();
        Ok(self.add(name, Tensor::from_vec(shape, values)?))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Ids of all parameters in declaration order.
    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    /// Total scalar count across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.value.zero_grad();
        }
    }

    /// All parameter values concatenated in declaration order.
    pub fn flat_values(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.scalar_count());
        for p in &self.params {
            out.extend_from_slice(p.value.values());
        }
        out
    }

    /// Overwrites all parameter values from a flat buffer in declaration order.
    pub fn load_flat(&mut self, flat: &[f32]) -> Result<()> {
        if flat.len() != self.scalar_count() {
            return Err(Error::Shape(format!("{} values supplied for {} parameters", flat.len(), self.scalar_count())));
        }
        let mut offset = 0;
        for p in &mut self.params {
            let len = p.value.len();
            p.value.values_mut().copy_from_slice(&flat[offset..offset + len]);
            offset += len;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Conv { input: NodeId, weight: NodeId, bias: NodeId },
    Relu(NodeId),
    Concat(Vec<NodeId>),
    ToMesh { input: NodeId, pixels: Option<Vec<usize>> },
    AvgPool(NodeId),
    Dot { input: NodeId, coeffs: Vec<f32> },
    SoftmaxCe { logits: NodeId, dlogits: Vec<f32> },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
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

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the last backward pass's loss with respect to a node.
    pub fn grad(&self, id: NodeId) -> Option<&[f32]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Input, value)
    }

    pub fn param(&mut self, params: &ParamStore, id: ParamId) -> NodeId {
        let mut value = params.get(id).clone();
        value.clear_grad();
        self.push(Op::Param(id), value)
    }

    pub fn conv2d_same(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let dims = self.value(input).dims4();
        let wt = self.value(weight);
        if wt.shape().rank() != 4 {
            return Err(Error::Shape(format!("conv weight must be rank 4, got {}", wt.shape())));
        }
        let wdims = wt.dims4();
        ops::check_conv_shapes(dims, wdims)?;
        let b = self.value(bias);
        if b.len() != wdims[0] {
            return Err(Error::Shape(format!("bias of {} entries for {} outputs", b.len(), wdims[0])));
        }
        let out = ops::conv_forward(self.value(input).values(), dims, wt.values(), wdims, b.values());
        let value = Tensor::new(&[dims[0], wdims[0], dims[2], dims[3]], out)?;
        Ok(self.push(Op::Conv { input, weight, bias }, value))
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let value = ops::relu(self.value(input));
        self.push(Op::Relu(input), value)
    }

    pub fn concat_channels(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        let tensors: Vec<&Tensor> = inputs.iter().map(|&i| self.value(i)).collect();
        let value = ops::concat_channels(&tensors)?;
        Ok(self.push(Op::Concat(inputs.to_vec()), value))
    }

    /// Per-pixel feature meshes, see [`ops::to_mesh`].
    pub fn to_mesh(
        &mut self,
        input: NodeId,
        mesh_h: usize,
        mesh_w: usize,
        pixels: Option<Vec<usize>>,
    ) -> Result<NodeId> {
        let value = ops::to_mesh(self.value(input), mesh_h, mesh_w, pixels.as_deref())?;
        Ok(self.push(Op::ToMesh { input, pixels }, value))
    }

    pub fn global_avg_pool(&mut self, input: NodeId) -> NodeId {
        let value = ops::global_avg_pool(self.value(input));
        self.push(Op::AvgPool(input), value)
    }

    /// Scalar `Σ coeffs[i] * input[i]`; a convenient probe loss for gradient checks.
    pub fn dot(&mut self, input: NodeId, coeffs: Vec<f32>) -> Result<NodeId> {
        let x = self.value(input);
        if coeffs.len() != x.len() {
            return Err(Error::Shape(format!("{} coefficients for {} values", coeffs.len(), x.len())));
        }
        let s: f64 = x.values().iter().zip(&coeffs).map(|(&a, &b)| a as f64 * b as f64).sum();
        let value = Tensor::new(&[1, 1, 1], vec![s as f32])?;
        Ok(self.push(Op::Dot { input, coeffs }, value))
    }

    /// Scalar weighted softmax cross-entropy, see [`ops::softmax_cross_entropy`].
    pub fn softmax_cross_entropy(
        &mut self,
        logits: NodeId,
        labels: &[usize],
        weights: Option<&[f32]>,
    ) -> Result<NodeId> {
        let (loss, dlogits) = ops::softmax_cross_entropy(self.value(logits), labels, weights)?;
        let value = Tensor::new(&[1, 1, 1], vec![loss as f32])?;
        Ok(self.push(Op::SoftmaxCe { logits, dlogits }, value))
    }

    /// Propagates `∂loss/∂node` to every node and adds parameter gradients into `params`.
    pub fn backward(&mut self, loss: NodeId, params: &mut ParamStore) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::State("backward called before the forward pass produced a loss".into()));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::State(format!(
                "backward needs a scalar loss, node has shape {}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input => {}
                Op::Param(pid) => {
                    let target = params.get_mut(*pid).grad_mut();
                    for (t, &v) in target.iter_mut().zip(&g) {
                        *t += v;
                    }
                }
                Op::Conv { input, weight, bias } => {
                    let x = &self.nodes[input.0].value;
                    let wt = &self.nodes[weight.0].value;
                    let (dims, wdims) = (x.dims4(), wt.dims4());
                    let dx = ops::conv_backward_input(&g, dims, wt.values(), wdims);
                    let (dw, db) = ops::conv_backward_params(&g, x.values(), dims, wdims);
                    accumulate(&mut grads, *input, dx);
                    accumulate(&mut grads, *weight, dw);
                    accumulate(&mut grads, *bias, db);
                }
                Op::Relu(input) => {
                    let dx = ops::relu_backward(self.nodes[input.0].value.values(), &g);
                    accumulate(&mut grads, *input, dx);
                }
                Op::Concat(inputs) => {
                    let counts: Vec<usize> = inputs.iter().map(|&j| self.nodes[j.0].value.dims4()[1]).collect();
                    let parts = ops::split_channels(&g, node.value.dims4(), &counts);
                    for (&j, part) in inputs.iter().zip(parts) {
                        accumulate(&mut grads, j, part);
                    }
                }
                Op::ToMesh { input, pixels } => {
                    let src = &self.nodes[input.0].value;
                    let mut dx = vec![0.0f32; src.len()];
                    ops::scatter_mesh(&g, &mut dx, src.dims4(), pixels.as_deref());
                    accumulate(&mut grads, *input, dx);
                }
                Op::AvgPool(input) => {
                    let [_, _, h, w] = self.nodes[input.0].value.dims4();
                    let hw = h * w;
                    let scale = 1.0 / hw as f32;
                    let dx = g.iter().flat_map(|&v| std::iter::repeat_n(v * scale, hw)).collect();
                    accumulate(&mut grads, *input, dx);
                }
                Op::Dot { input, coeffs } => {
                    let dx = coeffs.iter().map(|&c| c * g[0]).collect();
                    accumulate(&mut grads, *input, dx);
                }
                Op::SoftmaxCe { logits, dlogits } => {
                    let dx = dlogits.iter().map(|&d| d * g[0]).collect();
                    accumulate(&mut grads, *logits, dx);
                }
            }
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Vec<f32>>], id: NodeId, delta: Vec<f32>) {
    match &mut grads[id.0] {
        Some(existing) => {
            for (e, d) in existing.iter_mut().zip(&delta) {
                *e += d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}
