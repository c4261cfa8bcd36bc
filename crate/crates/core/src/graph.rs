//! Static op graph with cached forward outputs and a reverse-mode backward pass.

use crate::error::TensorError;
use crate::ops::{self, ConvGeom};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub type NodeId = usize;
pub type ParamId = usize;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Op {
    Input,
    Conv3d {
        weight: ParamId,
        bias: ParamId,
        geom: ConvGeom,
    },
    ConvTranspose3d {
        weight: ParamId,
        bias: ParamId,
        stride: usize,
    },
    MaxPool3d {
        window: usize,
    },
    Relu,
    /// Channel concatenation of two inputs, first input first.
    Concat,
    Add,
    SoftmaxChannels,
}

impl Op {
    fn arity(&self) -> usize {
        match self {
            Op::Input => 0,
            Op::Concat | Op::Add => 2,
            _ => 1,
        }
    }

    fn params(&self) -> Vec<ParamId> {
        match *self {
            Op::Conv3d { weight, bias, .. } | Op::ConvTranspose3d { weight, bias, .. } => vec![weight, bias],
            _ => Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Node {
    pub op: Op,
    pub inputs: Vec<NodeId>,
}

/// Named parameter tensors addressed by [`ParamId`].
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Panics on a duplicate name; parameter names are fixed by the builder.
    pub fn push(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter name `{name}`");
        self.names.push(name);
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.values[i])
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
        }
    }
}

#[derive(Clone, Debug)]
struct Cache<T> {
    outputs: Vec<Tensor<T>>,
    argmax: Vec<Option<Vec<u32>>>,
}

/// Nodes in topological order: a node may only consume earlier nodes.
#[derive(Clone, Debug)]
pub struct OpGraph<T> {
    nodes: Vec<Node>,
    cache: Option<Cache<T>>,
}

impl<T: Scalar> Default for OpGraph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> OpGraph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            cache: None,
        }
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Appends a node. Inputs must already exist, which keeps the graph acyclic.
    pub fn push(&mut self, op: Op, inputs: &[NodeId]) -> Result<NodeId, TensorError> {
        let id = self.nodes.len();
        if inputs.len() != op.arity() {
            return Err(TensorError::Precondition {
                op: "graph",
                reason: format!("{op:?} takes {} inputs, got {}", op.arity(), inputs.len()),
            });
        }
        if let Some(&bad) = inputs.iter().find(|&&i| i >= id) {
            return Err(TensorError::Precondition {
                op: "graph",
                reason: format!("node {id} consumes node {bad}, which does not precede it"),
            });
        }
        if op == Op::Input && self.nodes.iter().any(|n| n.op == Op::Input) {
            return Err(TensorError::Precondition {
                op: "graph",
                reason: "graph already has an input node".into(),
            });
        }
        self.cache = None;
        self.nodes.push(Node {
            op,
            inputs: inputs.to_vec(),
        });
        Ok(id)
    }

    fn run_node(
        &self,
        node: &Node,
        params: &ParamStore<T>,
        input: &Tensor<T>,
        args: &[&Tensor<T>],
    ) -> Result<(Tensor<T>, Option<Vec<u32>>), TensorError> {
        let out = match node.op {
            Op::Input => input.clone(),
            Op::Conv3d { weight, bias, geom } => {
                ops::conv3d(args[0], params.get(weight), Some(params.get(bias)), geom)?
            }
            Op::ConvTranspose3d { weight, bias, stride } => {
                ops::conv_transpose3d(args[0], params.get(weight), Some(params.get(bias)), stride)?
            }
            Op::MaxPool3d { window } => {
                let pooled = ops::maxpool3d(args[0], window)?;
                return Ok((pooled.output, Some(pooled.argmax)));
            }
            Op::Relu => ops::relu(args[0]),
            Op::Concat => ops::concat_channels(args[0], args[1])?,
            Op::Add => ops::add(args[0], args[1])?,
            Op::SoftmaxChannels => ops::softmax_channels(args[0])?,
        };
        Ok((out, None))
    }

    fn output_id(&self) -> Result<NodeId, TensorError> {
        self.nodes.len().checked_sub(1).ok_or(TensorError::Precondition {
            op: "graph",
            reason: "graph is empty".into(),
        })
    }

    /// Runs the graph and caches every node output for [`OpGraph::backward`].
    pub fn forward(&mut self, params: &ParamStore<T>, input: &Tensor<T>) -> Result<&Tensor<T>, TensorError> {
        self.cache = None;
        let out_id = self.output_id()?;
        let mut outputs: Vec<Tensor<T>> = Vec::with_capacity(self.nodes.len());
        let mut argmax = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let args: Vec<&Tensor<T>> = node.inputs.iter().map(|&i| &outputs[i]).collect();
            let (out, am) = self.run_node(node, params, input, &args)?;
            outputs.push(out);
            argmax.push(am);
        }
        let cache = self.cache.insert(Cache { outputs, argmax });
        Ok(&cache.outputs[out_id])
    }

    /// Runs the graph without caching, dropping intermediates once consumed.
    pub fn evaluate(&self, params: &ParamStore<T>, input: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        self.evaluate_with(params, input, |_, _| {})
    }

    /// Like [`OpGraph::evaluate`], letting `hook` rewrite each node output
    /// before its consumers see it.
    pub fn evaluate_with(
        &self,
        params: &ParamStore<T>,
        input: &Tensor<T>,
        mut hook: impl FnMut(NodeId, &mut Tensor<T>),
    ) -> Result<Tensor<T>, TensorError> {
        let out_id = self.output_id()?;
        let mut last_use: Vec<usize> = (0..self.nodes.len()).collect();
        for (j, node) in self.nodes.iter().enumerate() {
            for &i in &node.inputs {
                last_use[i] = j;
            }
        }
        let mut outputs: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        for (j, node) in self.nodes.iter().enumerate() {
            let args: Vec<&Tensor<T>> = node
                .inputs
                .iter()
                .map(|&i| outputs[i].as_ref().expect("live input"))
                .collect();
            let (mut out, _) = self.run_node(node, params, input, &args)?;
            hook(j, &mut out);
            outputs[j] = Some(out);
            for &i in &node.inputs {
                if last_use[i] == j && i != out_id {
                    outputs[i] = None;
                }
            }
        }
        Ok(outputs[out_id].take().expect("output computed"))
    }

    /// Output of `node` from the last cached forward pass.
    pub fn cached_output(&self, node: NodeId) -> Option<&Tensor<T>> {
        self.cache.as_ref().and_then(|c| c.outputs.get(node))
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }

    /// Hash of every ReLU on/off state and pooling winner in the cached pass.
    ///
    /// Two passes with equal signatures lie in the same linear region of the
    /// network's non-smooth ops.
    pub fn activation_signature(&self) -> Option<u64> {
        let cache = self.cache.as_ref()?;
        let mut h = crate::hash::Fnv64::new();
        for (i, node) in self.nodes.iter().enumerate() {
            match node.op {
                Op::Relu => {
                    for &v in cache.outputs[i].data() {
                        h.write(&[(v > T::zero()) as u8]);
                    }
                }
                Op::MaxPool3d { .. } => {
                    for &a in cache.argmax[i].as_deref().unwrap_or(&[]) {
                        h.write(&a.to_le_bytes());
                    }
                }
                _ => {}
            }
        }
        Some(h.finish())
    }

    /// Reverse-mode pass from `loss_grad` (gradient w.r.t. the graph output)
    /// to every parameter. Gradients from multiple consumers add up.
    pub fn backward(&self, params: &ParamStore<T>, loss_grad: &Tensor<T>) -> Result<Vec<Tensor<T>>, TensorError> {
        let cache = self.cache.as_ref().ok_or(TensorError::NotCached)?;
        let out_id = self.output_id()?;
        cache.outputs[out_id].expect_same_shape("backward", loss_grad)?;

        let mut param_grads: Vec<Option<Tensor<T>>> = vec![None; params.len()];
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[out_id] = Some(loss_grad.clone());

        fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) -> Result<(), TensorError> {
            match slot {
                Some(acc) => acc.add_assign(&g),
                None => {
                    *slot = Some(g);
                    Ok(())
                }
            }
        }

        for (j, node) in self.nodes.iter().enumerate().rev() {
            let Some(g) = grads[j].take() else { continue };
            let arg = |k: usize| &cache.outputs[node.inputs[k]];
            match node.op {
                Op::Input => {}
                Op::Conv3d { weight, bias, geom } => {
                    let cg = ops::conv3d_backward(arg(0), params.get(weight), &g, geom)?;
                    accumulate(&mut param_grads[weight], cg.weight)?;
                    accumulate(&mut param_grads[bias], cg.bias)?;
                    accumulate(&mut grads[node.inputs[0]], cg.input)?;
                }
                Op::ConvTranspose3d { weight, bias, stride } => {
                    let cg = ops::conv_transpose3d_backward(arg(0), params.get(weight), &g, stride)?;
                    accumulate(&mut param_grads[weight], cg.weight)?;
                    accumulate(&mut param_grads[bias], cg.bias)?;
                    accumulate(&mut grads[node.inputs[0]], cg.input)?;
                }
                Op::MaxPool3d { .. } => {
                    let am = cache.argmax[j].as_deref().expect("pooling indices cached");
                    let gi = ops::maxpool3d_backward(arg(0).shape(), am, &g)?;
                    accumulate(&mut grads[node.inputs[0]], gi)?;
                }
                Op::Relu => {
                    let gi = ops::relu_backward(&cache.outputs[j], &g)?;
                    accumulate(&mut grads[node.inputs[0]], gi)?;
                }
                Op::Concat => {
                    let ca = arg(0).shape()[1];
                    let (ga, gb) = ops::concat_channels_backward(&g, ca)?;
                    accumulate(&mut grads[node.inputs[0]], ga)?;
                    accumulate(&mut grads[node.inputs[1]], gb)?;
                }
                Op::Add => {
                    accumulate(&mut grads[node.inputs[0]], g.clone())?;
                    accumulate(&mut grads[node.inputs[1]], g)?;
                }
                Op::SoftmaxChannels => {
                    let gi = ops::softmax_channels_backward(&cache.outputs[j], &g)?;
                    accumulate(&mut grads[node.inputs[0]], gi)?;
                }
            }
        }

        Ok(param_grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.unwrap_or_else(|| Tensor::zeros(params.get(i).shape().to_vec())))
            .collect())
    }

    /// Parameters referenced by nodes, in node order.
    pub fn referenced_params(&self) -> Vec<ParamId> {
        self.nodes.iter().flat_map(|n| n.op.params()).collect()
    }
}
