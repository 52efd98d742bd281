//! Layer graphs: an immutable, topologically ordered list of operations plus
//! the parameter and normalization stores they read, and the executor that
//! runs whole-network forward and backward passes.

use crate::error::{Error, Result};
use crate::ops::{self, BatchNormCache, BatchNormState, BatchStats, Mode, PoolKind};
use crate::tensor::{Real, Tensor};
use crate::zoo::Architecture;

pub type NodeId = usize;
pub type ParamId = usize;
pub type BnId = usize;

#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    Input,
    Conv2d { weight: ParamId, stride: usize, pad: usize },
    BatchNorm { state: BnId },
    Relu,
    Pool2x2(PoolKind),
    GlobalAvgPool,
    Concat,
    Linear { weight: ParamId, bias: Option<ParamId> },
    Softmax,
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Input => "input",
            OpKind::Conv2d { .. } => "conv2d",
            OpKind::BatchNorm { .. } => "batchnorm",
            OpKind::Relu => "relu",
            OpKind::Pool2x2(PoolKind::Max) => "maxpool",
            OpKind::Pool2x2(PoolKind::Avg) => "avgpool",
            OpKind::GlobalAvgPool => "globalavgpool",
            OpKind::Concat => "concat",
            OpKind::Linear { .. } => "linear",
            OpKind::Softmax => "softmax",
        }
    }
}

/// One operation; `shape` is the per-sample output shape (batch excluded).
#[derive(Clone, Debug, PartialEq)]
pub struct OpNode {
    pub id: NodeId,
    pub kind: OpKind,
    pub inputs: Vec<NodeId>,
    pub shape: Vec<usize>,
}

/// A trainable tensor addressed in topological order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamSlot {
    Param(ParamId),
    Gamma(BnId),
    Beta(BnId),
}

/// Bookkeeping for one densely connected layer.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayerInfo {
    pub block: usize,
    pub layer: usize,
    /// Node whose output feeds the layer's first normalization.
    pub input: NodeId,
    /// Block entry followed by the outputs of all earlier layers of the block.
    pub sources: Vec<NodeId>,
    pub input_channels: usize,
    pub output: NodeId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockInfo {
    pub entry: NodeId,
    pub entry_channels: usize,
    /// Channels after the block's final concatenation.
    pub exit_channels: usize,
    pub exit: NodeId,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Structure {
    pub blocks: Vec<BlockInfo>,
    pub dense_layers: Vec<DenseLayerInfo>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGraph<T: Real = f32> {
    nodes: Vec<OpNode>,
    params: Vec<Tensor<T>>,
    bn: Vec<BatchNormState<T>>,
    logits: NodeId,
    output: NodeId,
    pub structure: Structure,
    pub arch: Option<Architecture>,
}

/// Forward activations of every node, needed by the backward pass.
#[derive(Clone, Debug)]
pub struct Trace<T: Real> {
    pub mode: Mode,
    values: Vec<Tensor<T>>,
    bn_caches: Vec<Option<BatchNormCache>>,
    bn_stats: Vec<(BnId, BatchStats)>,
}

impl<T: Real> Trace<T> {
    pub fn value(&self, node: NodeId) -> &Tensor<T> {
        &self.values[node]
    }
    pub fn batch_stats(&self) -> &[(BnId, BatchStats)] {
        &self.bn_stats
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ReluRule {
    #[default]
    Standard,
    /// Additionally blocks negative incoming gradient.
    Guided,
}

/// Observer called at every ReLU during backward with
/// `(node, forward output, gradient propagated to the ReLU input)`.
pub type ReluProbe<'a, T> = &'a mut dyn FnMut(NodeId, &Tensor<T>, &Tensor<T>);

#[derive(Default)]
pub struct BackwardOptions<'a, T: Real> {
    pub relu: ReluRule,
    /// Also return the gradient with respect to the network input.
    pub input_grad: bool,
    pub probe: Option<ReluProbe<'a, T>>,
}

impl<T: Real> LayerGraph<T> {
    pub fn nodes(&self) -> &[OpNode] {
        &self.nodes
    }
    pub fn node(&self, id: NodeId) -> &OpNode {
        &self.nodes[id]
    }
    pub fn logits(&self) -> NodeId {
        self.logits
    }
    pub fn output(&self) -> NodeId {
        self.output
    }
    /// Per-sample input shape `[C,H,W]`.
    pub fn input_shape(&self) -> &[usize] {
        &self.nodes[0].shape
    }
    pub fn num_classes(&self) -> usize {
        self.nodes[self.logits].shape[0]
    }
    pub fn bn_states(&self) -> &[BatchNormState<T>] {
        &self.bn
    }
    pub fn bn_states_mut(&mut self) -> &mut [BatchNormState<T>] {
        &mut self.bn
    }
    pub fn count_kind(&self, pred: impl Fn(&OpKind) -> bool) -> usize {
        self.nodes.iter().filter(|n| pred(&n.kind)).count()
    }

    /// Trainable tensors in topological order: conv/linear weights and bias,
    /// normalization gamma then beta.
    pub fn parameter_slots(&self) -> Vec<ParamSlot> {
        let mut slots = Vec::new();
        for node in &self.nodes {
            match node.kind {
                OpKind::Conv2d { weight, .. } => slots.push(ParamSlot::Param(weight)),
                OpKind::BatchNorm { state } => {
                    slots.push(ParamSlot::Gamma(state));
                    slots.push(ParamSlot::Beta(state));
                }
                OpKind::Linear { weight, bias } => {
                    slots.push(ParamSlot::Param(weight));
                    if let Some(b) = bias {
                        slots.push(ParamSlot::Param(b));
                    }
                }
                _ => {}
            }
        }
        slots
    }

    pub fn param(&self, slot: ParamSlot) -> &Tensor<T> {
        match slot {
            ParamSlot::Param(p) => &self.params[p],
            ParamSlot::Gamma(b) => &self.bn[b].gamma,
            ParamSlot::Beta(b) => &self.bn[b].beta,
        }
    }

    pub fn param_mut(&mut self, slot: ParamSlot) -> &mut Tensor<T> {
        match slot {
            ParamSlot::Param(p) => &mut self.params[p],
            ParamSlot::Gamma(b) => &mut self.bn[b].gamma,
            ParamSlot::Beta(b) => &mut self.bn[b].beta,
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.parameter_slots().iter().map(|&s| self.param(s).len()).sum()
    }

    pub fn cast<U: Real>(&self) -> LayerGraph<U> {
        LayerGraph {
            nodes: self.nodes.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
            bn: self.bn.iter().map(BatchNormState::cast).collect(),
            logits: self.logits,
            output: self.output,
            structure: self.structure.clone(),
            arch: self.arch.clone(),
        }
    }

    fn check_batch(&self, batch: &Tensor<T>) -> Result<()> {
        let shape = batch.shape();
        if shape.len() != 4 || shape[1..] != self.nodes[0].shape[..] {
            return Err(Error::shape(
                "forward",
                format!(
                    "network expects [N,{}] input, got {:?}",
                    self.nodes[0]
                        .shape
                        .iter()
                        .map(|d| d.to_string())
                        .collect::<Vec<_>>()
                        .join(","),
                    shape
                ),
            ));
        }
        Ok(())
    }

    fn eval_node(
        &self,
        node: &OpNode,
        values: &[Option<Tensor<T>>],
        mode: Mode,
    ) -> Result<(Tensor<T>, Option<BatchNormCache>, Option<BatchStats>)> {
        let arg = |i: usize| -> &Tensor<T> {
            values[node.inputs[i]]
                .as_ref()
                .expect("operand released before its last use")
        };
        let out = match &node.kind {
            OpKind::Input => unreachable!("input node is seeded, not evaluated"),
            OpKind::Conv2d { weight, stride, pad } => {
                ops::conv2d_forward(arg(0), &self.params[*weight], *stride, *pad)?
            }
            OpKind::BatchNorm { state } => {
                let (y, cache, stats) = ops::batchnorm_forward(arg(0), &self.bn[*state], mode)?;
                return Ok((y, Some(cache), stats));
            }
            OpKind::Relu => ops::relu(arg(0)),
            OpKind::Pool2x2(kind) => ops::pool2x2(arg(0), *kind)?,
            OpKind::GlobalAvgPool => ops::global_avg_pool(arg(0))?,
            OpKind::Concat => {
                let parts: Vec<&Tensor<T>> = (0..node.inputs.len()).map(arg).collect();
                ops::concat_channels(&parts)?
            }
            OpKind::Linear { weight, bias } => {
                ops::linear(arg(0), &self.params[*weight], bias.map(|b| &self.params[b]))?
            }
            OpKind::Softmax => ops::softmax(arg(0))?,
        };
        Ok((out, None, None))
    }

    /// Full forward pass keeping every activation. Does not modify running
    /// statistics; see [`LayerGraph::commit`].
    pub fn forward_trace(&self, batch: &Tensor<T>, mode: Mode) -> Result<Trace<T>> {
        self.check_batch(batch)?;
        let mut values: Vec<Option<Tensor<T>>> = Vec::with_capacity(self.nodes.len());
        let mut bn_caches = vec![None; self.nodes.len()];
        let mut bn_stats = Vec::new();
        values.push(Some(batch.clone()));
        for node in &self.nodes[1..] {
            let (out, cache, stats) = self.eval_node(node, &values, mode)?;
            if cfg!(test) {
                assert!(
                    out.all_finite() || !batch.all_finite(),
                    "non-finite output at node {}",
                    node.id
                );
            }
            if let (OpKind::BatchNorm { state }, Some(stats)) = (&node.kind, stats) {
                bn_stats.push((*state, stats));
            }
            bn_caches[node.id] = cache;
            values.push(Some(out));
        }
        Ok(Trace {
            mode,
            values: values.into_iter().map(Option::unwrap).collect(),
            bn_caches,
            bn_stats,
        })
    }

    /// Eval-mode forward returning class probabilities; intermediate
    /// activations are released after their last use.
    pub fn predict(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.eval_nodes(batch, &[self.output])?.pop().unwrap())
    }

    /// Eval-mode forward returning the values of the requested nodes.
    pub fn eval_nodes(&self, batch: &Tensor<T>, wanted: &[NodeId]) -> Result<Vec<Tensor<T>>> {
        self.check_batch(batch)?;
        let mut last_use = vec![0usize; self.nodes.len()];
        for node in &self.nodes {
            for &i in &node.inputs {
                last_use[i] = node.id;
            }
        }
        for &w in wanted {
            last_use[w] = usize::MAX;
        }
        let mut values: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        values[0] = Some(batch.clone());
        for node in &self.nodes[1..] {
            let (out, _, _) = self.eval_node(node, &values, Mode::Eval)?;
            values[node.id] = Some(out);
            for &i in &node.inputs {
                if last_use[i] == node.id {
                    values[i] = None;
                }
            }
        }
        Ok(wanted.iter().map(|&w| values[w].clone().unwrap()).collect())
    }

    /// Train-mode forward that also folds batch statistics into the running
    /// estimates.
    pub fn forward_train(&mut self, batch: &Tensor<T>) -> Result<Trace<T>> {
        let trace = self.forward_trace(batch, Mode::Train)?;
        self.commit(&trace);
        Ok(trace)
    }

    pub fn commit(&mut self, trace: &Trace<T>) {
        for (bn, stats) in &trace.bn_stats {
            self.bn[*bn].commit(stats);
        }
    }

    /// Backpropagates `seed_grad` from `seed` (typically the logits node).
    ///
    /// Every parameter's gradient buffer is reset and then filled. Returns the
    /// gradient with respect to the network input when requested.
    pub fn backward(
        &mut self,
        trace: &Trace<T>,
        seed: NodeId,
        seed_grad: Tensor<T>,
        opts: BackwardOptions<'_, T>,
    ) -> Result<Option<Tensor<T>>> {
        let (input_grad, param_grads) = self.propagate(trace, seed, seed_grad, opts, true)?;
        for slot in self.parameter_slots() {
            self.param_mut(slot).zero_grad();
        }
        for (slot, g) in param_grads {
            let buf = self.param_mut(slot).grad_mut().expect("zeroed above");
            for (a, b) in buf.iter_mut().zip(g.data()) {
                *a += *b;
            }
        }
        Ok(input_grad)
    }

    /// Gradient with respect to the network input only; parameters are
    /// neither read for gradients nor modified.
    pub fn input_gradient(
        &self,
        trace: &Trace<T>,
        seed: NodeId,
        seed_grad: Tensor<T>,
        relu: ReluRule,
        probe: Option<ReluProbe<'_, T>>,
    ) -> Result<Tensor<T>> {
        let opts = BackwardOptions {
            relu,
            input_grad: true,
            probe,
        };
        let (g, _) = self.propagate(trace, seed, seed_grad, opts, false)?;
        // an input disconnected from the seed has zero gradient
        Ok(g.unwrap_or_else(|| Tensor::zeros(trace.values[0].shape())))
    }

    fn propagate(
        &self,
        trace: &Trace<T>,
        seed: NodeId,
        seed_grad: Tensor<T>,
        mut opts: BackwardOptions<'_, T>,
        want_params: bool,
    ) -> Result<(Option<Tensor<T>>, Vec<(ParamSlot, Tensor<T>)>)> {
        if trace.values.len() != self.nodes.len() {
            return Err(Error::Usage(
                "backward needs the forward trace of this graph; run forward_trace first".into(),
            ));
        }
        if seed >= self.nodes.len() || trace.values[seed].shape() != seed_grad.shape() {
            return Err(Error::shape(
                "backward",
                format!(
                    "seed gradient {:?} does not match node {seed} output",
                    seed_grad.shape()
                ),
            ));
        }

        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        let mut param_grads = Vec::new();
        grads[seed] = Some(seed_grad);
        let wants = |id: NodeId| id != 0 || opts.input_grad;

        for id in (1..=seed).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            let inputs = &node.inputs;
            let x = |i: usize| &trace.values[inputs[i]];
            match &node.kind {
                OpKind::Input => {}
                OpKind::Conv2d { weight, stride, pad } => {
                    let (gx, gw) =
                        ops::conv2d_backward(&g, x(0), &self.params[*weight], *stride, *pad, wants(inputs[0]))?;
                    if want_params {
                        param_grads.push((ParamSlot::Param(*weight), gw));
                    }
                    if let Some(gx) = gx {
                        accumulate(&mut grads, inputs[0], gx);
                    }
                }
                OpKind::BatchNorm { state } => {
                    let cache = trace.bn_caches[id]
                        .as_ref()
                        .ok_or_else(|| Error::Usage(format!("missing normalization cache for node {id}")))?;
                    let (gx, gg, gb) = ops::batchnorm_backward(&g, x(0), &self.bn[*state].gamma, cache)?;
                    if want_params {
                        param_grads.push((ParamSlot::Gamma(*state), gg));
                        param_grads.push((ParamSlot::Beta(*state), gb));
                    }
                    if wants(inputs[0]) {
                        accumulate(&mut grads, inputs[0], gx);
                    }
                }
                OpKind::Relu => {
                    let out = &trace.values[id];
                    let gx = match opts.relu {
                        ReluRule::Standard => ops::relu_backward(&g, out)?,
                        ReluRule::Guided => ops::relu_backward_guided(&g, out)?,
                    };
                    if let Some(probe) = opts.probe.as_mut() {
                        probe(id, out, &gx);
                    }
                    if wants(inputs[0]) {
                        accumulate(&mut grads, inputs[0], gx);
                    }
                }
                OpKind::Pool2x2(kind) => {
                    if wants(inputs[0]) {
                        let gx = ops::pool2x2_backward(&g, x(0), *kind)?;
                        accumulate(&mut grads, inputs[0], gx);
                    }
                }
                OpKind::GlobalAvgPool => {
                    if wants(inputs[0]) {
                        let gx = ops::global_avg_pool_backward(&g, x(0).shape())?;
                        accumulate(&mut grads, inputs[0], gx);
                    }
                }
                OpKind::Concat => {
                    let channels: Vec<usize> = inputs.iter().map(|&i| trace.values[i].shape()[1]).collect();
                    for (i, part) in inputs.iter().zip(ops::split_channels(&g, &channels)?) {
                        if wants(*i) {
                            accumulate(&mut grads, *i, part);
                        }
                    }
                }
                OpKind::Linear { weight, bias } => {
                    let (gx, gw, gb) = ops::linear_backward(&g, x(0), &self.params[*weight])?;
                    if want_params {
                        param_grads.push((ParamSlot::Param(*weight), gw));
                        if let Some(b) = bias {
                            param_grads.push((ParamSlot::Param(*b), gb));
                        }
                    }
                    if wants(inputs[0]) {
                        accumulate(&mut grads, inputs[0], gx);
                    }
                }
                OpKind::Softmax => {
                    let gx = ops::softmax_backward(&g, &trace.values[id])?;
                    accumulate(&mut grads, inputs[0], gx);
                }
            }
        }
        let input_grad = if opts.input_grad { grads[0].take() } else { None };
        Ok((input_grad, param_grads))
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], id: NodeId, g: Tensor<T>) {
    match &mut grads[id] {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                *a += *b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Incremental construction with shape inference at every step.
pub struct GraphBuilder<T: Real = f32> {
    nodes: Vec<OpNode>,
    params: Vec<Tensor<T>>,
    bn: Vec<BatchNormState<T>>,
    epsilon: f64,
    momentum: f64,
    pub structure: Structure,
}

impl<T: Real> GraphBuilder<T> {
    /// Starts a graph whose per-sample input is `[channels, height, width]`.
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        GraphBuilder {
            nodes: vec![OpNode {
                id: 0,
                kind: OpKind::Input,
                inputs: vec![],
                shape: vec![channels, height, width],
            }],
            params: Vec::new(),
            bn: Vec::new(),
            epsilon: ops::norm::DEFAULT_EPSILON,
            momentum: ops::norm::DEFAULT_MOMENTUM,
            structure: Structure::default(),
        }
    }

    pub fn with_batchnorm_constants(mut self, epsilon: f64, momentum: f64) -> Result<Self> {
        BatchNormState::<T>::new(1, epsilon, momentum)?;
        self.epsilon = epsilon;
        self.momentum = momentum;
        Ok(self)
    }

    pub fn input(&self) -> NodeId {
        0
    }

    pub fn shape(&self, node: NodeId) -> &[usize] {
        &self.nodes[node].shape
    }

    pub fn channels(&self, node: NodeId) -> usize {
        self.nodes[node].shape[0]
    }

    fn push(&mut self, kind: OpKind, inputs: Vec<NodeId>, shape: Vec<usize>) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(OpNode {
            id,
            kind,
            inputs,
            shape,
        });
        id
    }

    fn spatial(&self, x: NodeId, op: &'static str) -> Result<(usize, usize, usize)> {
        match self.nodes[x].shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::shape(op, format!("node {x} is not a [C,H,W] feature map"))),
        }
    }

    /// Square bias-free convolution; weights start at zero.
    pub fn conv(&mut self, x: NodeId, out_channels: usize, kernel: usize, stride: usize, pad: usize) -> Result<NodeId> {
        let (c, h, w) = self.spatial(x, "conv2d")?;
        let geom = ConvCheck::geometry(c, h, w, out_channels, kernel, stride, pad)?;
        let weight = self.params.len();
        self.params.push(Tensor::zeros(&[out_channels, c, kernel, kernel]));
        Ok(self.push(
            OpKind::Conv2d { weight, stride, pad },
            vec![x],
            vec![out_channels, geom.out_h, geom.out_w],
        ))
    }

    pub fn batchnorm(&mut self, x: NodeId) -> Result<NodeId> {
        let (c, h, w) = self.spatial(x, "batchnorm")?;
        let state = self.bn.len();
        self.bn.push(BatchNormState::new(c, self.epsilon, self.momentum)?);
        Ok(self.push(OpKind::BatchNorm { state }, vec![x], vec![c, h, w]))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let shape = self.nodes[x].shape.clone();
        self.push(OpKind::Relu, vec![x], shape)
    }

    pub fn pool(&mut self, x: NodeId, kind: PoolKind) -> Result<NodeId> {
        let (c, h, w) = self.spatial(x, "pool2x2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Config(format!(
                "2×2 pooling of a {h}x{w} map (node {x}) needs even extents"
            )));
        }
        Ok(self.push(OpKind::Pool2x2(kind), vec![x], vec![c, h / 2, w / 2]))
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let (c, _, _) = self.spatial(x, "global_avg_pool")?;
        Ok(self.push(OpKind::GlobalAvgPool, vec![x], vec![c]))
    }

    pub fn concat(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let (_, h, w) = self.spatial(xs[0], "concat_channels")?;
        let mut total = 0;
        for &x in xs {
            let (c, xh, xw) = self.spatial(x, "concat_channels")?;
            if (xh, xw) != (h, w) {
                return Err(Error::shape(
                    "concat_channels",
                    format!("node {x} is {xh}x{xw} but node {} is {h}x{w}", xs[0]),
                ));
            }
            total += c;
        }
        Ok(self.push(OpKind::Concat, xs.to_vec(), vec![total, h, w]))
    }

    pub fn linear(&mut self, x: NodeId, out_features: usize, bias: bool) -> Result<NodeId> {
        let f = match self.nodes[x].shape[..] {
            [f] => f,
            _ => return Err(Error::shape("linear", format!("node {x} is not a flat feature vector"))),
        };
        let weight = self.params.len();
        self.params.push(Tensor::zeros(&[out_features, f]));
        let bias = bias.then(|| {
            self.params.push(Tensor::zeros(&[out_features]));
            weight + 1
        });
        Ok(self.push(OpKind::Linear { weight, bias }, vec![x], vec![out_features]))
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let k = match self.nodes[x].shape[..] {
            [k] if k >= 2 => k,
            _ => {
                return Err(Error::shape(
                    "softmax",
                    format!("node {x} must be a vector of at least 2 logits"),
                ))
            }
        };
        Ok(self.push(OpKind::Softmax, vec![x], vec![k]))
    }

    /// `logits` is the node seeded by training and saliency; `output` is
    /// what [`LayerGraph::predict`] returns.
    pub fn finish(self, logits: NodeId, output: NodeId) -> LayerGraph<T> {
        LayerGraph {
            nodes: self.nodes,
            params: self.params,
            bn: self.bn,
            logits,
            output,
            structure: self.structure,
            arch: None,
        }
    }
}

struct ConvCheck;

impl ConvCheck {
    fn geometry(
        c: usize,
        h: usize,
        w: usize,
        o: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Result<ops::ConvGeometry> {
        ops::ConvGeometry::new(&[1, c, h, w], &[o, c, k, k], stride, pad).map_err(|e| match e {
            Error::Shape { detail, .. } => Error::Config(format!("convolution does not fit: {detail}")),
            other => other,
        })
    }
}
