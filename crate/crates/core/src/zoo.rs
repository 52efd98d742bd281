//! Network builders: the densely connected classifier and a plain
//! convolutional baseline of comparable size.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::graph::{BlockInfo, DenseLayerInfo, GraphBuilder, LayerGraph, NodeId, OpKind, ParamSlot};
use crate::ops::PoolKind;
use crate::tensor::{Real, Tensor};

/// Hyperparameters of the densely connected network.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseNetSpec {
    pub num_blocks: usize,
    pub layers_per_block: usize,
    pub growth_rate: usize,
    pub initial_channels: usize,
    /// Bottleneck width as a multiple of the growth rate.
    pub bottleneck_factor: usize,
    pub input_size: usize,
    pub num_classes: usize,
    /// Fraction of channels kept by each transition, in (0, 1].
    pub compression: f64,
    pub transition_pool: PoolKind,
}

impl Default for DenseNetSpec {
    fn default() -> Self {
        DenseNetSpec {
            num_blocks: 3,
            layers_per_block: 10,
            growth_rate: 9,
            initial_channels: 18,
            bottleneck_factor: 4,
            input_size: 144,
            num_classes: 4,
            compression: 1.0,
            transition_pool: PoolKind::Avg,
        }
    }
}

impl DenseNetSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_blocks", self.num_blocks),
            ("layers_per_block", self.layers_per_block),
            ("growth_rate", self.growth_rate),
            ("initial_channels", self.initial_channels),
            ("bottleneck_factor", self.bottleneck_factor),
            ("input_size", self.input_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "num_classes must be at least 2, got {}",
                self.num_classes
            )));
        }
        if !(self.compression > 0.0 && self.compression <= 1.0) {
            return Err(Error::Config(format!(
                "compression must lie in (0,1], got {}",
                self.compression
            )));
        }
        let factor = 1usize
            .checked_shl((self.num_blocks - 1) as u32)
            .ok_or_else(|| Error::Config("too many blocks".into()))?;
        if self.input_size % factor != 0 {
            return Err(Error::Config(format!(
                "input_size {} is not divisible by 2^(num_blocks-1) = {factor}",
                self.input_size
            )));
        }
        Ok(())
    }

    fn transition_width(&self, channels: usize) -> usize {
        ((self.compression * channels as f64).floor() as usize).max(1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModelKind {
    DenseNet,
    CnnBaseline,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::DenseNet => "densenet",
            ModelKind::CnnBaseline => "cnn-baseline",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "densenet" => Ok(ModelKind::DenseNet),
            "cnn-baseline" => Ok(ModelKind::CnnBaseline),
            other => Err(Error::Config(format!(
                "unknown model kind {other:?} (densenet|cnn-baseline)"
            ))),
        }
    }
}

/// Everything needed to rebuild a network: its kind and hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Architecture {
    pub kind: ModelKind,
    pub spec: DenseNetSpec,
}

fn pool_name(kind: PoolKind) -> &'static str {
    match kind {
        PoolKind::Avg => "avg",
        PoolKind::Max => "max",
    }
}

pub fn parse_pool(s: &str) -> Result<PoolKind> {
    match s {
        "avg" => Ok(PoolKind::Avg),
        "max" => Ok(PoolKind::Max),
        other => Err(Error::Config(format!("unknown pooling {other:?} (avg|max)"))),
    }
}

impl Architecture {
    pub fn new(kind: ModelKind, spec: DenseNetSpec) -> Self {
        Architecture { kind, spec }
    }

    pub fn build<T: Real>(&self) -> Result<LayerGraph<T>> {
        match self.kind {
            ModelKind::DenseNet => build_densenet(&self.spec),
            ModelKind::CnnBaseline => build_baseline_cnn(&self.spec),
        }
    }

    /// Canonical `key=value` lines, one per field, in fixed order.
    pub fn to_header(&self) -> String {
        let s = &self.spec;
        let mut out = String::new();
        let _ = writeln!(out, "model={}", self.kind.name());
        let _ = writeln!(out, "num_blocks={}", s.num_blocks);
        let _ = writeln!(out, "layers_per_block={}", s.layers_per_block);
        let _ = writeln!(out, "growth_rate={}", s.growth_rate);
        let _ = writeln!(out, "initial_channels={}", s.initial_channels);
        let _ = writeln!(out, "bottleneck_factor={}", s.bottleneck_factor);
        let _ = writeln!(out, "input_size={}", s.input_size);
        let _ = writeln!(out, "num_classes={}", s.num_classes);
        let _ = writeln!(out, "compression={}", s.compression);
        let _ = writeln!(out, "transition_pool={}", pool_name(s.transition_pool));
        out
    }

    pub fn from_header(text: &str) -> Result<Self> {
        let mut kind = None;
        let mut spec = DenseNetSpec::default();
        let mut seen = std::collections::BTreeSet::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("header line {line:?} is not key=value")))?;
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("duplicate header key {key:?}")));
            }
            let int = || {
                value
                    .parse::<usize>()
                    .map_err(|_| Error::Config(format!("header {key}: {value:?} is not an integer")))
            };
            match key {
                "model" => kind = Some(ModelKind::parse(value)?),
                "num_blocks" => spec.num_blocks = int()?,
                "layers_per_block" => spec.layers_per_block = int()?,
                "growth_rate" => spec.growth_rate = int()?,
                "initial_channels" => spec.initial_channels = int()?,
                "bottleneck_factor" => spec.bottleneck_factor = int()?,
                "input_size" => spec.input_size = int()?,
                "num_classes" => spec.num_classes = int()?,
                "compression" => {
                    spec.compression = value
                        .parse()
                        .map_err(|_| Error::Config(format!("header compression: {value:?} is not a number")))?
                }
                "transition_pool" => spec.transition_pool = parse_pool(value)?,
                other => return Err(Error::Config(format!("unknown header key {other:?}"))),
            }
        }
        if seen.len() != 10 {
            return Err(Error::Config(format!("header has {} of 10 required keys", seen.len())));
        }
        let kind = kind.ok_or_else(|| Error::Config("header is missing model".into()))?;
        spec.validate()?;
        Ok(Architecture { kind, spec })
    }
}

/// Stem 3×3 convolution, `num_blocks` dense blocks joined by transitions,
/// then BN→ReLU→global average pooling→linear→softmax.
pub fn build_densenet<T: Real>(spec: &DenseNetSpec) -> Result<LayerGraph<T>> {
    spec.validate()?;
    let k = spec.growth_rate;
    let mut b = GraphBuilder::<T>::new(1, spec.input_size, spec.input_size);
    let mut x = b.conv(b.input(), spec.initial_channels, 3, 1, 1)?;

    for block in 0..spec.num_blocks {
        let entry = x;
        let entry_channels = b.channels(entry);
        let mut sources = vec![entry];
        for layer in 0..spec.layers_per_block {
            let input = if sources.len() == 1 { entry } else { b.concat(&sources)? };
            let input_channels = b.channels(input);
            if input_channels != entry_channels + k * layer {
                return Err(Error::Config(format!(
                    "dense layer {layer} of block {block} sees {input_channels} channels, expected {}",
                    entry_channels + k * layer
                )));
            }
            let h = b.batchnorm(input)?;
            let h = b.relu(h);
            let h = b.conv(h, spec.bottleneck_factor * k, 1, 1, 0)?;
            let h = b.batchnorm(h)?;
            let h = b.relu(h);
            let y = b.conv(h, k, 3, 1, 1)?;
            b.structure.dense_layers.push(DenseLayerInfo {
                block,
                layer,
                input,
                sources: sources.clone(),
                input_channels,
                output: y,
            });
            sources.push(y);
        }
        let exit = b.concat(&sources)?;
        b.structure.blocks.push(BlockInfo {
            entry,
            entry_channels,
            exit_channels: b.channels(exit),
            exit,
        });
        let h = b.batchnorm(exit)?;
        let h = b.relu(h);
        if block + 1 < spec.num_blocks {
            let width = spec.transition_width(b.channels(h));
            let h = b.conv(h, width, 1, 1, 0)?;
            x = b.pool(h, spec.transition_pool)?;
        } else {
            x = h;
        }
    }

    let pooled = b.global_avg_pool(x)?;
    let logits = b.linear(pooled, spec.num_classes, true)?;
    let probs = b.softmax(logits)?;
    let mut graph = b.finish(logits, probs);
    graph.arch = Some(Architecture::new(ModelKind::DenseNet, spec.clone()));
    verify_dense_connectivity(&graph, spec.growth_rate)?;
    Ok(graph)
}

/// Checks that every dense layer consumes the concatenation of its block's
/// entry and all earlier layer outputs, with `entry + k·m` channels.
pub fn verify_dense_connectivity<T: Real>(graph: &LayerGraph<T>, growth_rate: usize) -> Result<()> {
    for info in &graph.structure.dense_layers {
        let block = &graph.structure.blocks.get(info.block);
        let entry = match block {
            Some(b) => b.entry,
            None => info.sources[0],
        };
        let earlier: Vec<NodeId> = graph
            .structure
            .dense_layers
            .iter()
            .filter(|d| d.block == info.block && d.layer < info.layer)
            .map(|d| d.output)
            .collect();
        let mut expected = vec![entry];
        expected.extend(&earlier);
        let node = graph.node(info.input);
        let actual = if info.layer == 0 {
            vec![info.input]
        } else {
            node.inputs.clone()
        };
        if info.layer > 0 && node.kind != OpKind::Concat || actual != expected {
            return Err(Error::Config(format!(
                "dense layer {} of block {} is not fed by all earlier outputs of its block",
                info.layer, info.block
            )));
        }
        let entry_channels = graph.node(entry).shape[0];
        if node.shape[0] != entry_channels + growth_rate * info.layer {
            return Err(Error::Config(format!(
                "dense layer {} of block {} has {} input channels, expected {}",
                info.layer,
                info.block,
                node.shape[0],
                entry_channels + growth_rate * info.layer
            )));
        }
    }
    Ok(())
}

const BASELINE_CONVS_PER_STAGE: usize = 2;

/// Parameter count of the baseline for a given first-stage width.
pub fn baseline_param_count(spec: &DenseNetSpec, width: usize) -> usize {
    let mut total = 0;
    let mut in_ch = 1;
    for stage in 0..spec.num_blocks {
        let w = width << stage;
        for _ in 0..BASELINE_CONVS_PER_STAGE {
            total += in_ch * w * 9 + 2 * w;
            in_ch = w;
        }
    }
    total + in_ch * spec.num_classes + spec.num_classes
}

/// First-stage width whose parameter count is closest to the dense network's.
pub fn baseline_width(spec: &DenseNetSpec) -> Result<usize> {
    let target = densenet_param_count(spec)? as i64;
    (1..=4096usize)
        .min_by_key(|&w| (baseline_param_count(spec, w) as i64 - target).abs())
        .ok_or_else(|| Error::Config("no baseline width".into()))
}

pub fn densenet_param_count(spec: &DenseNetSpec) -> Result<usize> {
    spec.validate()?;
    let k = spec.growth_rate;
    let bott = spec.bottleneck_factor * k;
    let mut total = spec.initial_channels * 9;
    let mut c = spec.initial_channels;
    for block in 0..spec.num_blocks {
        for _ in 0..spec.layers_per_block {
            total += 2 * c + c * bott + 2 * bott + bott * k * 9;
            c += k;
        }
        total += 2 * c;
        if block + 1 < spec.num_blocks {
            let w = spec.transition_width(c);
            total += c * w;
            c = w;
        }
    }
    Ok(total + c * spec.num_classes + spec.num_classes)
}

/// Plain chain of (3×3 conv→BN→ReLU)×2 stages with doubling width and 2×2
/// max pooling between stages; no cross-layer concatenation. Width is chosen
/// so the parameter count is within ±20% of the dense network from `spec`.
pub fn build_baseline_cnn<T: Real>(spec: &DenseNetSpec) -> Result<LayerGraph<T>> {
    spec.validate()?;
    let width = baseline_width(spec)?;
    let mut b = GraphBuilder::<T>::new(1, spec.input_size, spec.input_size);
    let mut x = b.input();
    for stage in 0..spec.num_blocks {
        if stage > 0 {
            x = b.pool(x, PoolKind::Max)?;
        }
        for _ in 0..BASELINE_CONVS_PER_STAGE {
            let h = b.conv(x, width << stage, 3, 1, 1)?;
            let h = b.batchnorm(h)?;
            x = b.relu(h);
        }
    }
    let pooled = b.global_avg_pool(x)?;
    let logits = b.linear(pooled, spec.num_classes, true)?;
    let probs = b.softmax(logits)?;
    let mut graph = b.finish(logits, probs);
    graph.arch = Some(Architecture::new(ModelKind::CnnBaseline, spec.clone()));

    let dense = densenet_param_count(spec)? as f64;
    let ratio = graph.num_parameters() as f64 / dense;
    if !(0.8..=1.2).contains(&ratio) {
        return Err(Error::Config(format!(
            "baseline cannot match the dense network's size (ratio {ratio:.3})"
        )));
    }
    Ok(graph)
}

/// He-normal weights `N(0, sqrt(2/fan_in))`, zero biases, unit gamma, zero
/// beta and reset running statistics. Deterministic in `seed`.
pub fn init_parameters<T: Real>(graph: &mut LayerGraph<T>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for slot in graph.parameter_slots() {
        let tensor = graph.param_mut(slot);
        match slot {
            ParamSlot::Gamma(_) => tensor.data_mut().iter_mut().for_each(|v| *v = T::one()),
            ParamSlot::Beta(_) => tensor.data_mut().iter_mut().for_each(|v| *v = T::zero()),
            ParamSlot::Param(_) if tensor.shape().len() == 1 => {
                tensor.data_mut().iter_mut().for_each(|v| *v = T::zero())
            }
            ParamSlot::Param(_) => {
                let fan_in: usize = tensor.shape()[1..].iter().product();
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
                for v in tensor.data_mut() {
                    *v = T::from_f64(normal.sample(&mut rng));
                }
            }
        }
        tensor.clear_grad();
    }
    for bn in graph.bn_states_mut() {
        bn.running_mean.iter_mut().for_each(|v| *v = T::zero());
        bn.running_var.iter_mut().for_each(|v| *v = T::one());
    }
}

/// Zeroes the final classifier so every class starts equally likely.
pub fn zero_classifier<T: Real>(graph: &mut LayerGraph<T>) {
    if let OpKind::Linear { weight, bias } = graph.node(graph.logits()).kind {
        let zero = |t: &mut Tensor<T>| t.data_mut().iter_mut().for_each(|v| *v = T::zero());
        zero(graph.param_mut(ParamSlot::Param(weight)));
        if let Some(b) = bias {
            zero(graph.param_mut(ParamSlot::Param(b)));
        }
    }
}
