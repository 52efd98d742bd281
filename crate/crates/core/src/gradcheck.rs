//! Central finite-difference verification of analytic gradients.
//!
//! The scalar objective is a fixed random projection `Σ rᵢ·yᵢ` of a node's
//! output, so every output coordinate contributes to the check.
//!
//! ReLU is not differentiable at zero. A coordinate whose `±h` perturbation
//! flips any ReLU's active set is retried with smaller steps and skipped
//! (and counted) if every step still straddles the kink.

use rand::{seq::index, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{BackwardOptions, LayerGraph, NodeId, OpKind, ParamSlot, Trace};
use crate::ops::Mode;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradTarget {
    Input,
    Param(ParamSlot),
}

#[derive(Clone, Debug)]
pub struct FdOptions {
    pub step: f64,
    pub mode: Mode,
    /// Coordinates checked per target; all of them when the tensor is smaller.
    pub max_coords: usize,
    pub seed: u64,
    /// Node whose output is projected; the graph output when `None`.
    pub node: Option<NodeId>,
}

impl Default for FdOptions {
    fn default() -> Self {
        FdOptions {
            step: 1e-5,
            mode: Mode::Eval,
            max_coords: 24,
            seed: 0,
            node: None,
        }
    }
}

/// Step refinements tried when a perturbation crosses a ReLU kink.
const KINK_RETRIES: u32 = 3;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FdReport {
    /// Max over checked coordinates of `|analytic − numeric| / max(1, |analytic|)`.
    pub max_error: f64,
    pub checked: usize,
    /// Coordinates left out because every step straddled a ReLU kink.
    pub kink_skips: usize,
}

impl FdReport {
    fn merge(self, other: FdReport) -> FdReport {
        FdReport {
            max_error: self.max_error.max(other.max_error),
            checked: self.checked + other.checked,
            kink_skips: self.kink_skips + other.kink_skips,
        }
    }
}

fn active_set(graph: &LayerGraph<f64>, trace: &Trace<f64>) -> Vec<bool> {
    graph
        .nodes()
        .iter()
        .filter(|n| matches!(n.kind, OpKind::Relu))
        .flat_map(|n| trace.value(n.id).data().iter().map(|&v| v > 0.0))
        .collect()
}

fn objective(
    graph: &LayerGraph<f64>,
    input: &Tensor<f64>,
    node: NodeId,
    proj: &[f64],
    mode: Mode,
) -> Result<(f64, Vec<bool>)> {
    let trace = graph.forward_trace(input, mode)?;
    let value = trace.value(node).data().iter().zip(proj).map(|(y, r)| y * r).sum();
    Ok((value, active_set(graph, &trace)))
}

/// Compares the analytic gradient of one target with central differences on
/// a sample of its coordinates.
pub fn finite_difference_check(
    graph: &mut LayerGraph<f64>,
    input: &Tensor<f64>,
    target: GradTarget,
    opts: &FdOptions,
) -> Result<FdReport> {
    let node = opts.node.unwrap_or(graph.output());
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let trace = graph.forward_trace(input, opts.mode)?;
    let out_shape = trace.value(node).shape().to_vec();
    let proj: Vec<f64> = (0..trace.value(node).len())
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();

    let seed_grad = Tensor::from_vec(&out_shape, proj.clone())?;
    let input_grad = graph.backward(
        &trace,
        node,
        seed_grad,
        BackwardOptions {
            input_grad: target == GradTarget::Input,
            ..Default::default()
        },
    )?;
    let analytic: Vec<f64> = match target {
        GradTarget::Input => input_grad.expect("input gradient requested").into_data(),
        GradTarget::Param(slot) => graph.param(slot).grad().expect("populated by backward").to_vec(),
    };

    let len = analytic.len();
    let coords: Vec<usize> = if len <= opts.max_coords {
        (0..len).collect()
    } else {
        index::sample(&mut rng, len, opts.max_coords).into_vec()
    };

    let base = active_set(graph, &trace);
    let mut report = FdReport::default();
    let mut x = input.clone();
    for i in coords {
        let mut numeric = None;
        for retry in 0..=KINK_RETRIES {
            let h = opts.step / 10f64.powi(retry as i32);
            let (plus, minus) = match target {
                GradTarget::Input => {
                    let orig = x.data()[i];
                    x.data_mut()[i] = orig + h;
                    let p = objective(graph, &x, node, &proj, opts.mode)?;
                    x.data_mut()[i] = orig - h;
                    let m = objective(graph, &x, node, &proj, opts.mode)?;
                    x.data_mut()[i] = orig;
                    (p, m)
                }
                GradTarget::Param(slot) => {
                    let orig = graph.param(slot).data()[i];
                    graph.param_mut(slot).data_mut()[i] = orig + h;
                    let p = objective(graph, input, node, &proj, opts.mode)?;
                    graph.param_mut(slot).data_mut()[i] = orig - h;
                    let m = objective(graph, input, node, &proj, opts.mode)?;
                    graph.param_mut(slot).data_mut()[i] = orig;
                    (p, m)
                }
            };
            if plus.1 == base && minus.1 == base {
                numeric = Some((plus.0 - minus.0) / (2.0 * h));
                break;
            }
        }
        match numeric {
            Some(numeric) => {
                let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
                report.max_error = report.max_error.max(err);
                report.checked += 1;
            }
            None => report.kink_skips += 1,
        }
    }
    Ok(report)
}

/// Runs [`finite_difference_check`] on the input and on every parameter.
pub fn check_all(graph: &mut LayerGraph<f64>, input: &Tensor<f64>, opts: &FdOptions) -> Result<FdReport> {
    let mut report = finite_difference_check(graph, input, GradTarget::Input, opts)?;
    for slot in graph.parameter_slots() {
        report = report.merge(finite_difference_check(graph, input, GradTarget::Param(slot), opts)?);
    }
    Ok(report)
}
