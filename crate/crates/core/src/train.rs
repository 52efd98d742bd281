//! Class-balanced training with SGD and patient-level inference by slice
//! probability averaging.

use rand::seq::SliceRandom;

use crate::data::augment::{self, AugmentParams};
use crate::data::slices::SliceSample;
use crate::error::{Error, Result};
use crate::graph::{BackwardOptions, LayerGraph, ParamSlot};
use crate::ops::Mode;
use crate::seed;
use crate::tensor::{Real, Tensor};

pub const PROB_FLOOR: f64 = 1e-12;

const STREAM_SHUFFLE: u64 = 1;
const STREAM_AUGMENT: u64 = 2;

#[derive(Clone, Debug, PartialEq)]
pub enum ClassWeights {
    /// Inverse class frequency of the training slices.
    Auto,
    Explicit(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub class_weights: ClassWeights,
    pub momentum: f64,
    pub weight_decay: f64,
    pub augment: AugmentParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 40,
            learning_rate: 0.0005,
            epochs: 100,
            seed: 0,
            class_weights: ClassWeights::Auto,
            momentum: 0.0,
            weight_decay: 0.0,
            augment: AugmentParams::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size must be at least 2 for batch statistics, got {}",
                self.batch_size
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0,1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if let ClassWeights::Explicit(w) = &self.class_weights {
            if w.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
                return Err(Error::Config(format!("class weights must be positive, got {w:?}")));
            }
        }
        self.augment.validate()
    }
}

/// `w_c = N / (C·N_c)`; every class in `0..num_classes` must occur.
pub fn class_weights_auto(labels: &[usize], num_classes: usize) -> Result<Vec<f64>> {
    let mut counts = vec![0usize; num_classes];
    for &l in labels {
        if l >= num_classes {
            return Err(Error::Config(format!("label {l} outside 0..{num_classes}")));
        }
        counts[l] += 1;
    }
    if let Some(missing) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Config(format!(
            "class {missing} has no samples; automatic class weights are undefined, pass explicit weights"
        )));
    }
    let n = labels.len() as f64;
    Ok(counts.iter().map(|&c| n / (num_classes as f64 * c as f64)).collect())
}

/// Mean weighted negative log-likelihood and its gradient with respect to
/// the logits that produced `probs` (softmax fused).
pub fn weighted_cross_entropy<T: Real>(
    probs: &Tensor<T>,
    labels: &[usize],
    weights: &[f64],
) -> Result<(f64, Tensor<T>)> {
    let (n, k) = probs.dims2("weighted_cross_entropy")?;
    if labels.len() != n || weights.len() != k {
        return Err(Error::shape(
            "weighted_cross_entropy",
            format!(
                "{n} rows and {k} classes vs {} labels and {} weights",
                labels.len(),
                weights.len()
            ),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::shape(
            "weighted_cross_entropy",
            format!("label {bad} outside 0..{k}"),
        ));
    }
    let mut loss = 0.0;
    let mut grad = vec![T::zero(); n * k];
    for (i, (row, &y)) in probs.data().chunks(k).zip(labels).enumerate() {
        let w = weights[y];
        loss += -w * row[y].as_f64().max(PROB_FLOOR).ln();
        for (j, &p) in row.iter().enumerate() {
            let target = if j == y { 1.0 } else { 0.0 };
            grad[i * k + j] = T::from_f64(w * (p.as_f64() - target) / n as f64);
        }
    }
    Ok((loss / n as f64, Tensor::from_vec(&[n, k], grad)?))
}

/// `θ ← θ − lr·g` over raw buffers.
pub fn sgd_step<T: Real>(params: &mut [T], grads: &[T], lr: f64) {
    assert_eq!(params.len(), grads.len(), "parameter and gradient lengths differ");
    let lr = T::from_f64(lr);
    for (p, &g) in params.iter_mut().zip(grads) {
        *p -= lr * g;
    }
}

/// SGD over every parameter of a graph, with optional momentum and weight decay.
pub struct Sgd<T: Real> {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(learning_rate: f64, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            learning_rate,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, graph: &mut LayerGraph<T>) {
        let slots: Vec<ParamSlot> = graph.parameter_slots();
        if self.momentum > 0.0 && self.velocity.is_empty() {
            self.velocity = slots.iter().map(|&s| vec![T::zero(); graph.param(s).len()]).collect();
        }
        let (mu, wd) = (T::from_f64(self.momentum), T::from_f64(self.weight_decay));
        for (i, &slot) in slots.iter().enumerate() {
            let t = graph.param_mut(slot);
            let Some(g) = t.grad().map(<[T]>::to_vec) else { continue };
            let mut g = g;
            if self.weight_decay > 0.0 {
                for (gv, &p) in g.iter_mut().zip(t.data()) {
                    *gv += wd * p;
                }
            }
            if self.momentum > 0.0 {
                let v = &mut self.velocity[i];
                for (vv, gv) in v.iter_mut().zip(g.iter_mut()) {
                    *vv = mu * *vv + *gv;
                    *gv = *vv;
                }
            }
            sgd_step(t.data_mut(), &g, self.learning_rate);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub slice_accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,mean_loss,slice_accuracy\n");
        for r in &self.epochs {
            out.push_str(&format!("{},{:.8},{:.6}\n", r.epoch, r.mean_loss, r.slice_accuracy));
        }
        out
    }
}

/// Stacks single-channel slices into `[N,1,S,S]`.
pub fn stack_images(samples: &[&SliceSample]) -> Result<Tensor<f32>> {
    let side = samples
        .first()
        .map(|s| s.side)
        .ok_or_else(|| Error::Data("empty batch".into()))?;
    let mut data = Vec::with_capacity(samples.len() * side * side);
    for s in samples {
        if s.side != side {
            return Err(Error::Data(format!(
                "mixed slice sizes {} and {side} in one batch",
                s.side
            )));
        }
        data.extend_from_slice(&s.image);
    }
    Tensor::from_vec(&[samples.len(), 1, side, side], data)
}

fn check_input_size(graph: &LayerGraph<f32>, samples: &[SliceSample]) -> Result<()> {
    let want = graph.input_shape()[1];
    if let Some(s) = samples.iter().find(|s| s.side != want) {
        return Err(Error::Config(format!(
            "slices are {0}x{0} but the network expects {want}x{want} input",
            s.side
        )));
    }
    Ok(())
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Trains in place. Each epoch reshuffles (seeded by epoch), augments every
/// sample from its own seeded stream, drops the final partial batch and
/// reports to `sink` after the epoch.
pub fn train(
    graph: &mut LayerGraph<f32>,
    slices: &[SliceSample],
    config: &TrainConfig,
    sink: &mut dyn FnMut(&EpochRecord, &LayerGraph<f32>) -> Result<()>,
) -> Result<TrainReport> {
    config.validate()?;
    let mut report = TrainReport::default();
    if config.epochs == 0 {
        return Ok(report);
    }
    if slices.len() < config.batch_size {
        return Err(Error::Data(format!(
            "{} training slices are fewer than one batch of {}",
            slices.len(),
            config.batch_size
        )));
    }
    check_input_size(graph, slices)?;
    let k = graph.num_classes();
    let labels: Vec<usize> = slices.iter().map(|s| s.label.index()).collect();
    let weights = match &config.class_weights {
        ClassWeights::Auto => class_weights_auto(&labels, k)?,
        ClassWeights::Explicit(w) if w.len() == k => w.clone(),
        ClassWeights::Explicit(w) => {
            return Err(Error::Config(format!(
                "{} class weights given for {k} classes",
                w.len()
            )))
        }
    };
    let mut opt = Sgd::new(config.learning_rate, config.momentum, config.weight_decay);
    let identity = config.augment.is_identity();

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..slices.len()).collect();
        order.shuffle(&mut seed::rng(config.seed, &[STREAM_SHUFFLE, epoch as u64]));
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        let batches = slices.len() / config.batch_size;
        for b in 0..batches {
            let idx = &order[b * config.batch_size..(b + 1) * config.batch_size];
            let augmented: Vec<SliceSample> = if identity {
                Vec::new()
            } else {
                idx.iter()
                    .map(|&i| {
                        let mut rng = seed::rng(config.seed, &[STREAM_AUGMENT, epoch as u64, i as u64]);
                        augment::augment(&slices[i], &config.augment, &mut rng)
                    })
                    .collect()
            };
            let refs: Vec<&SliceSample> = if identity {
                idx.iter().map(|&i| &slices[i]).collect()
            } else {
                augmented.iter().collect()
            };
            let batch = stack_images(&refs)?;
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();

            let trace = graph.forward_trace(&batch, Mode::Train)?;
            let probs = trace.value(graph.output());
            let (loss, grad) = weighted_cross_entropy(probs, &y, &weights)?;
            if !loss.is_finite() || !probs.all_finite() {
                return Err(Error::Numerical {
                    epoch,
                    batch: b,
                    detail: format!("loss became {loss}"),
                });
            }
            for (row, &t) in probs.data().chunks(k).zip(&y) {
                let row: Vec<f64> = row.iter().map(|&v| v as f64).collect();
                correct += (argmax(&row) == t) as usize;
            }
            seen += y.len();
            loss_sum += loss;
            graph.backward(&trace, graph.logits(), grad, BackwardOptions::default())?;
            graph.commit(&trace);
            opt.step(graph);
        }
        let record = EpochRecord {
            epoch,
            mean_loss: loss_sum / batches as f64,
            slice_accuracy: correct as f64 / seen as f64,
        };
        log::info!(
            "epoch {epoch}: loss {:.5}, slice accuracy {:.4}",
            record.mean_loss,
            record.slice_accuracy
        );
        sink(&record, graph)?;
        report.epochs.push(record);
    }
    Ok(report)
}

/// Patient-level probabilities: the mean of its slice probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct PatientPrediction {
    pub patient_id: String,
    pub probs: Vec<f64>,
    pub predicted: usize,
    pub n_slices: usize,
}

/// Averages slice probability vectors; ties go to the lowest class index.
pub fn aggregate_patient(slice_probs: &[Vec<f64>], patient_id: &str) -> Result<PatientPrediction> {
    let first = slice_probs.first().ok_or_else(|| {
        Error::Data(format!(
            "patient {patient_id}: no slices survived filtering, nothing to aggregate"
        ))
    })?;
    let k = first.len();
    let mut mean = vec![0.0; k];
    for p in slice_probs {
        if p.len() != k {
            return Err(Error::Data(format!(
                "patient {patient_id}: probability vectors differ in length"
            )));
        }
        for (m, v) in mean.iter_mut().zip(p) {
            *m += v;
        }
    }
    let n = slice_probs.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    Ok(PatientPrediction {
        patient_id: patient_id.to_string(),
        predicted: argmax(&mean),
        probs: mean,
        n_slices: slice_probs.len(),
    })
}

pub const PREDICT_BATCH: usize = 32;

/// Eval-mode class probabilities for every slice.
pub fn predict_slices(graph: &LayerGraph<f32>, samples: &[SliceSample]) -> Result<Vec<Vec<f64>>> {
    check_input_size(graph, samples)?;
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(PREDICT_BATCH) {
        let refs: Vec<&SliceSample> = chunk.iter().collect();
        let probs = graph.predict(&stack_images(&refs)?)?;
        let k = probs.shape()[1];
        out.extend(
            probs
                .data()
                .chunks(k)
                .map(|r| r.iter().map(|&v| v as f64).collect::<Vec<f64>>()),
        );
    }
    Ok(out)
}

/// One prediction per patient, in order of first appearance in `samples`.
pub fn predict_patients(graph: &LayerGraph<f32>, samples: &[SliceSample]) -> Result<Vec<PatientPrediction>> {
    let probs = predict_slices(graph, samples)?;
    let mut order: Vec<&str> = Vec::new();
    let mut groups: std::collections::HashMap<&str, Vec<Vec<f64>>> = std::collections::HashMap::new();
    for (s, p) in samples.iter().zip(probs) {
        let entry = groups.entry(s.patient_id.as_str()).or_insert_with(|| {
            order.push(s.patient_id.as_str());
            Vec::new()
        });
        entry.push(p);
    }
    order.into_iter().map(|id| aggregate_patient(&groups[id], id)).collect()
}
