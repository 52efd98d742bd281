//! Per-channel batch normalization over `[N,C,H,W]` activations.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Train,
    Eval,
}

/// Affine parameters and running statistics of one normalization layer.
///
/// `momentum` weighs the previous running value:
/// `running ← momentum·running + (1−momentum)·batch`.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<T: Real = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub epsilon: f64,
    pub momentum: f64,
}

impl<T: Real> BatchNormState<T> {
    pub fn new(channels: usize, epsilon: f64, momentum: f64) -> Result<Self> {
        if !(epsilon > 0.0) {
            return Err(Error::Config(format!(
                "batchnorm epsilon must be positive, got {epsilon}"
            )));
        }
        if !(momentum > 0.0 && momentum < 1.0) {
            return Err(Error::Config(format!(
                "batchnorm momentum must lie in (0,1), got {momentum}"
            )));
        }
        Ok(BatchNormState {
            gamma: Tensor::full(&[channels], T::one()),
            beta: Tensor::zeros(&[channels]),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            epsilon,
            momentum,
        })
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    /// Folds batch statistics into the running estimates.
    pub fn commit(&mut self, stats: &BatchStats) {
        let m = self.momentum;
        for c in 0..self.channels() {
            let mean = m * self.running_mean[c].as_f64() + (1.0 - m) * stats.mean[c];
            let var = m * self.running_var[c].as_f64() + (1.0 - m) * stats.unbiased_var[c];
            self.running_mean[c] = T::from_f64(mean);
            // keep strictly positive even after long runs of constant channels
            self.running_var[c] = T::from_f64(var).max(T::min_positive_value());
        }
    }

    pub fn cast<U: Real>(&self) -> BatchNormState<U> {
        BatchNormState {
            gamma: self.gamma.cast(),
            beta: self.beta.cast(),
            running_mean: self.running_mean.iter().map(|v| U::from_f64(v.as_f64())).collect(),
            running_var: self.running_var.iter().map(|v| U::from_f64(v.as_f64())).collect(),
            epsilon: self.epsilon,
            momentum: self.momentum,
        }
    }
}

/// Batch statistics measured during a train-mode forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub unbiased_var: Vec<f64>,
}

/// What the backward pass needs from the forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormCache {
    pub mode: Mode,
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
}

const LANES: usize = 8;

/// f64 sum of `f(x)` with independent lane accumulators so the loop vectorizes.
#[inline]
fn lane_sum<T: Real>(xs: &[T], f: impl Fn(f64) -> f64) -> f64 {
    let mut acc = [0.0f64; LANES];
    let chunks = xs.chunks_exact(LANES);
    let tail: f64 = chunks.remainder().iter().map(|v| f(v.as_f64())).sum();
    for ch in chunks {
        for (a, v) in acc.iter_mut().zip(ch) {
            *a += f(v.as_f64());
        }
    }
    acc.iter().sum::<f64>() + tail
}

/// Paired form of [`lane_sum`] over two equal-length slices.
#[inline]
fn lane_sum2<T: Real>(a: &[T], b: &[T], f: impl Fn(f64, f64) -> (f64, f64)) -> (f64, f64) {
    let (mut s0, mut s1) = ([0.0f64; LANES], [0.0f64; LANES]);
    let (ca, cb) = (a.chunks_exact(LANES), b.chunks_exact(LANES));
    let (mut t0, mut t1) = (0.0, 0.0);
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        let (p, q) = f(x.as_f64(), y.as_f64());
        t0 += p;
        t1 += q;
    }
    for (x, y) in ca.zip(cb) {
        for i in 0..LANES {
            let (p, q) = f(x[i].as_f64(), y[i].as_f64());
            s0[i] += p;
            s1[i] += q;
        }
    }
    (s0.iter().sum::<f64>() + t0, s1.iter().sum::<f64>() + t1)
}

/// Normalizes without touching `state`; train-mode batch statistics are
/// returned for a later [`BatchNormState::commit`].
pub fn batchnorm_forward<T: Real>(
    input: &Tensor<T>,
    state: &BatchNormState<T>,
    mode: Mode,
) -> Result<(Tensor<T>, BatchNormCache, Option<BatchStats>)> {
    let (n, c, h, w) = input.dims4("batchnorm")?;
    if c != state.channels() {
        return Err(Error::shape(
            "batchnorm",
            format!("input has C={c} channels but the layer normalizes {}", state.channels()),
        ));
    }
    if !(state.epsilon > 0.0) {
        return Err(Error::Config(format!(
            "batchnorm epsilon must be positive, got {}",
            state.epsilon
        )));
    }
    let plane = h * w;
    let count = n * plane;
    let x = input.data();

    let (mean, var, stats) = match mode {
        Mode::Train => {
            if count < 2 {
                return Err(Error::Config(format!(
                    "train-mode batchnorm needs N·H·W ≥ 2 values per channel, got {count}"
                )));
            }
            let mut mean = vec![0.0f64; c];
            let mut var = vec![0.0f64; c];
            for ch in 0..c {
                let mut sum = 0.0;
                for b in 0..n {
                    let off = (b * c + ch) * plane;
                    sum += lane_sum(&x[off..off + plane], |v| v);
                }
                let mu = sum / count as f64;
                let mut sq = 0.0;
                for b in 0..n {
                    let off = (b * c + ch) * plane;
                    sq += lane_sum(&x[off..off + plane], |v| (v - mu) * (v - mu));
                }
                mean[ch] = mu;
                var[ch] = sq / count as f64;
            }
            let unbiased_var = var.iter().map(|v| v * count as f64 / (count - 1) as f64).collect();
            let stats = BatchStats {
                mean: mean.clone(),
                unbiased_var,
            };
            (mean, var, Some(stats))
        }
        Mode::Eval => (
            state.running_mean.iter().map(|v| v.as_f64()).collect(),
            state.running_var.iter().map(|v| v.as_f64()).collect::<Vec<_>>(),
            None,
        ),
    };

    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + state.epsilon).sqrt()).collect();
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            let scale = state.gamma.data()[ch].as_f64() * inv_std[ch];
            let shift = state.beta.data()[ch].as_f64() - mean[ch] * scale;
            let (scale, shift) = (T::from_f64(scale), T::from_f64(shift));
            for (o, &v) in out[off..off + plane].iter_mut().zip(&x[off..off + plane]) {
                *o = v * scale + shift;
            }
        }
    }
    let cache = BatchNormCache { mode, mean, inv_std };
    Ok((Tensor::from_parts(input.shape().to_vec(), out), cache, stats))
}

/// Forward pass that also updates running statistics in train mode.
pub fn batchnorm<T: Real>(input: &Tensor<T>, state: &mut BatchNormState<T>, mode: Mode) -> Result<Tensor<T>> {
    let (out, _, stats) = batchnorm_forward(input, state, mode)?;
    if let Some(stats) = stats {
        state.commit(&stats);
    }
    Ok(out)
}

/// Returns `(grad_input, grad_gamma, grad_beta)`.
pub fn batchnorm_backward<T: Real>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    cache: &BatchNormCache,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    if grad_out.shape() != input.shape() {
        return Err(Error::shape(
            "batchnorm_backward",
            format!("grad_out {:?} vs input {:?}", grad_out.shape(), input.shape()),
        ));
    }
    let (n, c, h, w) = input.dims4("batchnorm_backward")?;
    let plane = h * w;
    let count = (n * plane) as f64;
    let (x, gy) = (input.data(), grad_out.data());
    let mut gx = vec![T::zero(); x.len()];
    let mut ggamma = vec![T::zero(); c];
    let mut gbeta = vec![T::zero(); c];

    for ch in 0..c {
        let (mu, inv) = (cache.mean[ch], cache.inv_std[ch]);
        let mut sum_g = 0.0;
        let mut sum_gx = 0.0;
        for b in 0..n {
            let off = (b * c + ch) * plane;
            let (sg, sgx) = lane_sum2(&gy[off..off + plane], &x[off..off + plane], |g, v| (g, g * (v - mu)));
            sum_g += sg;
            sum_gx += sgx * inv;
        }
        ggamma[ch] = T::from_f64(sum_gx);
        gbeta[ch] = T::from_f64(sum_g);
        let gm = gamma.data()[ch].as_f64() * inv;
        for b in 0..n {
            let off = (b * c + ch) * plane;
            let dst = &mut gx[off..off + plane];
            match cache.mode {
                Mode::Train => {
                    let mean_g = sum_g / count;
                    let mean_gx = sum_gx / count;
                    // gm·(g − mean_g − x̂·mean_gx) expanded to a·g + b·x + c
                    let b_x = -gm * inv * mean_gx;
                    let (a, bx, c0) = (T::from_f64(gm), T::from_f64(b_x), T::from_f64(-gm * mean_g - b_x * mu));
                    for ((o, &g), &v) in dst.iter_mut().zip(&gy[off..off + plane]).zip(&x[off..off + plane]) {
                        *o = a * g + bx * v + c0;
                    }
                }
                Mode::Eval => {
                    let a = T::from_f64(gm);
                    for (o, &g) in dst.iter_mut().zip(&gy[off..off + plane]) {
                        *o = a * g;
                    }
                }
            }
        }
    }
    Ok((
        Tensor::from_parts(input.shape().to_vec(), gx),
        Tensor::from_parts(vec![c], ggamma),
        Tensor::from_parts(vec![c], gbeta),
    ))
}
