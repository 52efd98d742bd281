#![allow(dead_code)]

use densecyst::graph::ParamSlot;
use densecyst::{LayerGraph, Real, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn random_tensor<T: Real>(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| T::from_f64(rng.random_range(lo..hi))).collect()).unwrap()
}

/// Moves normalization scales and shifts away from the identity so their
/// gradients are exercised.
pub fn randomize_affine<T: Real>(graph: &mut LayerGraph<T>, rng: &mut ChaCha8Rng) {
    for slot in graph.parameter_slots() {
        match slot {
            ParamSlot::Gamma(_) | ParamSlot::Beta(_) => {
                for v in graph.param_mut(slot).data_mut() {
                    *v = T::from_f64(rng.random_range(0.5..1.5) * if rng.random_bool(0.2) { -1.0 } else { 1.0 });
                }
            }
            ParamSlot::Param(_) if graph.param(slot).shape().len() == 1 => {
                for v in graph.param_mut(slot).data_mut() {
                    *v = T::from_f64(rng.random_range(-0.5..0.5));
                }
            }
            ParamSlot::Param(_) => {}
        }
    }
}
