//! Central finite differences against every analytic backward pass, 64-bit.

mod common;

use common::{random_tensor, randomize_affine};
use densecyst::gradcheck::{check_all, FdOptions};
use densecyst::graph::GraphBuilder;
use densecyst::ops::PoolKind;
use densecyst::zoo::{build_densenet, init_parameters};
use densecyst::{DenseNetSpec, LayerGraph, Mode, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: u64 = 100;
const TOL: f64 = 1e-4;

fn opts(seed: u64, mode: Mode) -> FdOptions {
    FdOptions {
        step: 1e-6,
        mode,
        max_coords: 12,
        seed,
        node: None,
    }
}

fn check(name: &str, seed: u64, graph: &mut LayerGraph<f64>, x: &Tensor<f64>, mode: Mode) {
    let r = check_all(graph, x, &opts(seed, mode)).unwrap();
    assert!(
        r.max_error < TOL,
        "{name}, seed {seed}: relative error {:e}",
        r.max_error
    );
    // kinks are rare; a systematic skip would hide a broken backward pass
    assert!(r.kink_skips * 10 <= r.checked, "{name}, seed {seed}: {r:?}");
}

fn single_op(
    seed: u64,
    op: impl Fn(&mut GraphBuilder<f64>, usize, &mut ChaCha8Rng) -> usize,
) -> (LayerGraph<f64>, Tensor<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, c) = (rng.random_range(1..4), rng.random_range(1..4));
    let (h, w) = (2 * rng.random_range(1..4), 2 * rng.random_range(1..4));
    let mut b = GraphBuilder::<f64>::new(c, h, w);
    let y = op(&mut b, 0, &mut rng);
    let mut g = b.finish(y, y);
    init_parameters(&mut g, seed);
    randomize_affine(&mut g, &mut rng);
    let x = random_tensor(&[n, c, h, w], -1.0, 1.0, &mut rng);
    (g, x)
}

#[test]
fn convolution() {
    for seed in 0..SEEDS {
        let (mut g, x) = single_op(seed, |b, x, rng| {
            let side = b.shape(x)[1].min(b.shape(x)[2]);
            let k = rng.random_range(1..=side.min(3));
            let pad = rng.random_range(0..k);
            b.conv(x, rng.random_range(1..4), k, 1, pad).unwrap()
        });
        check("conv", seed, &mut g, &x, Mode::Eval);
    }
}

#[test]
fn strided_convolution() {
    for seed in 0..SEEDS {
        let (mut g, x) = single_op(seed, |b, x, rng| b.conv(x, rng.random_range(1..4), 2, 2, 0).unwrap());
        check("strided conv", seed, &mut g, &x, Mode::Eval);
    }
}

#[test]
fn batchnorm_both_modes() {
    for seed in 0..SEEDS {
        let (mut g, x) = single_op(seed, |b, x, _| b.batchnorm(x).unwrap());
        if x.shape()[0] * x.shape()[2] * x.shape()[3] >= 2 {
            check("batchnorm train", seed, &mut g, &x, Mode::Train);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb7);
        for bn in g.bn_states_mut() {
            bn.running_mean
                .iter_mut()
                .for_each(|v| *v = rng.random_range(-0.5..0.5));
            bn.running_var.iter_mut().for_each(|v| *v = rng.random_range(0.2..2.0));
        }
        check("batchnorm eval", seed, &mut g, &x, Mode::Eval);
    }
}

#[test]
fn relu_pooling_and_softmax() {
    for seed in 0..SEEDS {
        let (mut g, x) = single_op(seed, |b, x, _| b.relu(x));
        check("relu", seed, &mut g, &x, Mode::Eval);
        for kind in [PoolKind::Max, PoolKind::Avg] {
            let (mut g, x) = single_op(seed, |b, x, _| b.pool(x, kind).unwrap());
            check("pool2x2", seed, &mut g, &x, Mode::Eval);
        }
        let (mut g, x) = single_op(seed, |b, x, _| b.global_avg_pool(x).unwrap());
        check("global average pool", seed, &mut g, &x, Mode::Eval);
        let (mut g, x) = single_op(seed, |b, x, rng| {
            let p = b.global_avg_pool(x).unwrap();
            let l = b.linear(p, rng.random_range(2..6), true).unwrap();
            b.softmax(l).unwrap()
        });
        check("linear + softmax", seed, &mut g, &x, Mode::Eval);
    }
}

#[test]
fn concatenation_fans_gradients_back() {
    for seed in 0..SEEDS {
        let (mut g, x) = single_op(seed, |b, x, rng| {
            let a = b.conv(x, rng.random_range(1..3), 1, 1, 0).unwrap();
            let c = b.concat(&[x, a]).unwrap();
            b.conv(c, 2, 3, 1, 1).unwrap()
        });
        check("concat", seed, &mut g, &x, Mode::Eval);
    }
}

#[test]
fn tiny_densenet_end_to_end() {
    let spec = DenseNetSpec {
        num_blocks: 1,
        layers_per_block: 2,
        growth_rate: 2,
        initial_channels: 4,
        input_size: 16,
        ..DenseNetSpec::default()
    };
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = build_densenet::<f64>(&spec).unwrap();
        init_parameters(&mut g, seed);
        randomize_affine(&mut g, &mut rng);
        let x = random_tensor(&[2, 1, 16, 16], 0.0, 1.0, &mut rng);
        let mode = if seed % 2 == 0 { Mode::Train } else { Mode::Eval };
        check("tiny densenet", seed, &mut g, &x, mode);
    }
}
