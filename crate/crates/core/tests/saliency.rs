//! Guided and vanilla gradient maps on hand-built and random networks.

mod common;

use common::{random_tensor, randomize_affine};
use densecyst::graph::{GraphBuilder, ParamSlot};
use densecyst::saliency::{self, gradient_map, guided_backprop, vanilla_gradient, SaliencyOptions};
use densecyst::zoo::{build_densenet, init_parameters};
use densecyst::{DenseNetSpec, Error, LayerGraph, Mode, NodeId, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// conv1x1(w) → ReLU → global average → linear(v): logit = v/4 · Σ relu(w·xᵢ) on 2×2.
fn toy(w: f64, v: f64) -> LayerGraph<f64> {
    let mut b = GraphBuilder::<f64>::new(1, 2, 2);
    let c = b.conv(0, 1, 1, 1, 0).unwrap();
    let r = b.relu(c);
    let p = b.global_avg_pool(r).unwrap();
    let l = b.linear(p, 1, false).unwrap();
    let mut g = b.finish(l, l);
    g.param_mut(ParamSlot::Param(0)).data_mut()[0] = w;
    g.param_mut(ParamSlot::Param(1)).data_mut()[0] = v;
    g
}

fn image(values: &[f64], side: usize) -> Tensor<f64> {
    Tensor::from_vec(&[1, 1, side, side], values.to_vec()).unwrap()
}

#[test]
fn toy_net_matches_hand_computation() {
    let x = image(&[1.0, -2.0, 3.0, 0.5], 2);
    // w·x = [-0.5, 1, -1.5, -0.25]: only pixel 1 is active; its gradient is w·v/4
    let map = guided_backprop(&toy(-0.5, 2.0), &x, Some(0)).unwrap();
    assert_eq!(map.raw, vec![0.0, -0.25, 0.0, 0.0]);
    assert_eq!((map.min, map.max), (-0.25, 0.0));
    assert_eq!(map.values, vec![1.0, 0.0, 1.0, 1.0]);

    // w > 0 activates pixels 0, 2 and 3 (w·x > 0)
    let map = guided_backprop(&toy(0.5, 2.0), &x, Some(0)).unwrap();
    assert_eq!(map.raw, vec![0.25, 0.0, 0.25, 0.25]);

    // a negative downstream gradient is blocked by the guided gate but not by the plain one
    let guided = guided_backprop(&toy(0.5, -2.0), &x, Some(0)).unwrap();
    assert!(guided.is_zero() && !guided.normalized);
    let plain = vanilla_gradient(&toy(0.5, -2.0), &x, Some(0)).unwrap();
    assert_eq!(plain.raw, vec![-0.25, 0.0, -0.25, -0.25]);
}

#[test]
fn negative_first_relu_gives_zero_map() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut b = GraphBuilder::<f64>::new(1, 8, 8);
    let c = b.conv(0, 3, 3, 1, 1).unwrap();
    let r = b.relu(c);
    let c2 = b.conv(r, 4, 3, 1, 1).unwrap();
    let p = b.global_avg_pool(c2).unwrap();
    let l = b.linear(p, 4, true).unwrap();
    let s = b.softmax(l).unwrap();
    let mut g = b.finish(l, s);
    init_parameters(&mut g, 1);
    for v in g.param_mut(ParamSlot::Param(0)).data_mut() {
        *v = -v.abs() - 0.01;
    }
    let x = random_tensor::<f64>(&[1, 1, 8, 8], 0.1, 1.0, &mut rng);
    for target in 0..4 {
        let map = guided_backprop(&g, &x, Some(target)).unwrap();
        assert!(map.is_zero(), "target {target}");
        assert!(!map.normalized);
        assert!(map.values.iter().all(|&v| v == 0.0));
    }
}

#[test]
fn linear_net_map_is_the_weight_pattern() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let side = 5;
    let mut b = GraphBuilder::<f64>::new(1, side, side);
    let c = b.conv(0, 3, side, 1, 0).unwrap();
    let p = b.global_avg_pool(c).unwrap();
    let s = b.softmax(p).unwrap();
    let mut g = b.finish(p, s);
    let w: Vec<f64> = (0..3 * side * side).map(|_| rng.random_range(-1.0..1.0)).collect();
    g.param_mut(ParamSlot::Param(0)).data_mut().copy_from_slice(&w);
    let x = random_tensor::<f64>(&[1, 1, side, side], 0.0, 1.0, &mut rng);
    for target in 0..3 {
        let kernel = &w[target * side * side..(target + 1) * side * side];
        let guided = guided_backprop(&g, &x, Some(target)).unwrap();
        let plain = vanilla_gradient(&g, &x, Some(target)).unwrap();
        assert_eq!(guided, plain);
        assert_eq!(guided.raw, kernel);
        let peak = kernel.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let signed: Vec<f64> = kernel.iter().map(|v| v / peak).collect();
        assert_eq!(guided.signed_normalized(), signed);
    }
}

#[test]
fn relu_free_nets_agree_with_vanilla() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = GraphBuilder::<f64>::new(1, 8, 8);
        let c = b.conv(0, 3, 3, 1, 1).unwrap();
        let n = b.batchnorm(c).unwrap();
        let p = b.pool(n, densecyst::ops::PoolKind::Max).unwrap();
        let c2 = b.conv(p, 2, 1, 1, 0).unwrap();
        let cat = b.concat(&[p, c2]).unwrap();
        let g_ = b.global_avg_pool(cat).unwrap();
        let l = b.linear(g_, 4, true).unwrap();
        let s = b.softmax(l).unwrap();
        let mut g = b.finish(l, s);
        init_parameters(&mut g, seed);
        randomize_affine(&mut g, &mut rng);
        let x = random_tensor::<f64>(&[1, 1, 8, 8], 0.0, 1.0, &mut rng);
        assert_eq!(
            guided_backprop(&g, &x, None).unwrap(),
            vanilla_gradient(&g, &x, None).unwrap()
        );
    }
}

fn random_densenet(seed: u64) -> (LayerGraph<f64>, Tensor<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = DenseNetSpec {
        num_blocks: rng.random_range(1..3),
        layers_per_block: rng.random_range(1..4),
        growth_rate: rng.random_range(1..5),
        initial_channels: rng.random_range(1..6),
        input_size: 8,
        ..DenseNetSpec::default()
    };
    let mut g = build_densenet::<f64>(&spec).unwrap();
    init_parameters(&mut g, seed);
    randomize_affine(&mut g, &mut rng);
    for bn in g.bn_states_mut() {
        bn.running_mean
            .iter_mut()
            .for_each(|v| *v = rng.random_range(-0.3..0.3));
        bn.running_var.iter_mut().for_each(|v| *v = rng.random_range(0.5..1.5));
    }
    let x = random_tensor(&[1, 1, 8, 8], 0.0, 1.0, &mut rng);
    (g, x)
}

#[test]
fn guided_gate_holds_at_every_relu() {
    for seed in 0..50 {
        let (g, x) = random_densenet(seed);
        let mut visits = 0usize;
        let mut probe = |node: NodeId, out: &Tensor<f64>, grad: &Tensor<f64>| {
            visits += 1;
            for (o, gx) in out.data().iter().zip(grad.data()) {
                assert!(*gx >= 0.0, "seed {seed}, node {node}: negative gradient {gx}");
                if *o <= 0.0 {
                    assert_eq!(*gx, 0.0, "seed {seed}, node {node}: gradient through an inactive unit");
                }
            }
        };
        let opts = SaliencyOptions {
            probe: Some(&mut probe),
            ..SaliencyOptions::default()
        };
        gradient_map(&g, &x, opts).unwrap();
        let relus = g.count_kind(|k| matches!(k, densecyst::graph::OpKind::Relu));
        assert!(
            visits > 0 && visits <= relus,
            "seed {seed}: {visits} of {relus} ReLUs visited"
        );
    }
}

#[test]
fn vanilla_map_matches_finite_differences() {
    for seed in 0..10 {
        let (g, x) = random_densenet(seed);
        let map = vanilla_gradient(&g, &x, Some(1)).unwrap();
        let logit = |img: &Tensor<f64>| g.forward_trace(img, Mode::Eval).unwrap().value(g.logits()).data()[1];
        let h = 1e-6;
        for i in 0..x.len() {
            let mut p = x.clone();
            p.data_mut()[i] += h;
            let mut m = x.clone();
            m.data_mut()[i] -= h;
            let numeric = (logit(&p) - logit(&m)) / (2.0 * h);
            let err = (map.raw[i] - numeric).abs() / map.raw[i].abs().max(1.0);
            assert!(err < 1e-4, "seed {seed}, pixel {i}: {} vs {numeric}", map.raw[i]);
        }
    }
}

#[test]
fn zero_image_on_bias_free_net_is_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut b = GraphBuilder::<f64>::new(1, 6, 6);
    let c = b.conv(0, 3, 3, 1, 1).unwrap();
    let r = b.relu(c);
    let p = b.global_avg_pool(r).unwrap();
    let l = b.linear(p, 4, false).unwrap();
    let mut g = b.finish(l, l);
    init_parameters(&mut g, 3);
    randomize_affine(&mut g, &mut rng);
    let zero = Tensor::zeros(&[1, 1, 6, 6]);
    let logits = g.forward_trace(&zero, Mode::Eval).unwrap().value(l).clone();
    assert!(logits.data().iter().all(|&v| v == 0.0));
    assert!(vanilla_gradient(&g, &zero, Some(2)).unwrap().is_zero());
}

#[test]
fn seed_scale_and_determinism() {
    let (g, x) = random_densenet(7);
    let base = guided_backprop(&g, &x, Some(0)).unwrap();
    assert_eq!(base, guided_backprop(&g, &x, Some(0)).unwrap());
    for c in [4.0, 0.25, 3.0] {
        let scaled = gradient_map(
            &g,
            &x,
            SaliencyOptions {
                target: Some(0),
                seed_scale: c,
                ..SaliencyOptions::default()
            },
        )
        .unwrap();
        for (a, b) in scaled.raw.iter().zip(&base.raw) {
            assert!((a - c * b).abs() <= 1e-12 * (c * b).abs().max(1e-300), "scale {c}");
        }
        for (a, b) in scaled.values.iter().zip(&base.values) {
            assert!((a - b).abs() < 1e-12, "scale {c}");
        }
        if c == 4.0 || c == 0.25 {
            assert_eq!(scaled.values, base.values, "power-of-two scale is exact");
        }
    }
}

#[test]
fn target_out_of_range_is_rejected() {
    let (g, x) = random_densenet(8);
    let err = guided_backprop(&g, &x, Some(4)).unwrap_err();
    assert!(matches!(err, Error::Usage(_)), "{err}");
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn pgm_quantization_and_round_trip() {
    let map = densecyst::saliency::SaliencyMap {
        width: 2,
        height: 2,
        target: 0,
        patient_id: None,
        slice_index: None,
        raw: vec![0.0, 1.0, 0.5, 0.5],
        values: vec![0.0, 1.0, 0.5, 0.5],
        min: 0.0,
        max: 1.0,
        normalized: true,
    };
    let bytes = saliency::encode_pgm(&map);
    assert_eq!(&bytes[..11], b"P5\n2 2\n255\n");
    assert_eq!(&bytes[11..], &[0, 255, 128, 128]);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.pgm");
    saliency::write_map_pgm(&map, &path).unwrap();
    assert_eq!(saliency::read_pgm(&path).unwrap(), (2, 2, vec![0, 255, 128, 128]));
}
