//! Times forward, backward and optimizer phases of one training step.
//!
//! `cargo run --release -p densecyst-core --example step_timing -- [batch] [input] [blocks] [layers] [growth]`

use std::time::Instant;

use densecyst::graph::BackwardOptions;
use densecyst::train::{weighted_cross_entropy, Sgd};
use densecyst::zoo::{build_densenet, init_parameters};
use densecyst::{DenseNetSpec, Mode, Tensor};

fn main() {
    densecyst::runtime::retain_freed_memory();
    let arg = |i: usize, d: usize| std::env::args().nth(i).and_then(|s| s.parse().ok()).unwrap_or(d);
    let (batch, input) = (arg(1, 40), arg(2, 64));
    let spec = DenseNetSpec {
        num_blocks: arg(3, 2),
        layers_per_block: arg(4, 4),
        growth_rate: arg(5, 8),
        initial_channels: 2 * arg(5, 8),
        input_size: input,
        ..DenseNetSpec::default()
    };
    let mut g = build_densenet::<f32>(&spec).unwrap();
    init_parameters(&mut g, 1);
    let x = Tensor::from_vec(
        &[batch, 1, input, input],
        (0..batch * input * input)
            .map(|i| ((i * 7919) % 1000) as f32 / 1000.0)
            .collect(),
    )
    .unwrap();
    let labels: Vec<usize> = (0..batch).map(|i| i % 4).collect();
    let mut opt = Sgd::new(0.01, 0.0, 0.0);
    for round in 0..3 {
        let t0 = Instant::now();
        let trace = g.forward_trace(&x, Mode::Train).unwrap();
        let t1 = Instant::now();
        let (_, grad) = weighted_cross_entropy(trace.value(g.output()), &labels, &[1.0; 4]).unwrap();
        g.backward(&trace, g.logits(), grad, BackwardOptions::default())
            .unwrap();
        let t2 = Instant::now();
        g.commit(&trace);
        opt.step(&mut g);
        let t3 = Instant::now();
        println!(
            "round {round}: forward {:.1} ms, backward {:.1} ms, step {:.1} ms ({:.2} ms/sample)",
            (t1 - t0).as_secs_f64() * 1e3,
            (t2 - t1).as_secs_f64() * 1e3,
            (t3 - t2).as_secs_f64() * 1e3,
            (t3 - t0).as_secs_f64() * 1e3 / batch as f64
        );
    }
}
