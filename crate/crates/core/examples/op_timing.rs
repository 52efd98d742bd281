use std::time::Instant;

use densecyst::ops::{self, BatchNormState, Mode};
use densecyst::Tensor;

fn t(label: &str, f: impl Fn()) {
    f();
    let t0 = Instant::now();
    for _ in 0..3 {
        f();
    }
    println!("{label:40} {:8.2} ms", t0.elapsed().as_secs_f64() * 1e3 / 3.0);
}

fn main() {
    let n = 40;
    let x32 = Tensor::<f32>::full(&[n, 32, 64, 64], 0.3);
    let x40 = Tensor::<f32>::full(&[n, 40, 64, 64], 0.3);
    let w3 = Tensor::<f32>::full(&[8, 32, 3, 3], 0.01);
    let w1 = Tensor::<f32>::full(&[32, 40, 1, 1], 0.01);
    let g8 = Tensor::<f32>::full(&[n, 8, 64, 64], 0.01);
    let g32 = Tensor::<f32>::full(&[n, 32, 64, 64], 0.01);
    t("conv3x3 32->8 fwd", || {
        drop(ops::conv2d_forward(&x32, &w3, 1, 1).unwrap())
    });
    t("conv3x3 32->8 bwd", || {
        drop(ops::conv2d_backward(&g8, &x32, &w3, 1, 1, true).unwrap())
    });
    let w332 = Tensor::<f32>::full(&[32, 32, 3, 3], 0.01);
    t("conv3x3 32->32 fwd", || {
        drop(ops::conv2d_forward(&x32, &w332, 1, 1).unwrap())
    });
    let w18 = Tensor::<f32>::full(&[8, 40, 1, 1], 0.01);
    t("conv1x1 40->8 fwd", || {
        drop(ops::conv2d_forward(&x40, &w18, 1, 0).unwrap())
    });
    t("conv1x1 40->32 fwd", || {
        drop(ops::conv2d_forward(&x40, &w1, 1, 0).unwrap())
    });
    t("conv1x1 40->32 bwd", || {
        drop(ops::conv2d_backward(&g32, &x40, &w1, 1, 0, true).unwrap())
    });
    let bn = BatchNormState::<f32>::new(40, 1e-5, 0.9).unwrap();
    t("bn fwd 40ch", || {
        drop(ops::batchnorm_forward(&x40, &bn, Mode::Train).unwrap())
    });
    let (_, cache, _) = ops::batchnorm_forward(&x40, &bn, Mode::Train).unwrap();
    t("bn bwd 40ch", || {
        drop(ops::batchnorm_backward(&x40, &x40, &bn.gamma, &cache).unwrap())
    });
    t("relu 40ch", || drop(ops::relu(&x40)));
    t("concat 32+8", || drop(ops::concat_channels(&[&x32, &g8]).unwrap()));
    t("clone 40ch", || drop(x40.clone()));
}
