//! Nested-loop reference kernels used as test oracles for the fast paths.
//!
//! These panic on malformed shapes; callers validate first.

use crate::tensor::{Real, Tensor};

pub fn conv2d_naive<T: Real>(input: &Tensor<T>, weight: &Tensor<T>, stride: usize, pad: usize) -> Tensor<T> {
    let (n, c, h, w) = input.dims4("conv2d_naive").unwrap();
    let (o, _, kh, kw) = weight.dims4("conv2d_naive").unwrap();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let x = input.data();
    let k = weight.data();
    let mut out = Tensor::zeros(&[n, o, oh, ow]);
    let y = out.data_mut();
    for b in 0..n {
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = T::zero();
                    for ic in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += x[((b * c + ic) * h + iy as usize) * w + ix as usize]
                                    * k[((oc * c + ic) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    y[((b * o + oc) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

pub fn conv2d_backward_naive<T: Real>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> (Tensor<T>, Tensor<T>) {
    let (n, c, h, w) = input.dims4("conv2d_backward_naive").unwrap();
    let (o, _, kh, kw) = weight.dims4("conv2d_backward_naive").unwrap();
    let (_, _, oh, ow) = grad_out.dims4("conv2d_backward_naive").unwrap();
    let (x, k, gy) = (input.data(), weight.data(), grad_out.data());
    let mut gx = Tensor::zeros(input.shape());
    let mut gw = Tensor::zeros(weight.shape());
    for b in 0..n {
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = gy[((b * o + oc) * oh + oy) * ow + ox];
                    for ic in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xi = ((b * c + ic) * h + iy as usize) * w + ix as usize;
                                let wi = ((oc * c + ic) * kh + ky) * kw + kx;
                                gx.data_mut()[xi] += k[wi] * g;
                                gw.data_mut()[wi] += x[xi] * g;
                            }
                        }
                    }
                }
            }
        }
    }
    (gx, gw)
}

/// Window scan over non-overlapping 2×2 windows; `max` selects the pooling kind.
pub fn pool2x2_naive<T: Real>(input: &Tensor<T>, max: bool) -> Tensor<T> {
    let (n, c, h, w) = input.dims4("pool2x2_naive").unwrap();
    let mut out = Tensor::zeros(&[n, c, h / 2, w / 2]);
    for b in 0..n {
        for ch in 0..c {
            for oy in 0..h / 2 {
                for ox in 0..w / 2 {
                    let mut vals = Vec::with_capacity(4);
                    for dy in 0..2 {
                        for dx in 0..2 {
                            vals.push(input.data()[((b * c + ch) * h + 2 * oy + dy) * w + 2 * ox + dx]);
                        }
                    }
                    let v = if max {
                        vals.iter().copied().fold(T::neg_infinity(), T::max)
                    } else {
                        vals.iter().copied().sum::<T>() / T::from_f64(4.0)
                    };
                    out.data_mut()[((b * c + ch) * (h / 2) + oy) * (w / 2) + ox] = v;
                }
            }
        }
    }
    out
}

pub fn global_avg_pool_naive<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = input.dims4("global_avg_pool_naive").unwrap();
    let mut out = Tensor::zeros(&[n, c]);
    for b in 0..n {
        for ch in 0..c {
            let mut acc = 0.0f64;
            for y in 0..h {
                for x in 0..w {
                    acc += input.data()[((b * c + ch) * h + y) * w + x].as_f64();
                }
            }
            out.data_mut()[b * c + ch] = T::from_f64(acc / (h * w) as f64);
        }
    }
    out
}
