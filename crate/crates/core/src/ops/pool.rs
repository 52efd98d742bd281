use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PoolKind {
    Max,
    Avg,
}

fn pool_dims<T: Real>(input: &Tensor<T>, op: &'static str) -> Result<(usize, usize, usize, usize)> {
    let (n, c, h, w) = input.dims4(op)?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(
            op,
            format!("2×2/stride-2 pooling needs even H and W, got {h}x{w}; pad or crop upstream"),
        ));
    }
    Ok((n, c, h, w))
}

/// Non-overlapping 2×2 pooling with stride 2.
pub fn pool2x2<T: Real>(input: &Tensor<T>, kind: PoolKind) -> Result<Tensor<T>> {
    let (n, c, h, w) = pool_dims(input, "pool2x2")?;
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let quarter = T::from_f64(0.25);
    let mut out = vec![T::zero(); n * c * oh * ow];
    for plane in 0..n * c {
        let src = &x[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
        for oy in 0..oh {
            let (r0, r1) = (
                &src[2 * oy * w..(2 * oy + 1) * w],
                &src[(2 * oy + 1) * w..(2 * oy + 2) * w],
            );
            for ox in 0..ow {
                let (a, b, cc, d) = (r0[2 * ox], r0[2 * ox + 1], r1[2 * ox], r1[2 * ox + 1]);
                dst[oy * ow + ox] = match kind {
                    PoolKind::Max => a.max(b).max(cc.max(d)),
                    PoolKind::Avg => (a + b + cc + d) * quarter,
                };
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, c, oh, ow], out))
}

/// Max routes each window's gradient to its first (row-major) maximum;
/// average spreads it equally.
pub fn pool2x2_backward<T: Real>(grad_out: &Tensor<T>, input: &Tensor<T>, kind: PoolKind) -> Result<Tensor<T>> {
    let (n, c, h, w) = pool_dims(input, "pool2x2_backward")?;
    let (oh, ow) = (h / 2, w / 2);
    if grad_out.shape() != [n, c, oh, ow] {
        return Err(Error::shape(
            "pool2x2_backward",
            format!(
                "grad_out {:?} does not match pooled shape {:?}",
                grad_out.shape(),
                [n, c, oh, ow]
            ),
        ));
    }
    let x = input.data();
    let gy = grad_out.data();
    let quarter = T::from_f64(0.25);
    let mut gx = vec![T::zero(); x.len()];
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let g = gy[plane * oh * ow + oy * ow + ox];
                let idx = [
                    base + 2 * oy * w + 2 * ox,
                    base + 2 * oy * w + 2 * ox + 1,
                    base + (2 * oy + 1) * w + 2 * ox,
                    base + (2 * oy + 1) * w + 2 * ox + 1,
                ];
                match kind {
                    PoolKind::Max => {
                        let mut best = idx[0];
                        for &i in &idx[1..] {
                            if x[i] > x[best] {
                                best = i;
                            }
                        }
                        gx[best] += g;
                    }
                    PoolKind::Avg => {
                        for &i in &idx {
                            gx[i] += g * quarter;
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(input.shape().to_vec(), gx))
}

/// `[N,C,H,W] → [N,C]`, each plane reduced to its mean.
pub fn global_avg_pool<T: Real>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4("global_avg_pool")?;
    let plane = h * w;
    let out = input
        .data()
        .chunks(plane)
        .map(|p| T::from_f64(p.iter().map(|v| v.as_f64()).sum::<f64>() / plane as f64))
        .collect();
    Ok(Tensor::from_parts(vec![n, c], out))
}

pub fn global_avg_pool_backward<T: Real>(grad_out: &Tensor<T>, input_shape: &[usize]) -> Result<Tensor<T>> {
    let (n, c, h, w) = match *input_shape {
        [n, c, h, w] => (n, c, h, w),
        _ => {
            return Err(Error::shape(
                "global_avg_pool_backward",
                format!("bad input shape {input_shape:?}"),
            ))
        }
    };
    if grad_out.shape() != [n, c] {
        return Err(Error::shape(
            "global_avg_pool_backward",
            format!("grad_out {:?} vs expected {:?}", grad_out.shape(), [n, c]),
        ));
    }
    let scale = T::from_f64(1.0 / (h * w) as f64);
    let mut gx = Vec::with_capacity(n * c * h * w);
    for &g in grad_out.data() {
        gx.extend(std::iter::repeat(g * scale).take(h * w));
    }
    Ok(Tensor::from_parts(input_shape.to_vec(), gx))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_definitions() {
        let x = Tensor::<f32>::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(pool2x2(&x, PoolKind::Max).unwrap().data(), &[4.0]);
        assert_eq!(pool2x2(&x, PoolKind::Avg).unwrap().data(), &[2.5]);
        assert_eq!(global_avg_pool(&x).unwrap().data(), &[2.5]);
    }

    #[test]
    fn constant_plane_is_invariant() {
        let x = Tensor::<f64>::full(&[2, 3, 4, 6], -1.75);
        for kind in [PoolKind::Max, PoolKind::Avg] {
            assert!(pool2x2(&x, kind).unwrap().data().iter().all(|&v| v == -1.75));
        }
        assert!(global_avg_pool(&x).unwrap().data().iter().all(|&v| v == -1.75));
    }

    #[test]
    fn max_ties_route_to_first_element() {
        let x = Tensor::<f32>::full(&[1, 1, 2, 2], 3.0);
        let g = Tensor::<f32>::full(&[1, 1, 1, 1], 1.0);
        let gx = pool2x2_backward(&g, &x, PoolKind::Max).unwrap();
        assert_eq!(gx.data(), &[1.0, 0.0, 0.0, 0.0]);
        let gx = pool2x2_backward(&g, &x, PoolKind::Avg).unwrap();
        assert_eq!(gx.data(), &[0.25; 4]);
    }

    #[test]
    fn odd_extent_rejected() {
        let err = pool2x2(&Tensor::<f32>::zeros(&[1, 1, 3, 4]), PoolKind::Avg).unwrap_err();
        assert!(err.to_string().contains("pad or crop"));
    }
}
