use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub fn relu<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    let data = input
        .data()
        .iter()
        .map(|&v| if v > T::zero() { v } else { T::zero() })
        .collect();
    Tensor::from_parts(input.shape().to_vec(), data)
}

/// Passes `grad_out` where the forward value is positive. `forward` may be
/// either the ReLU input or its output; both have the same positive support.
pub fn relu_backward<T: Real>(grad_out: &Tensor<T>, forward: &Tensor<T>) -> Result<Tensor<T>> {
    check_same("relu_backward", grad_out, forward)?;
    let data = grad_out
        .data()
        .iter()
        .zip(forward.data())
        .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Ok(Tensor::from_parts(grad_out.shape().to_vec(), data))
}

/// Guided rule: additionally zeroes negative incoming gradient.
pub fn relu_backward_guided<T: Real>(grad_out: &Tensor<T>, forward: &Tensor<T>) -> Result<Tensor<T>> {
    check_same("relu_backward_guided", grad_out, forward)?;
    let data = grad_out
        .data()
        .iter()
        .zip(forward.data())
        .map(|(&g, &x)| if x > T::zero() && g > T::zero() { g } else { T::zero() })
        .collect();
    Ok(Tensor::from_parts(grad_out.shape().to_vec(), data))
}

/// Row-wise softmax of `[N,K]` logits, shifted by the row maximum.
pub fn softmax<T: Real>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, k) = logits.dims2("softmax")?;
    if k < 2 {
        return Err(Error::shape("softmax", format!("need at least 2 classes, got K={k}")));
    }
    let mut out = vec![T::zero(); n * k];
    for (row, dst) in logits.data().chunks(k).zip(out.chunks_mut(k)) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max).as_f64();
        let mut sum = 0.0;
        let exps: Vec<f64> = row
            .iter()
            .map(|v| {
                let e = (v.as_f64() - max).exp();
                sum += e;
                e
            })
            .collect();
        for (d, e) in dst.iter_mut().zip(exps) {
            *d = T::from_f64(e / sum);
        }
    }
    Ok(Tensor::from_parts(vec![n, k], out))
}

/// Jacobian-vector product of softmax given its output `probs`.
pub fn softmax_backward<T: Real>(grad_out: &Tensor<T>, probs: &Tensor<T>) -> Result<Tensor<T>> {
    check_same("softmax_backward", grad_out, probs)?;
    let (_, k) = probs.dims2("softmax_backward")?;
    let mut out = vec![T::zero(); probs.len()];
    for ((g, p), dst) in grad_out
        .data()
        .chunks(k)
        .zip(probs.data().chunks(k))
        .zip(out.chunks_mut(k))
    {
        let dot: f64 = g.iter().zip(p).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
        for ((d, &gi), &pi) in dst.iter_mut().zip(g).zip(p) {
            *d = T::from_f64(pi.as_f64() * (gi.as_f64() - dot));
        }
    }
    Ok(Tensor::from_parts(probs.shape().to_vec(), out))
}

fn check_same<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("gradient {:?} vs forward {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}
