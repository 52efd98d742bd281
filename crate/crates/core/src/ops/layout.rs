use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Concatenates `[N,Cᵢ,H,W]` tensors along channels, in input order.
pub fn concat_channels<T: Real>(inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::shape("concat_channels", "no inputs"))?;
    let (n, _, h, w) = first.dims4("concat_channels")?;
    let mut total = 0;
    for (i, t) in inputs.iter().enumerate() {
        let (tn, tc, th, tw) = t.dims4("concat_channels")?;
        if (tn, th, tw) != (n, h, w) {
            return Err(Error::shape(
                "concat_channels",
                format!("input {i} has (N,H,W)=({tn},{th},{tw}) but input 0 has ({n},{h},{w})"),
            ));
        }
        total += tc;
    }
    let plane = h * w;
    let mut out = Vec::with_capacity(n * total * plane);
    for b in 0..n {
        for t in inputs {
            let c = t.shape()[1];
            out.extend_from_slice(&t.data()[b * c * plane..(b + 1) * c * plane]);
        }
    }
    Ok(Tensor::from_parts(vec![n, total, h, w], out))
}

/// Splits a channel-concatenated gradient back into per-input parts.
pub fn split_channels<T: Real>(grad: &Tensor<T>, channels: &[usize]) -> Result<Vec<Tensor<T>>> {
    let (n, c, h, w) = grad.dims4("split_channels")?;
    if channels.iter().sum::<usize>() != c {
        return Err(Error::shape(
            "split_channels",
            format!("parts {channels:?} do not add up to C={c}"),
        ));
    }
    let plane = h * w;
    let mut parts: Vec<Vec<T>> = channels.iter().map(|&ci| Vec::with_capacity(n * ci * plane)).collect();
    for b in 0..n {
        let mut off = b * c * plane;
        for (part, &ci) in parts.iter_mut().zip(channels) {
            part.extend_from_slice(&grad.data()[off..off + ci * plane]);
            off += ci * plane;
        }
    }
    Ok(parts
        .into_iter()
        .zip(channels)
        .map(|(d, &ci)| Tensor::from_parts(vec![n, ci, h, w], d))
        .collect())
}

/// `[N,F] · [O,F]ᵀ (+ bias) → [N,O]`.
pub fn linear<T: Real>(input: &Tensor<T>, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let (n, f) = input.dims2("linear")?;
    let (o, wf) = weight.dims2("linear")?;
    if f != wf {
        return Err(Error::shape(
            "linear",
            format!("input has F={f} features but weight expects {wf}"),
        ));
    }
    if let Some(b) = bias {
        if b.shape() != [o] {
            return Err(Error::shape("linear", format!("bias shape {:?} but O={o}", b.shape())));
        }
    }
    let mut out = vec![T::zero(); n * o];
    for i in 0..n {
        let x = &input.data()[i * f..(i + 1) * f];
        for j in 0..o {
            let wr = &weight.data()[j * f..(j + 1) * f];
            let mut acc = bias.map_or(T::zero(), |b| b.data()[j]);
            for (a, b) in x.iter().zip(wr) {
                acc += *a * *b;
            }
            out[i * o + j] = acc;
        }
    }
    Ok(Tensor::from_parts(vec![n, o], out))
}

/// Returns `(grad_input, grad_weight, grad_bias)`.
pub fn linear_backward<T: Real>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    weight: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, f) = input.dims2("linear_backward")?;
    let (o, _) = weight.dims2("linear_backward")?;
    if grad_out.shape() != [n, o] {
        return Err(Error::shape(
            "linear_backward",
            format!("grad_out {:?} vs expected {:?}", grad_out.shape(), [n, o]),
        ));
    }
    let (x, w, gy) = (input.data(), weight.data(), grad_out.data());
    let mut gx = vec![T::zero(); n * f];
    let mut gw = vec![T::zero(); o * f];
    let mut gb = vec![T::zero(); o];
    for i in 0..n {
        for j in 0..o {
            let g = gy[i * o + j];
            gb[j] += g;
            for k in 0..f {
                gx[i * f + k] += g * w[j * f + k];
                gw[j * f + k] += g * x[i * f + k];
            }
        }
    }
    Ok((
        Tensor::from_parts(vec![n, f], gx),
        Tensor::from_parts(vec![o, f], gw),
        Tensor::from_parts(vec![o], gb),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(shape: &[usize], start: f32) -> Tensor<f32> {
        let len = shape.iter().product();
        Tensor::from_vec(shape, (0..len).map(|i| start + i as f32).collect()).unwrap()
    }

    #[test]
    fn single_input_is_identity() {
        let a = ramp(&[2, 3, 2, 2], 0.0);
        assert_eq!(concat_channels(&[&a]).unwrap(), a);
    }

    #[test]
    fn channel_counts_add() {
        let a = Tensor::<f32>::zeros(&[1, 18, 4, 4]);
        let b = Tensor::<f32>::zeros(&[1, 9, 4, 4]);
        assert_eq!(concat_channels(&[&a, &b]).unwrap().shape(), &[1, 27, 4, 4]);
    }

    #[test]
    fn nested_concat_has_flat_layout() {
        let (a, b, c) = (
            ramp(&[2, 1, 2, 2], 0.0),
            ramp(&[2, 2, 2, 2], 100.0),
            ramp(&[2, 3, 2, 2], 200.0),
        );
        let nested = concat_channels(&[&a, &concat_channels(&[&b, &c]).unwrap()]).unwrap();
        assert_eq!(nested, concat_channels(&[&a, &b, &c]).unwrap());
    }

    #[test]
    fn split_inverts_concat() {
        let (a, b) = (ramp(&[3, 2, 1, 2], 0.0), ramp(&[3, 4, 1, 2], 50.0));
        let cat = concat_channels(&[&a, &b]).unwrap();
        let parts = split_channels(&cat, &[2, 4]).unwrap();
        assert_eq!(parts, vec![a, b]);
    }

    #[test]
    fn spatial_mismatch_rejected() {
        let a = Tensor::<f32>::zeros(&[1, 1, 4, 4]);
        let b = Tensor::<f32>::zeros(&[1, 1, 4, 2]);
        assert!(matches!(concat_channels(&[&a, &b]), Err(Error::Shape { .. })));
    }

    #[test]
    fn linear_matches_hand_computation() {
        let x = Tensor::<f32>::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap();
        let w = Tensor::<f32>::from_vec(&[2, 2], vec![3.0, 4.0, -1.0, 0.5]).unwrap();
        let b = Tensor::<f32>::from_vec(&[2], vec![0.5, 0.0]).unwrap();
        assert_eq!(linear(&x, &w, Some(&b)).unwrap().data(), &[11.5, 0.0]);
        let g = Tensor::<f32>::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap();
        let (gx, gw, gb) = linear_backward(&g, &x, &w).unwrap();
        assert_eq!(gx.data(), &[1.0, 5.0]);
        assert_eq!(gw.data(), &[1.0, 2.0, 2.0, 4.0]);
        assert_eq!(gb.data(), &[1.0, 2.0]);
    }
}
