//! Bias-free 2-D convolution through a tiled patch-gather matrix product.
//!
//! For every sample the output is produced in bands of output rows. Each band
//! gathers its receptive fields into a `[C·Kh·Kw, P]` patch matrix (`P` output
//! pixels of the band) and multiplies it against the weight matrix. Bands are
//! sized so that the patch matrix stays cache resident. 1×1 stride-1 unpadded
//! convolutions skip the gather and multiply the input plane directly.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Upper bound on patch-matrix elements per band.
const BAND_ELEMS: usize = 1 << 18;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], weight: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (n, c, h, w) = match *input {
            [n, c, h, w] => (n, c, h, w),
            _ => {
                return Err(Error::shape(
                    "conv2d",
                    format!("input must be [N,C,H,W], got {input:?}"),
                ))
            }
        };
        let (o, wc, kh, kw) = match *weight {
            [o, wc, kh, kw] => (o, wc, kh, kw),
            _ => {
                return Err(Error::shape(
                    "conv2d",
                    format!("weight must be [O,C,Kh,Kw], got {weight:?}"),
                ))
            }
        };
        if wc != c {
            return Err(Error::shape(
                "conv2d",
                format!("input has C={c} channels but weight expects {wc} (weight dim 1)"),
            ));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be at least 1"));
        }
        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
        if ph < kh || pw < kw {
            return Err(Error::shape(
                "conv2d",
                format!("padded input {ph}x{pw} (H,W) is smaller than kernel {kh}x{kw} (Kh,Kw)"),
            ));
        }
        if (ph - kh) % stride != 0 || (pw - kw) % stride != 0 {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "(H+2·pad−Kh, W+2·pad−Kw) = ({}, {}) not divisible by stride {stride}",
                    ph - kh,
                    pw - kw
                ),
            ));
        }
        Ok(ConvGeometry {
            batch: n,
            in_channels: c,
            height: h,
            width: w,
            out_channels: o,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            pad,
            out_h: (ph - kh) / stride + 1,
            out_w: (pw - kw) / stride + 1,
        })
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.out_channels, self.out_h, self.out_w]
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1 && self.pad == 0
    }

    /// Stride-1 square kernels that shrink the channel count get a cheaper
    /// input gradient from a forward conv with the transposed kernel.
    fn prefers_transposed_adjoint(&self) -> bool {
        self.stride == 1
            && self.kernel_h == self.kernel_w
            && self.pad < self.kernel_h
            && !self.is_pointwise()
            && self.out_channels < self.in_channels
    }

    fn band_rows(&self) -> usize {
        (BAND_ELEMS / (self.patch_len() * self.out_w).max(1)).clamp(1, self.out_h)
    }

    /// Output columns `[lo, hi)` whose stride-1 tap `kx` lands inside the input row.
    fn valid_span(&self, kx: usize) -> (usize, usize) {
        let pad = self.pad as isize;
        let lo = (pad - kx as isize).clamp(0, self.out_w as isize) as usize;
        let hi = (self.width as isize + pad - kx as isize).clamp(lo as isize, self.out_w as isize) as usize;
        (lo, hi)
    }

    /// Gathers output rows `[row0, row0+rows)` of one sample into `cols`,
    /// laid out `[patch_len, rows·out_w]`.
    fn gather<T: Real>(&self, plane: &[T], row0: usize, rows: usize, cols: &mut [T]) {
        let width = rows * self.out_w;
        let (kh, kw, s, pad) = (self.kernel_h, self.kernel_w, self.stride, self.pad as isize);
        let mut k = 0;
        for c in 0..self.in_channels {
            let chan = &plane[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ky in 0..kh {
                for kx in 0..kw {
                    let dst = &mut cols[k * width..(k + 1) * width];
                    for r in 0..rows {
                        let iy = ((row0 + r) * s + ky) as isize - pad;
                        let out_row = &mut dst[r * self.out_w..(r + 1) * self.out_w];
                        if iy < 0 || iy >= self.height as isize {
                            out_row.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        }
                        let src = &chan[iy as usize * self.width..(iy as usize + 1) * self.width];
                        if s == 1 {
                            let (lo, hi) = self.valid_span(kx);
                            out_row[..lo].iter_mut().for_each(|v| *v = T::zero());
                            out_row[hi..].iter_mut().for_each(|v| *v = T::zero());
                            if hi > lo {
                                let ix0 = ((lo + kx) as isize - pad) as usize;
                                out_row[lo..hi].copy_from_slice(&src[ix0..ix0 + hi - lo]);
                            }
                            continue;
                        }
                        for (ox, v) in out_row.iter_mut().enumerate() {
                            let ix = (ox * s + kx) as isize - pad;
                            *v = if ix < 0 || ix >= self.width as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                    k += 1;
                }
            }
        }
    }

    /// Adjoint of [`Self::gather`]: scatters-adds `cols` back into `plane`.
    fn scatter<T: Real>(&self, cols: &[T], row0: usize, rows: usize, plane: &mut [T]) {
        let width = rows * self.out_w;
        let (kh, kw, s, pad) = (self.kernel_h, self.kernel_w, self.stride, self.pad as isize);
        let mut k = 0;
        for c in 0..self.in_channels {
            let chan = &mut plane[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ky in 0..kh {
                for kx in 0..kw {
                    let src = &cols[k * width..(k + 1) * width];
                    for r in 0..rows {
                        let iy = ((row0 + r) * s + ky) as isize - pad;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        let dst = &mut chan[iy as usize * self.width..(iy as usize + 1) * self.width];
                        let row = &src[r * self.out_w..(r + 1) * self.out_w];
                        if s == 1 {
                            let (lo, hi) = self.valid_span(kx);
                            if hi > lo {
                                let ix0 = ((lo + kx) as isize - pad) as usize;
                                for (d, v) in dst[ix0..ix0 + hi - lo].iter_mut().zip(&row[lo..hi]) {
                                    *d += *v;
                                }
                            }
                            continue;
                        }
                        for (ox, v) in row.iter().enumerate() {
                            let ix = (ox * s + kx) as isize - pad;
                            if ix >= 0 && ix < self.width as isize {
                                dst[ix as usize] += *v;
                            }
                        }
                    }
                    k += 1;
                }
            }
        }
    }
}

/// `[N,C,H,W] ⊛ [O,C,Kh,Kw] → [N,O,H',W']` with `H' = (H+2·pad−Kh)/stride + 1`.
pub fn conv2d_forward<T: Real>(input: &Tensor<T>, weight: &Tensor<T>, stride: usize, pad: usize) -> Result<Tensor<T>> {
    let g = ConvGeometry::new(input.shape(), weight.shape(), stride, pad)?;
    let in_plane = g.in_channels * g.height * g.width;
    let out_pixels = g.out_h * g.out_w;
    let kk = g.patch_len();
    let mut out = vec![T::zero(); g.batch * g.out_channels * out_pixels];
    let w = weight.data();

    if g.is_pointwise() {
        for n in 0..g.batch {
            let x = &input.data()[n * in_plane..(n + 1) * in_plane];
            let y = &mut out[n * g.out_channels * out_pixels..(n + 1) * g.out_channels * out_pixels];
            // y^T[P×O] = x^T[P×C] · w^T[C×O]
            unsafe {
                T::gemm(
                    out_pixels,
                    kk,
                    g.out_channels,
                    T::one(),
                    x.as_ptr(),
                    1,
                    out_pixels as isize,
                    w.as_ptr(),
                    1,
                    kk as isize,
                    T::zero(),
                    y.as_mut_ptr(),
                    1,
                    out_pixels as isize,
                );
            }
        }
        return Ok(Tensor::from_parts(g.output_shape().to_vec(), out));
    }

    let band = g.band_rows();
    let mut cols = vec![T::zero(); kk * band * g.out_w];
    for n in 0..g.batch {
        let x = &input.data()[n * in_plane..(n + 1) * in_plane];
        let y = &mut out[n * g.out_channels * out_pixels..(n + 1) * g.out_channels * out_pixels];
        let mut row0 = 0;
        while row0 < g.out_h {
            let rows = band.min(g.out_h - row0);
            let p = rows * g.out_w;
            g.gather(x, row0, rows, &mut cols[..kk * p]);
            unsafe {
                T::gemm(
                    p,
                    kk,
                    g.out_channels,
                    T::one(),
                    cols.as_ptr(),
                    1,
                    p as isize,
                    w.as_ptr(),
                    1,
                    kk as isize,
                    T::zero(),
                    y.as_mut_ptr().add(row0 * g.out_w),
                    1,
                    out_pixels as isize,
                );
            }
            row0 += rows;
        }
    }
    Ok(Tensor::from_parts(g.output_shape().to_vec(), out))
}

/// Gradients of [`conv2d_forward`] with respect to its input (when
/// `want_input` is set) and weight.
pub fn conv2d_backward<T: Real>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    pad: usize,
    want_input: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>)> {
    let g = ConvGeometry::new(input.shape(), weight.shape(), stride, pad)?;
    if grad_out.shape() != g.output_shape() {
        return Err(Error::shape(
            "conv2d_backward",
            format!(
                "grad_out shape {:?} differs from forward output {:?}",
                grad_out.shape(),
                g.output_shape()
            ),
        ));
    }
    let in_plane = g.in_channels * g.height * g.width;
    let out_pixels = g.out_h * g.out_w;
    let out_plane = g.out_channels * out_pixels;
    let kk = g.patch_len();
    let w = weight.data();
    let mut grad_w = vec![T::zero(); weight.len()];
    let transposed = want_input && g.prefers_transposed_adjoint();
    let mut grad_in = (want_input && !transposed).then(|| vec![T::zero(); input.len()]);

    if g.is_pointwise() {
        for n in 0..g.batch {
            let x = &input.data()[n * in_plane..(n + 1) * in_plane];
            let gy = &grad_out.data()[n * out_plane..(n + 1) * out_plane];
            // gw^T[C×O] += x[C×P] · gy^T[P×O]
            unsafe {
                T::gemm(
                    kk,
                    out_pixels,
                    g.out_channels,
                    T::one(),
                    x.as_ptr(),
                    out_pixels as isize,
                    1,
                    gy.as_ptr(),
                    1,
                    out_pixels as isize,
                    T::one(),
                    grad_w.as_mut_ptr(),
                    1,
                    kk as isize,
                );
            }
            if let Some(gx) = grad_in.as_mut() {
                // gx^T[P×C] = gy^T[P×O] · w[O×C]
                unsafe {
                    T::gemm(
                        out_pixels,
                        g.out_channels,
                        kk,
                        T::one(),
                        gy.as_ptr(),
                        1,
                        out_pixels as isize,
                        w.as_ptr(),
                        kk as isize,
                        1,
                        T::zero(),
                        gx.as_mut_ptr().add(n * in_plane),
                        1,
                        out_pixels as isize,
                    );
                }
            }
        }
    } else {
        let band = g.band_rows();
        let mut cols = vec![T::zero(); kk * band * g.out_w];
        let mut gcols = if grad_in.is_some() {
            vec![T::zero(); kk * band * g.out_w]
        } else {
            Vec::new()
        };
        for n in 0..g.batch {
            let x = &input.data()[n * in_plane..(n + 1) * in_plane];
            let gy = &grad_out.data()[n * out_plane..(n + 1) * out_plane];
            let mut row0 = 0;
            while row0 < g.out_h {
                let rows = band.min(g.out_h - row0);
                let p = rows * g.out_w;
                let gy_band = unsafe { gy.as_ptr().add(row0 * g.out_w) };
                g.gather(x, row0, rows, &mut cols[..kk * p]);
                // gw^T[K×O] += cols[K×p] · gy_band^T[p×O]
                unsafe {
                    T::gemm(
                        kk,
                        p,
                        g.out_channels,
                        T::one(),
                        cols.as_ptr(),
                        p as isize,
                        1,
                        gy_band,
                        1,
                        out_pixels as isize,
                        T::one(),
                        grad_w.as_mut_ptr(),
                        1,
                        kk as isize,
                    );
                }
                if let Some(gx) = grad_in.as_mut() {
                    // gcols^T[p×K] = gy_band^T[p×O] · w[O×K]
                    unsafe {
                        T::gemm(
                            p,
                            g.out_channels,
                            kk,
                            T::one(),
                            gy_band,
                            1,
                            out_pixels as isize,
                            w.as_ptr(),
                            kk as isize,
                            1,
                            T::zero(),
                            gcols.as_mut_ptr(),
                            1,
                            p as isize,
                        );
                    }
                    g.scatter(&gcols[..kk * p], row0, rows, &mut gx[n * in_plane..(n + 1) * in_plane]);
                }
                row0 += rows;
            }
        }
    }

    let grad_w = Tensor::from_parts(weight.shape().to_vec(), grad_w);
    if transposed {
        return Ok((Some(transposed_adjoint(grad_out, weight, &g)?), grad_w));
    }
    let grad_in = grad_in.map(|d| Tensor::from_parts(input.shape().to_vec(), d));
    Ok((grad_in, grad_w))
}

/// Input gradient of a stride-1 square conv as a forward conv of `grad_out`
/// with the flipped, channel-transposed kernel.
fn transposed_adjoint<T: Real>(grad_out: &Tensor<T>, weight: &Tensor<T>, g: &ConvGeometry) -> Result<Tensor<T>> {
    let (o, c, k) = (g.out_channels, g.in_channels, g.kernel_h);
    let w = weight.data();
    let mut flipped = vec![T::zero(); w.len()];
    for oi in 0..o {
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    flipped[((ci * o + oi) * k + (k - 1 - ky)) * k + (k - 1 - kx)] =
                        w[((oi * c + ci) * k + ky) * k + kx];
                }
            }
        }
    }
    let flipped = Tensor::from_parts(vec![c, o, k, k], flipped);
    conv2d_forward(grad_out, &flipped, 1, k - 1 - g.pad)
}
