//! Online 2-D augmentation: rotation, central zoom, vertical flip.

use rand::Rng;

use crate::data::slices::SliceSample;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentParams {
    pub rotation_deg: (f64, f64),
    pub zoom: (f64, f64),
    pub vflip_prob: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        AugmentParams {
            rotation_deg: (-25.0, 25.0),
            zoom: (0.9, 1.2),
            vflip_prob: 0.5,
        }
    }
}

impl AugmentParams {
    /// Parameters that leave every sample untouched.
    pub fn none() -> Self {
        AugmentParams {
            rotation_deg: (0.0, 0.0),
            zoom: (1.0, 1.0),
            vflip_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (r0, r1) = self.rotation_deg;
        if !(r0.is_finite() && r1.is_finite() && r0 <= r1) {
            return Err(Error::Config(format!(
                "rotation range [{r0}, {r1}] is not well ordered"
            )));
        }
        let (z0, z1) = self.zoom;
        if !(z0 > 0.0 && z1.is_finite() && z0 <= z1) {
            return Err(Error::Config(format!(
                "zoom range [{z0}, {z1}] must be positive and well ordered"
            )));
        }
        if !(0.0..=1.0).contains(&self.vflip_prob) {
            return Err(Error::Config(format!(
                "flip probability {} outside [0,1]",
                self.vflip_prob
            )));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        *self == AugmentParams::none()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Transform {
        let uniform = |rng: &mut R, (lo, hi): (f64, f64)| if lo == hi { lo } else { rng.random_range(lo..=hi) };
        let angle_deg = uniform(rng, self.rotation_deg);
        let zoom = uniform(rng, self.zoom);
        let flip = self.vflip_prob > 0.0 && rng.random::<f64>() < self.vflip_prob;
        Transform { angle_deg, zoom, flip }
    }
}

/// One concrete draw of augmentation parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transform {
    pub angle_deg: f64,
    pub zoom: f64,
    pub flip: bool,
}

impl Transform {
    pub const IDENTITY: Transform = Transform {
        angle_deg: 0.0,
        zoom: 1.0,
        flip: false,
    };
}

/// Bilinear read at `(y, x)`; samples outside the image contribute zero.
fn bilinear(img: &[f32], side: usize, y: f64, x: f64) -> f32 {
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = (y - y0, x - x0);
    let (y0, x0) = (y0 as isize, x0 as isize);
    let at = |yy: isize, xx: isize| -> f64 {
        if yy < 0 || xx < 0 || yy >= side as isize || xx >= side as isize {
            0.0
        } else {
            img[yy as usize * side + xx as usize] as f64
        }
    };
    let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1) * fx;
    let bottom = at(y0 + 1, x0) * (1.0 - fx) + at(y0 + 1, x0 + 1) * fx;
    (top * (1.0 - fy) + bottom * fy) as f32
}

/// Inverse-maps every output pixel through `map` (centered coordinates).
fn resample(img: &[f32], side: usize, map: impl Fn(f64, f64) -> (f64, f64)) -> Vec<f32> {
    let c = (side as f64 - 1.0) / 2.0;
    let mut out = vec![0.0f32; side * side];
    for r in 0..side {
        for col in 0..side {
            let (sy, sx) = map(r as f64 - c, col as f64 - c);
            out[r * side + col] = bilinear(img, side, sy + c, sx + c);
        }
    }
    out
}

/// Rotates by `angle_deg` about the image center (clockwise on screen,
/// rows pointing down).
pub fn rotate(img: &[f32], side: usize, angle_deg: f64) -> Vec<f32> {
    if angle_deg == 0.0 {
        return img.to_vec();
    }
    let (s, c) = angle_deg.to_radians().sin_cos();
    resample(img, side, |y, x| (c * y - s * x, s * y + c * x))
}

/// Scales about the center by `factor`, cropping or zero padding back to `side`.
pub fn zoom(img: &[f32], side: usize, factor: f64) -> Vec<f32> {
    if factor == 1.0 {
        return img.to_vec();
    }
    resample(img, side, |y, x| (y / factor, x / factor))
}

/// Mirrors rows (top ↔ bottom).
pub fn vflip(img: &[f32], side: usize) -> Vec<f32> {
    img.chunks(side).rev().flatten().copied().collect()
}

pub fn apply(sample: &SliceSample, t: &Transform) -> SliceSample {
    let side = sample.side;
    let mut image = if t.angle_deg == 0.0 || t.zoom == 1.0 {
        zoom(&rotate(&sample.image, side, t.angle_deg), side, t.zoom)
    } else {
        // rotate then zoom as one inverse map, so pixels are interpolated once
        let (s, c) = t.angle_deg.to_radians().sin_cos();
        let f = t.zoom;
        resample(&sample.image, side, |y, x| ((c * y - s * x) / f, (s * y + c * x) / f))
    };
    if t.flip {
        image = vflip(&image, side);
    }
    SliceSample {
        image,
        ..sample.clone()
    }
}

pub fn augment<R: Rng + ?Sized>(sample: &SliceSample, params: &AugmentParams, rng: &mut R) -> SliceSample {
    apply(sample, &params.sample(rng))
}
