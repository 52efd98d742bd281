//! Synthetic phantom cohort: an ellipsoidal pancreas per volume with one
//! class-specific lesion pattern and additive Gaussian noise.
//!
//! Signatures by class:
//! - IPMN: one large smooth hypo-intense blob.
//! - MCN: a medium cyst with a thick bright rim.
//! - SCN: many small bright speckles.
//! - SPT: a small very bright nodule on the gland boundary that also extends
//!   the mask outward.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::volume::{CystClass, Volume, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::seed;

/// Minimum height and width.
pub const MIN_EXTENT: usize = 32;
pub const MIN_DEPTH: usize = 8;

const BACKGROUND: f64 = -80.0;
const PARENCHYMA: f64 = 40.0;
const CYST_FLUID: f64 = -20.0;
const RIM: f64 = 160.0;
const SPECKLE: f64 = 190.0;
const NODULE: f64 = 240.0;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_per_class: usize,
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    /// Standard deviation of the additive noise, in intensity units.
    pub noise_std: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_per_class: 15,
            depth: 24,
            height: 160,
            width: 160,
            seed: 0,
            noise_std: 12.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_per_class == 0 {
            return Err(Error::Usage("n_per_class must be at least 1".into()));
        }
        if self.depth < MIN_DEPTH {
            return Err(Error::Usage(format!(
                "depth must be at least {MIN_DEPTH}, got {}",
                self.depth
            )));
        }
        for (name, v) in [("height", self.height), ("width", self.width)] {
            if v < MIN_EXTENT {
                return Err(Error::Usage(format!("{name} must be at least {MIN_EXTENT}, got {v}")));
            }
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Usage(format!(
                "noise_std must be finite and non-negative, got {}",
                self.noise_std
            )));
        }
        Ok(())
    }
}

/// Ellipsoid in voxel coordinates `(z, y, x)`.
#[derive(Clone, Copy, Debug)]
struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    /// Squared normalized distance; `< 1` inside.
    fn level(&self, p: [f64; 3]) -> f64 {
        (0..3).map(|i| ((p[i] - self.center[i]) / self.radii[i]).powi(2)).sum()
    }
}

fn jitter(rng: &mut ChaCha8Rng, spread: f64) -> f64 {
    rng.random_range(-spread..=spread)
}

/// Patient ids are `synth-0000`, ... with classes interleaved.
pub fn generate(config: &SynthConfig) -> Result<Vec<Volume>> {
    config.validate()?;
    let mut out = Vec::with_capacity(config.n_per_class * NUM_CLASSES);
    for _ in 0..config.n_per_class {
        for class in CystClass::ALL {
            let index = out.len();
            out.push(generate_one(config, class, index)?);
        }
    }
    Ok(out)
}

fn generate_one(config: &SynthConfig, class: CystClass, index: usize) -> Result<Volume> {
    let mut rng = seed::rng(config.seed, &[index as u64]);
    let (d, h, w) = (config.depth, config.height, config.width);
    let (df, hf, wf) = (d as f64, h as f64, w as f64);

    let gland = Ellipsoid {
        center: [
            (df - 1.0) / 2.0,
            (hf - 1.0) / 2.0 + jitter(&mut rng, 0.04 * hf),
            (wf - 1.0) / 2.0 + jitter(&mut rng, 0.04 * wf),
        ],
        radii: [
            0.10 * df,
            0.20 * hf * rng.random_range(0.92..=1.08),
            0.28 * wf * rng.random_range(0.92..=1.08),
        ],
    };
    // in-plane offset of a lesion centre, as a fraction of the gland radii
    let inside_offset = |rng: &mut ChaCha8Rng, frac: f64| -> [f64; 3] {
        [
            gland.center[0],
            gland.center[1] + jitter(rng, frac) * gland.radii[1],
            gland.center[2] + jitter(rng, frac) * gland.radii[2],
        ]
    };
    let (ry, rx) = (gland.radii[1], gland.radii[2]);
    let lesions: Vec<(Ellipsoid, Lesion)> = match class {
        CystClass::Ipmn => {
            let r = 0.62 * ry;
            vec![(cyl(inside_offset(&mut rng, 0.15), r, gland.radii[0]), Lesion::Fluid)]
        }
        CystClass::Mcn => {
            let r = 0.45 * ry;
            vec![(cyl(inside_offset(&mut rng, 0.15), r, gland.radii[0]), Lesion::Rimmed)]
        }
        CystClass::Scn => {
            let count = 14 + rng.random_range(0..6);
            let r = (0.08 * ry).max(1.0);
            (0..count)
                .map(|_| (cyl(inside_offset(&mut rng, 0.7), r, gland.radii[0]), Lesion::Speckle))
                .collect()
        }
        CystClass::Spt => {
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            let c = [
                gland.center[0],
                gland.center[1] + 0.95 * ry * angle.sin(),
                gland.center[2] + 0.95 * rx * angle.cos(),
            ];
            vec![(cyl(c, 0.38 * ry, gland.radii[0]), Lesion::Nodule)]
        }
    };

    let noise = Normal::new(0.0, config.noise_std.max(f64::MIN_POSITIVE)).expect("valid noise std");
    let n = d * h * w;
    let mut intensities = vec![0.0f32; n];
    let mut mask = vec![0u8; n];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let p = [z as f64, y as f64, x as f64];
                let i = (z * h + y) * w + x;
                let in_gland = gland.level(p) < 1.0;
                let mut v = if in_gland { PARENCHYMA } else { BACKGROUND };
                let mut in_mask = in_gland;
                for (e, kind) in &lesions {
                    let l = e.level(p);
                    if l >= 1.0 {
                        continue;
                    }
                    match kind {
                        Lesion::Fluid if in_gland => {
                            v = CYST_FLUID + (PARENCHYMA - CYST_FLUID) * l * l;
                        }
                        Lesion::Rimmed if in_gland => {
                            v = if l > 0.45 { RIM } else { CYST_FLUID };
                        }
                        Lesion::Speckle if in_gland => v = SPECKLE,
                        Lesion::Nodule => {
                            // confined to the gland's slab so it never adds whole slices
                            if in_depth(&gland, p[0]) {
                                v = NODULE;
                                in_mask = true;
                            }
                        }
                        _ => {}
                    }
                }
                if config.noise_std > 0.0 {
                    v += noise.sample(&mut rng);
                }
                intensities[i] = v as f32;
                mask[i] = in_mask as u8;
            }
        }
    }
    Volume::new(format!("synth-{index:04}"), class, [d, h, w], intensities, mask)
}

#[derive(Clone, Copy, Debug)]
enum Lesion {
    Fluid,
    Rimmed,
    Speckle,
    Nodule,
}

/// Lesion spanning the gland's depth so it shows on every gland slice.
fn cyl(center: [f64; 3], radius: f64, depth_radius: f64) -> Ellipsoid {
    Ellipsoid {
        center,
        radii: [depth_radius * 1.4, radius, radius],
    }
}

fn in_depth(gland: &Ellipsoid, z: f64) -> bool {
    (z - gland.center[0]).abs() < gland.radii[0]
}
