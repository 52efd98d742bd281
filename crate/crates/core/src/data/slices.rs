//! Axial slice extraction with the pancreas-overlap filter.

use rayon::prelude::*;

use crate::data::volume::{CystClass, Volume};

pub const DEFAULT_SIDE: usize = 144;
pub const DEFAULT_THRESHOLD: f64 = 0.10;

/// One fixed-size axial window, intensities normalized to [0,1].
#[derive(Clone, Debug, PartialEq)]
pub struct SliceSample {
    pub image: Vec<f32>,
    pub side: usize,
    pub label: CystClass,
    pub patient_id: String,
    pub slice_index: usize,
    /// Pancreas pixels inside the window divided by `side²`.
    pub overlap_ratio: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SliceExtraction {
    pub samples: Vec<SliceSample>,
    pub warnings: Vec<String>,
}

/// Per-volume min-max scaling to [0,1]; constant volumes map to 0.
pub fn normalize_intensities(values: &[f32]) -> Vec<f32> {
    let (min, max) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v as f64), hi.max(v as f64))
    });
    let range = max - min;
    if !(range > 0.0) {
        return vec![0.0; values.len()];
    }
    values.iter().map(|&v| ((v as f64 - min) / range) as f32).collect()
}

/// Cuts a `side×side` window per axial slice, centered on that slice's mask
/// centroid (zero padded outside the volume), and keeps slices whose
/// overlap ratio reaches `threshold`.
pub fn extract_slices(volume: &Volume, side: usize, threshold: f64) -> SliceExtraction {
    let mut out = SliceExtraction::default();
    if volume.mask_voxels() == 0 {
        let msg = format!(
            "patient {}: empty pancreas mask, no slices extracted",
            volume.patient_id
        );
        log::warn!("{msg}");
        out.warnings.push(msg);
        return out;
    }
    let normalized = normalize_intensities(&volume.intensities);
    let (h, w) = (volume.height, volume.width);
    let area = (side * side) as f64;

    for d in 0..volume.depth {
        let mask = volume.mask_slice(d);
        let (mut count, mut sy, mut sx) = (0usize, 0.0f64, 0.0f64);
        for (i, &m) in mask.iter().enumerate() {
            if m == 1 {
                count += 1;
                sy += (i / w) as f64;
                sx += (i % w) as f64;
            }
        }
        if count == 0 {
            continue;
        }
        let half = (side as f64 - 1.0) / 2.0;
        let top = (sy / count as f64 - half).round() as isize;
        let left = (sx / count as f64 - half).round() as isize;

        let plane = &normalized[d * h * w..(d + 1) * h * w];
        let mut image = vec![0.0f32; side * side];
        let mut inside = 0usize;
        for r in 0..side {
            let y = top + r as isize;
            if y < 0 || y >= h as isize {
                continue;
            }
            for c in 0..side {
                let x = left + c as isize;
                if x < 0 || x >= w as isize {
                    continue;
                }
                let src = y as usize * w + x as usize;
                image[r * side + c] = plane[src];
                inside += mask[src] as usize;
            }
        }
        let overlap_ratio = inside as f64 / area;
        if overlap_ratio >= threshold {
            out.samples.push(SliceSample {
                image,
                side,
                label: volume.label,
                patient_id: volume.patient_id.clone(),
                slice_index: d,
                overlap_ratio,
            });
        }
    }
    out
}

/// Extracts every volume in parallel; output order follows input order.
pub fn extract_all(volumes: &[Volume], side: usize, threshold: f64) -> Vec<SliceExtraction> {
    volumes.par_iter().map(|v| extract_slices(v, side, threshold)).collect()
}
