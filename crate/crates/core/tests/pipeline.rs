//! Slice extraction, augmentation, file formats and the synthetic cohort.

use std::collections::HashSet;

use densecyst::checkpoint;
use densecyst::data::augment::{self, Transform};
use densecyst::data::io::{self, decode_rvol, encode_rvol};
use densecyst::data::{
    extract_slices, synth_generate, AugmentParams, CystClass, ManifestEntry, SliceSample, SynthConfig, Volume,
};
use densecyst::zoo::{build_densenet, init_parameters};
use densecyst::{DenseNetSpec, Error, Mode, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `depth` slices of `h×w`; slice d holds a centered `rows[d].0 × rows[d].1` mask rectangle.
fn rect_volume(h: usize, w: usize, rects: &[(usize, usize)]) -> Volume {
    let mut mask = vec![0u8; rects.len() * h * w];
    for (d, &(rh, rw)) in rects.iter().enumerate() {
        let (top, left) = ((h - rh) / 2, (w - rw) / 2);
        for y in top..top + rh {
            for x in left..left + rw {
                mask[d * h * w + y * w + x] = 1;
            }
        }
    }
    let intensities = (0..mask.len()).map(|i| (i % 97) as f32).collect();
    Volume::new("p", CystClass::Mcn, [rects.len(), h, w], intensities, mask).unwrap()
}

#[test]
fn overlap_boundary_small_window() {
    // 20×20 window: 40 pixels is exactly 10%, 39 falls short
    let v = rect_volume(32, 32, &[(5, 8), (3, 13), (4, 10), (2, 10)]);
    let kept: Vec<usize> = extract_slices(&v, 20, 0.10)
        .samples
        .iter()
        .map(|s| s.slice_index)
        .collect();
    assert_eq!(kept, vec![0, 2]);
}

#[test]
fn overlap_boundary_default_window() {
    // 0.1·144² = 2073.6 is not a pixel count: 2074 (34×61) is the smallest count kept,
    // while half of it (17×61) and 2072 (56×37) fall short
    let v = rect_volume(160, 160, &[(34, 61), (17, 61), (56, 37)]);
    let out = extract_slices(&v, 144, 0.10);
    let kept: Vec<usize> = out.samples.iter().map(|s| s.slice_index).collect();
    assert_eq!(kept, vec![0]);
    assert_eq!(out.samples[0].overlap_ratio, 2074.0 / (144.0 * 144.0));
}

#[test]
fn threshold_zero_keeps_every_intersecting_slice() {
    let v = rect_volume(40, 40, &[(0, 0), (1, 1), (5, 5), (0, 0), (30, 30)]);
    let kept: Vec<usize> = extract_slices(&v, 16, 0.0)
        .samples
        .iter()
        .map(|s| s.slice_index)
        .collect();
    assert_eq!(kept, vec![1, 2, 4]);
}

#[test]
fn empty_mask_gives_warning_not_failure() {
    let v = rect_volume(32, 32, &[(0, 0), (0, 0)]);
    let out = extract_slices(&v, 16, 0.1);
    assert!(out.samples.is_empty());
    assert_eq!(out.warnings.len(), 1);
}

#[test]
fn emitted_samples_respect_the_threshold() {
    let vols = synth_generate(&SynthConfig {
        n_per_class: 3,
        depth: 12,
        height: 48,
        width: 48,
        seed: 4,
        ..SynthConfig::default()
    })
    .unwrap();
    for v in &vols {
        for t in [0.0, 0.05, 0.1, 0.3] {
            for s in extract_slices(v, 32, t).samples {
                assert!(s.overlap_ratio >= t);
                assert_eq!(s.image.len(), 32 * 32);
                assert!(s.image.iter().all(|p| p.is_finite() && (0.0..=1.0).contains(p)));
                assert_eq!(s.label, v.label);
            }
        }
        assert_eq!(extract_slices(v, 32, 0.1), extract_slices(v, 32, 0.1));
    }
}

fn sample(seed: u64, side: usize) -> SliceSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    SliceSample {
        image: (0..side * side).map(|_| rng.random::<f32>()).collect(),
        side,
        label: CystClass::Scn,
        patient_id: "q".into(),
        slice_index: 3,
        overlap_ratio: 0.5,
    }
}

#[test]
fn identity_augmentation_is_exact() {
    let s = sample(1, 24);
    assert_eq!(augment::apply(&s, &Transform::IDENTITY), s);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert_eq!(augment::augment(&s, &AugmentParams::none(), &mut rng), s);
}

#[test]
fn flip_twice_restores_the_image() {
    let s = sample(2, 17);
    let flip = Transform {
        flip: true,
        ..Transform::IDENTITY
    };
    let once = augment::apply(&s, &flip);
    assert_ne!(once.image, s.image);
    assert_eq!(augment::apply(&once, &flip), s);
}

#[test]
fn zoom_enlarges_a_centered_square() {
    let side = 64;
    let mut s = sample(0, side);
    s.image = (0..side * side)
        .map(|i| {
            let (y, x) = (i / side, i % side);
            if (22..42).contains(&y) && (22..42).contains(&x) {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    let z = augment::apply(
        &s,
        &Transform {
            zoom: 1.2,
            ..Transform::IDENTITY
        },
    );
    let area = |img: &[f32]| img.iter().filter(|&&v| v > 0.5).count() as f64;
    let ratio = area(&z.image) / area(&s.image);
    assert!((ratio / 1.44 - 1.0).abs() < 0.10, "{ratio}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn augmentation_keeps_identity_shape_and_range(seed in any::<u64>(), side in 4usize..40) {
        let s = sample(seed, side);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = augment::augment(&s, &AugmentParams::default(), &mut rng);
        prop_assert_eq!(out.image.len(), side * side);
        prop_assert_eq!(&out.patient_id, &s.patient_id);
        prop_assert_eq!(out.label, s.label);
        prop_assert!(out.image.iter().all(|v| v.is_finite() && *v >= -0.01 && *v <= 1.01));
        let mut again = ChaCha8Rng::seed_from_u64(seed);
        prop_assert_eq!(augment::augment(&s, &AugmentParams::default(), &mut again), out);
    }

    #[test]
    fn rvol_round_trip_is_bit_exact(d in 1usize..5, h in 1usize..9, w in 1usize..9, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = d * h * w;
        let values: Vec<f32> = (0..n).map(|_| f32::from_bits(rng.random::<u32>() & 0xbf7f_ffff)).collect();
        let mask: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let (dims, back, back_mask) = decode_rvol(&encode_rvol([d, h, w], &values, &mask)).unwrap();
        prop_assert_eq!(dims, [d, h, w]);
        prop_assert!(values.iter().zip(&back).all(|(a, b)| a.to_bits() == b.to_bits()));
        prop_assert_eq!(back_mask, mask);
    }
}

#[test]
fn volume_files_and_manifest_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let vols = synth_generate(&SynthConfig {
        n_per_class: 1,
        depth: 8,
        height: 32,
        width: 32,
        seed: 9,
        ..SynthConfig::default()
    })
    .unwrap();
    let mut entries = Vec::new();
    for v in &vols {
        let name = format!("{}.rvol", v.patient_id);
        io::write_volume(v, &dir.path().join(&name)).unwrap();
        entries.push(ManifestEntry {
            patient_id: v.patient_id.clone(),
            label: v.label,
            path: name.into(),
        });
    }
    let manifest = dir.path().join("manifest.csv");
    io::write_manifest(&manifest, &entries).unwrap();
    let back = io::load_dataset(&manifest).unwrap();
    assert_eq!(back, vols);
    let labels: Vec<usize> = back.iter().map(|v| v.label.index()).collect();
    assert_eq!(labels, vec![0, 1, 2, 3]);

    let mut bytes = std::fs::read(dir.path().join("synth-0000.rvol")).unwrap();
    bytes[1] = b'X';
    let err = decode_rvol(&bytes).unwrap_err();
    assert!(
        matches!(err, Error::Parse { .. }) && err.to_string().contains("RVOL"),
        "{err}"
    );
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let spec = DenseNetSpec {
        num_blocks: 2,
        layers_per_block: 2,
        growth_rate: 3,
        initial_channels: 4,
        input_size: 16,
        ..DenseNetSpec::default()
    };
    let mut g = build_densenet::<f32>(&spec).unwrap();
    init_parameters(&mut g, 21);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x = Tensor::from_vec(&[4, 1, 16, 16], (0..1024).map(|_| rng.random::<f32>()).collect()).unwrap();
    let trace = g.forward_trace(&x, Mode::Train).unwrap();
    g.commit(&trace);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.dcys");
    checkpoint::save(&g, &path).unwrap();
    let back = checkpoint::load(&path).unwrap();
    for slot in g.parameter_slots() {
        let (a, b) = (g.param(slot).data(), back.param(slot).data());
        assert!(a.iter().zip(b).all(|(p, q)| p.to_bits() == q.to_bits()), "{slot:?}");
    }
    for (a, b) in g.bn_states().iter().zip(back.bn_states()) {
        assert!(a
            .running_mean
            .iter()
            .zip(&b.running_mean)
            .all(|(p, q)| p.to_bits() == q.to_bits()));
        assert!(a
            .running_var
            .iter()
            .zip(&b.running_var)
            .all(|(p, q)| p.to_bits() == q.to_bits()));
    }
    assert_eq!(back.arch, g.arch);
    assert_eq!(std::fs::read(&path).unwrap(), checkpoint::encode(&back).unwrap());
    let p = g.predict(&x).unwrap();
    let q = back.predict(&x).unwrap();
    assert!(p.data().iter().zip(q.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn synth_counts_determinism_and_masks() {
    let cfg = SynthConfig {
        n_per_class: 5,
        depth: 10,
        height: 40,
        width: 40,
        seed: 3,
        ..SynthConfig::default()
    };
    let a = synth_generate(&cfg).unwrap();
    assert_eq!(a.len(), 20);
    for class in CystClass::ALL {
        assert_eq!(a.iter().filter(|v| v.label == class).count(), 5);
    }
    assert!(a.iter().all(|v| v.mask_voxels() > 0));
    assert_eq!(a.iter().map(|v| &v.patient_id).collect::<HashSet<_>>().len(), 20);
    assert_eq!(a, synth_generate(&cfg).unwrap());
    assert_ne!(a, synth_generate(&SynthConfig { seed: 4, ..cfg.clone() }).unwrap());
    let err = synth_generate(&SynthConfig { n_per_class: 0, ..cfg }).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

/// Mean intensity of the mask voxels and mask size in voxels.
fn features(v: &Volume) -> [f64; 2] {
    let sum: f64 = v
        .intensities
        .iter()
        .zip(&v.mask)
        .filter(|(_, &m)| m == 1)
        .map(|(&x, _)| x as f64)
        .sum();
    let area = v.mask_voxels() as f64;
    [sum / area, area]
}

/// Logistic regression on standardized features, fitted by plain gradient descent.
fn fit(xs: &[[f64; 2]], ys: &[f64]) -> impl Fn([f64; 2]) -> bool {
    let n = xs.len() as f64;
    let mean = [0, 1].map(|j| xs.iter().map(|x| x[j]).sum::<f64>() / n);
    let std = [0, 1].map(|j| {
        (xs.iter().map(|x| (x[j] - mean[j]).powi(2)).sum::<f64>() / n)
            .sqrt()
            .max(1e-12)
    });
    let z = move |x: [f64; 2]| [(x[0] - mean[0]) / std[0], (x[1] - mean[1]) / std[1]];
    let (mut w, mut b) = ([0.0f64; 2], 0.0f64);
    for _ in 0..2000 {
        let (mut gw, mut gb) = ([0.0; 2], 0.0);
        for (x, &y) in xs.iter().zip(ys) {
            let f = z(*x);
            let p = 1.0 / (1.0 + (-(w[0] * f[0] + w[1] * f[1] + b)).exp());
            gw[0] += (p - y) * f[0];
            gw[1] += (p - y) * f[1];
            gb += p - y;
        }
        w = [w[0] - 0.5 * gw[0] / n, w[1] - 0.5 * gw[1] / n];
        b -= 0.5 * gb / n;
    }
    move |x| {
        let f = z(x);
        w[0] * f[0] + w[1] * f[1] + b > 0.0
    }
}

#[test]
fn nodules_are_linearly_separable_from_fluid_blobs() {
    let cohort = |seed| -> (Vec<[f64; 2]>, Vec<f64>) {
        let vols = synth_generate(&SynthConfig {
            n_per_class: 50,
            depth: 24,
            height: 64,
            width: 64,
            seed,
            ..SynthConfig::default()
        })
        .unwrap();
        vols.iter()
            .filter(|v| matches!(v.label, CystClass::Ipmn | CystClass::Spt))
            .map(|v| (features(v), (v.label == CystClass::Spt) as u8 as f64))
            .unzip()
    };
    let (train_x, train_y) = cohort(100);
    let (test_x, test_y) = cohort(200);
    assert_eq!(test_x.len(), 100);
    let classify = fit(&train_x, &train_y);
    let correct = test_x
        .iter()
        .zip(&test_y)
        .filter(|(x, &y)| classify(**x) == (y == 1.0))
        .count();
    assert!(correct >= 90, "{correct}/100 held-out volumes separated");
}
