use std::fs;
use std::path::{Path, PathBuf};

use densecyst::data::{self, io, AugmentParams, CystClass, ManifestEntry, SliceSample, SynthConfig, Volume};
use densecyst::eval::{self, CvConfig};
use densecyst::graph::ReluRule;
use densecyst::saliency::{self, SaliencyOptions};
use densecyst::train::{self, ClassWeights, TrainConfig};
use densecyst::zoo::{init_parameters, parse_pool};
use densecyst::{checkpoint, seed, Architecture, DenseNetSpec, Error, LayerGraph, ModelKind, Result, Tensor};

use crate::args::{CvCmd, InputArgs, ModelArgs, PredictCmd, SaliencyCmd, SynthArgs, TrainArgs, TrainCmd};

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, contents).map_err(io_err(path))
}

pub fn architecture(m: &ModelArgs) -> Result<Architecture> {
    let spec = DenseNetSpec {
        num_blocks: m.num_blocks,
        layers_per_block: m.layers_per_block,
        growth_rate: m.growth_rate,
        initial_channels: m.initial_channels.unwrap_or(2 * m.growth_rate),
        bottleneck_factor: m.bottleneck_factor,
        input_size: m.input_size,
        compression: m.compression,
        transition_pool: parse_pool(&m.transition_pool)?,
        ..DenseNetSpec::default()
    };
    spec.validate()?;
    Ok(Architecture::new(ModelKind::parse(&m.model)?, spec))
}

pub fn train_config(t: &TrainArgs) -> Result<TrainConfig> {
    let class_weights = if t.class_weights == "auto" {
        ClassWeights::Auto
    } else {
        let w = t
            .class_weights
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::Config(format!("class weights {:?} are not numbers", t.class_weights)))?;
        if w.len() != data::NUM_CLASSES {
            return Err(Error::Config(format!(
                "expected {} class weights, got {}",
                data::NUM_CLASSES,
                w.len()
            )));
        }
        ClassWeights::Explicit(w)
    };
    let augment = if t.no_augment {
        AugmentParams::none()
    } else {
        AugmentParams {
            rotation_deg: (t.rotation_min, t.rotation_max),
            zoom: (t.zoom_min, t.zoom_max),
            vflip_prob: t.flip_prob,
        }
    };
    let cfg = TrainConfig {
        batch_size: t.batch_size,
        learning_rate: t.learning_rate,
        epochs: t.epochs,
        seed: t.seed,
        class_weights,
        momentum: t.momentum,
        weight_decay: t.weight_decay,
        augment,
    };
    cfg.validate()?;
    check_threshold(t.threshold)?;
    Ok(cfg)
}

fn check_threshold(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Config(format!("threshold must lie in [0,1], got {t}")));
    }
    Ok(())
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        n_per_class: a.n_per_class,
        depth: a.depth,
        height: a.height,
        width: a.width,
        seed: a.seed,
        noise_std: a.noise_std,
    };
    let volumes = data::synth_generate(&cfg)?;
    fs::create_dir_all(&a.out).map_err(io_err(&a.out))?;
    let mut entries = Vec::with_capacity(volumes.len());
    for v in &volumes {
        let file = format!("{}.rvol", v.patient_id);
        io::write_volume(v, &a.out.join(&file))?;
        entries.push(ManifestEntry {
            patient_id: v.patient_id.clone(),
            label: v.label,
            path: PathBuf::from(file),
        });
    }
    io::write_manifest(&a.out.join("manifest.csv"), &entries)?;
    for class in CystClass::ALL {
        println!(
            "{},{}",
            class.name(),
            volumes.iter().filter(|v| v.label == class).count()
        );
    }
    Ok(())
}

fn slices_for(volumes: &[Volume], side: usize, threshold: f64) -> Vec<SliceSample> {
    data::extract_all(volumes, side, threshold)
        .into_iter()
        .flat_map(|ex| ex.samples)
        .collect()
}

fn epoch_path(out: &Path, epoch: usize) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
    out.with_file_name(format!("{stem}.epoch-{epoch:04}.dcys"))
}

pub fn train(a: &TrainCmd) -> Result<()> {
    let arch = architecture(&a.model)?;
    let cfg = train_config(&a.train)?;
    let volumes = io::load_dataset(&a.manifest)?;
    let slices = slices_for(&volumes, arch.spec.input_size, a.train.threshold);
    log::info!("{} slices from {} patients", slices.len(), volumes.len());
    let mut graph: LayerGraph<f32> = arch.build()?;
    init_parameters(&mut graph, seed::derive(cfg.seed, &[0]));
    let every = a.checkpoint_every;
    let report = train::train(&mut graph, &slices, &cfg, &mut |rec, g| {
        if every > 0 && (rec.epoch + 1) % every == 0 {
            checkpoint::save(g, &epoch_path(&a.out, rec.epoch + 1))?;
        }
        Ok(())
    })?;
    write_file(&a.loss_csv, report.to_csv())?;
    checkpoint::save(&graph, &a.out)?;
    if let Some(last) = report.epochs.last() {
        println!(
            "final loss {:.6}, slice accuracy {:.4}",
            last.mean_loss, last.slice_accuracy
        );
    }
    Ok(())
}

pub fn cv(a: &CvCmd) -> Result<()> {
    let arch = architecture(&a.model)?;
    let cfg = train_config(&a.train)?;
    let volumes = io::load_dataset(&a.manifest)?;
    let cv = CvConfig {
        k: a.k,
        seed: a.train.seed,
        threshold: a.train.threshold,
        pooled: a.pooled,
        parallel: a.parallel,
    };
    let report = eval::run_cv(&volumes, &arch, &cfg, &cv)?;
    fs::create_dir_all(&a.out).map_err(io_err(&a.out))?;
    write_file(&a.out.join("cv_report.csv"), report.to_csv())?;
    let table = report.to_table();
    write_file(&a.out.join("cv_table.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn load_inputs(input: &InputArgs) -> Result<(LayerGraph<f32>, Vec<Volume>)> {
    check_threshold(input.threshold)?;
    if !input.checkpoint.exists() {
        return Err(Error::Usage(format!(
            "checkpoint {} does not exist",
            input.checkpoint.display()
        )));
    }
    let graph = checkpoint::load(&input.checkpoint)?;
    let volumes = match (&input.manifest, &input.volume) {
        (Some(m), _) => io::load_dataset(m)?,
        (None, Some(v)) => {
            let id = input
                .patient_id
                .clone()
                .or_else(|| v.file_stem().map(|s| s.to_string_lossy().into_owned()))
                .unwrap_or_else(|| "volume".into());
            // the label is not used for inference
            vec![io::read_volume(v, &id, CystClass::Ipmn)?]
        }
        (None, None) => return Err(Error::Usage("pass --manifest or --volume".into())),
    };
    Ok((graph, volumes))
}

fn surviving_slices(v: &Volume, side: usize, threshold: f64) -> Result<Vec<SliceSample>> {
    let samples = data::extract_slices(v, side, threshold).samples;
    if samples.is_empty() {
        return Err(Error::Data(format!(
            "patient {}: no slice reaches the overlap threshold {threshold}",
            v.patient_id
        )));
    }
    Ok(samples)
}

pub fn predict(a: &PredictCmd) -> Result<()> {
    let (graph, volumes) = load_inputs(&a.input)?;
    let side = graph.input_shape()[1];
    for v in &volumes {
        let samples = surviving_slices(v, side, a.input.threshold)?;
        let probs = train::predict_slices(&graph, &samples)?;
        let p = train::aggregate_patient(&probs, &v.patient_id)?;
        let cells: Vec<String> = p.probs.iter().map(|x| format!("{x:.9}")).collect();
        let name = CystClass::from_index(p.predicted).map(|c| c.name()).unwrap_or("?");
        println!("{},{},{}", p.patient_id, cells.join(","), name);
    }
    Ok(())
}

pub fn saliency(a: &SaliencyCmd) -> Result<()> {
    let (graph, volumes) = load_inputs(&a.input)?;
    let side = graph.input_shape()[1];
    fs::create_dir_all(&a.out).map_err(io_err(&a.out))?;
    let rule = if a.vanilla {
        ReluRule::Standard
    } else {
        ReluRule::Guided
    };
    let mut written = 0usize;
    for v in &volumes {
        let samples = surviving_slices(v, side, a.input.threshold)?;
        for s in samples
            .iter()
            .filter(|s| a.slices.is_empty() || a.slices.contains(&s.slice_index))
        {
            let image = Tensor::from_vec(&[1, 1, side, side], s.image.clone())?;
            let opts = SaliencyOptions {
                rule,
                target: a.target,
                ..SaliencyOptions::default()
            };
            let mut map = saliency::gradient_map(&graph, &image, opts)?;
            map.patient_id = Some(v.patient_id.clone());
            map.slice_index = Some(s.slice_index);
            let path = a.out.join(format!(
                "{}_slice{:03}_class{}.pgm",
                v.patient_id, s.slice_index, map.target
            ));
            saliency::write_map_pgm(&map, &path)?;
            if !map.normalized {
                log::warn!("{}: zero gradient map", path.display());
            }
            written += 1;
        }
    }
    println!("wrote {written} maps to {}", a.out.display());
    Ok(())
}
