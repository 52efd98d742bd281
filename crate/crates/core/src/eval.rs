//! Stratified patient-level k-fold cross-validation and confusion matrices.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::data::slices::{extract_slices, SliceSample};
use crate::data::volume::{CystClass, Volume};
use crate::error::{Error, Result};
use crate::seed;
use crate::train::{self, PatientPrediction, TrainConfig, TrainReport};
use crate::zoo::{init_parameters, Architecture};

/// Indices into the patient list passed to [`stratified_kfold`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldSplit {
    pub fold: usize,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Stratification {
    pub folds: Vec<FoldSplit>,
    pub warnings: Vec<String>,
}

/// Shuffles each class (seeded) and deals its patients round-robin over the
/// folds. The dealing position carries over from one class to the next so
/// test-set sizes stay within one of each other.
///
/// `k` is lowered to the number of patients when it exceeds it; classes
/// smaller than `k` are dealt as usual (some folds then lack that class) and
/// reported in the warnings.
pub fn stratified_kfold(labels: &[usize], k: usize, seed: u64) -> Result<Stratification> {
    if k < 2 {
        return Err(Error::Usage(format!("k-fold needs k ≥ 2, got {k}")));
    }
    if labels.len() < 2 {
        return Err(Error::Data(format!(
            "cross-validation needs at least 2 patients, got {}",
            labels.len()
        )));
    }
    let mut warnings = Vec::new();
    let k = if k > labels.len() {
        let msg = format!("k={k} exceeds the {} patients; using k={}", labels.len(), labels.len());
        log::warn!("{msg}");
        warnings.push(msg);
        labels.len()
    } else {
        k
    };
    let classes: BTreeSet<usize> = labels.iter().copied().collect();
    let mut test: Vec<Vec<usize>> = vec![Vec::new(); k];
    let mut next = 0usize;
    for &c in &classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if members.len() < k {
            let msg = format!(
                "class {c} has {} patients, fewer than k={k}; some folds omit it",
                members.len()
            );
            log::warn!("{msg}");
            warnings.push(msg);
        }
        members.shuffle(&mut seed::rng(seed, &[c as u64]));
        for p in members {
            test[next % k].push(p);
            next += 1;
        }
    }
    let folds = test
        .into_iter()
        .enumerate()
        .map(|(fold, mut t)| {
            t.sort_unstable();
            let held: BTreeSet<usize> = t.iter().copied().collect();
            let train = (0..labels.len()).filter(|i| !held.contains(i)).collect();
            FoldSplit { fold, train, test: t }
        })
        .collect();
    Ok(Stratification { folds, warnings })
}

/// Rows are true classes, columns predicted classes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<usize>>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            counts: vec![vec![0; classes]; classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn add(&mut self, truth: usize, predicted: usize) {
        self.counts[truth][predicted] += 1;
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn correct(&self) -> usize {
        (0..self.classes()).map(|i| self.counts[i][i]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        self.correct() as f64 / self.total().max(1) as f64
    }

    /// Row-normalized rates; rows without support are `None`.
    pub fn normalized(&self) -> Vec<Option<Vec<f64>>> {
        self.counts
            .iter()
            .map(|row| {
                let n: usize = row.iter().sum();
                (n > 0).then(|| row.iter().map(|&c| c as f64 / n as f64).collect())
            })
            .collect()
    }
}

/// Patient-level confusion matrix and accuracy (correct / patients).
pub fn confusion_and_accuracy(
    predictions: &[PatientPrediction],
    truths: &HashMap<String, usize>,
    classes: usize,
) -> Result<(ConfusionMatrix, f64)> {
    let mut m = ConfusionMatrix::new(classes);
    for p in predictions {
        let &t = truths
            .get(&p.patient_id)
            .ok_or_else(|| Error::Data(format!("prediction for unknown patient {:?}", p.patient_id)))?;
        if t >= classes || p.predicted >= classes {
            return Err(Error::Data(format!(
                "patient {:?}: class index out of range",
                p.patient_id
            )));
        }
        m.add(t, p.predicted);
    }
    let acc = m.accuracy();
    Ok((m, acc))
}

/// Mean of the per-fold normalized rows, skipping folds where a row is absent.
pub fn average_normalized(matrices: &[ConfusionMatrix], classes: usize) -> Vec<Option<Vec<f64>>> {
    (0..classes)
        .map(|r| {
            let rows: Vec<Vec<f64>> = matrices.iter().filter_map(|m| m.normalized()[r].clone()).collect();
            (!rows.is_empty()).then(|| {
                (0..classes)
                    .map(|c| rows.iter().map(|row| row[c]).sum::<f64>() / rows.len() as f64)
                    .collect()
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct CvConfig {
    pub k: usize,
    pub seed: u64,
    pub threshold: f64,
    /// Sum counts over folds before normalizing instead of averaging rates.
    pub pooled: bool,
    pub parallel: bool,
}

impl Default for CvConfig {
    fn default() -> Self {
        CvConfig {
            k: 10,
            seed: 0,
            threshold: crate::data::slices::DEFAULT_THRESHOLD,
            pooled: false,
            parallel: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FoldReport {
    pub fold: usize,
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub predictions: Vec<PatientPrediction>,
    pub confusion: ConfusionMatrix,
    pub accuracy: f64,
    pub training: TrainReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CvReport {
    pub k: usize,
    pub folds: Vec<FoldReport>,
    pub pooled: bool,
    /// Aggregate row-normalized matrix; `None` rows had no test patients.
    pub matrix: Vec<Option<Vec<f64>>>,
    /// Correct test patients over all test patients, across folds.
    pub overall_accuracy: f64,
    pub warnings: Vec<String>,
}

impl CvReport {
    pub fn mean_fold_accuracy(&self) -> f64 {
        self.folds.iter().map(|f| f.accuracy).sum::<f64>() / self.folds.len().max(1) as f64
    }

    /// `fold,class,p_0..p_K,accuracy` rows per fold, then `aggregate` rows.
    /// Absent rows are written with empty rate cells.
    pub fn to_csv(&self) -> String {
        let k = self.matrix.len();
        let mut out = String::from("fold,class");
        for c in 0..k {
            let _ = write!(out, ",pred_{}", class_name(c));
        }
        out.push_str(",accuracy\n");
        let mut emit = |fold: &str, rows: &[Option<Vec<f64>>], acc: f64| {
            for (c, row) in rows.iter().enumerate() {
                let _ = write!(out, "{fold},{}", class_name(c));
                for j in 0..k {
                    match row {
                        Some(r) => {
                            let _ = write!(out, ",{:.6}", r[j]);
                        }
                        None => out.push(','),
                    }
                }
                let _ = writeln!(out, ",{acc:.6}");
            }
        };
        for f in &self.folds {
            emit(&f.fold.to_string(), &f.confusion.normalized(), f.accuracy);
        }
        emit("aggregate", &self.matrix, self.overall_accuracy);
        out
    }

    /// Percentages with true classes as rows, in the layout of a printed
    /// confusion table.
    pub fn to_table(&self) -> String {
        let k = self.matrix.len();
        let mut out = String::new();
        let _ = write!(out, "{:>8}", "");
        for c in 0..k {
            let _ = write!(out, "{:>9}", class_name(c));
        }
        out.push('\n');
        for (c, row) in self.matrix.iter().enumerate() {
            let _ = write!(out, "{:>8}", class_name(c));
            for j in 0..k {
                match row {
                    Some(r) => {
                        let _ = write!(out, "{:>8.2}%", 100.0 * r[j]);
                    }
                    None => {
                        let _ = write!(out, "{:>9}", "n/a");
                    }
                }
            }
            out.push('\n');
        }
        let _ = writeln!(
            out,
            "overall accuracy {:.2}% ({} folds, {})",
            100.0 * self.overall_accuracy,
            self.k,
            if self.pooled {
                "pooled counts"
            } else {
                "averaged normalized rows"
            }
        );
        out
    }
}

fn class_name(c: usize) -> String {
    CystClass::from_index(c)
        .map(|x| x.name().to_string())
        .unwrap_or_else(|| c.to_string())
}

/// Full cross-validation: slices are cut at the network's input size, folds
/// are stratified by patient label, and each fold trains a fresh network
/// seeded from `(seed, fold)`.
pub fn run_cv(volumes: &[Volume], arch: &Architecture, train_cfg: &TrainConfig, cv: &CvConfig) -> Result<CvReport> {
    train_cfg.validate()?;
    let side = arch.spec.input_size;
    let mut warnings = Vec::new();
    let mut patients: Vec<(&Volume, Vec<SliceSample>)> = Vec::new();
    for v in volumes {
        let ex = extract_slices(v, side, cv.threshold);
        warnings.extend(ex.warnings);
        if ex.samples.is_empty() {
            let msg = format!("patient {}: no slices pass the overlap filter; excluded", v.patient_id);
            log::warn!("{msg}");
            warnings.push(msg);
        } else {
            patients.push((v, ex.samples));
        }
    }
    let labels: Vec<usize> = patients.iter().map(|(v, _)| v.label.index()).collect();
    let strat = stratified_kfold(&labels, cv.k, cv.seed)?;
    warnings.extend(strat.warnings.iter().cloned());
    let k = strat.folds.len();
    let classes = arch.spec.num_classes;
    let truths: HashMap<String, usize> = patients
        .iter()
        .map(|(v, _)| (v.patient_id.clone(), v.label.index()))
        .collect();

    let run_fold = |split: &FoldSplit| -> Result<FoldReport> {
        let train_ids: Vec<String> = split.train.iter().map(|&i| patients[i].0.patient_id.clone()).collect();
        let test_ids: Vec<String> = split.test.iter().map(|&i| patients[i].0.patient_id.clone()).collect();
        assert!(
            train_ids.iter().all(|id| !test_ids.contains(id)),
            "fold {} leaks patients between train and test",
            split.fold
        );
        let train_slices: Vec<SliceSample> = split.train.iter().flat_map(|&i| patients[i].1.clone()).collect();
        let test_slices: Vec<SliceSample> = split.test.iter().flat_map(|&i| patients[i].1.clone()).collect();

        let mut graph = arch.build::<f32>()?;
        init_parameters(&mut graph, seed::derive(cv.seed, &[split.fold as u64, 0]));
        let cfg = TrainConfig {
            seed: seed::derive(cv.seed, &[split.fold as u64, 1]),
            ..train_cfg.clone()
        };
        let training = train::train(&mut graph, &train_slices, &cfg, &mut |r, _| {
            log::debug!("fold {}: epoch {} loss {:.5}", split.fold, r.epoch, r.mean_loss);
            Ok(())
        })?;
        let predictions = train::predict_patients(&graph, &test_slices)?;
        let (confusion, accuracy) = confusion_and_accuracy(&predictions, &truths, classes)?;
        log::info!(
            "fold {}: accuracy {:.4} on {} patients",
            split.fold,
            accuracy,
            test_ids.len()
        );
        Ok(FoldReport {
            fold: split.fold,
            train_ids,
            test_ids,
            predictions,
            confusion,
            accuracy,
            training,
        })
    };
    let folds: Vec<FoldReport> = if cv.parallel {
        strat.folds.par_iter().map(run_fold).collect::<Result<_>>()?
    } else {
        strat.folds.iter().map(run_fold).collect::<Result<_>>()?
    };

    let mut pooled = ConfusionMatrix::new(classes);
    for f in &folds {
        for (r, row) in f.confusion.counts.iter().enumerate() {
            for (c, &n) in row.iter().enumerate() {
                pooled.counts[r][c] += n;
            }
        }
    }
    let matrices: Vec<ConfusionMatrix> = folds.iter().map(|f| f.confusion.clone()).collect();
    let matrix = if cv.pooled {
        pooled.normalized()
    } else {
        average_normalized(&matrices, classes)
    };
    Ok(CvReport {
        k,
        folds,
        pooled: cv.pooled,
        matrix,
        overall_accuracy: pooled.accuracy(),
        warnings,
    })
}
