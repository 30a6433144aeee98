//! Distilled-set quality: fresh students trained on a small set and scored
//! on held-out data, against a random real-image baseline.

use std::cell::Cell;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{sample_per_class, AugmentParams, AugmentPolicy, LabeledDataset};
use crate::gradcore::Real;
use crate::models::ArchSpec;
use crate::train::{accuracy, train_sgd, SgdConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum DatasetKind {
    Distilled,
    RandomReal,
    FullOriginal,
}

impl DatasetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetKind::Distilled => "distilled",
            DatasetKind::RandomReal => "random",
            DatasetKind::FullOriginal => "full",
        }
    }
}

/// The test split. Only scoring reads it, and every read is counted.
#[derive(Debug)]
pub struct HeldOut {
    data: LabeledDataset,
    reads: Cell<usize>,
}

impl HeldOut {
    pub fn new(data: LabeledDataset) -> Self {
        HeldOut { data, reads: Cell::new(0) }
    }

    pub fn score<R: Real>(&self, spec: &ArchSpec, params: &[R]) -> Result<f64> {
        self.reads.set(self.reads.get() + 1);
        accuracy(spec, params, &self.data)
    }

    pub fn reads(&self) -> usize {
        self.reads.get()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub dataset: DatasetKind,
    pub arch: String,
    /// Architecture the distilled set was produced with, when relevant.
    pub source_arch: Option<String>,
    pub trials: usize,
    /// Test accuracies of the trials that finished.
    pub accuracies: Vec<f64>,
    pub failed: usize,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl EvalReport {
    fn new(dataset: DatasetKind, arch: &ArchSpec, accuracies: Vec<f64>, failed: usize) -> Result<Self> {
        if accuracies.is_empty() {
            return Err(Error::Eval(format!(
                "all {failed} trials of {} on {} failed",
                dataset.as_str(),
                arch.label()
            )));
        }
        let (mean, std) = mean_std(&accuracies);
        Ok(EvalReport {
            dataset,
            arch: arch.label(),
            source_arch: None,
            trials: accuracies.len() + failed,
            accuracies,
            failed,
            mean,
            std,
        })
    }

    pub const CSV_HEADER: &'static str = "dataset,arch,source_arch,trials,failed,mean,std,accuracies";

    pub fn csv(&self) -> String {
        let accs: Vec<String> = self.accuracies.iter().map(|a| format!("{a}")).collect();
        format!(
            "{},{},{},{},{},{},{},{}",
            self.dataset.as_str(),
            self.arch,
            self.source_arch.as_deref().unwrap_or(""),
            self.trials,
            self.failed,
            self.mean,
            self.std,
            accs.join(";")
        )
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<10} {:<18} {:6.2} ± {:5.2}  ({} trials",
            self.dataset.as_str(),
            self.arch,
            100.0 * self.mean,
            100.0 * self.std,
            self.trials
        )?;
        if self.failed > 0 {
            write!(f, ", {} failed", self.failed)?;
        }
        f.write_str(")")
    }
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// How evaluation students are trained.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalTraining {
    pub sgd: SgdConfig,
    pub augment: AugmentPolicy,
    pub augment_params: AugmentParams,
    pub seed: u64,
}

fn trial_seed(seed: u64, trial: usize, salt: u64) -> u64 {
    seed.wrapping_mul(0xD6E8_FEB8_6659_FD93) ^ (trial as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ salt
}

/// Trains `trials` fresh students and scores each on the test split.
pub fn train_eval_student<R: Real>(
    train: &LabeledDataset,
    spec: &ArchSpec,
    trials: usize,
    cfg: &EvalTraining,
    test: &HeldOut,
    dataset: DatasetKind,
) -> Result<EvalReport> {
    if trials == 0 {
        return Err(Error::Config("at least one evaluation trial is required".into()));
    }
    if train.shape != spec.input || train.classes != spec.classes {
        return Err(Error::Eval(format!(
            "{} expects {:?} inputs and {} classes, data has {:?} and {}",
            spec.label(),
            spec.input,
            spec.classes,
            train.shape,
            train.classes
        )));
    }
    let mut accuracies = Vec::with_capacity(trials);
    let mut failed = 0;
    for t in 0..trials {
        let init = spec.init_params::<R>(trial_seed(cfg.seed, t, 1))?.values;
        let aug = (!cfg.augment.is_none()).then_some((&cfg.augment, &cfg.augment_params));
        match train_sgd(spec, init, train, &cfg.sgd, aug, trial_seed(cfg.seed, t, 2), |_, _| Ok(())) {
            Ok(params) => accuracies.push(test.score(spec, &params)?),
            Err(Error::Runtime(msg)) => {
                log::warn!("evaluation trial {t} on {} failed: {msg}", spec.label());
                failed += 1;
            }
            Err(e) => return Err(e),
        }
    }
    EvalReport::new(dataset, spec, accuracies, failed)
}

/// `ipc` real images per class, redrawn each trial.
pub fn baseline_random<R: Real>(
    original: &LabeledDataset,
    ipc: usize,
    trials: usize,
    spec: &ArchSpec,
    cfg: &EvalTraining,
    test: &HeldOut,
) -> Result<EvalReport> {
    let mut accuracies = Vec::with_capacity(trials);
    let mut failed = 0;
    for t in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(trial_seed(cfg.seed, t, 3));
        let mut picks: Vec<usize> = sample_per_class(original, ipc, &mut rng)?.into_iter().flatten().collect();
        picks.sort_unstable();
        let subset = original.subset(&picks);
        let trial_cfg = EvalTraining { seed: trial_seed(cfg.seed, t, 4), ..cfg.clone() };
        match train_eval_student::<R>(&subset, spec, 1, &trial_cfg, test, DatasetKind::RandomReal) {
            Ok(r) => accuracies.extend(r.accuracies),
            Err(Error::Eval(msg)) if msg.contains("failed") => failed += 1,
            Err(e) => return Err(e),
        }
    }
    EvalReport::new(DatasetKind::RandomReal, spec, accuracies, failed)
}

/// The distilled set on each architecture. `learned_lr` replaces the
/// training rate on the architecture the set was distilled with.
#[allow(clippy::too_many_arguments)]
pub fn cross_arch_eval<R: Real>(
    distilled: &LabeledDataset,
    source: &ArchSpec,
    specs: &[ArchSpec],
    learned_lr: Option<f64>,
    trials: usize,
    cfg: &EvalTraining,
    test: &HeldOut,
) -> Vec<Result<EvalReport>> {
    specs
        .iter()
        .map(|spec| {
            let mut run_cfg = cfg.clone();
            if let (Some(lr), true) = (learned_lr, spec == source) {
                run_cfg.sgd.lr = lr;
            }
            let mut report = train_eval_student::<R>(distilled, spec, trials, &run_cfg, test, DatasetKind::Distilled)?;
            report.source_arch = Some(source.label());
            Ok(report)
        })
        .collect()
}
