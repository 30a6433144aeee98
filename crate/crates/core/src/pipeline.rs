//! The four commands behind the `iadd` binary, working in one run directory:
//!
//! ```text
//! <out>/config.ini             canonical configuration of the last command
//! <out>/manifests/<cmd>.json   one manifest per command
//! <out>/teachers/              teacher_NNN.traj, teachers.hash
//! <out>/distill/report.csv     one row per completed iteration
//! <out>/distill/checkpoint_NNNNNN/{distilled.tds, weights.wadp, state.json}
//! <out>/distill/differences.wadp
//! <out>/eval/eval.csv
//! <out>/analysis/{dimensions.csv, deciles.csv}
//! ```
//!
//! Every CSV starts with a `# run <config hash>` line.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::config::{Config, DataSource};
use crate::data::{
    dataset_digest, init_distilled, read_dataset, synthetic_blobs, write_dataset, DatasetManifest, LabeledDataset,
    ZcaTransform,
};
use crate::data::io::Reader;
use crate::distill::{run_distillation, MetaState, Step, REPORT_HEADER};
use crate::eval::{baseline_random, cross_arch_eval, train_eval_student, DatasetKind, EvalReport, EvalTraining, HeldOut};
use crate::gradcore::{Precision, Real};
use crate::trajectories::{ensure_teachers, load_teachers, teacher_path, teachers_hash};
use crate::{Error, Result};

const WADP_MAGIC: &[u8; 4] = b"WADP";

/// `WADP` vector file: magic, u64 length, 32-bit reals.
pub fn encode_weights(values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * values.len());
    out.extend_from_slice(WADP_MAGIC);
    out.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_weights(path: &Path, bytes: &[u8]) -> Result<Vec<f32>> {
    let mut r = Reader::new(path, bytes);
    r.magic(WADP_MAGIC)?;
    let n = r.u64("length")?;
    let n = usize::try_from(n).map_err(|_| r.fail(format!("length {n} does not fit in memory")))?;
    let values = r.f32s(n, "weights")?;
    if !r.done() {
        return Err(r.fail(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(values)
}

pub fn write_weights(path: &Path, values: &[f32]) -> Result<()> {
    crate::write_atomic(path, &encode_weights(values))
}

pub fn read_weights(path: &Path) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_weights(path, &bytes)
}

/// Provenance of one command invocation.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub tool_version: String,
    pub dataset_hash: String,
    pub seeds: BTreeMap<String, u64>,
    pub precision: String,
    pub mode: String,
    pub threads: usize,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub outputs: Vec<String>,
}

/// Scalar part of a checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CheckpointState {
    pub iteration: usize,
    pub alpha: f64,
    pub mode: String,
    pub config_hash: String,
}

/// The preprocessed training and test splits.
pub struct Prepared {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    /// Digest of the preprocessed training split.
    pub hash: String,
}

pub fn prepare_data(cfg: &Config) -> Result<Prepared> {
    let (train, test) = match cfg.data.source {
        DataSource::Synthetic => synthetic_blobs(&cfg.synthetic())?,
        DataSource::File => {
            for p in [&cfg.data.train_path, &cfg.data.test_path] {
                if !p.exists() {
                    return Err(Error::Data(format!("dataset file {} does not exist", p.display())));
                }
            }
            (read_dataset(&cfg.data.train_path)?.0, read_dataset(&cfg.data.test_path)?.0)
        }
    };
    let expected = cfg.input_shape();
    if train.shape != expected || train.classes != cfg.data.classes || test.shape != train.shape {
        return Err(Error::Data(format!(
            "data is {:?} with {} classes, configuration expects {expected:?} with {}",
            train.shape, train.classes, cfg.data.classes
        )));
    }
    let (train, test) = if cfg.data.zca {
        let z = ZcaTransform::fit(&train, cfg.data.zca_lambda)?;
        (z.apply(&train)?, z.apply(&test)?)
    } else {
        (train, test)
    };
    let hash = dataset_digest(&train)?;
    Ok(Prepared { train, test, hash })
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn csv_preamble(cfg: &Config, header: &str) -> String {
    format!("# run {}\n{header}\n", cfg.hash())
}

fn write_manifest(out: &Path, cfg: &Config, command: &str, dataset_hash: &str, started: u64, outputs: &[PathBuf]) -> Result<()> {
    let seeds = ["data", "teacher", "init", "distill", "eval"].iter().map(|s| (s.to_string(), cfg.seed_for(s))).collect();
    let mut seeds: BTreeMap<String, u64> = seeds;
    seeds.insert("master".into(), cfg.run.seed);
    let manifest = RunManifest {
        command: command.into(),
        config_hash: cfg.hash(),
        tool_version: env!("CARGO_PKG_VERSION").into(),
        dataset_hash: dataset_hash.into(),
        seeds,
        precision: cfg.run.precision.as_str().into(),
        mode: cfg.distill.mode.to_string(),
        threads: 1,
        started_unix: started,
        finished_unix: now(),
        outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
    };
    let dir = out.join("manifests");
    create_dir(&dir)?;
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Runtime(e.to_string()))?;
    crate::write_atomic(&dir.join(format!("{command}.json")), json.as_bytes())?;
    crate::write_atomic(&out.join("config.ini"), cfg.render().as_bytes())
}

pub fn read_manifest(out: &Path, command: &str) -> Result<RunManifest> {
    let path = out.join("manifests").join(format!("{command}.json"));
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format { path, offset: e.column() as u64, detail: e.to_string() })
}

pub fn teachers_dir(out: &Path) -> PathBuf {
    out.join("teachers")
}

pub fn distill_dir(out: &Path) -> PathBuf {
    out.join("distill")
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeachSummary {
    pub paths: Vec<PathBuf>,
    pub reused: usize,
    pub trained: usize,
}

pub fn cmd_teach(cfg: &Config, out: &Path) -> Result<TeachSummary> {
    cfg.validate()?;
    let started = now();
    let data = prepare_data(cfg)?;
    let spec = cfg.arch()?;
    let tcfg = cfg.teacher_config();
    let dir = teachers_dir(out);
    let reused = (0..tcfg.teachers).filter(|&k| teacher_path(&dir, k).exists()).count();
    let paths = match cfg.run.precision {
        Precision::F32 => ensure_teachers::<f32>(&dir, &data.train, &spec, &tcfg)?,
        Precision::F64 => ensure_teachers::<f64>(&dir, &data.train, &spec, &tcfg)?,
    };
    write_manifest(out, cfg, "teach", &data.hash, started, &paths)?;
    Ok(TeachSummary { trained: paths.len() - reused, reused, paths })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillSummary {
    pub iterations: usize,
    pub aborted: usize,
    pub alpha: f64,
    /// Matching loss of every completed iteration.
    pub losses: Vec<f64>,
    pub checkpoints: Vec<PathBuf>,
    pub report: PathBuf,
}

pub fn cmd_distill(cfg: &Config, out: &Path) -> Result<DistillSummary> {
    cfg.validate()?;
    match cfg.run.precision {
        Precision::F32 => distill_with::<f32>(cfg, out),
        Precision::F64 => distill_with::<f64>(cfg, out),
    }
}

fn checkpoint_name(iteration: usize) -> String {
    format!("checkpoint_{iteration:06}")
}

/// Writes the bundle into a scratch directory and renames it into place.
fn write_checkpoint<R: Real>(dir: &Path, state: &MetaState<R>, cfg: &Config) -> Result<PathBuf> {
    let target = dir.join(checkpoint_name(state.iteration));
    let scratch = dir.join(format!(".{}.tmp", checkpoint_name(state.iteration)));
    if scratch.exists() {
        fs::remove_dir_all(&scratch).map_err(|e| Error::io(&scratch, e))?;
    }
    create_dir(&scratch)?;
    let manifest = DatasetManifest { config_hash: cfg.hash(), iteration: state.iteration as u64 };
    write_dataset(&scratch.join("distilled.tds"), &state.distilled.to_labeled(), Some(&manifest))?;
    let w: Vec<f32> = state.weights.iter().map(|v| v.as_f64() as f32).collect();
    write_weights(&scratch.join("weights.wadp"), &w)?;
    let scalars = CheckpointState {
        iteration: state.iteration,
        alpha: state.alpha.as_f64(),
        mode: cfg.distill.mode.to_string(),
        config_hash: cfg.hash(),
    };
    let json = serde_json::to_string_pretty(&scalars).map_err(|e| Error::Runtime(e.to_string()))?;
    crate::write_atomic(&scratch.join("state.json"), json.as_bytes())?;
    if target.exists() {
        fs::remove_dir_all(&target).map_err(|e| Error::io(&target, e))?;
    }
    fs::rename(&scratch, &target).map_err(|e| Error::io(&target, e))?;
    Ok(target)
}

fn distill_with<R: Real>(cfg: &Config, out: &Path) -> Result<DistillSummary> {
    let started = now();
    let data = prepare_data(cfg)?;
    let spec = cfg.arch()?;
    let tdir = teachers_dir(out);
    let expected = teachers_hash(&data.train, &spec, &cfg.teacher_config(), R::PRECISION)?;
    let hash_path = tdir.join("teachers.hash");
    let found = match fs::read_to_string(&hash_path) {
        Ok(h) => h.trim().to_string(),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::Runtime(format!("no teachers in {}; run `teach` with this configuration first", tdir.display())));
        }
        Err(e) => return Err(Error::io(&hash_path, e)),
    };
    if found != expected {
        return Err(Error::Runtime(format!(
            "teachers in {} were trained for configuration {found}, this configuration needs {expected}",
            tdir.display()
        )));
    }
    let trajectories = load_teachers(&tdir)?;
    if trajectories.len() != cfg.teachers {
        return Err(Error::Runtime(format!(
            "{} holds {} trajectories, configuration asks for {}; rerun `teach`",
            tdir.display(),
            trajectories.len(),
            cfg.teachers
        )));
    }

    let dir = distill_dir(out);
    create_dir(&dir)?;
    let distilled = init_distilled::<R>(&data.train, cfg.distill.ipc, cfg.seed_for("init"))?;
    let state = MetaState::new(distilled, spec.param_count()?, cfg.distill.alpha0);
    let report_path = dir.join("report.csv");
    let report_tmp = dir.join("report.csv.partial");
    let mut report = std::io::BufWriter::new(fs::File::create(&report_tmp).map_err(|e| Error::io(&report_tmp, e))?);
    report.write_all(csv_preamble(cfg, REPORT_HEADER).as_bytes()).map_err(|e| Error::io(&report_tmp, e))?;
    let interval = cfg.run.checkpoint_interval;
    let total = cfg.distill.iterations;
    let mut checkpoints = Vec::new();
    let checkpoint = |state: &MetaState<R>, checkpoints: &mut Vec<PathBuf>| -> Result<()> {
        if state.iteration.is_multiple_of(interval) || state.iteration == total {
            checkpoints.push(write_checkpoint(&dir, state, cfg)?);
            log::info!("checkpoint at iteration {}", state.iteration);
        }
        Ok(())
    };
    let outcome = run_distillation(&spec, &cfg.distill, &trajectories, state, |step| match step {
        Step::Done { state, row } => {
            writeln!(report, "{}", row.csv()).map_err(|e| Error::io(&report_tmp, e))?;
            if row.iteration % 50 == 0 {
                log::info!("iteration {} loss {:.5} alpha {:.5}", row.iteration, row.loss, row.alpha);
            }
            checkpoint(state, &mut checkpoints)
        }
        Step::Aborted { state, .. } => checkpoint(state, &mut checkpoints),
    })?;
    report.flush().map_err(|e| Error::io(&report_tmp, e))?;
    drop(report);
    fs::rename(&report_tmp, &report_path).map_err(|e| Error::io(&report_path, e))?;

    let mut outputs = vec![report_path.clone()];
    outputs.extend(checkpoints.iter().cloned());
    if cfg.run.analysis_dump {
        let path = dir.join("differences.wadp");
        let d: Vec<f32> = outcome.recent_differences.iter().map(|&v| v as f32).collect();
        write_weights(&path, &d)?;
        outputs.push(path);
    }
    write_manifest(out, cfg, "distill", &data.hash, started, &outputs)?;
    Ok(DistillSummary {
        iterations: outcome.state.iteration,
        aborted: outcome.aborted,
        alpha: outcome.state.alpha.as_f64(),
        losses: outcome.state.losses,
        checkpoints,
        report: report_path,
    })
}

/// The checkpoint directory with the highest iteration.
pub fn latest_checkpoint(out: &Path) -> Result<PathBuf> {
    let dir = distill_dir(out);
    let entries = fs::read_dir(&dir)
        .map_err(|_| Error::Runtime(format!("no distillation output in {}; run `distill` first", dir.display())))?;
    entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("checkpoint_")))
        .max()
        .ok_or_else(|| Error::Runtime(format!("no checkpoint in {}; run `distill` first", dir.display())))
}

pub struct Checkpoint {
    pub dir: PathBuf,
    pub distilled: LabeledDataset,
    pub weights: Vec<f32>,
    pub state: CheckpointState,
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let (distilled, _) = read_dataset(&dir.join("distilled.tds"))?;
    let weights = read_weights(&dir.join("weights.wadp"))?;
    let path = dir.join("state.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let state = serde_json::from_str(&text)
        .map_err(|e| Error::Format { path: path.clone(), offset: e.column() as u64, detail: e.to_string() })?;
    Ok(Checkpoint { dir: dir.to_path_buf(), distilled, weights, state })
}

pub fn cmd_eval(cfg: &Config, out: &Path) -> Result<Vec<EvalReport>> {
    cfg.validate()?;
    match cfg.run.precision {
        Precision::F32 => eval_with::<f32>(cfg, out),
        Precision::F64 => eval_with::<f64>(cfg, out),
    }
}

fn eval_with<R: Real>(cfg: &Config, out: &Path) -> Result<Vec<EvalReport>> {
    let started = now();
    let ckpt = load_checkpoint(&latest_checkpoint(out)?)?;
    let data = prepare_data(cfg)?;
    let source = cfg.arch()?;
    let specs = cfg.eval_archs()?;
    let test = HeldOut::new(data.test);
    let training = EvalTraining {
        sgd: cfg.eval.sgd.clone(),
        augment: cfg.distill.augment.clone(),
        augment_params: cfg.distill.augment_params.clone(),
        seed: cfg.seed_for("eval"),
    };
    let lr = cfg.eval.use_learned_lr.then_some(ckpt.state.alpha);
    let trials = cfg.eval.trials;
    let distilled = cross_arch_eval::<R>(&ckpt.distilled, &source, &specs, lr, trials, &training, &test);
    let mut reports = Vec::new();
    for (spec, result) in specs.iter().zip(distilled) {
        match result {
            Ok(r) => reports.push(r),
            Err(e) => log::error!("distilled evaluation on {} failed: {e}", spec.label()),
        }
        if cfg.eval.random_baseline {
            reports.push(baseline_random::<R>(&data.train, cfg.distill.ipc, trials, spec, &training, &test)?);
        }
        if cfg.eval.full_original {
            let full = EvalTraining { sgd: cfg.teacher.clone(), ..training.clone() };
            reports.push(train_eval_student::<R>(&data.train, spec, trials, &full, &test, DatasetKind::FullOriginal)?);
        }
    }
    if reports.is_empty() {
        return Err(Error::Eval("every evaluation failed".into()));
    }
    let dir = out.join("eval");
    create_dir(&dir)?;
    let mut text = csv_preamble(cfg, EvalReport::CSV_HEADER);
    for r in &reports {
        text.push_str(&r.csv());
        text.push('\n');
    }
    let path = dir.join("eval.csv");
    crate::write_atomic(&path, text.as_bytes())?;
    write_manifest(out, cfg, "eval", &data.hash, started, &[path])?;
    Ok(reports)
}

/// Lead of the distilled set over the random baseline on `arch`, in points.
pub fn distilled_lead(reports: &[EvalReport], arch: &str) -> Option<f64> {
    let find = |kind| reports.iter().find(|r| r.dataset == kind && r.arch == arch).map(|r| r.mean);
    Some(100.0 * (find(DatasetKind::Distilled)? - find(DatasetKind::RandomReal)?))
}

/// One row of the per-dimension dump.
#[derive(Debug, Clone, PartialEq)]
pub struct DimensionRow {
    pub dimension: usize,
    pub layer: String,
    pub difference: f64,
    pub weight: f64,
}

/// Mean weight of one tenth of the dimensions, ordered by difference.
#[derive(Debug, Clone, PartialEq)]
pub struct DecileRow {
    pub decile: usize,
    pub min_difference: f64,
    pub max_difference: f64,
    pub mean_difference: f64,
    pub mean_weight: f64,
    pub count: usize,
}

pub struct Analysis {
    pub rows: Vec<DimensionRow>,
    pub deciles: Vec<DecileRow>,
}

/// Decile 0 holds the smallest differences. Ties keep dimension order.
pub fn decile_summary(differences: &[f64], weights: &[f64]) -> Vec<DecileRow> {
    let n = differences.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| differences[a].total_cmp(&differences[b]));
    (0..10)
        .map(|d| {
            let part = &order[d * n / 10..(d + 1) * n / 10];
            let count = part.len().max(1) as f64;
            DecileRow {
                decile: d,
                min_difference: part.first().map_or(f64::NAN, |&i| differences[i]),
                max_difference: part.last().map_or(f64::NAN, |&i| differences[i]),
                mean_difference: part.iter().map(|&i| differences[i]).sum::<f64>() / count,
                mean_weight: part.iter().map(|&i| weights[i]).sum::<f64>() / count,
                count: part.len(),
            }
        })
        .collect()
}

pub fn cmd_analyze(cfg: &Config, out: &Path) -> Result<Analysis> {
    let started = now();
    let dump = distill_dir(out).join("differences.wadp");
    if !dump.exists() {
        return Err(Error::Runtime(format!(
            "no difference dump at {}; set `analysis_dump = true` under [run] and rerun `distill`",
            dump.display()
        )));
    }
    let differences = read_weights(&dump)?;
    let ckpt = load_checkpoint(&latest_checkpoint(out)?)?;
    let layout = cfg.arch()?.layout()?;
    if differences.len() != layout.total() || ckpt.weights.len() != layout.total() {
        return Err(Error::Layout(format!(
            "dump has {} and checkpoint {} dimensions, architecture has {}",
            differences.len(),
            ckpt.weights.len(),
            layout.total()
        )));
    }
    let differences: Vec<f64> = differences.iter().map(|&v| v as f64).collect();
    let weights: Vec<f64> = ckpt.weights.iter().map(|&v| v as f64).collect();
    let rows: Vec<DimensionRow> = (0..layout.total())
        .map(|p| DimensionRow {
            dimension: p,
            layer: layout.slot_of(p).map_or_else(String::new, |s| s.name.clone()),
            difference: differences[p],
            weight: weights[p],
        })
        .collect();
    let deciles = decile_summary(&differences, &weights);

    let dir = out.join("analysis");
    create_dir(&dir)?;
    let mut text = csv_preamble(cfg, "dimension,layer,difference,weight");
    for r in &rows {
        text.push_str(&format!("{},{},{},{}\n", r.dimension, r.layer, r.difference, r.weight));
    }
    let dims = dir.join("dimensions.csv");
    crate::write_atomic(&dims, text.as_bytes())?;
    let mut text = csv_preamble(cfg, "decile,min_difference,max_difference,mean_difference,mean_weight,count");
    for d in &deciles {
        text.push_str(&format!(
            "{},{},{},{},{},{}\n",
            d.decile, d.min_difference, d.max_difference, d.mean_difference, d.mean_weight, d.count
        ));
    }
    let dec = dir.join("deciles.csv");
    crate::write_atomic(&dec, text.as_bytes())?;
    let hash = read_manifest(out, "distill").map(|m| m.dataset_hash).unwrap_or_default();
    write_manifest(out, cfg, "analyze", &hash, started, &[dims, dec])?;
    Ok(Analysis { rows, deciles })
}
