//! Teacher trajectories: per-epoch parameter snapshots on disk and random
//! `(θ_i, θ_{i+K})` windows into them.
//!
//! File layout, little-endian: magic `TRAJ`, u32 version, architecture
//! (u8 kind, u32 depth, width, channels, height, width, classes), u32 epochs
//! `I`, u64 parameter count `P`, u64 teacher seed, then `(I+1)·P` f32 values,
//! snapshot 0 being the untrained initialization.

use std::fs::{self, File};
use std::io::Read;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::io::Reader;
use crate::data::{dataset_digest, LabeledDataset};
use crate::gradcore::{Precision, Real};
use crate::models::{ArchKind, ArchSpec, InputShape};
use crate::train::{train_sgd, SgdConfig};
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"TRAJ";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 4 + 4 + 1 + 6 * 4 + 4 + 8 + 8;
const HASH_FILE: &str = "teachers.hash";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrajectoryHeader {
    pub spec: ArchSpec,
    /// `I`, the number of trained epochs.
    pub epochs: usize,
    /// `P`.
    pub params: usize,
    pub teacher_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub header: TrajectoryHeader,
    snapshots: Vec<f32>,
}

impl Trajectory {
    pub fn new(header: TrajectoryHeader, snapshots: Vec<f32>) -> Result<Self> {
        let want = (header.epochs + 1) * header.params;
        if snapshots.len() != want {
            return Err(Error::Layout(format!(
                "{} snapshot values, expected {} epochs + 1 of {} parameters",
                snapshots.len(),
                header.epochs,
                header.params
            )));
        }
        let p = header.spec.param_count()?;
        if p != header.params {
            return Err(Error::Layout(format!("{} has {p} parameters, trajectory stores {}", header.spec.label(), header.params)));
        }
        Ok(Trajectory { header, snapshots })
    }

    /// Number of stored snapshots, `I + 1`.
    pub fn len(&self) -> usize {
        self.header.epochs + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn snapshot(&self, epoch: usize) -> &[f32] {
        let p = self.header.params;
        &self.snapshots[epoch * p..(epoch + 1) * p]
    }

    pub fn snapshot_as<R: Real>(&self, epoch: usize) -> Vec<R> {
        self.snapshot(epoch).iter().map(|&v| R::lit(f64::from(v))).collect()
    }
}

fn encode_header(h: &TrajectoryHeader, out: &mut Vec<u8>) -> Result<()> {
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(match h.spec.kind {
        ArchKind::Mlp => 0,
        ArchKind::ConvNet => 1,
    });
    let s = h.spec;
    for v in [s.depth, s.width, s.input.channels, s.input.height, s.input.width, s.classes, h.epochs] {
        let v = u32::try_from(v).map_err(|_| Error::Layout(format!("header field {v} exceeds u32")))?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(h.params as u64).to_le_bytes());
    out.extend_from_slice(&h.teacher_seed.to_le_bytes());
    Ok(())
}

pub fn encode_trajectory(t: &Trajectory) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(HEADER_LEN + t.snapshots.len() * 4);
    encode_header(&t.header, &mut out)?;
    for &v in &t.snapshots {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn decode_header(r: &mut Reader<'_>) -> Result<TrajectoryHeader> {
    r.magic(MAGIC)?;
    let version = r.u32("version")?;
    if version != VERSION {
        r.pos -= 4;
        return Err(r.fail(format!("unsupported trajectory version {version}, expected {VERSION}")));
    }
    let kind = match r.take(1, "architecture kind")?[0] {
        0 => ArchKind::Mlp,
        1 => ArchKind::ConvNet,
        k => {
            r.pos -= 1;
            return Err(r.fail(format!("unknown architecture kind {k}")));
        }
    };
    let mut f = [0usize; 7];
    for (slot, what) in f.iter_mut().zip(["depth", "width", "channels", "height", "width", "classes", "epochs"]) {
        *slot = r.u32(what)? as usize;
    }
    let [depth, width, channels, height, in_width, classes, epochs] = f;
    let spec = ArchSpec { kind, depth, width, input: InputShape { channels, height, width: in_width }, classes };
    let params_at = r.pos;
    let params = r.u64("parameter count")? as usize;
    let teacher_seed = r.u64("teacher seed")?;
    let expected = spec.param_count().map_err(|e| r.fail(format!("invalid architecture in header: {e}")))?;
    if expected != params {
        r.pos = params_at;
        return Err(r.fail(format!("header P={params} but {} has {expected} parameters", spec.label())));
    }
    Ok(TrajectoryHeader { spec, epochs, params, teacher_seed })
}

pub fn decode_trajectory(path: &Path, bytes: &[u8]) -> Result<Trajectory> {
    let mut r = Reader::new(path, bytes);
    let header = decode_header(&mut r)?;
    let per = header.params * 4;
    let count = header.epochs + 1;
    let available = bytes.len() - HEADER_LEN;
    if available < per * count {
        let index = available / per;
        r.pos = HEADER_LEN + index * per;
        return Err(r.fail(format!(
            "truncated at snapshot {index} of {count}: {} of {per} bytes present",
            available - index * per
        )));
    }
    let snapshots = r.f32s(count * header.params, "snapshots")?;
    if !r.done() {
        return Err(r.fail(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Trajectory::new(header, snapshots)
}

pub fn save_trajectory(path: &Path, t: &Trajectory) -> Result<()> {
    crate::write_atomic(path, &encode_trajectory(t)?)
}

pub fn load_trajectory(path: &Path) -> Result<Trajectory> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_trajectory(path, &bytes)
}

/// Reads and validates only the header.
pub fn inspect_trajectory(path: &Path) -> Result<TrajectoryHeader> {
    let mut buf = Vec::with_capacity(HEADER_LEN);
    File::open(path)
        .and_then(|f| f.take(HEADER_LEN as u64).read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    decode_header(&mut Reader::new(path, &buf))
}

/// Teacher pool settings.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TeacherConfig {
    pub teachers: usize,
    pub sgd: SgdConfig,
    pub seed: u64,
}

impl TeacherConfig {
    /// Seed of teacher `k`; it drives both its initialization and its shuffling.
    pub fn teacher_seed(&self, k: usize) -> u64 {
        self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(k as u64 + 1)
    }
}

/// Trains one teacher, keeping the initialization and every epoch.
pub fn train_teacher<R: Real>(data: &LabeledDataset, spec: &ArchSpec, sgd: &SgdConfig, seed: u64) -> Result<Trajectory> {
    let init = spec.init_params::<R>(seed)?.values;
    let p = init.len();
    let mut snapshots: Vec<f32> = Vec::with_capacity((sgd.epochs + 1) * p);
    snapshots.extend(init.iter().map(|v| v.as_f64() as f32));
    train_sgd(spec, init, data, sgd, None, seed ^ 0x5EED, |_, theta| {
        snapshots.extend(theta.iter().map(|v| v.as_f64() as f32));
        Ok(())
    })?;
    Trajectory::new(TrajectoryHeader { spec: *spec, epochs: sgd.epochs, params: p, teacher_seed: seed }, snapshots)
}

/// Content key of a teacher pool: everything that determines the files.
pub fn teachers_hash(data: &LabeledDataset, spec: &ArchSpec, cfg: &TeacherConfig, precision: Precision) -> Result<String> {
    let key = serde_json::json!({
        "dataset": dataset_digest(data)?,
        "spec": spec,
        "teachers": cfg,
        "precision": precision.as_str(),
        "format": VERSION,
    });
    Ok(crate::sha256_hex(key.to_string().as_bytes()))
}

pub fn teacher_path(dir: &Path, k: usize) -> PathBuf {
    dir.join(format!("teacher_{k:03}.traj"))
}

/// Ensures `dir` holds the teacher pool for this configuration and returns
/// the file paths. A pool with the same hash is reused; missing files are
/// trained. A different hash is an error.
pub fn ensure_teachers<R: Real>(
    dir: &Path,
    data: &LabeledDataset,
    spec: &ArchSpec,
    cfg: &TeacherConfig,
) -> Result<Vec<PathBuf>> {
    if cfg.teachers == 0 {
        return Err(Error::Config("at least one teacher is required".into()));
    }
    cfg.sgd.validate()?;
    let hash = teachers_hash(data, spec, cfg, R::PRECISION)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let hash_path = dir.join(HASH_FILE);
    match fs::read_to_string(&hash_path) {
        Ok(existing) if existing.trim() != hash => {
            return Err(Error::Runtime(format!(
                "{} holds teachers for configuration {}, not {hash}; choose another directory or remove it",
                dir.display(),
                existing.trim()
            )));
        }
        Ok(_) => {}
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            crate::write_atomic(&hash_path, format!("{hash}\n").as_bytes())?;
        }
        Err(e) => return Err(Error::io(&hash_path, e)),
    }
    let mut paths = Vec::with_capacity(cfg.teachers);
    for k in 0..cfg.teachers {
        let path = teacher_path(dir, k);
        let seed = cfg.teacher_seed(k);
        if path.exists() {
            let h = inspect_trajectory(&path)?;
            if h.spec != *spec || h.epochs != cfg.sgd.epochs || h.teacher_seed != seed {
                return Err(Error::Runtime(format!("{} does not match the recorded configuration", path.display())));
            }
            log::info!("reusing {}", path.display());
        } else {
            log::info!("training teacher {}/{} (seed {seed})", k + 1, cfg.teachers);
            let t = train_teacher::<R>(data, spec, &cfg.sgd, seed)?;
            save_trajectory(&path, &t)?;
        }
        paths.push(path);
    }
    Ok(paths)
}

/// Loads every `teacher_*.traj` in `dir`, in file-name order.
pub fn load_teachers(dir: &Path) -> Result<Vec<Trajectory>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("teacher_") && n.ends_with(".traj"))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Runtime(format!("no teacher trajectories in {}", dir.display())));
    }
    let trajs: Vec<Trajectory> = paths.iter().map(|p| load_trajectory(p)).collect::<Result<_>>()?;
    let p = trajs[0].header.params;
    if let Some(t) = trajs.iter().find(|t| t.header.params != p) {
        return Err(Error::Layout(format!("mixed parameter counts {p} and {} in {}", t.header.params, dir.display())));
    }
    Ok(trajs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StartSample {
    pub trajectory: usize,
    pub start: usize,
    pub target: usize,
}

/// Checks that every start `i < max_start` has a target `i + k` on every trajectory.
pub fn validate_window(trajectories: &[Trajectory], k: usize, max_start: usize) -> Result<()> {
    if trajectories.is_empty() {
        return Err(Error::Config("no teacher trajectories".into()));
    }
    if k == 0 || max_start == 0 {
        return Err(Error::Config(format!("K and the start bound must be at least 1, got K={k}, I+={max_start}")));
    }
    let shortest = trajectories.iter().map(|t| t.header.epochs).min().unwrap_or(0);
    if max_start - 1 + k > shortest {
        return Err(Error::Config(format!(
            "start bound {max_start} with K={k} needs {} epochs, shortest trajectory has {shortest}",
            max_start - 1 + k
        )));
    }
    Ok(())
}

/// Uniform trajectory, then uniform start in `[0, max_start)`.
pub fn sample_start(trajectories: &[Trajectory], k: usize, max_start: usize, rng: &mut ChaCha8Rng) -> Result<StartSample> {
    validate_window(trajectories, k, max_start)?;
    let trajectory = rng.random_range(0..trajectories.len());
    let start = rng.random_range(0..max_start);
    Ok(StartSample { trajectory, start, target: start + k })
}
