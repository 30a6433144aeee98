//! Run configuration: flat `key = value` text under `[section]` headers.
//!
//! Every key has a default, unknown keys are rejected, and [`Config::render`]
//! writes every key back in a fixed order so that parsing the output yields
//! the same configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::data::{AugmentParams, AugmentPolicy, SyntheticSpec};
use crate::distill::{DistillConfig, Mode};
use crate::gradcore::Precision;
use crate::models::{ArchKind, ArchSpec, InputShape};
use crate::train::SgdConfig;
use crate::trajectories::TeacherConfig;
use crate::{Error, Result};

/// A value that can appear on the right of `=`.
trait Value: Sized {
    fn parse(s: &str) -> std::result::Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! plain_value {
    ($($t:ty),*) => {$(
        impl Value for $t {
            fn parse(s: &str) -> std::result::Result<Self, String> {
                s.parse().map_err(|e| format!("{e}"))
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

plain_value!(usize, u64, f64, bool, Mode, AugmentPolicy);

impl Value for Precision {
    fn parse(s: &str) -> std::result::Result<Self, String> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            _ => Err("expected f32 or f64".into()),
        }
    }
    fn render(&self) -> String {
        self.as_str().into()
    }
}

impl Value for ArchKind {
    fn parse(s: &str) -> std::result::Result<Self, String> {
        match s {
            "convnet" => Ok(ArchKind::ConvNet),
            "mlp" => Ok(ArchKind::Mlp),
            _ => Err("expected convnet or mlp".into()),
        }
    }
    fn render(&self) -> String {
        self.as_str().into()
    }
}

impl Value for DataSource {
    fn parse(s: &str) -> std::result::Result<Self, String> {
        match s {
            "synthetic" => Ok(DataSource::Synthetic),
            "file" => Ok(DataSource::File),
            _ => Err("expected synthetic or file".into()),
        }
    }
    fn render(&self) -> String {
        match self {
            DataSource::Synthetic => "synthetic",
            DataSource::File => "file",
        }
        .into()
    }
}

impl Value for PathBuf {
    fn parse(s: &str) -> std::result::Result<Self, String> {
        Ok(PathBuf::from(s))
    }
    fn render(&self) -> String {
        self.display().to_string()
    }
}

/// `auto` stands for `None`.
impl<T: Value> Value for Option<T> {
    fn parse(s: &str) -> std::result::Result<Self, String> {
        if s == "auto" {
            Ok(None)
        } else {
            T::parse(s).map(Some)
        }
    }
    fn render(&self) -> String {
        self.as_ref().map_or_else(|| "auto".into(), T::render)
    }
}

impl<T: Value> Value for Vec<T> {
    fn parse(s: &str) -> std::result::Result<Self, String> {
        s.split(',').map(str::trim).filter(|t| !t.is_empty()).map(T::parse).collect()
    }
    fn render(&self) -> String {
        self.iter().map(T::render).collect::<Vec<_>>().join(", ")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataSource {
    Synthetic,
    File,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSection {
    /// Master seed; every subsystem seed derives from it.
    pub seed: u64,
    pub precision: Precision,
    /// Iterations between distillation checkpoints.
    pub checkpoint_interval: usize,
    /// Write the per-dimension difference dump needed by `analyze`.
    pub analysis_dump: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSection {
    pub source: DataSource,
    /// Training and test files, used when `source = file`.
    pub train_path: PathBuf,
    pub test_path: PathBuf,
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub channels: usize,
    pub image_size: usize,
    pub cluster_std: f64,
    pub zca: bool,
    pub zca_lambda: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSection {
    pub arch: ArchKind,
    pub depth: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSection {
    pub trials: usize,
    pub sgd: SgdConfig,
    /// Train students on distilled data with the learned `α` instead of `sgd.lr`.
    pub use_learned_lr: bool,
    /// Student architectures; `convnet` takes the model section's shape.
    pub archs: Vec<ArchKind>,
    pub mlp_depth: usize,
    pub mlp_width: usize,
    pub random_baseline: bool,
    pub full_original: bool,
    /// Minimum lead over the random baseline required by `eval --assert`.
    pub assert_margin: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub run: RunSection,
    pub data: DataSection,
    pub model: ModelSection,
    pub teacher: SgdConfig,
    pub teachers: usize,
    pub distill: DistillConfig,
    pub eval: EvalSection,
}

impl Default for Config {
    fn default() -> Self {
        Config::parse("").expect("defaults are valid")
    }
}

/// The key/value pairs of one section, consumed as they are read.
struct Section<'a> {
    name: &'static str,
    entries: Entries,
    known: Vec<&'static str>,
    out: &'a mut String,
    rendering: bool,
}

impl Section<'_> {
    fn take<T: Value>(&mut self, key: &'static str, default: T) -> Result<T> {
        self.known.push(key);
        let value = match self.entries.remove(key) {
            Some((line, raw)) => T::parse(&raw).map_err(|e| {
                Error::Config(format!("line {line}: invalid value `{raw}` for {}.{key}: {e}", self.name))
            })?,
            None => default,
        };
        if self.rendering {
            let _ = writeln!(self.out, "{key} = {}", value.render());
        }
        Ok(value)
    }

    fn finish(self) -> Result<()> {
        match self.entries.into_iter().next() {
            Some((key, (line, _))) => Err(Error::Config(format!(
                "line {line}: unknown key `{key}` in [{}]; allowed keys: {}",
                self.name,
                self.known.join(", ")
            ))),
            None => Ok(()),
        }
    }
}

type Entries = BTreeMap<String, (usize, String)>;

fn open<'a>(sections: &mut BTreeMap<&'static str, Entries>, name: &'static str, out: &'a mut String, rendering: bool) -> Section<'a> {
    if rendering {
        if !out.is_empty() {
            out.push('\n');
        }
        let _ = writeln!(out, "[{name}]");
    }
    Section { name, entries: sections.remove(name).unwrap_or_default(), known: Vec::new(), out, rendering }
}

fn sgd(s: &mut Section<'_>, base: &SgdConfig) -> Result<SgdConfig> {
    Ok(SgdConfig {
        epochs: s.take("epochs", base.epochs)?,
        lr: s.take("lr", base.lr)?,
        momentum: s.take("momentum", base.momentum)?,
        weight_decay: s.take("weight_decay", base.weight_decay)?,
        batch_size: s.take("batch_size", base.batch_size)?,
    })
}

const SECTIONS: [&str; 6] = ["run", "data", "model", "teacher", "distill", "eval"];

fn split_sections(text: &str) -> Result<BTreeMap<&'static str, Entries>> {
    let mut sections: BTreeMap<&'static str, Entries> = BTreeMap::new();
    let mut current: Option<&'static str> = None;
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            let name = name.trim();
            current = Some(SECTIONS.into_iter().find(|s| *s == name).ok_or_else(|| {
                Error::Config(format!("line {line_no}: unknown section [{name}]; allowed sections: {}", SECTIONS.join(", ")))
            })?);
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Config(format!("line {line_no}: expected `key = value`, found `{line}`")));
        };
        let section = current
            .ok_or_else(|| Error::Config(format!("line {line_no}: key `{}` outside any [section]", key.trim())))?;
        let entries = sections.entry(section).or_default();
        if entries.insert(key.trim().to_string(), (line_no, value.trim().to_string())).is_some() {
            return Err(Error::Config(format!("line {line_no}: duplicate key {section}.{}", key.trim())));
        }
    }
    Ok(sections)
}

impl Config {
    pub fn parse(text: &str) -> Result<Config> {
        Self::build(text, &mut String::new(), false)
    }

    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Canonical text: every key, in a fixed order.
    pub fn render(&self) -> String {
        let mut out = String::new();
        Self::build(&self.to_text(), &mut out, true).expect("a parsed configuration renders");
        out
    }

    /// SHA-256 of the canonical text.
    pub fn hash(&self) -> String {
        crate::sha256_hex(self.render().as_bytes())
    }

    fn to_text(&self) -> String {
        let d = &self.distill;
        let a = &d.augment_params;
        let e = &self.eval;
        let sgd = |s: &SgdConfig| {
            format!(
                "epochs = {}\nlr = {}\nmomentum = {}\nweight_decay = {}\nbatch_size = {}\n",
                s.epochs, s.lr, s.momentum, s.weight_decay, s.batch_size
            )
        };
        let mut t = String::new();
        let _ = write!(
            t,
            "[run]\nseed = {}\nprecision = {}\ncheckpoint_interval = {}\nanalysis_dump = {}\n",
            self.run.seed,
            self.run.precision.render(),
            self.run.checkpoint_interval,
            self.run.analysis_dump
        );
        let dd = &self.data;
        let _ = write!(
            t,
            "[data]\nsource = {}\ntrain_path = {}\ntest_path = {}\nclasses = {}\ntrain_per_class = {}\n\
             test_per_class = {}\nchannels = {}\nimage_size = {}\ncluster_std = {}\nzca = {}\nzca_lambda = {}\n",
            dd.source.render(),
            dd.train_path.render(),
            dd.test_path.render(),
            dd.classes,
            dd.train_per_class,
            dd.test_per_class,
            dd.channels,
            dd.image_size,
            dd.cluster_std,
            dd.zca,
            dd.zca_lambda.render()
        );
        let _ = write!(t, "[model]\narch = {}\ndepth = {}\nwidth = {}\n", self.model.arch.render(), self.model.depth, self.model.width);
        let _ = write!(t, "[teacher]\nteachers = {}\n{}", self.teachers, sgd(&self.teacher));
        let _ = write!(
            t,
            "[distill]\nmode = {}\niterations = {}\nstudent_steps = {}\nexpert_epochs = {}\nmax_start = {}\n\
             alpha0 = {}\nlr_alpha = {}\nlr_weights = {}\nlr_images = {}\nepsilon = {}\nbatch_size = {}\nipc = {}\n\
             augment = {}\nflip_prob = {}\ncrop_pad = {}\ncutout_hole = {}\nscale_min = {}\nscale_max = {}\nrotate_degrees = {}\n",
            d.mode,
            d.iterations,
            d.student_steps,
            d.expert_epochs,
            d.max_start.render(),
            d.alpha0,
            d.lr_alpha,
            d.lr_weights,
            d.lr_images,
            d.epsilon,
            d.batch_size,
            d.ipc,
            d.augment,
            a.flip_prob,
            a.pad.render(),
            a.hole.render(),
            a.scale.0,
            a.scale.1,
            a.rotate_degrees
        );
        let _ = write!(
            t,
            "[eval]\ntrials = {}\n{}use_learned_lr = {}\narchs = {}\nmlp_depth = {}\nmlp_width = {}\n\
             random_baseline = {}\nfull_original = {}\nassert_margin = {}\n",
            e.trials,
            sgd(&e.sgd),
            e.use_learned_lr,
            e.archs.render(),
            e.mlp_depth,
            e.mlp_width,
            e.random_baseline,
            e.full_original,
            e.assert_margin
        );
        t
    }

    fn build(text: &str, out: &mut String, rendering: bool) -> Result<Config> {
        let mut sections = split_sections(text)?;
        let base = DistillConfig::default();
        let teacher_base = SgdConfig::default();
        let eval_base = SgdConfig { epochs: 200, batch_size: 256, ..SgdConfig::default() };
        let aug = AugmentParams::default();

        let mut s = open(&mut sections, "run", out, rendering);
        let run = RunSection {
            seed: s.take("seed", 0)?,
            precision: s.take("precision", Precision::F64)?,
            checkpoint_interval: s.take("checkpoint_interval", 100)?,
            analysis_dump: s.take("analysis_dump", true)?,
        };
        s.finish()?;

        let mut s = open(&mut sections, "data", out, rendering);
        let data = DataSection {
            source: s.take("source", DataSource::Synthetic)?,
            train_path: s.take("train_path", PathBuf::from("train.tds"))?,
            test_path: s.take("test_path", PathBuf::from("test.tds"))?,
            classes: s.take("classes", 10)?,
            train_per_class: s.take("train_per_class", 200)?,
            test_per_class: s.take("test_per_class", 100)?,
            channels: s.take("channels", 3)?,
            image_size: s.take("image_size", 8)?,
            cluster_std: s.take("cluster_std", 0.3)?,
            zca: s.take("zca", true)?,
            zca_lambda: s.take("zca_lambda", None)?,
        };
        s.finish()?;

        let mut s = open(&mut sections, "model", out, rendering);
        let model = ModelSection {
            arch: s.take("arch", ArchKind::ConvNet)?,
            depth: s.take("depth", 2)?,
            width: s.take("width", 16)?,
        };
        s.finish()?;

        let mut s = open(&mut sections, "teacher", out, rendering);
        let teachers = s.take("teachers", 10)?;
        let teacher = sgd(&mut s, &teacher_base)?;
        s.finish()?;

        let mut s = open(&mut sections, "distill", out, rendering);
        let mut distill = DistillConfig {
            mode: s.take("mode", base.mode)?,
            iterations: s.take("iterations", base.iterations)?,
            student_steps: s.take("student_steps", base.student_steps)?,
            expert_epochs: s.take("expert_epochs", base.expert_epochs)?,
            max_start: s.take("max_start", base.max_start)?,
            alpha0: s.take("alpha0", base.alpha0)?,
            lr_alpha: s.take("lr_alpha", base.lr_alpha)?,
            lr_weights: s.take("lr_weights", base.lr_weights)?,
            lr_images: s.take("lr_images", base.lr_images)?,
            epsilon: s.take("epsilon", base.epsilon)?,
            batch_size: s.take("batch_size", base.batch_size)?,
            ipc: s.take("ipc", base.ipc)?,
            augment: s.take("augment", base.augment)?,
            ..base
        };
        distill.augment_params = AugmentParams {
            flip_prob: s.take("flip_prob", aug.flip_prob)?,
            pad: s.take("crop_pad", aug.pad)?,
            hole: s.take("cutout_hole", aug.hole)?,
            scale: (s.take("scale_min", aug.scale.0)?, s.take("scale_max", aug.scale.1)?),
            rotate_degrees: s.take("rotate_degrees", aug.rotate_degrees)?,
        };
        s.finish()?;

        let mut s = open(&mut sections, "eval", out, rendering);
        let eval = EvalSection {
            trials: s.take("trials", 5)?,
            sgd: sgd(&mut s, &eval_base)?,
            use_learned_lr: s.take("use_learned_lr", true)?,
            archs: s.take("archs", vec![ArchKind::ConvNet, ArchKind::Mlp])?,
            mlp_depth: s.take("mlp_depth", 1)?,
            mlp_width: s.take("mlp_width", 128)?,
            random_baseline: s.take("random_baseline", true)?,
            full_original: s.take("full_original", false)?,
            assert_margin: s.take("assert_margin", 5.0)?,
        };
        s.finish()?;

        let mut config = Config { run, data, model, teacher, teachers, distill, eval };
        config.distill.seed = config.seed_for("distill");
        Ok(config)
    }

    /// Checks ranges that parsing alone cannot.
    pub fn validate(&self) -> Result<()> {
        self.distill.validate()?;
        self.teacher.validate()?;
        self.eval.sgd.validate()?;
        self.arch()?.validate()?;
        if self.teachers == 0 {
            return Err(Error::Config("teacher.teachers must be at least 1".into()));
        }
        if self.run.checkpoint_interval == 0 {
            return Err(Error::Config("run.checkpoint_interval must be at least 1".into()));
        }
        if self.eval.trials == 0 {
            return Err(Error::Config("eval.trials must be at least 1".into()));
        }
        if self.eval.archs.is_empty() {
            return Err(Error::Config("eval.archs lists no architecture".into()));
        }
        if self.data.zca_lambda.is_some_and(|l| !(l >= 0.0)) {
            return Err(Error::Config("data.zca_lambda must be non-negative".into()));
        }
        let (lo, hi) = self.distill.augment_params.scale;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::Config(format!("distill.scale_min and scale_max must satisfy 0 < min <= max, got {lo} and {hi}")));
        }
        Ok(())
    }

    /// Seed of a named subsystem, derived from the master seed.
    pub fn seed_for(&self, subsystem: &str) -> u64 {
        derive_seed(self.run.seed, subsystem)
    }

    pub fn input_shape(&self) -> InputShape {
        InputShape { channels: self.data.channels, height: self.data.image_size, width: self.data.image_size }
    }

    /// The distillation architecture.
    pub fn arch(&self) -> Result<ArchSpec> {
        let input = self.input_shape();
        Ok(match self.model.arch {
            ArchKind::ConvNet => ArchSpec::convnet(self.model.depth, self.model.width, input, self.data.classes),
            ArchKind::Mlp => ArchSpec::mlp(self.model.depth, self.model.width, input, self.data.classes),
        })
    }

    /// Student architectures for evaluation, in `eval.archs` order.
    pub fn eval_archs(&self) -> Result<Vec<ArchSpec>> {
        let input = self.input_shape();
        let source = self.arch()?;
        Ok(self
            .eval
            .archs
            .iter()
            .map(|kind| match kind {
                k if *k == source.kind => source,
                ArchKind::ConvNet => ArchSpec::convnet(self.model.depth, self.model.width, input, self.data.classes),
                ArchKind::Mlp => ArchSpec::mlp(self.eval.mlp_depth, self.eval.mlp_width, input, self.data.classes),
            })
            .collect())
    }

    pub fn synthetic(&self) -> SyntheticSpec {
        SyntheticSpec {
            classes: self.data.classes,
            train_per_class: self.data.train_per_class,
            test_per_class: self.data.test_per_class,
            channels: self.data.channels,
            image_size: self.data.image_size,
            cluster_std: self.data.cluster_std,
            seed: self.seed_for("data"),
        }
    }

    pub fn teacher_config(&self) -> TeacherConfig {
        TeacherConfig { teachers: self.teachers, sgd: self.teacher.clone(), seed: self.seed_for("teacher") }
    }
}

/// First eight bytes of `sha256(master ‖ name)`.
pub fn derive_seed(master: u64, name: &str) -> u64 {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(name.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}
