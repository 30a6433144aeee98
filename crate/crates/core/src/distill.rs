//! The distillation engine: unrolled student training on the distilled set,
//! importance-weighted trajectory matching, and one meta-gradient step per
//! iteration on the student learning rate α, the weights W and the images.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{augment, AugmentParams, AugmentPolicy, DistilledDataset};
use crate::gradcore::{grad, Real, Tensor};
use crate::models::{ArchSpec, ParamLayout};
use crate::trajectories::{sample_start, validate_window, Trajectory};
use crate::{Error, Result};

pub const ALPHA_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Mode {
    /// Learned per-parameter weights.
    Iadd,
    /// Uniform weights, never updated.
    Mtt,
    /// Weights are an ε-threshold mask recomputed every iteration.
    Ddpp,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Iadd => "iadd",
            Mode::Mtt => "mtt",
            Mode::Ddpp => "ddpp",
        }
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "iadd" => Ok(Mode::Iadd),
            "mtt" => Ok(Mode::Mtt),
            "ddpp" => Ok(Mode::Ddpp),
            other => Err(Error::Config(format!("unknown mode `{other}`; expected iadd, mtt or ddpp"))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillConfig {
    /// `T`.
    pub iterations: usize,
    /// `J`, student SGD steps per iteration.
    pub student_steps: usize,
    /// `K`, teacher snapshots spanned by one window.
    pub expert_epochs: usize,
    /// `I⁺`; `None` means the largest valid bound `I − K + 1`.
    pub max_start: Option<usize>,
    pub alpha0: f64,
    /// `μ`.
    pub lr_alpha: f64,
    /// `η`.
    pub lr_weights: f64,
    /// `ζ`.
    pub lr_images: f64,
    pub mode: Mode,
    /// DDPP pruning threshold.
    pub epsilon: f64,
    pub batch_size: usize,
    pub ipc: usize,
    pub augment: AugmentPolicy,
    pub augment_params: AugmentParams,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            iterations: 500,
            student_steps: 5,
            expert_epochs: 2,
            max_start: None,
            alpha0: 0.05,
            lr_alpha: 1e-5,
            lr_weights: 1e-4,
            lr_images: 100.0,
            mode: Mode::Iadd,
            epsilon: f64::INFINITY,
            batch_size: 256,
            ipc: 1,
            augment: AugmentPolicy::none(),
            augment_params: AugmentParams::default(),
            seed: 0,
        }
    }
}

impl DistillConfig {
    /// Rates may be zero, which freezes the corresponding quantity.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.iterations == 0 || self.student_steps == 0 || self.expert_epochs == 0 {
            return bad(format!(
                "iterations, student_steps and expert_epochs must be at least 1, got {}, {}, {}",
                self.iterations, self.student_steps, self.expert_epochs
            ));
        }
        if self.max_start == Some(0) {
            return bad("max_start must be at least 1".into());
        }
        if !(self.alpha0 > 0.0 && self.alpha0.is_finite()) {
            return bad(format!("alpha0 must be positive, got {}", self.alpha0));
        }
        for (name, v) in [("lr_alpha", self.lr_alpha), ("lr_weights", self.lr_weights), ("lr_images", self.lr_images)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if self.epsilon.is_nan() || self.epsilon < 0.0 {
            return bad(format!("epsilon must be non-negative, got {}", self.epsilon));
        }
        if self.batch_size == 0 || self.ipc == 0 {
            return bad("batch_size and ipc must be at least 1".into());
        }
        if self.student_steps >= self.expert_epochs {
            log::warn!(
                "student_steps J={} is not below expert_epochs K={}; matching works best with J much smaller than K",
                self.student_steps,
                self.expert_epochs
            );
        }
        Ok(())
    }

    pub fn resolve_max_start(&self, trajectories: &[Trajectory]) -> usize {
        let shortest = trajectories.iter().map(|t| t.header.epochs).min().unwrap_or(0);
        self.max_start.unwrap_or((shortest + 1).saturating_sub(self.expert_epochs).max(1))
    }
}

/// Everything that evolves over a distillation run.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaState<R> {
    pub alpha: R,
    pub weights: Vec<R>,
    pub distilled: DistilledDataset<R>,
    /// Completed iterations, aborted ones included.
    pub iteration: usize,
    /// Matching loss of every completed, non-aborted iteration.
    pub losses: Vec<f64>,
}

impl<R: Real> MetaState<R> {
    pub fn new(distilled: DistilledDataset<R>, params: usize, alpha0: f64) -> Self {
        MetaState { alpha: R::lit(alpha0), weights: vec![R::one(); params], distilled, iteration: 0, losses: Vec::new() }
    }
}

/// The matching loss and its parts.
#[derive(Debug, Clone)]
pub struct LossBreakdown<R: Real> {
    pub loss: Tensor<R>,
    pub numerator: R,
    pub denominator: R,
    /// `|θ̃ − θ_{i+K}|` per dimension.
    pub differences: Vec<R>,
}

/// `Σ (w θ̃ − w θ*)² / Σ (θ_start − θ*)²`. The denominator is unweighted.
pub fn iadd_loss<R: Real>(
    start: &[R],
    student: &Tensor<R>,
    target: &Tensor<R>,
    weights: &Tensor<R>,
) -> Result<LossBreakdown<R>> {
    let p = start.len();
    for (name, t) in [("student", student), ("target", target), ("weights", weights)] {
        if t.shape() != [p] {
            return Err(Error::Distill(format!("{name} has shape {:?}, expected [{p}]", t.shape())));
        }
    }
    let denominator: R = start.iter().zip(target.data()).map(|(&a, &b)| (a - b) * (a - b)).sum();
    if !(denominator > R::zero()) {
        return Err(Error::Distill(format!(
            "degenerate teacher segment: squared start-to-target distance is {denominator}"
        )));
    }
    let numerator = weights.mul(student)?.sub(&weights.mul(target)?)?.squared_l2_norm()?;
    let differences = student.data().iter().zip(target.data()).map(|(&a, &b)| (a - b).abs()).collect();
    Ok(LossBreakdown {
        numerator: numerator.item(),
        loss: numerator.scale(R::one() / denominator),
        denominator,
        differences,
    })
}

/// `1` where `|θ̃ − θ*| ≤ ε`, else `0`.
pub fn ddpp_mask<R: Real>(student: &[R], target: &[R], epsilon: f64) -> Vec<R> {
    let eps = R::lit(epsilon);
    student.iter().zip(target).map(|(&a, &b)| if (a - b).abs() > eps { R::zero() } else { R::one() }).collect()
}

/// `steps` plain SGD steps `θ ← θ − α ∇ℓ_j(θ)` with the graph kept, so the
/// result stays differentiable in `α` and in whatever `loss_at` depends on.
pub fn unroll<R: Real>(
    start: &Tensor<R>,
    alpha: &Tensor<R>,
    steps: usize,
    mut loss_at: impl FnMut(usize, &Tensor<R>) -> Result<Tensor<R>>,
) -> Result<Tensor<R>> {
    if !(alpha.item() >= R::zero()) {
        return Err(Error::Distill(format!("student learning rate must be non-negative, got {}", alpha.item())));
    }
    let mut theta = start.clone();
    for j in 0..steps {
        let loss = loss_at(j, &theta)?;
        let v = loss.item();
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("student loss {v} at step {j}")));
        }
        let g = grad(&loss, &[&theta], true)?.into_vec().remove(0);
        theta = theta.sub(&alpha.mul(&g)?)?;
    }
    Ok(theta)
}

/// The images and one-hot targets the student trains on.
pub struct StudentData<'a, R: Real> {
    pub images: &'a Tensor<R>,
    pub targets: &'a Tensor<R>,
}

/// Unrolls the student network on the distilled set. Batches are the whole
/// set when it fits, otherwise drawn from a shuffled order without
/// replacement, reshuffling when it runs out.
#[allow(clippy::too_many_arguments)]
pub fn student_unroll<R: Real>(
    spec: &ArchSpec,
    layout: &ParamLayout,
    start: &Tensor<R>,
    data: StudentData<'_, R>,
    alpha: &Tensor<R>,
    steps: usize,
    batch_size: usize,
    augmentation: (&AugmentPolicy, &AugmentParams),
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<R>> {
    let n = data.images.shape()[0];
    if n == 0 {
        return Err(Error::Distill("distilled set is empty".into()));
    }
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    unroll(start, alpha, steps, |_, theta| {
        let (x, y) = if n <= batch_size {
            (data.images.clone(), data.targets.clone())
        } else {
            if cursor + batch_size > order.len() {
                order = (0..n).collect();
                order.shuffle(rng);
                cursor = 0;
            }
            let rows = &order[cursor..cursor + batch_size];
            cursor += batch_size;
            (data.images.select_rows(rows)?, data.targets.select_rows(rows)?)
        };
        let x = augment(&x, augmentation.0, augmentation.1, rng)?;
        let logits = spec.forward(layout, theta, &x)?;
        Ok(logits.softmax_cross_entropy(&y)?)
    })
}

/// Gradients of the matching loss with respect to the meta-parameters.
#[derive(Debug, Clone)]
pub struct MetaGradients<R> {
    pub images: Vec<R>,
    pub alpha: R,
    /// `None` when W is not learned in this mode.
    pub weights: Option<Vec<R>>,
}

pub fn meta_gradients<R: Real>(
    loss: &Tensor<R>,
    images: &Tensor<R>,
    alpha: &Tensor<R>,
    weights: Option<&Tensor<R>>,
) -> Result<MetaGradients<R>> {
    let mut wrt = vec![images, alpha];
    wrt.extend(weights);
    let mut g = grad(loss, &wrt, false)?.into_vec();
    for (name, t) in ["images", "alpha", "weights"].iter().zip(&g) {
        if !t.all_finite() {
            return Err(Error::NonFinite(format!("meta-gradient of {name}")));
        }
    }
    let weights = if weights.is_some() { Some(g.pop().expect("requested").to_vec()) } else { None };
    let alpha = g.pop().expect("requested").item();
    Ok(MetaGradients { images: g.pop().expect("requested").to_vec(), alpha, weights })
}

/// One SGD step on α (floored), W (iadd only) and the images.
pub fn meta_step<R: Real>(state: &mut MetaState<R>, grads: &MetaGradients<R>, cfg: &DistillConfig) {
    let (mu, eta, zeta) = (R::lit(cfg.lr_alpha), R::lit(cfg.lr_weights), R::lit(cfg.lr_images));
    state.alpha = (state.alpha - mu * grads.alpha).max(R::lit(ALPHA_FLOOR));
    if cfg.mode == Mode::Iadd {
        if let Some(gw) = &grads.weights {
            for (w, &g) in state.weights.iter_mut().zip(gw) {
                *w -= eta * g;
            }
        }
    }
    for (x, &g) in state.distilled.images.iter_mut().zip(&grads.images) {
        *x -= zeta * g;
    }
}

/// One line of the per-iteration report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub iteration: usize,
    pub loss: f64,
    pub numerator: f64,
    pub denominator: f64,
    pub alpha: f64,
    pub w_mean: f64,
    pub w_std: f64,
    pub w_min: f64,
    pub w_max: f64,
}

pub const REPORT_HEADER: &str = "iteration,loss,numerator,denominator,alpha,w_mean,w_std,w_min,w_max";

impl ReportRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
            self.iteration,
            self.loss,
            self.numerator,
            self.denominator,
            self.alpha,
            self.w_mean,
            self.w_std,
            self.w_min,
            self.w_max
        )
    }
}

/// Mean, population standard deviation, min and max.
pub fn summarize<R: Real>(values: &[R]) -> (f64, f64, f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().map(|v| v.as_f64()).sum::<f64>() / n;
    let var = values.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / n;
    let min = values.iter().map(|v| v.as_f64()).fold(f64::INFINITY, f64::min);
    let max = values.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    (mean, var.sqrt(), min, max)
}

/// Result of a full run.
#[derive(Debug, Clone)]
pub struct DistillOutcome<R> {
    pub state: MetaState<R>,
    pub report: Vec<ReportRow>,
    /// `|θ̃ − θ_{i+K}|` per dimension, averaged over the last ten iterations.
    pub recent_differences: Vec<f64>,
    pub aborted: usize,
}

/// What happened in one iteration.
pub enum Step<'a, R> {
    Done { state: &'a MetaState<R>, row: &'a ReportRow },
    Aborted { state: &'a MetaState<R>, iteration: usize, reason: String },
}

const DIFFERENCE_WINDOW: usize = 10;

/// Runs `cfg.iterations` iterations from `state`. `observe` sees every
/// iteration's outcome, for reports and checkpoints.
pub fn run_distillation<R: Real>(
    spec: &ArchSpec,
    cfg: &DistillConfig,
    trajectories: &[Trajectory],
    mut state: MetaState<R>,
    mut observe: impl FnMut(Step<'_, R>) -> Result<()>,
) -> Result<DistillOutcome<R>> {
    cfg.validate()?;
    let layout = spec.layout()?;
    let p = layout.total();
    if let Some(t) = trajectories.iter().find(|t| t.header.spec != *spec) {
        return Err(Error::Config(format!(
            "trajectory architecture {} does not match {}",
            t.header.spec.label(),
            spec.label()
        )));
    }
    if state.weights.len() != p {
        return Err(Error::Layout(format!("{} weights for {p} parameters", state.weights.len())));
    }
    let max_start = cfg.resolve_max_start(trajectories);
    validate_window(trajectories, cfg.expert_epochs, max_start)?;
    let budget = cfg.iterations / 20;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let targets = state.distilled.onehot_tensor();
    let mut report = Vec::with_capacity(cfg.iterations);
    let mut recent: VecDeque<Vec<R>> = VecDeque::with_capacity(DIFFERENCE_WINDOW);
    let mut aborted = 0;
    let mut warned_negative = false;

    for _ in 0..cfg.iterations {
        let iteration = state.iteration;
        let attempt = (|| -> Result<(LossBreakdown<R>, MetaGradients<R>)> {
            let window = sample_start(trajectories, cfg.expert_epochs, max_start, &mut rng)?;
            let traj = &trajectories[window.trajectory];
            let start_values = traj.snapshot_as::<R>(window.start);
            let start = Tensor::param(start_values.clone(), &[p])?;
            let target = Tensor::from_vec(traj.snapshot_as::<R>(window.target), &[p])?;
            let images = state.distilled.images_tensor().detach_param();
            let alpha = Tensor::param(vec![state.alpha], &[])?;
            let student = student_unroll(
                spec,
                &layout,
                &start,
                StudentData { images: &images, targets: &targets },
                &alpha,
                cfg.student_steps,
                cfg.batch_size,
                (&cfg.augment, &cfg.augment_params),
                &mut rng,
            )?;
            let weights = match cfg.mode {
                Mode::Iadd | Mode::Mtt => Tensor::param(state.weights.clone(), &[p])?,
                Mode::Ddpp => Tensor::from_vec(ddpp_mask(student.data(), target.data(), cfg.epsilon), &[p])?,
            };
            let breakdown = iadd_loss(&start_values, &student, &target, &weights)?;
            if !breakdown.loss.item().is_finite() {
                return Err(Error::NonFinite(format!("matching loss {}", breakdown.loss.item())));
            }
            let learn_w = matches!(cfg.mode, Mode::Iadd | Mode::Mtt);
            let grads = meta_gradients(&breakdown.loss, &images, &alpha, learn_w.then_some(&weights))?;
            if cfg.mode == Mode::Ddpp {
                state.weights = weights.to_vec();
            }
            Ok((breakdown, grads))
        })();
        state.iteration += 1;
        match attempt {
            Ok((breakdown, grads)) => {
                meta_step(&mut state, &grads, cfg);
                if !warned_negative && state.weights.iter().any(|&w| w < R::zero()) {
                    log::warn!("some adaptive weights became negative at iteration {iteration}");
                    warned_negative = true;
                }
                let loss = breakdown.loss.item().as_f64();
                state.losses.push(loss);
                let (w_mean, w_std, w_min, w_max) = summarize(&state.weights);
                let row = ReportRow {
                    iteration,
                    loss,
                    numerator: breakdown.numerator.as_f64(),
                    denominator: breakdown.denominator.as_f64(),
                    alpha: state.alpha.as_f64(),
                    w_mean,
                    w_std,
                    w_min,
                    w_max,
                };
                if recent.len() == DIFFERENCE_WINDOW {
                    recent.pop_front();
                }
                recent.push_back(breakdown.differences);
                observe(Step::Done { state: &state, row: &row })?;
                report.push(row);
            }
            Err(Error::NonFinite(reason)) => {
                aborted += 1;
                log::warn!("iteration {iteration} aborted: {reason}");
                observe(Step::Aborted { state: &state, iteration, reason })?;
                if aborted > budget {
                    return Err(Error::Distill(format!(
                        "{aborted} of {} iterations aborted (more than 5%); last at iteration {iteration}",
                        state.iteration
                    )));
                }
            }
            Err(e) => return Err(e),
        }
    }
    let mut recent_differences = vec![0.0; p];
    for d in &recent {
        for (acc, v) in recent_differences.iter_mut().zip(d) {
            *acc += v.as_f64();
        }
    }
    let count = recent.len().max(1) as f64;
    recent_differences.iter_mut().for_each(|v| *v /= count);
    Ok(DistillOutcome { state, report, recent_differences, aborted })
}

#[cfg(test)]
mod tests;
