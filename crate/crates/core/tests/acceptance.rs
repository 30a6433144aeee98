//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line.
//!
//! Criteria 5 to 8 and 10 share one desk-scale run, built on first use.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use iadd::config::Config;
use iadd::data::{
    decode_dataset, encode_dataset, init_distilled, synthetic_blobs, AugmentParams, AugmentPolicy, DatasetManifest,
    LabeledDataset, SyntheticSpec, ZcaTransform,
};
use iadd::distill::{
    iadd_loss, meta_gradients, run_distillation, student_unroll, unroll, DistillConfig, MetaState, Mode, StudentData,
};
use iadd::eval::{DatasetKind, EvalReport};
use iadd::gradcore::suite::check_op_suite;
use iadd::gradcore::{grad, Tensor};
use iadd::models::{ArchSpec, InputShape};
use iadd::pipeline::{cmd_analyze, cmd_distill, cmd_eval, cmd_teach, decode_weights, encode_weights, prepare_data, Analysis, DistillSummary};
use iadd::train::SgdConfig;
use iadd::trajectories::{decode_trajectory, encode_trajectory, load_teachers, train_teacher, Trajectory};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Writes past the test harness capture so the line always shows.
fn verdict(id: usize, pass: bool, detail: &str) -> bool {
    let word = if pass { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{word} criterion {id}: {detail}");
    let _ = out.flush();
    pass
}

fn vec_t(v: &[f64]) -> Tensor<f64> {
    Tensor::from_vec(v.to_vec(), &[v.len()]).unwrap()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

fn tiny_problem(seed: u64) -> (ArchSpec, LabeledDataset, Vec<Trajectory>) {
    let (data, _) = synthetic_blobs(&SyntheticSpec {
        classes: 3,
        train_per_class: 20,
        test_per_class: 5,
        channels: 1,
        image_size: 2,
        cluster_std: 0.15,
        seed,
    })
    .unwrap();
    let spec = ArchSpec::mlp(1, 4, data.shape, 3);
    let sgd = SgdConfig { epochs: 6, lr: 0.1, batch_size: 8, ..SgdConfig::default() };
    let trajs = (0..3).map(|k| train_teacher::<f64>(&data, &spec, &sgd, seed * 10 + k).unwrap()).collect();
    (spec, data, trajs)
}

#[test]
fn criterion_01_meta_gradient_oracle() {
    let t0 = Instant::now();
    let (spec, data, trajs) = tiny_problem(6);
    let layout = spec.layout().unwrap();
    let p = layout.total();
    let (j, k) = (2, 3);
    let mut worst = [0.0f64; 3];
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..20 {
        let d = init_distilled::<f64>(&data, 2, trial).unwrap();
        let targets = d.onehot_tensor();
        let traj = &trajs[rng.random_range(0..trajs.len())];
        let i = rng.random_range(0..=traj.header.epochs - k);
        let start_v = traj.snapshot_as::<f64>(i);
        let target = Tensor::from_vec(traj.snapshot_as::<f64>(i + k), &[p]).unwrap();
        let alpha0: f64 = rng.random_range(0.05..0.3);
        let w0: Vec<f64> = (0..p).map(|_| rng.random_range(0.5..1.5)).collect();
        let shape = d.images_tensor().shape().to_vec();
        let loss = |images: &Tensor<f64>, alpha: &Tensor<f64>, w: &Tensor<f64>| -> Tensor<f64> {
            let start = Tensor::param(start_v.clone(), &[p]).unwrap();
            let mut r = ChaCha8Rng::seed_from_u64(trial);
            let student = student_unroll(
                &spec,
                &layout,
                &start,
                StudentData { images, targets: &targets },
                alpha,
                j,
                4,
                (&AugmentPolicy::none(), &AugmentParams::default()),
                &mut r,
            )
            .unwrap();
            iadd_loss(&start_v, &student, &target, w).unwrap().loss
        };
        let images = Tensor::param(d.images.clone(), &shape).unwrap();
        let alpha = Tensor::param(vec![alpha0], &[]).unwrap();
        let w = Tensor::param(w0.clone(), &[p]).unwrap();
        let g = meta_gradients(&loss(&images, &alpha, &w), &images, &alpha, Some(&w)).unwrap();
        let h = 1e-6;
        let fd = |which: usize, len: usize| -> Vec<f64> {
            (0..len)
                .map(|c| {
                    let at = |delta: f64| {
                        let (mut im, mut a, mut wv) = (d.images.clone(), alpha0, w0.clone());
                        match which {
                            0 => im[c] += delta,
                            1 => a += delta,
                            _ => wv[c] += delta,
                        }
                        let im = Tensor::param(im, &shape).unwrap();
                        loss(&im, &Tensor::param(vec![a], &[]).unwrap(), &Tensor::param(wv, &[p]).unwrap()).item()
                    };
                    (at(h) - at(-h)) / (2.0 * h)
                })
                .collect()
        };
        worst[0] = worst[0].max(rel_err(&[g.alpha], &fd(1, 1)));
        worst[1] = worst[1].max(rel_err(g.weights.as_ref().unwrap(), &fd(2, p)));
        worst[2] = worst[2].max(rel_err(&g.images, &fd(0, d.images.len())));
    }
    let secs = t0.elapsed().as_secs_f64();
    let pass = p <= 50 && worst.iter().all(|&e| e < 1e-3) && secs < 60.0;
    let detail = format!(
        "P={p}, 20 configurations, worst relative error alpha {:.1e}, W {:.1e}, images {:.1e} (< 1e-3), {secs:.1}s",
        worst[0], worst[1], worst[2]
    );
    assert!(verdict(1, pass, &detail), "{detail}");
}

#[test]
fn criterion_02_primitive_op_gradients() {
    let t0 = Instant::now();
    let reports = check_op_suite(20, 5, 7).unwrap();
    let first = reports.iter().map(|r| r.first_order).fold(0.0, f64::max);
    let second = reports.iter().map(|r| r.second_order).fold(0.0, f64::max);
    let secs = t0.elapsed().as_secs_f64();
    let bad: Vec<&str> = reports.iter().filter(|r| !(r.first_order < 1e-6 && r.second_order < 1e-4)).map(|r| r.name).collect();
    let pass = bad.is_empty() && secs < 60.0;
    let detail = format!(
        "{} ops, worst first-order {first:.1e} (< 1e-6), second-order {second:.1e} (< 1e-4), {secs:.1}s{}",
        reports.len(),
        if bad.is_empty() { String::new() } else { format!(", failing: {}", bad.join(", ")) }
    );
    assert!(verdict(2, pass, &detail), "{detail}");
}

#[test]
fn criterion_03_mtt_equivalence() {
    let (spec, data, trajs) = tiny_problem(8);
    let base = DistillConfig {
        iterations: 100,
        student_steps: 2,
        expert_epochs: 3,
        alpha0: 0.1,
        lr_alpha: 1e-3,
        lr_weights: 0.0,
        lr_images: 1.0,
        batch_size: 4,
        ipc: 2,
        seed: 5,
        ..DistillConfig::default()
    };
    let run = |mode: Mode| {
        let d = init_distilled::<f64>(&data, 2, 3).unwrap();
        let state = MetaState::new(d, spec.param_count().unwrap(), base.alpha0);
        run_distillation(&spec, &DistillConfig { mode, ..base.clone() }, &trajs, state, |_| Ok(())).unwrap()
    };
    let iadd = run(Mode::Iadd);
    let mtt = run(Mode::Mtt);
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    let pass = bits(&iadd.state.distilled.images) == bits(&mtt.state.distilled.images)
        && iadd.state.alpha.to_bits() == mtt.state.alpha.to_bits()
        && bits(&iadd.state.losses) == bits(&mtt.state.losses)
        && iadd.state.losses.len() == 100
        && mtt.state.weights.iter().all(|&w| w == 1.0);
    let detail = format!(
        "100 iterations, images/alpha/loss series bit-identical: {pass}, final loss {:.6}",
        mtt.state.losses.last().unwrap()
    );
    assert!(verdict(3, pass, &detail), "{detail}");
}

#[test]
fn criterion_04_loss_identities() {
    let mut ok = true;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..50 {
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-2.0..2.0)).collect() };
        let (s, st, t, w) = (draw(9), draw(9), draw(9), draw(9));
        ok &= iadd_loss(&s, &vec_t(&t), &vec_t(&t), &vec_t(&w)).unwrap().loss.item() == 0.0;
        let base = iadd_loss(&s, &vec_t(&st), &vec_t(&t), &vec_t(&w)).unwrap().loss.item();
        for c in [2.0, 0.5, 4.0, 0.25] {
            let cw: Vec<f64> = w.iter().map(|v| v * c).collect();
            ok &= iadd_loss(&s, &vec_t(&st), &vec_t(&t), &vec_t(&cw)).unwrap().loss.item() == c * c * base;
        }
    }
    let close = |a: f64, b: f64| (a - b).abs() < 1e-12;
    let l = iadd_loss(&[1.0, 0.0], &vec_t(&[0.5, 0.5]), &vec_t(&[0.0, 1.0]), &vec_t(&[1.0, 1.0])).unwrap();
    ok &= close(l.loss.item(), 0.25);
    let l = iadd_loss(&[1.0, 0.0], &vec_t(&[0.5, 0.5]), &vec_t(&[0.0, 1.0]), &vec_t(&[2.0, 0.0])).unwrap();
    ok &= close(l.numerator, 1.0) && close(l.loss.item(), 0.5);
    let alpha = Tensor::scalar(0.1);
    for (steps, want) in [(1, 0.8), (2, 0.64)] {
        let start = Tensor::param(vec![1.0], &[1]).unwrap();
        ok &= close(unroll(&start, &alpha, steps, |_, t| Ok(t.mul(t)?.sum())).unwrap().item(), want);
    }
    let start = Tensor::param(vec![1.0], &[1]).unwrap();
    let alpha = Tensor::param(vec![0.1], &[]).unwrap();
    let student = unroll(&start, &alpha, 1, |_, t| Ok(t.scale(2.0).sum())).unwrap();
    let l = iadd_loss(&[1.0], &student, &vec_t(&[0.0]), &vec_t(&[1.0])).unwrap();
    let da = grad(&l.loss, &[&alpha], false).unwrap().into_vec().remove(0).item();
    ok &= close(student.item(), 0.8) && close(l.loss.item(), 0.64) && close(da, -3.2) && close(0.1 - 0.01 * da, 0.132);
    let detail = "zero at perfect match, L(cW) = c²L(W) exactly, hand cases 0.25, 0.5, 0.8, 0.64, -3.2, 0.132 to 1e-12";
    assert!(verdict(4, ok, detail), "{detail}");
}

const DESK: &str = include_str!("../../../configs/desk.ini");

struct Desk {
    _dir: tempfile::TempDir,
    out: PathBuf,
    config: Config,
    distill: DistillSummary,
    reports: Vec<EvalReport>,
    analysis: Analysis,
    seconds: f64,
}

fn desk() -> &'static Desk {
    static DESK_RUN: OnceLock<Desk> = OnceLock::new();
    DESK_RUN.get_or_init(|| {
        let t0 = Instant::now();
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("desk");
        let config = Config::parse(DESK).unwrap();
        cmd_teach(&config, &out).unwrap();
        let distill = cmd_distill(&config, &out).unwrap();
        let reports = cmd_eval(&config, &out).unwrap();
        let analysis = cmd_analyze(&config, &out).unwrap();
        Desk { _dir: dir, out, config, distill, reports, analysis, seconds: t0.elapsed().as_secs_f64() }
    })
}

fn mean_of(reports: &[EvalReport], kind: DatasetKind, arch: &str) -> f64 {
    100.0 * reports.iter().find(|r| r.dataset == kind && r.arch == arch).unwrap().mean
}

#[test]
fn criterion_05_distilled_beats_random() {
    let d = desk();
    let arch = d.config.arch().unwrap().label();
    let distilled = mean_of(&d.reports, DatasetKind::Distilled, &arch);
    let random = mean_of(&d.reports, DatasetKind::RandomReal, &arch);
    let pass = distilled - random >= 5.0 && d.seconds < 900.0;
    let detail = format!(
        "{arch}: distilled {distilled:.2}% vs random {random:.2}% (lead {:.2} >= 5 points), desk run {:.0}s",
        distilled - random,
        d.seconds
    );
    assert!(verdict(5, pass, &detail), "{detail}");
}

#[test]
fn criterion_06_loss_decreases() {
    let d = desk();
    let l = &d.distill.losses;
    let n = l.len() / 10;
    let first = l[..n].iter().sum::<f64>() / n as f64;
    let last = l[l.len() - n..].iter().sum::<f64>() / n as f64;
    let pass = last < 0.7 * first;
    let detail = format!("mean loss first 10% {first:.4}, last 10% {last:.4}, ratio {:.3} (< 0.7)", last / first);
    assert!(verdict(6, pass, &detail), "{detail}");
}

#[test]
fn criterion_07_weights_shrink_where_differences_are_large() {
    let d = desk();
    let dec = &d.analysis.deciles;
    let (bottom, top) = (dec[0].mean_weight, dec[9].mean_weight);
    let pass = top < bottom;
    let detail = format!("mean w of top-difference decile {top:.6} vs bottom decile {bottom:.6} (top < bottom)");
    assert!(verdict(7, pass, &detail), "{detail}");
}

#[test]
fn criterion_08_cross_architecture() {
    let d = desk();
    let mlp = d.config.eval_archs().unwrap().into_iter().find(|s| s.label().starts_with("mlp")).unwrap().label();
    let distilled = mean_of(&d.reports, DatasetKind::Distilled, &mlp);
    let random = mean_of(&d.reports, DatasetKind::RandomReal, &mlp);
    let pass = distilled - random >= 3.0;
    let detail = format!("{mlp}: distilled {distilled:.2}% vs random {random:.2}% (lead {:.2} >= 3 points)", distilled - random);
    assert!(verdict(8, pass, &detail), "{detail}");
}

/// Columns of the 8×8 Sylvester Hadamard matrix after the constant one:
/// zero mean, orthogonal, unit variance.
fn white_data() -> LabeledDataset {
    let h = |r: usize, c: usize| if (r & c).count_ones().is_multiple_of(2) { 1.0 } else { -1.0 };
    let images: Vec<f64> = (0..8).flat_map(|r| (1..5).map(move |c| h(r, c))).collect();
    let shape = InputShape { channels: 1, height: 2, width: 2 };
    LabeledDataset::new(images, shape, (0..8).map(|i| i % 2).collect(), 2).unwrap()
}

#[test]
fn criterion_09_round_trips() {
    let (spec, data, trajs) = tiny_problem(9);
    let path = Path::new("mem");
    let bytes = encode_trajectory(&trajs[0]).unwrap();
    let back = decode_trajectory(path, &bytes).unwrap();
    let traj_ok = encode_trajectory(&back).unwrap() == bytes
        && back.header == trajs[0].header
        && (0..back.len()).all(|e| back.snapshot(e).iter().zip(trajs[0].snapshot(e)).all(|(a, b)| a.to_bits() == b.to_bits()));

    let manifest = DatasetManifest { config_hash: "ab".repeat(32), iteration: 500 };
    let bytes = encode_dataset(&data, Some(&manifest)).unwrap();
    let (back, m) = decode_dataset(path, &bytes).unwrap();
    let data_ok = back == data && m.as_ref() == Some(&manifest) && encode_dataset(&back, m.as_ref()).unwrap() == bytes;

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let w: Vec<f32> = (0..spec.param_count().unwrap()).map(|_| rng.random_range(-3.0f32..3.0)).collect();
    let bytes = encode_weights(&w);
    let back = decode_weights(path, &bytes).unwrap();
    let w_ok = back.iter().map(|v| v.to_bits()).eq(w.iter().map(|v| v.to_bits())) && encode_weights(&back) == bytes;

    let cfg = Config::parse(DESK).unwrap();
    let text = cfg.render();
    let again = Config::parse(&text).unwrap();
    let cfg_ok = again == cfg && again.render() == text;

    let z = ZcaTransform::fit(&white_data(), Some(0.0)).unwrap();
    let dim = z.dim();
    let zca_err = (0..dim * dim)
        .map(|i| (z.matrix[i] - if i / dim == i % dim { 1.0 } else { 0.0 }).abs())
        .fold(0.0, f64::max);
    let pass = traj_ok && data_ok && w_ok && cfg_ok && zca_err < 1e-6;
    let detail = format!(
        "trajectory {traj_ok}, dataset {data_ok}, weights {w_ok}, config {cfg_ok}, ZCA on white data max |M - I| {zca_err:.1e} (< 1e-6)"
    );
    assert!(verdict(9, pass, &detail), "{detail}");
}

#[test]
fn criterion_10_determinism() {
    let d = desk();
    // 64-bit: a second distillation from a copy of the same teachers.
    let rerun = d.out.with_file_name("desk-rerun");
    let teachers = rerun.join("teachers");
    fs::create_dir_all(&teachers).unwrap();
    for entry in fs::read_dir(d.out.join("teachers")).unwrap() {
        let p = entry.unwrap().path();
        fs::copy(&p, teachers.join(p.file_name().unwrap())).unwrap();
    }
    let again = cmd_distill(&d.config, &rerun).unwrap();
    let a = *d.distill.losses.last().unwrap();
    let b = *again.losses.last().unwrap();
    let bits64 = a.to_bits() == b.to_bits() && d.distill.alpha.to_bits() == again.alpha.to_bits();

    // 32-bit: two runs from the same trajectories.
    let data = prepare_data(&d.config).unwrap();
    let spec = d.config.arch().unwrap();
    let trajs = load_teachers(&d.out.join("teachers")).unwrap();
    let run32 = || {
        let init = init_distilled::<f32>(&data.train, d.config.distill.ipc, d.config.seed_for("init")).unwrap();
        let state = MetaState::new(init, spec.param_count().unwrap(), d.config.distill.alpha0);
        let out = run_distillation(&spec, &d.config.distill, &trajs, state, |_| Ok(())).unwrap();
        *out.state.losses.last().unwrap()
    };
    let (x, y) = (run32(), run32());
    let pass = bits64 && (x - y).abs() <= 1e-6;
    let detail = format!(
        "64-bit final loss {a:.10} vs {b:.10} (bit-exact: {bits64}); 32-bit {x:.8} vs {y:.8} (|diff| {:.1e} <= 1e-6)",
        (x - y).abs()
    );
    assert!(verdict(10, pass, &detail), "{detail}");
}
