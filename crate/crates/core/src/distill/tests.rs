use super::*;
use crate::data::{init_distilled, synthetic_blobs, LabeledDataset, SyntheticSpec};
use crate::models::InputShape;
use crate::train::SgdConfig;
use crate::trajectories::train_teacher;
use rand::Rng;

fn vec_t(v: &[f64]) -> Tensor<f64> {
    Tensor::from_vec(v.to_vec(), &[v.len()]).unwrap()
}

#[test]
fn unroll_squared_loss_by_hand() {
    let alpha = Tensor::scalar(0.1);
    for (steps, want) in [(1, 0.8f64), (2, 0.64)] {
        let start = Tensor::param(vec![1.0], &[1]).unwrap();
        let out = unroll(&start, &alpha, steps, |_, t| Ok(t.mul(t)?.sum())).unwrap();
        assert!((out.item() - want).abs() < 1e-12, "J={steps}: {}", out.item());
    }
}

#[test]
fn loss_by_hand() {
    let start = [1.0, 0.0];
    let student = vec_t(&[0.5, 0.5]);
    let target = vec_t(&[0.0, 1.0]);
    let l = iadd_loss(&start, &student, &target, &vec_t(&[1.0, 1.0])).unwrap();
    assert!((l.loss.item() - 0.25).abs() < 1e-12);
    assert_eq!((l.numerator, l.denominator), (0.5, 2.0));
    assert_eq!(l.differences, vec![0.5, 0.5]);
    let l = iadd_loss(&start, &student, &target, &vec_t(&[2.0, 0.0])).unwrap();
    assert!((l.numerator - 1.0).abs() < 1e-12);
    assert!((l.loss.item() - 0.5).abs() < 1e-12);
}

#[test]
fn perfect_match_is_zero_for_any_weights() {
    let target = vec_t(&[0.3, -1.0, 2.0]);
    for w in [[1.0, 1.0, 1.0], [5.0, -2.0, 0.0], [1e3, 1e-3, 7.0]] {
        let l = iadd_loss(&[1.0, 1.0, 1.0], &target, &target, &vec_t(&w)).unwrap();
        assert_eq!(l.loss.item(), 0.0);
    }
}

#[test]
fn degenerate_segment_and_shape_errors() {
    let t = vec_t(&[1.0, 2.0]);
    let err = iadd_loss(&[1.0, 2.0], &t, &t, &vec_t(&[1.0, 1.0])).unwrap_err();
    assert!(err.to_string().contains("degenerate"), "{err}");
    assert!(iadd_loss(&[1.0, 2.0], &vec_t(&[1.0]), &t, &vec_t(&[1.0, 1.0])).is_err());
}

fn hand_state(alpha: f64) -> MetaState<f64> {
    let distilled = DistilledDataset {
        images: vec![],
        shape: InputShape { channels: 1, height: 1, width: 1 },
        labels: vec![],
        ipc: 1,
        classes: 2,
    };
    MetaState::new(distilled, 1, alpha)
}

#[test]
fn meta_step_by_hand() {
    // ℓ(θ) = 2θ, θ₀ = 1, α = 0.1, one step, target 0, w = 1.
    let start = Tensor::param(vec![1.0], &[1]).unwrap();
    let alpha = Tensor::param(vec![0.1], &[]).unwrap();
    let student = unroll(&start, &alpha, 1, |_, t| Ok(t.scale(2.0).sum())).unwrap();
    assert!((student.item() - 0.8f64).abs() < 1e-12);
    let w = Tensor::param(vec![1.0], &[1]).unwrap();
    let l = iadd_loss(&[1.0], &student, &vec_t(&[0.0]), &w).unwrap();
    assert!((l.loss.item() - 0.64).abs() < 1e-12);
    let g = grad(&l.loss, &[&alpha, &w], false).unwrap().into_vec();
    assert!((g[0].item() - -3.2).abs() < 1e-12);
    assert!((g[1].data()[0] - 1.28).abs() < 1e-12);

    let mut state = hand_state(0.1);
    let grads = MetaGradients { images: vec![], alpha: g[0].item(), weights: Some(g[1].to_vec()) };
    let cfg = DistillConfig { lr_alpha: 0.01, lr_weights: 0.0, ..DistillConfig::default() };
    meta_step(&mut state, &grads, &cfg);
    assert!((state.alpha - 0.132).abs() < 1e-12);
    assert_eq!(state.weights, vec![1.0]);

    let cfg = DistillConfig { lr_weights: 0.1, lr_alpha: 1e6, ..DistillConfig::default() };
    meta_step(&mut state, &grads, &cfg);
    assert!((state.alpha - (3.2e6 + 0.132)).abs() < 1e-6);
    let cfg = DistillConfig { lr_weights: 0.1, lr_alpha: 1e7, mode: Mode::Mtt, ..DistillConfig::default() };
    let up = MetaGradients { alpha: 1.0, ..grads.clone() };
    meta_step(&mut state, &up, &cfg);
    assert_eq!(state.alpha, ALPHA_FLOOR);
    assert!((state.weights[0] - (1.0 - 0.128)).abs() < 1e-12);
}

#[test]
fn larger_mismatch_means_larger_weight_gradient() {
    let start = [0.0, 0.0];
    let student = vec_t(&[1.0, 1.0]);
    let target = vec_t(&[0.9, -1.0]);
    let w = Tensor::param(vec![1.0, 1.0], &[2]).unwrap();
    let l = iadd_loss(&start, &student, &target, &w).unwrap();
    let g = grad(&l.loss, &[&w], false).unwrap().into_vec().remove(0);
    assert!(g.data()[1] > g.data()[0] && g.data()[0] > 0.0);
    let cfg = DistillConfig { lr_weights: 0.1, ..DistillConfig::default() };
    let mut state = hand_state(0.1);
    state.weights = vec![1.0, 1.0];
    meta_step(&mut state, &MetaGradients { images: vec![], alpha: 0.0, weights: Some(g.to_vec()) }, &cfg);
    assert!(state.weights[1] < state.weights[0] && state.weights[0] < 1.0);
}

#[test]
fn ddpp_masks() {
    assert_eq!(ddpp_mask(&[0.1, 0.9], &[0.0, 0.0], 0.5), vec![1.0, 0.0]);
    assert_eq!(ddpp_mask(&[5.0, -3.0], &[0.0, 0.0], f64::INFINITY), vec![1.0, 1.0]);
    assert_eq!(ddpp_mask(&[1.0, 2.0, 3.0], &[1.0, 2.5, 3.0], 0.0), vec![1.0, 0.0, 1.0]);
}

#[test]
fn homogeneity_and_permutation_invariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() };
        let (s, st, t, w) = (draw(12), draw(12), draw(12), draw(12));
        let base = iadd_loss(&s, &vec_t(&st), &vec_t(&t), &vec_t(&w)).unwrap().loss.item();
        let scaled: Vec<f64> = w.iter().map(|v| v * 4.0).collect();
        let l4 = iadd_loss(&s, &vec_t(&st), &vec_t(&t), &vec_t(&scaled)).unwrap().loss.item();
        assert_eq!(l4, 16.0 * base);

        let mut perm: Vec<usize> = (0..12).collect();
        perm.shuffle(&mut rng);
        let p = |v: &[f64]| perm.iter().map(|&i| v[i]).collect::<Vec<f64>>();
        let lp = iadd_loss(&p(&s), &vec_t(&p(&st)), &vec_t(&p(&t)), &vec_t(&p(&w))).unwrap().loss.item();
        assert!((lp - base).abs() <= 1e-12 * base.abs().max(1.0));
    }
}

#[test]
fn zero_rate_unroll_returns_start() {
    let (spec, _, trajs) = tiny_setup();
    let layout = spec.layout().unwrap();
    let start = Tensor::param(trajs[0].snapshot_as::<f64>(1), &[layout.total()]).unwrap();
    let d = init_distilled::<f64>(&tiny_data(), 2, 0).unwrap();
    let images = d.images_tensor().detach_param();
    let targets = d.onehot_tensor();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = student_unroll(
        &spec,
        &layout,
        &start,
        StudentData { images: &images, targets: &targets },
        &Tensor::scalar(0.0),
        3,
        4,
        (&AugmentPolicy::none(), &AugmentParams::default()),
        &mut rng,
    )
    .unwrap();
    assert_eq!(out.data(), start.data());
}

fn tiny_data() -> LabeledDataset {
    synthetic_blobs(&SyntheticSpec {
        classes: 3,
        train_per_class: 20,
        test_per_class: 5,
        channels: 1,
        image_size: 2,
        cluster_std: 0.15,
        seed: 6,
    })
    .unwrap()
    .0
}

/// A 35-parameter MLP and three short teacher trajectories.
fn tiny_setup() -> (ArchSpec, LabeledDataset, Vec<Trajectory>) {
    let data = tiny_data();
    let spec = ArchSpec::mlp(1, 4, data.shape, 3);
    let sgd = SgdConfig { epochs: 6, lr: 0.1, batch_size: 8, ..SgdConfig::default() };
    let trajs = (0..3).map(|k| train_teacher::<f64>(&data, &spec, &sgd, 100 + k).unwrap()).collect();
    (spec, data, trajs)
}

fn tiny_cfg() -> DistillConfig {
    DistillConfig {
        iterations: 40,
        student_steps: 2,
        expert_epochs: 3,
        alpha0: 0.1,
        lr_alpha: 1e-3,
        lr_weights: 1e-2,
        lr_images: 1.0,
        batch_size: 4,
        ipc: 2,
        seed: 21,
        ..DistillConfig::default()
    }
}

fn run(cfg: &DistillConfig) -> DistillOutcome<f64> {
    let (spec, data, trajs) = tiny_setup();
    let d = init_distilled::<f64>(&data, cfg.ipc, 5).unwrap();
    let state = MetaState::new(d, spec.param_count().unwrap(), cfg.alpha0);
    run_distillation(&spec, cfg, &trajs, state, |_| Ok(())).unwrap()
}

/// Norm-wise relative error between two gradient vectors.
fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

#[test]
fn meta_gradients_match_finite_differences() {
    let (spec, data, trajs) = tiny_setup();
    let layout = spec.layout().unwrap();
    let p = layout.total();
    assert!(p <= 50);
    let d = init_distilled::<f64>(&data, 2, 1).unwrap();
    let targets = d.onehot_tensor();
    let start_v = trajs[1].snapshot_as::<f64>(1);
    let target = Tensor::from_vec(trajs[1].snapshot_as::<f64>(4), &[p]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w0: Vec<f64> = (0..p).map(|_| rng.random_range(0.5..1.5)).collect();

    let loss = |images: &Tensor<f64>, alpha: &Tensor<f64>, w: &Tensor<f64>| -> Tensor<f64> {
        let start = Tensor::param(start_v.clone(), &[p]).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let student = student_unroll(
            &spec,
            &layout,
            &start,
            StudentData { images, targets: &targets },
            alpha,
            2,
            4,
            (&AugmentPolicy::none(), &AugmentParams::default()),
            &mut r,
        )
        .unwrap();
        iadd_loss(&start_v, &student, &target, w).unwrap().loss
    };
    let images = d.images_tensor().detach_param();
    let alpha = Tensor::param(vec![0.2], &[]).unwrap();
    let w = Tensor::param(w0.clone(), &[p]).unwrap();
    let g = meta_gradients(&loss(&images, &alpha, &w), &images, &alpha, Some(&w)).unwrap();

    let h = 1e-6;
    let fd = |which: usize, len: usize| -> Vec<f64> {
        (0..len)
            .map(|k| {
                let eval = |delta: f64| {
                    let mut im = d.images.clone();
                    let mut a = 0.2;
                    let mut wv = w0.clone();
                    match which {
                        0 => im[k] += delta,
                        1 => a += delta,
                        _ => wv[k] += delta,
                    }
                    let im = Tensor::param(im, images.shape()).unwrap();
                    loss(&im, &Tensor::param(vec![a], &[]).unwrap(), &Tensor::param(wv, &[p]).unwrap()).item()
                };
                (eval(h) - eval(-h)) / (2.0 * h)
            })
            .collect()
    };
    assert!(rel_err(&g.images, &fd(0, d.images.len())) < 1e-3);
    assert!(rel_err(&[g.alpha], &fd(1, 1)) < 1e-3);
    assert!(rel_err(g.weights.as_ref().unwrap(), &fd(2, p)) < 1e-3);
}

#[test]
fn frozen_run_keeps_inputs() {
    let cfg = DistillConfig { iterations: 1, lr_alpha: 0.0, lr_weights: 0.0, lr_images: 0.0, ..tiny_cfg() };
    let (spec, data, trajs) = tiny_setup();
    let d = init_distilled::<f64>(&data, cfg.ipc, 5).unwrap();
    let state = MetaState::new(d.clone(), spec.param_count().unwrap(), cfg.alpha0);
    let out = run_distillation(&spec, &cfg, &trajs, state.clone(), |_| Ok(())).unwrap();
    assert_eq!(out.report.len(), 1);
    assert_eq!(out.state.losses.len(), 1);
    assert_eq!(out.state.distilled, d);
    assert_eq!(out.state.alpha, cfg.alpha0);
    assert_eq!(out.state.weights, state.weights);
}

#[test]
fn runs_are_deterministic_and_learn() {
    let cfg = tiny_cfg();
    let a = run(&cfg);
    let b = run(&cfg);
    assert_eq!(a.state, b.state);
    assert_eq!(a.report, b.report);
    assert_eq!(a.aborted, 0);
    let first: f64 = a.state.losses[..10].iter().sum();
    let last: f64 = a.state.losses[30..].iter().sum();
    assert!(last < first, "loss did not decrease: {first} -> {last}");
    assert!(a.state.weights.iter().any(|&w| w != 1.0));
    assert_eq!(a.recent_differences.len(), 35);
}

#[test]
fn mtt_is_iadd_with_frozen_weights() {
    let iadd = run(&DistillConfig { lr_weights: 0.0, ..tiny_cfg() });
    let mtt = run(&DistillConfig { mode: Mode::Mtt, ..tiny_cfg() });
    assert_eq!(iadd.state.distilled, mtt.state.distilled);
    assert_eq!(iadd.state.alpha.to_bits(), mtt.state.alpha.to_bits());
    assert_eq!(iadd.state.losses, mtt.state.losses);
    assert!(mtt.state.weights.iter().all(|&w| w == 1.0));
}

#[test]
fn ddpp_stores_the_last_mask() {
    let out = run(&DistillConfig { mode: Mode::Ddpp, epsilon: 0.05, iterations: 5, ..tiny_cfg() });
    assert!(out.state.weights.iter().all(|&w| w == 0.0 || w == 1.0));
    let open = run(&DistillConfig { mode: Mode::Ddpp, iterations: 5, ..tiny_cfg() });
    let mtt = run(&DistillConfig { mode: Mode::Mtt, iterations: 5, ..tiny_cfg() });
    assert_eq!(open.state.losses, mtt.state.losses);
}

#[test]
fn persistent_non_finite_values_fail_the_run() {
    let (spec, data, trajs) = tiny_setup();
    let mut d = init_distilled::<f64>(&data, 2, 5).unwrap();
    d.images[0] = f64::INFINITY;
    let state = MetaState::new(d, spec.param_count().unwrap(), 0.1);
    let cfg = tiny_cfg();
    let mut aborted = 0;
    let err = run_distillation(&spec, &cfg, &trajs, state, |s| {
        if let Step::Aborted { .. } = s {
            aborted += 1;
        }
        Ok(())
    })
    .unwrap_err();
    assert!(err.to_string().contains("aborted (more than 5%)"), "{err}");
    assert_eq!(aborted, cfg.iterations / 20 + 1);
}

#[test]
fn config_validation() {
    assert!(DistillConfig::default().validate().is_ok());
    assert!(DistillConfig { student_steps: 0, ..DistillConfig::default() }.validate().is_err());
    assert!(DistillConfig { lr_images: -1.0, ..DistillConfig::default() }.validate().is_err());
    assert!(DistillConfig { epsilon: f64::NAN, ..DistillConfig::default() }.validate().is_err());
    assert_eq!("ddpp".parse::<Mode>().unwrap(), Mode::Ddpp);
    assert!("sgd".parse::<Mode>().is_err());
}

#[test]
fn window_bounds_come_from_the_trajectories() {
    let (spec, data, trajs) = tiny_setup();
    let cfg = DistillConfig { max_start: Some(5), ..tiny_cfg() };
    let d = init_distilled::<f64>(&data, 2, 5).unwrap();
    let state = MetaState::new(d, spec.param_count().unwrap(), 0.1);
    let err = run_distillation(&spec, &cfg, &trajs, state, |_| Ok(())).unwrap_err();
    assert!(err.to_string().contains("start bound 5"), "{err}");
    assert_eq!(tiny_cfg().resolve_max_start(&trajs), 4);
}
