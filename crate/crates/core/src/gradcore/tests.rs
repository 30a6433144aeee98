
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::suite::{check_op_suite, rand_tensor};
use super::*;

#[test]
fn relu_definition() {
    let x = Tensor::<f64>::from_vec(vec![-1.0, 0.0, 2.0], &[3]).unwrap();
    assert_eq!(x.relu().data(), &[0.0, 0.0, 2.0]);
}

#[test]
fn avg_pool_keeps_constant_plane() {
    let x = Tensor::<f64>::full(&[1, 1, 4, 4], 3.25);
    let y = x.avg_pool2d().unwrap();
    assert_eq!(y.shape(), &[1, 1, 2, 2]);
    assert!(y.data().iter().all(|&v| v == 3.25));
}

#[test]
fn squared_norm_hand_value() {
    let x = Tensor::<f64>::from_vec(vec![3.0, 4.0], &[2]).unwrap();
    assert_eq!(x.squared_l2_norm().unwrap().item(), 25.0);
}

#[test]
fn first_and_second_derivatives() {
    let x = Tensor::<f64>::param(vec![3.0], &[]).unwrap();
    let g = grad(&x.mul(&x).unwrap(), &[&x], false).unwrap().into_vec();
    assert_eq!(g[0].item(), 6.0);

    let x = Tensor::<f64>::param(vec![2.0], &[]).unwrap();
    let cube = x.mul(&x).unwrap().mul(&x).unwrap();
    let g = grad(&cube, &[&x], true).unwrap().into_vec().remove(0);
    assert_eq!(g.item(), 12.0);
    assert!(g.requires_grad());
    let gg = grad(&g, &[&x], false).unwrap().into_vec().remove(0);
    assert_eq!(gg.item(), 12.0);
}

#[test]
fn linear_form_gradient_is_coefficients() {
    let w = Tensor::<f64>::param(vec![0.5, -1.0, 2.0], &[3]).unwrap();
    let v = Tensor::from_vec(vec![4.0, 5.0, -6.0], &[3]).unwrap();
    let g = grad(&w.mul(&v).unwrap().sum(), &[&w], false).unwrap().into_vec();
    assert_eq!(g[0].data(), v.data());
}

#[test]
fn backward_without_create_graph_is_not_recorded() {
    let x = Tensor::<f64>::param(vec![1.0, 2.0], &[2]).unwrap();
    let g = grad(&x.mul(&x).unwrap().sum(), &[&x], false).unwrap().into_vec();
    assert!(!g[0].requires_grad());
    assert!(is_grad_enabled());
}

#[test]
fn non_scalar_loss_is_rejected() {
    let x = Tensor::<f64>::param(vec![1.0, 2.0], &[2]).unwrap();
    let err = grad(&x.scale(2.0), &[&x], false).unwrap_err();
    assert!(matches!(err, GradError::NonScalarLoss { .. }));
}

#[test]
fn unreachable_tensor_gets_zero_gradient_and_flag() {
    let x = Tensor::<f64>::param(vec![1.0, 2.0], &[2]).unwrap();
    let frozen = Tensor::<f64>::param(vec![7.0; 3], &[3]).unwrap();
    let out = grad(&x.sum(), &[&x, &frozen], false).unwrap();
    assert_eq!(out.unreachable, vec![1]);
    assert_eq!(out.grads[1].data(), &[0.0; 3]);
    assert_eq!(out.grads[0].data(), &[1.0, 1.0]);
}

#[test]
fn shape_errors_name_the_op() {
    let a = Tensor::<f64>::zeros(&[2, 3]);
    let b = Tensor::<f64>::zeros(&[4, 5]);
    let msg = a.matmul(&b).unwrap_err().to_string();
    assert!(msg.contains("matmul") && msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
    let msg = a.add(&b).unwrap_err().to_string();
    assert!(msg.starts_with("add"), "{msg}");
}

#[test]
fn grad_check_squared_norm_and_constant() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = rand_tensor(&mut rng, &[10], -1.0, 1.0);
    let err = grad_check(|t| t[0].squared_l2_norm(), std::slice::from_ref(&x), 1e-5).unwrap();
    assert!(err < 1e-6, "{err}");
    let err = grad_check(|_| Ok(Tensor::scalar(4.0)), &[x], 1e-5).unwrap();
    assert_eq!(err, 0.0);
}

#[test]
fn grad_check_reports_non_finite_coordinate() {
    let x = Tensor::<f64>::from_vec(vec![1.0, 1e-6], &[2]).unwrap();
    let err = grad_check(|t| Ok(t[0].powf(-0.5).sum()), &[x], 1e-5).unwrap_err();
    assert!(matches!(err, GradError::NonFinite { input: 0, coordinate: 1 }), "{err}");
}

#[test]
fn every_primitive_passes_grad_check_at_100_points() {
    for r in check_op_suite(100, 0, 2024).unwrap() {
        assert!(r.first_order < 1e-6, "{}: worst relative error {:e}", r.name, r.first_order);
    }
}

#[test]
fn every_primitive_passes_second_order_check() {
    for r in check_op_suite(0, 10, 99).unwrap() {
        assert!(r.second_order.is_finite() && r.second_order < 1e-4, "{}: worst second-order error {:e}", r.name, r.second_order);
    }
}

#[test]
fn gradient_is_linear_in_the_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&mut rng, &[1, 2, 4, 4], -1.0, 1.0).detach_param();
    let w = rand_tensor(&mut rng, &[3, 2, 3, 3], -1.0, 1.0);
    let f = x.conv2d(&w).unwrap().relu().sum();
    let g = x.instance_norm(1e-5).unwrap().squared_l2_norm().unwrap();
    let (a, b) = (0.75, -2.5);
    let combo = f.scale(a).add(&g.scale(b)).unwrap();
    let lhs = grad(&combo, &[&x], false).unwrap().into_vec().remove(0);
    let gf = grad(&f, &[&x], false).unwrap().into_vec().remove(0);
    let gg = grad(&g, &[&x], false).unwrap().into_vec().remove(0);
    for ((l, p), q) in lhs.data().iter().zip(gf.data()).zip(gg.data()) {
        assert!((l - (a * p + b * q)).abs() < 1e-12 * (1.0 + l.abs()));
    }
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = rand_tensor(&mut rng, &[2, 3, 6, 6], 0.0, 1.0);
        let w = rand_tensor(&mut rng, &[4, 3, 3, 3], -1.0, 1.0);
        x.conv2d(&w).unwrap().instance_norm(1e-5).unwrap().relu().avg_pool2d().unwrap().to_vec()
    };
    assert_eq!(run(), run());
}

#[test]
fn f32_tensors_follow_the_same_rules() {
    let x = Tensor::<f32>::param(vec![2.0], &[]).unwrap();
    let cube = x.mul(&x).unwrap().mul(&x).unwrap();
    let g = grad(&cube, &[&x], true).unwrap().into_vec().remove(0);
    let gg = grad(&g, &[&x], false).unwrap().into_vec().remove(0);
    assert_eq!((g.item(), gg.item()), (12.0, 12.0));
}

#[test]
fn long_chains_drop_without_overflow() {
    let x = Tensor::<f64>::param(vec![1.0], &[1]).unwrap();
    let mut y = x.clone();
    for _ in 0..200_000 {
        y = y.add_scalar(1e-9);
    }
    assert!(y.requires_grad());
    drop(y);
}
