//! Named gradient checks covering every differentiable op.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{grad, grad_check, PlaneMap, Result, Tensor, INSTANCE_NORM_EPS};

type Fx = Box<dyn Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>>;

/// One op under test: a scalar function of its inputs.
pub struct OpCase {
    pub name: &'static str,
    pub f: Fx,
    pub shapes: Vec<Vec<usize>>,
    /// Sampling range of the inputs.
    pub range: (f64, f64),
}

/// Worst errors of one op over the sampled points.
#[derive(Debug, Clone, PartialEq)]
pub struct OpReport {
    pub name: &'static str,
    pub first_order: f64,
    /// Error of the Hessian-vector product contracted with a random probe.
    pub second_order: f64,
}

pub(crate) fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::from_vec((0..n).map(|_| rng.random_range(lo..hi)).collect(), shape).unwrap()
}

/// Contracts an op output with a fixed random tensor so every output entry matters.
fn weigh(out: Tensor<f64>, seed: u64) -> Result<Tensor<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = rand_tensor(&mut rng, out.shape(), -1.0, 1.0);
    Ok(out.mul(&r)?.sum())
}

fn shift_map(h: usize, w: usize) -> Rc<PlaneMap> {
    let mut entries = Vec::new();
    for y in 0..h {
        for x in 0..w {
            // bilinear-like blend of two neighbours, out of range taps dropped
            entries.push((y * w + x, y * w + (x + 1).min(w - 1), 0.7));
            if y + 1 < h {
                entries.push((y * w + x, (y + 1) * w + x, 0.3));
            }
        }
    }
    Rc::new(PlaneMap { in_h: h, in_w: w, out_h: h, out_w: w, entries })
}

type Row = (&'static str, Fx, Vec<Vec<usize>>, (f64, f64));

pub fn op_cases() -> Vec<OpCase> {
    let onehot = Tensor::from_vec(vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0], &[3, 3]).unwrap();
    let map = shift_map(3, 4);
    let cases: Vec<Row> = vec![
        ("add", Box::new(|x: &[Tensor<f64>]| weigh(x[0].add(&x[1])?, 1)), vec![vec![2, 3], vec![3]], (-1.0, 1.0)),
        ("sub", Box::new(|x: &[Tensor<f64>]| weigh(x[0].sub(&x[1])?, 2)), vec![vec![2, 1], vec![2, 3]], (-1.0, 1.0)),
        ("mul", Box::new(|x: &[Tensor<f64>]| weigh(x[0].mul(&x[1])?, 3)), vec![vec![2, 3], vec![2, 3]], (-1.0, 1.0)),
        ("mul_scalar", Box::new(|x: &[Tensor<f64>]| weigh(x[1].mul(&x[0])?, 4)), vec![vec![], vec![4]], (-1.0, 1.0)),
        ("scale", Box::new(|x: &[Tensor<f64>]| weigh(x[0].scale(-1.7), 5)), vec![vec![5]], (-1.0, 1.0)),
        ("add_scalar", Box::new(|x: &[Tensor<f64>]| weigh(x[0].add_scalar(0.3), 6)), vec![vec![5]], (-1.0, 1.0)),
        ("powf", Box::new(|x: &[Tensor<f64>]| weigh(x[0].powf(-0.5), 7)), vec![vec![5]], (0.5, 2.0)),
        ("relu", Box::new(|x: &[Tensor<f64>]| weigh(x[0].relu(), 8)), vec![vec![8]], (-1.0, 1.0)),
        ("matmul", Box::new(|x: &[Tensor<f64>]| weigh(x[0].matmul(&x[1])?, 9)), vec![vec![2, 3], vec![3, 4]], (-1.0, 1.0)),
        ("transpose", Box::new(|x: &[Tensor<f64>]| weigh(x[0].transpose()?, 10)), vec![vec![2, 3]], (-1.0, 1.0)),
        (
            "conv2d",
            Box::new(|x: &[Tensor<f64>]| weigh(x[0].conv2d(&x[1])?, 11)),
            vec![vec![2, 2, 4, 3], vec![3, 2, 3, 3]],
            (-1.0, 1.0),
        ),
        (
            "conv2d_weight",
            Box::new(|x: &[Tensor<f64>]| weigh(x[0].conv2d_weight(&x[1], 3)?, 12)),
            vec![vec![2, 2, 3, 4], vec![2, 3, 3, 4]],
            (-1.0, 1.0),
        ),
        ("flip_kernel", Box::new(|x: &[Tensor<f64>]| weigh(x[0].flip_kernel()?, 13)), vec![vec![2, 3, 3, 3]], (-1.0, 1.0)),
        ("avg_pool2d", Box::new(|x: &[Tensor<f64>]| weigh(x[0].avg_pool2d()?, 14)), vec![vec![1, 2, 5, 4]], (-1.0, 1.0)),
        (
            "avg_pool2d_adjoint",
            Box::new(|x: &[Tensor<f64>]| weigh(x[0].avg_pool2d_adjoint(5, 4)?, 15)),
            vec![vec![1, 2, 2, 2]],
            (-1.0, 1.0),
        ),
        ("reshape", Box::new(|x: &[Tensor<f64>]| weigh(x[0].reshape(&[3, 2])?, 16)), vec![vec![2, 3]], (-1.0, 1.0)),
        ("narrow", Box::new(|x: &[Tensor<f64>]| weigh(x[0].narrow(1, 1, 2)?, 17)), vec![vec![2, 4]], (-1.0, 1.0)),
        ("embed", Box::new(|x: &[Tensor<f64>]| weigh(x[0].embed(0, 1, 4)?, 18)), vec![vec![2, 3]], (-1.0, 1.0)),
        (
            "concat",
            Box::new(|x: &[Tensor<f64>]| weigh(Tensor::concat(&[x[0].clone(), x[1].clone()], 1)?, 19)),
            vec![vec![2, 1], vec![2, 3]],
            (-1.0, 1.0),
        ),
        ("sum_to", Box::new(|x: &[Tensor<f64>]| weigh(x[0].sum_to(&[1, 3])?, 20)), vec![vec![4, 3]], (-1.0, 1.0)),
        ("broadcast_to", Box::new(|x: &[Tensor<f64>]| weigh(x[0].broadcast_to(&[2, 3])?, 21)), vec![vec![3]], (-1.0, 1.0)),
        ("sum", Box::new(|x: &[Tensor<f64>]| weigh(x[0].sum(), 22)), vec![vec![2, 2]], (-1.0, 1.0)),
        ("mean", Box::new(|x: &[Tensor<f64>]| weigh(x[0].mean(), 23)), vec![vec![2, 2]], (-1.0, 1.0)),
        ("squared_l2_norm", Box::new(|x: &[Tensor<f64>]| x[0].squared_l2_norm()), vec![vec![10]], (-1.0, 1.0)),
        ("softmax", Box::new(|x: &[Tensor<f64>]| weigh(x[0].softmax()?, 24)), vec![vec![3, 4]], (-2.0, 2.0)),
        (
            "softmax_cross_entropy",
            Box::new(move |x: &[Tensor<f64>]| x[0].softmax_cross_entropy(&onehot)),
            vec![vec![3, 3]],
            (-2.0, 2.0),
        ),
        ("select_rows", Box::new(|x: &[Tensor<f64>]| weigh(x[0].select_rows(&[2, 0, 2])?, 25)), vec![vec![3, 2]], (-1.0, 1.0)),
        (
            "scatter_rows",
            Box::new(|x: &[Tensor<f64>]| weigh(x[0].scatter_rows(&[1, 1, 0], 3)?, 26)),
            vec![vec![3, 2]],
            (-1.0, 1.0),
        ),
        (
            "plane_map",
            Box::new(move |x: &[Tensor<f64>]| weigh(x[0].plane_map(&map)?, 27)),
            vec![vec![2, 1, 3, 4]],
            (-1.0, 1.0),
        ),
        (
            "instance_norm",
            Box::new(|x: &[Tensor<f64>]| weigh(x[0].instance_norm(INSTANCE_NORM_EPS)?, 28)),
            vec![vec![2, 2, 3, 3]],
            (-1.0, 1.0),
        ),
    ];
    cases.into_iter().map(|(name, f, shapes, range)| OpCase { name, f, shapes, range }).collect()
}

fn sample_point(rng: &mut ChaCha8Rng, shapes: &[Vec<usize>], range: (f64, f64)) -> Vec<Tensor<f64>> {
    shapes.iter().map(|s| rand_tensor(rng, s, range.0, range.1)).collect()
}


/// Runs every case at `first` random points for the gradient and `second`
/// points for the second-order check. A count of zero reports 0.
pub fn check_op_suite(first: usize, second: usize, seed: u64) -> Result<Vec<OpReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for case in op_cases() {
        let mut first_order = 0.0f64;
        for _ in 0..first {
            let point = sample_point(&mut rng, &case.shapes, case.range);
            first_order = first_order.max(grad_check(&case.f, &point, 1e-5)?);
        }
        let mut second_order = 0.0f64;
        for _ in 0..second {
            let point = sample_point(&mut rng, &case.shapes, case.range);
            let probes: Vec<Tensor<f64>> = case.shapes.iter().map(|s| rand_tensor(&mut rng, s, -1.0, 1.0)).collect();
            let hvp = |x: &[Tensor<f64>]| -> Result<Tensor<f64>> {
                let y = (case.f)(x)?;
                let refs: Vec<&Tensor<f64>> = x.iter().collect();
                let gs = grad(&y, &refs, true)?.into_vec();
                let mut total = Tensor::scalar(0.0);
                for (g, p) in gs.iter().zip(&probes) {
                    total = total.add(&g.mul(p)?.sum())?;
                }
                Ok(total)
            };
            second_order = second_order.max(grad_check(hvp, &point, 1e-5)?);
        }
        out.push(OpReport { name: case.name, first_order, second_order });
    }
    Ok(out)
}
