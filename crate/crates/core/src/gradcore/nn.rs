//! Softmax, cross-entropy, instance normalization and fixed sparse plane maps.

use std::rc::Rc;

use super::tensor::{Op, Tensor};
use super::{GradError, Real, Result};

struct SoftmaxOp;
struct CrossEntropyOp<R: Real> {
    targets: Tensor<R>,
}
struct PlaneMapOp {
    map: Rc<PlaneMap>,
}

impl<R: Real> Op<R> for SoftmaxOp {
    fn name(&self) -> &'static str {
        "softmax"
    }
    fn vjp(&self, _inputs: &[Tensor<R>], out: &Tensor<R>, g: &Tensor<R>) -> Result<Vec<Option<Tensor<R>>>> {
        // s ⊙ (g − Σ_row g ⊙ s)
        let rows = out.shape()[0];
        let gs = g.mul(out)?;
        let row_sum = gs.sum_to(&[rows, 1])?;
        Ok(vec![Some(out.mul(&g.sub(&row_sum)?)?)])
    }
}

impl<R: Real> Op<R> for CrossEntropyOp<R> {
    fn name(&self) -> &'static str {
        "softmax_cross_entropy"
    }
    fn vjp(&self, inputs: &[Tensor<R>], _out: &Tensor<R>, g: &Tensor<R>) -> Result<Vec<Option<Tensor<R>>>> {
        let logits = &inputs[0];
        let n = R::lit(logits.shape()[0] as f64);
        let delta = logits.softmax()?.sub(&self.targets)?;
        Ok(vec![Some(delta.mul(&g.scale(R::one() / n))?)])
    }
}

impl<R: Real> Op<R> for PlaneMapOp {
    fn name(&self) -> &'static str {
        "plane_map"
    }
    fn vjp(&self, _inputs: &[Tensor<R>], _out: &Tensor<R>, g: &Tensor<R>) -> Result<Vec<Option<Tensor<R>>>> {
        Ok(vec![Some(g.plane_map(&Rc::new(self.map.transposed()))?)])
    }
}

/// A fixed linear map from one (h, w) plane to another, stored as sparse
/// `(out, in, weight)` triples. Applied identically to every leading plane of
/// an (…, h, w) tensor; its adjoint is the transposed map.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneMap {
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub entries: Vec<(usize, usize, f64)>,
}

impl PlaneMap {
    pub fn identity(h: usize, w: usize) -> Self {
        PlaneMap {
            in_h: h,
            in_w: w,
            out_h: h,
            out_w: w,
            entries: (0..h * w).map(|i| (i, i, 1.0)).collect(),
        }
    }

    pub fn transposed(&self) -> Self {
        PlaneMap {
            in_h: self.out_h,
            in_w: self.out_w,
            out_h: self.in_h,
            out_w: self.in_w,
            entries: self.entries.iter().map(|&(o, i, w)| (i, o, w)).collect(),
        }
    }
}

fn softmax_rows<R: Real>(x: &[R], rows: usize, cols: usize) -> Vec<R> {
    let mut out = vec![R::zero(); rows * cols];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let m = row.iter().copied().fold(R::neg_infinity(), R::max);
        let dst = &mut out[r * cols..(r + 1) * cols];
        let mut total = R::zero();
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - m).exp();
            total += *d;
        }
        for d in dst.iter_mut() {
            *d = *d / total;
        }
    }
    out
}

fn matrix_dims<R: Real>(op: &'static str, t: &Tensor<R>) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] if r > 0 && c > 0 => Ok((r, c)),
        _ => Err(GradError::Shape {
            op,
            detail: format!("expected a non-empty (rows, classes) matrix, got {:?}", t.shape()),
        }),
    }
}

impl<R: Real> Tensor<R> {
    /// Row-wise softmax of a matrix.
    pub fn softmax(&self) -> Result<Tensor<R>> {
        let (rows, cols) = matrix_dims("softmax", self)?;
        let out = softmax_rows(self.data(), rows, cols);
        Ok(Tensor::record(vec![rows, cols], out, SoftmaxOp, vec![self.clone()]))
    }

    /// Mean over rows of the cross-entropy between `softmax(self)` and the
    /// target distributions in `targets` (one-hot rows). Targets are constants.
    pub fn softmax_cross_entropy(&self, targets: &Tensor<R>) -> Result<Tensor<R>> {
        let (rows, cols) = matrix_dims("softmax_cross_entropy", self)?;
        if targets.shape() != self.shape() {
            return Err(GradError::Shape {
                op: "softmax_cross_entropy",
                detail: format!("logits {:?} vs targets {:?}", self.shape(), targets.shape()),
            });
        }
        let (x, y) = (self.data(), targets.data());
        let mut total = R::zero();
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let m = row.iter().copied().fold(R::neg_infinity(), R::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<R>().ln();
            for c in 0..cols {
                let t = y[r * cols + c];
                if t != R::zero() {
                    total += t * (lse - row[c]);
                }
            }
        }
        let loss = total / R::lit(rows as f64);
        Ok(Tensor::record(
            Vec::new(),
            vec![loss],
            CrossEntropyOp { targets: targets.detach() },
            vec![self.clone()],
        ))
    }

    /// Applies `map` to the trailing (h, w) plane of every leading index.
    pub fn plane_map(&self, map: &Rc<PlaneMap>) -> Result<Tensor<R>> {
        let nd = self.ndim();
        if nd < 2 || self.shape()[nd - 2] != map.in_h || self.shape()[nd - 1] != map.in_w {
            return Err(GradError::Shape {
                op: "plane_map",
                detail: format!("{:?} vs map input plane {}x{}", self.shape(), map.in_h, map.in_w),
            });
        }
        let (ip, op) = (map.in_h * map.in_w, map.out_h * map.out_w);
        let planes = self.numel() / ip;
        let weights: Vec<(usize, usize, R)> = map.entries.iter().map(|&(o, i, w)| (o, i, R::lit(w))).collect();
        let src = self.data();
        let mut out = vec![R::zero(); planes * op];
        for p in 0..planes {
            let xs = &src[p * ip..(p + 1) * ip];
            let ys = &mut out[p * op..(p + 1) * op];
            for &(o, i, w) in &weights {
                ys[o] += w * xs[i];
            }
        }
        let mut shape = self.shape().to_vec();
        shape[nd - 2] = map.out_h;
        shape[nd - 1] = map.out_w;
        Ok(Tensor::record(shape, out, PlaneMapOp { map: Rc::clone(map) }, vec![self.clone()]))
    }

    /// Per-sample, per-channel normalization of an (N, C, H, W) tensor over
    /// its spatial extent, without the affine part. Built from primitive ops.
    pub fn instance_norm(&self, eps: R) -> Result<Tensor<R>> {
        let &[n, c, h, w] = self.shape() else {
            return Err(GradError::Shape {
                op: "instance_norm",
                detail: format!("expected (N, C, H, W), got {:?}", self.shape()),
            });
        };
        let hw = h * w;
        if hw == 0 {
            return Err(GradError::Shape {
                op: "instance_norm",
                detail: "no spatial elements".into(),
            });
        }
        let inv_hw = R::one() / R::lit(hw as f64);
        let flat = self.reshape(&[n * c, hw])?;
        let mean = flat.sum_to(&[n * c, 1])?.scale(inv_hw);
        let centered = flat.sub(&mean)?;
        let var = centered.mul(&centered)?.sum_to(&[n * c, 1])?.scale(inv_hw);
        let inv_std = var.add_scalar(eps).powf(R::lit(-0.5));
        centered.mul(&inv_std)?.reshape(&[n, c, h, w])
    }
}
