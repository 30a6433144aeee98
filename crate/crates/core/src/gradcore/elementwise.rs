//! Broadcasting binary ops and pointwise unary ops.

use super::tensor::{Op, Tensor};
use super::{GradError, Real, Result};

/// Trailing-aligned broadcast of two shapes.
pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0; nd];
    for k in 0..nd {
        let da = if k + a.len() >= nd { a[k + a.len() - nd] } else { 1 };
        let db = if k + b.len() >= nd { b[k + b.len() - nd] } else { 1 };
        out[k] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(GradError::Shape {
                    op,
                    detail: format!("cannot broadcast {:?} with {:?}", a, b),
                })
            }
        };
    }
    Ok(out)
}

/// Strides into a `src`-shaped buffer for each axis of `out`, zero on broadcast axes.
pub(crate) fn broadcast_strides(src: &[usize], out: &[usize]) -> Vec<usize> {
    let nd = out.len();
    let mut strides = vec![0; nd];
    let mut acc = 1;
    for k in (0..src.len()).rev() {
        let axis = k + nd - src.len();
        strides[axis] = if src[k] == 1 { 0 } else { acc };
        acc *= src[k];
    }
    strides
}

/// Visits every multi-index of `out`, yielding (flat out index, offset a, offset b).
pub(crate) fn for_each_broadcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let nd = out.len();
    if nd == 0 {
        f(0, 0, 0);
        return;
    }
    let inner = out[nd - 1];
    let (step_a, step_b) = (sa[nd - 1], sb[nd - 1]);
    let outer: usize = out[..nd - 1].iter().product();
    let mut idx = vec![0usize; nd - 1];
    let (mut ia, mut ib) = (0usize, 0usize);
    let mut k = 0;
    for _ in 0..outer {
        for j in 0..inner {
            f(k, ia + j * step_a, ib + j * step_b);
            k += 1;
        }
        let mut d = nd - 1;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

fn binary_values<R: Real>(
    op: &'static str,
    a: &Tensor<R>,
    b: &Tensor<R>,
    f: impl Fn(R, R) -> R,
) -> Result<(Vec<usize>, Vec<R>)> {
    let (da, db) = (a.data(), b.data());
    if a.shape() == b.shape() {
        return Ok((a.shape().to_vec(), da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()));
    }
    let shape = broadcast_shape(op, a.shape(), b.shape())?;
    if b.numel() == 1 && shape == a.shape() {
        let y = db[0];
        return Ok((shape, da.iter().map(|&x| f(x, y)).collect()));
    }
    if a.numel() == 1 && shape == b.shape() {
        let x = da[0];
        return Ok((shape, db.iter().map(|&y| f(x, y)).collect()));
    }
    let sa = broadcast_strides(a.shape(), &shape);
    let sb = broadcast_strides(b.shape(), &shape);
    let mut out = vec![R::zero(); shape.iter().product()];
    for_each_broadcast(&shape, &sa, &sb, |k, ia, ib| out[k] = f(da[ia], db[ib]));
    Ok((shape, out))
}

/// Sums `g` down to `shape` when broadcasting expanded it.
fn reduce_to<R: Real>(g: &Tensor<R>, shape: &[usize]) -> Result<Tensor<R>> {
    if g.shape() == shape {
        Ok(g.clone())
    } else {
        g.sum_to(shape)
    }
}

struct AddOp;
struct SubOp;
struct MulOp;

impl<R: Real> Op<R> for AddOp {
    fn name(&self) -> &'static str {
        "add"
    }
    fn vjp(&self, inputs: &[Tensor<R>], _out: &Tensor<R>, g: &Tensor<R>) -> Result<Vec<Option<Tensor<R>>>> {
        Ok(vec![
            Some(reduce_to(g, inputs[0].shape())?),
            Some(reduce_to(g, inputs[1].shape())?),
        ])
    }
}

impl<R: Real> Op<R> for SubOp {
    fn name(&self) -> &'static str {
        "sub"
    }
    fn vjp(&self, inputs: &[Tensor<R>], _out: &Tensor<R>, g: &Tensor<R>) -> Result<Vec<Option<Tensor<R>>>> {
        Ok(vec![
            Some(reduce_to(g, inputs[0].shape())?),
            Some(reduce_to(&g.scale(-R::one()), inputs[1].shape())?),
        ])
    }
}

impl<R: Real> Op<R> for MulOp {
    fn name(&self) -> &'static str {
        "mul"
    }
    fn vjp(&self, inputs: &[Tensor<R>], _out: &Tensor<R>, g: &Tensor<R>) -> Result<Vec<Option<Tensor<R>>>> {
        let (a, b) = (&inputs[0], &inputs[1]);
        let ga = a.requires_grad().then(|| g.mul(b).and_then(|t| reduce_to(&t, a.shape()))).transpose()?;
        let gb = b.requires_grad().then(|| g.mul(a).and_then(|t| reduce_to(&t, b.shape()))).transpose()?;
        Ok(vec![ga, gb])
    }
}

struct ScaleOp<R>(R);
struct AddScalarOp;
struct PowfOp<R>(R);
struct ReluOp;

impl<R: Real> Op<R> for ScaleOp<R> {
    fn name(&self) -> &'static str {
        "scale"
    }
    fn vjp(&self, _inputs: &[Tensor<R>], _out: &Tensor<R>, g: &Tensor<R>) -> Result<Vec<Option<Tensor<R>>>> {
        Ok(vec![Some(g.scale(self.0))])
    }
}

impl<R: Real> Op<R> for AddScalarOp {
    fn name(&self) -> &'static str {
        "add_scalar"
    }
    fn vjp(&self, _inputs: &[Tensor<R>], _out: &Tensor<R>, g: &Tensor<R>) -> Result<Vec<Option<Tensor<R>>>> {
        Ok(vec![Some(g.clone())])
    }
}

impl<R: Real> Op<R> for PowfOp<R> {
    fn name(&self) -> &'static str {
        "powf"
    }
    fn vjp(&self, inputs: &[Tensor<R>], _out: &Tensor<R>, g: &Tensor<R>) -> Result<Vec<Option<Tensor<R>>>> {
        let p = self.0;
        let local = inputs[0].powf(p - R::one()).scale(p);
        Ok(vec![Some(g.mul(&local)?)])
    }
}

impl<R: Real> Op<R> for ReluOp {
    fn name(&self) -> &'static str {
        "relu"
    }
    fn vjp(&self, inputs: &[Tensor<R>], _out: &Tensor<R>, g: &Tensor<R>) -> Result<Vec<Option<Tensor<R>>>> {
        let x = &inputs[0];
        let mask: Vec<R> = x
            .data()
            .iter()
            .map(|&v| if v > R::zero() { R::one() } else { R::zero() })
            .collect();
        let mask = Tensor::from_vec(mask, x.shape())?;
        Ok(vec![Some(g.mul(&mask)?)])
    }
}

impl<R: Real> Tensor<R> {
    pub fn add(&self, other: &Tensor<R>) -> Result<Tensor<R>> {
        let (shape, data) = binary_values("add", self, other, |x, y| x + y)?;
        Ok(Tensor::record(shape, data, AddOp, vec![self.clone(), other.clone()]))
    }

    pub fn sub(&self, other: &Tensor<R>) -> Result<Tensor<R>> {
        let (shape, data) = binary_values("sub", self, other, |x, y| x - y)?;
        Ok(Tensor::record(shape, data, SubOp, vec![self.clone(), other.clone()]))
    }

    /// Elementwise product with broadcasting.
    pub fn mul(&self, other: &Tensor<R>) -> Result<Tensor<R>> {
        let (shape, data) = binary_values("mul", self, other, |x, y| x * y)?;
        Ok(Tensor::record(shape, data, MulOp, vec![self.clone(), other.clone()]))
    }

    /// Multiplies by a constant.
    pub fn scale(&self, c: R) -> Tensor<R> {
        let data = self.data().iter().map(|&v| v * c).collect();
        Tensor::record(self.shape().to_vec(), data, ScaleOp(c), vec![self.clone()])
    }

    pub fn neg(&self) -> Tensor<R> {
        self.scale(-R::one())
    }

    pub fn add_scalar(&self, c: R) -> Tensor<R> {
        let data = self.data().iter().map(|&v| v + c).collect();
        Tensor::record(self.shape().to_vec(), data, AddScalarOp, vec![self.clone()])
    }

    /// Elementwise power with a constant exponent.
    pub fn powf(&self, p: R) -> Tensor<R> {
        let data = self.data().iter().map(|&v| v.powf(p)).collect();
        Tensor::record(self.shape().to_vec(), data, PowfOp(p), vec![self.clone()])
    }

    pub fn relu(&self) -> Tensor<R> {
        let data = self
            .data()
            .iter()
            .map(|&v| if v > R::zero() { v } else { R::zero() })
            .collect();
        Tensor::record(self.shape().to_vec(), data, ReluOp, vec![self.clone()])
    }
}
