//! Layout ops: reshape, transpose, slicing, concatenation, reductions,
//! broadcasting and row gathers. Each op's adjoint is another op here.

use super::elementwise::{broadcast_shape, broadcast_strides, for_each_broadcast};
use super::tensor::{numel, Op, Tensor};
use super::{GradError, Real, Result};

struct ReshapeOp;
struct TransposeOp;
struct NarrowOp {
    axis: usize,
    start: usize,
}
struct EmbedOp {
    axis: usize,
    start: usize,
    len: usize,
}
struct ConcatOp {
    axis: usize,
}
struct SumToOp;
struct BroadcastToOp;
struct SelectRowsOp {
    indices: Vec<usize>,
}
struct ScatterRowsOp {
    indices: Vec<usize>,
}

impl<R: Real> Op<R> for ReshapeOp {
    fn name(&self) -> &'static str {
        "reshape"
    }
    fn vjp(&self, inputs: &[Tensor<R>], _out: &Tensor<R>, g: &Tensor<R>) -> Result<Vec<Option<Tensor<R>>>> {
        Ok(vec![Some(g.reshape(inputs[0].shape())?)])
    }
}

impl<R: Real> Op<R> for TransposeOp {
    fn name(&self) -> &'static str {
        "transpose"
    }
    fn vjp(&self, _inputs: &[Tensor<R>], _out: &Tensor<R>, g: &Tensor<R>) -> Result<Vec<Option<Tensor<R>>>> {
        Ok(vec![Some(g.transpose()?)])
    }
}

impl<R: Real> Op<R> for NarrowOp {
    fn name(&self) -> &'static str {
        "narrow"
    }
    fn vjp(&self, inputs: &[Tensor<R>], _out: &Tensor<R>, g: &Tensor<R>) -> Result<Vec<Option<Tensor<R>>>> {
        let full = inputs[0].shape()[self.axis];
        Ok(vec![Some(g.embed(self.axis, self.start, full)?)])
    }
}

impl<R: Real> Op<R> for EmbedOp {
    fn name(&self) -> &'static str {
        "embed"
    }
    fn vjp(&self, _inputs: &[Tensor<R>], _out: &Tensor<R>, g: &Tensor<R>) -> Result<Vec<Option<Tensor<R>>>> {
        Ok(vec![Some(g.narrow(self.axis, self.start, self.len)?)])
    }
}

impl<R: Real> Op<R> for ConcatOp {
    fn name(&self) -> &'static str {
        "concat"
    }
    fn vjp(&self, inputs: &[Tensor<R>], _out: &Tensor<R>, g: &Tensor<R>) -> Result<Vec<Option<Tensor<R>>>> {
        let mut start = 0;
        let mut grads = Vec::with_capacity(inputs.len());
        for t in inputs {
            let len = t.shape()[self.axis];
            grads.push(if t.requires_grad() { Some(g.narrow(self.axis, start, len)?) } else { None });
            start += len;
        }
        Ok(grads)
    }
}

impl<R: Real> Op<R> for SumToOp {
    fn name(&self) -> &'static str {
        "sum_to"
    }
    fn vjp(&self, inputs: &[Tensor<R>], _out: &Tensor<R>, g: &Tensor<R>) -> Result<Vec<Option<Tensor<R>>>> {
        Ok(vec![Some(g.broadcast_to(inputs[0].shape())?)])
    }
}

impl<R: Real> Op<R> for BroadcastToOp {
    fn name(&self) -> &'static str {
        "broadcast_to"
    }
    fn vjp(&self, inputs: &[Tensor<R>], _out: &Tensor<R>, g: &Tensor<R>) -> Result<Vec<Option<Tensor<R>>>> {
        Ok(vec![Some(g.sum_to(inputs[0].shape())?)])
    }
}

impl<R: Real> Op<R> for SelectRowsOp {
    fn name(&self) -> &'static str {
        "select_rows"
    }
    fn vjp(&self, inputs: &[Tensor<R>], _out: &Tensor<R>, g: &Tensor<R>) -> Result<Vec<Option<Tensor<R>>>> {
        Ok(vec![Some(g.scatter_rows(&self.indices, inputs[0].shape()[0])?)])
    }
}

impl<R: Real> Op<R> for ScatterRowsOp {
    fn name(&self) -> &'static str {
        "scatter_rows"
    }
    fn vjp(&self, _inputs: &[Tensor<R>], _out: &Tensor<R>, g: &Tensor<R>) -> Result<Vec<Option<Tensor<R>>>> {
        Ok(vec![Some(g.select_rows(&self.indices)?)])
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<R: Real> Tensor<R> {
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<R>> {
        if numel(shape) != self.numel() {
            return Err(GradError::Shape {
                op: "reshape",
                detail: format!("cannot reshape {:?} into {:?}", self.shape(), shape),
            });
        }
        Ok(Tensor::record(shape.to_vec(), self.to_vec(), ReshapeOp, vec![self.clone()]))
    }

    /// Transpose of a matrix.
    pub fn transpose(&self) -> Result<Tensor<R>> {
        let &[m, n] = self.shape() else {
            return Err(GradError::Shape {
                op: "transpose",
                detail: format!("expected a matrix, got {:?}", self.shape()),
            });
        };
        let src = self.data();
        let mut out = vec![R::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        Ok(Tensor::record(vec![n, m], out, TransposeOp, vec![self.clone()]))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<R>> {
        if axis >= self.ndim() || start + len > self.shape()[axis] {
            return Err(GradError::Shape {
                op: "narrow",
                detail: format!("range {}..{} on axis {} of {:?}", start, start + len, axis, self.shape()),
            });
        }
        let (outer, full, inner) = split_axis(self.shape(), axis);
        let src = self.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        Ok(Tensor::record(shape, out, NarrowOp { axis, start }, vec![self.clone()]))
    }

    /// Places `self` at offset `start` of a zero tensor whose `axis` has extent `full`.
    pub fn embed(&self, axis: usize, start: usize, full: usize) -> Result<Tensor<R>> {
        if axis >= self.ndim() || start + self.shape()[axis] > full {
            return Err(GradError::Shape {
                op: "embed",
                detail: format!("{:?} at {} on axis {} of extent {}", self.shape(), start, axis, full),
            });
        }
        let (outer, len, inner) = split_axis(self.shape(), axis);
        let src = self.data();
        let mut out = vec![R::zero(); outer * full * inner];
        for o in 0..outer {
            let dst = (o * full + start) * inner;
            out[dst..dst + len * inner].copy_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = full;
        Ok(Tensor::record(shape, out, EmbedOp { axis, start, len }, vec![self.clone()]))
    }

    pub fn concat(parts: &[Tensor<R>], axis: usize) -> Result<Tensor<R>> {
        let first = parts.first().ok_or_else(|| GradError::Shape {
            op: "concat",
            detail: "no inputs".into(),
        })?;
        if axis >= first.ndim() {
            return Err(GradError::Shape {
                op: "concat",
                detail: format!("axis {} out of range for {:?}", axis, first.shape()),
            });
        }
        for t in parts {
            let compatible = t.ndim() == first.ndim()
                && t.shape().iter().zip(first.shape()).enumerate().all(|(k, (a, b))| k == axis || a == b);
            if !compatible {
                return Err(GradError::Shape {
                    op: "concat",
                    detail: format!("{:?} does not match {:?} off axis {}", t.shape(), first.shape(), axis),
                });
            }
        }
        let (outer, _, inner) = split_axis(first.shape(), axis);
        let total: usize = parts.iter().map(|t| t.shape()[axis]).sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for t in parts {
                let len = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        Ok(Tensor::record(shape, out, ConcatOp { axis }, parts.to_vec()))
    }

    /// Sums over the axes along which `shape` would broadcast up to `self.shape()`.
    pub fn sum_to(&self, shape: &[usize]) -> Result<Tensor<R>> {
        let full = broadcast_shape("sum_to", shape, self.shape())?;
        if full != self.shape() {
            return Err(GradError::Shape {
                op: "sum_to",
                detail: format!("{:?} does not broadcast to {:?}", shape, self.shape()),
            });
        }
        let st = broadcast_strides(shape, self.shape());
        let zero = vec![0; self.ndim()];
        let src = self.data();
        let mut out = vec![R::zero(); numel(shape)];
        for_each_broadcast(self.shape(), &st, &zero, |k, it, _| out[it] += src[k]);
        Ok(Tensor::record(shape.to_vec(), out, SumToOp, vec![self.clone()]))
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor<R>> {
        let full = broadcast_shape("broadcast_to", self.shape(), shape)?;
        if full != shape {
            return Err(GradError::Shape {
                op: "broadcast_to",
                detail: format!("{:?} does not broadcast to {:?}", self.shape(), shape),
            });
        }
        let ss = broadcast_strides(self.shape(), shape);
        let zero = vec![0; shape.len()];
        let src = self.data();
        let mut out = vec![R::zero(); numel(shape)];
        for_each_broadcast(shape, &ss, &zero, |k, is, _| out[k] = src[is]);
        Ok(Tensor::record(shape.to_vec(), out, BroadcastToOp, vec![self.clone()]))
    }

    /// Sum of all entries as a 0-d tensor.
    pub fn sum(&self) -> Tensor<R> {
        let total = self.data().iter().copied().sum();
        Tensor::record(Vec::new(), vec![total], SumToOp, vec![self.clone()])
    }

    pub fn mean(&self) -> Tensor<R> {
        let n = R::lit(self.numel() as f64);
        self.sum().scale(R::one() / n)
    }

    pub fn squared_l2_norm(&self) -> Result<Tensor<R>> {
        Ok(self.mul(self)?.sum())
    }

    /// Gathers rows (entries of axis 0) by index; duplicates allowed.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Tensor<R>> {
        let rows = *self.shape().first().ok_or_else(|| GradError::Shape {
            op: "select_rows",
            detail: "0-d input".into(),
        })?;
        let row = self.numel() / rows.max(1);
        let src = self.data();
        let mut out = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            if i >= rows {
                return Err(GradError::Shape {
                    op: "select_rows",
                    detail: format!("row {} of {}", i, rows),
                });
            }
            out.extend_from_slice(&src[i * row..(i + 1) * row]);
        }
        let mut shape = self.shape().to_vec();
        shape[0] = indices.len();
        Ok(Tensor::record(shape, out, SelectRowsOp { indices: indices.to_vec() }, vec![self.clone()]))
    }

    /// Adjoint of [`select_rows`](Self::select_rows): adds row `k` of `self` into row `indices[k]`.
    pub fn scatter_rows(&self, indices: &[usize], rows: usize) -> Result<Tensor<R>> {
        if self.shape().first() != Some(&indices.len()) {
            return Err(GradError::Shape {
                op: "scatter_rows",
                detail: format!("{:?} rows vs {} indices", self.shape(), indices.len()),
            });
        }
        let row = if indices.is_empty() { 0 } else { self.numel() / indices.len() };
        let src = self.data();
        let mut out = vec![R::zero(); rows * row];
        for (k, &i) in indices.iter().enumerate() {
            if i >= rows {
                return Err(GradError::Shape {
                    op: "scatter_rows",
                    detail: format!("row {} of {}", i, rows),
                });
            }
            for c in 0..row {
                out[i * row + c] += src[k * row + c];
            }
        }
        let mut shape = self.shape().to_vec();
        shape[0] = rows;
        Ok(Tensor::record(shape, out, ScatterRowsOp { indices: indices.to_vec() }, vec![self.clone()]))
    }
}
