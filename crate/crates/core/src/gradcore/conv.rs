//! Matrix product, same-padded stride-1 convolution and 2×2 average pooling.
//!
//! Convolution backward is closed over three ops:
//! `conv2d(g, flip_kernel(w))` for the input and `conv2d_weight(x, g)` for the
//! kernel, whose own adjoints are again `conv2d` and `flip_kernel`.

use super::tensor::{Op, Tensor};
use super::{GradError, Real, Result};

struct MatMulOp;
struct Conv2dOp;
struct Conv2dWeightOp {
    k: usize,
}
struct FlipKernelOp;
struct AvgPoolOp;
struct AvgPoolAdjointOp {
    h: usize,
    w: usize,
}

impl<R: Real> Op<R> for MatMulOp {
    fn name(&self) -> &'static str {
        "matmul"
    }
    fn vjp(&self, inputs: &[Tensor<R>], _out: &Tensor<R>, g: &Tensor<R>) -> Result<Vec<Option<Tensor<R>>>> {
        let (a, b) = (&inputs[0], &inputs[1]);
        let ga = a.requires_grad().then(|| g.matmul(&b.transpose()?)).transpose()?;
        let gb = b.requires_grad().then(|| a.transpose()?.matmul(g)).transpose()?;
        Ok(vec![ga, gb])
    }
}

impl<R: Real> Op<R> for Conv2dOp {
    fn name(&self) -> &'static str {
        "conv2d"
    }
    fn vjp(&self, inputs: &[Tensor<R>], _out: &Tensor<R>, g: &Tensor<R>) -> Result<Vec<Option<Tensor<R>>>> {
        let (x, w) = (&inputs[0], &inputs[1]);
        let gx = x.requires_grad().then(|| g.conv2d(&w.flip_kernel()?)).transpose()?;
        let gw = w
            .requires_grad()
            .then(|| x.conv2d_weight(g, w.shape()[2]))
            .transpose()?;
        Ok(vec![gx, gw])
    }
}

impl<R: Real> Op<R> for Conv2dWeightOp {
    fn name(&self) -> &'static str {
        "conv2d_weight"
    }
    fn vjp(&self, inputs: &[Tensor<R>], _out: &Tensor<R>, g: &Tensor<R>) -> Result<Vec<Option<Tensor<R>>>> {
        let (x, gy) = (&inputs[0], &inputs[1]);
        debug_assert_eq!(g.shape()[2], self.k);
        let gx = x.requires_grad().then(|| gy.conv2d(&g.flip_kernel()?)).transpose()?;
        let ggy = gy.requires_grad().then(|| x.conv2d(g)).transpose()?;
        Ok(vec![gx, ggy])
    }
}

impl<R: Real> Op<R> for FlipKernelOp {
    fn name(&self) -> &'static str {
        "flip_kernel"
    }
    fn vjp(&self, _inputs: &[Tensor<R>], _out: &Tensor<R>, g: &Tensor<R>) -> Result<Vec<Option<Tensor<R>>>> {
        Ok(vec![Some(g.flip_kernel()?)])
    }
}

impl<R: Real> Op<R> for AvgPoolOp {
    fn name(&self) -> &'static str {
        "avg_pool2d"
    }
    fn vjp(&self, inputs: &[Tensor<R>], _out: &Tensor<R>, g: &Tensor<R>) -> Result<Vec<Option<Tensor<R>>>> {
        let s = inputs[0].shape();
        Ok(vec![Some(g.avg_pool2d_adjoint(s[2], s[3])?)])
    }
}

impl<R: Real> Op<R> for AvgPoolAdjointOp {
    fn name(&self) -> &'static str {
        "avg_pool2d_adjoint"
    }
    fn vjp(&self, _inputs: &[Tensor<R>], _out: &Tensor<R>, g: &Tensor<R>) -> Result<Vec<Option<Tensor<R>>>> {
        debug_assert_eq!((g.shape()[2], g.shape()[3]), (self.h, self.w));
        Ok(vec![Some(g.avg_pool2d()?)])
    }
}

fn nchw(op: &'static str, t: &[usize]) -> Result<[usize; 4]> {
    match *t {
        [n, c, h, w] => Ok([n, c, h, w]),
        _ => Err(GradError::Shape {
            op,
            detail: format!("expected (N, C, H, W), got {:?}", t),
        }),
    }
}

/// Valid output rows for a kernel tap offset `d` on an extent `n`.
#[inline]
fn tap_range(d: isize, n: usize) -> std::ops::Range<usize> {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d).clamp(0, n as isize) as usize;
    lo..hi.max(lo)
}

/// Fills `row` (length N·H·W) with input channel `c` shifted by the kernel
/// tap `(ky, kx)`, zero where the tap falls outside the image. Row
/// `(c·k + ky)·k + kx` of the unfolded input matrix.
#[allow(clippy::too_many_arguments)]
fn tap_row<R: Real>(x: &[R], n: usize, ci: usize, h: usize, w: usize, k: usize, tap: (usize, usize, usize), row: &mut [R]) {
    let (c, ky, kx) = tap;
    let p = (k / 2) as isize;
    let hw = h * w;
    let (dy, dx) = (ky as isize - p, kx as isize - p);
    let rows = tap_range(dy, h);
    let xs = tap_range(dx, w);
    row.iter_mut().for_each(|v| *v = R::zero());
    for b in 0..n {
        let xp = &x[(b * ci + c) * hw..(b * ci + c + 1) * hw];
        for y in rows.clone() {
            let sy = (y as isize + dy) as usize;
            let sx0 = (xs.start as isize + dx) as usize;
            let d0 = b * hw + y * w + xs.start;
            row[d0..d0 + xs.len()].copy_from_slice(&xp[sy * w + sx0..sy * w + sx0 + xs.len()]);
        }
    }
}

impl<R: Real> Tensor<R> {
    /// Product of two matrices.
    pub fn matmul(&self, other: &Tensor<R>) -> Result<Tensor<R>> {
        let (&[m, k], &[k2, n]) = (self.shape(), other.shape()) else {
            return Err(GradError::Shape {
                op: "matmul",
                detail: format!("expected matrices, got {:?} and {:?}", self.shape(), other.shape()),
            });
        };
        if k != k2 {
            return Err(GradError::Shape {
                op: "matmul",
                detail: format!("inner extents differ: {:?} x {:?}", self.shape(), other.shape()),
            });
        }
        let (a, b) = (self.data(), other.data());
        let mut out = vec![R::zero(); m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = a[i * k + p];
                if av == R::zero() {
                    continue;
                }
                let brow = &b[p * n..(p + 1) * n];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        Ok(Tensor::record(vec![m, n], out, MatMulOp, vec![self.clone(), other.clone()]))
    }

    /// Stride-1 convolution with zero "same" padding; `weight` is (Co, Ci, k, k) with odd k.
    pub fn conv2d(&self, weight: &Tensor<R>) -> Result<Tensor<R>> {
        let [n, ci, h, w] = nchw("conv2d", self.shape())?;
        let [co, wci, k, k2] = nchw("conv2d", weight.shape())?;
        if wci != ci || k != k2 || k % 2 == 0 {
            return Err(GradError::Shape {
                op: "conv2d",
                detail: format!("input {:?} incompatible with kernel {:?}", self.shape(), weight.shape()),
            });
        }
        let hw = h * w;
        let q = ci * k * k;
        let span = n * hw;
        let (x, wt) = (self.data(), weight.data());
        let mut acc = vec![R::zero(); co * span];
        let mut row = vec![R::zero(); span];
        for c in 0..ci {
            for ky in 0..k {
                for kx in 0..k {
                    let r = (c * k + ky) * k + kx;
                    tap_row(x, n, ci, h, w, k, (c, ky, kx), &mut row);
                    for o in 0..co {
                        let wv = wt[o * q + r];
                        if wv == R::zero() {
                            continue;
                        }
                        for (a, &v) in acc[o * span..(o + 1) * span].iter_mut().zip(&row) {
                            *a += wv * v;
                        }
                    }
                }
            }
        }
        let mut out = vec![R::zero(); n * co * hw];
        for o in 0..co {
            for b in 0..n {
                out[(b * co + o) * hw..(b * co + o + 1) * hw].copy_from_slice(&acc[o * span + b * hw..o * span + (b + 1) * hw]);
            }
        }
        Ok(Tensor::record(vec![n, co, h, w], out, Conv2dOp, vec![self.clone(), weight.clone()]))
    }

    /// Kernel gradient of [`conv2d`](Self::conv2d): correlates `self` (N, Ci, H, W)
    /// with `grad_out` (N, Co, H, W) into a (Co, Ci, k, k) kernel.
    pub fn conv2d_weight(&self, grad_out: &Tensor<R>, k: usize) -> Result<Tensor<R>> {
        let [n, ci, h, w] = nchw("conv2d_weight", self.shape())?;
        let [gn, co, gh, gw] = nchw("conv2d_weight", grad_out.shape())?;
        if (gn, gh, gw) != (n, h, w) || k.is_multiple_of(2) {
            return Err(GradError::Shape {
                op: "conv2d_weight",
                detail: format!("input {:?} vs output grad {:?} (k={})", self.shape(), grad_out.shape(), k),
            });
        }
        let hw = h * w;
        let q = ci * k * k;
        let span = n * hw;
        let (x, g) = (self.data(), grad_out.data());
        let mut gt = vec![R::zero(); co * span];
        for o in 0..co {
            for b in 0..n {
                gt[o * span + b * hw..o * span + (b + 1) * hw].copy_from_slice(&g[(b * co + o) * hw..(b * co + o + 1) * hw]);
            }
        }
        let mut row = vec![R::zero(); span];
        let mut out = vec![R::zero(); co * q];
        for c in 0..ci {
            for ky in 0..k {
                for kx in 0..k {
                    let r = (c * k + ky) * k + kx;
                    tap_row(x, n, ci, h, w, k, (c, ky, kx), &mut row);
                    for o in 0..co {
                        out[o * q + r] = gt[o * span..(o + 1) * span].iter().zip(&row).fold(R::zero(), |a, (&u, &v)| a + u * v);
                    }
                }
            }
        }
        Ok(Tensor::record(
            vec![co, ci, k, k],
            out,
            Conv2dWeightOp { k },
            vec![self.clone(), grad_out.clone()],
        ))
    }

    /// Swaps the channel axes of a kernel and rotates each tap grid by 180°.
    pub fn flip_kernel(&self) -> Result<Tensor<R>> {
        let [co, ci, k, k2] = nchw("flip_kernel", self.shape())?;
        if k != k2 {
            return Err(GradError::Shape {
                op: "flip_kernel",
                detail: format!("non-square kernel {:?}", self.shape()),
            });
        }
        let src = self.data();
        let mut out = vec![R::zero(); src.len()];
        for o in 0..co {
            for c in 0..ci {
                for a in 0..k {
                    for b in 0..k {
                        out[((c * co + o) * k + a) * k + b] = src[((o * ci + c) * k + (k - 1 - a)) * k + (k - 1 - b)];
                    }
                }
            }
        }
        Ok(Tensor::record(vec![ci, co, k, k], out, FlipKernelOp, vec![self.clone()]))
    }

    /// 2×2 average pooling with stride 2; odd trailing rows/columns are dropped.
    pub fn avg_pool2d(&self) -> Result<Tensor<R>> {
        let [n, c, h, w] = nchw("avg_pool2d", self.shape())?;
        let (oh, ow) = (h / 2, w / 2);
        if oh == 0 || ow == 0 {
            return Err(GradError::Shape {
                op: "avg_pool2d",
                detail: format!("spatial extent of {:?} too small", self.shape()),
            });
        }
        let quarter = R::lit(0.25);
        let src = self.data();
        let mut out = vec![R::zero(); n * c * oh * ow];
        for plane in 0..n * c {
            let xp = &src[plane * h * w..(plane + 1) * h * w];
            let op = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
            for i in 0..oh {
                for j in 0..ow {
                    let r0 = 2 * i * w + 2 * j;
                    let r1 = r0 + w;
                    op[i * ow + j] = (xp[r0] + xp[r0 + 1] + xp[r1] + xp[r1 + 1]) * quarter;
                }
            }
        }
        Ok(Tensor::record(vec![n, c, oh, ow], out, AvgPoolOp, vec![self.clone()]))
    }

    /// Adjoint of [`avg_pool2d`](Self::avg_pool2d) onto an (h, w) plane.
    pub fn avg_pool2d_adjoint(&self, h: usize, w: usize) -> Result<Tensor<R>> {
        let [n, c, oh, ow] = nchw("avg_pool2d_adjoint", self.shape())?;
        if h / 2 != oh || w / 2 != ow {
            return Err(GradError::Shape {
                op: "avg_pool2d_adjoint",
                detail: format!("{:?} is not the pooled size of {}x{}", self.shape(), h, w),
            });
        }
        let quarter = R::lit(0.25);
        let src = self.data();
        let mut out = vec![R::zero(); n * c * h * w];
        for plane in 0..n * c {
            let gp = &src[plane * oh * ow..(plane + 1) * oh * ow];
            let xp = &mut out[plane * h * w..(plane + 1) * h * w];
            for i in 0..oh {
                for j in 0..ow {
                    let v = gp[i * ow + j] * quarter;
                    let r0 = 2 * i * w + 2 * j;
                    xp[r0] = v;
                    xp[r0 + 1] = v;
                    xp[r0 + w] = v;
                    xp[r0 + w + 1] = v;
                }
            }
        }
        Ok(Tensor::record(vec![n, c, h, w], out, AvgPoolAdjointOp { h, w }, vec![self.clone()]))
    }
}
