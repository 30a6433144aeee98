use std::cell::Cell;
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use super::{GradError, Real, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Returns whether newly created op outputs are recorded on the graph.
pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Restores the previous recording mode on drop.
pub(crate) struct GradModeGuard {
    previous: bool,
}

impl GradModeGuard {
    pub(crate) fn set(enabled: bool) -> Self {
        let previous = GRAD_ENABLED.with(|g| g.replace(enabled));
        GradModeGuard { previous }
    }
}

impl Drop for GradModeGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.previous));
    }
}

/// Runs `f` without recording any graph nodes.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    let _guard = GradModeGuard::set(false);
    f()
}

/// Backward rule of a recorded op.
///
/// Implementations must express every vector-Jacobian product through the
/// public tensor ops so that the backward pass can itself be recorded.
pub(crate) trait Op<R: Real> {
    fn name(&self) -> &'static str;

    /// Returns one entry per input; `None` means no gradient flows there.
    fn vjp(
        &self,
        inputs: &[Tensor<R>],
        output: &Tensor<R>,
        grad: &Tensor<R>,
    ) -> Result<Vec<Option<Tensor<R>>>>;
}

pub(crate) struct GradFn<R: Real> {
    pub(crate) op: Box<dyn Op<R>>,
    pub(crate) inputs: Vec<Tensor<R>>,
}

pub(crate) struct Inner<R: Real> {
    pub(crate) id: u64,
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Vec<R>,
    pub(crate) requires_grad: bool,
    pub(crate) grad_fn: Option<GradFn<R>>,
}

impl<R: Real> Drop for Inner<R> {
    // Long unrolled graphs would otherwise drop recursively one node per frame.
    fn drop(&mut self) {
        let mut stack: Vec<Tensor<R>> = match self.grad_fn.take() {
            Some(f) => f.inputs,
            None => return,
        };
        while let Some(t) = stack.pop() {
            if let Ok(mut inner) = Rc::try_unwrap(t.0) {
                if let Some(f) = inner.grad_fn.take() {
                    stack.extend(f.inputs);
                }
            }
        }
    }
}

/// Dense row-major n-dimensional array with an optional place in a
/// reverse-mode graph. Cloning is cheap and shares the underlying node.
pub struct Tensor<R: Real>(pub(crate) Rc<Inner<R>>);

impl<R: Real> Clone for Tensor<R> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<R: Real> fmt::Debug for Tensor<R> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<R> = self.0.data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("op", &self.0.grad_fn.as_ref().map(|g| g.op.name()))
            .field("data", &preview)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<R: Real> Tensor<R> {
    fn build(shape: Vec<usize>, data: Vec<R>, requires_grad: bool, grad_fn: Option<GradFn<R>>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor(Rc::new(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            grad_fn,
        }))
    }

    /// Creates a leaf that does not take part in differentiation.
    pub fn from_vec(data: Vec<R>, shape: &[usize]) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(GradError::Shape {
                op: "from_vec",
                detail: format!("shape {:?} needs {} values, got {}", shape, numel(shape), data.len()),
            });
        }
        Ok(Self::build(shape.to_vec(), data, false, None))
    }

    /// Creates a differentiable leaf.
    pub fn param(data: Vec<R>, shape: &[usize]) -> Result<Self> {
        let t = Self::from_vec(data, shape)?;
        Ok(t.into_param())
    }

    pub fn scalar(v: R) -> Self {
        Self::build(Vec::new(), vec![v], false, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::build(shape.to_vec(), vec![R::zero(); numel(shape)], false, None)
    }

    pub fn full(shape: &[usize], v: R) -> Self {
        Self::build(shape.to_vec(), vec![v; numel(shape)], false, None)
    }

    pub fn from_f64(data: &[f64], shape: &[usize]) -> Result<Self> {
        Self::from_vec(data.iter().map(|&v| R::lit(v)).collect(), shape)
    }

    /// Recorded output of an op. The node is kept only when recording is on
    /// and some input requires a gradient.
    pub(crate) fn record(
        shape: Vec<usize>,
        data: Vec<R>,
        op: impl Op<R> + 'static,
        inputs: Vec<Tensor<R>>,
    ) -> Self {
        let requires_grad = is_grad_enabled() && inputs.iter().any(|t| t.requires_grad());
        let grad_fn = requires_grad.then(|| GradFn { op: Box::new(op), inputs });
        Self::build(shape, data, requires_grad, grad_fn)
    }

    fn into_param(self) -> Self {
        match Rc::try_unwrap(self.0) {
            Ok(mut inner) => {
                inner.requires_grad = true;
                inner.grad_fn = None;
                let data = std::mem::take(&mut inner.data);
                let shape = std::mem::take(&mut inner.shape);
                Self::build(shape, data, true, None)
            }
            Err(rc) => Self::build(rc.shape.clone(), rc.data.clone(), true, None),
        }
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn data(&self) -> &[R] {
        &self.0.data
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.0.shape.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.grad_fn.is_none()
    }

    pub(crate) fn grad_fn(&self) -> Option<&GradFn<R>> {
        self.0.grad_fn.as_ref()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> R {
        self.0.data[0]
    }

    pub fn to_vec(&self) -> Vec<R> {
        self.0.data.clone()
    }

    /// Copy of the value, cut from the graph.
    pub fn detach(&self) -> Self {
        Self::build(self.0.shape.clone(), self.0.data.clone(), false, None)
    }

    /// Copy of the value as a fresh differentiable leaf.
    pub fn detach_param(&self) -> Self {
        Self::build(self.0.shape.clone(), self.0.data.clone(), true, None)
    }

    pub fn all_finite(&self) -> bool {
        self.0.data.iter().all(|v| v.is_finite())
    }
}
