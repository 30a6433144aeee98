use super::backward::grad;
use super::tensor::Tensor;
use super::{GradError, Result};

/// Worst relative error between the analytic gradient of `f` at `point`
/// and central finite differences with step `step`.
///
/// Each coordinate's error is `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn grad_check<F>(f: F, point: &[Tensor<f64>], step: f64) -> Result<f64>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let leaves: Vec<Tensor<f64>> = point.iter().map(|t| t.detach_param()).collect();
    let value = f(&leaves)?;
    if !value.item().is_finite() {
        return Err(GradError::Invalid(format!("function is not finite at the point: {}", value.item())));
    }
    let refs: Vec<&Tensor<f64>> = leaves.iter().collect();
    let analytic = grad(&value, &refs, false)?.into_vec();

    let mut worst = 0.0f64;
    for (input, base) in point.iter().enumerate() {
        for coord in 0..base.numel() {
            let eval_at = |delta: f64| -> Result<f64> {
                // Perturbed inputs stay differentiable leaves so that `f` may
                // itself take gradients (second-order checks).
                let mut shifted: Vec<Tensor<f64>> = point.iter().map(|t| t.detach_param()).collect();
                let mut data = base.to_vec();
                data[coord] += delta;
                shifted[input] = Tensor::param(data, base.shape())?;
                let v = f(&shifted)?.item();
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(GradError::NonFinite { input, coordinate: coord })
                }
            };
            let numeric = (eval_at(step)? - eval_at(-step)?) / (2.0 * step);
            let a = analytic[input].data()[coord];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
