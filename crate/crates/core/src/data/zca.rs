use nalgebra::{DMatrix, SymmetricEigen};

use super::LabeledDataset;
use crate::{Error, Result};

/// Zero-phase whitening `x ↦ M (x − mean)` with `M = E diag(1/√(s+λ)) Eᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct ZcaTransform {
    pub mean: Vec<f64>,
    /// Row-major `D × D`.
    pub matrix: Vec<f64>,
    pub lambda: f64,
}

impl ZcaTransform {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// The default regularizer: a tenth of the mean per-dimension variance.
    pub fn auto_lambda(data: &LabeledDataset) -> f64 {
        let (_, cov) = covariance(data);
        0.1 * cov.trace() / cov.nrows() as f64
    }

    /// Fits on the training images. `lambda = None` uses [`Self::auto_lambda`].
    pub fn fit(data: &LabeledDataset, lambda: Option<f64>) -> Result<Self> {
        let (mean, cov) = covariance(data);
        let d = cov.nrows();
        let lambda = lambda.unwrap_or_else(|| 0.1 * cov.trace() / d as f64);
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::Data(format!("ZCA regularizer must be finite and non-negative, got {lambda}")));
        }
        let eig = SymmetricEigen::new(cov);
        let top = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b));
        let floor = top * d as f64 * f64::EPSILON;
        let mut scaled = eig.eigenvectors.clone();
        for (k, &s) in eig.eigenvalues.iter().enumerate() {
            let s = s.max(0.0) + lambda;
            if s <= floor {
                return Err(Error::Data(format!(
                    "covariance is rank deficient (eigenvalue {k} is zero); use a positive ZCA regularizer"
                )));
            }
            let f = 1.0 / s.sqrt();
            scaled.column_mut(k).scale_mut(f);
        }
        let m = &scaled * eig.eigenvectors.transpose();
        // Symmetrize away rounding from the product.
        let m = (&m + m.transpose()) * 0.5;
        let mut matrix = Vec::with_capacity(d * d);
        for r in 0..d {
            for c in 0..d {
                matrix.push(m[(r, c)]);
            }
        }
        Ok(ZcaTransform { mean, matrix, lambda })
    }

    /// Whitens flattened images (`len` a multiple of `D`).
    pub fn apply_flat(&self, images: &[f64]) -> Result<Vec<f64>> {
        let d = self.dim();
        if !images.len().is_multiple_of(d) {
            return Err(Error::Data(format!("{} values do not divide into images of {d}", images.len())));
        }
        let mut out = vec![0.0; images.len()];
        let mut centered = vec![0.0; d];
        for (src, dst) in images.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            for ((c, &x), &m) in centered.iter_mut().zip(src).zip(&self.mean) {
                *c = x - m;
            }
            for (r, o) in dst.iter_mut().enumerate() {
                let row = &self.matrix[r * d..(r + 1) * d];
                *o = row.iter().zip(&centered).map(|(a, b)| a * b).sum();
            }
        }
        Ok(out)
    }

    pub fn apply(&self, data: &LabeledDataset) -> Result<LabeledDataset> {
        if data.shape.numel() != self.dim() {
            return Err(Error::Data(format!(
                "ZCA fitted on dimension {}, images have {}",
                self.dim(),
                data.shape.numel()
            )));
        }
        Ok(LabeledDataset { images: self.apply_flat(&data.images)?, ..data.clone() })
    }
}

fn covariance(data: &LabeledDataset) -> (Vec<f64>, DMatrix<f64>) {
    let d = data.shape.numel();
    let n = data.len();
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, &x) in mean.iter_mut().zip(data.image(i)) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered = DMatrix::from_fn(n, d, |i, j| data.images[i * d + j] - mean[j]);
    let cov = centered.tr_mul(&centered) / n as f64;
    (mean, cov)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::InputShape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dataset(images: Vec<f64>, n: usize, d: usize) -> LabeledDataset {
        LabeledDataset::new(images, InputShape { channels: 1, height: 1, width: d }, vec![0; n], 1).unwrap()
    }

    /// Data whose sample covariance is exactly the identity and whose mean is zero.
    fn white(n: usize, d: usize, seed: u64) -> LabeledDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = DMatrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0));
        for j in 0..d {
            let m = x.column(j).mean();
            x.column_mut(j).add_scalar_mut(-m);
        }
        let q = x.qr().q();
        let x = q * (n as f64).sqrt();
        dataset((0..n * d).map(|k| x[(k / d, k % d)]).collect(), n, d)
    }

    fn correlated(n: usize, d: usize, seed: u64) -> LabeledDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mix = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        let z = DMatrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0));
        let x = z * mix;
        dataset((0..n * d).map(|k| x[(k / d, k % d)] + 0.5).collect(), n, d)
    }

    #[test]
    fn white_data_gives_identity() {
        let data = white(40, 6, 3);
        let t = ZcaTransform::fit(&data, Some(0.0)).unwrap();
        for r in 0..6 {
            for c in 0..6 {
                let want = if r == c { 1.0 } else { 0.0 };
                assert!((t.matrix[r * 6 + c] - want).abs() < 1e-6, "entry ({r},{c}) = {}", t.matrix[r * 6 + c]);
            }
        }
    }

    #[test]
    fn whitened_covariance_is_identity() {
        let data = correlated(200, 8, 11);
        let t = ZcaTransform::fit(&data, Some(0.0)).unwrap();
        let out = t.apply(&data).unwrap();
        let (mean, cov) = covariance(&out);
        assert!(mean.iter().all(|m| m.abs() < 1e-9));
        for r in 0..8 {
            for c in 0..8 {
                let want = if r == c { 1.0 } else { 0.0 };
                assert!((cov[(r, c)] - want).abs() < 1e-4, "cov ({r},{c}) = {}", cov[(r, c)]);
            }
        }
    }

    #[test]
    fn large_regularizer_shrinks_towards_scaled_identity() {
        let data = correlated(50, 4, 2);
        let lambda = 1e8;
        let t = ZcaTransform::fit(&data, Some(lambda)).unwrap();
        let s = 1.0 / lambda.sqrt();
        for r in 0..4 {
            for c in 0..4 {
                let want = if r == c { s } else { 0.0 };
                assert!((t.matrix[r * 4 + c] - want).abs() < 1e-3 * s);
            }
        }
    }

    #[test]
    fn matrix_is_symmetric_and_auto_lambda_positive() {
        let data = correlated(30, 5, 9);
        let t = ZcaTransform::fit(&data, None).unwrap();
        assert!(t.lambda > 0.0);
        assert!((t.lambda - ZcaTransform::auto_lambda(&data)).abs() < 1e-15);
        for r in 0..5 {
            for c in 0..5 {
                assert_eq!(t.matrix[r * 5 + c], t.matrix[c * 5 + r]);
            }
        }
    }

    #[test]
    fn linear_on_centered_inputs() {
        let data = correlated(30, 5, 4);
        let t = ZcaTransform::fit(&data, None).unwrap();
        let x: Vec<f64> = (0..5).map(|i| t.mean[i] + (i as f64).sin()).collect();
        let y: Vec<f64> = (0..5).map(|i| t.mean[i] + (i as f64 * 0.7).cos()).collect();
        let (a, b) = (2.5, -0.75);
        let combo: Vec<f64> = (0..5).map(|i| t.mean[i] + a * (x[i] - t.mean[i]) + b * (y[i] - t.mean[i])).collect();
        let (tx, ty, tc) = (t.apply_flat(&x).unwrap(), t.apply_flat(&y).unwrap(), t.apply_flat(&combo).unwrap());
        for i in 0..5 {
            assert!((tc[i] - (a * tx[i] + b * ty[i])).abs() < 1e-10);
        }
    }

    #[test]
    fn rank_deficient_needs_regularizer() {
        let data = dataset(vec![1.0, 1.0, 2.0, 2.0, 3.0, 3.0], 3, 2);
        let err = ZcaTransform::fit(&data, Some(0.0)).unwrap_err();
        assert!(err.to_string().contains("rank deficient"), "{err}");
        assert!(ZcaTransform::fit(&data, Some(0.1)).is_ok());
        assert!(ZcaTransform::fit(&data, Some(-1.0)).is_err());
    }
}
