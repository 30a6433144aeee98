use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::LabeledDataset;
use crate::models::InputShape;
use crate::{Error, Result};

/// Gaussian-blob classification data.
///
/// Every class has a prototype: a blob with its own center, radius and
/// per-channel amplitude over a constant background. Samples add i.i.d.
/// pixel noise of standard deviation `cluster_std`, are clipped to [0, 1] and
/// rounded to 32-bit values so they survive storage unchanged.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub channels: usize,
    pub image_size: usize,
    pub cluster_std: f64,
    pub seed: u64,
}

const BACKGROUND: f64 = 0.2;

/// Returns `(train, test)`; both come from the same prototypes, labels cycle
/// through the classes.
pub fn synthetic_blobs(spec: &SyntheticSpec) -> Result<(LabeledDataset, LabeledDataset)> {
    if spec.classes < 2 || spec.train_per_class == 0 || spec.channels == 0 || spec.image_size == 0 {
        return Err(Error::Data(format!("degenerate synthetic spec {spec:?}")));
    }
    if !(spec.cluster_std >= 0.0) {
        return Err(Error::Data(format!("invalid cluster std {}", spec.cluster_std)));
    }
    let noise = Normal::new(0.0, spec.cluster_std)
        .map_err(|_| Error::Data(format!("invalid cluster std {}", spec.cluster_std)))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let s = spec.image_size;
    let last = (s - 1) as f64;
    let prototypes: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| {
            let cy = rng.random_range(0.0..=last);
            let cx = rng.random_range(0.0..=last);
            let radius = rng.random_range(0.12..0.3) * s as f64;
            let amps: Vec<f64> = (0..spec.channels).map(|_| rng.random_range(0.1..0.8)).collect();
            let mut img = Vec::with_capacity(spec.channels * s * s);
            for &a in &amps {
                for y in 0..s {
                    for x in 0..s {
                        let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                        img.push(BACKGROUND + a * (-d2 / (2.0 * radius * radius)).exp());
                    }
                }
            }
            img
        })
        .collect();
    let shape = InputShape { channels: spec.channels, height: s, width: s };
    let draw = |per_class: usize, rng: &mut ChaCha8Rng| {
        let n = per_class * spec.classes;
        let mut images = Vec::with_capacity(n * shape.numel());
        let labels: Vec<usize> = (0..n).map(|i| i % spec.classes).collect();
        for &l in &labels {
            images.extend(prototypes[l].iter().map(|&p| (p + noise.sample(rng)).clamp(0.0, 1.0) as f32 as f64));
        }
        LabeledDataset::new(images, shape, labels, spec.classes)
    };
    let train = draw(spec.train_per_class, &mut rng)?;
    let test = draw(spec.test_per_class.max(1), &mut rng)?;
    Ok((train, test))
}
