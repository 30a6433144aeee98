//! Plain network training shared by teachers and evaluation students.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{augment, AugmentParams, AugmentPolicy, LabeledDataset};
use crate::gradcore::{grad, no_grad, Real, Tensor};
use crate::models::ArchSpec;
use crate::{Error, Result};

/// Minibatch SGD with heavy-ball momentum: `v ← m·v + g + wd·θ`, `θ ← θ − lr·v`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig { epochs: 20, lr: 0.01, momentum: 0.9, weight_decay: 0.0, batch_size: 64 }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1) and weight decay non-negative, got {} and {}",
                self.momentum, self.weight_decay
            )));
        }
        Ok(())
    }
}

/// Trains `init` on `data` and returns the final parameters.
///
/// `on_epoch(e, θ)` runs after every epoch `e = 1..=epochs`. Shuffling and
/// augmentation draws come from `seed`.
pub fn train_sgd<R: Real>(
    spec: &ArchSpec,
    init: Vec<R>,
    data: &LabeledDataset,
    sgd: &SgdConfig,
    augmentation: Option<(&AugmentPolicy, &AugmentParams)>,
    seed: u64,
    mut on_epoch: impl FnMut(usize, &[R]) -> Result<()>,
) -> Result<Vec<R>> {
    sgd.validate()?;
    let layout = spec.layout()?;
    if init.len() != layout.total() {
        return Err(Error::Layout(format!("{} parameters for {} ({})", init.len(), spec.label(), layout.total())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lr, m, wd) = (R::lit(sgd.lr), R::lit(sgd.momentum), R::lit(sgd.weight_decay));
    let mut theta = init;
    let mut velocity = vec![R::zero(); theta.len()];
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 1..=sgd.epochs {
        order.shuffle(&mut rng);
        for (b, batch) in order.chunks(sgd.batch_size).enumerate() {
            let params = Tensor::param(theta.clone(), &[theta.len()])?;
            let mut x = data.images_tensor::<R>(batch);
            if let Some((policy, params)) = augmentation {
                x = augment(&x, policy, params, &mut rng)?;
            }
            let logits = spec.forward(&layout, &params, &x)?;
            let loss = logits.softmax_cross_entropy(&data.onehot_tensor(batch))?;
            if !loss.item().is_finite() {
                return Err(Error::Runtime(format!(
                    "non-finite training loss {} at epoch {epoch}, batch {b}",
                    loss.item()
                )));
            }
            let g = grad(&loss, &[&params], false)?.into_vec().remove(0);
            for ((t, v), &gi) in theta.iter_mut().zip(velocity.iter_mut()).zip(g.data()) {
                *v = m * *v + gi + wd * *t;
                *t -= lr * *v;
            }
        }
        on_epoch(epoch, &theta)?;
    }
    Ok(theta)
}

/// Fraction of `data` classified correctly by `params`.
pub fn accuracy<R: Real>(spec: &ArchSpec, params: &[R], data: &LabeledDataset) -> Result<f64> {
    let layout = spec.layout()?;
    let params = Tensor::from_vec(params.to_vec(), &[params.len()])?;
    let indices: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0usize;
    no_grad(|| -> Result<()> {
        for chunk in indices.chunks(256) {
            let logits = spec.forward(&layout, &params, &data.images_tensor::<R>(chunk))?;
            let classes = spec.classes;
            for (row, &i) in chunk.iter().enumerate() {
                let scores = &logits.data()[row * classes..(row + 1) * classes];
                let best = (0..classes).fold(0, |b, c| if scores[c] > scores[b] { c } else { b });
                correct += usize::from(best == data.labels[i]);
            }
        }
        Ok(())
    })?;
    Ok(correct as f64 / data.len() as f64)
}
