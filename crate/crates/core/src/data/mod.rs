//! Datasets, whitening, the learnable distilled set and differentiable augmentation.

mod augment;
pub(crate) mod io;
mod synthetic;
mod zca;

pub use augment::{apply_transforms, augment, sample_transforms, AugmentOp, AugmentParams, AugmentPolicy, Transform};
pub use io::{dataset_digest, decode_dataset, encode_dataset, read_dataset, write_dataset, DatasetManifest};
pub use synthetic::{synthetic_blobs, SyntheticSpec};
pub use zca::ZcaTransform;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::gradcore::{Real, Tensor};
use crate::models::InputShape;
use crate::{Error, Result};

/// Images `(N, C, H, W)` with class labels. Values are kept in 64-bit and
/// converted to the working precision when tensors are built.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub images: Vec<f64>,
    pub shape: InputShape,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl LabeledDataset {
    pub fn new(images: Vec<f64>, shape: InputShape, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Data("dataset has no samples".into()));
        }
        if images.len() != labels.len() * shape.numel() {
            return Err(Error::Data(format!(
                "{} image values for {} samples of {}x{}x{}",
                images.len(),
                labels.len(),
                shape.channels,
                shape.height,
                shape.width
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Data(format!("label {bad} outside {classes} classes")));
        }
        Ok(LabeledDataset { images, shape, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let d = self.shape.numel();
        &self.images[i * d..(i + 1) * d]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Samples in the given order.
    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        let images = indices.iter().flat_map(|&i| self.image(i).iter().copied()).collect();
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        LabeledDataset { images, shape: self.shape, labels, classes: self.classes }
    }

    pub fn images_tensor<R: Real>(&self, indices: &[usize]) -> Tensor<R> {
        let d = self.shape.numel();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend(self.image(i).iter().map(|&v| R::lit(v)));
        }
        let s = self.shape;
        Tensor::from_vec(data, &[indices.len(), s.channels, s.height, s.width]).expect("sized by construction")
    }

    pub fn onehot_tensor<R: Real>(&self, indices: &[usize]) -> Tensor<R> {
        onehot(indices.iter().map(|&i| self.labels[i]), indices.len(), self.classes)
    }
}

pub(crate) fn onehot<R: Real>(labels: impl Iterator<Item = usize>, n: usize, classes: usize) -> Tensor<R> {
    let mut data = vec![R::zero(); n * classes];
    for (row, l) in labels.enumerate() {
        data[row * classes + l] = R::one();
    }
    Tensor::from_vec(data, &[n, classes]).expect("sized by construction")
}

/// Draws `per_class` distinct samples of every class, uniformly. Returned
/// indices are grouped by class (class 0 first), each group in draw order.
pub fn sample_per_class(data: &LabeledDataset, per_class: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<usize>>> {
    let mut by_class = vec![Vec::new(); data.classes];
    for (i, &l) in data.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    by_class
        .iter()
        .enumerate()
        .map(|(c, members)| {
            if members.len() < per_class {
                return Err(Error::Data(format!(
                    "class {c} has {} samples, {per_class} requested",
                    members.len()
                )));
            }
            Ok(index::sample(rng, members.len(), per_class).into_iter().map(|k| members[k]).collect())
        })
        .collect()
}

/// The learnable synthetic set: `ipc` images per class with fixed labels,
/// ordered by class.
#[derive(Debug, Clone, PartialEq)]
pub struct DistilledDataset<R> {
    pub images: Vec<R>,
    pub shape: InputShape,
    pub labels: Vec<usize>,
    pub ipc: usize,
    pub classes: usize,
}

impl<R: Real> DistilledDataset<R> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images_tensor(&self) -> Tensor<R> {
        let s = self.shape;
        Tensor::from_vec(self.images.clone(), &[self.len(), s.channels, s.height, s.width]).expect("sized by construction")
    }

    pub fn onehot_tensor(&self) -> Tensor<R> {
        onehot(self.labels.iter().copied(), self.len(), self.classes)
    }

    pub fn to_labeled(&self) -> LabeledDataset {
        LabeledDataset {
            images: self.images.iter().map(|v| v.as_f64()).collect(),
            shape: self.shape,
            labels: self.labels.clone(),
            classes: self.classes,
        }
    }

    /// Rebuilds a distilled set from a stored dataset; labels must be class-balanced.
    pub fn from_labeled(data: &LabeledDataset) -> Result<Self> {
        let counts = data.class_counts();
        let ipc = counts[0];
        if ipc == 0 || counts.iter().any(|&c| c != ipc) {
            return Err(Error::Data(format!("distilled set is not class-balanced: {counts:?}")));
        }
        Ok(DistilledDataset {
            images: data.images.iter().map(|&v| R::lit(v)).collect(),
            shape: data.shape,
            labels: data.labels.clone(),
            ipc,
            classes: data.classes,
        })
    }
}

/// Copies `ipc` random real samples per class as the initial distilled images.
pub fn init_distilled<R: Real>(original: &LabeledDataset, ipc: usize, seed: u64) -> Result<DistilledDataset<R>> {
    if ipc == 0 {
        return Err(Error::Data("ipc must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks: Vec<usize> = sample_per_class(original, ipc, &mut rng)?.into_iter().flatten().collect();
    let chosen = original.subset(&picks);
    Ok(DistilledDataset {
        images: chosen.images.iter().map(|&v| R::lit(v)).collect(),
        shape: original.shape,
        labels: chosen.labels,
        ipc,
        classes: original.classes,
    })
}
