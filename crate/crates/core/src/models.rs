//! Teacher/student architectures and the bridge between layered parameters
//! and the flat parameter vector used for trajectory matching.
//!
//! Parameters are laid out in definition order, each layer's weight before
//! its bias. The same order indexes snapshots, student parameters and the
//! adaptive weight vector.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::gradcore::{Real, Tensor, INSTANCE_NORM_EPS};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ArchKind {
    Mlp,
    ConvNet,
}

impl ArchKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ArchKind::Mlp => "mlp",
            ArchKind::ConvNet => "convnet",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct InputShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl InputShape {
    pub fn numel(&self) -> usize {
        self.channels * self.height * self.width
    }
}

/// Network description.
///
/// For `ConvNet`, `depth` is the number of conv blocks
/// (3×3 conv, instance norm with affine, ReLU, 2×2 average pool) and `width`
/// the filters per block. For `Mlp`, `depth` hidden ReLU layers of `width`
/// units each. Both end in a single linear layer producing logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ArchSpec {
    pub kind: ArchKind,
    pub depth: usize,
    pub width: usize,
    pub input: InputShape,
    pub classes: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSlot {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamSlot {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    slots: Vec<ParamSlot>,
    total: usize,
}

impl ParamLayout {
    /// Builds contiguous slots from `(name, shape)` pairs in order.
    pub fn new(entries: Vec<(String, Vec<usize>)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Layout("no layers".into()));
        }
        let mut slots = Vec::with_capacity(entries.len());
        let mut offset = 0;
        for (name, shape) in entries {
            let len: usize = shape.iter().product();
            if len == 0 {
                return Err(Error::Layout(format!("layer {name} with shape {shape:?} is empty")));
            }
            slots.push(ParamSlot { name, shape, offset });
            offset += len;
        }
        Ok(ParamLayout { slots, total: offset })
    }

    pub fn slots(&self) -> &[ParamSlot] {
        &self.slots
    }

    pub fn total(&self) -> usize {
        self.total
    }

    /// Name of the layer that owns flat index `p`.
    pub fn slot_of(&self, p: usize) -> Option<&ParamSlot> {
        let k = self.slots.partition_point(|s| s.offset <= p);
        self.slots.get(k.checked_sub(1)?).filter(|s| p < s.offset + s.len())
    }

    /// Per-layer tensors cut from a flat parameter tensor, still connected to it.
    pub fn views<R: Real>(&self, flat: &Tensor<R>) -> Result<Vec<Tensor<R>>> {
        if flat.shape() != [self.total] {
            return Err(Error::Layout(format!(
                "flat parameters have shape {:?}, layout needs [{}]",
                flat.shape(),
                self.total
            )));
        }
        self.slots
            .iter()
            .map(|s| Ok(flat.narrow(0, s.offset, s.len())?.reshape(&s.shape)?))
            .collect()
    }
}

/// One named layer tensor outside of any graph.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<R> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<R>,
}

/// All trainable parameters of a network as one vector plus its layout.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatParams<R> {
    pub values: Vec<R>,
    pub layout: ParamLayout,
}

impl<R: Real> FlatParams<R> {
    pub fn new(values: Vec<R>, layout: ParamLayout) -> Result<Self> {
        if values.len() != layout.total() {
            return Err(Error::Layout(format!(
                "{} values for a layout of {} parameters",
                values.len(),
                layout.total()
            )));
        }
        Ok(FlatParams { values, layout })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn to_tensor(&self) -> Tensor<R> {
        Tensor::from_vec(self.values.clone(), &[self.values.len()]).expect("length checked at construction")
    }

    pub fn unflatten(&self) -> Vec<LayerParams<R>> {
        self.layout
            .slots()
            .iter()
            .map(|s| LayerParams {
                name: s.name.clone(),
                shape: s.shape.clone(),
                data: self.values[s.offset..s.offset + s.len()].to_vec(),
            })
            .collect()
    }
}

/// Concatenates layers in the given order.
pub fn flatten<R: Real>(layers: &[LayerParams<R>]) -> Result<FlatParams<R>> {
    for l in layers {
        if l.data.len() != l.shape.iter().product::<usize>() {
            return Err(Error::Layout(format!(
                "layer {} holds {} values for shape {:?}",
                l.name,
                l.data.len(),
                l.shape
            )));
        }
    }
    let layout = ParamLayout::new(layers.iter().map(|l| (l.name.clone(), l.shape.clone())).collect())?;
    let values = layers.iter().flat_map(|l| l.data.iter().copied()).collect();
    FlatParams::new(values, layout)
}

impl ArchSpec {
    pub fn convnet(depth: usize, width: usize, input: InputShape, classes: usize) -> Self {
        ArchSpec { kind: ArchKind::ConvNet, depth, width, input, classes }
    }

    pub fn mlp(depth: usize, width: usize, input: InputShape, classes: usize) -> Self {
        ArchSpec { kind: ArchKind::Mlp, depth, width, input, classes }
    }

    /// Short identifier such as `convnet-d3-w128`.
    pub fn label(&self) -> String {
        format!("{}-d{}-w{}", self.kind.as_str(), self.depth, self.width)
    }

    pub fn validate(&self) -> Result<()> {
        let InputShape { channels, height, width } = self.input;
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::Spec(format!("empty input shape {:?}", self.input)));
        }
        if self.classes < 2 {
            return Err(Error::Spec(format!("need at least 2 classes, got {}", self.classes)));
        }
        match self.kind {
            ArchKind::ConvNet => {
                if self.depth == 0 {
                    return Err(Error::Spec("convnet depth must be at least 1".into()));
                }
                if self.width == 0 {
                    return Err(Error::Spec("convnet width must be positive".into()));
                }
                if (height >> self.depth) == 0 || (width >> self.depth) == 0 {
                    return Err(Error::Spec(format!(
                        "{}x{} input vanishes after {} poolings",
                        height, width, self.depth
                    )));
                }
            }
            ArchKind::Mlp => {
                if self.depth > 0 && self.width == 0 {
                    return Err(Error::Spec("mlp hidden width must be positive".into()));
                }
            }
        }
        Ok(())
    }

    fn feature_len(&self) -> usize {
        match self.kind {
            ArchKind::ConvNet => self.width * (self.input.height >> self.depth) * (self.input.width >> self.depth),
            ArchKind::Mlp => {
                if self.depth == 0 {
                    self.input.numel()
                } else {
                    self.width
                }
            }
        }
    }

    pub fn layout(&self) -> Result<ParamLayout> {
        self.validate()?;
        let mut entries = Vec::new();
        match self.kind {
            ArchKind::ConvNet => {
                let mut cin = self.input.channels;
                for b in 0..self.depth {
                    entries.push((format!("conv{b}.weight"), vec![self.width, cin, 3, 3]));
                    entries.push((format!("conv{b}.bias"), vec![self.width]));
                    entries.push((format!("norm{b}.weight"), vec![self.width]));
                    entries.push((format!("norm{b}.bias"), vec![self.width]));
                    cin = self.width;
                }
            }
            ArchKind::Mlp => {
                let mut fan_in = self.input.numel();
                for b in 0..self.depth {
                    entries.push((format!("fc{b}.weight"), vec![self.width, fan_in]));
                    entries.push((format!("fc{b}.bias"), vec![self.width]));
                    fan_in = self.width;
                }
            }
        }
        entries.push(("out.weight".into(), vec![self.classes, self.feature_len()]));
        entries.push(("out.bias".into(), vec![self.classes]));
        ParamLayout::new(entries)
    }

    pub fn param_count(&self) -> Result<usize> {
        Ok(self.layout()?.total())
    }

    /// Fresh parameters: weights uniform in ±sqrt(1/fan_in), biases zero,
    /// normalization scales one.
    pub fn init_params<R: Real>(&self, seed: u64) -> Result<FlatParams<R>> {
        let layout = self.layout()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = Vec::with_capacity(layout.total());
        for slot in layout.slots() {
            if slot.name.ends_with(".bias") {
                values.extend(std::iter::repeat_n(R::zero(), slot.len()));
            } else if slot.name.starts_with("norm") {
                values.extend(std::iter::repeat_n(R::one(), slot.len()));
            } else {
                let fan_in: usize = slot.shape[1..].iter().product();
                let bound = (1.0 / fan_in as f64).sqrt();
                values.extend((0..slot.len()).map(|_| R::lit(rng.random_range(-bound..bound))));
            }
        }
        FlatParams::new(values, layout)
    }

    /// Logits `(N, classes)` for an `(N, C, H, W)` batch, differentiable in
    /// both the flat parameter tensor and the batch.
    pub fn forward<R: Real>(&self, layout: &ParamLayout, params: &Tensor<R>, batch: &Tensor<R>) -> Result<Tensor<R>> {
        let InputShape { channels, height, width } = self.input;
        let n = match *batch.shape() {
            [n, c, h, w] if (c, h, w) == (channels, height, width) => n,
            _ => {
                return Err(Error::Spec(format!(
                    "batch of shape {:?} does not match input {}x{}x{}",
                    batch.shape(),
                    channels,
                    height,
                    width
                )))
            }
        };
        let layers = layout.views(params)?;
        let mut it = layers.into_iter();
        let mut next = || it.next().ok_or_else(|| Error::Layout(format!("layout does not fit {}", self.label())));
        let mut x = batch.clone();
        match self.kind {
            ArchKind::ConvNet => {
                let eps = R::lit(INSTANCE_NORM_EPS);
                let per_channel = [1, self.width, 1, 1];
                for _ in 0..self.depth {
                    let (w, b, gamma, beta) = (next()?, next()?, next()?, next()?);
                    x = x.conv2d(&w)?.add(&b.reshape(&per_channel)?)?;
                    x = x.instance_norm(eps)?.mul(&gamma.reshape(&per_channel)?)?.add(&beta.reshape(&per_channel)?)?;
                    x = x.relu().avg_pool2d()?;
                }
                x = x.reshape(&[n, self.feature_len()])?;
            }
            ArchKind::Mlp => {
                x = x.reshape(&[n, self.input.numel()])?;
                for _ in 0..self.depth {
                    let (w, b) = (next()?, next()?);
                    x = x.matmul(&w.transpose()?)?.add(&b)?.relu();
                }
            }
        }
        let (w, b) = (next()?, next()?);
        Ok(x.matmul(&w.transpose()?)?.add(&b)?)
    }
}
