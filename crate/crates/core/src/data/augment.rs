//! Differentiable augmentation. One transform is drawn per call and shared by
//! every image of the batch. Geometric transforms are sparse plane maps,
//! cutout is a constant mask, so gradients reach the input pixels.

use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::gradcore::{PlaneMap, Real, Result as GradResult, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugmentOp {
    Flip,
    CropWithPad,
    Cutout,
    Scale,
    Rotate,
}

impl AugmentOp {
    pub const ALL: [AugmentOp; 5] =
        [AugmentOp::Flip, AugmentOp::CropWithPad, AugmentOp::Cutout, AugmentOp::Scale, AugmentOp::Rotate];

    pub fn as_str(self) -> &'static str {
        match self {
            AugmentOp::Flip => "flip",
            AugmentOp::CropWithPad => "crop_with_pad",
            AugmentOp::Cutout => "cutout",
            AugmentOp::Scale => "scale",
            AugmentOp::Rotate => "rotate",
        }
    }
}

/// An ordered set of operations; the empty policy is written `none`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AugmentPolicy {
    pub ops: Vec<AugmentOp>,
}

impl AugmentPolicy {
    pub fn none() -> Self {
        AugmentPolicy::default()
    }

    pub fn is_none(&self) -> bool {
        self.ops.is_empty()
    }
}

impl FromStr for AugmentPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut ops = Vec::new();
        for token in s.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            if token == "none" {
                continue;
            }
            let op = AugmentOp::ALL.into_iter().find(|op| op.as_str() == token).ok_or_else(|| {
                Error::Config(format!(
                    "unknown augmentation `{token}`; expected none, flip, crop_with_pad, cutout, scale or rotate"
                ))
            })?;
            if !ops.contains(&op) {
                ops.push(op);
            }
        }
        Ok(AugmentPolicy { ops })
    }
}

impl fmt::Display for AugmentPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.ops.is_empty() {
            return f.write_str("none");
        }
        let names: Vec<&str> = self.ops.iter().map(|op| op.as_str()).collect();
        f.write_str(&names.join(","))
    }
}

/// Ranges for the random draws. `None` sizes derive from the image height.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentParams {
    pub flip_prob: f64,
    pub pad: Option<usize>,
    pub hole: Option<usize>,
    pub scale: (f64, f64),
    pub rotate_degrees: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        AugmentParams { flip_prob: 0.5, pad: None, hole: None, scale: (0.8, 1.2), rotate_degrees: 15.0 }
    }
}

/// One sampled transform of an `h × w` plane.
#[derive(Debug, Clone, PartialEq)]
pub enum Transform {
    Map(Rc<PlaneMap>),
    /// Multiplicative `h × w` mask of zeros and ones.
    Mask { h: usize, w: usize, keep: Vec<f64> },
}

fn flip_map(h: usize, w: usize) -> PlaneMap {
    let entries = (0..h).flat_map(|y| (0..w).map(move |x| (y * w + x, y * w + (w - 1 - x), 1.0))).collect();
    PlaneMap { in_h: h, in_w: w, out_h: h, out_w: w, entries }
}

fn shift_map(h: usize, w: usize, dy: isize, dx: isize) -> PlaneMap {
    let mut entries = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = (y as isize + dy, x as isize + dx);
            if (0..h as isize).contains(&sy) && (0..w as isize).contains(&sx) {
                entries.push((y * w + x, sy as usize * w + sx as usize, 1.0));
            }
        }
    }
    PlaneMap { in_h: h, in_w: w, out_h: h, out_w: w, entries }
}

/// Bilinear resampling with zero fill, `src = inv · (dst − c) + c` about the
/// plane center.
fn affine_map(h: usize, w: usize, inv: [[f64; 2]; 2]) -> PlaneMap {
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut entries = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let (ry, rx) = (y as f64 - cy, x as f64 - cx);
            let sy = inv[0][0] * ry + inv[0][1] * rx + cy;
            let sx = inv[1][0] * ry + inv[1][1] * rx + cx;
            let (y0, x0) = (sy.floor(), sx.floor());
            let (fy, fx) = (sy - y0, sx - x0);
            for (oy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
                for (ox, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
                    let (py, px) = (y0 + oy, x0 + ox);
                    let weight = wy * wx;
                    if weight > 0.0 && py >= 0.0 && px >= 0.0 && py < h as f64 && px < w as f64 {
                        entries.push((y * w + x, py as usize * w + px as usize, weight));
                    }
                }
            }
        }
    }
    PlaneMap { in_h: h, in_w: w, out_h: h, out_w: w, entries }
}

/// Draws one transform per policy operation, in policy order.
pub fn sample_transforms(
    policy: &AugmentPolicy,
    params: &AugmentParams,
    h: usize,
    w: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Transform> {
    let mut out = Vec::with_capacity(policy.ops.len());
    for &op in &policy.ops {
        match op {
            AugmentOp::Flip => {
                if rng.random::<f64>() < params.flip_prob {
                    out.push(Transform::Map(Rc::new(flip_map(h, w))));
                }
            }
            AugmentOp::CropWithPad => {
                let pad = params.pad.unwrap_or((h / 8).max(1)) as i64;
                let dy = rng.random_range(-pad..=pad) as isize;
                let dx = rng.random_range(-pad..=pad) as isize;
                out.push(Transform::Map(Rc::new(shift_map(h, w, dy, dx))));
            }
            AugmentOp::Cutout => {
                let hole = params.hole.unwrap_or((h / 4).max(1));
                let cy = rng.random_range(0..h) as isize;
                let cx = rng.random_range(0..w) as isize;
                let half = (hole / 2) as isize;
                let mut keep = vec![1.0; h * w];
                for y in (cy - half).max(0)..(cy - half + hole as isize).min(h as isize) {
                    for x in (cx - half).max(0)..(cx - half + hole as isize).min(w as isize) {
                        keep[y as usize * w + x as usize] = 0.0;
                    }
                }
                out.push(Transform::Mask { h, w, keep });
            }
            AugmentOp::Scale => {
                let (lo, hi) = params.scale;
                let sy = rng.random_range(lo..=hi);
                let sx = rng.random_range(lo..=hi);
                out.push(Transform::Map(Rc::new(affine_map(h, w, [[1.0 / sy, 0.0], [0.0, 1.0 / sx]]))));
            }
            AugmentOp::Rotate => {
                let max = params.rotate_degrees.to_radians();
                let t = rng.random_range(-max..=max);
                let (s, c) = t.sin_cos();
                out.push(Transform::Map(Rc::new(affine_map(h, w, [[c, s], [-s, c]]))));
            }
        }
    }
    out
}

/// Applies sampled transforms to an `(N, C, H, W)` batch.
pub fn apply_transforms<R: Real>(batch: &Tensor<R>, transforms: &[Transform]) -> GradResult<Tensor<R>> {
    let mut x = batch.clone();
    for t in transforms {
        x = match t {
            Transform::Map(map) => x.plane_map(map)?,
            Transform::Mask { h, w, keep } => {
                let mask = Tensor::from_vec(keep.iter().map(|&k| R::lit(k)).collect(), &[*h, *w])?;
                x.mul(&mask)?
            }
        };
    }
    Ok(x)
}

/// Samples and applies one batch-wide transform.
pub fn augment<R: Real>(
    batch: &Tensor<R>,
    policy: &AugmentPolicy,
    params: &AugmentParams,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<R>> {
    if policy.is_none() {
        return Ok(batch.clone());
    }
    let shape = batch.shape();
    if shape.len() != 4 {
        return Err(Error::Data(format!("augment expects an (N, C, H, W) batch, got {shape:?}")));
    }
    let transforms = sample_transforms(policy, params, shape[2], shape[3], rng);
    Ok(apply_transforms(batch, &transforms)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcore::grad_check;
    use rand::SeedableRng;

    fn batch(n: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * 2 * 8 * 8).map(|_| rng.random::<f64>()).collect();
        Tensor::from_vec(data, &[n, 2, 8, 8]).unwrap()
    }

    fn all_ops() -> AugmentPolicy {
        "flip,crop_with_pad,cutout,scale,rotate".parse().unwrap()
    }

    #[test]
    fn none_is_identity() {
        let x = batch(3, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y = augment(&x, &AugmentPolicy::none(), &AugmentParams::default(), &mut rng).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn flip_twice_is_identity() {
        let x = batch(2, 2);
        let flip = [Transform::Map(Rc::new(flip_map(8, 8)))];
        let y = apply_transforms(&apply_transforms(&x, &flip).unwrap(), &flip).unwrap();
        assert_eq!(y.data(), x.data());
        let once = apply_transforms(&x, &flip).unwrap();
        assert_eq!(once.data()[0], x.data()[7]);
    }

    #[test]
    fn cutout_gradient_is_masked() {
        let policy: AugmentPolicy = "cutout".parse().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let transforms = sample_transforms(&policy, &AugmentParams::default(), 8, 8, &mut rng);
        let Transform::Mask { keep, .. } = &transforms[0] else { panic!("cutout draws a mask") };
        assert!(keep.contains(&0.0));

        let weights = batch(1, 9);
        let f = |xs: &[Tensor<f64>]| {
            let y = apply_transforms(&xs[0], &transforms)?;
            Ok(y.mul(&weights)?.sum())
        };
        let x = batch(1, 3);
        assert!(grad_check(f, std::slice::from_ref(&x), 1e-6).unwrap() < 1e-6);

        let leaf = x.detach_param();
        let y = apply_transforms(&leaf, &transforms).unwrap().mul(&weights).unwrap().sum();
        let g = crate::gradcore::grad(&y, &[&leaf], false).unwrap().into_vec().remove(0);
        for c in 0..2 {
            for (p, &k) in keep.iter().enumerate() {
                let gv = g.data()[c * 64 + p];
                if k == 0.0 {
                    assert_eq!(gv, 0.0);
                } else {
                    assert_eq!(gv, weights.data()[c * 64 + p]);
                }
            }
        }
    }

    #[test]
    fn geometric_transforms_pass_grad_check() {
        let weights = batch(1, 4);
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let transforms = sample_transforms(&all_ops(), &AugmentParams::default(), 8, 8, &mut rng);
            let f = |xs: &[Tensor<f64>]| {
                let y = apply_transforms(&xs[0], &transforms)?;
                Ok(y.mul(&weights)?.sum())
            };
            assert!(grad_check(f, &[batch(1, seed + 10)], 1e-6).unwrap() < 1e-6);
        }
    }

    #[test]
    fn shapes_are_preserved_and_draws_are_seeded() {
        for policy in ["flip", "crop_with_pad", "cutout", "scale", "rotate", "flip,scale,rotate"] {
            let policy: AugmentPolicy = policy.parse().unwrap();
            let x = batch(4, 6);
            let a = augment(&x, &policy, &AugmentParams::default(), &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
            let b = augment(&x, &policy, &AugmentParams::default(), &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
            assert_eq!(a.shape(), x.shape());
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn one_draw_is_shared_by_the_batch() {
        let single = batch(1, 12);
        let mut twice = single.to_vec();
        twice.extend(single.to_vec());
        let pair = Tensor::from_vec(twice, &[2, 2, 8, 8]).unwrap();
        let y = augment(&pair, &all_ops(), &AugmentParams::default(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let (first, second) = y.data().split_at(128);
        assert_eq!(first, second);
    }

    #[test]
    fn zero_rotation_and_unit_scale_are_identity() {
        let x = batch(1, 7);
        let id = [Transform::Map(Rc::new(affine_map(8, 8, [[1.0, 0.0], [0.0, 1.0]])))];
        assert_eq!(apply_transforms(&x, &id).unwrap().data(), x.data());
    }

    #[test]
    fn policy_parsing() {
        assert!("none".parse::<AugmentPolicy>().unwrap().is_none());
        assert_eq!(all_ops().to_string(), "flip,crop_with_pad,cutout,scale,rotate");
        let err = "flip,jitter".parse::<AugmentPolicy>().unwrap_err().to_string();
        assert!(err.contains("jitter"), "{err}");
    }
}
