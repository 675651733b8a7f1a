//! Training losses: masked photometric MSE, background penalty outside the
//! two-view visual hull, ray alignment of Gaussian means (with its analytic
//! gradient), scale-normalized depth, and their weighted composition.

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{CameraIntrinsics, CameraPose, DepthMap, GaussianField, Mask, RgbImage, Vec3};

/// Distance below which a mean is considered to coincide with the camera center.
pub const CENTER_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_g: f64,
    pub lambda_bg: f64,
    pub lambda_d: f64,
    /// Opacity weight inside the background penalty.
    pub alpha_bg: f64,
}

impl LossWeights {
    /// Warm-up stage weights.
    pub fn warmup() -> Self {
        Self {
            lambda_g: 0.3,
            lambda_bg: 0.3,
            lambda_d: 0.5,
            alpha_bg: 0.5,
        }
    }

    /// Main stage: the depth term is dropped.
    pub fn main_stage() -> Self {
        Self {
            lambda_d: 0.0,
            ..Self::warmup()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_g, self.lambda_bg, self.lambda_d, self.alpha_bg];
        if all.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::arg("loss weights must be non-negative"));
        }
        Ok(())
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::warmup()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub masked: f64,
    pub bg: f64,
    pub ray: f64,
    pub depth: f64,
}

/// One logged loss breakdown.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub t: usize,
    #[serde(rename = "L_masked")]
    pub masked: f64,
    #[serde(rename = "L_bg")]
    pub bg: f64,
    #[serde(rename = "L_ray")]
    pub ray: f64,
    #[serde(rename = "L_depth")]
    pub depth: f64,
    #[serde(rename = "L_total")]
    pub total: f64,
}

impl LossRecord {
    pub fn new(t: usize, parts: LossParts, weights: &LossWeights) -> Result<Self> {
        Ok(Self {
            t,
            masked: parts.masked,
            bg: parts.bg,
            ray: parts.ray,
            depth: parts.depth,
            total: total_loss(&parts, weights)?,
        })
    }
}

/// Mean over mask pixels of the squared RGB distance (channels summed).
pub fn masked_mse(render: &RgbImage, target: &RgbImage, mask: &Mask) -> Result<f64> {
    if !render.same_shape(target) || !render.same_shape(mask) {
        return Err(Error::arg("image and mask shapes differ"));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for ((a, b), &m) in render.as_slice().iter().zip(target.as_slice()).zip(mask.as_slice()) {
        if m {
            sum += a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::UndefinedLoss("mask is empty".into()));
    }
    Ok(sum / n as f64)
}

fn inside_mask(mean: &Vec3, pose: &CameraPose, k: &CameraIntrinsics, mask: &Mask) -> bool {
    let cam = pose.transform_point(mean);
    let Some((u, v)) = k.project(&cam) else {
        return false;
    };
    if !(u >= 0.0 && v >= 0.0) {
        return false;
    }
    let (x, y) = (u.floor() as usize, v.floor() as usize);
    x < mask.width() && y < mask.height() && *mask.get(x, y)
}

/// Indices of primitives outside the visual hull of the two masks: a primitive
/// is outside when its projected mean misses the mask (or lies behind the
/// camera) in at least one view.
pub fn outside_visual_hull(
    field: &GaussianField,
    mask_ref: &Mask,
    pose_ref: &CameraPose,
    mask_t: &Mask,
    pose_t: &CameraPose,
    k: &CameraIntrinsics,
) -> Vec<usize> {
    field
        .primitives()
        .iter()
        .enumerate()
        .filter(|(_, p)| {
            let mu = p.mean();
            !inside_mask(&mu, pose_ref, k, mask_ref) || !inside_mask(&mu, pose_t, k, mask_t)
        })
        .map(|(i, _)| i)
        .collect()
}

/// Mean of `‖c‖² + alpha_bg·o` over primitives outside the visual hull; zero if none.
pub fn bg_penalty(
    field: &GaussianField,
    mask_ref: &Mask,
    pose_ref: &CameraPose,
    mask_t: &Mask,
    pose_t: &CameraPose,
    k: &CameraIntrinsics,
    alpha_bg: f64,
) -> f64 {
    let outside = outside_visual_hull(field, mask_ref, pose_ref, mask_t, pose_t, k);
    if outside.is_empty() {
        return 0.0;
    }
    let prims = field.primitives();
    let sum: f64 = outside
        .iter()
        .map(|&i| {
            let c = prims[i].color_rgb();
            c.iter().map(|v| v * v).sum::<f64>() + alpha_bg * f64::from(prims[i].opacity)
        })
        .sum();
    sum / outside.len() as f64
}

/// World-space unit ray from the camera center through the center of pixel `index` (row-major).
pub fn pixel_ray(pose: &CameraPose, k: &CameraIntrinsics, index: usize) -> Vec3 {
    let (x, y) = (index % k.width, index / k.width);
    pose.rotation.transpose() * k.ray(x as f64 + 0.5, y as f64 + 0.5)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RayAlignment {
    pub value: f64,
    /// Positions (into the assignment) of means that coincide with the camera center.
    pub degenerate: Vec<usize>,
}

fn check_assignment(means: &[Vec3], pixels: &[usize], k: &CameraIntrinsics) -> Result<()> {
    if means.len() != pixels.len() {
        return Err(Error::arg("one pixel per mean is required"));
    }
    if means.is_empty() {
        return Err(Error::UndefinedLoss("no assigned pixels".into()));
    }
    if let Some(&p) = pixels.iter().find(|&&p| p >= k.pixel_count()) {
        return Err(Error::arg(format!("pixel index {p} outside the image")));
    }
    Ok(())
}

/// Mean of `1 − r_p · r̂_p` where `r_p` is the pixel ray and `r̂_p` the unit
/// direction from the camera center to the assigned mean. Means at the center
/// contribute 2 and are reported.
pub fn ray_alignment(means: &[Vec3], pose: &CameraPose, k: &CameraIntrinsics, pixels: &[usize]) -> Result<RayAlignment> {
    check_assignment(means, pixels, k)?;
    let center = pose.center();
    let mut sum = 0.0;
    let mut degenerate = Vec::new();
    for (i, (mu, &p)) in means.iter().zip(pixels).enumerate() {
        let d = mu - center;
        let n = d.norm();
        if n < CENTER_EPS {
            sum += 2.0;
            degenerate.push(i);
            continue;
        }
        sum += 1.0 - pixel_ray(pose, k, p).dot(&(d / n));
    }
    Ok(RayAlignment {
        value: sum / means.len() as f64,
        degenerate,
    })
}

/// Ray alignment over a field, with primitive `k` assigned to `pixels[k]`.
pub fn ray_alignment_field(
    field: &GaussianField,
    pose: &CameraPose,
    k: &CameraIntrinsics,
    pixels: &[usize],
) -> Result<RayAlignment> {
    let means: Vec<Vec3> = field.primitives().iter().map(|p| p.mean()).collect();
    ray_alignment(&means, pose, k, pixels)
}

/// Gradient of [`ray_alignment`] with respect to each mean.
pub fn ray_alignment_grad(means: &[Vec3], pose: &CameraPose, k: &CameraIntrinsics, pixels: &[usize]) -> Result<Vec<Vec3>> {
    check_assignment(means, pixels, k)?;
    let center = pose.center();
    let scale = 1.0 / means.len() as f64;
    means
        .iter()
        .zip(pixels)
        .enumerate()
        .map(|(i, (mu, &p))| {
            let d = mu - center;
            let n = d.norm();
            if n < CENTER_EPS {
                return Err(Error::GradientUndefined(format!("mean {i} coincides with the camera center")));
            }
            let dir = d / n;
            let proj = Matrix3::identity() - dir * dir.transpose();
            Ok(-(proj * pixel_ray(pose, k, p)) * (scale / n))
        })
        .collect()
}

/// Mean over the mask of `(d/d̄ − z/z̄)²`, with `d̄`, `z̄` the masked means.
pub fn normalized_depth(pred: &DepthMap, gt: &DepthMap, mask: &Mask) -> Result<f64> {
    if !pred.same_shape(gt) || !pred.same_shape(mask) {
        return Err(Error::arg("depth and mask shapes differ"));
    }
    let pairs: Vec<(f64, f64)> = pred
        .as_slice()
        .iter()
        .zip(gt.as_slice())
        .zip(mask.as_slice())
        .filter(|(_, &m)| m)
        .map(|((&d, &z), _)| (d, z))
        .collect();
    if pairs.is_empty() {
        return Err(Error::UndefinedLoss("mask is empty".into()));
    }
    let n = pairs.len() as f64;
    let d_mean = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let z_mean = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    if !(d_mean >= 1e-9 && z_mean >= 1e-9) {
        return Err(Error::UndefinedLoss(format!("mean depth too small (pred {d_mean}, gt {z_mean})")));
    }
    Ok(pairs.iter().map(|(d, z)| (d / d_mean - z / z_mean).powi(2)).sum::<f64>() / n)
}

/// `L_masked + λ_bg·L_bg + λ_g·(L_ray + λ_d·L_depth)`.
pub fn total_loss(parts: &LossParts, w: &LossWeights) -> Result<f64> {
    for (name, v) in [("L_masked", parts.masked), ("L_bg", parts.bg), ("L_ray", parts.ray), ("L_depth", parts.depth)] {
        if !v.is_finite() {
            return Err(Error::NonFinite { part: name });
        }
    }
    let photo = parts.masked + w.lambda_bg * parts.bg;
    let geo = parts.ray + w.lambda_d * parts.depth;
    Ok(photo + w.lambda_g * geo)
}

/// Largest relative disagreement between `grad` and central differences of
/// `f` at `point`. The denominator is floored at 1e-8.
pub fn fd_check(f: impl Fn(&[f64]) -> f64, grad: impl Fn(&[f64]) -> Vec<f64>, point: &[f64], h: f64) -> Result<f64> {
    if !(h > 0.0) {
        return Err(Error::arg("step must be positive"));
    }
    let analytic = grad(point);
    if analytic.len() != point.len() {
        return Err(Error::arg("gradient length differs from the point"));
    }
    let mut x = point.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + h;
        let fp = f(&x);
        x[i] = orig - h;
        let fm = f(&x);
        x[i] = orig;
        let numeric = (fp - fm) / (2.0 * h);
        let denom = numeric.abs().max(analytic[i].abs()).max(1e-8);
        worst = worst.max((numeric - analytic[i]).abs() / denom);
    }
    Ok(worst)
}
