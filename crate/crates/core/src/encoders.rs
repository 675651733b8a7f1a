//! Deterministic stand-ins for the learned encoders: appearance keys, a
//! pose-oracle direction estimate, and depth back-projected value tokens.

use nalgebra::{DMatrix, Matrix3, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::{direction_key_from_angles, TokenBlock};
use crate::types::{CameraIntrinsics, CameraPose, FrameObservation, GaussianPrimitive, Rgb, Vec3};

/// Length of the latent key descriptor: mean RGB, RGB std, patch center, mask fraction.
pub const KEY_DESCRIPTOR_DIM: usize = 9;
/// Length of a homogeneous patch summary (see [`PatchSummary::to_descriptor`]).
pub const SUMMARY_DIM: usize = 14;
/// Seed of the shared feature projection.
pub const PROJECTION_SEED: u64 = 0x5eed_f00d;

/// Pose-oracle orientation estimate. `gamma` is carried but unused.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DirectionEstimate {
    pub theta: f64,
    pub phi: f64,
    pub gamma: f64,
    pub sigma: f64,
}

impl DirectionEstimate {
    pub fn key(&self) -> Vec3 {
        direction_key_from_angles(self.theta, self.phi).expect("finite angles")
    }
}

/// Fixed orthonormal embedding of short descriptors into `feature_dim` dims.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    basis: DMatrix<f64>,
}

impl FeatureMap {
    pub fn new(feature_dim: usize, seed: u64) -> Result<Self> {
        if feature_dim < SUMMARY_DIM {
            return Err(Error::arg(format!("feature_dim must be at least {SUMMARY_DIM}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw = DMatrix::from_fn(feature_dim, SUMMARY_DIM, |_, _| rng.gen_range(-1.0..1.0));
        Ok(Self { basis: raw.qr().q() })
    }

    pub fn feature_dim(&self) -> usize {
        self.basis.nrows()
    }

    /// Embeds a descriptor of at most [`SUMMARY_DIM`] entries (missing entries are zero).
    pub fn encode(&self, descriptor: &[f64]) -> Vec<f64> {
        debug_assert!(descriptor.len() <= SUMMARY_DIM);
        (0..self.basis.nrows())
            .map(|r| descriptor.iter().enumerate().map(|(c, d)| self.basis[(r, c)] * d).sum())
            .collect()
    }

    /// Inverse of [`encode`](Self::encode) on the embedded subspace.
    pub fn decode(&self, feature: &[f64]) -> [f64; SUMMARY_DIM] {
        let mut out = [0.0; SUMMARY_DIM];
        for (c, o) in out.iter_mut().enumerate() {
            *o = feature.iter().enumerate().map(|(r, f)| self.basis[(r, c)] * f).sum();
        }
        out
    }
}

/// Patch layout of a `width × height` image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGrid {
    pub patch: usize,
    pub cols: usize,
    pub rows: usize,
}

impl PatchGrid {
    pub fn new(width: usize, height: usize, patch: usize) -> Result<Self> {
        if patch == 0 || !width.is_multiple_of(patch) || !height.is_multiple_of(patch) {
            return Err(Error::arg(format!("{width}x{height} is not divisible into {patch}px patches")));
        }
        Ok(Self {
            patch,
            cols: width / patch,
            rows: height / patch,
        })
    }

    pub fn count(&self) -> usize {
        self.cols * self.rows
    }

    pub fn pixels_per_patch(&self) -> usize {
        self.patch * self.patch
    }

    /// Pixel coordinates of patch `i`, row-major within the patch.
    pub fn pixels(&self, i: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        let (px, py) = ((i % self.cols) * self.patch, (i / self.cols) * self.patch);
        (0..self.patch * self.patch).map(move |j| (px + j % self.patch, py + j / self.patch))
    }
}

/// Appearance descriptor of every patch, in patch order.
pub fn key_descriptors(frame: &FrameObservation, patch_size: usize) -> Result<Vec<[f64; KEY_DESCRIPTOR_DIM]>> {
    let grid = PatchGrid::new(frame.width(), frame.height(), patch_size)?;
    let n = grid.pixels_per_patch() as f64;
    let (w, h) = (frame.width() as f64, frame.height() as f64);
    Ok((0..grid.count())
        .map(|i| {
            let mut sum = [0.0; 3];
            let mut masked = 0usize;
            for (x, y) in grid.pixels(i) {
                let c = frame.rgb.get(x, y);
                for k in 0..3 {
                    sum[k] += c[k];
                }
                masked += usize::from(*frame.mask.get(x, y));
            }
            let mean = sum.map(|s| s / n);
            let mut sq = [0.0; 3];
            for (x, y) in grid.pixels(i) {
                let c = frame.rgb.get(x, y);
                for k in 0..3 {
                    sq[k] += (c[k] - mean[k]) * (c[k] - mean[k]);
                }
            }
            let mut d = [0.0; KEY_DESCRIPTOR_DIM];
            for k in 0..3 {
                d[k] = mean[k];
                d[3 + k] = (sq[k] / n).sqrt();
            }
            let (px, py) = ((i % grid.cols) * patch_size, (i / grid.cols) * patch_size);
            d[6] = (px as f64 + patch_size as f64 / 2.0) / w;
            d[7] = (py as f64 + patch_size as f64 / 2.0) / h;
            d[8] = masked as f64 / n;
            d
        })
        .collect())
}

/// P×C latent keys: unit-length patch descriptors embedded by `map` and scaled by `key_scale`.
pub fn latent_key_stub(frame: &FrameObservation, patch_size: usize, map: &FeatureMap, key_scale: f64) -> Result<TokenBlock> {
    let descriptors = key_descriptors(frame, patch_size)?;
    let c = map.feature_dim();
    let mut out = TokenBlock::zeros(descriptors.len(), c);
    for (r, d) in descriptors.iter().enumerate() {
        let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        let unit = d.map(|v| if norm > 0.0 { v / norm } else { 0.0 });
        for (o, v) in out.row_mut(r).iter_mut().zip(map.encode(&unit)) {
            *o = key_scale * v;
        }
    }
    Ok(out)
}

/// Orientation of the canonical +Z axis as seen from the camera of
/// `gt_relative_pose`, tilted by an angle drawn uniformly from `[0, noise_deg]`.
pub fn direction_oracle(gt_relative_pose: &CameraPose, noise_deg: f64, seed: u64) -> Result<DirectionEstimate> {
    gt_relative_pose.validate()?;
    if !(noise_deg >= 0.0 && noise_deg.is_finite()) {
        return Err(Error::arg("noise_deg must be finite and >= 0"));
    }
    let axis = gt_relative_pose.rotation * Vec3::z();
    let dir = if noise_deg > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let angle = rng.gen_range(0.0..=noise_deg).to_radians();
        let spin = rng.gen_range(0.0..std::f64::consts::TAU);
        let helper = if axis.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
        let u = axis.cross(&helper).normalize();
        let v = axis.cross(&u);
        let tilt = u * spin.cos() + v * spin.sin();
        (axis * angle.cos() + tilt * angle.sin()).normalize()
    } else {
        axis
    };
    Ok(DirectionEstimate {
        theta: dir.y.atan2(dir.x),
        phi: dir.z.clamp(-1.0, 1.0).acos(),
        gamma: 0.0,
        sigma: (1.0 - noise_deg / 90.0).clamp(0.0, 1.0),
    })
}

/// Coarse description of the object surface seen through one patch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchSummary {
    /// Masked pixel fraction of the patch; zero for an empty patch.
    pub weight: f64,
    pub centroid: Vec3,
    pub color: Rgb,
    pub opacity: f64,
    pub covariance: Matrix3<f64>,
}

impl PatchSummary {
    pub fn empty() -> Self {
        Self {
            weight: 0.0,
            centroid: Vec3::zeros(),
            color: [0.0; 3],
            opacity: 0.0,
            covariance: Matrix3::zeros(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.weight <= 1e-9
    }

    /// Homogeneous form: every entry but the first is multiplied by the
    /// weight, so convex combinations of descriptors decode to weighted means.
    pub fn to_descriptor(&self) -> [f64; SUMMARY_DIM] {
        let w = self.weight;
        let m = self.covariance + self.centroid * self.centroid.transpose();
        [
            w,
            w * self.centroid.x,
            w * self.centroid.y,
            w * self.centroid.z,
            w * self.color[0],
            w * self.color[1],
            w * self.color[2],
            w * self.opacity,
            w * m[(0, 0)],
            w * m[(0, 1)],
            w * m[(0, 2)],
            w * m[(1, 1)],
            w * m[(1, 2)],
            w * m[(2, 2)],
        ]
    }

    pub fn from_descriptor(d: &[f64; SUMMARY_DIM]) -> Self {
        let w = d[0];
        if !(w > 1e-9) || d.iter().any(|v| !v.is_finite()) {
            return Self::empty();
        }
        let centroid = Vec3::new(d[1], d[2], d[3]) / w;
        let second = Matrix3::new(d[8], d[9], d[10], d[9], d[11], d[12], d[10], d[12], d[13]) / w;
        Self {
            weight: w.min(1.0),
            centroid,
            color: [d[4] / w, d[5] / w, d[6] / w].map(|c| c.clamp(0.0, 1.0)),
            opacity: (d[7] / w).clamp(0.0, 1.0),
            covariance: second - centroid * centroid.transpose(),
        }
    }

    /// Expands into `n` primitives laid out over the two widest principal axes.
    /// Empty summaries expand to invisible primitives.
    pub fn expand(&self, n: usize) -> Vec<GaussianPrimitive> {
        if self.is_empty() {
            return vec![invisible_primitive(); n];
        }
        let eig = SymmetricEigen::new((self.covariance + self.covariance.transpose()) * 0.5);
        let mut order = [0, 1, 2];
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let axis = |k: usize| eig.eigenvectors.column(order[k]).into_owned();
        let half = |k: usize| (3.0 * eig.eigenvalues[order[k]].max(0.0)).sqrt();
        let (a1, a2) = (half(0), half(1));
        let side = (n as f64).sqrt().ceil().max(1.0) as usize;
        let step = |a: f64| 2.0 * a / side as f64;
        let floor = 1e-4;
        let scale = Vec3::new(
            (0.6 * step(a1)).max(floor),
            (0.6 * step(a2)).max(floor),
            (half(2) / 3.0f64.sqrt()).max(0.2 * 0.6 * step(a2)).max(floor),
        );
        let rot = nalgebra::Rotation3::from_basis_unchecked(&[axis(0), axis(1), axis(0).cross(&axis(1))]);
        let q = nalgebra::UnitQuaternion::from_rotation_matrix(&rot);
        (0..n)
            .map(|j| {
                let (gx, gy) = (j % side, j / side);
                let u = -a1 + step(a1) * (gx as f64 + 0.5);
                let v = -a2 + step(a2) * (gy as f64 + 0.5);
                let mu = self.centroid + axis(0) * u + axis(1) * v;
                GaussianPrimitive::new(mu, [q.w, q.i, q.j, q.k], scale, self.color, self.opacity)
                    .unwrap_or_else(|_| invisible_primitive())
            })
            .collect()
    }
}

/// Zero-opacity placeholder at the origin.
pub fn invisible_primitive() -> GaussianPrimitive {
    GaussianPrimitive::isotropic(Vec3::zeros(), 1e-3, [0.0; 3], 0.0).expect("valid constants")
}

/// Canonical-space point behind every masked pixel, as `(pixel index, point)`.
/// `pose` maps canonical coordinates into the frame's camera.
pub fn backproject(frame: &FrameObservation, pose: &CameraPose, k: &CameraIntrinsics) -> Result<Vec<(usize, Vec3)>> {
    let depth = frame
        .depth
        .as_ref()
        .ok_or_else(|| Error::Unsupported("back-projection needs a depth map".into()))?;
    if !depth.same_shape(&frame.mask) || frame.width() != k.width || frame.height() != k.height {
        return Err(Error::arg("frame, depth and intrinsics sizes differ"));
    }
    let inv = pose.inverse();
    let w = frame.width();
    Ok(frame
        .mask
        .as_slice()
        .iter()
        .zip(depth.as_slice())
        .enumerate()
        .filter(|(_, (&m, &d))| m && d > 0.0 && d.is_finite())
        .map(|(i, (_, &d))| {
            let cam = k.unproject((i % w) as f64 + 0.5, (i / w) as f64 + 0.5, d);
            (i, inv.transform_point(&cam))
        })
        .collect())
}

/// Per-patch summaries of the back-projected masked pixels.
pub fn patch_summaries(frame: &FrameObservation, pose: &CameraPose, k: &CameraIntrinsics, patch_size: usize) -> Result<Vec<PatchSummary>> {
    let grid = PatchGrid::new(frame.width(), frame.height(), patch_size)?;
    let points = backproject(frame, pose, k)?;
    let w = frame.width();
    let mut acc = vec![(0usize, Vec3::zeros(), [0.0; 3], Matrix3::zeros()); grid.count()];
    for (i, p) in points {
        let (x, y) = (i % w, i / w);
        let slot = &mut acc[(y / patch_size) * grid.cols + x / patch_size];
        let c = frame.rgb.get(x, y);
        slot.0 += 1;
        slot.1 += p;
        for (s, v) in slot.2.iter_mut().zip(c) {
            *s += v;
        }
        slot.3 += p * p.transpose();
    }
    let area = grid.pixels_per_patch() as f64;
    Ok(acc
        .into_iter()
        .map(|(n, sum, color, second)| {
            if n == 0 {
                return PatchSummary::empty();
            }
            let nf = n as f64;
            let centroid = sum / nf;
            PatchSummary {
                weight: nf / area,
                centroid,
                color: color.map(|c| c / nf),
                opacity: 1.0,
                covariance: second / nf - centroid * centroid.transpose(),
            }
        })
        .collect())
}

/// P×C value tokens for a frame plus the raw summaries they encode.
pub fn value_stub(
    frame: &FrameObservation,
    pose: &CameraPose,
    k: &CameraIntrinsics,
    patch_size: usize,
    map: &FeatureMap,
) -> Result<(TokenBlock, Vec<PatchSummary>)> {
    let summaries = patch_summaries(frame, pose, k, patch_size)?;
    let mut values = TokenBlock::zeros(summaries.len(), map.feature_dim());
    for (r, s) in summaries.iter().enumerate() {
        values.row_mut(r).copy_from_slice(&map.encode(&s.to_descriptor()));
    }
    Ok((values, summaries))
}

/// Decodes every row of a readout block into a patch summary.
pub fn decode_summaries(block: &TokenBlock, map: &FeatureMap) -> Vec<PatchSummary> {
    block.iter_rows().map(|row| PatchSummary::from_descriptor(&map.decode(row))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::RenderSettings;
    use crate::synth::{make_object, render_sequence, sample_trajectory, ObjectKind, TrajectoryParams};
    use crate::types::Grid;

    fn frame_from(rgb: Vec<Rgb>, mask: Vec<bool>, depth: Option<Vec<f64>>, w: usize, h: usize) -> FrameObservation {
        FrameObservation {
            rgb: Grid::from_vec(w, h, rgb).unwrap(),
            mask: Grid::from_vec(w, h, mask).unwrap(),
            depth: depth.map(|d| Grid::from_vec(w, h, d).unwrap()),
            t: 0,
        }
    }

    fn random_frame(rng: &mut ChaCha8Rng, w: usize, h: usize) -> FrameObservation {
        let rgb = (0..w * h).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
        let mask = (0..w * h).map(|_| rng.gen_bool(0.6)).collect();
        let depth = (0..w * h).map(|_| rng.gen_range(1.0..3.0)).collect();
        frame_from(rgb, mask, Some(depth), w, h)
    }

    #[test]
    fn feature_map_is_orthonormal() {
        let map = FeatureMap::new(32, PROJECTION_SEED).unwrap();
        let d: Vec<f64> = (0..SUMMARY_DIM).map(|i| i as f64 * 0.3 - 1.0).collect();
        let back = map.decode(&map.encode(&d));
        for (a, b) in d.iter().zip(back) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(FeatureMap::new(8, 1).is_err());
        assert_eq!(map, FeatureMap::new(32, PROJECTION_SEED).unwrap());
    }

    #[test]
    fn uniform_frame_has_equal_appearance() {
        let f = frame_from(vec![[0.2, 0.4, 0.6]; 64], vec![true; 64], None, 8, 8);
        let d = key_descriptors(&f, 4).unwrap();
        assert_eq!(d.len(), 4);
        for p in &d {
            assert_eq!(&p[..6], &d[0][..6]);
            assert!(p[3..6].iter().all(|s| s.abs() < 1e-9));
        }
        assert!(latent_key_stub(&f, 3, &FeatureMap::new(16, 0).unwrap(), 1.0).is_err());
    }

    #[test]
    fn identical_frames_identical_keys() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = random_frame(&mut rng, 16, 16);
        let map = FeatureMap::new(24, PROJECTION_SEED).unwrap();
        assert_eq!(latent_key_stub(&f, 4, &map, 2.0).unwrap(), latent_key_stub(&f.clone(), 4, &map, 2.0).unwrap());
    }

    #[test]
    fn distinct_descriptors_never_collide() {
        let map = FeatureMap::new(64, PROJECTION_SEED).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut descs = Vec::new();
        let mut keys = Vec::new();
        for _ in 0..1000 {
            let f = random_frame(&mut rng, 8, 8);
            let d = key_descriptors(&f, 8).unwrap()[0];
            keys.push(latent_key_stub(&f, 8, &map, 1.0).unwrap().row(0).to_vec());
            descs.push(d);
        }
        for i in 0..descs.len() {
            for j in 0..i {
                let dd = descs[i].iter().zip(&descs[j]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                let kd = keys[i].iter().zip(&keys[j]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                if dd > 1e-9 {
                    assert!(kd > 1e-9, "collision between {i} and {j}");
                }
            }
        }
    }

    #[test]
    fn oracle_noise_free_and_identity() {
        let est = direction_oracle(&CameraPose::identity(), 0.0, 1).unwrap();
        assert_eq!((est.phi, est.sigma), (0.0, 1.0));
        assert!((est.key() - Vec3::z()).norm() < 1e-15);

        let pose = CameraPose::look_at(Vec3::new(2.0, 0.5, 1.0), Vec3::zeros(), Vec3::z()).unwrap();
        let est = direction_oracle(&pose, 0.0, 9).unwrap();
        assert!((est.key() - pose.rotation * Vec3::z()).norm() < 1e-12);
        assert!((0.0..=std::f64::consts::PI).contains(&est.phi));
    }

    #[test]
    fn oracle_error_bounded_by_noise() {
        let pose = CameraPose::look_at(Vec3::new(-1.0, 2.0, 0.3), Vec3::zeros(), Vec3::z()).unwrap();
        let truth = pose.rotation * Vec3::z();
        for seed in 0..200 {
            let noise = (seed % 10) as f64 * 9.0;
            let est = direction_oracle(&pose, noise, seed).unwrap();
            let err = est.key().dot(&truth).clamp(-1.0, 1.0).acos().to_degrees();
            assert!(err <= noise + 1e-9, "{err} > {noise}");
            assert!((est.sigma - (1.0 - noise / 90.0)).abs() < 1e-12);
        }
        let est = direction_oracle(&pose, 90.0, 0).unwrap();
        assert_eq!(est.sigma, 0.0);
        assert_eq!(crate::memory::temperature(est.sigma), 2.5);
        assert_eq!(direction_oracle(&pose, 120.0, 0).unwrap().sigma, 0.0);
        assert!(direction_oracle(&pose, -1.0, 0).is_err());
    }

    #[test]
    fn empty_and_single_pixel_patches() {
        let k = CameraIntrinsics::from_focal_mm(35.0, 4, 4).unwrap();
        let mut mask = vec![false; 16];
        mask[5] = true;
        let f = frame_from(vec![[0.3, 0.6, 0.9]; 16], mask, Some(vec![2.0; 16]), 4, 4);
        let s = patch_summaries(&f, &CameraPose::identity(), &k, 2).unwrap();
        assert_eq!(s.len(), 4);
        assert!(s[0].weight > 0.0 && s[1..].iter().all(PatchSummary::is_empty));
        assert_eq!(s[1], PatchSummary::empty());
        let expect = k.unproject(1.5, 1.5, 2.0);
        assert!((s[0].centroid - expect).norm() < 1e-12);
        assert!(s[0].covariance.norm() < 1e-12);

        let no_depth = FrameObservation { depth: None, ..f };
        let map = FeatureMap::new(16, 0).unwrap();
        assert!(matches!(
            value_stub(&no_depth, &CameraPose::identity(), &k, 2, &map),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn summary_descriptor_round_trip_and_mixing() {
        let a = PatchSummary {
            weight: 0.5,
            centroid: Vec3::new(1.0, 2.0, 3.0),
            color: [0.1, 0.2, 0.3],
            opacity: 1.0,
            covariance: Matrix3::from_diagonal(&Vec3::new(0.01, 0.02, 0.0)),
        };
        let back = PatchSummary::from_descriptor(&a.to_descriptor());
        assert!((back.centroid - a.centroid).norm() < 1e-12);
        assert!((back.covariance - a.covariance).norm() < 1e-12);
        let b = PatchSummary {
            weight: 1.0,
            centroid: Vec3::new(-1.0, 0.0, 3.0),
            ..a
        };
        let mix: Vec<f64> = a.to_descriptor().iter().zip(b.to_descriptor()).map(|(x, y)| 0.5 * x + 0.5 * y).collect();
        let m = PatchSummary::from_descriptor(&mix.try_into().unwrap());
        // weights 0.25 and 0.5
        assert!((m.centroid - Vec3::new(-1.0 / 3.0, 2.0 / 3.0, 3.0)).norm() < 1e-12);
    }

    #[test]
    fn expand_counts_and_empty() {
        assert!(PatchSummary::empty().expand(5).iter().all(|p| p.opacity == 0.0));
        let s = PatchSummary {
            weight: 1.0,
            centroid: Vec3::new(0.0, 0.0, 2.0),
            color: [0.5; 3],
            opacity: 1.0,
            covariance: Matrix3::from_diagonal(&Vec3::new(0.01, 0.004, 0.0)),
        };
        let prims = s.expand(64);
        assert_eq!(prims.len(), 64);
        let mean: Vec3 = prims.iter().map(|p| p.mean()).sum::<Vec3>() / 64.0;
        assert!((mean - s.centroid).norm() < 1e-5);
        assert!(prims.iter().all(|p| (p.mean().z - 2.0).abs() < 1e-5));
    }

    #[test]
    fn sphere_backprojection_on_surface() {
        let obj = make_object(ObjectKind::Sphere, 1, 12000).unwrap();
        let params = TrajectoryParams {
            frames: 3,
            seed: 4,
            ..Default::default()
        };
        let tr = sample_trajectory(&params, Vec3::zeros(), 128, 128).unwrap();
        let frames = render_sequence(&obj, &tr, &RenderSettings::default()).unwrap();
        for (f, pose) in frames.iter().zip(&tr.poses) {
            let pts = backproject(f, pose, &tr.intrinsics).unwrap();
            assert!(!pts.is_empty());
            let k = &tr.intrinsics;
            let c = pose.center();
            let mut checked = 0;
            for (i, p) in &pts {
                let ray = pose.rotation.transpose() * k.ray((i % k.width) as f64 + 0.5, (i / k.width) as f64 + 0.5);
                // masked pixels whose ray misses the sphere are splat silhouette overhang
                if (c - ray * c.dot(&ray)).norm() < 1.0 {
                    assert!((p.norm() - 1.0).abs() <= 0.02, "pixel {i}: |p| = {}", p.norm());
                    checked += 1;
                }
            }
            assert!(checked * 10 > pts.len() * 9);
        }
    }
}
