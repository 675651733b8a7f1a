//! Domain types shared by every stage of the engine: Gaussian primitives and
//! fields, rigid camera poses, pinhole intrinsics and frame observations.
//!
//! Images are row-major with the origin at the top-left; pixel `(x, y)` has its
//! center at `(x + 0.5, y + 0.5)`.

use nalgebra::{Matrix3, Matrix4, Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Rgb = [f64; 3];

pub const WHITE: Rgb = [1.0, 1.0, 1.0];

/// Dense row-major 2D grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

pub type RgbImage = Grid<Rgb>;
pub type Mask = Grid<bool>;
pub type DepthMap = Grid<f64>;
pub type AlphaMap = Grid<f64>;

impl<T: Clone> Grid<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }
}

impl<T> Grid<T> {
    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::arg(format!(
                "grid of {width}x{height} needs {} cells, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn same_shape<U>(&self, other: &Grid<U>) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn get(&self, x: usize, y: usize) -> &T {
        &self.data[y * self.width + x]
    }

    pub fn get_mut(&mut self, x: usize, y: usize) -> &mut T {
        &mut self.data[y * self.width + x]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Grid<U> {
        Grid {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(f).collect(),
        }
    }
}

impl Mask {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&m| m).count()
    }
}

/// Subgroup tag of a primitive in a pipeline-produced field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum Subgroup {
    Mem = 0,
    Ref = 1,
    Src = 2,
}

impl Subgroup {
    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Subgroup::Mem),
            1 => Some(Subgroup::Ref),
            2 => Some(Subgroup::Src),
            _ => None,
        }
    }
}

/// One anisotropic 3D Gaussian. Stored in single precision, which is also the
/// on-disk precision, so persistence round-trips exactly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianPrimitive {
    pub mu: [f32; 3],
    /// Unit quaternion `(w, x, y, z)`.
    pub rot: [f32; 4],
    /// Per-axis standard deviations.
    pub scale: [f32; 3],
    pub color: [f32; 3],
    pub opacity: f32,
}

impl GaussianPrimitive {
    /// Builds a primitive, normalizing the quaternion and clamping color and
    /// opacity into `[0, 1]`.
    pub fn new(mu: Vec3, rot: [f64; 4], scale: Vec3, color: Rgb, opacity: f64) -> Result<Self> {
        let finite = mu.iter().chain(rot.iter()).chain(scale.iter()).chain(color.iter()).all(|v| v.is_finite())
            && opacity.is_finite();
        if !finite {
            return Err(Error::Validation("non-finite primitive parameter".into()));
        }
        let qn = rot.iter().map(|v| v * v).sum::<f64>().sqrt();
        if qn < 1e-12 {
            return Err(Error::Validation("zero-norm rotation quaternion".into()));
        }
        if scale.iter().any(|&s| s <= 0.0) {
            return Err(Error::Validation(format!("scale must be positive, got {scale:?}")));
        }
        let prim = Self {
            mu: [mu.x as f32, mu.y as f32, mu.z as f32],
            rot: rot.map(|v| (v / qn) as f32),
            scale: [scale.x as f32, scale.y as f32, scale.z as f32],
            color: color.map(|c| c.clamp(0.0, 1.0) as f32),
            opacity: opacity.clamp(0.0, 1.0) as f32,
        };
        // f32 rounding can push a tiny positive scale to zero.
        if prim.scale.iter().any(|&s| s <= 0.0) {
            return Err(Error::Validation("scale underflows single precision".into()));
        }
        Ok(prim)
    }

    /// Isotropic, axis-aligned primitive.
    pub fn isotropic(mu: Vec3, sigma: f64, color: Rgb, opacity: f64) -> Result<Self> {
        Self::new(mu, [1.0, 0.0, 0.0, 0.0], Vec3::repeat(sigma), color, opacity)
    }

    /// Checks the stored values against the type invariants without repairing them.
    pub fn validate(&self) -> Result<()> {
        let all = self
            .mu
            .iter()
            .chain(&self.rot)
            .chain(&self.scale)
            .chain(&self.color)
            .chain(std::iter::once(&self.opacity));
        if all.clone().any(|v| !v.is_finite()) {
            return Err(Error::Validation("non-finite primitive parameter".into()));
        }
        let qn = self.rot.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt();
        if (qn - 1.0).abs() > 1e-6 {
            return Err(Error::Validation(format!("quaternion norm {qn} is not 1")));
        }
        if self.scale.iter().any(|&s| s <= 0.0) {
            return Err(Error::Validation("scale must be positive".into()));
        }
        if self.color.iter().chain(std::iter::once(&self.opacity)).any(|&c| !(0.0..=1.0).contains(&c)) {
            return Err(Error::Validation("color/opacity outside [0, 1]".into()));
        }
        Ok(())
    }

    pub fn mean(&self) -> Vec3 {
        Vec3::new(self.mu[0].into(), self.mu[1].into(), self.mu[2].into())
    }

    pub fn color_rgb(&self) -> Rgb {
        self.color.map(f64::from)
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        let [w, x, y, z] = self.rot.map(f64::from);
        UnitQuaternion::from_quaternion(Quaternion::new(w, x, y, z)).to_rotation_matrix().into_inner()
    }

    /// The same Gaussian after the rigid motion `pose`.
    pub fn transformed(&self, pose: &CameraPose) -> Self {
        let [w, x, y, z] = self.rot.map(f64::from);
        let q = UnitQuaternion::from_rotation_matrix(&nalgebra::Rotation3::from_matrix_unchecked(pose.rotation))
            * UnitQuaternion::from_quaternion(Quaternion::new(w, x, y, z));
        let mu = pose.transform_point(&self.mean());
        Self {
            mu: [mu.x as f32, mu.y as f32, mu.z as f32],
            rot: [q.w as f32, q.i as f32, q.j as f32, q.k as f32],
            ..*self
        }
    }

    /// World-space covariance `R S Sᵀ Rᵀ`.
    pub fn covariance(&self) -> Matrix3<f64> {
        let r = self.rotation_matrix();
        let s = Matrix3::from_diagonal(&Vec3::new(
            self.scale[0].into(),
            self.scale[1].into(),
            self.scale[2].into(),
        ));
        let m = r * s;
        m * m.transpose()
    }
}

/// Ordered collection of tagged primitives.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GaussianField {
    primitives: Vec<GaussianPrimitive>,
    subgroups: Vec<Subgroup>,
}

impl GaussianField {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(n: usize) -> Self {
        Self {
            primitives: Vec::with_capacity(n),
            subgroups: Vec::with_capacity(n),
        }
    }

    /// Field where every primitive carries the same tag.
    pub fn from_primitives(primitives: Vec<GaussianPrimitive>, tag: Subgroup) -> Self {
        let subgroups = vec![tag; primitives.len()];
        Self {
            primitives,
            subgroups,
        }
    }

    pub fn push(&mut self, prim: GaussianPrimitive, tag: Subgroup) {
        self.primitives.push(prim);
        self.subgroups.push(tag);
    }

    pub fn extend(&mut self, other: GaussianField) {
        self.primitives.extend(other.primitives);
        self.subgroups.extend(other.subgroups);
    }

    pub fn len(&self) -> usize {
        self.primitives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.primitives.is_empty()
    }

    pub fn primitives(&self) -> &[GaussianPrimitive] {
        &self.primitives
    }

    pub fn primitives_mut(&mut self) -> &mut [GaussianPrimitive] {
        &mut self.primitives
    }

    pub fn subgroups(&self) -> &[Subgroup] {
        &self.subgroups
    }

    pub fn iter(&self) -> impl Iterator<Item = (&GaussianPrimitive, Subgroup)> {
        self.primitives.iter().zip(self.subgroups.iter().copied())
    }

    pub fn count(&self, tag: Subgroup) -> usize {
        self.subgroups.iter().filter(|&&s| s == tag).count()
    }

    /// Every primitive moved by the rigid motion `pose`; tags are kept.
    pub fn transformed(&self, pose: &CameraPose) -> GaussianField {
        self.iter().map(|(p, s)| (p.transformed(pose), s)).collect()
    }

    /// Sub-field with only the primitives carrying `tag`, order preserved.
    pub fn select(&self, tag: Subgroup) -> GaussianField {
        self.iter()
            .filter(|(_, s)| *s == tag)
            .map(|(p, s)| (*p, s))
            .collect()
    }
}

impl FromIterator<(GaussianPrimitive, Subgroup)> for GaussianField {
    fn from_iter<I: IntoIterator<Item = (GaussianPrimitive, Subgroup)>>(iter: I) -> Self {
        let mut field = GaussianField::new();
        for (p, s) in iter {
            field.push(p, s);
        }
        field
    }
}

/// Rigid world→camera transform: `x_cam = rotation · x_world + translation`.
///
/// Camera axes follow the pinhole convention: +x right, +y down, +z forward.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
}

impl CameraPose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vec3) -> Result<Self> {
        let pose = Self {
            rotation,
            translation,
        };
        pose.validate()?;
        Ok(pose)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rotation.iter().chain(self.translation.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Validation("non-finite pose".into()));
        }
        let err = (self.rotation.transpose() * self.rotation - Matrix3::identity()).abs().max();
        if err > 1e-6 {
            return Err(Error::Validation(format!("rotation not orthonormal (error {err:e})")));
        }
        let det = self.rotation.determinant();
        if (det - 1.0).abs() > 1e-6 {
            return Err(Error::Validation(format!("rotation determinant {det} != 1")));
        }
        Ok(())
    }

    /// Camera looking from `eye` at `target`. `up` only disambiguates roll.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3) -> Result<Self> {
        let forward = target - eye;
        if forward.norm() < 1e-12 {
            return Err(Error::arg("look_at: eye coincides with target"));
        }
        let z = forward.normalize();
        let mut x = z.cross(&up);
        if x.norm() < 1e-9 {
            // up is parallel to the viewing direction; pick any perpendicular
            let alt = if z.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
            x = z.cross(&alt);
        }
        let x = x.normalize();
        let y = z.cross(&x);
        let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let translation = -(rotation * eye);
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &CameraPose) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    /// Viewing direction (+z of the camera) in world coordinates.
    pub fn forward(&self) -> Vec3 {
        self.rotation.row(2).transpose()
    }

    /// Row-major 4×4 homogeneous matrix.
    pub fn to_row_major(&self) -> [f64; 16] {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        let mut out = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                out[r * 4 + c] = m[(r, c)];
            }
        }
        out
    }

    pub fn from_row_major(m: &[f64; 16]) -> Result<Self> {
        let rotation = Matrix3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]);
        let translation = Vec3::new(m[3], m[7], m[11]);
        if m[12] != 0.0 || m[13] != 0.0 || m[14] != 0.0 || m[15] != 1.0 {
            return Err(Error::Validation("last row of a rigid transform must be [0 0 0 1]".into()));
        }
        Self::new(rotation, translation)
    }

    pub fn max_abs_diff(&self, other: &CameraPose) -> f64 {
        (self.rotation - other.rotation)
            .abs()
            .max()
            .max((self.translation - other.translation).abs().max())
    }
}

/// Pinhole intrinsics in pixel units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

/// Sensor width used to convert millimeter focal lengths to pixels.
pub const SENSOR_WIDTH_MM: f64 = 36.0;

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    /// Centered principal point, square pixels, 36 mm sensor width.
    pub fn from_focal_mm(focal_mm: f64, width: usize, height: usize) -> Result<Self> {
        let f = focal_mm / SENSOR_WIDTH_MM * width as f64;
        Self::new(f, f, width as f64 / 2.0, height as f64 / 2.0, width, height)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) || !self.fx.is_finite() || !self.fy.is_finite() {
            return Err(Error::Validation("focal length must be positive".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Validation("image size must be nonzero".into()));
        }
        let inside = (0.0..=self.width as f64).contains(&self.cx) && (0.0..=self.height as f64).contains(&self.cy);
        if !inside {
            return Err(Error::Validation("principal point outside the image".into()));
        }
        Ok(())
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Projects a camera-space point; `None` for points at or behind the camera plane.
    pub fn project(&self, p: &Vec3) -> Option<(f64, f64)> {
        if p.z <= 0.0 {
            return None;
        }
        Some((self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
    }

    /// Camera-space point at depth `z` (along the optical axis) behind pixel coordinate `(u, v)`.
    pub fn unproject(&self, u: f64, v: f64, z: f64) -> Vec3 {
        Vec3::new((u - self.cx) / self.fx * z, (v - self.cy) / self.fy * z, z)
    }

    /// Unit ray direction, in camera space, through pixel coordinate `(u, v)`.
    pub fn ray(&self, u: f64, v: f64) -> Vec3 {
        self.unproject(u, v, 1.0).normalize()
    }
}

/// One observed frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameObservation {
    pub rgb: RgbImage,
    pub mask: Mask,
    pub depth: Option<DepthMap>,
    pub t: usize,
}

impl FrameObservation {
    pub fn width(&self) -> usize {
        self.rgb.width()
    }

    pub fn height(&self) -> usize {
        self.rgb.height()
    }

    pub fn validate(&self) -> Result<()> {
        if !self.rgb.same_shape(&self.mask) {
            return Err(Error::Validation("mask shape differs from rgb".into()));
        }
        if self.mask.count() == 0 {
            return Err(Error::Validation(format!("frame {} has an empty mask", self.t)));
        }
        if self.rgb.as_slice().iter().flatten().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::Validation("rgb outside [0, 1]".into()));
        }
        if let Some(depth) = &self.depth {
            if !depth.same_shape(&self.mask) {
                return Err(Error::Validation("depth shape differs from rgb".into()));
            }
            let bad = depth
                .as_slice()
                .iter()
                .zip(self.mask.as_slice())
                .any(|(&d, &m)| m && !(d.is_finite() && d > 0.0));
            if bad {
                return Err(Error::Validation("depth must be finite and positive inside the mask".into()));
            }
        }
        Ok(())
    }

    /// RGB with everything outside the mask replaced by `bg`.
    pub fn masked_rgb(&self, bg: Rgb) -> RgbImage {
        let data = self
            .rgb
            .as_slice()
            .iter()
            .zip(self.mask.as_slice())
            .map(|(&c, &m)| if m { c } else { bg })
            .collect();
        Grid::from_vec(self.width(), self.height(), data).expect("same shape")
    }
}

/// Re-expresses a pose sequence relative to its first pose, so the first pose
/// becomes the identity and every pose maps canonical (frame-0 camera)
/// coordinates into its own camera.
pub fn normalize_pose_sequence(poses: &[CameraPose]) -> Result<Vec<CameraPose>> {
    let first = poses.first().ok_or_else(|| Error::arg("empty pose sequence"))?;
    for p in poses {
        p.validate()?;
    }
    let inv0 = first.inverse();
    Ok(poses
        .iter()
        .enumerate()
        .map(|(i, p)| if i == 0 { CameraPose::identity() } else { p.compose(&inv0) })
        .collect())
}

/// Thresholds for [`filter_renderable`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderFilter {
    pub bg_color: Rgb,
    pub opacity_eps: f64,
    /// L∞ color distance at or below which a primitive counts as background.
    pub bg_distance: f64,
}

impl Default for RenderFilter {
    fn default() -> Self {
        Self {
            bg_color: WHITE,
            opacity_eps: 1e-4,
            bg_distance: 0.02,
        }
    }
}

/// Drops primitives that are nearly transparent or colored like the background.
pub fn filter_renderable(field: &GaussianField, filter: &RenderFilter) -> Result<GaussianField> {
    if filter.opacity_eps < 0.0 || filter.opacity_eps.is_nan() {
        return Err(Error::arg("opacity_eps must be >= 0"));
    }
    Ok(field
        .iter()
        .filter(|(p, _)| {
            let transparent = f64::from(p.opacity) < filter.opacity_eps;
            let dist = p
                .color_rgb()
                .iter()
                .zip(filter.bg_color)
                .map(|(c, b)| (c - b).abs())
                .fold(0.0, f64::max);
            !transparent && dist > filter.bg_distance
        })
        .map(|(p, s)| (*p, s))
        .collect())
}
