//! CPU forward renderer for Gaussian fields.
//!
//! Primitives are projected with the local affine (EWA) approximation, sorted
//! front to back and alpha-composited per pixel. [`render`] bins primitives into
//! screen tiles and renders tiles in parallel; [`render_bruteforce`] walks every
//! primitive for every pixel. Both share the same per-pixel compositing
//! routine. Tile binning uses, per primitive, the exact radius beyond which its
//! alpha falls below the cutoff, so binning never changes the result.

use nalgebra::{Matrix2, Matrix2x3, Vector2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{
    AlphaMap, CameraIntrinsics, CameraPose, DepthMap, GaussianField, GaussianPrimitive, Grid, Mask, Rgb, RgbImage, WHITE,
};

const TILE: usize = 16;
/// Determinant below which a projected covariance is treated as singular.
const SINGULAR_DET: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderSettings {
    pub near: f64,
    pub far: f64,
    pub bg_color: Rgb,
    /// Contributions with alpha below this are skipped.
    pub alpha_cutoff: f64,
    /// Compositing stops once transmittance would drop below this.
    pub transmittance_floor: f64,
    /// Added to the diagonal of every projected covariance (px²).
    pub cov_lowpass: f64,
    pub alpha_max: f64,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self {
            near: 0.1,
            far: 100.0,
            bg_color: WHITE,
            alpha_cutoff: 1.0 / 255.0,
            transmittance_floor: 1e-4,
            cov_lowpass: 0.3,
            alpha_max: 0.999,
        }
    }
}

impl RenderSettings {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.near && self.near < self.far) {
            return Err(Error::arg("need 0 < near < far"));
        }
        for (name, v) in [
            ("alpha_cutoff", self.alpha_cutoff),
            ("transmittance_floor", self.transmittance_floor),
            ("alpha_max", self.alpha_max),
        ] {
            if !(0.0 < v && v < 1.0) {
                return Err(Error::arg(format!("{name} must lie in (0, 1)")));
            }
        }
        if !(self.cov_lowpass >= 0.0) {
            return Err(Error::arg("cov_lowpass must be >= 0"));
        }
        Ok(())
    }
}

/// A primitive in screen space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Splat {
    pub mean2d: Vector2<f64>,
    pub cov2d: Matrix2<f64>,
    /// Camera-space z.
    pub depth: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Projection {
    Visible(Splat),
    Culled,
}

/// Projects one primitive. Culls when its center lies outside (near, far).
pub fn project_gaussian(
    prim: &GaussianPrimitive,
    pose: &CameraPose,
    k: &CameraIntrinsics,
    settings: &RenderSettings,
) -> Projection {
    let cam = pose.transform_point(&prim.mean());
    let z = cam.z;
    if !(z > settings.near && z < settings.far) {
        return Projection::Culled;
    }
    let j = Matrix2x3::new(k.fx / z, 0.0, -k.fx * cam.x / (z * z), 0.0, k.fy / z, -k.fy * cam.y / (z * z));
    let cov_cam = pose.rotation * prim.covariance() * pose.rotation.transpose();
    let mut cov2d = j * cov_cam * j.transpose();
    cov2d[(0, 0)] += settings.cov_lowpass;
    cov2d[(1, 1)] += settings.cov_lowpass;
    // enforce exact symmetry
    let off = 0.5 * (cov2d[(0, 1)] + cov2d[(1, 0)]);
    cov2d[(0, 1)] = off;
    cov2d[(1, 0)] = off;
    Projection::Visible(Splat {
        mean2d: Vector2::new(k.fx * cam.x / z + k.cx, k.fy * cam.y / z + k.cy),
        cov2d,
        depth: z,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderDiagnostics {
    pub culled: usize,
    pub singular: usize,
    pub rendered: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub color: RgbImage,
    /// Alpha-weighted expected depth; zero where nothing was composited.
    pub depth: DepthMap,
    pub alpha: AlphaMap,
    pub diagnostics: RenderDiagnostics,
}

/// Screen-space primitive ready for compositing.
#[derive(Debug, Clone, Copy)]
struct Prepared {
    mean: Vector2<f64>,
    inv_cov: Matrix2<f64>,
    depth: f64,
    opacity: f64,
    color: Rgb,
    /// Mahalanobis radius beyond which alpha is below the cutoff.
    cutoff_radius: f64,
    /// Half-extent of the axis-aligned pixel box enclosing that ellipse.
    half_extent: Vector2<f64>,
}

fn prepare(
    field: &GaussianField,
    pose: &CameraPose,
    k: &CameraIntrinsics,
    settings: &RenderSettings,
) -> Result<(Vec<Prepared>, RenderDiagnostics)> {
    settings.validate()?;
    k.validate()?;
    let mut diag = RenderDiagnostics::default();
    let mut out: Vec<(usize, Prepared)> = Vec::with_capacity(field.len());
    for (idx, prim) in field.primitives().iter().enumerate() {
        let splat = match project_gaussian(prim, pose, k, settings) {
            Projection::Visible(s) => s,
            Projection::Culled => {
                diag.culled += 1;
                continue;
            }
        };
        let det = splat.cov2d.determinant();
        if !(det >= SINGULAR_DET) {
            diag.singular += 1;
            continue;
        }
        let opacity = f64::from(prim.opacity);
        let inv_cov = splat.cov2d.try_inverse().expect("determinant checked");
        // alpha = o·exp(-m²/2) < cutoff  ⇔  m² > 2 ln(o / cutoff)
        let ratio = opacity.min(settings.alpha_max) / settings.alpha_cutoff;
        let cutoff_radius = if ratio > 1.0 { (2.0 * ratio.ln()).sqrt() } else { 0.0 };
        // small pad so rounding at the ellipse boundary cannot drop a pixel
        let pad = 1.0 + 1e-9;
        let half_extent = Vector2::new(
            cutoff_radius * splat.cov2d[(0, 0)].sqrt() * pad + 1e-9,
            cutoff_radius * splat.cov2d[(1, 1)].sqrt() * pad + 1e-9,
        );
        out.push((
            idx,
            Prepared {
                mean: splat.mean2d,
                inv_cov,
                depth: splat.depth,
                opacity,
                color: prim.color_rgb(),
                cutoff_radius,
                half_extent,
            },
        ));
    }
    // stable: equal depths keep primitive order
    out.sort_by(|a, b| a.1.depth.total_cmp(&b.1.depth).then(a.0.cmp(&b.0)));
    diag.rendered = out.len();
    Ok((out.into_iter().map(|(_, p)| p).collect(), diag))
}

/// Per-pixel compositing state.
struct Pixel {
    color: Rgb,
    depth_acc: f64,
    weight: f64,
    transmittance: f64,
}

impl Pixel {
    fn new() -> Self {
        Self {
            color: [0.0; 3],
            depth_acc: 0.0,
            weight: 0.0,
            transmittance: 1.0,
        }
    }

    /// Composites one primitive. Returns false once the pixel is saturated.
    #[inline]
    fn blend(&mut self, g: &Prepared, px: f64, py: f64, settings: &RenderSettings) -> bool {
        let d = Vector2::new(px - g.mean.x, py - g.mean.y);
        let power = -0.5 * (d.transpose() * g.inv_cov * d)[(0, 0)];
        let alpha = (g.opacity * power.exp()).min(settings.alpha_max);
        if alpha < settings.alpha_cutoff {
            return true;
        }
        let next_t = self.transmittance * (1.0 - alpha);
        if next_t < settings.transmittance_floor {
            return false;
        }
        let w = alpha * self.transmittance;
        for (c, gc) in self.color.iter_mut().zip(g.color) {
            *c += w * gc;
        }
        self.depth_acc += w * g.depth;
        self.weight += w;
        self.transmittance = next_t;
        true
    }

    fn finish(self, bg: &Rgb) -> (Rgb, f64, f64) {
        let t = self.transmittance;
        let color = [
            self.color[0] + t * bg[0],
            self.color[1] + t * bg[1],
            self.color[2] + t * bg[2],
        ];
        let depth = if self.weight > 0.0 { self.depth_acc / self.weight } else { 0.0 };
        (color, depth, 1.0 - t)
    }
}

fn assemble(w: usize, h: usize, pixels: Vec<(Rgb, f64, f64)>, diagnostics: RenderDiagnostics) -> RenderOutput {
    let mut color = Vec::with_capacity(w * h);
    let mut depth = Vec::with_capacity(w * h);
    let mut alpha = Vec::with_capacity(w * h);
    for (c, d, a) in pixels {
        color.push(c);
        depth.push(d);
        alpha.push(a);
    }
    RenderOutput {
        color: Grid::from_vec(w, h, color).expect("sized"),
        depth: Grid::from_vec(w, h, depth).expect("sized"),
        alpha: Grid::from_vec(w, h, alpha).expect("sized"),
        diagnostics,
    }
}

/// Tiled, parallel renderer.
pub fn render(
    field: &GaussianField,
    pose: &CameraPose,
    k: &CameraIntrinsics,
    settings: &RenderSettings,
) -> Result<RenderOutput> {
    let (prims, diag) = prepare(field, pose, k, settings)?;
    let (w, h) = (k.width, k.height);
    let tiles_x = w.div_ceil(TILE);
    let tiles_y = h.div_ceil(TILE);

    // bin in depth order so every tile list stays sorted
    let mut bins: Vec<Vec<u32>> = vec![Vec::new(); tiles_x * tiles_y];
    for (i, g) in prims.iter().enumerate() {
        if g.cutoff_radius <= 0.0 {
            continue;
        }
        // pixel centers sit at integer + 0.5
        let x0 = (g.mean.x - g.half_extent.x - 0.5).ceil().max(0.0);
        let x1 = (g.mean.x + g.half_extent.x - 0.5).floor().min(w as f64 - 1.0);
        let y0 = (g.mean.y - g.half_extent.y - 0.5).ceil().max(0.0);
        let y1 = (g.mean.y + g.half_extent.y - 0.5).floor().min(h as f64 - 1.0);
        if !(x0 <= x1 && y0 <= y1) {
            continue;
        }
        let (tx0, tx1) = (x0 as usize / TILE, x1 as usize / TILE);
        let (ty0, ty1) = (y0 as usize / TILE, y1 as usize / TILE);
        for ty in ty0..=ty1 {
            for tx in tx0..=tx1 {
                bins[ty * tiles_x + tx].push(i as u32);
            }
        }
    }

    type Shaded = (usize, (Rgb, f64, f64));
    let tile_pixels: Vec<Vec<Shaded>> = bins
        .par_iter()
        .enumerate()
        .map(|(tile, list)| {
            let (tx, ty) = (tile % tiles_x, tile / tiles_x);
            let mut out = Vec::with_capacity(TILE * TILE);
            for y in ty * TILE..((ty + 1) * TILE).min(h) {
                for x in tx * TILE..((tx + 1) * TILE).min(w) {
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    let mut pixel = Pixel::new();
                    for &i in list {
                        if !pixel.blend(&prims[i as usize], px, py, settings) {
                            break;
                        }
                    }
                    out.push((y * w + x, pixel.finish(&settings.bg_color)));
                }
            }
            out
        })
        .collect();

    let mut pixels = vec![([0.0; 3], 0.0, 0.0); w * h];
    for (idx, px) in tile_pixels.into_iter().flatten() {
        pixels[idx] = px;
    }
    Ok(assemble(w, h, pixels, diag))
}

/// Reference renderer: every pixel visits every depth-sorted primitive.
pub fn render_bruteforce(
    field: &GaussianField,
    pose: &CameraPose,
    k: &CameraIntrinsics,
    settings: &RenderSettings,
) -> Result<RenderOutput> {
    let (prims, diag) = prepare(field, pose, k, settings)?;
    let (w, h) = (k.width, k.height);
    let mut pixels = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let mut pixel = Pixel::new();
            for g in &prims {
                if !pixel.blend(g, x as f64 + 0.5, y as f64 + 0.5, settings) {
                    break;
                }
            }
            pixels.push(pixel.finish(&settings.bg_color));
        }
    }
    Ok(assemble(w, h, pixels, diag))
}

pub fn mask_from_alpha(output: &RenderOutput, threshold: f64) -> Result<Mask> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::arg("mask threshold must lie in (0, 1)"));
    }
    Ok(output.alpha.map(|&a| a >= threshold))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{Subgroup, Vec3};
    use nalgebra::Matrix3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cam() -> (CameraPose, CameraIntrinsics) {
        (CameraPose::identity(), CameraIntrinsics::new(60.0, 60.0, 32.0, 32.0, 64, 64).unwrap())
    }

    fn random_field(rng: &mut ChaCha8Rng, n: usize) -> GaussianField {
        (0..n)
            .map(|_| {
                let mu = Vec3::new(rng.gen_range(-0.6..0.6), rng.gen_range(-0.6..0.6), rng.gen_range(1.5..3.5));
                let rot = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
                let scale = Vec3::new(rng.gen_range(0.01..0.2), rng.gen_range(0.01..0.2), rng.gen_range(0.01..0.2));
                let color = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
                let p = GaussianPrimitive::new(mu, rot, scale, color, rng.gen_range(0.05..1.0)).unwrap();
                (p, Subgroup::Src)
            })
            .collect()
    }

    #[test]
    fn on_axis_projects_to_principal_point() {
        let (pose, k) = cam();
        let p = GaussianPrimitive::isotropic(Vec3::new(0.0, 0.0, 2.0), 0.1, [0.0; 3], 1.0).unwrap();
        match project_gaussian(&p, &pose, &k, &RenderSettings::default()) {
            Projection::Visible(s) => {
                assert!((s.mean2d - Vector2::new(32.0, 32.0)).norm() < 1e-12);
                assert_eq!(s.depth, 2.0);
                // isotropic on the axis: (f σ / z)² + low-pass
                let want = (60.0 * 0.1 / 2.0f64).powi(2) + 0.3;
                assert!((s.cov2d[(0, 0)] - want).abs() < 1e-6 && s.cov2d[(0, 1)].abs() < 1e-12);
            }
            Projection::Culled => panic!("culled"),
        }
    }

    #[test]
    fn near_plane_culls() {
        let (pose, k) = cam();
        let s = RenderSettings::default();
        let p = GaussianPrimitive::isotropic(Vec3::new(0.0, 0.0, s.near / 2.0), 0.1, [0.0; 3], 1.0).unwrap();
        assert_eq!(project_gaussian(&p, &pose, &k, &s), Projection::Culled);
        let p = GaussianPrimitive::isotropic(Vec3::new(0.0, 0.0, -1.0), 0.1, [0.0; 3], 1.0).unwrap();
        assert_eq!(project_gaussian(&p, &pose, &k, &s), Projection::Culled);
    }

    #[test]
    fn covariance_matches_numerical_jacobian() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let settings = RenderSettings::default();
        for _ in 0..50 {
            let field = random_field(&mut rng, 1);
            let prim = field.primitives()[0];
            let axis = Vec3::new(rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3));
            let pose = CameraPose::new(nalgebra::Rotation3::from_scaled_axis(axis).into_inner(), Vec3::new(0.1, -0.2, 0.3))
                .unwrap();
            let k = CameraIntrinsics::new(70.0, 65.0, 30.0, 34.0, 64, 64).unwrap();
            let Projection::Visible(s) = project_gaussian(&prim, &pose, &k, &settings) else {
                continue;
            };
            // finite-difference Jacobian of world point -> pixel
            let proj = |p: Vec3| {
                let c = pose.transform_point(&p);
                Vector2::new(k.fx * c.x / c.z + k.cx, k.fy * c.y / c.z + k.cy)
            };
            let mu = prim.mean();
            let h = 1e-6;
            let mut jw = Matrix2x3::zeros();
            for a in 0..3 {
                let mut e = Vec3::zeros();
                e[a] = h;
                let col = (proj(mu + e) - proj(mu - e)) / (2.0 * h);
                jw.set_column(a, &col);
            }
            let want = jw * prim.covariance() * jw.transpose() + Matrix2::identity() * settings.cov_lowpass;
            let rel = (s.cov2d - want).abs().max() / want.abs().max();
            assert!(rel < 1e-4, "relative error {rel}");
            assert!(s.cov2d.determinant() > 0.0 && s.cov2d[(0, 0)] > 0.0);
        }
    }

    #[test]
    fn empty_field_is_background() {
        let (pose, k) = cam();
        let out = render(&GaussianField::new(), &pose, &k, &RenderSettings::default()).unwrap();
        assert!(out.color.as_slice().iter().all(|c| *c == WHITE));
        assert!(out.alpha.as_slice().iter().all(|&a| a == 0.0));
        assert_eq!(out, render_bruteforce(&GaussianField::new(), &pose, &k, &RenderSettings::default()).unwrap());
    }

    #[test]
    fn single_gaussian_alpha_peaks_at_center() {
        let (pose, k) = cam();
        let p = GaussianPrimitive::isotropic(Vec3::new(0.0, 0.0, 2.0), 0.15, [0.2, 0.3, 0.4], 1.0).unwrap();
        let field = GaussianField::from_primitives(vec![p], Subgroup::Src);
        let s = RenderSettings::default();
        let out = render(&field, &pose, &k, &s).unwrap();
        assert_eq!(out, render_bruteforce(&field, &pose, &k, &s).unwrap());
        // pixel (31,31) and (32,32) straddle the principal point; walk outward along the row
        let row: Vec<f64> = (32..64).map(|x| *out.alpha.get(x, 32)).collect();
        assert!(row.windows(2).all(|w| w[0] >= w[1]));
        assert!(row[0] > 0.9);
        assert!((out.depth.get(32, 32) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn tiled_matches_bruteforce() {
        let (_, k) = cam();
        let s = RenderSettings::default();
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let field = random_field(&mut rng, 64);
            let pose = CameraPose::new(Matrix3::identity(), Vec3::new(rng.gen_range(-0.2..0.2), 0.0, 0.0)).unwrap();
            let a = render(&field, &pose, &k, &s).unwrap();
            let b = render_bruteforce(&field, &pose, &k, &s).unwrap();
            assert_eq!(a, b, "seed {seed}");
        }
    }

    #[test]
    fn repeated_renders_are_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let field = random_field(&mut rng, 200);
        let (pose, k) = cam();
        let s = RenderSettings::default();
        assert_eq!(render(&field, &pose, &k, &s).unwrap(), render(&field, &pose, &k, &s).unwrap());
    }

    #[test]
    fn alpha_monotone_in_opacity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut field = random_field(&mut rng, 30);
        let (pose, k) = cam();
        let s = RenderSettings::default();
        let before = render(&field, &pose, &k, &s).unwrap();
        let o = &mut field.primitives_mut()[4].opacity;
        *o = (*o + 0.3).min(1.0);
        let after = render(&field, &pose, &k, &s).unwrap();
        for (a, b) in before.alpha.as_slice().iter().zip(after.alpha.as_slice()) {
            assert!(b + 1e-12 >= *a);
        }
    }

    #[test]
    fn mask_threshold() {
        let (pose, k) = cam();
        let s = RenderSettings::default();
        let empty = render(&GaussianField::new(), &pose, &k, &s).unwrap();
        assert_eq!(mask_from_alpha(&empty, 0.5).unwrap().count(), 0);
        let mut full = empty.clone();
        full.alpha.as_mut_slice().iter_mut().for_each(|a| *a = 1.0);
        assert_eq!(mask_from_alpha(&full, 0.5).unwrap().count(), 64 * 64);
        assert!(mask_from_alpha(&full, 1.0).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let out = render(&random_field(&mut rng, 40), &pose, &k, &s).unwrap();
        let mut prev = usize::MAX;
        for th in [0.05, 0.2, 0.5, 0.8, 0.95] {
            let n = mask_from_alpha(&out, th).unwrap().count();
            assert!(n <= prev);
            prev = n;
        }
    }
}
