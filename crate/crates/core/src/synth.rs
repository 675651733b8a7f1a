//! Procedural ground truth: Gaussian objects, fly-around camera trajectories,
//! rendered frame sequences, and the curriculum frame sampler used to pick
//! training views.

use nalgebra::{DMatrix, DVector, Rotation3, UnitQuaternion};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::raster::{mask_from_alpha, render, RenderSettings};
use crate::types::{CameraIntrinsics, CameraPose, FrameObservation, GaussianField, GaussianPrimitive, Subgroup, Vec3};

/// Alpha threshold for synthetic object masks.
pub const MASK_THRESHOLD: f64 = 0.5;

/// Closed C² cubic spline through equally spaced waypoints on `u ∈ [0, 1)`.
#[derive(Debug, Clone)]
pub struct PeriodicSpline {
    points: Vec<Vec3>,
    /// Second derivatives with respect to the segment-local parameter scale `h = 1/n`.
    second: Vec<Vec3>,
}

impl PeriodicSpline {
    pub fn new(points: &[Vec3]) -> Result<Self> {
        let n = points.len();
        if n < 3 {
            return Err(Error::arg("periodic spline needs at least 3 waypoints"));
        }
        let h = 1.0 / n as f64;
        // M_{i-1} + 4 M_i + M_{i+1} = 6/h² (P_{i+1} − 2 P_i + P_{i−1}), cyclic
        let mut a = DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            a[(i, i)] = 4.0;
            a[(i, (i + 1) % n)] += 1.0;
            a[(i, (i + n - 1) % n)] += 1.0;
        }
        let lu = a.lu();
        let mut second = vec![Vec3::zeros(); n];
        for axis in 0..3 {
            let rhs = DVector::from_iterator(
                n,
                (0..n).map(|i| {
                    let (prev, next) = (points[(i + n - 1) % n][axis], points[(i + 1) % n][axis]);
                    6.0 / (h * h) * (next - 2.0 * points[i][axis] + prev)
                }),
            );
            let m = lu.solve(&rhs).ok_or_else(|| Error::arg("singular spline system"))?;
            for i in 0..n {
                second[i][axis] = m[i];
            }
        }
        Ok(Self {
            points: points.to_vec(),
            second,
        })
    }

    fn locate(&self, u: f64) -> (usize, usize, f64) {
        let n = self.points.len();
        let s = u.rem_euclid(1.0) * n as f64;
        let i = (s.floor() as usize).min(n - 1);
        (i, (i + 1) % n, s - i as f64)
    }

    pub fn eval(&self, u: f64) -> Vec3 {
        let (i, j, t) = self.locate(u);
        let h = 1.0 / self.points.len() as f64;
        let s = 1.0 - t;
        self.points[i] * s
            + self.points[j] * t
            + (self.second[i] * (s * s * s - s) + self.second[j] * (t * t * t - t)) * (h * h / 6.0)
    }

    pub fn derivative(&self, u: f64) -> Vec3 {
        let (i, j, t) = self.locate(u);
        let h = 1.0 / self.points.len() as f64;
        let s = 1.0 - t;
        (self.points[j] - self.points[i]) / h
            + (self.second[j] * (3.0 * t * t - 1.0) - self.second[i] * (3.0 * s * s - 1.0)) * (h / 6.0)
    }

    pub fn second_derivative(&self, u: f64) -> Vec3 {
        let (i, j, t) = self.locate(u);
        self.second[i] * (1.0 - t) + self.second[j] * t
    }

    /// `samples` points at `u = k / samples`.
    pub fn sample(&self, samples: usize) -> Vec<Vec3> {
        (0..samples).map(|k| self.eval(k as f64 / samples as f64)).collect()
    }
}

/// Periodic cubic spline through `waypoints`, sampled uniformly in parameter.
pub fn periodic_cubic_spline(waypoints: &[Vec3], samples: usize) -> Result<Vec<Vec3>> {
    Ok(PeriodicSpline::new(waypoints)?.sample(samples))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrajectoryParams {
    pub k1_elevations: usize,
    pub k2_radii: usize,
    pub waypoints: usize,
    /// Camera distance shell `(d_min, d_max)` in world units (meters).
    pub radius_shell: (f64, f64),
    /// Elevation keys are drawn from `[-limit, limit]` degrees.
    pub elevation_limit_deg: f64,
    /// Look-at jitter, uniform per axis in `[-jitter, jitter]` world units.
    pub jitter: f64,
    pub focal_set_mm: Vec<f64>,
    /// Number of frames sampled along the closed spline.
    pub frames: usize,
    pub seed: u64,
}

impl Default for TrajectoryParams {
    fn default() -> Self {
        Self {
            k1_elevations: 4,
            k2_radii: 8,
            waypoints: 100,
            radius_shell: (1.5, 3.0),
            elevation_limit_deg: 60.0,
            jitter: 0.05,
            focal_set_mm: vec![30.0, 35.0, 40.0, 45.0, 50.0],
            frames: 36,
            seed: 0,
        }
    }
}

impl TrajectoryParams {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.radius_shell;
        if !(0.0 < lo && lo < hi) {
            return Err(Error::arg("radius shell needs 0 < d_min < d_max"));
        }
        if self.k1_elevations == 0 || self.k2_radii == 0 {
            return Err(Error::arg("need at least one elevation and one radius key"));
        }
        if self.waypoints < self.k1_elevations * self.k2_radii || self.waypoints < 3 {
            return Err(Error::arg("waypoints must be >= k1 * k2 (and >= 3)"));
        }
        if self.focal_set_mm.is_empty() || self.focal_set_mm.iter().any(|f| !(*f > 0.0)) {
            return Err(Error::arg("focal set must be nonempty and positive"));
        }
        if !(self.jitter >= 0.0) || self.frames == 0 {
            return Err(Error::arg("jitter must be >= 0 and frames > 0"));
        }
        Ok(())
    }
}

/// Periodic piecewise-linear interpolation of equally spaced keys at `u ∈ [0, 1)`.
fn periodic_lerp(keys: &[f64], u: f64) -> f64 {
    let n = keys.len();
    let s = u.rem_euclid(1.0) * n as f64;
    let i = (s.floor() as usize).min(n - 1);
    let t = s - i as f64;
    keys[i] * (1.0 - t) + keys[(i + 1) % n] * t
}

/// Camera path around `center`. World up is +z.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub poses: Vec<CameraPose>,
    pub intrinsics: CameraIntrinsics,
    /// Camera centers along the spline.
    pub positions: Vec<Vec3>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }
}

pub fn sample_trajectory(params: &TrajectoryParams, center: Vec3, width: usize, height: usize) -> Result<Trajectory> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let (d_min, d_max) = params.radius_shell;
    let lim = params.elevation_limit_deg.to_radians();
    let elevations: Vec<f64> = (0..params.k1_elevations).map(|_| rng.gen_range(-lim..=lim)).collect();
    let radii: Vec<f64> = (0..params.k2_radii).map(|_| rng.gen_range(d_min..=d_max)).collect();
    let azimuth0 = rng.gen_range(0.0..std::f64::consts::TAU);
    let focal = *params.focal_set_mm.choose(&mut rng).expect("nonempty");

    let n = params.waypoints;
    let waypoints: Vec<Vec3> = (0..n)
        .map(|j| {
            let u = j as f64 / n as f64;
            let el = periodic_lerp(&elevations, u);
            let r = periodic_lerp(&radii, u);
            let az = azimuth0 + std::f64::consts::TAU * u;
            center + Vec3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin()) * r
        })
        .collect();
    let positions = periodic_cubic_spline(&waypoints, params.frames)?;

    let intrinsics = CameraIntrinsics::from_focal_mm(focal, width, height)?;
    let poses = positions
        .iter()
        .map(|&eye| {
            let j = params.jitter;
            let offset = if j > 0.0 {
                Vec3::new(rng.gen_range(-j..=j), rng.gen_range(-j..=j), rng.gen_range(-j..=j))
            } else {
                Vec3::zeros()
            };
            CameraPose::look_at(eye, center + offset, Vec3::z())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Trajectory {
        poses,
        intrinsics,
        positions,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ObjectKind {
    Sphere,
    Box,
    Torus,
    Composite,
}

/// Surface sample: position, outward normal, local spacing.
struct SurfacePoint {
    pos: Vec3,
    normal: Vec3,
    spacing: f64,
}

/// Additive recurrence with good 2D stratification.
fn r2(j: usize) -> (f64, f64) {
    const A1: f64 = 0.754_877_666_246_692_7;
    const A2: f64 = 0.569_840_290_998_053_3;
    ((0.5 + A1 * j as f64).fract(), (0.5 + A2 * j as f64).fract())
}

fn sphere_points(count: usize, radius: f64, center: Vec3, spin: &Rotation3<f64>) -> Vec<SurfacePoint> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let spacing = radius * (4.0 * std::f64::consts::PI / count as f64).sqrt();
    (0..count)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / count as f64;
            let r = (1.0 - z * z).sqrt();
            let a = golden * i as f64;
            let n = spin * Vec3::new(r * a.cos(), r * a.sin(), z);
            SurfacePoint {
                pos: center + n * radius,
                normal: n,
                spacing,
            }
        })
        .collect()
}

fn box_points(count: usize, half: f64, center: Vec3) -> Vec<SurfacePoint> {
    let spacing = (24.0 * half * half / count as f64).sqrt();
    (0..count)
        .map(|i| {
            let face = i % 6;
            let (a, b) = r2(i / 6);
            let (a, b) = ((2.0 * a - 1.0) * half, (2.0 * b - 1.0) * half);
            let axis = face / 2;
            let sign = if face % 2 == 0 { 1.0 } else { -1.0 };
            let mut pos = Vec3::zeros();
            let mut normal = Vec3::zeros();
            pos[axis] = sign * half;
            normal[axis] = sign;
            pos[(axis + 1) % 3] = a;
            pos[(axis + 2) % 3] = b;
            SurfacePoint {
                pos: center + pos,
                normal,
                spacing,
            }
        })
        .collect()
}

fn torus_points(count: usize, major: f64, minor: f64, center: Vec3) -> Vec<SurfacePoint> {
    let tau = std::f64::consts::TAU;
    (0..count)
        .map(|i| {
            let (a, b) = r2(i);
            let (u, v) = (a * tau, b * tau);
            let ring = major + minor * v.cos();
            let normal = Vec3::new(v.cos() * u.cos(), v.cos() * u.sin(), v.sin());
            let pos = Vec3::new(ring * u.cos(), ring * u.sin(), minor * v.sin());
            // parameter cells have area (2π)² r (R + r cos v) / count
            let spacing = (tau * tau * minor * ring / count as f64).sqrt();
            SurfacePoint {
                pos: center + pos,
                normal,
                spacing,
            }
        })
        .collect()
}

fn procedural_color(p: &Vec3, freq: &Vec3, phase: &Vec3) -> [f64; 3] {
    // stays in [0.1, 0.85] so nothing is mistaken for the white background
    let ch = |k: usize| 0.475 + 0.375 * (freq[k] * p[k] + phase[k] + 0.5 * p[(k + 1) % 3]).sin();
    [ch(0), ch(1), ch(2)]
}

/// Procedural object with exactly `count` surface-aligned primitives, roughly
/// unit bounding radius around the origin.
pub fn make_object(kind: ObjectKind, seed: u64, count: usize) -> Result<GaussianField> {
    if count == 0 {
        return Err(Error::arg("object needs at least one primitive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spin = Rotation3::from_euler_angles(rng.gen_range(0.0..6.3), rng.gen_range(0.0..6.3), rng.gen_range(0.0..6.3));
    let points = match kind {
        ObjectKind::Sphere => sphere_points(count, 1.0, Vec3::zeros(), &spin),
        ObjectKind::Box => box_points(count, 0.6, Vec3::zeros()),
        ObjectKind::Torus => torus_points(count, 0.7, 0.3, Vec3::zeros()),
        ObjectKind::Composite => {
            let a = count / 3;
            let b = count / 3;
            let c = count - a - b;
            let mut pts = sphere_points(a, 0.45, Vec3::new(0.0, 0.0, 0.45), &spin);
            pts.extend(box_points(b, 0.35, Vec3::new(0.0, 0.0, -0.45)));
            pts.extend(torus_points(c, 0.55, 0.15, Vec3::zeros()));
            pts
        }
    };
    let freq = Vec3::new(rng.gen_range(0.5..1.5), rng.gen_range(0.5..1.5), rng.gen_range(0.5..1.5));
    let phase = Vec3::new(rng.gen_range(0.0..6.3), rng.gen_range(0.0..6.3), rng.gen_range(0.0..6.3));
    points
        .iter()
        .map(|sp| {
            // flattened disc whose thin axis follows the surface normal
            let q = UnitQuaternion::rotation_between(&Vec3::z(), &sp.normal)
                .unwrap_or_else(|| UnitQuaternion::from_axis_angle(&Vec3::x_axis(), std::f64::consts::PI));
            let s = sp.spacing;
            let prim = GaussianPrimitive::new(
                sp.pos,
                [q.w, q.i, q.j, q.k],
                Vec3::new(s, s, 0.2 * s),
                procedural_color(&sp.pos, &freq, &phase),
                rng.gen_range(0.7..=1.0),
            )?;
            Ok((prim, Subgroup::Src))
        })
        .collect()
}

/// Renders `object` along `trajectory` into frames with alpha masks and depth.
pub fn render_sequence(object: &GaussianField, trajectory: &Trajectory, settings: &RenderSettings) -> Result<Vec<FrameObservation>> {
    if trajectory.is_empty() {
        return Err(Error::arg("empty trajectory"));
    }
    trajectory
        .poses
        .iter()
        .enumerate()
        .map(|(t, pose)| {
            let out = render(object, pose, &trajectory.intrinsics, settings)?;
            let mask = mask_from_alpha(&out, MASK_THRESHOLD)?;
            Ok(FrameObservation {
                rgb: out.color,
                mask,
                depth: Some(out.depth),
                t,
            })
        })
        .collect()
}

/// Synthetic scene: the ground-truth object at the world origin and its
/// rendered dataset. The object and trajectory share `params.seed`.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub object: GaussianField,
    pub dataset: Dataset,
}

pub fn synthesize(
    kind: ObjectKind,
    primitives: usize,
    params: &TrajectoryParams,
    width: usize,
    height: usize,
    settings: &RenderSettings,
) -> Result<SyntheticScene> {
    let trajectory = sample_trajectory(params, Vec3::zeros(), width, height)?;
    let object = make_object(kind, params.seed, primitives)?;
    let frames = render_sequence(&object, &trajectory, settings)?;
    Ok(SyntheticScene {
        object,
        dataset: Dataset {
            frames,
            poses: trajectory.poses,
            intrinsics: trajectory.intrinsics,
        },
    })
}

/// Largest index gap the curriculum allows at `progress ∈ [0, 1]`.
pub fn curriculum_gap(progress: f64, sequence_len: usize) -> usize {
    let p = progress.clamp(0.0, 1.0);
    ((1.0 + p * (sequence_len.saturating_sub(1)) as f64).round() as usize).max(1)
}

/// Draws `views_needed` strictly increasing frame indices whose consecutive
/// gaps do not exceed [`curriculum_gap`]. The draw is uniform over all such
/// index sets, so at full progress it is uniform over all subsets.
pub fn curriculum_sampler(progress: f64, sequence_len: usize, views_needed: usize, seed: u64) -> Result<Vec<usize>> {
    if views_needed > sequence_len {
        return Err(Error::arg("more views requested than frames available"));
    }
    if views_needed == 0 {
        return Ok(Vec::new());
    }
    let gap = curriculum_gap(progress, sequence_len);
    let n = sequence_len;
    // ways[m][i]: (scaled) number of valid continuations of length m starting at i
    let mut ways = vec![vec![1.0f64; n]];
    for m in 1..views_needed {
        let prev = &ways[m - 1];
        let mut cur = vec![0.0; n];
        for (i, c) in cur.iter_mut().enumerate() {
            *c = prev[i + 1..n.min(i + gap + 1)].iter().sum();
        }
        let max = cur.iter().copied().fold(0.0, f64::max);
        if max > 0.0 {
            cur.iter_mut().for_each(|v| *v /= max);
        }
        ways.push(cur);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pick = |candidates: std::ops::Range<usize>, weights: &[f64]| -> usize {
        let total: f64 = candidates.clone().map(|i| weights[i]).sum();
        let mut r = rng.gen::<f64>() * total;
        let mut last = candidates.start;
        for i in candidates {
            if weights[i] > 0.0 {
                last = i;
                if r < weights[i] {
                    return i;
                }
                r -= weights[i];
            }
        }
        last
    };
    let mut out = Vec::with_capacity(views_needed);
    let mut cur = pick(0..n, &ways[views_needed - 1]);
    out.push(cur);
    for m in (0..views_needed - 1).rev() {
        cur = pick(cur + 1..n.min(cur + gap + 1), &ways[m]);
        out.push(cur);
    }
    Ok(out)
}
