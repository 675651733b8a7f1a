//! Image metrics, the normalized M_avg score, and the stage-wise streaming
//! novel-view evaluation.

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{render, RenderSettings};
use crate::types::{normalize_pose_sequence, CameraIntrinsics, CameraPose, FrameObservation, GaussianField, RgbImage, Vec3};

/// PSNR reported for identical images.
pub const PSNR_SENTINEL: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// Last timestep of the early stage and of the mid stage.
pub const EARLY_END: usize = 4;
pub const MID_END: usize = 10;

fn check_shapes(a: &RgbImage, b: &RgbImage) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::arg(format!(
            "image shapes differ: {}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    if a.is_empty() {
        return Err(Error::arg("empty image"));
    }
    Ok(())
}

/// Peak signal-to-noise ratio with peak 1.0.
pub fn psnr(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    check_shapes(a, b)?;
    let sum: f64 = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (0..3).map(|k| (x[k] - y[k]).powi(2)).sum::<f64>())
        .sum();
    let mse = sum / (3 * a.len()) as f64;
    if mse == 0.0 {
        return Ok(PSNR_SENTINEL);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

/// Normalized 1D Gaussian taps of the SSIM window.
pub fn ssim_kernel() -> [f64; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut g = [0.0; SSIM_WINDOW];
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.map(|v| v / s)
}

/// Valid-mode separable filtering of a `w × h` plane.
fn filter_valid(plane: &[f64], w: usize, h: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w + 1 - SSIM_WINDOW, h + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = g.iter().enumerate().map(|(i, gi)| gi * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = g.iter().enumerate().map(|(i, gi)| gi * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean structural similarity over valid window positions and channels.
pub fn ssim(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    check_shapes(a, b)?;
    let (w, h) = (a.width(), a.height());
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::arg(format!("ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} images")));
    }
    let g = ssim_kernel();
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..3 {
        let x: Vec<f64> = a.as_slice().iter().map(|p| p[ch]).collect();
        let y: Vec<f64> = b.as_slice().iter().map(|p| p[ch]).collect();
        let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> { x.iter().zip(&y).map(|(&p, &q)| f(p, q)).collect() };
        let mx = filter_valid(&x, w, h, &g);
        let my = filter_valid(&y, w, h, &g);
        let mxx = filter_valid(&prod(&|p, _| p * p), w, h, &g);
        let myy = filter_valid(&prod(&|_, q| q * q), w, h, &g);
        let mxy = filter_valid(&prod(&|p, q| p * q), w, h, &g);
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = mxx[i] - ux * ux;
            let vy = myy[i] - uy * uy;
            let cxy = mxy[i] - ux * uy;
            total += ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Normalized average of PSNR, SSIM and (when given) LPIPS. Without LPIPS the
/// mean runs over the first two terms only.
pub fn m_avg(psnr: f64, ssim: f64, lpips: Option<f64>) -> f64 {
    let p = ((psnr - 20.0) / 20.0).clamp(0.0, 1.0);
    match lpips {
        Some(l) => (p + ssim + (1.0 - (l / 0.6).clamp(0.0, 1.0))) / 3.0,
        None => (p + ssim) / 2.0,
    }
}

/// Random disjoint split of frame ids; inputs get `⌈n/2⌉` ids. Both lists are sorted.
pub fn split_input_target(frame_count: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut ids: Vec<usize> = (0..frame_count).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut input = ids[..frame_count.div_ceil(2)].to_vec();
    let mut target = ids[frame_count.div_ceil(2)..].to_vec();
    input.sort_unstable();
    target.sort_unstable();
    (input, target)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Early,
    Mid,
    Late,
}

impl Stage {
    /// Stage of a (1-based) streaming timestep; `None` for `t = 0`.
    pub fn of(t: usize) -> Option<Stage> {
        match t {
            0 => None,
            1..=EARLY_END => Some(Stage::Early),
            t if t <= MID_END => Some(Stage::Mid),
            _ => Some(Stage::Late),
        }
    }
}

/// A streaming model that is anchored on a reference frame and then fed one
/// frame at a time. Poses are relative to the reference (reference = identity)
/// and are only consumed by oracle components.
pub trait StreamingReconstructor {
    fn init(&mut self, reference: &FrameObservation, pose: &CameraPose, k: &CameraIntrinsics) -> Result<()>;
    fn step(&mut self, frame: &FrameObservation, pose: &CameraPose) -> Result<GaussianField>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewRecord {
    pub t: usize,
    pub view: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub lpips: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageMetrics {
    pub psnr: f64,
    pub ssim: f64,
    pub lpips: Option<f64>,
    pub m_avg: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Stages {
    pub early: Option<StageMetrics>,
    pub mid: Option<StageMetrics>,
    pub late: Option<StageMetrics>,
}

impl Stages {
    pub fn get(&self, stage: Stage) -> Option<&StageMetrics> {
        match stage {
            Stage::Early => self.early.as_ref(),
            Stage::Mid => self.mid.as_ref(),
            Stage::Late => self.late.as_ref(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolError {
    pub t: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub stages: Stages,
    /// 3 when LPIPS contributed to M_avg, 2 when it was omitted.
    pub m_avg_terms: usize,
    pub records: Vec<ViewRecord>,
    pub error: Option<ProtocolError>,
}

fn aggregate(records: &[ViewRecord], stage: Stage) -> Option<StageMetrics> {
    let rows: Vec<&ViewRecord> = records.iter().filter(|r| Stage::of(r.t) == Some(stage)).collect();
    if rows.is_empty() {
        return None;
    }
    let n = rows.len() as f64;
    let psnr = rows.iter().map(|r| r.psnr).sum::<f64>() / n;
    let ssim = rows.iter().map(|r| r.ssim).sum::<f64>() / n;
    let lpips = rows
        .iter()
        .map(|r| r.lpips)
        .collect::<Option<Vec<f64>>>()
        .map(|v| v.iter().sum::<f64>() / n);
    Some(StageMetrics {
        psnr,
        ssim,
        lpips,
        m_avg: m_avg(psnr, ssim, lpips),
        samples: rows.len(),
    })
}

impl StageReport {
    fn from_records(inputs: Vec<usize>, targets: Vec<usize>, records: Vec<ViewRecord>, error: Option<ProtocolError>) -> Self {
        let mut report = Self {
            inputs,
            targets,
            stages: Stages::default(),
            m_avg_terms: 2,
            records,
            error,
        };
        report.refresh();
        report
    }

    fn refresh(&mut self) {
        self.stages = Stages {
            early: aggregate(&self.records, Stage::Early),
            mid: aggregate(&self.records, Stage::Mid),
            late: aggregate(&self.records, Stage::Late),
        };
        let all_lpips = !self.records.is_empty() && self.records.iter().all(|r| r.lpips.is_some());
        self.m_avg_terms = if all_lpips { 3 } else { 2 };
    }

    /// Attaches externally computed LPIPS values keyed by `(t, view)`.
    pub fn attach_lpips(&mut self, table: &HashMap<(usize, usize), f64>) -> Result<()> {
        for r in &self.records {
            match table.get(&(r.t, r.view)) {
                Some(v) if v.is_finite() => {}
                Some(_) => return Err(Error::arg(format!("non-finite LPIPS for t={} view={}", r.t, r.view))),
                None => return Err(Error::arg(format!("missing LPIPS for t={} view={}", r.t, r.view))),
            }
        }
        for r in &mut self.records {
            r.lpips = table.get(&(r.t, r.view)).copied();
        }
        self.refresh();
        Ok(())
    }

    /// Mean PSNR over target views at each timestep, in order of `t`.
    pub fn psnr_by_step(&self) -> Vec<(usize, f64)> {
        let mut acc: Vec<(usize, f64, usize)> = Vec::new();
        for r in &self.records {
            match acc.last_mut() {
                Some(last) if last.0 == r.t => {
                    last.1 += r.psnr;
                    last.2 += 1;
                }
                _ => acc.push((r.t, r.psnr, 1)),
            }
        }
        acc.into_iter().map(|(t, s, n)| (t, s / n as f64)).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,view,psnr,ssim,lpips\n");
        for r in &self.records {
            let lp = r.lpips.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{},{},{},{},{}", r.t, r.view, r.psnr, r.ssim, lp);
        }
        out
    }

    /// Human-readable stage table.
    pub fn table(&self) -> String {
        let mut out = format!("{:<6} {:>8} {:>8} {:>8} {:>8} {:>7}\n", "stage", "PSNR", "SSIM", "LPIPS", "M_avg", "n");
        for (name, s) in [("early", &self.stages.early), ("mid", &self.stages.mid), ("late", &self.stages.late)] {
            match s {
                Some(m) => {
                    let lp = m.lpips.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
                    let _ = writeln!(out, "{name:<6} {:>8.3} {:>8.4} {lp:>8} {:>8.4} {:>7}", m.psnr, m.ssim, m.m_avg, m.samples);
                }
                None => {
                    let _ = writeln!(out, "{name:<6} {:>8}", "absent");
                }
            }
        }
        if self.m_avg_terms == 2 {
            out.push_str("M_avg without LPIPS: mean of the PSNR and SSIM terms\n");
        }
        if let Some(e) = &self.error {
            let _ = writeln!(out, "stopped at t={}: {}", e.t, e.message);
        }
        out
    }
}

/// Streams the input half of a sequence through `model` and scores the
/// current field at every held-out pose after each step.
///
/// The first input frame anchors the canonical frame (t = 0); steps are
/// numbered t = 1, 2, … for the remaining inputs.
pub fn run_protocol<R: StreamingReconstructor + ?Sized>(
    model: &mut R,
    frames: &[FrameObservation],
    poses: &[CameraPose],
    k: &CameraIntrinsics,
    seed: u64,
    settings: &RenderSettings,
) -> Result<StageReport> {
    if frames.len() != poses.len() {
        return Err(Error::arg("frame and pose counts differ"));
    }
    if frames.len() < 2 {
        return Err(Error::arg("the protocol needs at least two frames"));
    }
    let (inputs, targets) = split_input_target(frames.len(), seed);
    let reference = inputs[0];
    let mut ordered = vec![poses[reference]];
    ordered.extend(poses.iter().enumerate().filter(|(i, _)| *i != reference).map(|(_, p)| *p));
    let normalized = normalize_pose_sequence(&ordered)?;
    let mut relative = vec![CameraPose::identity(); poses.len()];
    relative[reference] = normalized[0];
    for (slot, (i, _)) in normalized[1..].iter().zip(poses.iter().enumerate().filter(|(i, _)| *i != reference)) {
        relative[i] = *slot;
    }

    if let Err(e) = model.init(&frames[reference], &relative[reference], k) {
        let err = ProtocolError { t: 0, message: e.to_string() };
        return Ok(StageReport::from_records(inputs, targets, Vec::new(), Some(err)));
    }
    let mut records = Vec::new();
    let mut error = None;
    for (t, &idx) in inputs.iter().enumerate().skip(1) {
        let field = match model.step(&frames[idx], &relative[idx]) {
            Ok(f) => f,
            Err(e) => {
                error = Some(ProtocolError { t, message: e.to_string() });
                break;
            }
        };
        let scored: Vec<Result<ViewRecord>> = targets
            .par_iter()
            .map(|&v| {
                let out = render(&field, &relative[v], k, settings)?;
                Ok(ViewRecord {
                    t,
                    view: v,
                    psnr: psnr(&out.color, &frames[v].rgb)?,
                    ssim: ssim(&out.color, &frames[v].rgb)?,
                    lpips: None,
                })
            })
            .collect();
        for r in scored {
            records.push(r?);
        }
    }
    Ok(StageReport::from_records(inputs, targets, records, error))
}

/// Fraction of `surface` points that have a primitive with opacity at least
/// `min_opacity` within `radius`.
pub fn surface_coverage(surface: &[Vec3], field: &GaussianField, radius: f64, min_opacity: f64) -> Result<f64> {
    if !(radius > 0.0) {
        return Err(Error::arg("coverage radius must be positive"));
    }
    if surface.is_empty() {
        return Err(Error::arg("no surface points"));
    }
    let cell = |p: &Vec3| -> (i64, i64, i64) {
        (
            (p.x / radius).floor() as i64,
            (p.y / radius).floor() as i64,
            (p.z / radius).floor() as i64,
        )
    };
    let mut grid: HashMap<(i64, i64, i64), Vec<Vec3>> = HashMap::new();
    for p in field.primitives().iter().filter(|p| f64::from(p.opacity) >= min_opacity) {
        let m = p.mean();
        grid.entry(cell(&m)).or_default().push(m);
    }
    let r2 = radius * radius;
    let covered = surface
        .par_iter()
        .filter(|s| {
            let (cx, cy, cz) = cell(s);
            (-1..=1).any(|dx| {
                (-1..=1).any(|dy| {
                    (-1..=1).any(|dz| {
                        grid.get(&(cx + dx, cy + dy, cz + dz))
                            .is_some_and(|pts| pts.iter().any(|p| (p - *s).norm_squared() <= r2))
                    })
                })
            })
        })
        .count();
    Ok(covered as f64 / surface.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{make_object, render_sequence, sample_trajectory, ObjectKind, TrajectoryParams};
    use crate::types::{GaussianPrimitive, Grid, Subgroup};
    use rand::Rng;

    fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> RgbImage {
        Grid::from_vec(w, h, (0..w * h).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect()).unwrap()
    }

    fn naive_ssim(a: &RgbImage, b: &RgbImage) -> f64 {
        let g = ssim_kernel();
        let (w, h) = (a.width(), a.height());
        let (c1, c2) = (0.0001, 0.0009);
        let mut total = 0.0;
        let mut n = 0.0;
        for ch in 0..3 {
            for y0 in 0..=h - 11 {
                for x0 in 0..=w - 11 {
                    let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for j in 0..11 {
                        for i in 0..11 {
                            let wt = g[i] * g[j];
                            let (p, q) = (a.get(x0 + i, y0 + j)[ch], b.get(x0 + i, y0 + j)[ch]);
                            mx += wt * p;
                            my += wt * q;
                        }
                    }
                    for j in 0..11 {
                        for i in 0..11 {
                            let wt = g[i] * g[j];
                            let (p, q) = (a.get(x0 + i, y0 + j)[ch] - mx, b.get(x0 + i, y0 + j)[ch] - my);
                            sxx += wt * p * p;
                            syy += wt * q * q;
                            sxy += wt * p * q;
                        }
                    }
                    total += (2.0 * mx * my + c1) * (2.0 * sxy + c2) / ((mx * mx + my * my + c1) * (sxx + syy + c2));
                    n += 1.0;
                }
            }
        }
        total / n
    }

    #[test]
    fn psnr_examples() {
        let a = Grid::filled(4, 4, [0.5; 3]);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_SENTINEL);
        let b = Grid::filled(4, 4, [0.6; 3]);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        assert!(psnr(&a, &Grid::filled(3, 4, [0.5; 3])).is_err());
    }

    #[test]
    fn psnr_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (a, b) = (random_image(&mut rng, 13, 9), random_image(&mut rng, 13, 9));
        let mut mse = 0.0;
        for y in 0..9 {
            for x in 0..13 {
                for k in 0..3 {
                    mse += (a.get(x, y)[k] - b.get(x, y)[k]).powi(2);
                }
            }
        }
        mse /= (13 * 9 * 3) as f64;
        assert!((psnr(&a, &b).unwrap() - (-10.0 * mse.log10())).abs() < 1e-9);
    }

    #[test]
    fn ssim_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_image(&mut rng, 16, 12);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let inv = a.map(|c| c.map(|v| 1.0 - v));
        assert!(ssim(&a, &inv).unwrap() < 1.0);
        let b = random_image(&mut rng, 16, 12);
        assert!((ssim(&a, &b).unwrap() - naive_ssim(&a, &b)).abs() < 1e-7);
        assert!(ssim(&Grid::filled(10, 20, [0.0; 3]), &Grid::filled(10, 20, [0.0; 3])).is_err());
    }

    #[test]
    fn m_avg_table_values() {
        assert!((m_avg(26.329, 0.921, Some(0.084)) - 0.699).abs() <= 0.001);
        assert!((m_avg(31.737, 0.969, Some(0.075)) - 0.810).abs() <= 0.001);
        assert_eq!(m_avg(40.0, 1.0, Some(0.0)), 1.0);
        assert_eq!(m_avg(40.0, 0.5, None), 0.75);
    }

    #[test]
    fn split_properties() {
        let (i, t) = split_input_target(4, 3);
        assert_eq!((i.len(), t.len()), (2, 2));
        assert!(i.iter().all(|x| !t.contains(x)));
        assert_eq!(split_input_target(4, 3), (i, t));
        let (i, t) = split_input_target(7, 11);
        assert_eq!(i.len(), 4);
        let mut all: Vec<usize> = i.into_iter().chain(t).collect();
        all.sort_unstable();
        assert_eq!(all, (0..7).collect::<Vec<_>>());
    }

    #[test]
    fn stages_partition_timesteps() {
        let stages: Vec<Option<Stage>> = (0..13).map(Stage::of).collect();
        assert_eq!(stages[0], None);
        assert!(stages[1..=4].iter().all(|s| *s == Some(Stage::Early)));
        assert!(stages[5..=10].iter().all(|s| *s == Some(Stage::Mid)));
        assert!(stages[11..].iter().all(|s| *s == Some(Stage::Late)));
    }

    /// Emits a fixed canonical field at every step.
    struct Constant(GaussianField);

    impl StreamingReconstructor for Constant {
        fn init(&mut self, _: &FrameObservation, _: &CameraPose, _: &CameraIntrinsics) -> Result<()> {
            Ok(())
        }
        fn step(&mut self, _: &FrameObservation, _: &CameraPose) -> Result<GaussianField> {
            Ok(self.0.clone())
        }
    }

    struct FailsAt(usize, usize);

    impl StreamingReconstructor for FailsAt {
        fn init(&mut self, _: &FrameObservation, _: &CameraPose, _: &CameraIntrinsics) -> Result<()> {
            Ok(())
        }
        fn step(&mut self, _: &FrameObservation, _: &CameraPose) -> Result<GaussianField> {
            self.1 += 1;
            if self.1 == self.0 {
                return Err(Error::Fusion("boom".into()));
            }
            Ok(GaussianField::new())
        }
    }

    /// Scene whose reference input pose is exactly the identity.
    fn canonical_scene(frames: usize, seed: u64) -> (GaussianField, Vec<FrameObservation>, Vec<CameraPose>, CameraIntrinsics) {
        let params = TrajectoryParams {
            frames,
            seed,
            ..Default::default()
        };
        let tr = sample_trajectory(&params, Vec3::zeros(), 32, 32).unwrap();
        let reference = split_input_target(frames, seed).0[0];
        let to_canonical = tr.poses[reference];
        let inv = to_canonical.inverse();
        let object = make_object(ObjectKind::Sphere, seed, 800).unwrap().transformed(&to_canonical);
        let mut tr = tr;
        tr.poses = tr.poses.iter().map(|p| p.compose(&inv)).collect();
        tr.poses[reference] = CameraPose::identity();
        let frames = render_sequence(&object, &tr, &RenderSettings::default()).unwrap();
        (object, frames, tr.poses, tr.intrinsics)
    }

    #[test]
    fn ground_truth_field_hits_sentinel() {
        let (object, frames, poses, k) = canonical_scene(8, 5);
        let report = run_protocol(&mut Constant(object), &frames, &poses, &k, 5, &RenderSettings::default()).unwrap();
        assert_eq!(report.records.len(), 3 * 4);
        assert!(report.records.iter().all(|r| r.psnr == PSNR_SENTINEL));
        assert!(report.stages.late.is_none() && report.stages.mid.is_none());
        assert_eq!(report.stages.early.unwrap().psnr, PSNR_SENTINEL);
        assert_eq!(report.m_avg_terms, 2);
    }

    #[test]
    fn short_sequence_lacks_late_stage() {
        let (_, frames, poses, k) = canonical_scene(4, 2);
        let report = run_protocol(&mut Constant(GaussianField::new()), &frames, &poses, &k, 2, &RenderSettings::default()).unwrap();
        assert!(report.stages.late.is_none());
        assert_eq!(report.records.len(), 2);
        assert!(report.to_csv().starts_with("t,view,psnr,ssim,lpips\n"));
        let json: serde_json::Value = serde_json::from_str(&report.to_json().unwrap()).unwrap();
        assert!(json["stages"]["late"].is_null());
        assert!(report.table().contains("absent"));
    }

    #[test]
    fn failure_gives_partial_report() {
        let (_, frames, poses, k) = canonical_scene(10, 7);
        let report = run_protocol(&mut FailsAt(3, 0), &frames, &poses, &k, 7, &RenderSettings::default()).unwrap();
        let err = report.error.as_ref().unwrap();
        assert_eq!(err.t, 3);
        assert!(report.records.iter().all(|r| r.t < 3));
        assert_eq!(report.records.len(), 2 * 5);
    }

    #[test]
    fn single_target_stage_mean_is_step_mean() {
        let (object, frames, poses, k) = canonical_scene(3, 1);
        let blurred: GaussianField = object
            .iter()
            .map(|(p, s)| (GaussianPrimitive { opacity: p.opacity * 0.5, ..*p }, s))
            .collect();
        let report = run_protocol(&mut Constant(blurred), &frames, &poses, &k, 1, &RenderSettings::default()).unwrap();
        assert_eq!(report.targets.len(), 1);
        let by_step = report.psnr_by_step();
        let mean = by_step.iter().map(|(_, p)| p).sum::<f64>() / by_step.len() as f64;
        assert!((report.stages.early.unwrap().psnr - mean).abs() < 1e-12);
    }

    #[test]
    fn lpips_attachment_switches_to_three_terms() {
        let (_, frames, poses, k) = canonical_scene(4, 2);
        let mut report = run_protocol(&mut Constant(GaussianField::new()), &frames, &poses, &k, 2, &RenderSettings::default()).unwrap();
        let table: HashMap<(usize, usize), f64> = report.records.iter().map(|r| ((r.t, r.view), 0.3)).collect();
        assert!(report.attach_lpips(&HashMap::new()).is_err());
        report.attach_lpips(&table).unwrap();
        assert_eq!(report.m_avg_terms, 3);
        let early = report.stages.early.unwrap();
        assert_eq!(early.lpips, Some(0.3));
        assert!((early.m_avg - m_avg(early.psnr, early.ssim, Some(0.3))).abs() < 1e-15);
    }

    #[test]
    fn coverage_counts_nearby_visible_primitives() {
        let surface = vec![Vec3::zeros(), Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 5.0, 0.0)];
        let mut field = GaussianField::new();
        field.push(GaussianPrimitive::isotropic(Vec3::new(0.01, 0.0, 0.0), 0.1, [0.5; 3], 1.0).unwrap(), Subgroup::Src);
        field.push(GaussianPrimitive::isotropic(Vec3::new(1.0, 0.015, 0.0), 0.1, [0.5; 3], 0.0).unwrap(), Subgroup::Src);
        assert!((surface_coverage(&surface, &field, 0.02, 1e-3).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert!((surface_coverage(&surface, &field, 0.02, 0.0).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!(surface_coverage(&[], &field, 0.02, 0.0).is_err());
    }
}
