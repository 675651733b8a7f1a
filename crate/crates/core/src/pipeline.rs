//! The causal streaming loop: encode the incoming frame, read the memory in
//! both orientation modes, fuse into a canonical Gaussian field, write back.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::encoders::{
    decode_summaries, direction_oracle, invisible_primitive, latent_key_stub, value_stub, DirectionEstimate, FeatureMap, PatchGrid,
    PatchSummary, PROJECTION_SEED,
};
use crate::error::{Error, Result};
use crate::eval::StreamingReconstructor;
use crate::memory::{MemoryBank, MemoryConfig, TokenBlock};
use crate::types::{CameraIntrinsics, CameraPose, FrameObservation, GaussianField, GaussianPrimitive, Subgroup, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub memory: MemoryConfig,
    /// Square patch edge in pixels; the patch count must equal `memory.tokens_per_view`.
    pub patch_size: usize,
    /// Length of every latent key; larger values sharpen attention.
    pub key_scale: f64,
    /// Angular error injected into the direction oracle, in degrees.
    pub noise_deg: f64,
    pub seed: u64,
    pub projection_seed: u64,
    /// Back-projected pixel splat size in pixel footprints.
    pub pixel_scale: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            memory: MemoryConfig::desk(),
            patch_size: 8,
            key_scale: 12.0,
            noise_deg: 0.0,
            seed: 0,
            projection_seed: PROJECTION_SEED,
            pixel_scale: 0.2,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.memory.validate()?;
        if self.patch_size == 0 {
            return Err(Error::arg("patch_size must be positive"));
        }
        if !(self.key_scale.is_finite() && self.key_scale > 0.0) {
            return Err(Error::arg("key_scale must be positive"));
        }
        if !(self.noise_deg.is_finite() && self.noise_deg >= 0.0) {
            return Err(Error::arg("noise_deg must be >= 0"));
        }
        if !(self.pixel_scale.is_finite() && self.pixel_scale > 0.0) {
            return Err(Error::arg("pixel_scale must be positive"));
        }
        Ok(())
    }
}

/// Everything a fusion model sees at one step. Poses map canonical
/// coordinates into each camera; the reference pose is the identity.
pub struct FusionInputs<'a> {
    pub reference: &'a FrameObservation,
    pub reference_pose: &'a CameraPose,
    pub reference_tokens: &'a TokenBlock,
    pub source: &'a FrameObservation,
    pub source_pose: &'a CameraPose,
    pub source_tokens: &'a TokenBlock,
    pub intrinsics: &'a CameraIntrinsics,
    pub aligned: &'a TokenBlock,
    pub complementary: &'a TokenBlock,
    pub aligned_summaries: &'a [PatchSummary],
    pub complementary_summaries: &'a [PatchSummary],
}

pub struct FusionOutput {
    /// `4N` primitives: `2N` memory, then `N` reference, then `N` source.
    pub field: GaussianField,
    /// P×C value tokens of the source frame for write-back.
    pub values: TokenBlock,
}

pub trait FusionInterface {
    fn fuse(&self, inputs: &FusionInputs<'_>) -> Result<FusionOutput>;
}

/// Depth-oracle fusion: back-projects masked pixels and expands decoded
/// memory summaries into coarse surface patches.
#[derive(Debug, Clone)]
pub struct BaselineFusion {
    pub map: FeatureMap,
    pub patch_size: usize,
    pub pixel_scale: f64,
}

/// One primitive per pixel: masked pixels become splats at their
/// back-projected depth, every other pixel an invisible placeholder.
pub fn pixel_primitives(frame: &FrameObservation, pose: &CameraPose, k: &CameraIntrinsics, pixel_scale: f64) -> Result<Vec<GaussianPrimitive>> {
    let depth = frame
        .depth
        .as_ref()
        .ok_or_else(|| Error::Unsupported("depth-oracle fusion needs a depth map".into()))?;
    if frame.width() != k.width || frame.height() != k.height || !depth.same_shape(&frame.mask) {
        return Err(Error::arg("frame, depth and intrinsics sizes differ"));
    }
    let inv = pose.inverse();
    let w = frame.width();
    let footprint = 1.0 / k.fx.min(k.fy);
    frame
        .mask
        .as_slice()
        .iter()
        .zip(depth.as_slice())
        .zip(frame.rgb.as_slice())
        .enumerate()
        .map(|(i, ((&m, &d), &c))| {
            if !(m && d > 0.0 && d.is_finite()) {
                return Ok(invisible_primitive());
            }
            let p = inv.transform_point(&k.unproject((i % w) as f64 + 0.5, (i / w) as f64 + 0.5, d));
            GaussianPrimitive::isotropic(p, pixel_scale * d * footprint, c, 1.0)
        })
        .collect()
}

impl FusionInterface for BaselineFusion {
    fn fuse(&self, inputs: &FusionInputs<'_>) -> Result<FusionOutput> {
        let k = inputs.intrinsics;
        let n = k.pixel_count();
        let p = inputs.aligned_summaries.len();
        if p == 0 || !n.is_multiple_of(p) || inputs.complementary_summaries.len() != p {
            return Err(Error::Fusion(format!("{n} pixels cannot be split over {p} memory summaries")));
        }
        let per = n / p;
        let mut field = GaussianField::with_capacity(4 * n);
        for s in inputs.aligned_summaries.iter().chain(inputs.complementary_summaries) {
            for prim in s.expand(per) {
                field.push(prim, Subgroup::Mem);
            }
        }
        for prim in pixel_primitives(inputs.reference, inputs.reference_pose, k, self.pixel_scale)? {
            field.push(prim, Subgroup::Ref);
        }
        for prim in pixel_primitives(inputs.source, inputs.source_pose, k, self.pixel_scale)? {
            field.push(prim, Subgroup::Src);
        }
        let (values, _) = value_stub(inputs.source, inputs.source_pose, k, self.patch_size, &self.map)?;
        Ok(FusionOutput { field, values })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub t: u64,
    pub bank_size: usize,
    pub removed: usize,
    /// Mean attention entropy over both reads (nats).
    pub read_entropy: f64,
    pub tau: f64,
    pub direction: DirectionEstimate,
    pub step_ms: f64,
}

/// Live state after [`PipelineState::init`].
pub struct PipelineState {
    config: PipelineConfig,
    intrinsics: CameraIntrinsics,
    map: FeatureMap,
    fusion: Box<dyn FusionInterface + Send + Sync>,
    reference: FrameObservation,
    reference_pose: CameraPose,
    reference_keys: TokenBlock,
    reference_direction: Vec3,
    bank: MemoryBank,
    t: u64,
}

impl std::fmt::Debug for PipelineState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PipelineState")
            .field("t", &self.t)
            .field("bank_size", &self.bank.len())
            .finish_non_exhaustive()
    }
}

impl PipelineState {
    /// Anchors the canonical frame on `reference` and writes its tokens.
    /// `pose` is the reference camera relative to the canonical frame and is
    /// normally the identity.
    pub fn init(reference: &FrameObservation, pose: &CameraPose, k: &CameraIntrinsics, config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        let map = FeatureMap::new(config.memory.feature_dim, config.projection_seed)?;
        let fusion = BaselineFusion {
            map: map.clone(),
            patch_size: config.patch_size,
            pixel_scale: config.pixel_scale,
        };
        Self::init_with(reference, pose, k, config, Box::new(fusion))
    }

    pub fn init_with(
        reference: &FrameObservation,
        pose: &CameraPose,
        k: &CameraIntrinsics,
        config: PipelineConfig,
        fusion: Box<dyn FusionInterface + Send + Sync>,
    ) -> Result<Self> {
        config.validate()?;
        if reference.mask.count() == 0 {
            return Err(Error::Init("reference mask is empty".into()));
        }
        reference.validate().map_err(|e| Error::Init(e.to_string()))?;
        if reference.width() != k.width || reference.height() != k.height {
            return Err(Error::Init("reference size differs from the intrinsics".into()));
        }
        let grid = PatchGrid::new(k.width, k.height, config.patch_size)?;
        if grid.count() != config.memory.tokens_per_view {
            return Err(Error::Init(format!(
                "{} patches per frame but the memory expects {} tokens per view",
                grid.count(),
                config.memory.tokens_per_view
            )));
        }
        let map = FeatureMap::new(config.memory.feature_dim, config.projection_seed)?;
        let keys = latent_key_stub(reference, config.patch_size, &map, config.key_scale)?;
        let direction = direction_oracle(pose, config.noise_deg, config.seed)?.key();
        let (values, _) = value_stub(reference, pose, k, config.patch_size, &map)?;
        let mut bank = MemoryBank::new(config.memory)?;
        bank.write(&keys, &direction, &values, 0)?;
        Ok(Self {
            config,
            intrinsics: *k,
            map,
            fusion,
            reference: reference.clone(),
            reference_pose: *pose,
            reference_keys: keys,
            reference_direction: direction,
            bank,
            t: 0,
        })
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn bank(&self) -> &MemoryBank {
        &self.bank
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn intrinsics(&self) -> &CameraIntrinsics {
        &self.intrinsics
    }

    pub fn reference_direction(&self) -> Vec3 {
        self.reference_direction
    }

    /// Processes one frame. On error the bank and `t` are left untouched.
    pub fn step(&mut self, frame: &FrameObservation, pose: &CameraPose) -> Result<(GaussianField, StepDiagnostics)> {
        let start = Instant::now();
        frame.validate()?;
        let t = self.t + 1;
        let cfg = &self.config;
        let keys = latent_key_stub(frame, cfg.patch_size, &self.map, cfg.key_scale)?;
        let direction = direction_oracle(pose, cfg.noise_deg, cfg.seed.wrapping_add(t))?;
        let kt = direction.key();
        if self.bank.is_empty() {
            return Err(Error::EmptyBank);
        }
        let readout = self.bank.compute_readout(&keys, &self.reference_direction, &kt, direction.sigma)?;
        let aligned_summaries = decode_summaries(&readout.aligned, &self.map);
        let complementary_summaries = decode_summaries(&readout.complementary, &self.map);
        let out = self.fusion.fuse(&FusionInputs {
            reference: &self.reference,
            reference_pose: &self.reference_pose,
            reference_tokens: &self.reference_keys,
            source: frame,
            source_pose: pose,
            source_tokens: &keys,
            intrinsics: &self.intrinsics,
            aligned: &readout.aligned,
            complementary: &readout.complementary,
            aligned_summaries: &aligned_summaries,
            complementary_summaries: &complementary_summaries,
        })?;
        let n = self.intrinsics.pixel_count();
        let split = (out.field.count(Subgroup::Mem), out.field.count(Subgroup::Ref), out.field.count(Subgroup::Src));
        if split != (2 * n, n, n) {
            return Err(Error::Fusion(format!("fusion produced subgroups {split:?}, expected ({}, {n}, {n})", 2 * n)));
        }
        let mut bank = self.bank.clone();
        bank.record_usage(&readout)?;
        let removed = bank.write(&keys, &kt, &out.values, t)?;
        self.bank = bank;
        self.t = t;
        let diagnostics = StepDiagnostics {
            t,
            bank_size: self.bank.len(),
            removed: removed.len(),
            read_entropy: readout.mean_entropy(),
            tau: readout.tau,
            direction,
            step_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        Ok((out.field, diagnostics))
    }
}

/// Owns a [`PipelineState`] once initialized; usable with the evaluation protocol.
#[derive(Debug)]
pub struct Pipeline {
    pub config: PipelineConfig,
    state: Option<PipelineState>,
    history: Vec<StepDiagnostics>,
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            state: None,
            history: Vec::new(),
        })
    }

    pub fn state(&self) -> Option<&PipelineState> {
        self.state.as_ref()
    }

    pub fn history(&self) -> &[StepDiagnostics] {
        &self.history
    }
}

impl StreamingReconstructor for Pipeline {
    fn init(&mut self, reference: &FrameObservation, pose: &CameraPose, k: &CameraIntrinsics) -> Result<()> {
        self.state = None;
        self.history.clear();
        self.state = Some(PipelineState::init(reference, pose, k, self.config)?);
        Ok(())
    }

    fn step(&mut self, frame: &FrameObservation, pose: &CameraPose) -> Result<GaussianField> {
        let state = self.state.as_mut().ok_or_else(|| Error::Init("step before init".into()))?;
        let (field, diag) = state.step(frame, pose)?;
        self.history.push(diag);
        Ok(field)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub frames: usize,
    pub repetitions: usize,
    pub capacity_tokens: usize,
    /// Median step time per frame over repetitions; frame 0 is the init.
    pub frame_ms: Vec<f64>,
    pub bank_tokens: Vec<usize>,
    /// First frame after which the bank was full.
    pub capacity_reached_at: Option<usize>,
    pub early_window: (usize, usize),
    pub late_window: (usize, usize),
    pub early_median_ms: f64,
    pub late_median_ms: f64,
    pub late_over_early: f64,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Runs the stream `repetitions` times and compares median step times of
/// frames 10–30 against the last 31 frames (170–200 for a 201-frame stream).
pub fn bench(
    config: &PipelineConfig,
    frames: &[FrameObservation],
    poses: &[CameraPose],
    k: &CameraIntrinsics,
    repetitions: usize,
) -> Result<BenchReport> {
    if frames.len() < 50 {
        return Err(Error::arg("bench needs at least 50 frames"));
    }
    if frames.len() != poses.len() || repetitions == 0 {
        return Err(Error::arg("need one pose per frame and at least one repetition"));
    }
    let rel = crate::types::normalize_pose_sequence(poses)?;
    let mut times = vec![Vec::with_capacity(repetitions); frames.len()];
    let mut tokens = vec![0; frames.len()];
    for _ in 0..repetitions {
        let start = Instant::now();
        let mut state = PipelineState::init(&frames[0], &rel[0], k, *config)?;
        times[0].push(start.elapsed().as_secs_f64() * 1e3);
        tokens[0] = state.bank().len();
        for i in 1..frames.len() {
            let start = Instant::now();
            state.step(&frames[i], &rel[i])?;
            times[i].push(start.elapsed().as_secs_f64() * 1e3);
            tokens[i] = state.bank().len();
        }
    }
    let frame_ms: Vec<f64> = times.iter().map(|t| median(t)).collect();
    let cap = config.memory.capacity_tokens;
    let capacity_reached_at = tokens.iter().position(|&n| n + config.memory.tokens_per_view > cap);
    let early_window = (10, 30);
    let late_window = (frames.len().saturating_sub(31).max(31), frames.len() - 1);
    let early = median(&frame_ms[early_window.0..=early_window.1]);
    let late = median(&frame_ms[late_window.0..=late_window.1]);
    Ok(BenchReport {
        frames: frames.len(),
        repetitions,
        capacity_tokens: cap,
        frame_ms,
        bank_tokens: tokens,
        capacity_reached_at,
        early_window,
        late_window,
        early_median_ms: early,
        late_median_ms: late,
        late_over_early: late / early,
    })
}
