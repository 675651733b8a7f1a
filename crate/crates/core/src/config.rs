//! Run configuration loaded from TOML or JSON.
//!
//! Every section is optional; omitted keys take their defaults. Files ending
//! in `.json` are parsed as JSON, everything else as TOML.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::pipeline::PipelineConfig;
use crate::raster::RenderSettings;
use crate::synth::{ObjectKind, TrajectoryParams};
use crate::types::RenderFilter;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub warmup: LossWeights,
    pub main: LossWeights,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            warmup: LossWeights::warmup(),
            main: LossWeights::main_stage(),
        }
    }
}

/// Synthetic dataset settings. The object seed is `trajectory.seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerateConfig {
    pub object: ObjectKind,
    pub primitives: usize,
    pub width: usize,
    pub height: usize,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            object: ObjectKind::Sphere,
            primitives: 6000,
            width: 64,
            height: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub split_seed: u64,
    /// Surface coverage radius, in world units.
    pub coverage_radius: f64,
    pub coverage_min_opacity: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            split_seed: 0,
            coverage_radius: 0.02,
            coverage_min_opacity: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub frames: usize,
    pub repetitions: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            frames: 200,
            repetitions: 3,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub pipeline: PipelineConfig,
    pub render: RenderSettings,
    pub filter: RenderFilter,
    pub trajectory: TrajectoryParams,
    pub losses: LossConfig,
    pub generate: GenerateConfig,
    pub eval: EvalConfig,
    pub bench: BenchConfig,
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        self.pipeline.validate()?;
        self.render.validate()?;
        self.trajectory.validate()?;
        self.losses.warmup.validate()?;
        self.losses.main.validate()?;
        if self.generate.primitives == 0 || self.generate.width == 0 || self.generate.height == 0 {
            return Err(Error::Config("generate sizes must be positive".into()));
        }
        if !(self.eval.coverage_radius > 0.0) {
            return Err(Error::Config("coverage_radius must be positive".into()));
        }
        if self.bench.repetitions == 0 {
            return Err(Error::Config("bench repetitions must be positive".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Config = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(Error::at_path(path))?;
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
            Self::from_json(&text)
        } else {
            Self::from_toml(&text)
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }
}
