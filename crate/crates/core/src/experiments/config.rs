//! Experiment configuration: a single JSON document, schema-versioned,
//! unknown keys rejected.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::engine::ResamplePolicy;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelId {
    Lgm,
    Lorenz96,
    Fhn,
    FhnStatedep,
}

impl ModelId {
    pub fn is_diffusion(self) -> bool {
        matches!(self, ModelId::Fhn | ModelId::FhnStatedep)
    }
}

impl fmt::Display for ModelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ModelId::Lgm => "lgm",
            ModelId::Lorenz96 => "lorenz96",
            ModelId::Fhn => "fhn",
            ModelId::FhnStatedep => "fhn_statedep",
        };
        write!(f, "{s}")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterId {
    Bootstrap,
    OptimalNatural,
    LowNoise,
    Degenerate,
}

impl fmt::Display for FilterId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            FilterId::Bootstrap => "bootstrap",
            FilterId::OptimalNatural => "optimal_natural",
            FilterId::LowNoise => "low_noise",
            FilterId::Degenerate => "degenerate",
        };
        write!(f, "{s}")
    }
}

impl std::str::FromStr for FilterId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bootstrap" => Ok(FilterId::Bootstrap),
            "optimal_natural" => Ok(FilterId::OptimalNatural),
            "low_noise" => Ok(FilterId::LowNoise),
            "degenerate" => Ok(FilterId::Degenerate),
            other => Err(Error::Config(format!("unknown filter id '{other}'"))),
        }
    }
}

/// Settings for the empirical convergence harness.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Prop1Settings {
    #[serde(default = "default_reps")]
    pub n_reps: usize,
    #[serde(default = "default_r")]
    pub r: u32,
    #[serde(default = "default_prop1_steps")]
    pub n_steps: usize,
}

fn default_reps() -> usize {
    2000
}

fn default_r() -> u32 {
    2
}

fn default_prop1_steps() -> usize {
    10
}

impl Default for Prop1Settings {
    fn default() -> Self {
        Self { n_reps: default_reps(), r: default_r(), n_steps: default_prop1_steps() }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub model: ModelId,
    pub filter: FilterId,
    pub n_particles: usize,
    pub delta: f64,
    pub seed: u64,
    /// Steps (observation count); model default when absent.
    #[serde(default)]
    pub n_steps: Option<usize>,
    /// Delta sweep list for `mpf sweep`.
    #[serde(default)]
    pub deltas: Option<Vec<f64>>,
    #[serde(default)]
    pub resample: ResamplePolicy,
    /// Dyadic bridge level: 2^level substeps per observation interval
    /// (diffusion models only; exclusive with `grid_steps`).
    #[serde(default)]
    pub grid_level: Option<u32>,
    /// Uniform bridge substeps per observation interval (diffusion only;
    /// default 20).
    #[serde(default)]
    pub grid_steps: Option<usize>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// 1-based time indices at which weighted marginals are dumped.
    #[serde(default)]
    pub marginal_times: Option<Vec<usize>>,
    /// 1-based state components for the marginal dumps.
    #[serde(default)]
    pub marginal_components: Option<Vec<usize>>,
    /// Dump guided paths of the first few particles (diffusion only).
    #[serde(default)]
    pub dump_paths: bool,
    #[serde(default)]
    pub prop1: Option<Prop1Settings>,
}

impl ExperimentConfig {
    pub fn from_json_str(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != 1 {
            return Err(Error::Config(format!(
                "unsupported schema_version {} (expected 1)",
                self.schema_version
            )));
        }
        if self.n_particles < 1 {
            return Err(Error::Config("n_particles must be >= 1".into()));
        }
        if !(self.delta >= 0.0) || !self.delta.is_finite() {
            return Err(Error::Config("delta must be finite and >= 0".into()));
        }
        match self.filter {
            FilterId::Degenerate => {
                if self.delta != 0.0 {
                    return Err(Error::Config(
                        "the degenerate filter requires delta = 0".into(),
                    ));
                }
            }
            _ => {
                if self.delta == 0.0 {
                    return Err(Error::Config(format!(
                        "filter '{}' requires delta > 0; use the degenerate filter at delta = 0",
                        self.filter
                    )));
                }
            }
        }
        if let Some(deltas) = &self.deltas {
            if deltas.iter().any(|d| !(*d >= 0.0) || !d.is_finite()) {
                return Err(Error::Config("deltas must be finite and >= 0".into()));
            }
        }
        self.resample.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.model.is_diffusion() {
            if self.grid_level.is_some() && self.grid_steps.is_some() {
                return Err(Error::Config(
                    "grid_level and grid_steps are mutually exclusive".into(),
                ));
            }
            if self.grid_steps == Some(0) {
                return Err(Error::Config("grid_steps must be >= 1".into()));
            }
        } else {
            if self.grid_level.is_some() || self.grid_steps.is_some() {
                return Err(Error::Config(
                    "grid settings only apply to diffusion models".into(),
                ));
            }
            if self.dump_paths {
                return Err(Error::Config("dump_paths only applies to diffusion models".into()));
            }
        }
        if self.n_steps == Some(0) {
            return Err(Error::Config("n_steps must be >= 1".into()));
        }
        Ok(())
    }

    /// Observation count, with the model's default when unset.
    pub fn steps(&self) -> usize {
        self.n_steps.unwrap_or(match self.model {
            ModelId::Lgm => 20,
            ModelId::Lorenz96 => 400,
            ModelId::Fhn | ModelId::FhnStatedep => 100,
        })
    }

    /// Bridge substeps per observation interval (diffusion models).
    pub fn bridge_steps(&self) -> usize {
        match self.grid_level {
            Some(l) => 1usize << l,
            None => self.grid_steps.unwrap_or(20),
        }
    }

    /// Marginal dump times (1-based), model defaults when unset, clipped to
    /// the run length.
    pub fn marginal_times(&self) -> Vec<usize> {
        let steps = self.steps();
        let defaults: Vec<usize> = match self.model {
            ModelId::Lgm => vec![1, 6, 11, 16],
            ModelId::Lorenz96 => vec![1, 101, 201, 301],
            ModelId::Fhn | ModelId::FhnStatedep => vec![1, 34, 67, 100],
        };
        self.marginal_times
            .clone()
            .unwrap_or(defaults)
            .into_iter()
            .filter(|&t| t >= 1 && t <= steps)
            .collect()
    }

    /// Marginal components (1-based), model defaults when unset.
    pub fn marginal_components(&self) -> Vec<usize> {
        self.marginal_components.clone().unwrap_or(match self.model {
            ModelId::Lgm => vec![1],
            ModelId::Lorenz96 => vec![8],
            ModelId::Fhn | ModelId::FhnStatedep => vec![2],
        })
    }

    /// Canonical JSON echo (field order fixed by the struct).
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
