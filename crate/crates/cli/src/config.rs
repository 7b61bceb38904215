use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use gcnm_core::gcnm::GcnmTrainConfig;
use gcnm_core::render::RenderSpec;
use gcnm_core::simulate::cases::CaseConfig;
use gcnm_core::simulate::PhantomSpec;
use serde::{Deserialize, Serialize};

/// Training-set simulation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateConfig {
    pub n_samples: usize,
    pub seed: u64,
    pub nu: f64,
    pub phantom: PhantomSpec,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            n_samples: 100,
            seed: 11,
            nu: 0.005,
            phantom: PhantomSpec::training(),
        }
    }
}

/// Everything a run needs. Geometry, mesh sizes, test sets and the
/// classical solvers live in `cases`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub output_root: Option<PathBuf>,
    pub cases: CaseConfig,
    pub simulate: SimulateConfig,
    pub train: GcnmTrainConfig,
    pub render: RenderSpec,
}

/// Invalid configuration file; maps to the configuration exit code.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "configuration error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).map_err(|e| ConfigError(format!("{}: {e}", path.display())).into())
    }

    /// Writes the resolved configuration as `<dir>/<name>.config.toml`.
    pub fn write_resolved(&self, dir: &Path, name: &str) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(format!("{name}.config.toml"));
        let text = toml::to_string_pretty(self).context("serializing the resolved configuration")?;
        std::fs::write(&path, text)?;
        Ok(path)
    }
}
