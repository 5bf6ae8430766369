use std::path::Path;

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::error::Error;
use crate::evalsuite::{PipelineConfig, ProbeConfig, SweepAxis};
use crate::mselab::{ToyEstimatorSpec, ToyWeighting};
use crate::synthworld::WorldConfig;
use crate::trainer::TrainConfig;

/// Everything a command needs. Only `seed` is required in the file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    #[serde(default)]
    pub world: WorldConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub probe: ProbeConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub mselab: MseLabConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Fresh labeled instances for the downstream probe.
    pub instances: usize,
    /// Probe every this many epochs while training.
    pub every: Option<usize>,
    /// Quantile groups for `ood-eval`.
    pub groups: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            instances: 1000,
            every: None,
            groups: 5,
        }
    }
}

/// Paired comparison for `mse-lab`. The `weighting` inside `toy` is replaced by
/// `baseline` and `candidate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MseLabConfig {
    pub seeds: usize,
    pub baseline: ToyWeighting,
    pub candidate: ToyWeighting,
    pub toy: ToyEstimatorSpec,
}

impl Default for MseLabConfig {
    fn default() -> Self {
        Self {
            seeds: 100,
            baseline: ToyWeighting::Uniform,
            candidate: ToyWeighting::Uota { tau: 1.0 },
            toy: ToyEstimatorSpec {
                trials: 2,
                ..ToyEstimatorSpec::default()
            },
        }
    }
}

impl MseLabConfig {
    pub fn specs(&self) -> (ToyEstimatorSpec, ToyEstimatorSpec) {
        (self.toy.with_weighting(self.baseline), self.toy.with_weighting(self.candidate))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub axis: SweepAxis,
    pub grid: Vec<f64>,
    pub seeds: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            axis: SweepAxis::ViewsPerInstance,
            grid: vec![2.0, 4.0, 8.0],
            seeds: 3,
        }
    }
}

impl Config {
    /// A config holding only `seed`, every other field at its default.
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            world: WorldConfig::default(),
            train: TrainConfig::default(),
            probe: ProbeConfig::default(),
            eval: EvalConfig::default(),
            mselab: MseLabConfig::default(),
            sweep: SweepConfig::default(),
        }
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            world: self.world.clone(),
            train: self.train.clone(),
            probe: self.probe,
            eval_instances: self.eval.instances,
            eval_every: self.eval.every,
        }
    }

    pub fn validate(&self) -> crate::Result<()> {
        self.pipeline().validate()?;
        if self.eval.groups < 2 {
            return Err(Error::arg("groups", "must be >= 2"));
        }
        let (b, c) = self.mselab.specs();
        b.validate()?;
        c.validate()?;
        if self.mselab.seeds == 0 {
            return Err(Error::arg("seeds", "must be >= 1"));
        }
        if self.sweep.seeds == 0 {
            return Err(Error::arg("seeds", "must be >= 1"));
        }
        if self.sweep.grid.is_empty() {
            return Err(Error::arg("grid", "must not be empty"));
        }
        for &v in &self.sweep.grid {
            self.sweep.axis.apply(&self.pipeline(), v)?;
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String, HarnessError> {
        toml::to_string(self).map_err(|e| HarnessError::Config(e.to_string()))
    }
}

/// Parse and validate a TOML document.
pub fn parse_config(text: &str) -> Result<Config, HarnessError> {
    let config: Config = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
    config.validate()?;
    Ok(config)
}

pub fn load_config(path: &Path) -> Result<Config, HarnessError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| HarnessError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    parse_config(&text)
}
