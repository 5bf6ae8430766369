//! Evaluation on frozen features: linear probes, weight-vs-flag AUROC,
//! quantile-group separability and parameter sweeps.

mod auroc;
mod groups;
mod probe;

pub use auroc::{auroc, weight_ood_auroc, PAIR_COUNT_LIMIT};
pub use groups::{quantile_group_separability, quantile_groups, CleanPool, GroupAccuracy, GroupReport};
pub use probe::{linear_probe, softmax_objective, ProbeConfig, ProbeResult, SoftmaxProbe};

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::synthworld::{eval_instances, generate, Instances, ToyWorldSpec, ViewDataset, WorldConfig};
use crate::trainer::{dataset_weights, fit_with_monitor, EncoderState, TrainConfig, TrainHistory, Weighting};
use crate::weights::WeightTable;

/// World, training and probe settings for one end-to-end run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub world: WorldConfig,
    pub train: TrainConfig,
    pub probe: ProbeConfig,
    /// Fresh labeled instances encoded for the downstream probe.
    pub eval_instances: usize,
    /// Probe the encoder every this many epochs during training.
    pub eval_every: Option<usize>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            world: WorldConfig::default(),
            train: TrainConfig::default(),
            probe: ProbeConfig::default(),
            eval_instances: 1000,
            eval_every: None,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.train.validate(self.world.views_per_instance)?;
        self.probe.validate()?;
        if self.eval_instances < 4 {
            return Err(Error::arg("eval_instances", "must be >= 4"));
        }
        if self.eval_every == Some(0) {
            return Err(Error::arg("eval_every", "must be >= 1"));
        }
        Ok(())
    }
}

pub struct PipelineRun {
    pub spec: ToyWorldSpec,
    pub dataset: ViewDataset,
    pub encoder: EncoderState,
    pub history: TrainHistory,
    pub probe: ProbeResult,
    /// Table of the final encoder over the whole training set, one batch.
    pub weights: WeightTable,
    /// `None` when the dataset has no flagged views, or only flagged views.
    pub auroc: Option<f64>,
}

/// Probe accuracy of `encoder` on labeled instances.
pub fn probe_encoder(
    encoder: &EncoderState,
    eval: &Instances,
    config: &ProbeConfig,
    seed: u64,
) -> Result<ProbeResult> {
    let features = encoder.encode(eval.values.view())?;
    linear_probe(
        features.view(),
        &eval.labels,
        config,
        &mut rng::substream(seed, rng::EVAL, 1),
    )
}

/// Generate, train with `weighting`, probe and score weights, all from `seed`.
pub fn run_pipeline(config: &PipelineConfig, seed: u64, weighting: Weighting) -> Result<PipelineRun> {
    config.validate()?;
    let spec = ToyWorldSpec::new(config.world.clone(), seed)?;
    let dataset = generate(&spec, seed)?;
    let eval = eval_instances(&spec, config.eval_instances, seed)?;
    let train = TrainConfig {
        weighting,
        ..config.train.clone()
    };
    let (encoder, history) = fit_with_monitor(&train, &dataset.training_set(), seed, |epoch, state| {
        let every = config.eval_every?;
        ((epoch + 1) % every == 0)
            .then(|| probe_encoder(state, &eval, &config.probe, seed).ok().map(|p| p.test_accuracy))
            .flatten()
    })?;
    let probe = probe_encoder(&encoder, &eval, &config.probe, seed)?;
    let weights = dataset_weights(&encoder, &dataset.training_set(), &config.train.weights)?;
    let flagged = dataset.flagged_count();
    let auroc = if flagged > 0 && flagged < dataset.num_views() {
        Some(weight_ood_auroc(&weights, dataset.ood_flags())?)
    } else {
        None
    };
    Ok(PipelineRun {
        spec,
        dataset,
        encoder,
        history,
        probe,
        weights,
        auroc,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    NuisanceScale,
    ViewsPerInstance,
    Tau,
    OodRate,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::NuisanceScale => "nuisance_scale",
            SweepAxis::ViewsPerInstance => "views_per_instance",
            SweepAxis::Tau => "tau",
            SweepAxis::OodRate => "ood_rate",
        }
    }

    /// `base` with this axis set to `value`.
    pub fn apply(self, base: &PipelineConfig, value: f64) -> Result<PipelineConfig> {
        let mut c = base.clone();
        match self {
            SweepAxis::NuisanceScale => c.world.nuisance_scale = value,
            SweepAxis::ViewsPerInstance => {
                if value < 1.0 || value.fract() != 0.0 {
                    return Err(Error::arg("grid", format!("views per instance must be a positive integer, got {value}")));
                }
                c.world.views_per_instance = value as usize;
            }
            SweepAxis::Tau => c.train.weights.tau = value,
            SweepAxis::OodRate => c.world.ood_rate = value,
        }
        c.validate()?;
        Ok(c)
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nuisance" | "nuisance_scale" => Ok(SweepAxis::NuisanceScale),
            "views" | "views_per_instance" => Ok(SweepAxis::ViewsPerInstance),
            "tau" => Ok(SweepAxis::Tau),
            "ood" | "ood_rate" => Ok(SweepAxis::OodRate),
            other => Err(Error::arg("axis", format!("unknown sweep axis {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis_value: f64,
    pub seed: u64,
    pub method: String,
    pub train_acc: f64,
    pub test_acc: f64,
    pub auroc: Option<f64>,
}

/// Seed of the `k`-th paired run of a sweep rooted at `seed`.
pub fn sweep_seed(seed: u64, k: usize) -> u64 {
    rng::child_seed(seed, "sweep", k as u64)
}

/// Paired UOTA/uniform runs for every grid value and seed: `2 · |grid| · seeds` rows,
/// ordered by grid value, then seed, then method.
pub fn sweep(
    axis: SweepAxis,
    grid: &[f64],
    base: &PipelineConfig,
    seeds: usize,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    if grid.is_empty() {
        return Err(Error::arg("grid", "must not be empty"));
    }
    if seeds == 0 {
        return Err(Error::arg("seeds", "must be >= 1"));
    }
    let configs = grid
        .iter()
        .map(|&v| axis.apply(base, v))
        .collect::<Result<Vec<_>>>()?;
    let jobs: Vec<(usize, usize)> = (0..grid.len())
        .flat_map(|g| (0..seeds).map(move |k| (g, k)))
        .collect();
    let rows: Vec<Vec<SweepRow>> = jobs
        .par_iter()
        .map(|&(g, k)| {
            let s = sweep_seed(seed, k);
            [Weighting::Uota, Weighting::Uniform]
                .into_iter()
                .map(|w| {
                    let run = run_pipeline(&configs[g], s, w)?;
                    Ok(SweepRow {
                        axis_value: grid[g],
                        seed: s,
                        method: w.name().to_string(),
                        train_acc: run.probe.train_accuracy,
                        test_acc: run.probe.test_accuracy,
                        auroc: run.auroc,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    Ok(rows.into_iter().flatten().collect())
}

fn csv_err(e: csv::Error) -> Error {
    Error::arg("csv", e.to_string())
}

/// Probe rows: `axis_value, seed, method, train_acc, test_acc`.
pub fn write_probe_csv<W: Write>(rows: &[SweepRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["axis_value", "seed", "method", "train_acc", "test_acc"])
        .map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.axis_value.to_string(),
            r.seed.to_string(),
            r.method.clone(),
            r.train_acc.to_string(),
            r.test_acc.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::arg("csv", e.to_string()))
}

/// AUROC rows: `axis_value, seed, method, auroc` (empty when undefined).
pub fn write_auroc_csv<W: Write>(rows: &[SweepRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["axis_value", "seed", "method", "auroc"]).map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.axis_value.to_string(),
            r.seed.to_string(),
            r.method.clone(),
            r.auroc.map_or_else(String::new, |a| a.to_string()),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::arg("csv", e.to_string()))
}
