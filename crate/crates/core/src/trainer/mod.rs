//! Encoder training with alternating weight/parameter updates.
//!
//! Each step encodes the batch, computes the weight table with the encoder
//! frozen, then takes one SGD step on `Σ w̄_ij 𝓛_ij` with the table held
//! constant. During the first `warmup_epochs` epochs (and always, for the
//! uniform baseline) the table is uniform, which reduces the objective to the
//! plain batch mean.

mod encoder;

pub use encoder::{Dense, EncoderGrads, EncoderState, ForwardCache};

use std::io::Write;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{FeatureMatrix, MeanSource};
use crate::losses::{batch_view_losses_with_keys, weighted_batch_loss, LossSpec};
use crate::rng;
use crate::synthworld::TrainingSet;
use crate::weights::{compute_weight_table, WeightConfig, WeightSummary, WeightTable};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// Importance weights from the pooled-covariance distance after warm-up.
    #[default]
    Uota,
    /// Constant weights throughout: the unweighted baseline.
    Uniform,
}

impl Weighting {
    pub fn name(self) -> &'static str {
        match self {
            Weighting::Uota => "uota",
            Weighting::Uniform => "uniform",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Defaults to 10% of `epochs`, rounded.
    pub warmup_epochs: Option<usize>,
    pub batch_instances: usize,
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub learning_rate: f64,
    /// Multiplier applied at each third of training.
    pub lr_decay: f64,
    pub weighting: Weighting,
    pub weights: WeightConfig,
    pub loss: LossSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            warmup_epochs: None,
            batch_instances: 64,
            hidden: vec![32, 32],
            feature_dim: 8,
            learning_rate: 8.0,
            lr_decay: 0.5,
            weighting: Weighting::Uota,
            // Squared distances in an 8-d feature space sit near 8, so a unit
            // temperature flattens nearly every weight to the same tiny value.
            weights: WeightConfig {
                tau: 8.0,
                ..WeightConfig::default()
            },
            loss: LossSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn warmup(&self) -> usize {
        self.warmup_epochs
            .unwrap_or_else(|| (self.epochs as f64 * 0.1).round() as usize)
    }

    /// Step size for `epoch`: the initial rate, decayed at each third of training.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let stage = if self.epochs == 0 {
            0
        } else {
            (3 * epoch / self.epochs).min(2)
        };
        self.learning_rate * self.lr_decay.powi(stage as i32)
    }

    pub fn validate(&self, views_per_instance: usize) -> Result<()> {
        if self.warmup() > self.epochs {
            return Err(Error::arg(
                "warmup_epochs",
                format!("{} exceeds epochs {}", self.warmup(), self.epochs),
            ));
        }
        if self.batch_instances < 2 {
            return Err(Error::arg("batch_instances", "must be >= 2"));
        }
        if self.feature_dim == 0 || self.hidden.iter().any(|&h| h == 0) {
            return Err(Error::arg("hidden", "layer widths must be >= 1"));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::arg("learning_rate", "must be > 0"));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::arg("lr_decay", "must lie in (0, 1]"));
        }
        self.weights.validate()?;
        self.loss.validate()?;
        if views_per_instance == 0 {
            return Err(Error::arg("views_per_instance", "must be >= 1"));
        }
        if views_per_instance == 1 && self.weights.mean_source != MeanSource::OriginalFeature {
            return Err(Error::arg(
                "mean_source",
                "a single view per instance requires mean_source = original_feature",
            ));
        }
        Ok(())
    }

    fn needs_originals(&self, views_per_instance: usize) -> bool {
        views_per_instance == 1 || self.weights.mean_source == MeanSource::OriginalFeature
    }
}

/// Raw inputs of one batch: instance-major views plus the un-augmented instances.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainBatch {
    pub views: Array2<f64>,
    pub originals: Array2<f64>,
    pub views_per_instance: usize,
}

impl TrainBatch {
    pub fn gather(data: &TrainingSet, instances: &[usize]) -> Self {
        let m = data.views_per_instance;
        let rows: Vec<usize> = instances
            .iter()
            .flat_map(|&i| (i * m)..(i * m + m))
            .collect();
        Self {
            views: data.views.select(Axis(0), &rows),
            originals: data.originals.select(Axis(0), instances),
            views_per_instance: m,
        }
    }

    pub fn whole(data: &TrainingSet) -> Self {
        Self {
            views: data.views.clone(),
            originals: data.originals.clone(),
            views_per_instance: data.views_per_instance,
        }
    }
}

/// Encoder output for a batch.
pub fn encode(state: &EncoderState, inputs: ArrayView2<'_, f64>, views_per_instance: usize) -> Result<FeatureMatrix> {
    FeatureMatrix::from_layout(state.encode(inputs)?, views_per_instance)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub weighted_loss: f64,
    pub mean_loss: f64,
    pub weights: WeightSummary,
    pub learning_rate: f64,
}

pub struct StepOutcome {
    pub weights: WeightTable,
    pub metrics: StepMetrics,
}

/// Weight table for `features` under `config` at `epoch`, encoder frozen.
pub fn step_weights(
    features: &FeatureMatrix,
    original_features: Option<ArrayView2<'_, f64>>,
    config: &TrainConfig,
    epoch: usize,
) -> Result<WeightTable> {
    if config.weighting == Weighting::Uniform || epoch < config.warmup() {
        Ok(WeightTable::uniform(features, config.weights.tau))
    } else {
        compute_weight_table(features, original_features, &config.weights)
    }
}

/// The step objective with weights and key features frozen at their current values.
///
/// Its gradient w.r.t. the encoder parameters is what [`train_step`] applies;
/// finite differences of [`FrozenObjective::value`] check it.
pub struct FrozenObjective<'a> {
    batch: &'a TrainBatch,
    keys: FeatureMatrix,
    key_originals: Option<Array2<f64>>,
    weights: WeightTable,
    loss: LossSpec,
}

impl<'a> FrozenObjective<'a> {
    pub fn new(
        state: &EncoderState,
        batch: &'a TrainBatch,
        config: &TrainConfig,
        weights: WeightTable,
    ) -> Result<Self> {
        let m = batch.views_per_instance;
        let keys = encode(state, batch.views.view(), m)?;
        let key_originals = if config.needs_originals(m) {
            Some(state.encode(batch.originals.view())?)
        } else {
            None
        };
        Ok(Self {
            batch,
            keys,
            key_originals,
            weights,
            loss: config.loss,
        })
    }

    pub fn weights(&self) -> &WeightTable {
        &self.weights
    }

    pub fn value(&self, state: &EncoderState) -> Result<f64> {
        let q = encode(state, self.batch.views.view(), self.batch.views_per_instance)?;
        let (losses, _) = batch_view_losses_with_keys(
            &q,
            &self.keys,
            self.key_originals.as_ref().map(|o| o.view()),
            &self.loss,
        )?;
        weighted_batch_loss(&losses, &self.weights)
    }

    /// Weighted loss, unweighted mean loss and parameter gradient.
    pub fn value_and_grad(&self, state: &EncoderState) -> Result<(f64, f64, EncoderGrads)> {
        let (z, cache) = state.forward(self.batch.views.view())?;
        let q = FeatureMatrix::from_layout(z, self.batch.views_per_instance)?;
        let (losses, mut dz) = batch_view_losses_with_keys(
            &q,
            &self.keys,
            self.key_originals.as_ref().map(|o| o.view()),
            &self.loss,
        )?;
        let value = weighted_batch_loss(&losses, &self.weights)?;
        for (mut row, &w) in dz.rows_mut().into_iter().zip(self.weights.normalized()) {
            row *= w;
        }
        Ok((value, losses.mean(), state.backward(&cache, &dz)))
    }
}

/// One alternating step: weights with θ frozen, then SGD on θ with weights frozen.
pub fn train_step(
    state: &mut EncoderState,
    batch: &TrainBatch,
    config: &TrainConfig,
    epoch: usize,
) -> Result<StepOutcome> {
    let m = batch.views_per_instance;
    if batch.views.nrows() != batch.originals.nrows() * m {
        return Err(Error::InvalidLayout(format!(
            "{} view rows for {} instances × {m} views",
            batch.views.nrows(),
            batch.originals.nrows()
        )));
    }
    let raw = state.encode(batch.views.view())?;
    if raw.iter().any(|v| !v.is_finite()) || raw.rows().into_iter().any(|r| !r.dot(&r).is_finite()) {
        return Err(Error::Numerical {
            epoch,
            step: state.step_count,
            detail: "encoder produced non-finite features".into(),
        });
    }
    let features = FeatureMatrix::from_layout(raw, m)?;
    let original_features = if config.needs_originals(m) {
        Some(state.encode(batch.originals.view())?)
    } else {
        None
    };
    let weights = step_weights(
        &features,
        original_features.as_ref().map(|o| o.view()),
        config,
        epoch,
    )?;
    let summary = weights.summary();
    let objective = FrozenObjective {
        batch,
        keys: features,
        key_originals: original_features,
        weights,
        loss: config.loss,
    };
    let (weighted_loss, mean_loss, grads) = objective.value_and_grad(state)?;
    if !weighted_loss.is_finite() || !grads.is_finite() {
        return Err(Error::Numerical {
            epoch,
            step: state.step_count,
            detail: format!("weighted loss {weighted_loss}, mean loss {mean_loss}"),
        });
    }
    let lr = config.learning_rate_at(epoch);
    state.apply_sgd(&grads, lr);
    if !state.is_finite() {
        return Err(Error::Numerical {
            epoch,
            step: state.step_count,
            detail: "non-finite parameters after update".into(),
        });
    }
    Ok(StepOutcome {
        weights: objective.weights,
        metrics: StepMetrics {
            weighted_loss,
            mean_loss,
            weights: summary,
            learning_rate: lr,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    pub weighted_loss: f64,
    pub mean_loss: f64,
    pub w_min: f64,
    pub w_max: f64,
    pub w_entropy: f64,
    pub eval: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for r in &self.records {
            w.serialize(r).map_err(|e| Error::arg("csv", e.to_string()))?;
        }
        w.flush().map_err(|e| Error::arg("csv", e.to_string()))
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }
}

/// Instance order of each epoch's batches, drawn from the shuffle stream.
pub fn epoch_batches(num_instances: usize, batch_instances: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..num_instances).collect();
    order.shuffle(&mut rng::substream(seed, rng::SHUFFLE, epoch as u64));
    order
        .chunks(batch_instances)
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect()
}

pub fn init_encoder(config: &TrainConfig, input_dim: usize, seed: u64) -> EncoderState {
    EncoderState::init(
        input_dim,
        &config.hidden,
        config.feature_dim,
        &mut rng::substream(seed, rng::INIT, 0),
    )
}

pub fn fit(config: &TrainConfig, data: &TrainingSet, seed: u64) -> Result<(EncoderState, TrainHistory)> {
    fit_with_monitor(config, data, seed, |_, _| None)
}

/// [`fit`], calling `monitor(epoch, state)` after each epoch to fill the eval column.
pub fn fit_with_monitor<F>(
    config: &TrainConfig,
    data: &TrainingSet,
    seed: u64,
    mut monitor: F,
) -> Result<(EncoderState, TrainHistory)>
where
    F: FnMut(usize, &EncoderState) -> Option<f64>,
{
    config.validate(data.views_per_instance)?;
    let n = data.num_instances();
    if n < 2 {
        return Err(Error::InsufficientSamples("need at least two instances".into()));
    }
    let mut state = init_encoder(config, data.input_dim(), seed);
    let mut history = TrainHistory::default();
    for epoch in 0..config.epochs {
        let batches = epoch_batches(n, config.batch_instances.min(n), seed, epoch);
        let mut acc = [0.0f64; 5];
        for idx in &batches {
            let batch = TrainBatch::gather(data, idx);
            let out = train_step(&mut state, &batch, config, epoch)?;
            let m = out.metrics;
            for (a, v) in acc.iter_mut().zip([
                m.weighted_loss,
                m.mean_loss,
                m.weights.min,
                m.weights.max,
                m.weights.entropy,
            ]) {
                *a += v;
            }
        }
        let k = batches.len() as f64;
        let eval = monitor(epoch, &state);
        history.records.push(EpochRecord {
            epoch,
            learning_rate: config.learning_rate_at(epoch),
            weighted_loss: acc[0] / k,
            mean_loss: acc[1] / k,
            w_min: acc[2] / k,
            w_max: acc[3] / k,
            w_entropy: acc[4] / k,
            eval,
        });
    }
    Ok((state, history))
}

/// Weight table of a whole dataset as one batch, with a trained encoder.
pub fn dataset_weights(state: &EncoderState, data: &TrainingSet, weights: &WeightConfig) -> Result<WeightTable> {
    let features = encode(state, data.views.view(), data.views_per_instance)?;
    let originals = if weights.mean_source == MeanSource::OriginalFeature {
        Some(state.encode(data.originals.view())?)
    } else {
        None
    };
    compute_weight_table(&features, originals.as_ref().map(|o| o.view()), weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::LossKind;
    use crate::synthworld::{generate, ToyWorldSpec, WorldConfig};

    fn small_world(ood_rate: f64, seed: u64) -> TrainingSet {
        let config = WorldConfig {
            instances: 32,
            ood_rate,
            ..WorldConfig::default()
        };
        let spec = ToyWorldSpec::new(config, seed).unwrap();
        generate(&spec, seed).unwrap().training_set()
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            epochs: 10,
            warmup_epochs: Some(5),
            batch_instances: 16,
            hidden: vec![8, 8],
            feature_dim: 4,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn warmup_epoch_is_uniform() {
        let data = small_world(0.2, 3);
        let config = small_config();
        let mut state = init_encoder(&config, data.input_dim(), 3);
        let batch = TrainBatch::gather(&data, &(0..16).collect::<Vec<_>>());
        let out = train_step(&mut state, &batch, &config, 0).unwrap();
        assert!(out.weights.is_uniform());
        let out = train_step(&mut state, &batch, &config, 5).unwrap();
        assert!(!out.weights.is_uniform());
    }

    #[test]
    fn huge_tau_matches_uniform_update() {
        let data = small_world(0.2, 4);
        let mut config = small_config();
        config.weights.tau = 1e9;
        let batch = TrainBatch::gather(&data, &(0..16).collect::<Vec<_>>());
        let mut a = init_encoder(&config, data.input_dim(), 4);
        let mut b = a.clone();
        let start = a.params_flat();
        train_step(&mut a, &batch, &config, 7).unwrap();
        config.weighting = Weighting::Uniform;
        train_step(&mut b, &batch, &config, 7).unwrap();
        let (pa, pb) = (a.params_flat(), b.params_flat());
        let num: f64 = pa.iter().zip(&pb).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let den: f64 = pb.iter().zip(&start).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        assert!(num / den < 1e-6, "{}", num / den);
    }

    fn check_gradient(kind: LossKind, mean_source: MeanSource, m: usize) {
        let data = small_world(0.2, 5);
        let data = if m == data.views_per_instance {
            data
        } else {
            let keep: Vec<usize> = (0..data.num_instances())
                .flat_map(|i| (0..m).map(move |j| i * data.views_per_instance + j))
                .collect();
            TrainingSet {
                views: data.views.select(Axis(0), &keep),
                originals: data.originals.clone(),
                views_per_instance: m,
            }
        };
        let mut config = small_config();
        config.loss.kind = kind;
        config.weights.mean_source = mean_source;
        let batch = TrainBatch::gather(&data, &(0..8).collect::<Vec<_>>());
        let state = init_encoder(&config, data.input_dim(), 5);
        let features = encode(&state, batch.views.view(), m).unwrap();
        let originals = state.encode(batch.originals.view()).unwrap();
        let w = step_weights(&features, Some(originals.view()), &config, 9).unwrap();
        assert!(!w.is_uniform());
        let obj = FrozenObjective::new(&state, &batch, &config, w).unwrap();
        let (_, _, grads) = obj.value_and_grad(&state).unwrap();
        let g = grads.flat();
        let p0 = state.params_flat();
        let h = 1e-5;
        let mut probe = state.clone();
        for k in (0..p0.len()).step_by(7) {
            let mut p = p0.clone();
            p[k] += h;
            probe.set_params_flat(&p);
            let up = obj.value(&probe).unwrap();
            p[k] -= 2.0 * h;
            probe.set_params_flat(&p);
            let down = obj.value(&probe).unwrap();
            let fd = (up - down) / (2.0 * h);
            let err = (fd - g[k]).abs() / fd.abs().max(g[k].abs()).max(1e-6);
            assert!(err < 1e-5, "param {k}: fd {fd} analytic {}", g[k]);
        }
    }

    #[test]
    fn step_gradient_matches_finite_differences_info_nce() {
        check_gradient(LossKind::InfoNce, MeanSource::ViewAverage, 4);
    }

    #[test]
    fn step_gradient_matches_finite_differences_pairwise() {
        check_gradient(LossKind::PairwiseL2, MeanSource::ViewAverage, 4);
    }

    #[test]
    fn step_gradient_single_view_uses_originals() {
        check_gradient(LossKind::InfoNce, MeanSource::OriginalFeature, 1);
    }

    #[test]
    fn zero_epochs_is_noop() {
        let data = small_world(0.2, 6);
        let config = TrainConfig {
            epochs: 0,
            warmup_epochs: None,
            ..small_config()
        };
        let (state, history) = fit(&config, &data, 6).unwrap();
        assert_eq!(state, init_encoder(&config, data.input_dim(), 6));
        assert!(history.records.is_empty());
    }

    #[test]
    fn fit_is_deterministic() {
        let data = small_world(0.2, 7);
        let config = small_config();
        let (sa, ha) = fit(&config, &data, 7).unwrap();
        let (sb, hb) = fit(&config, &data, 7).unwrap();
        assert_eq!(sa, sb);
        assert_eq!(ha, hb);
        assert_eq!(ha.records.len(), config.epochs);
        let mut csv_a = Vec::new();
        ha.write_csv(&mut csv_a).unwrap();
        assert_eq!(String::from_utf8(csv_a).unwrap().lines().count(), config.epochs + 1);
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = small_config();
        c.warmup_epochs = Some(11);
        assert!(c.validate(4).is_err());
        let c = small_config();
        assert!(c.validate(1).is_err());
        let mut c = small_config();
        c.weights.mean_source = MeanSource::OriginalFeature;
        assert!(c.validate(1).is_ok());
        c.batch_instances = 1;
        assert!(c.validate(4).is_err());
    }

    #[test]
    fn learning_rate_halves_each_third() {
        let c = TrainConfig {
            epochs: 9,
            learning_rate: 1.0,
            ..TrainConfig::default()
        };
        let rates: Vec<f64> = (0..9).map(|e| c.learning_rate_at(e)).collect();
        assert_eq!(rates, [1.0, 1.0, 1.0, 0.5, 0.5, 0.5, 0.25, 0.25, 0.25]);
        assert_eq!(TrainConfig { epochs: 25, ..c.clone() }.warmup(), 3);
    }

    #[test]
    fn numerical_blowup_is_reported() {
        let data = small_world(0.0, 8);
        let mut config = small_config();
        config.learning_rate = 1e300;
        config.loss.kind = LossKind::PairwiseL2;
        match fit(&config, &data, 8) {
            Err(Error::Numerical { .. }) => {}
            other => panic!("expected numerical error, got {other:?}"),
        }
    }
}
