//! Monte Carlo lab for the weighted location estimator.
//!
//! Each trial draws `n` instances `x_i = θ* + σ ε_i` and `M` views per instance
//! `v_ij = x_i + σ_a η_ij`, then displaces exactly `⌊ρ n M⌋` views by a fixed
//! shift. For the squared loss `(θ − v)²` the weighted minimizer is the weighted
//! mean of the views, so every estimator below is a weighted mean:
//! uniform weights, the importance weights of [`crate::weights`] on the 1-D
//! views, or uniform weights over the clean views only.

use std::io::Write;

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CovMode, FeatureMatrix, MeanSource, Ridge};
use crate::rng;
use crate::weights::{compute_weight_table, WeightConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ToyWeighting {
    Uniform,
    Uota { tau: f64 },
    /// Uniform over unflagged views. Reads the contamination flags.
    Oracle,
}

impl ToyWeighting {
    pub fn name(&self) -> String {
        match self {
            ToyWeighting::Uniform => "uniform".into(),
            ToyWeighting::Uota { tau } => format!("uota(tau={tau})"),
            ToyWeighting::Oracle => "oracle".into(),
        }
    }
}

/// Displacement applied to contaminated views.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shift {
    Absolute(f64),
    /// Multiple of the augmentation scale σ_a.
    PooledStd(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyEstimatorSpec {
    pub true_param: f64,
    pub instance_noise: f64,
    pub nuisance_scale: f64,
    pub ood_rate: f64,
    pub shift: Shift,
    /// Instances per trial.
    pub samples_per_trial: usize,
    pub views_per_instance: usize,
    pub trials: usize,
    pub weighting: ToyWeighting,
}

impl Default for ToyEstimatorSpec {
    fn default() -> Self {
        Self {
            true_param: 0.0,
            instance_noise: 1.0,
            nuisance_scale: 1.0,
            ood_rate: 0.2,
            shift: Shift::PooledStd(5.0),
            samples_per_trial: 20,
            views_per_instance: 4,
            trials: 100,
            weighting: ToyWeighting::Uota { tau: 1.0 },
        }
    }
}

impl ToyEstimatorSpec {
    pub fn validate(&self) -> Result<()> {
        let finite = |name, v: f64| {
            if v.is_finite() {
                Ok(())
            } else {
                Err(Error::arg(name, "must be finite"))
            }
        };
        finite("true_param", self.true_param)?;
        finite("shift", self.shift_amount())?;
        if !(self.instance_noise >= 0.0) || !(self.nuisance_scale >= 0.0) {
            return Err(Error::arg("instance_noise", "noise scales must be >= 0"));
        }
        finite("instance_noise", self.instance_noise)?;
        finite("nuisance_scale", self.nuisance_scale)?;
        if !(0.0..=1.0).contains(&self.ood_rate) {
            return Err(Error::arg("ood_rate", "must lie in [0, 1]"));
        }
        if self.trials < 2 {
            return Err(Error::arg("trials", "must be >= 2"));
        }
        if self.samples_per_trial < 2 {
            return Err(Error::arg("samples_per_trial", "must be >= 2"));
        }
        if self.views_per_instance < 2 {
            return Err(Error::arg("views_per_instance", "must be >= 2"));
        }
        if let ToyWeighting::Uota { tau } = self.weighting {
            if !(tau > 0.0) || !tau.is_finite() {
                return Err(Error::arg("tau", "must be > 0"));
            }
        }
        Ok(())
    }

    pub fn shift_amount(&self) -> f64 {
        match self.shift {
            Shift::Absolute(s) => s,
            Shift::PooledStd(k) => k * self.nuisance_scale,
        }
    }

    pub fn num_views(&self) -> usize {
        self.samples_per_trial * self.views_per_instance
    }

    pub fn contaminated_views(&self) -> usize {
        crate::synthworld::contaminated_count(self.ood_rate, self.num_views())
    }

    /// Fraction of views that are actually displaced.
    pub fn realized_rate(&self) -> f64 {
        self.contaminated_views() as f64 / self.num_views() as f64
    }

    pub fn with_weighting(&self, weighting: ToyWeighting) -> Self {
        Self { weighting, ..*self }
    }
}

/// One trial's sample: instance values, instance-major views and flags.
#[derive(Debug, Clone, PartialEq)]
pub struct ToySample {
    pub instances: Vec<f64>,
    pub views: Vec<f64>,
    pub flags: Vec<bool>,
}

pub fn draw_sample<R: Rng>(spec: &ToyEstimatorSpec, rng: &mut R) -> ToySample {
    let m = spec.views_per_instance;
    let instances: Vec<f64> = (0..spec.samples_per_trial)
        .map(|_| spec.true_param + spec.instance_noise * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let mut views: Vec<f64> = instances
        .iter()
        .flat_map(|&x| std::iter::repeat_n(x, m))
        .collect();
    for v in &mut views {
        *v += spec.nuisance_scale * rng.sample::<f64, _>(StandardNormal);
    }
    let mut flags = vec![false; views.len()];
    let shift = spec.shift_amount();
    for r in rand::seq::index::sample(rng, views.len(), spec.contaminated_views()) {
        flags[r] = true;
        views[r] += shift;
    }
    ToySample {
        instances,
        views,
        flags,
    }
}

/// Per-view normalized weights of `weighting` on `sample`.
pub fn toy_weights(spec: &ToyEstimatorSpec, weighting: ToyWeighting, sample: &ToySample) -> Result<Vec<f64>> {
    let n = sample.views.len();
    match weighting {
        ToyWeighting::Uniform => Ok(vec![1.0 / n as f64; n]),
        ToyWeighting::Oracle => {
            let clean = sample.flags.iter().filter(|f| !**f).count();
            if clean == 0 {
                return Err(Error::InsufficientSamples("oracle trial has no clean views".into()));
            }
            Ok(sample
                .flags
                .iter()
                .map(|&f| if f { 0.0 } else { 1.0 / clean as f64 })
                .collect())
        }
        ToyWeighting::Uota { tau } => {
            let values = Array2::from_shape_vec((n, 1), sample.views.clone())
                .map_err(|e| Error::InvalidLayout(e.to_string()))?;
            let batch = FeatureMatrix::from_layout(values, spec.views_per_instance)?;
            let config = WeightConfig {
                tau,
                mean_source: MeanSource::ViewAverage,
                cov_mode: CovMode::Global,
                ridge: Ridge::Auto,
                normalize_features: false,
            };
            Ok(compute_weight_table(&batch, None, &config)?.normalized().to_vec())
        }
    }
}

fn weighted_mean(values: &[f64], weights: &[f64]) -> f64 {
    let total: f64 = weights.iter().sum();
    values.iter().zip(weights).map(|(v, w)| v * w).sum::<f64>() / total
}

fn estimate(weighting: ToyWeighting, sample: &ToySample, weights: &[f64]) -> f64 {
    match weighting {
        ToyWeighting::Uniform => sample.views.iter().sum::<f64>() / sample.views.len() as f64,
        ToyWeighting::Oracle => {
            let clean: Vec<f64> = sample
                .views
                .iter()
                .zip(&sample.flags)
                .filter(|(_, f)| !**f)
                .map(|(v, _)| *v)
                .collect();
            clean.iter().sum::<f64>() / clean.len() as f64
        }
        ToyWeighting::Uota { .. } => weighted_mean(&sample.views, weights),
    }
}

/// Estimate `θ̂` for one trial.
pub fn toy_fit<R: Rng>(spec: &ToyEstimatorSpec, rng: &mut R) -> Result<f64> {
    let sample = draw_sample(spec, rng);
    let w = toy_weights(spec, spec.weighting, &sample)?;
    Ok(estimate(spec.weighting, &sample, &w))
}

fn trial_rng(seed: u64, trial: usize) -> rng::StreamRng {
    rng::substream(seed, rng::TRIAL, trial as u64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MseReport {
    pub weighting: String,
    pub trials: usize,
    pub empirical_mse: f64,
    /// Standard error of `empirical_mse` over trials.
    pub mse_std_error: f64,
    pub mean_estimate: f64,
    pub bias_sq: f64,
    /// Unbiased trial variance of the estimates.
    pub variance: f64,
    pub closed_form_bias_sq: Option<f64>,
    pub closed_form_variance: Option<f64>,
    #[serde(skip)]
    pub estimates: Vec<f64>,
}

impl MseReport {
    fn from_estimates(spec: &ToyEstimatorSpec, estimates: Vec<f64>) -> Self {
        let t = estimates.len() as f64;
        let theta0 = spec.true_param;
        let sq: Vec<f64> = estimates.iter().map(|e| (e - theta0).powi(2)).collect();
        let (mse, mse_var) = mean_and_var(&sq);
        let (mean_estimate, variance) = mean_and_var(&estimates);
        let (closed_form_bias_sq, closed_form_variance) = closed_forms(spec);
        Self {
            weighting: spec.weighting.name(),
            trials: estimates.len(),
            empirical_mse: mse,
            mse_std_error: (mse_var / t).sqrt(),
            mean_estimate,
            bias_sq: (mean_estimate - theta0).powi(2),
            variance,
            closed_form_bias_sq,
            closed_form_variance,
            estimates,
        }
    }

    /// `|MSE − (bias² + variance)|` in units of the MSE standard error.
    pub fn decomposition_gap(&self) -> f64 {
        let gap = (self.empirical_mse - self.bias_sq - self.variance).abs();
        if gap == 0.0 {
            0.0
        } else {
            gap / self.mse_std_error
        }
    }
}

fn mean_and_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

fn closed_forms(spec: &ToyEstimatorSpec) -> (Option<f64>, Option<f64>) {
    let n = spec.samples_per_trial as f64;
    let nm = spec.num_views() as f64;
    let sample_var = spec.instance_noise.powi(2) / n + spec.nuisance_scale.powi(2) / nm;
    match spec.weighting {
        ToyWeighting::Uniform => (
            Some((spec.realized_rate() * spec.shift_amount()).powi(2)),
            Some(sample_var),
        ),
        ToyWeighting::Oracle => (Some(0.0), None),
        ToyWeighting::Uota { .. } => {
            if spec.contaminated_views() == 0 && spec.instance_noise == 0.0 && spec.nuisance_scale == 0.0 {
                (Some(0.0), Some(0.0))
            } else {
                (None, None)
            }
        }
    }
}

fn estimates(spec: &ToyEstimatorSpec, seed: u64) -> Result<Vec<f64>> {
    (0..spec.trials)
        .into_par_iter()
        .map(|t| toy_fit(spec, &mut trial_rng(seed, t)))
        .collect()
}

/// Run `spec.trials` trials from `seed`. Trial `t` always sees the same sample,
/// whatever the weighting.
pub fn empirical_mse(spec: &ToyEstimatorSpec, seed: u64) -> Result<MseReport> {
    spec.validate()?;
    Ok(MseReport::from_estimates(spec, estimates(spec, seed)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedSeed {
    pub seed_index: usize,
    pub seed: u64,
    pub mse_baseline: f64,
    pub mse_candidate: f64,
}

impl PairedSeed {
    pub fn candidate_wins(&self) -> bool {
        self.mse_candidate < self.mse_baseline
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub baseline: String,
    pub candidate: String,
    pub seeds: Vec<PairedSeed>,
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    pub win_fraction: f64,
    /// Two-sided exact sign test, ties dropped.
    pub sign_test_p: f64,
    pub mean_mse_baseline: f64,
    pub mean_mse_candidate: f64,
}

impl ComparisonReport {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["seed_index", "seed", "baseline", "candidate", "mse_baseline", "mse_candidate", "candidate_wins"])
            .map_err(csv_err)?;
        for s in &self.seeds {
            w.write_record([
                s.seed_index.to_string(),
                s.seed.to_string(),
                self.baseline.clone(),
                self.candidate.clone(),
                format!("{:e}", s.mse_baseline),
                format!("{:e}", s.mse_candidate),
                s.candidate_wins().to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::arg("csv", e.to_string()))
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::arg("csv", e.to_string())
}

/// Two-sided exact binomial sign test of `wins` successes in `n` fair trials.
pub fn sign_test_p_value(wins: usize, n: usize) -> f64 {
    if n == 0 {
        return 1.0;
    }
    let k = wins.max(n - wins);
    // P(X >= k) for X ~ Bin(n, 1/2), in log space.
    let ln_half_n = -(n as f64) * std::f64::consts::LN_2;
    let mut ln_c = 0.0f64;
    let mut terms = Vec::with_capacity(n + 1);
    for j in 0..=n {
        if j > 0 {
            ln_c += ((n - j + 1) as f64).ln() - (j as f64).ln();
        }
        if j >= k {
            terms.push(ln_c + ln_half_n);
        }
    }
    let tail: f64 = terms.iter().map(|t| t.exp()).sum();
    (2.0 * tail).min(1.0)
}

/// Paired comparison over `seeds` root seeds derived from `seed`.
///
/// Both specs must be identical apart from the weighting; each seed's trials
/// feed the same samples to both estimators.
pub fn paired_mse_comparison(
    baseline: &ToyEstimatorSpec,
    candidate: &ToyEstimatorSpec,
    seeds: usize,
    seed: u64,
) -> Result<ComparisonReport> {
    baseline.validate()?;
    candidate.validate()?;
    if baseline.with_weighting(candidate.weighting) != *candidate {
        return Err(Error::arg("candidate", "specs differ in more than the weighting"));
    }
    if seeds == 0 {
        return Err(Error::arg("seeds", "must be >= 1"));
    }
    let paired: Vec<PairedSeed> = (0..seeds)
        .into_par_iter()
        .map(|k| {
            let s = rng::child_seed(seed, rng::TRIAL, k as u64);
            let (mut b, mut c) = (0.0, 0.0);
            for t in 0..baseline.trials {
                let sample = draw_sample(baseline, &mut trial_rng(s, t));
                let wb = toy_weights(baseline, baseline.weighting, &sample)?;
                let wc = toy_weights(candidate, candidate.weighting, &sample)?;
                b += (estimate(baseline.weighting, &sample, &wb) - baseline.true_param).powi(2);
                c += (estimate(candidate.weighting, &sample, &wc) - baseline.true_param).powi(2);
            }
            let t = baseline.trials as f64;
            Ok(PairedSeed {
                seed_index: k,
                seed: s,
                mse_baseline: b / t,
                mse_candidate: c / t,
            })
        })
        .collect::<Result<_>>()?;
    let wins = paired.iter().filter(|p| p.mse_candidate < p.mse_baseline).count();
    let losses = paired.iter().filter(|p| p.mse_candidate > p.mse_baseline).count();
    let ties = seeds - wins - losses;
    let n = seeds as f64;
    Ok(ComparisonReport {
        baseline: baseline.weighting.name(),
        candidate: candidate.weighting.name(),
        wins,
        losses,
        ties,
        win_fraction: wins as f64 / n,
        sign_test_p: sign_test_p_value(wins, wins + losses),
        mean_mse_baseline: paired.iter().map(|p| p.mse_baseline).sum::<f64>() / n,
        mean_mse_candidate: paired.iter().map(|p| p.mse_candidate).sum::<f64>() / n,
        seeds: paired,
    })
}

/// A Monte Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub std_error: f64,
}

impl Estimate {
    fn of(xs: &[f64]) -> Self {
        let (value, var) = mean_and_var(xs);
        Self {
            value,
            std_error: (var / xs.len() as f64).sqrt(),
        }
    }
}

/// Terms of the MSE decomposition for the scalar squared loss (Hessians = 2).
///
/// `augmentation` is the weighted gap between view and instance gradient
/// second moments, `instance` the gap between instance gradients at `θ_G` and
/// `θ₀`, and `gradient_covariance` the within-instance weighted variance of the
/// views, which lowers the MSE. The Hessian-difference term vanishes because
/// both Hessians equal 2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MseTerms {
    pub weighting: String,
    pub theta_g: Estimate,
    pub bias_sq: Estimate,
    pub augmentation: Estimate,
    pub instance: Estimate,
    pub hessian: f64,
    pub gradient_covariance: Estimate,
    /// `bias_sq + augmentation + instance + hessian − gradient_covariance`.
    pub w_dependent_sum: f64,
    pub empirical_mse: f64,
    /// `empirical_mse − w_dependent_sum`: the weight-independent remainder.
    pub offset: f64,
}

pub fn mse_decomposition_terms(spec: &ToyEstimatorSpec, seed: u64) -> Result<MseTerms> {
    spec.validate()?;
    let m = spec.views_per_instance;
    let n = spec.samples_per_trial as f64;
    let samples: Vec<(ToySample, Vec<f64>)> = (0..spec.trials)
        .into_par_iter()
        .map(|t| {
            let s = draw_sample(spec, &mut trial_rng(seed, t));
            let w = toy_weights(spec, spec.weighting, &s)?;
            Ok((s, w))
        })
        .collect::<Result<_>>()?;
    let estimates: Vec<f64> = samples
        .iter()
        .map(|(s, w)| estimate(spec.weighting, s, w))
        .collect();
    let report = MseReport::from_estimates(spec, estimates.clone());
    let theta0 = spec.true_param;
    let theta_g = Estimate::of(&estimates);
    let tg = theta_g.value;

    let mut aug = Vec::with_capacity(samples.len());
    let mut inst = Vec::with_capacity(samples.len());
    let mut cov = Vec::with_capacity(samples.len());
    for (s, w) in &samples {
        let total: f64 = w.iter().sum();
        let mut a = 0.0;
        let mut c = 0.0;
        let mut instances_with_mass = 0usize;
        for (i, &x) in s.instances.iter().enumerate() {
            let rows = i * m..(i + 1) * m;
            for r in rows.clone() {
                a += w[r] / total * ((tg - s.views[r]).powi(2) - (tg - x).powi(2));
            }
            let wi: f64 = w[rows.clone()].iter().sum();
            if wi > 0.0 {
                let mean = rows.clone().map(|r| w[r] * s.views[r]).sum::<f64>() / wi;
                c += rows.map(|r| w[r] * (s.views[r] - mean).powi(2)).sum::<f64>() / wi;
                instances_with_mass += 1;
            }
        }
        aug.push(a / n);
        cov.push(c / instances_with_mass.max(1) as f64 / n);
        let d = s
            .instances
            .iter()
            .map(|&x| (tg - x).powi(2) - (theta0 - x).powi(2))
            .sum::<f64>()
            / n;
        inst.push(d / n);
    }
    let bias_sq = Estimate {
        value: (tg - theta0).powi(2),
        std_error: 2.0 * (tg - theta0).abs() * theta_g.std_error + theta_g.std_error.powi(2),
    };
    let augmentation = Estimate::of(&aug);
    let instance = Estimate::of(&inst);
    let gradient_covariance = Estimate::of(&cov);
    let w_dependent_sum = bias_sq.value + augmentation.value + instance.value - gradient_covariance.value;
    Ok(MseTerms {
        weighting: spec.weighting.name(),
        theta_g,
        bias_sq,
        augmentation,
        instance,
        hessian: 0.0,
        gradient_covariance,
        w_dependent_sum,
        empirical_mse: report.empirical_mse,
        offset: report.empirical_mse - w_dependent_sum,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noiseless(weighting: ToyWeighting, ood_rate: f64) -> ToyEstimatorSpec {
        ToyEstimatorSpec {
            true_param: 3.0,
            instance_noise: 0.0,
            nuisance_scale: 0.0,
            ood_rate,
            shift: Shift::Absolute(5.0),
            weighting,
            ..ToyEstimatorSpec::default()
        }
    }

    #[test]
    fn noiseless_fits_are_exact() {
        let mut r = rng::substream(1, rng::TRIAL, 0);
        for w in [ToyWeighting::Uniform, ToyWeighting::Oracle] {
            assert_eq!(toy_fit(&noiseless(w, 0.0), &mut r).unwrap(), 3.0);
        }
        let uniform = toy_fit(&noiseless(ToyWeighting::Uniform, 0.2), &mut r).unwrap();
        assert_eq!(uniform, 4.0);
        assert_eq!(toy_fit(&noiseless(ToyWeighting::Oracle, 0.2), &mut r).unwrap(), 3.0);
    }

    #[test]
    fn noiseless_mse_values() {
        let clean = empirical_mse(&noiseless(ToyWeighting::Uniform, 0.0), 1).unwrap();
        assert_eq!(clean.empirical_mse, 0.0);
        let r = empirical_mse(&noiseless(ToyWeighting::Uniform, 0.2), 1).unwrap();
        assert_eq!(r.empirical_mse, 1.0);
        assert_eq!(r.variance, 0.0);
        assert_eq!(r.closed_form_bias_sq, Some(1.0));
    }

    #[test]
    fn clean_sample_mean_variance() {
        let spec = ToyEstimatorSpec {
            ood_rate: 0.0,
            nuisance_scale: 2.0,
            trials: 2000,
            weighting: ToyWeighting::Uniform,
            ..ToyEstimatorSpec::default()
        };
        let r = empirical_mse(&spec, 2).unwrap();
        let expected = r.closed_form_variance.unwrap();
        assert!((expected - (1.0 / 20.0 + 4.0 / 80.0)).abs() < 1e-15);
        assert!((r.empirical_mse - expected).abs() < 3.0 * r.mse_std_error, "{r:?}");
    }

    #[test]
    fn all_contaminated_oracle_fails() {
        let spec = noiseless(ToyWeighting::Oracle, 1.0);
        assert!(toy_fit(&spec, &mut rng::substream(1, rng::TRIAL, 0)).is_err());
    }

    #[test]
    fn huge_tau_matches_uniform() {
        let base = ToyEstimatorSpec {
            trials: 4,
            weighting: ToyWeighting::Uniform,
            ..ToyEstimatorSpec::default()
        };
        let cand = base.with_weighting(ToyWeighting::Uota { tau: 1e9 });
        let r = paired_mse_comparison(&base, &cand, 20, 3).unwrap();
        for s in &r.seeds {
            assert!((s.mse_baseline - s.mse_candidate).abs() <= 1e-6 * s.mse_baseline.max(1e-12));
        }
    }

    #[test]
    fn sign_test_values() {
        assert_eq!(sign_test_p_value(5, 10), 1.0);
        // 2 · P(X ≥ 9), X ~ Bin(10, ½) = 2 · 11/1024
        assert!((sign_test_p_value(9, 10) - 22.0 / 1024.0).abs() < 1e-15);
        assert!((sign_test_p_value(1, 10) - 22.0 / 1024.0).abs() < 1e-15);
        assert!(sign_test_p_value(100, 100) < 1e-29);
    }

    #[test]
    fn rejects_mismatched_pair() {
        let a = ToyEstimatorSpec::default().with_weighting(ToyWeighting::Uniform);
        let b = ToyEstimatorSpec {
            ood_rate: 0.1,
            ..ToyEstimatorSpec::default()
        };
        assert!(paired_mse_comparison(&a, &b, 5, 1).is_err());
    }

    #[test]
    fn decomposition_terms_noiseless_bias() {
        let t = mse_decomposition_terms(&noiseless(ToyWeighting::Uniform, 0.2), 4).unwrap();
        assert!((t.bias_sq.value - 1.0).abs() < 1e-12);
        assert_eq!(t.hessian, 0.0);
        assert!(t.bias_sq.std_error < 1e-12);
    }

    #[test]
    fn decomposition_terms_vanish_without_augmentation() {
        let spec = ToyEstimatorSpec {
            ood_rate: 0.0,
            nuisance_scale: 0.0,
            weighting: ToyWeighting::Uniform,
            trials: 200,
            ..ToyEstimatorSpec::default()
        };
        let t = mse_decomposition_terms(&spec, 5).unwrap();
        assert!(t.augmentation.value.abs() < 1e-24);
        assert!(t.gradient_covariance.value.abs() < 1e-24);
    }

    #[test]
    fn gradient_covariance_grows_with_nuisance() {
        let values: Vec<Estimate> = [0.1, 0.5, 1.0]
            .iter()
            .map(|&s| {
                let spec = ToyEstimatorSpec {
                    ood_rate: 0.0,
                    nuisance_scale: s,
                    trials: 200,
                    ..ToyEstimatorSpec::default()
                };
                mse_decomposition_terms(&spec, 6).unwrap().gradient_covariance
            })
            .collect();
        for w in values.windows(2) {
            let gap = w[1].value - w[0].value;
            assert!(gap > 3.0 * (w[0].std_error.powi(2) + w[1].std_error.powi(2)).sqrt());
        }
    }

    #[test]
    fn report_is_deterministic() {
        let spec = ToyEstimatorSpec::default();
        assert_eq!(empirical_mse(&spec, 9).unwrap(), empirical_mse(&spec, 9).unwrap());
    }
}
