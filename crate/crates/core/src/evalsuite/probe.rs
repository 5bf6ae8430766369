use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub train_fraction: f64,
    pub max_iters: usize,
    /// Stop once the largest gradient entry falls below this.
    pub tolerance: f64,
    pub learning_rate: f64,
    pub l2: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            train_fraction: 0.5,
            max_iters: 2000,
            tolerance: 1e-6,
            learning_rate: 0.5,
            l2: 1e-4,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::arg("train_fraction", "must lie in (0, 1)"));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::arg("learning_rate", "must be > 0"));
        }
        if !(self.l2 >= 0.0) || !(self.tolerance >= 0.0) {
            return Err(Error::arg("l2", "l2 and tolerance must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub classes: usize,
}

/// Mean cross-entropy of a softmax-linear model plus `l2/2 ‖W‖²`, with gradients.
///
/// `weight` is `d × K`; returns `(loss, dW, db)`.
pub fn softmax_objective(
    weight: ArrayView2<'_, f64>,
    bias: ArrayView1<'_, f64>,
    x: ArrayView2<'_, f64>,
    y: &[usize],
    l2: f64,
) -> (f64, Array2<f64>, Array1<f64>) {
    let n = x.nrows() as f64;
    let mut logits = x.dot(&weight);
    logits += &bias;
    let mut loss = 0.0;
    for (mut row, &label) in logits.rows_mut().into_iter().zip(y) {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let total = row.sum();
        loss -= (row[label] / total).ln();
        row /= total;
        row[label] -= 1.0;
    }
    // `logits` now holds softmax − onehot.
    logits /= n;
    let mut gw = x.t().dot(&logits);
    gw.scaled_add(l2, &weight);
    let gb = logits.sum_axis(Axis(0));
    let reg = 0.5 * l2 * weight.iter().map(|w| w * w).sum::<f64>();
    (loss / n + reg, gw, gb)
}

/// Multinomial logistic regression on standardized features.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxProbe {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    mean: Array1<f64>,
    scale: Array1<f64>,
    pub iterations: usize,
}

impl SoftmaxProbe {
    pub fn fit(x: ArrayView2<'_, f64>, y: &[usize], classes: usize, config: &ProbeConfig) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(Error::Misaligned(format!("{} rows, {} labels", x.nrows(), y.len())));
        }
        if x.nrows() == 0 {
            return Err(Error::InsufficientSamples("empty probe training set".into()));
        }
        if let Some(&bad) = y.iter().find(|&&c| c >= classes) {
            return Err(Error::arg("labels", format!("label {bad} out of range for {classes} classes")));
        }
        let mean = x.mean_axis(Axis(0)).expect("nonempty");
        let scale = x.std_axis(Axis(0), 0.0).mapv(|s| if s > 1e-12 { 1.0 / s } else { 0.0 });
        let xs = standardize(x, &mean, &scale);
        let mut weight = Array2::zeros((x.ncols(), classes));
        let mut bias = Array1::zeros(classes);
        let mut iterations = 0;
        for _ in 0..config.max_iters {
            let (_, gw, gb) = softmax_objective(weight.view(), bias.view(), xs.view(), y, config.l2);
            let peak = gw.iter().chain(gb.iter()).fold(0.0f64, |a, g| a.max(g.abs()));
            if !peak.is_finite() {
                return Err(Error::NonFinite("probe gradient"));
            }
            if peak < config.tolerance {
                break;
            }
            weight.scaled_add(-config.learning_rate, &gw);
            bias.scaled_add(-config.learning_rate, &gb);
            iterations += 1;
        }
        Ok(Self {
            weight,
            bias,
            mean,
            scale,
            iterations,
        })
    }

    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Vec<usize> {
        let mut logits = standardize(x, &self.mean, &self.scale).dot(&self.weight);
        logits += &self.bias;
        logits
            .rows()
            .into_iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (k, &v)| if v > best.1 { (k, v) } else { best })
                    .0
            })
            .collect()
    }

    pub fn accuracy(&self, x: ArrayView2<'_, f64>, y: &[usize]) -> f64 {
        if y.is_empty() {
            return 0.0;
        }
        let hits = self.predict(x).iter().zip(y).filter(|(p, t)| p == t).count();
        hits as f64 / y.len() as f64
    }
}

fn standardize(x: ArrayView2<'_, f64>, mean: &Array1<f64>, scale: &Array1<f64>) -> Array2<f64> {
    let mut xs = &x - mean;
    xs *= scale;
    xs
}

/// Split rows at random, fit a softmax probe on one part, score both.
pub fn linear_probe<R: Rng>(
    features: ArrayView2<'_, f64>,
    labels: &[usize],
    config: &ProbeConfig,
    rng: &mut R,
) -> Result<ProbeResult> {
    config.validate()?;
    if features.nrows() != labels.len() {
        return Err(Error::Misaligned(format!(
            "{} feature rows, {} labels",
            features.nrows(),
            labels.len()
        )));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("probe features"));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut distinct = labels.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::SingleClass(distinct.first().copied().unwrap_or(0)));
    }
    let n = labels.len();
    let n_train = ((n as f64) * config.train_fraction).round() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::InsufficientSamples(format!("{n} rows cannot be split at {}", config.train_fraction)));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let (train, test) = order.split_at(n_train);
    let xt = features.select(Axis(0), train);
    let yt: Vec<usize> = train.iter().map(|&r| labels[r]).collect();
    let xv = features.select(Axis(0), test);
    let yv: Vec<usize> = test.iter().map(|&r| labels[r]).collect();
    let probe = SoftmaxProbe::fit(xt.view(), &yt, classes, config)?;
    Ok(ProbeResult {
        train_accuracy: probe.accuracy(xt.view(), &yt),
        test_accuracy: probe.accuracy(xv.view(), &yv),
        classes,
    })
}
