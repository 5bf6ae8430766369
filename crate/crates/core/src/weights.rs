//! Importance weights for augmented views.
//!
//! A view far from its instance mean (in the pooled-covariance metric) is
//! unlikely under the idealized augmentation distribution, so its weight is
//! `w_ij = exp(−d²_ij / τ)`. Weights are then normalized over the whole batch:
//! `w̄_ij = w_ij / Σ w`. The normalized table multiplies per-view losses and is
//! a plain constant for the gradient step that follows.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    instance_means, pooled_covariance, row_distances, CovMode, FeatureMatrix, MeanSource, Ridge,
};

/// Smallest raw weight; distances are clamped so a single far view cannot underflow to 0.
pub const MIN_RAW_WEIGHT: f64 = 1e-300;

pub fn raw_weight(dist_sq: f64, tau: f64) -> Result<f64> {
    if !dist_sq.is_finite() || !tau.is_finite() {
        return Err(Error::NonFinite("raw weight input"));
    }
    if dist_sq < 0.0 {
        return Err(Error::arg("dist_sq", format!("must be >= 0, got {dist_sq}")));
    }
    if tau <= 0.0 {
        return Err(Error::arg("tau", format!("must be > 0, got {tau}")));
    }
    let max_ratio = -MIN_RAW_WEIGHT.ln();
    Ok((-(dist_sq / tau).min(max_ratio)).exp())
}

pub fn normalize_weights(raw: &[f64]) -> Result<Vec<f64>> {
    if raw.is_empty() {
        return Err(Error::arg("raw", "no weights to normalize"));
    }
    if let Some(w) = raw.iter().find(|w| !(**w > 0.0) || !w.is_finite()) {
        return Err(Error::arg("raw", format!("weights must be positive and finite, got {w}")));
    }
    let total: f64 = raw.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::arg("raw", "weights sum to zero"));
    }
    Ok(raw.iter().map(|w| w / total).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WeightConfig {
    pub tau: f64,
    pub mean_source: MeanSource,
    pub cov_mode: CovMode,
    pub ridge: Ridge,
    /// Scale features to unit length before measuring distances.
    pub normalize_features: bool,
}

impl Default for WeightConfig {
    fn default() -> Self {
        Self {
            tau: 1.0,
            mean_source: MeanSource::ViewAverage,
            cov_mode: CovMode::Global,
            ridge: Ridge::Auto,
            normalize_features: false,
        }
    }
}

impl WeightConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::arg("tau", format!("must be > 0, got {}", self.tau)));
        }
        if let Ridge::Fixed(eps) = self.ridge {
            if !(eps >= 0.0) || !eps.is_finite() {
                return Err(Error::arg("ridge", format!("must be >= 0, got {eps}")));
            }
        }
        Ok(())
    }
}

/// Raw and batch-normalized weights, one entry per batch row (same row order).
#[derive(Debug, Clone, PartialEq)]
pub struct WeightTable {
    instance: Vec<usize>,
    view: Vec<usize>,
    dist_sq: Vec<f64>,
    raw: Vec<f64>,
    normalized: Vec<f64>,
    tau: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct WeightRow {
    instance: usize,
    view: usize,
    dist_sq: f64,
    raw_w: f64,
    norm_w: f64,
}

impl WeightTable {
    /// Uniform table aligned to `batch`: every raw weight 1, every normalized weight `1/(N·M)`.
    pub fn uniform(batch: &FeatureMatrix, tau: f64) -> Self {
        let rows = batch.num_rows();
        Self {
            instance: batch.instance_index().to_vec(),
            view: batch.view_index().to_vec(),
            dist_sq: vec![0.0; rows],
            raw: vec![1.0; rows],
            normalized: vec![1.0 / rows as f64; rows],
            tau,
        }
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    pub fn instance(&self) -> &[usize] {
        &self.instance
    }

    pub fn view(&self) -> &[usize] {
        &self.view
    }

    pub fn dist_sq(&self) -> &[f64] {
        &self.dist_sq
    }

    pub fn raw(&self) -> &[f64] {
        &self.raw
    }

    pub fn normalized(&self) -> &[f64] {
        &self.normalized
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn is_uniform(&self) -> bool {
        let u = 1.0 / self.len() as f64;
        self.normalized.iter().all(|&w| w == u)
    }

    pub fn summary(&self) -> WeightSummary {
        let n = self.len() as f64;
        let min = self.normalized.iter().copied().fold(f64::INFINITY, f64::min);
        let max = self.normalized.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let entropy: f64 = self
            .normalized
            .iter()
            .filter(|&&w| w > 0.0)
            .map(|&w| -w * w.ln())
            .sum();
        WeightSummary {
            min: min * n,
            max: max * n,
            entropy: entropy / n.ln().max(f64::MIN_POSITIVE),
        }
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for r in 0..self.len() {
            w.serialize(WeightRow {
                instance: self.instance[r],
                view: self.view[r],
                dist_sq: self.dist_sq[r],
                raw_w: self.raw[r],
                norm_w: self.normalized[r],
            })
            .map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::arg("csv", e.to_string()))
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::arg("path", e.to_string()))?;
        self.write_csv(file)
    }

    /// Reads a table written by [`WeightTable::write_csv`]; `tau` is not stored in the CSV.
    pub fn read_csv<R: Read>(reader: R, tau: f64) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let mut t = Self {
            instance: Vec::new(),
            view: Vec::new(),
            dist_sq: Vec::new(),
            raw: Vec::new(),
            normalized: Vec::new(),
            tau,
        };
        for row in rdr.deserialize() {
            let row: WeightRow = row.map_err(csv_err)?;
            t.instance.push(row.instance);
            t.view.push(row.view);
            t.dist_sq.push(row.dist_sq);
            t.raw.push(row.raw_w);
            t.normalized.push(row.norm_w);
        }
        Ok(t)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::arg("csv", e.to_string())
}

/// Weight extremes scaled by the table size (uniform = 1) and entropy normalized to [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightSummary {
    pub min: f64,
    pub max: f64,
    pub entropy: f64,
}

/// Means → covariance → distances → raw weights → batch-normalized weights.
///
/// `originals` holds the un-augmented instance features and is only read when
/// `config.mean_source` is [`MeanSource::OriginalFeature`].
pub fn compute_weight_table(
    batch: &FeatureMatrix,
    originals: Option<ArrayView2<'_, f64>>,
    config: &WeightConfig,
) -> Result<WeightTable> {
    config.validate()?;
    let normalized_batch;
    let normalized_originals;
    let (batch, originals) = if config.normalize_features {
        normalized_batch = batch.unit_normalized()?;
        normalized_originals = match originals {
            Some(o) => {
                let fm = FeatureMatrix::from_layout(o.to_owned(), 1)?.unit_normalized()?;
                Some(fm.values().clone())
            }
            None => None,
        };
        (&normalized_batch, normalized_originals.as_ref().map(|o| o.view()))
    } else {
        (batch, originals)
    };

    let means = instance_means(batch, config.mean_source, originals)?;
    let cov = pooled_covariance(batch, &means, config.cov_mode, config.ridge)?;
    let dist_sq = row_distances(batch, &means, &cov)?;
    let raw = dist_sq
        .iter()
        .map(|&d| raw_weight(d, config.tau))
        .collect::<Result<Vec<_>>>()?;

    // Sum in canonical order so a row permutation permutes the table exactly.
    let total: f64 = batch.canonical_rows().map(|r| raw[r]).sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::NonFinite("weight normalizer"));
    }
    let normalized = raw.iter().map(|w| w / total).collect();

    Ok(WeightTable {
        instance: batch.instance_index().to_vec(),
        view: batch.view_index().to_vec(),
        dist_sq,
        raw,
        normalized,
        tau: config.tau,
    })
}
