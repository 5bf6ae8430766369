//! Synthetic instance/view worlds with known outlier views.
//!
//! Instances are drawn around class centers, each view adds a Gaussian
//! nuisance draw to its instance (`view = instance + n`), and an exact
//! fraction of views is then displaced far from its instance to play the
//! role of out-of-distribution augmentations. Class labels and outlier flags
//! are kept for evaluation only: the trainer sees a [`TrainingSet`], which
//! carries neither.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, StreamRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OodMode {
    /// Displace toward the center of a different, randomly chosen class.
    #[default]
    ShiftToOtherClass,
    /// Displace along a uniformly random direction.
    RandomDirection,
}

/// Generative parameters of a world, as written in config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub num_classes: usize,
    pub input_dim: usize,
    /// Expected norm of a class center.
    pub center_scale: f64,
    pub instance_noise: f64,
    pub nuisance_scale: f64,
    /// Ratio between the largest and smallest per-dimension nuisance scale
    /// (geometric spacing, geometric mean `nuisance_scale`). 1 is isotropic.
    pub nuisance_anisotropy: f64,
    pub ood_rate: f64,
    /// Displacement of a contaminated view, in units of `nuisance_scale`.
    pub ood_shift: f64,
    pub ood_mode: OodMode,
    pub instances: usize,
    pub views_per_instance: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            num_classes: 4,
            input_dim: 16,
            center_scale: 2.5,
            instance_noise: 1.0,
            nuisance_scale: 0.5,
            nuisance_anisotropy: 1.0,
            ood_rate: 0.2,
            ood_shift: 5.0,
            ood_mode: OodMode::ShiftToOtherClass,
            instances: 256,
            views_per_instance: 4,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::arg("num_classes", "must be >= 1"));
        }
        if self.input_dim == 0 {
            return Err(Error::arg("input_dim", "must be >= 1"));
        }
        if !(self.center_scale > 0.0) {
            return Err(Error::arg("center_scale", "must be > 0"));
        }
        if !(self.instance_noise >= 0.0) {
            return Err(Error::arg("instance_noise", "must be >= 0"));
        }
        if !(self.nuisance_scale > 0.0) || !self.nuisance_scale.is_finite() {
            return Err(Error::arg("nuisance_scale", "must be > 0"));
        }
        if !(self.nuisance_anisotropy >= 1.0) {
            return Err(Error::arg("nuisance_anisotropy", "must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.ood_rate) {
            return Err(Error::arg(
                "ood_rate",
                format!("must lie in [0, 1], got {}", self.ood_rate),
            ));
        }
        if !(self.ood_shift >= 0.0) {
            return Err(Error::arg("ood_shift", "must be >= 0"));
        }
        if self.ood_mode == OodMode::ShiftToOtherClass && self.num_classes < 2 && self.ood_rate > 0.0
        {
            return Err(Error::arg(
                "ood_mode",
                "shift_to_other_class needs at least two classes",
            ));
        }
        if self.instances == 0 {
            return Err(Error::arg("instances", "must be >= 1"));
        }
        if self.views_per_instance == 0 {
            return Err(Error::arg("views_per_instance", "must be >= 1"));
        }
        Ok(())
    }
}

/// A world with its class centers drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyWorldSpec {
    pub config: WorldConfig,
    pub class_centers: Array2<f64>,
}

impl ToyWorldSpec {
    /// Draws class centers from the seed's center stream.
    pub fn new(config: WorldConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::substream(seed, rng::DATA_CENTERS, 0);
        let d = config.input_dim;
        let per_dim = config.center_scale / (d as f64).sqrt();
        let centers = Array2::from_shape_simple_fn((config.num_classes, d), || {
            per_dim * rng.sample::<f64, _>(StandardNormal)
        });
        Self::with_centers(config, centers)
    }

    pub fn with_centers(config: WorldConfig, class_centers: Array2<f64>) -> Result<Self> {
        config.validate()?;
        if class_centers.dim() != (config.num_classes, config.input_dim) {
            return Err(Error::arg("class_centers", "shape must be num_classes × input_dim"));
        }
        for a in 0..config.num_classes {
            for b in (a + 1)..config.num_classes {
                if class_centers.row(a) == class_centers.row(b) {
                    return Err(Error::arg("class_centers", "centers must be pairwise distinct"));
                }
            }
        }
        Ok(Self {
            config,
            class_centers,
        })
    }

    /// Per-dimension nuisance standard deviations.
    pub fn nuisance_scales(&self) -> Vec<f64> {
        let d = self.config.input_dim;
        let s = self.config.nuisance_scale;
        let r = self.config.nuisance_anisotropy;
        if d == 1 || r == 1.0 {
            return vec![s; d];
        }
        (0..d)
            .map(|k| s * r.powf(k as f64 / (d - 1) as f64 - 0.5))
            .collect()
    }

    pub fn ood_displacement(&self) -> f64 {
        self.config.ood_shift * self.config.nuisance_scale
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instances {
    pub values: Array2<f64>,
    pub labels: Vec<usize>,
}

pub fn sample_instances<R: Rng>(spec: &ToyWorldSpec, n: usize, rng: &mut R) -> Result<Instances> {
    if n == 0 {
        return Err(Error::arg("n", "must be >= 1"));
    }
    let d = spec.config.input_dim;
    let mut values = Array2::<f64>::zeros((n, d));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = rng.random_range(0..spec.config.num_classes);
        labels.push(c);
        for k in 0..d {
            let noise: f64 = rng.sample(StandardNormal);
            values[[i, k]] = spec.class_centers[[c, k]] + spec.config.instance_noise * noise;
        }
    }
    Ok(Instances { values, labels })
}

/// Views plus ground truth. Rows are instance-major, view-minor.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewDataset {
    views: Array2<f64>,
    originals: Array2<f64>,
    labels: Vec<usize>,
    ood_flags: Vec<bool>,
    views_per_instance: usize,
}

impl ViewDataset {
    pub fn views(&self) -> &Array2<f64> {
        &self.views
    }

    pub fn originals(&self) -> &Array2<f64> {
        &self.originals
    }

    /// Class label per instance (evaluation only).
    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Ground-truth outlier flag per view (evaluation only).
    pub fn ood_flags(&self) -> &[bool] {
        &self.ood_flags
    }

    pub fn num_instances(&self) -> usize {
        self.originals.nrows()
    }

    pub fn views_per_instance(&self) -> usize {
        self.views_per_instance
    }

    pub fn num_views(&self) -> usize {
        self.views.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.views.ncols()
    }

    pub fn flagged_count(&self) -> usize {
        self.ood_flags.iter().filter(|&&f| f).count()
    }

    /// M = 1 datasets can only be weighted against the original-instance feature.
    pub fn needs_original_feature(&self) -> bool {
        self.views_per_instance == 1
    }

    /// The trainer-facing part: views and originals, without labels or flags.
    pub fn training_set(&self) -> TrainingSet {
        TrainingSet {
            views: self.views.clone(),
            originals: self.originals.clone(),
            views_per_instance: self.views_per_instance,
        }
    }

    pub fn save(&self, dir: &Path, spec: &ToyWorldSpec, seed: u64) -> Result<Vec<std::path::PathBuf>> {
        fs::create_dir_all(dir).map_err(io_err)?;
        let views = dir.join("views.csv");
        let originals = dir.join("originals.csv");
        let sidecar = dir.join("dataset.json");
        write_matrix_csv(&views, &self.views, self.views_per_instance, true)?;
        write_matrix_csv(&originals, &self.originals, 1, false)?;
        let meta = DatasetSidecar {
            seed,
            spec: spec.clone(),
            views_per_instance: self.views_per_instance,
            labels: self.labels.clone(),
            ood_flags: self.ood_flags.clone(),
        };
        let json = serde_json::to_string_pretty(&meta).map_err(|e| Error::arg("json", e.to_string()))?;
        fs::write(&sidecar, json + "\n").map_err(io_err)?;
        Ok(vec![views, originals, sidecar])
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetSidecar {
    seed: u64,
    spec: ToyWorldSpec,
    views_per_instance: usize,
    labels: Vec<usize>,
    ood_flags: Vec<bool>,
}

fn io_err(e: std::io::Error) -> Error {
    Error::arg("io", e.to_string())
}

fn write_matrix_csv(path: &Path, m: &Array2<f64>, views: usize, with_view: bool) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::arg("csv", e.to_string()))?;
    let mut header = vec!["instance".to_string()];
    if with_view {
        header.push("view".into());
    }
    header.extend((0..m.ncols()).map(|k| format!("x{k}")));
    w.write_record(&header).map_err(|e| Error::arg("csv", e.to_string()))?;
    for (r, row) in m.rows().into_iter().enumerate() {
        let mut rec = vec![(r / views).to_string()];
        if with_view {
            rec.push((r % views).to_string());
        }
        rec.extend(row.iter().map(|v| format!("{v:?}")));
        w.write_record(&rec).map_err(|e| Error::arg("csv", e.to_string()))?;
    }
    w.flush().map_err(io_err)
}

fn read_matrix_csv(path: &Path, skip: usize) -> Result<(Vec<Vec<usize>>, Array2<f64>)> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::arg("csv", e.to_string()))?;
    let mut ids = Vec::new();
    let mut data = Vec::new();
    let mut cols = None;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::arg("csv", e.to_string()))?;
        let parse_id = |s: &str| s.parse::<usize>().map_err(|e| Error::arg("csv", e.to_string()));
        ids.push((0..skip).map(|k| parse_id(&rec[k])).collect::<Result<Vec<_>>>()?);
        let row = rec
            .iter()
            .skip(skip)
            .map(|s| s.parse::<f64>().map_err(|e| Error::arg("csv", e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        if *cols.get_or_insert(row.len()) != row.len() {
            return Err(Error::arg("csv", "ragged rows"));
        }
        data.extend(row);
    }
    let rows = ids.len();
    let m = Array2::from_shape_vec((rows, cols.unwrap_or(0)), data)
        .map_err(|e| Error::arg("csv", e.to_string()))?;
    Ok((ids, m))
}

/// Views and originals only. This is all the trainer and the weighting code ever see.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub views: Array2<f64>,
    pub originals: Array2<f64>,
    pub views_per_instance: usize,
}

impl TrainingSet {
    pub fn num_instances(&self) -> usize {
        self.originals.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.views.ncols()
    }

    /// Reads `views.csv` and `originals.csv` written by [`ViewDataset::save`]; the
    /// sidecar with labels and flags is never opened.
    pub fn load(dir: &Path) -> Result<Self> {
        let (ids, views) = read_matrix_csv(&dir.join("views.csv"), 2)?;
        let (_, originals) = read_matrix_csv(&dir.join("originals.csv"), 1)?;
        let n = originals.nrows();
        if n == 0 || views.nrows() % n != 0 {
            return Err(Error::InvalidLayout("views are not a multiple of instances".into()));
        }
        let m = views.nrows() / n;
        for (r, id) in ids.iter().enumerate() {
            if id[0] != r / m || id[1] != r % m {
                return Err(Error::InvalidLayout(format!(
                    "row {r} is not in instance-major order"
                )));
            }
        }
        Ok(Self {
            views,
            originals,
            views_per_instance: m,
        })
    }
}

pub fn make_views<R: Rng>(instances: &Instances, spec: &ToyWorldSpec, rng: &mut R) -> Result<ViewDataset> {
    let m = spec.config.views_per_instance;
    if m == 0 {
        return Err(Error::arg("views_per_instance", "must be >= 1"));
    }
    let (n, d) = instances.values.dim();
    if d != spec.config.input_dim {
        return Err(Error::DimensionMismatch {
            expected: spec.config.input_dim,
            got: d,
        });
    }
    let scales = spec.nuisance_scales();
    let mut views = Array2::<f64>::zeros((n * m, d));
    for i in 0..n {
        for j in 0..m {
            let r = i * m + j;
            for k in 0..d {
                let z: f64 = rng.sample(StandardNormal);
                views[[r, k]] = instances.values[[i, k]] + scales[k] * z;
            }
        }
    }
    Ok(ViewDataset {
        views,
        originals: instances.values.clone(),
        labels: instances.labels.clone(),
        ood_flags: vec![false; n * m],
        views_per_instance: m,
    })
}

/// Number of views contaminated at rate `rate`: `floor(rate · total)`.
pub fn contaminated_count(rate: f64, total: usize) -> usize {
    // The epsilon absorbs representation error in products like 0.2 · 40.
    ((rate * total as f64) + 1e-9).floor().min(total as f64) as usize
}

fn random_unit<R: Rng>(d: usize, rng: &mut R) -> Array1<f64> {
    loop {
        let v = Array1::from_shape_simple_fn(d, || rng.sample::<f64, _>(StandardNormal));
        let norm = v.dot(&v).sqrt();
        if norm > 1e-12 {
            return v / norm;
        }
    }
}

pub fn contaminate<R: Rng>(
    mut dataset: ViewDataset,
    spec: &ToyWorldSpec,
    rng: &mut R,
) -> Result<ViewDataset> {
    let rate = spec.config.ood_rate;
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::arg("ood_rate", format!("must lie in [0, 1], got {rate}")));
    }
    let total = dataset.num_views();
    let count = contaminated_count(rate, total);
    if count == 0 {
        return Ok(dataset);
    }
    let classes = spec.config.num_classes;
    if spec.config.ood_mode == OodMode::ShiftToOtherClass && classes < 2 {
        return Err(Error::arg(
            "ood_mode",
            "shift_to_other_class needs at least two classes",
        ));
    }
    let mut chosen = sample(rng, total, count).into_vec();
    chosen.sort_unstable();
    let m = dataset.views_per_instance;
    let d = dataset.input_dim();
    let magnitude = spec.ood_displacement();
    for r in chosen {
        let i = r / m;
        let dir = match spec.config.ood_mode {
            OodMode::RandomDirection => random_unit(d, rng),
            OodMode::ShiftToOtherClass => {
                let own = dataset.labels[i];
                let mut other = rng.random_range(0..classes - 1);
                if other >= own {
                    other += 1;
                }
                let v = &spec.class_centers.row(other) - &dataset.originals.row(i);
                let norm = v.dot(&v).sqrt();
                if norm > 1e-12 {
                    v / norm
                } else {
                    random_unit(d, rng)
                }
            }
        };
        let mut row = dataset.views.row_mut(r);
        row.scaled_add(magnitude, &dir);
        dataset.ood_flags[r] = true;
    }
    Ok(dataset)
}

/// Instances, views and contamination from independent substreams of `seed`.
pub fn generate(spec: &ToyWorldSpec, seed: u64) -> Result<ViewDataset> {
    let instances = sample_instances(
        spec,
        spec.config.instances,
        &mut rng::substream(seed, rng::DATA_INSTANCES, 0),
    )?;
    let clean = make_views(&instances, spec, &mut rng::substream(seed, rng::DATA_NUISANCE, 0))?;
    contaminate(clean, spec, &mut rng::substream(seed, rng::CONTAMINATION, 0))
}

/// Fresh labeled instances for probing, from the evaluation stream.
pub fn eval_instances(spec: &ToyWorldSpec, n: usize, seed: u64) -> Result<Instances> {
    let mut r: StreamRng = rng::substream(seed, rng::EVAL, 0);
    sample_instances(spec, n, &mut r)
}
