//! Per-instance means, pooled view covariance and Mahalanobis distances.
//!
//! A batch holds `N` instances with `M` augmented views each. The distance of
//! a view `z_ij` to its instance mean `μ_i` is measured in the metric of the
//! covariance of view deviations `z_ij − μ_i`:
//!
//! ```text
//! μ_i = (1/M) Σ_j z_ij
//! Σ   = (1/(N·M)) Σ_i Σ_j (z_ij − μ_i)(z_ij − μ_i)ᵀ + ε·I
//! d²  = (z_ij − μ_i)ᵀ Σ⁻¹ (z_ij − μ_i)
//! ```
//!
//! `Σ` is shared by all instances in [`CovMode::Global`]; the `Local` and
//! `Identity` modes are the ablation variants. Solves always go through a
//! Cholesky factor.

mod cholesky;

pub use cholesky::CholeskyFactor;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// View features of one batch, `N·M` rows by `D` columns, in any row order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    values: Array2<f64>,
    instance_index: Vec<usize>,
    view_index: Vec<usize>,
    num_instances: usize,
    views_per_instance: usize,
    rows_by_instance: Vec<Vec<usize>>,
}

impl FeatureMatrix {
    pub fn new(
        values: Array2<f64>,
        instance_index: Vec<usize>,
        view_index: Vec<usize>,
    ) -> Result<Self> {
        let rows = values.nrows();
        if instance_index.len() != rows || view_index.len() != rows {
            return Err(Error::Misaligned(format!(
                "{rows} feature rows, {} instance ids, {} view ids",
                instance_index.len(),
                view_index.len()
            )));
        }
        if rows == 0 || values.ncols() == 0 {
            return Err(Error::InvalidLayout("empty feature matrix".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature matrix"));
        }
        let num_instances = instance_index.iter().max().map_or(0, |m| m + 1);
        let mut rows_by_instance = vec![Vec::new(); num_instances];
        for (r, &i) in instance_index.iter().enumerate() {
            rows_by_instance[i].push(r);
        }
        if let Some(i) = rows_by_instance.iter().position(Vec::is_empty) {
            return Err(Error::EmptyInstance(i));
        }
        let views_per_instance = rows_by_instance[0].len();
        if let Some(i) = rows_by_instance
            .iter()
            .position(|r| r.len() != views_per_instance)
        {
            return Err(Error::InvalidLayout(format!(
                "instance {i} has {} views, instance 0 has {views_per_instance}",
                rows_by_instance[i].len()
            )));
        }
        for (i, rows) in rows_by_instance.iter_mut().enumerate() {
            rows.sort_by_key(|&r| view_index[r]);
            if rows.iter().enumerate().any(|(j, &r)| view_index[r] != j) {
                return Err(Error::InvalidLayout(format!(
                    "instance {i} does not carry view ids 0..{views_per_instance} exactly once"
                )));
            }
        }
        Ok(Self {
            values,
            instance_index,
            view_index,
            num_instances,
            views_per_instance,
            rows_by_instance,
        })
    }

    /// Canonical instance-major layout: row `i·M + j` is view `j` of instance `i`.
    pub fn from_layout(values: Array2<f64>, views_per_instance: usize) -> Result<Self> {
        if views_per_instance == 0 || values.nrows() % views_per_instance != 0 {
            return Err(Error::InvalidLayout(format!(
                "{} rows is not a multiple of {views_per_instance} views",
                values.nrows()
            )));
        }
        let rows = values.nrows();
        let instance_index = (0..rows).map(|r| r / views_per_instance).collect();
        let view_index = (0..rows).map(|r| r % views_per_instance).collect();
        Self::new(values, instance_index, view_index)
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn row(&self, r: usize) -> ArrayView1<'_, f64> {
        self.values.row(r)
    }

    pub fn instance_index(&self) -> &[usize] {
        &self.instance_index
    }

    pub fn view_index(&self) -> &[usize] {
        &self.view_index
    }

    pub fn num_rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn num_instances(&self) -> usize {
        self.num_instances
    }

    pub fn views_per_instance(&self) -> usize {
        self.views_per_instance
    }

    /// Row indices of instance `i`, ordered by view id.
    pub fn rows_of(&self, i: usize) -> &[usize] {
        &self.rows_by_instance[i]
    }

    /// All row indices in instance-major, view-minor order, whatever the storage order.
    /// Reductions run in this order so results do not depend on row permutation.
    pub fn canonical_rows(&self) -> impl Iterator<Item = usize> + '_ {
        self.rows_by_instance.iter().flatten().copied()
    }

    /// Copy with every row scaled to unit Euclidean length.
    pub fn unit_normalized(&self) -> Result<Self> {
        let mut values = self.values.clone();
        for mut row in values.rows_mut() {
            let norm = row.dot(&row).sqrt();
            if norm == 0.0 {
                return Err(Error::arg("features", "cannot unit-normalize a zero row"));
            }
            row /= norm;
        }
        Ok(Self {
            values,
            ..self.clone()
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MeanSource {
    /// Average of the instance's own views.
    #[default]
    ViewAverage,
    /// Feature of the un-augmented instance, forwarded separately.
    OriginalFeature,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceMeans {
    pub means: Array2<f64>,
    pub source: MeanSource,
}

pub fn instance_means(
    batch: &FeatureMatrix,
    source: MeanSource,
    originals: Option<ArrayView2<'_, f64>>,
) -> Result<InstanceMeans> {
    let n = batch.num_instances();
    let d = batch.dim();
    let means = match source {
        MeanSource::ViewAverage => {
            if batch.views_per_instance() < 2 {
                return Err(Error::InvalidLayout(
                    "view-average means need at least two views per instance; use the original feature"
                        .into(),
                ));
            }
            let mut means = Array2::<f64>::zeros((n, d));
            for i in 0..n {
                let rows = batch.rows_of(i);
                let mut acc = Array1::<f64>::zeros(d);
                for &r in rows {
                    acc += &batch.row(r);
                }
                acc /= rows.len() as f64;
                means.row_mut(i).assign(&acc);
            }
            means
        }
        MeanSource::OriginalFeature => {
            let originals = originals.ok_or(Error::MissingOriginals)?;
            if originals.nrows() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    got: originals.nrows(),
                });
            }
            if originals.ncols() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: originals.ncols(),
                });
            }
            if originals.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("original features"));
            }
            originals.to_owned()
        }
    };
    Ok(InstanceMeans { means, source })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CovMode {
    /// One covariance pooled over all views of all instances.
    #[default]
    Global,
    /// One covariance per instance, from its own views only.
    Local,
    /// No whitening: squared Euclidean distance.
    Identity,
}

/// Ridge added to the covariance diagonal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ridge {
    /// `1e-4 · trace(Σ) / D`, floored at [`Ridge::FLOOR`].
    Auto,
    Fixed(f64),
}

impl Default for Ridge {
    fn default() -> Self {
        Ridge::Auto
    }
}

impl From<f64> for Ridge {
    fn from(eps: f64) -> Self {
        Ridge::Fixed(eps)
    }
}

impl Ridge {
    pub const AUTO_FRACTION: f64 = 1e-4;
    pub const FLOOR: f64 = 1e-12;

    fn resolve(self, scatter: &Array2<f64>) -> Result<f64> {
        match self {
            Ridge::Fixed(eps) if eps >= 0.0 && eps.is_finite() => Ok(eps),
            Ridge::Fixed(eps) => Err(Error::arg("ridge", format!("must be >= 0, got {eps}"))),
            Ridge::Auto => {
                let d = scatter.nrows() as f64;
                Ok((Self::AUTO_FRACTION * scatter.diag().sum() / d).max(Self::FLOOR))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceModel {
    mode: CovMode,
    matrices: Vec<Array2<f64>>,
    ridges: Vec<f64>,
    factors: Vec<CholeskyFactor>,
}

impl CovarianceModel {
    fn from_matrices(mode: CovMode, matrices: Vec<Array2<f64>>, ridges: Vec<f64>) -> Result<Self> {
        let factors = matrices
            .iter()
            .map(|m| CholeskyFactor::factor(m.view()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            mode,
            matrices,
            ridges,
            factors,
        })
    }

    pub fn identity(d: usize) -> Self {
        let eye = Array2::<f64>::eye(d);
        let factor = CholeskyFactor::factor(eye.view()).expect("identity is PD");
        Self {
            mode: CovMode::Identity,
            matrices: vec![eye],
            ridges: vec![0.0],
            factors: vec![factor],
        }
    }

    pub fn mode(&self) -> CovMode {
        self.mode
    }

    pub fn dim(&self) -> usize {
        self.matrices[0].nrows()
    }

    /// Covariance used for `instance`, ridge included.
    pub fn matrix_for(&self, instance: usize) -> &Array2<f64> {
        match self.mode {
            CovMode::Local => &self.matrices[instance],
            _ => &self.matrices[0],
        }
    }

    pub fn matrices(&self) -> &[Array2<f64>] {
        &self.matrices
    }

    /// Ridge actually added, one per stored matrix.
    pub fn ridges(&self) -> &[f64] {
        &self.ridges
    }

    pub fn factor_for(&self, instance: usize) -> Result<&CholeskyFactor> {
        let idx = match self.mode {
            CovMode::Local => instance,
            _ => 0,
        };
        self.factors.get(idx).ok_or(Error::Unfactorized(instance))
    }
}

/// Scatter `(1/count) Σ dᵀd` of the deviation rows `rows`, mirrored so the result is exactly symmetric.
fn scatter<'a>(
    batch: &'a FeatureMatrix,
    means: &'a InstanceMeans,
    rows: impl Iterator<Item = usize>,
) -> Array2<f64> {
    let d = batch.dim();
    let mut acc = Array2::<f64>::zeros((d, d));
    let mut count = 0usize;
    let mut dev = vec![0.0; d];
    for r in rows {
        let i = batch.instance_index()[r];
        let z = batch.row(r);
        let mu = means.means.row(i);
        for k in 0..d {
            dev[k] = z[k] - mu[k];
        }
        for a in 0..d {
            for b in a..d {
                acc[[a, b]] += dev[a] * dev[b];
            }
        }
        count += 1;
    }
    let norm = 1.0 / count as f64;
    for a in 0..d {
        for b in a..d {
            let v = acc[[a, b]] * norm;
            acc[[a, b]] = v;
            acc[[b, a]] = v;
        }
    }
    acc
}

fn add_ridge(mut m: Array2<f64>, eps: f64) -> Array2<f64> {
    m.diag_mut().mapv_inplace(|v| v + eps);
    m
}

pub fn pooled_covariance(
    batch: &FeatureMatrix,
    means: &InstanceMeans,
    mode: CovMode,
    ridge: impl Into<Ridge>,
) -> Result<CovarianceModel> {
    let ridge = ridge.into();
    let d = batch.dim();
    if means.means.ncols() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: means.means.ncols(),
        });
    }
    if means.means.nrows() != batch.num_instances() {
        return Err(Error::DimensionMismatch {
            expected: batch.num_instances(),
            got: means.means.nrows(),
        });
    }
    match mode {
        CovMode::Identity => {
            if let Ridge::Fixed(eps) = ridge {
                if !(eps >= 0.0) {
                    return Err(Error::arg("ridge", format!("must be >= 0, got {eps}")));
                }
            }
            Ok(CovarianceModel::identity(d))
        }
        CovMode::Global => {
            if batch.num_rows() < 2 {
                return Err(Error::InsufficientSamples(
                    "global covariance needs at least two views".into(),
                ));
            }
            let s = scatter(batch, means, batch.canonical_rows());
            let eps = ridge.resolve(&s)?;
            CovarianceModel::from_matrices(mode, vec![add_ridge(s, eps)], vec![eps])
        }
        CovMode::Local => {
            if batch.views_per_instance() < 2 {
                return Err(Error::InsufficientSamples(
                    "local covariance needs at least two views per instance".into(),
                ));
            }
            let mut matrices = Vec::with_capacity(batch.num_instances());
            let mut ridges = Vec::with_capacity(batch.num_instances());
            for i in 0..batch.num_instances() {
                let s = scatter(batch, means, batch.rows_of(i).iter().copied());
                let eps = ridge.resolve(&s)?;
                matrices.push(add_ridge(s, eps));
                ridges.push(eps);
            }
            CovarianceModel::from_matrices(mode, matrices, ridges)
        }
    }
}

/// `(z − mean)ᵀ Σ⁻¹ (z − mean)` for the covariance assigned to `instance`.
pub fn mahalanobis_sq(
    z: ArrayView1<'_, f64>,
    mean: ArrayView1<'_, f64>,
    cov: &CovarianceModel,
    instance: usize,
) -> Result<f64> {
    let d = cov.dim();
    if z.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: z.len(),
        });
    }
    if mean.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: mean.len(),
        });
    }
    let diff = &z - &mean;
    if cov.mode() == CovMode::Identity {
        return Ok(diff.dot(&diff));
    }
    let factor = cov.factor_for(instance)?;
    Ok(factor.quad_form(diff.view()).max(0.0))
}

/// Squared distance of every row of `batch` to its instance mean, in row order.
pub fn row_distances(
    batch: &FeatureMatrix,
    means: &InstanceMeans,
    cov: &CovarianceModel,
) -> Result<Vec<f64>> {
    (0..batch.num_rows())
        .map(|r| {
            let i = batch.instance_index()[r];
            mahalanobis_sq(batch.row(r), means.means.row(i), cov, i)
        })
        .collect()
}
