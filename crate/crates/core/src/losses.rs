//! Per-view invariance losses and the weighted batch objective.
//!
//! Both loss kinds act on unit-normalized features. Only the query view
//! carries gradient: the positive partner and the negatives are treated as
//! constants, the usual stop-gradient arrangement of two-branch SSL methods.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::FeatureMatrix;
use crate::weights::WeightTable;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    InfoNce,
    PairwiseL2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSpec {
    pub kind: LossKind,
    pub contrastive_temperature: f64,
    /// `None` uses every other instance in the batch as a negative.
    pub negatives_per_query: Option<usize>,
}

impl Default for LossSpec {
    fn default() -> Self {
        Self {
            kind: LossKind::InfoNce,
            contrastive_temperature: 0.2,
            negatives_per_query: None,
        }
    }
}

impl LossSpec {
    pub fn validate(&self) -> Result<()> {
        if self.kind == LossKind::InfoNce {
            let t = self.contrastive_temperature;
            if !(t > 0.0) || !t.is_finite() {
                return Err(Error::arg(
                    "contrastive_temperature",
                    format!("must be > 0, got {t}"),
                ));
            }
            if self.negatives_per_query == Some(0) {
                return Err(Error::arg("negatives_per_query", "InfoNCE needs at least one negative"));
            }
        }
        Ok(())
    }
}

fn unit(v: ArrayView1<'_, f64>) -> Result<(Array1<f64>, f64)> {
    let norm = v.dot(&v).sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::arg("vector", "zero-norm or non-finite input"));
    }
    Ok((&v / norm, norm))
}

/// Chain rule through `a ↦ a/‖a‖`: maps a gradient w.r.t. `â` to one w.r.t. `a`.
fn through_normalization(unit_a: &Array1<f64>, norm: f64, grad_unit: Array1<f64>) -> Array1<f64> {
    let radial = unit_a.dot(&grad_unit);
    (grad_unit - unit_a * radial) / norm
}

/// `‖a/‖a‖ − b/‖b‖‖² = 2 − 2·cos(a, b)`.
pub fn pairwise_l2_loss(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> Result<f64> {
    Ok(pairwise_l2_with_grad(a, b)?.0)
}

/// Loss and its gradient with respect to `a`; `b` is a constant.
pub fn pairwise_l2_with_grad(
    a: ArrayView1<'_, f64>,
    b: ArrayView1<'_, f64>,
) -> Result<(f64, Array1<f64>)> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    let (ua, na) = unit(a)?;
    let (ub, _) = unit(b)?;
    let diff = &ua - &ub;
    let value = diff.dot(&diff).clamp(0.0, 4.0);
    let grad = through_normalization(&ua, na, diff * 2.0);
    Ok((value, grad))
}

pub fn info_nce_loss(
    query: ArrayView1<'_, f64>,
    positive: ArrayView1<'_, f64>,
    negatives: &[ArrayView1<'_, f64>],
    temp: f64,
) -> Result<f64> {
    Ok(info_nce_with_grad(query, positive, negatives, temp)?.0)
}

/// `−log softmax_0(q̂·k̂⁺/t, q̂·k̂⁻_1/t, …)` and its gradient with respect to the query.
pub fn info_nce_with_grad(
    query: ArrayView1<'_, f64>,
    positive: ArrayView1<'_, f64>,
    negatives: &[ArrayView1<'_, f64>],
    temp: f64,
) -> Result<(f64, Array1<f64>)> {
    if negatives.is_empty() {
        return Err(Error::arg("negatives", "InfoNCE needs at least one negative"));
    }
    if !(temp > 0.0) || !temp.is_finite() {
        return Err(Error::arg("temp", format!("must be > 0, got {temp}")));
    }
    let d = query.len();
    let (uq, nq) = unit(query)?;
    let mut keys = Vec::with_capacity(negatives.len() + 1);
    for k in std::iter::once(&positive).chain(negatives.iter()) {
        if k.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: k.len(),
            });
        }
        keys.push(unit(k.view())?.0);
    }
    let logits: Vec<f64> = keys.iter().map(|k| uq.dot(k) / temp).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let value = if max == logits[0] {
        // ln(1 + Σ e^{l_k − l_0}) keeps full relative precision as the loss nears 0.
        let rest: f64 = logits[1..].iter().map(|s| (s - logits[0]).exp()).sum();
        rest.ln_1p()
    } else {
        max + z.ln() - logits[0]
    }
    .max(0.0);

    let mut grad_unit = Array1::<f64>::zeros(d);
    for (k, e) in keys.iter().zip(&exps) {
        grad_unit.scaled_add(e / z, k);
    }
    grad_unit -= &keys[0];
    grad_unit /= temp;
    Ok((value, through_normalization(&uq, nq, grad_unit)))
}

/// `𝓛(x_i, n_j)` for every row of a batch, aligned to the batch row order.
#[derive(Debug, Clone, PartialEq)]
pub struct PerViewLosses {
    pub instance: Vec<usize>,
    pub view: Vec<usize>,
    pub values: Vec<f64>,
}

impl PerViewLosses {
    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

/// Per-view losses of a batch plus the gradient of each loss w.r.t. its own query row.
///
/// The positive partner of view `j` is view `(j+1) mod M` of the same
/// instance; with a single view it is the instance's original feature.
/// Negatives are the partners of other instances in the batch.
pub fn batch_view_losses(
    features: &FeatureMatrix,
    originals: Option<ArrayView2<'_, f64>>,
    spec: &LossSpec,
) -> Result<(PerViewLosses, Array2<f64>)> {
    batch_view_losses_with_keys(features, features, originals, spec)
}

/// As [`batch_view_losses`], but query rows come from `queries` while
/// partners and negatives come from `keys` (same layout). Holding `keys`
/// fixed while `queries` move gives the stop-gradient objective exactly.
pub fn batch_view_losses_with_keys(
    queries: &FeatureMatrix,
    keys: &FeatureMatrix,
    originals: Option<ArrayView2<'_, f64>>,
    spec: &LossSpec,
) -> Result<(PerViewLosses, Array2<f64>)> {
    spec.validate()?;
    let features = keys;
    if queries.instance_index() != features.instance_index()
        || queries.view_index() != features.view_index()
        || queries.dim() != features.dim()
    {
        return Err(Error::Misaligned("query and key layouts differ".into()));
    }
    let n = features.num_instances();
    let m = features.views_per_instance();
    let d = features.dim();
    if m == 1 {
        match originals {
            Some(o) if o.nrows() == n && o.ncols() == d => {}
            Some(o) => {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    got: o.nrows(),
                })
            }
            None => return Err(Error::MissingOriginals),
        }
    }
    let partner = |i: usize, j: usize| -> ArrayView1<'_, f64> {
        if m == 1 {
            originals.as_ref().expect("checked above").row(i)
        } else {
            features.row(features.rows_of(i)[(j + 1) % m])
        }
    };
    let negatives_for = |i: usize| -> Vec<usize> {
        let k = spec.negatives_per_query.unwrap_or(n - 1).min(n - 1);
        (1..=k).map(|s| (i + s) % n).collect()
    };
    if spec.kind == LossKind::InfoNce && n < 2 {
        return Err(Error::InsufficientSamples(
            "InfoNCE needs at least two instances per batch".into(),
        ));
    }

    let rows = features.num_rows();
    let mut values = vec![0.0; rows];
    let mut grads = Array2::<f64>::zeros((rows, d));
    for r in 0..rows {
        let i = features.instance_index()[r];
        let j = features.view_index()[r];
        let q = queries.row(r);
        let (v, g) = match spec.kind {
            LossKind::PairwiseL2 => pairwise_l2_with_grad(q, partner(i, j))?,
            LossKind::InfoNce => {
                let negs: Vec<_> = negatives_for(i).into_iter().map(|o| partner(o, j)).collect();
                info_nce_with_grad(q, partner(i, j), &negs, spec.contrastive_temperature)?
            }
        };
        values[r] = v;
        grads.row_mut(r).assign(&g);
    }
    Ok((
        PerViewLosses {
            instance: features.instance_index().to_vec(),
            view: features.view_index().to_vec(),
            values,
        },
        grads,
    ))
}

/// `Σ_ij w̄_ij · 𝓛_ij`.
pub fn weighted_batch_loss(losses: &PerViewLosses, weights: &WeightTable) -> Result<f64> {
    if losses.values.len() != weights.len() {
        return Err(Error::Misaligned(format!(
            "{} losses vs {} weights",
            losses.values.len(),
            weights.len()
        )));
    }
    if losses.instance != weights.instance() || losses.view != weights.view() {
        return Err(Error::Misaligned("instance/view ids differ".into()));
    }
    Ok(losses
        .values
        .iter()
        .zip(weights.normalized())
        .map(|(l, w)| l * w)
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn pairwise_examples() {
        let e0 = array![1.0, 0.0];
        let e1 = array![0.0, 1.0];
        let neg = array![-1.0, 0.0];
        assert!(pairwise_l2_loss(e0.view(), e0.view()).unwrap().abs() < 1e-15);
        assert!((pairwise_l2_loss(e0.view(), neg.view()).unwrap() - 4.0).abs() < 1e-15);
        assert!((pairwise_l2_loss(e0.view(), e1.view()).unwrap() - 2.0).abs() < 1e-15);
        let z = array![0.0, 0.0];
        assert!(pairwise_l2_loss(z.view(), e0.view()).is_err());
    }

    #[test]
    fn pairwise_is_scale_free() {
        let a = array![3.0, 4.0];
        let b = array![1.0, 0.5];
        let l1 = pairwise_l2_loss(a.view(), b.view()).unwrap();
        let l2 = pairwise_l2_loss((&a * 7.0).view(), (&b * 0.1).view()).unwrap();
        assert!((l1 - l2).abs() < 1e-14);
    }

    #[test]
    fn info_nce_examples() {
        let q = array![1.0, 0.0];
        let k = array![0.6, 0.8];
        let kn = array![0.6, -0.8];
        let v = info_nce_loss(q.view(), k.view(), &[kn.view()], 0.3).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-12);

        // q·k⁺/t = 20, q·k⁻/t = −20.
        let pos = array![1.0, 0.0];
        let negv = array![-1.0, 0.0];
        let v = info_nce_loss(q.view(), pos.view(), &[negv.view()], 0.05).unwrap();
        assert!(v < 1e-8);

        assert!(info_nce_loss(q.view(), k.view(), &[], 0.5).is_err());
        assert!(info_nce_loss(q.view(), k.view(), &[kn.view()], 0.0).is_err());
    }

    #[test]
    fn info_nce_against_direct_softmax() {
        let q = array![1.0, 0.0];
        let kp = array![0.8, 0.6];
        let n1 = array![0.0, 1.0];
        let n2 = array![-1.0, 0.0];
        let v = info_nce_loss(q.view(), kp.view(), &[n1.view(), n2.view()], 0.5).unwrap();
        // Similarities 0.8, 0, −1 over t = 0.5.
        let (a, b, c) = (1.6f64.exp(), 0.0f64.exp(), (-2.0f64).exp());
        let oracle = -(a / (a + b + c)).ln();
        assert!((v - oracle).abs() < 1e-9);
    }

    #[test]
    fn info_nce_equal_similarities() {
        let q = array![1.0, 0.0, 0.0];
        let k = array![0.0, 1.0, 0.0];
        let negs = [array![0.0, 0.0, 1.0], array![0.0, -1.0, 0.0], array![0.0, 0.0, -1.0]];
        let views: Vec<_> = negs.iter().map(|v| v.view()).collect();
        let v = info_nce_loss(q.view(), k.view(), &views, 0.7).unwrap();
        assert!((v - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn weighted_loss_examples() {
        let batch = FeatureMatrix::from_layout(array![[1.0], [2.0]], 2).unwrap();
        let losses = PerViewLosses {
            instance: vec![0, 0],
            view: vec![0, 1],
            values: vec![2.0, 4.0],
        };
        let uniform = WeightTable::uniform(&batch, 1.0);
        assert!((weighted_batch_loss(&losses, &uniform).unwrap() - 3.0).abs() < 1e-15);

        let mut buf = Vec::new();
        uniform.write_csv(&mut buf).unwrap();
        let point = "instance,view,dist_sq,raw_w,norm_w\n0,0,0,1,1\n0,1,9,0.0001,0\n";
        let table = WeightTable::read_csv(point.as_bytes(), 1.0).unwrap();
        assert_eq!(weighted_batch_loss(&losses, &table).unwrap(), 2.0);

        let skew = "instance,view,dist_sq,raw_w,norm_w\n0,0,0,1,0.7311\n0,1,1,0.3679,0.2689\n";
        let table = WeightTable::read_csv(skew.as_bytes(), 1.0).unwrap();
        let l = PerViewLosses {
            values: vec![1.0, 10.0],
            ..losses.clone()
        };
        assert!((weighted_batch_loss(&l, &table).unwrap() - 3.42).abs() < 1e-3);

        let other = FeatureMatrix::from_layout(array![[1.0], [2.0], [3.0], [4.0]], 2).unwrap();
        assert!(weighted_batch_loss(&losses, &WeightTable::uniform(&other, 1.0)).is_err());
    }

    #[test]
    fn batch_losses_use_in_batch_negatives() {
        let f = FeatureMatrix::from_layout(
            array![[1.0, 0.0], [1.0, 0.1], [0.0, 1.0], [0.1, 1.0], [-1.0, 0.0], [-1.0, 0.2]],
            2,
        )
        .unwrap();
        let spec = LossSpec::default();
        let (l, g) = batch_view_losses(&f, None, &spec).unwrap();
        assert_eq!(l.values.len(), 6);
        assert_eq!(g.dim(), (6, 2));
        // Row 0: query (1,0), positive (1,0.1), negatives are view 1 of instances 1 and 2.
        let q = f.row(0);
        let expected = info_nce_loss(q, f.row(1), &[f.row(3), f.row(5)], 0.2).unwrap();
        assert!((l.values[0] - expected).abs() < 1e-15);

        let one = LossSpec {
            negatives_per_query: Some(1),
            ..spec
        };
        let (l1, _) = batch_view_losses(&f, None, &one).unwrap();
        let expected = info_nce_loss(q, f.row(1), &[f.row(3)], 0.2).unwrap();
        assert!((l1.values[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn single_view_pairs_with_original() {
        let f = FeatureMatrix::from_layout(array![[1.0, 0.0], [0.0, 1.0]], 1).unwrap();
        let spec = LossSpec {
            kind: LossKind::PairwiseL2,
            ..LossSpec::default()
        };
        assert!(batch_view_losses(&f, None, &spec).is_err());
        let o = array![[1.0, 0.0], [0.0, -1.0]];
        let (l, _) = batch_view_losses(&f, Some(o.view()), &spec).unwrap();
        assert!(l.values[0].abs() < 1e-15);
        assert!((l.values[1] - 4.0).abs() < 1e-12);
    }
}
