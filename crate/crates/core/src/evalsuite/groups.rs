use std::io::Write;

use ndarray::{concatenate, Array2, ArrayView2, Axis};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::probe::{linear_probe, ProbeConfig};
use crate::error::{Error, Result};

/// Where the "clean" side of each group probe comes from.
#[derive(Debug, Clone, Copy)]
pub enum CleanPool<'a> {
    /// Unflagged rows of the feature matrix itself (flags per row), excluding the group.
    Unflagged(&'a [bool]),
    /// A separate matrix of clean features.
    External(ArrayView2<'a, f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupAccuracy {
    /// 1-based, lowest weights first. The control group is numbered `G + 1`.
    pub group: usize,
    pub size: usize,
    /// Smallest and largest weight in the group.
    pub weight_range: [f64; 2],
    pub ood_fraction: Option<f64>,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    /// Rows on each side of the balanced probe.
    pub per_side: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub groups: Vec<GroupAccuracy>,
    pub control: GroupAccuracy,
}

impl GroupReport {
    /// Adjacent pairs where a later group is strictly more separable on test.
    pub fn inversions(&self) -> usize {
        self.groups
            .windows(2)
            .filter(|w| w[1].test_accuracy > w[0].test_accuracy)
            .count()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let err = |e: csv::Error| Error::arg("csv", e.to_string());
        w.write_record(["group", "train_acc", "test_acc"]).map_err(err)?;
        for g in &self.groups {
            w.write_record([g.group.to_string(), g.train_accuracy.to_string(), g.test_accuracy.to_string()])
                .map_err(err)?;
        }
        let c = &self.control;
        w.write_record(["control".to_string(), c.train_accuracy.to_string(), c.test_accuracy.to_string()])
            .map_err(err)?;
        w.flush().map_err(|e| Error::arg("csv", e.to_string()))
    }
}

/// Partition of `0..n` sorted by `weights` ascending into `groups` near-equal chunks.
pub fn quantile_groups(weights: &[f64], groups: usize) -> Result<Vec<Vec<usize>>> {
    if groups < 2 {
        return Err(Error::arg("groups", "must be >= 2"));
    }
    let n = weights.len();
    if n < groups {
        return Err(Error::InsufficientSamples(format!("{n} rows for {groups} groups")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| weights[a].total_cmp(&weights[b]).then(a.cmp(&b)));
    let (base, extra) = (n / groups, n % groups);
    let mut out = Vec::with_capacity(groups);
    let mut start = 0;
    for g in 0..groups {
        let len = base + usize::from(g < extra);
        out.push(order[start..start + len].to_vec());
        start += len;
    }
    Ok(out)
}

fn pick<R: Rng>(rows: &[usize], k: usize, rng: &mut R) -> Vec<usize> {
    let mut idx = sample(rng, rows.len(), k).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| rows[i]).collect()
}

fn binary_probe<R: Rng>(
    positive: Array2<f64>,
    negative: Array2<f64>,
    probe: &ProbeConfig,
    rng: &mut R,
) -> Result<(f64, f64)> {
    let labels: Vec<usize> = std::iter::repeat_n(1, positive.nrows())
        .chain(std::iter::repeat_n(0, negative.nrows()))
        .collect();
    let x = concatenate(Axis(0), &[positive.view(), negative.view()])
        .map_err(|e| Error::InvalidLayout(e.to_string()))?;
    let r = linear_probe(x.view(), &labels, probe, rng)?;
    Ok((r.train_accuracy, r.test_accuracy))
}

const MIN_PER_SIDE: usize = 4;

/// Sort views by weight, split into `groups` quantile groups, and probe each
/// group against an equal number of clean rows. A clean-versus-clean probe of
/// the same size serves as control.
pub fn quantile_group_separability<R: Rng>(
    features: ArrayView2<'_, f64>,
    weights: &[f64],
    pool: CleanPool<'_>,
    groups: usize,
    probe: &ProbeConfig,
    rng: &mut R,
) -> Result<GroupReport> {
    if features.nrows() != weights.len() {
        return Err(Error::Misaligned(format!(
            "{} feature rows, {} weights",
            features.nrows(),
            weights.len()
        )));
    }
    if let CleanPool::Unflagged(flags) = pool {
        if flags.len() != weights.len() {
            return Err(Error::Misaligned(format!("{} flags, {} weights", flags.len(), weights.len())));
        }
    }
    if let CleanPool::External(p) = pool {
        if p.ncols() != features.ncols() {
            return Err(Error::DimensionMismatch {
                expected: features.ncols(),
                got: p.ncols(),
            });
        }
    }
    let parts = quantile_groups(weights, groups)?;
    let mut in_group = vec![0usize; weights.len()];
    for (g, rows) in parts.iter().enumerate() {
        for &r in rows {
            in_group[r] = g;
        }
    }
    let mut report = Vec::with_capacity(groups);
    for (g, rows) in parts.iter().enumerate() {
        let (clean_side, ood_fraction) = match pool {
            CleanPool::Unflagged(flags) => {
                let clean: Vec<usize> = (0..weights.len()).filter(|&r| !flags[r] && in_group[r] != g).collect();
                let ood = rows.iter().filter(|&&r| flags[r]).count() as f64 / rows.len() as f64;
                (Some(clean), Some(ood))
            }
            CleanPool::External(_) => (None, None),
        };
        let available = match (&clean_side, pool) {
            (Some(clean), _) => clean.len(),
            (None, CleanPool::External(p)) => p.nrows(),
            (None, CleanPool::Unflagged(_)) => 0,
        };
        let k = rows.len().min(available);
        if k < MIN_PER_SIDE {
            return Err(Error::InsufficientSamples(format!(
                "group {} has {} rows against {available} clean rows",
                g + 1,
                rows.len()
            )));
        }
        let pos = features.select(Axis(0), &pick(rows, k, rng));
        let neg = match (&clean_side, pool) {
            (Some(clean), _) => features.select(Axis(0), &pick(clean, k, rng)),
            (None, CleanPool::External(p)) => {
                let all: Vec<usize> = (0..p.nrows()).collect();
                p.select(Axis(0), &pick(&all, k, rng))
            }
            (None, CleanPool::Unflagged(_)) => unreachable!(),
        };
        let (train_accuracy, test_accuracy) = binary_probe(pos, neg, probe, rng)?;
        report.push(GroupAccuracy {
            group: g + 1,
            size: rows.len(),
            weight_range: [weights[rows[0]], weights[*rows.last().expect("nonempty group")]],
            ood_fraction,
            train_accuracy,
            test_accuracy,
            per_side: k,
        });
    }

    let clean_rows: Vec<usize>;
    let clean_matrix = match pool {
        CleanPool::Unflagged(flags) => {
            clean_rows = (0..weights.len()).filter(|&r| !flags[r]).collect();
            features.select(Axis(0), &clean_rows)
        }
        CleanPool::External(p) => p.to_owned(),
    };
    let k = parts[0].len().min(clean_matrix.nrows() / 2);
    if k < MIN_PER_SIDE {
        return Err(Error::InsufficientSamples(format!(
            "{} clean rows for a control group",
            clean_matrix.nrows()
        )));
    }
    let all: Vec<usize> = (0..clean_matrix.nrows()).collect();
    let chosen = pick(&all, 2 * k, rng);
    let mut shuffled = chosen.clone();
    rand::seq::SliceRandom::shuffle(shuffled.as_mut_slice(), rng);
    let (a, b) = shuffled.split_at(k);
    let (train_accuracy, test_accuracy) = binary_probe(
        clean_matrix.select(Axis(0), a),
        clean_matrix.select(Axis(0), b),
        probe,
        rng,
    )?;
    let control = GroupAccuracy {
        group: groups + 1,
        size: 2 * k,
        weight_range: [f64::NAN, f64::NAN],
        ood_fraction: matches!(pool, CleanPool::Unflagged(_)).then_some(0.0),
        train_accuracy,
        test_accuracy,
        per_side: k,
    };
    Ok(GroupReport {
        groups: report,
        control,
    })
}
