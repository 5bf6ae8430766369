use crate::error::{Error, Result};
use crate::weights::WeightTable;

/// Sizes up to this many scores use exact pair counting.
pub const PAIR_COUNT_LIMIT: usize = 10_000;

/// Area under the ROC curve of `scores` for the `positives` class, ties counted ½.
pub fn auroc(scores: &[f64], positives: &[bool]) -> Result<f64> {
    if scores.len() != positives.len() {
        return Err(Error::Misaligned(format!(
            "{} scores, {} flags",
            scores.len(),
            positives.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("auroc scores"));
    }
    let n_pos = positives.iter().filter(|&&p| p).count();
    let n_neg = positives.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::arg("flags", "both classes must be present"));
    }
    if scores.len() <= PAIR_COUNT_LIMIT {
        Ok(pair_count(scores, positives, n_pos, n_neg))
    } else {
        Ok(rank_statistic(scores, positives, n_pos, n_neg))
    }
}

fn pair_count(scores: &[f64], positives: &[bool], n_pos: usize, n_neg: usize) -> f64 {
    let mut twice = 0u64;
    for (i, &si) in scores.iter().enumerate() {
        if !positives[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if positives[j] {
                continue;
            }
            twice += match si.partial_cmp(&sj) {
                Some(std::cmp::Ordering::Greater) => 2,
                Some(std::cmp::Ordering::Equal) => 1,
                _ => 0,
            };
        }
    }
    twice as f64 / (2.0 * n_pos as f64 * n_neg as f64)
}

/// Mann–Whitney form with midranks for ties.
fn rank_statistic(scores: &[f64], positives: &[bool], n_pos: usize, n_neg: usize) -> f64 {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut k = 0;
    while k < order.len() {
        let mut end = k + 1;
        while end < order.len() && scores[order[end]] == scores[order[k]] {
            end += 1;
        }
        // Ranks k+1..=end share their mean.
        let mid = (k + 1 + end) as f64 / 2.0;
        rank_sum += mid * order[k..end].iter().filter(|&&r| positives[r]).count() as f64;
        k = end;
    }
    let np = n_pos as f64;
    (rank_sum - np * (np + 1.0) / 2.0) / (np * n_neg as f64)
}

/// How well a low normalized weight predicts a flagged view.
pub fn weight_ood_auroc(weights: &WeightTable, flags: &[bool]) -> Result<f64> {
    let scores: Vec<f64> = weights.normalized().iter().map(|w| -w).collect();
    auroc(&scores, flags)
}
