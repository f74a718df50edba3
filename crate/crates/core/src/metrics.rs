//! OOD detection metrics. Larger scores mean "more in-distribution".
//!
//! AUROC is `P(id > ood) + ½·P(id = ood)` over all ID/OOD pairs, computed from
//! exact integer pair counts after one sort; the counts equal brute-force pair
//! enumeration exactly and the ratio is within one ulp of it. FPR95 uses an order-statistic threshold: the
//! `ceil(tpr·n_id)`-th largest ID score, with `score ≥ threshold` counted as
//! accepted. No interpolation between scores.

use serde::{Deserialize, Serialize};

use crate::embedding::SimilarityRow;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricResult {
    pub auroc: f64,
    pub fpr95: f64,
    /// Score cutoff at which at least 95% of ID scores are accepted.
    pub threshold: f64,
    pub n_id: usize,
    pub n_ood: usize,
}

impl MetricResult {
    pub fn compute(id_scores: &[f64], ood_scores: &[f64]) -> Result<Self> {
        let auroc = auroc(id_scores, ood_scores)?;
        let (fpr95, threshold) = fpr_at_tpr(id_scores, ood_scores, 0.95)?;
        Ok(Self {
            auroc,
            fpr95,
            threshold,
            n_id: id_scores.len(),
            n_ood: ood_scores.len(),
        })
    }
}

fn check_scores(scores: &[f64]) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::EmptyInput);
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFinite { row: i, col: 0 });
    }
    Ok(())
}

/// Pair counts `(greater, ties)` where `greater = #{(i, o): id_i > ood_o}`.
pub fn auroc_pair_counts(id_scores: &[f64], ood_scores: &[f64]) -> (u128, u128) {
    let mut ood = ood_scores.to_vec();
    ood.sort_by(f64::total_cmp);
    let mut greater = 0u128;
    let mut ties = 0u128;
    for &s in id_scores {
        let below = ood.partition_point(|&o| o < s);
        let not_above = ood.partition_point(|&o| o <= s);
        greater += below as u128;
        ties += (not_above - below) as u128;
    }
    (greater, ties)
}

pub fn auroc(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    check_scores(id_scores)?;
    check_scores(ood_scores)?;
    let (greater, ties) = auroc_pair_counts(id_scores, ood_scores);
    // Work in half-pair units so ties stay integral: U2 = 2·greater + ties.
    let total2 = 2 * id_scores.len() as u128 * ood_scores.len() as u128;
    let u2 = 2 * greater + ties;
    // Dividing the smaller side keeps auroc(a, b) + auroc(b, a) == 1 exactly.
    Ok(if 2 * u2 <= total2 {
        u2 as f64 / total2 as f64
    } else {
        1.0 - (total2 - u2) as f64 / total2 as f64
    })
}

/// `(fpr, threshold)` at the given true-positive-rate target.
pub fn fpr_at_tpr(id_scores: &[f64], ood_scores: &[f64], tpr_target: f64) -> Result<(f64, f64)> {
    check_scores(id_scores)?;
    check_scores(ood_scores)?;
    if !(tpr_target > 0.0 && tpr_target <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "tpr target must lie in (0, 1], got {tpr_target}"
        )));
    }
    let n = id_scores.len();
    let rank = ((tpr_target * n as f64 - 1e-9).ceil() as usize).clamp(1, n);
    let mut sorted = id_scores.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let threshold = sorted[rank - 1];
    let accepted = ood_scores.iter().filter(|&&s| s >= threshold).count();
    Ok((accepted as f64 / ood_scores.len() as f64, threshold))
}

/// Fraction of rows whose top-ranked class equals the label.
pub fn accuracy(sims: &[SimilarityRow], labels: &[usize]) -> Result<f64> {
    if sims.is_empty() {
        return Err(Error::EmptyInput);
    }
    if sims.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} rows but {} labels",
            sims.len(),
            labels.len()
        )));
    }
    let mut correct = 0usize;
    for (i, (row, &label)) in sims.iter().zip(labels).enumerate() {
        if label >= row.classes() {
            return Err(Error::LabelOutOfRange {
                index: i,
                label: label as i64,
                classes: row.classes(),
            });
        }
        if row.order()[0] == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / sims.len() as f64)
}
