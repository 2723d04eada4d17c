//! Threshold-free and thresholded OOD metrics.
//!
//! Convention throughout: ID is the positive class and a detection is
//! predicted ID when `score >= threshold`.
//!
//! AUROC is the Mann-Whitney statistic computed exactly from pair counts
//! (ties count one half). FPR at a TPR target uses the observed scores as
//! candidate thresholds and picks the largest one that still admits at least
//! the target fraction of ID scores.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("no ID scores")]
    EmptyId,
    #[error("no OOD scores")]
    EmptyOod,
    #[error("non-finite score {0}")]
    NonFinite(f64),
    #[error("TPR target must be in (0, 1], got {0}")]
    BadTarget(f64),
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ScoreSet {
    pub id_scores: Vec<f64>,
    pub ood_scores: Vec<f64>,
}

impl ScoreSet {
    pub fn new(id_scores: Vec<f64>, ood_scores: Vec<f64>) -> Self {
        Self {
            id_scores,
            ood_scores,
        }
    }

    /// The same scores with ID and OOD exchanged.
    pub fn swapped(&self) -> Self {
        Self::new(self.ood_scores.clone(), self.id_scores.clone())
    }

    /// Apply `f` to every score.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::new(
            self.id_scores.iter().map(|&x| f(x)).collect(),
            self.ood_scores.iter().map(|&x| f(x)).collect(),
        )
    }

    fn check(&self) -> Result<(), EvalError> {
        if self.id_scores.is_empty() {
            return Err(EvalError::EmptyId);
        }
        if self.ood_scores.is_empty() {
            return Err(EvalError::EmptyOod);
        }
        if let Some(&x) = self
            .id_scores
            .iter()
            .chain(&self.ood_scores)
            .find(|x| !x.is_finite())
        {
            return Err(EvalError::NonFinite(x));
        }
        Ok(())
    }
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

/// Count of elements `>= t` in an ascending slice.
fn count_at_least(sorted_asc: &[f64], t: f64) -> usize {
    sorted_asc.len() - sorted_asc.partition_point(|&x| x < t)
}

/// Pair counts `(id > ood, id == ood)` over all `(id, ood)` pairs.
pub fn pair_counts(s: &ScoreSet) -> (u64, u64) {
    let ood = sorted(&s.ood_scores);
    let mut greater = 0u64;
    let mut ties = 0u64;
    for &x in &s.id_scores {
        let lo = ood.partition_point(|&o| o < x);
        let hi = ood.partition_point(|&o| o <= x);
        greater += lo as u64;
        ties += (hi - lo) as u64;
    }
    (greater, ties)
}

/// Exact AUROC: fraction of (ID, OOD) pairs ranked correctly, ties counting 1/2.
pub fn auroc(s: &ScoreSet) -> Result<f64, EvalError> {
    s.check()?;
    let (greater, ties) = pair_counts(s);
    let pairs = 2 * s.id_scores.len() as u64 * s.ood_scores.len() as u64;
    Ok((2 * greater + ties) as f64 / pairs as f64)
}

/// `(fpr, threshold)` at the most permissive threshold still reaching the
/// TPR target.
pub fn fpr_at_tpr(s: &ScoreSet, tpr_target: f64) -> Result<(f64, f64), EvalError> {
    s.check()?;
    if !(tpr_target > 0.0 && tpr_target <= 1.0) {
        return Err(EvalError::BadTarget(tpr_target));
    }
    let mut id_desc = sorted(&s.id_scores);
    id_desc.reverse();
    let n_id = id_desc.len();
    // Smallest k with k / n_id >= target; the k-th largest ID score is then the
    // largest threshold admitting at least k ID scores.
    let k = (1..=n_id)
        .find(|&k| k as f64 / n_id as f64 >= tpr_target)
        .unwrap_or(n_id);
    let threshold = id_desc[k - 1];
    let ood = sorted(&s.ood_scores);
    let fpr = count_at_least(&ood, threshold) as f64 / ood.len() as f64;
    Ok((fpr, threshold))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub n_id_detections: usize,
    pub recall: f64,
    pub id_rejected: f64,
    pub threshold: f64,
}

/// Fraction of ID detections kept (`score >= threshold`) and rejected.
pub fn recall_and_rejection(id_scores: &[f64], threshold: f64) -> RecallReport {
    let n = id_scores.len();
    let kept = id_scores.iter().filter(|&&x| x >= threshold).count();
    let recall = if n == 0 { 0.0 } else { kept as f64 / n as f64 };
    RecallReport {
        n_id_detections: n,
        recall,
        id_rejected: 1.0 - recall,
        threshold,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocRow {
    pub threshold: f64,
    pub tpr: f64,
    pub fpr: f64,
}

/// One row per distinct score, thresholds descending, so TPR and FPR are
/// non-decreasing down the table. The implicit `(0, 0)` start is not
/// emitted. With `max_rows`, rows are subsampled evenly and the last row is
/// always kept.
pub fn roc_table(s: &ScoreSet, max_rows: Option<usize>) -> Vec<RocRow> {
    let id = sorted(&s.id_scores);
    let ood = sorted(&s.ood_scores);
    let mut thresholds: Vec<f64> = id.iter().chain(&ood).copied().collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let rate = |sorted_asc: &[f64], t: f64| {
        if sorted_asc.is_empty() {
            0.0
        } else {
            count_at_least(sorted_asc, t) as f64 / sorted_asc.len() as f64
        }
    };
    let rows: Vec<RocRow> = thresholds
        .iter()
        .map(|&t| RocRow {
            threshold: t,
            tpr: rate(&id, t),
            fpr: rate(&ood, t),
        })
        .collect();
    match max_rows {
        Some(n) if n >= 1 && rows.len() > n => {
            let last = rows.len() - 1;
            (0..n)
                .map(|i| rows[if n == 1 { last } else { i * last / (n - 1) }])
                .collect()
        }
        _ => rows,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub bin_left: f64,
    pub bin_right: f64,
    pub id_count: usize,
    pub ood_count: usize,
}

/// Equal-width bins over the joint score range; the last bin is closed.
pub fn histogram(s: &ScoreSet, n_bins: usize) -> Vec<HistogramBin> {
    let all: Vec<f64> = s
        .id_scores
        .iter()
        .chain(&s.ood_scores)
        .copied()
        .filter(|x| x.is_finite())
        .collect();
    if all.is_empty() || n_bins == 0 {
        return Vec::new();
    }
    let lo = all.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = all.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let n = if hi > lo { n_bins } else { 1 };
    let width = (hi - lo) / n as f64;
    let mut bins: Vec<HistogramBin> = (0..n)
        .map(|i| HistogramBin {
            bin_left: lo + width * i as f64,
            bin_right: if i + 1 == n {
                hi
            } else {
                lo + width * (i + 1) as f64
            },
            id_count: 0,
            ood_count: 0,
        })
        .collect();
    let index = |x: f64| {
        if width == 0.0 {
            0
        } else {
            (((x - lo) / width) as usize).min(n - 1)
        }
    };
    for &x in s.id_scores.iter().filter(|x| x.is_finite()) {
        bins[index(x)].id_count += 1;
    }
    for &x in s.ood_scores.iter().filter(|x| x.is_finite()) {
        bins[index(x)].ood_count += 1;
    }
    bins
}

pub const DEFAULT_TPR_TARGET: f64 = 0.95;
pub const DEFAULT_HISTOGRAM_BINS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub auroc: f64,
    pub fpr_at_95: f64,
    pub threshold_used: f64,
    pub tpr_target: f64,
    pub n_id: usize,
    pub n_ood: usize,
    pub recall: RecallReport,
    #[serde(skip)]
    pub histogram: Vec<HistogramBin>,
    #[serde(skip)]
    pub roc: Vec<RocRow>,
}

/// Full report at the default 95% TPR target.
pub fn evaluate(s: &ScoreSet) -> Result<EvalReport, EvalError> {
    evaluate_at(s, DEFAULT_TPR_TARGET)
}

pub fn evaluate_at(s: &ScoreSet, tpr_target: f64) -> Result<EvalReport, EvalError> {
    let auroc = auroc(s)?;
    let (fpr, threshold) = fpr_at_tpr(s, tpr_target)?;
    Ok(EvalReport {
        auroc,
        fpr_at_95: fpr,
        threshold_used: threshold,
        tpr_target,
        n_id: s.id_scores.len(),
        n_ood: s.ood_scores.len(),
        recall: recall_and_rejection(&s.id_scores, threshold),
        histogram: histogram(s, DEFAULT_HISTOGRAM_BINS),
        roc: roc_table(s, None),
    })
}

fn headed_writer(path: &Path, header: &[&str]) -> Result<csv::Writer<std::fs::File>, csv::Error> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)?;
    w.write_record(header)?;
    Ok(w)
}

/// `threshold,tpr,fpr` rows; the header is written even for an empty table.
pub fn write_roc_csv(rows: &[RocRow], path: &Path) -> Result<(), csv::Error> {
    let mut w = headed_writer(path, &["threshold", "tpr", "fpr"])?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_histogram_csv(bins: &[HistogramBin], path: &Path) -> Result<(), csv::Error> {
    let mut w = headed_writer(path, &["bin_left", "bin_right", "id_count", "ood_count"])?;
    for b in bins {
        w.serialize(b)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(id: &[f64], ood: &[f64]) -> ScoreSet {
        ScoreSet::new(id.to_vec(), ood.to_vec())
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&set(&[0.9, 0.8], &[0.2, 0.1])).unwrap(), 1.0);
        assert_eq!(auroc(&set(&[0.5], &[0.5])).unwrap(), 0.5);
        // Pairs: 0.8 beats both, 0.6 beats 0.3, 0.4 beats 0.3 -> 4 of 6.
        assert_eq!(
            auroc(&set(&[0.8, 0.6, 0.4], &[0.7, 0.3])).unwrap(),
            4.0 / 6.0
        );
    }

    #[test]
    fn empty_sides_are_errors() {
        assert_eq!(auroc(&set(&[], &[0.1])), Err(EvalError::EmptyId));
        assert_eq!(
            fpr_at_tpr(&set(&[0.1], &[]), 0.95),
            Err(EvalError::EmptyOod)
        );
        assert!(matches!(
            auroc(&set(&[f64::NAN], &[0.1])),
            Err(EvalError::NonFinite(_))
        ));
        assert_eq!(
            fpr_at_tpr(&set(&[0.1], &[0.2]), 0.0),
            Err(EvalError::BadTarget(0.0))
        );
    }

    #[test]
    fn fpr_examples() {
        assert_eq!(
            fpr_at_tpr(&set(&[0.9, 0.8], &[0.2, 0.1]), 0.95).unwrap(),
            (0.0, 0.8)
        );
        let id: Vec<f64> = (1..=20).map(|i| i as f64 * 0.05).collect();
        let (fpr, t) = fpr_at_tpr(&set(&id, &[0.12]), 0.95).unwrap();
        assert_eq!(t, id[1]);
        assert!((t - 0.10).abs() < 1e-12);
        assert_eq!(fpr, 1.0);
        assert_eq!(
            fpr_at_tpr(&set(&[0.3, 0.7], &[0.5]), 1.0).unwrap(),
            (1.0, 0.3)
        );
    }

    #[test]
    fn recall_examples() {
        let r = recall_and_rejection(&[0.6, 0.9], 0.5);
        assert_eq!((r.recall, r.id_rejected), (1.0, 0.0));
        let r = recall_and_rejection(&[0.2, 0.8], 0.5);
        assert_eq!(r.recall, 0.5);
        assert!((r.recall + r.id_rejected - 1.0).abs() < 1e-9);
    }

    #[test]
    fn roc_examples() {
        let rows = roc_table(&set(&[0.9, 0.8], &[0.2, 0.1]), None);
        assert!(rows.iter().any(|r| r.tpr == 1.0 && r.fpr == 0.0));
        let rows = roc_table(&set(&[0.5, 0.5], &[0.5]), None);
        assert_eq!(
            rows,
            vec![RocRow {
                threshold: 0.5,
                tpr: 1.0,
                fpr: 1.0
            }]
        );
    }

    #[test]
    fn roc_subsampling_keeps_last_row() {
        let id: Vec<f64> = (0..50).map(|i| i as f64).collect();
        let full = roc_table(&set(&id, &[0.5]), None);
        let small = roc_table(&set(&id, &[0.5]), Some(5));
        assert_eq!(small.len(), 5);
        assert_eq!(small.first(), full.first());
        assert_eq!(small.last(), full.last());
    }

    #[test]
    fn histogram_counts_everything() {
        let s = set(&[0.0, 0.5, 1.0, 1.0], &[0.1, 0.2]);
        let h = histogram(&s, 4);
        assert_eq!(h.len(), 4);
        assert_eq!(h.iter().map(|b| b.id_count).sum::<usize>(), 4);
        assert_eq!(h.iter().map(|b| b.ood_count).sum::<usize>(), 2);
        assert_eq!(h[3].id_count, 2);
        assert_eq!(h[3].bin_right, 1.0);
        let flat = histogram(&set(&[0.3], &[0.3]), 10);
        assert_eq!(flat.len(), 1);
    }

    #[test]
    fn report_is_self_consistent() {
        let s = set(&[0.9, 0.7, 0.65, 0.4], &[0.5, 0.3, 0.66]);
        let r = evaluate(&s).unwrap();
        let recount = s
            .ood_scores
            .iter()
            .filter(|&&x| x >= r.threshold_used)
            .count() as f64
            / s.ood_scores.len() as f64;
        assert_eq!(r.fpr_at_95, recount);
        assert_eq!(r.recall.threshold, r.threshold_used);
    }
}
