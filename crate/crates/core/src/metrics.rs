//! Detection and root-cause ranking metrics.

use std::fmt::Write as _;

use crate::error::{invalid, Result};
use crate::threshold::{point_adjust, segments_from_labels};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
    pub point_adjusted: bool,
    /// No positive labels, so recall is reported as 0.
    pub no_positives: bool,
}

impl DetectionReport {
    pub fn to_key_values(&self, prefix: &str) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{prefix}precision={}", self.precision);
        let _ = writeln!(out, "{prefix}recall={}", self.recall);
        let _ = writeln!(out, "{prefix}f1={}", self.f1);
        let _ = writeln!(out, "{prefix}tp={}", self.tp);
        let _ = writeln!(out, "{prefix}fp={}", self.fp);
        let _ = writeln!(out, "{prefix}fn={}", self.fn_);
        let _ = writeln!(out, "{prefix}tn={}", self.tn);
        out
    }
}

/// Confusion-matrix metrics; with `adjusted`, decisions are first
/// point-adjusted against the segments of `labels`.
pub fn detection_metrics(pred: &[bool], labels: &[bool], adjusted: bool) -> Result<DetectionReport> {
    if pred.len() != labels.len() {
        return Err(invalid(format!(
            "{} decisions but {} labels",
            pred.len(),
            labels.len()
        )));
    }
    let pred = if adjusted {
        point_adjust(pred, &segments_from_labels(labels))
    } else {
        pred.to_vec()
    };
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for (&p, &l) in pred.iter().zip(labels) {
        match (p, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(DetectionReport {
        precision,
        recall,
        f1,
        tp,
        fp,
        fn_,
        tn,
        point_adjusted: adjusted,
        no_positives: tp + fn_ == 0,
    })
}

/// Rank-based area under the ROC curve with midranks for ties.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(invalid(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(invalid("AUROC needs both positive and negative labels"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut k = 0;
    while k < order.len() {
        let mut e = k;
        while e + 1 < order.len() && scores[order[e + 1]] == scores[order[k]] {
            e += 1;
        }
        let midrank = (k + e) as f64 / 2.0 + 1.0;
        for &idx in &order[k..=e] {
            if labels[idx] {
                rank_sum += midrank;
            }
        }
        k = e + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Top-`k` size for a ground-truth set of size `gt` at `percent`, capped at `d`.
pub fn cutoff(percent: u32, gt: usize, d: usize) -> usize {
    ((percent as usize * gt).div_ceil(100)).min(d)
}

pub fn hit_rate(ranking: &[usize], gt: &[usize], percent: u32) -> f64 {
    let k = cutoff(percent, gt.len(), ranking.len());
    let hits = ranking[..k].iter().filter(|s| gt.contains(s)).count();
    hits as f64 / gt.len() as f64
}

pub fn ndcg(ranking: &[usize], gt: &[usize], percent: u32) -> f64 {
    let k = cutoff(percent, gt.len(), ranking.len());
    let dcg: f64 = ranking[..k]
        .iter()
        .enumerate()
        .filter(|(_, s)| gt.contains(s))
        .map(|(r, _)| 1.0 / ((r + 2) as f64).log2())
        .sum();
    let ideal: f64 = (0..gt.len()).map(|r| 1.0 / ((r + 2) as f64).log2()).sum();
    dcg / ideal
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttributionReport {
    pub percents: Vec<u32>,
    /// Macro averages, aligned with `percents`.
    pub hitrate: Vec<f64>,
    pub ndcg: Vec<f64>,
    /// Per event: `(hitrate, ndcg)` at each percent; `None` for excluded events.
    pub per_event: Vec<Option<Vec<(f64, f64)>>>,
}

impl AttributionReport {
    pub fn to_key_values(&self, prefix: &str) -> String {
        let mut out = String::new();
        for (k, p) in self.percents.iter().enumerate() {
            let _ = writeln!(out, "{prefix}hitrate@{p}={}", self.hitrate[k]);
            let _ = writeln!(out, "{prefix}ndcg@{p}={}", self.ndcg[k]);
        }
        out
    }
}

/// HitRate and NDCG at each percentage, macro-averaged over events.
/// Events with an empty ground-truth set are excluded.
pub fn attribution_metrics(
    rankings: &[Vec<usize>],
    gt: &[Vec<usize>],
    percents: &[u32],
) -> Result<AttributionReport> {
    if rankings.len() != gt.len() {
        return Err(invalid(format!(
            "{} rankings but {} ground-truth sets",
            rankings.len(),
            gt.len()
        )));
    }
    let mut per_event = Vec::with_capacity(rankings.len());
    let mut sums = vec![(0.0, 0.0); percents.len()];
    let mut used = 0;
    for (e, (r, g)) in rankings.iter().zip(gt).enumerate() {
        if g.is_empty() {
            log::warn!("event {e} has no ground-truth causes and is excluded");
            per_event.push(None);
            continue;
        }
        let vals: Vec<(f64, f64)> = percents
            .iter()
            .map(|&p| (hit_rate(r, g, p), ndcg(r, g, p)))
            .collect();
        for (s, v) in sums.iter_mut().zip(&vals) {
            s.0 += v.0;
            s.1 += v.1;
        }
        used += 1;
        per_event.push(Some(vals));
    }
    let avg = |x: f64| if used == 0 { 0.0 } else { x / used as f64 };
    Ok(AttributionReport {
        percents: percents.to_vec(),
        hitrate: sums.iter().map(|s| avg(s.0)).collect(),
        ndcg: sums.iter().map(|s| avg(s.1)).collect(),
        per_event,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_and_empty_predictions() {
        let labels = [false, true, true, false];
        let r = detection_metrics(&labels, &labels, false).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (1.0, 1.0, 1.0));
        let r = detection_metrics(&[false; 4], &labels, false).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn adjusted_example() {
        let r = detection_metrics(&[false, true, false, false], &[false, true, true, false], true).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn auroc_cases() {
        assert_eq!(auroc(&[0.1, 0.2, 0.9, 0.8], &[false, false, true, true]).unwrap(), 1.0);
        assert_eq!(auroc(&[1.0; 4], &[false, true, false, true]).unwrap(), 0.5);
        assert!(auroc(&[1.0, 2.0], &[true, true]).is_err());
    }

    #[test]
    fn ranking_cases() {
        assert_eq!(hit_rate(&[3, 1, 0, 2], &[3, 1], 100), 1.0);
        assert_eq!(ndcg(&[3, 1, 0, 2], &[3, 1], 150), 1.0);
        assert_eq!(hit_rate(&[3, 0, 1, 2], &[3, 1], 100), 0.5);
        assert_eq!(cutoff(150, 2, 5), 3);
        assert_eq!(cutoff(150, 4, 5), 5);
    }
}
