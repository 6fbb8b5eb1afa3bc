//! Root-cause ranking by standardised per-target scores and by
//! counterfactual clamping of one sensor's inputs.
//!
//! Both rankings are model-based: they describe how the trained forecasters
//! respond, not the effect of a physical intervention on the system.

use std::fmt;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2};
use rayon::prelude::*;

use crate::data::{LagSpec, ScalerParams, SeriesFrame, TargetBatch};
use crate::error::{invalid, CgtError, Result};
use crate::graph::ParentMask;
use crate::model::{BlockParams, ModelConfig};
use crate::scoring::{aggregate, blend, score_batch, Aggregation, ScoreSeries, SCORE_CHUNK};
use crate::threshold::Segment;

pub const ZSCORE_EPSILON: f64 = 1e-8;
pub const DEFAULT_GATE_THRESHOLD: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttributionMethod {
    ZScore,
    Clamp,
}

impl FromStr for AttributionMethod {
    type Err = CgtError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zscore" => Ok(Self::ZScore),
            "clamp" => Ok(Self::Clamp),
            _ => Err(invalid(format!("unknown attribution method {s:?}"))),
        }
    }
}

impl fmt::Display for AttributionMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::ZScore => "zscore",
            Self::Clamp => "clamp",
        })
    }
}

/// Per-target mean and standard deviation of blended baseline scores.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub fn baseline_stats(baseline: &ScoreSeries, gamma: f64) -> Result<BaselineStats> {
    if baseline.len() < 2 {
        return Err(invalid(format!(
            "baseline needs at least 2 points, has {}",
            baseline.len()
        )));
    }
    if baseline.len() < 30 {
        log::warn!("z-score baseline has only {} points", baseline.len());
    }
    let a = blend(baseline, gamma)?;
    let n = a.nrows() as f64;
    let mean: Vec<f64> = a.columns().into_iter().map(|c| c.sum() / n).collect();
    let std = a
        .columns()
        .into_iter()
        .zip(&mean)
        .map(|(c, m)| (c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
        .collect();
    Ok(BaselineStats { mean, std })
}

/// Row index of each timestamp in `series`.
fn rows_of(series: &ScoreSeries, times: &[usize]) -> Result<Vec<usize>> {
    times
        .iter()
        .map(|t| {
            series
                .timestamps
                .binary_search(t)
                .map_err(|_| invalid(format!("timestamp {t} has no score")))
        })
        .collect()
}

/// Standardised blended scores `Z[t, i]` at the given timestamps.
pub fn zscores(
    series: &ScoreSeries,
    gamma: f64,
    baseline: &BaselineStats,
    times: &[usize],
) -> Result<Array2<f64>> {
    let rows = rows_of(series, times)?;
    let d = series.targets();
    if baseline.mean.len() != d {
        return Err(CgtError::Shape(format!(
            "baseline has {} targets, scores have {d}",
            baseline.mean.len()
        )));
    }
    let blended = blend(series, gamma)?;
    Ok(Array2::from_shape_fn((rows.len(), d), |(k, i)| {
        (blended[[rows[k], i]] - baseline.mean[i]) / (baseline.std[i] + ZSCORE_EPSILON)
    }))
}

/// Sensor medians of the raw training split, mapped through the scaler.
pub fn training_medians(train_raw: &SeriesFrame, scaler: &ScalerParams) -> Vec<f64> {
    train_raw
        .values
        .columns()
        .into_iter()
        .enumerate()
        .map(|(j, col)| {
            let mut v = col.to_vec();
            v.sort_by(f64::total_cmp);
            let n = v.len();
            let median = if n % 2 == 1 {
                v[n / 2]
            } else {
                0.5 * (v[n / 2 - 1] + v[n / 2])
            };
            scaler.scale_value(j, median)
        })
        .collect()
}

/// Everything needed to recompute scores with one sensor clamped.
#[derive(Debug, Clone, Copy)]
pub struct ClampContext<'a> {
    pub cfg: &'a ModelConfig,
    pub blocks: &'a [BlockParams],
    pub masks: &'a [ParentMask],
    /// Scaled frame the original scores were computed on.
    pub frame: &'a SeriesFrame,
    pub original: &'a ScoreSeries,
    /// Scaled clamp values per sensor.
    pub medians: &'a [f64],
    pub gamma: f64,
    pub rule: Aggregation,
    pub seed: u64,
    pub gate_threshold: f64,
}

impl ClampContext<'_> {
    /// Blocks whose inputs can see sensor `s`: through the parent mask or a
    /// gate above the threshold.
    pub fn affected_blocks(&self, s: usize) -> Vec<usize> {
        let tau = self.cfg.max_lag;
        let cols = s * tau..(s + 1) * tau;
        (0..self.blocks.len())
            .filter(|&i| {
                let gates = self.blocks[i].gates();
                cols.clone()
                    .any(|c| self.masks[i].bits[c] || gates[c] > self.gate_threshold)
            })
            .collect()
    }

    /// `S_clamp - S_orig` at `times` with sensor `s` clamped to its median.
    pub fn deltas(&self, s: usize, times: &[usize]) -> Result<Vec<f64>> {
        let d = self.blocks.len();
        if s >= d {
            return Err(invalid(format!("sensor {s} out of range for {d} sensors")));
        }
        let rows = rows_of(self.original, times)?;
        let orig = ScoreSeries {
            timestamps: times.to_vec(),
            causal: self.original.causal.select(ndarray::Axis(0), &rows),
            aux: self.original.aux.select(ndarray::Axis(0), &rows),
        };
        let s_orig = aggregate(&blend(&orig, self.gamma)?, self.rule)?;
        let mut causal = orig.causal.clone();
        let mut aux = orig.aux.clone();
        let spec = LagSpec::new(self.cfg.window, self.cfg.max_lag)?;
        let cols: Vec<usize> = (1..=spec.max_lag).map(|l| spec.column(s, l)).collect();
        for i in self.affected_blocks(s) {
            let mut offset = 0;
            for chunk in times.chunks(SCORE_CHUNK) {
                let mut batch = TargetBatch::from_times(self.frame, i, chunk, spec)?;
                for &c in &cols {
                    batch
                        .inputs
                        .slice_mut(ndarray::s![.., .., c])
                        .fill(self.medians[s]);
                }
                let (c, o) = score_batch(self.cfg, &self.blocks[i], &self.masks[i], &batch, self.seed)?;
                for k in 0..chunk.len() {
                    causal[[offset + k, i]] = c[k];
                    aux[[offset + k, i]] = o[k];
                }
                offset += chunk.len();
            }
        }
        let clamped = ScoreSeries {
            timestamps: times.to_vec(),
            causal,
            aux,
        };
        let s_clamp = aggregate(&blend(&clamped, self.gamma)?, self.rule)?;
        Ok((&s_clamp - &s_orig).to_vec())
    }
}

/// Clamp deltas of every sensor at `times`, as a `times x D` matrix.
pub fn counterfactual_clamp(ctx: &ClampContext<'_>, times: &[usize]) -> Result<Array2<f64>> {
    let d = ctx.blocks.len();
    let columns: Vec<Vec<f64>> = (0..d)
        .into_par_iter()
        .map(|s| ctx.deltas(s, times))
        .collect::<Result<_>>()?;
    let mut out = Array2::zeros((times.len(), d));
    for (s, col) in columns.into_iter().enumerate() {
        out.column_mut(s).assign(&Array1::from(col));
    }
    Ok(out)
}

/// Ranked sensors for one anomalous event.
#[derive(Debug, Clone, PartialEq)]
pub struct EventRanking {
    pub event: usize,
    /// Timestamps `[start, end)`.
    pub segment: Segment,
    pub method: AttributionMethod,
    /// `(sensor, event score)` from most to least likely cause.
    pub ranking: Vec<(usize, f64)>,
}

impl EventRanking {
    pub fn sensors(&self) -> Vec<usize> {
        self.ranking.iter().map(|&(s, _)| s).collect()
    }
}

/// Orders sensors by score (descending for z-scores, ascending for clamp
/// deltas), breaking ties by sensor index.
pub fn rank_scores(scores: &[f64], method: AttributionMethod) -> Vec<(usize, f64)> {
    let mut r: Vec<(usize, f64)> = scores.iter().copied().enumerate().collect();
    r.sort_by(|a, b| {
        let ord = match method {
            AttributionMethod::ZScore => b.1.total_cmp(&a.1),
            AttributionMethod::Clamp => a.1.total_cmp(&b.1),
        };
        ord.then(a.0.cmp(&b.0))
    });
    r
}

fn event_times(series: &ScoreSeries, seg: &Segment) -> Vec<usize> {
    series
        .timestamps
        .iter()
        .copied()
        .filter(|&t| t >= seg.start && t < seg.end)
        .collect()
}

fn rank_events<F>(
    series: &ScoreSeries,
    events: &[Segment],
    method: AttributionMethod,
    mut per_time: F,
) -> Result<Vec<EventRanking>>
where
    F: FnMut(&[usize]) -> Result<Array2<f64>>,
{
    if events.is_empty() {
        return Err(invalid("no anomalous events to attribute"));
    }
    let mut out = Vec::with_capacity(events.len());
    for (k, seg) in events.iter().enumerate() {
        let times = event_times(series, seg);
        if times.is_empty() {
            return Err(invalid(format!(
                "event {k} [{}, {}) has no scored timestamps",
                seg.start, seg.end
            )));
        }
        let m = per_time(&times)?;
        let means: Vec<f64> = m
            .columns()
            .into_iter()
            .map(|c| c.sum() / times.len() as f64)
            .collect();
        out.push(EventRanking {
            event: k,
            segment: *seg,
            method,
            ranking: rank_scores(&means, method),
        });
    }
    Ok(out)
}

pub fn rank_root_causes_zscore(
    series: &ScoreSeries,
    gamma: f64,
    baseline: &BaselineStats,
    events: &[Segment],
) -> Result<Vec<EventRanking>> {
    rank_events(series, events, AttributionMethod::ZScore, |times| {
        zscores(series, gamma, baseline, times)
    })
}

pub fn rank_root_causes_clamp(ctx: &ClampContext<'_>, events: &[Segment]) -> Result<Vec<EventRanking>> {
    rank_events(ctx.original, events, AttributionMethod::Clamp, |times| {
        counterfactual_clamp(ctx, times)
    })
}

pub fn report_csv(rankings: &[EventRanking]) -> String {
    let mut out = String::from("event_id,start,end,rank,sensor,score,method\n");
    for r in rankings {
        for (rank, &(sensor, score)) in r.ranking.iter().enumerate() {
            let _ = writeln!(
                out,
                "{},{},{},{},{sensor},{score},{}",
                r.event,
                r.segment.start,
                r.segment.end - 1,
                rank + 1,
                r.method
            );
        }
    }
    out
}

pub fn write_report(path: impl AsRef<Path>, rankings: &[EventRanking]) -> Result<()> {
    fs::write(path, report_csv(rankings))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn zscore_hand_example() {
        let series = ScoreSeries {
            timestamps: vec![10],
            causal: array![[3.0, 2.0]],
            aux: array![[0.0, 0.0]],
        };
        let base = BaselineStats { mean: vec![1.0, 1.0], std: vec![1.0, 1.0] };
        let z = zscores(&series, 0.0, &base, &[10]).unwrap();
        assert!((z[[0, 0]] - 2.0).abs() < 1e-7 && (z[[0, 1]] - 1.0).abs() < 1e-7);
        let r = rank_scores(z.row(0).as_slice().unwrap(), AttributionMethod::ZScore);
        assert_eq!(r.iter().map(|p| p.0).collect::<Vec<_>>(), vec![0, 1]);
    }

    #[test]
    fn ties_break_by_index() {
        let r = rank_scores(&[0.5, 0.5, 0.1], AttributionMethod::Clamp);
        assert_eq!(r.iter().map(|p| p.0).collect::<Vec<_>>(), vec![2, 0, 1]);
        let r = rank_scores(&[0.5, 0.5, 0.1], AttributionMethod::ZScore);
        assert_eq!(r.iter().map(|p| p.0).collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    #[test]
    fn baseline_needs_two_points() {
        let one = ScoreSeries {
            timestamps: vec![0],
            causal: array![[1.0]],
            aux: array![[1.0]],
        };
        assert!(baseline_stats(&one, 0.0).is_err());
    }

    #[test]
    fn medians_are_scaled() {
        let f = SeriesFrame::new(array![[0.0, 5.0], [10.0, 5.0], [4.0, 5.0]]).unwrap();
        let sc = crate::data::fit_minmax(&f);
        let m = training_medians(&f, &sc);
        assert!((m[0] - 0.4).abs() < 1e-8);
        assert_eq!(m[1], 0.0);
    }
}
