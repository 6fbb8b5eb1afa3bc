//! Per-target negative log-likelihood scores, blending and aggregation.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2, Array3, Axis};
use rayon::prelude::*;

use crate::data::{LagSpec, SeriesFrame, TargetBatch};
use crate::error::{invalid, CgtError, Result};
use crate::graph::ParentMask;
use crate::model::{forward_infer, BlockParams, ModelConfig};
use crate::seed::{self, tag};
use crate::train::{gaussian_nll, normal_noise};

/// Timestamps scored per forward call.
pub const SCORE_CHUNK: usize = 512;

/// Causal and auxiliary scores, one column per target.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSeries {
    pub timestamps: Vec<usize>,
    /// `T' x D`.
    pub causal: Array2<f64>,
    /// `T' x D`.
    pub aux: Array2<f64>,
}

impl ScoreSeries {
    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn targets(&self) -> usize {
        self.causal.ncols()
    }

    /// Rows whose timestamps fall in `[start, end)`.
    pub fn slice_times(&self, start: usize, end: usize) -> ScoreSeries {
        let rows: Vec<usize> = self
            .timestamps
            .iter()
            .enumerate()
            .filter(|(_, &t)| t >= start && t < end)
            .map(|(r, _)| r)
            .collect();
        ScoreSeries {
            timestamps: rows.iter().map(|&r| self.timestamps[r]).collect(),
            causal: self.causal.select(Axis(0), &rows),
            aux: self.aux.select(Axis(0), &rows),
        }
    }
}

/// Per-sample causal and auxiliary NLL, averaged over the prior draws.
///
/// The latent noise of each sample depends only on `(seed, target, t)`, so
/// any subset of timestamps reproduces the scores of a full pass.
pub fn score_batch(
    cfg: &ModelConfig,
    params: &BlockParams,
    mask: &ParentMask,
    batch: &TargetBatch,
    seed: u64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let b = batch.len();
    let s = cfg.mc_samples;
    let mut noise = Array3::zeros((b, s, cfg.d_latent));
    for (k, &t) in batch.timestamps.iter().enumerate() {
        let mut rng = seed::stream(seed, &[tag::SCORE_NOISE, batch.target as u64, t as u64]);
        noise
            .index_axis_mut(Axis(0), k)
            .assign(&normal_noise(&mut rng, s, cfg.d_latent));
    }
    let preds = forward_infer(cfg, params, &batch.inputs, mask, &noise)?;
    let mut causal = Vec::with_capacity(b);
    let mut aux = Vec::with_capacity(b);
    for (row, &y) in preds.iter().zip(batch.targets.iter()) {
        let (mut c, mut o) = (0.0, 0.0);
        for pair in row {
            c += gaussian_nll(y, pair.causal.mean, pair.causal.log_var);
            o += gaussian_nll(y, pair.aux.mean, pair.aux.log_var);
        }
        causal.push(c / s as f64);
        aux.push(o / s as f64);
    }
    Ok((causal, aux))
}

/// Scores of one target at the given timestamps.
pub fn score_target(
    cfg: &ModelConfig,
    params: &BlockParams,
    mask: &ParentMask,
    frame: &SeriesFrame,
    times: &[usize],
    seed: u64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let spec = LagSpec::new(cfg.window, cfg.max_lag)?;
    let mut causal = Vec::with_capacity(times.len());
    let mut aux = Vec::with_capacity(times.len());
    for chunk in times.chunks(SCORE_CHUNK) {
        let batch = TargetBatch::from_times(frame, mask.target, chunk, spec)?;
        let (c, o) = score_batch(cfg, params, mask, &batch, seed)?;
        causal.extend(c);
        aux.extend(o);
    }
    Ok((causal, aux))
}

fn check_models(cfg: &ModelConfig, blocks: &[BlockParams], masks: &[ParentMask], frame: &SeriesFrame) -> Result<()> {
    if blocks.len() != masks.len() || blocks.len() != frame.channels() || cfg.channels != frame.channels() {
        return Err(CgtError::Shape(format!(
            "{} blocks and {} masks for a {}-channel frame (model expects {})",
            blocks.len(),
            masks.len(),
            frame.channels(),
            cfg.channels
        )));
    }
    Ok(())
}

/// Scores every valid timestamp of `frame` for every target.
pub fn score_stream(
    cfg: &ModelConfig,
    blocks: &[BlockParams],
    masks: &[ParentMask],
    frame: &SeriesFrame,
    seed: u64,
) -> Result<ScoreSeries> {
    check_models(cfg, blocks, masks, frame)?;
    let spec = LagSpec::new(cfg.window, cfg.max_lag)?;
    let times: Vec<usize> = spec.valid_times(frame.len()).collect();
    if times.is_empty() {
        return Err(CgtError::EmptyStream {
            len: frame.len(),
            needed: spec.first_valid() + 1,
        });
    }
    let columns: Vec<(Vec<f64>, Vec<f64>)> = blocks
        .par_iter()
        .zip(masks.par_iter())
        .map(|(p, m)| score_target(cfg, p, m, frame, &times, seed))
        .collect::<Result<_>>()?;
    let d = blocks.len();
    let mut causal = Array2::zeros((times.len(), d));
    let mut aux = Array2::zeros((times.len(), d));
    for (i, (c, o)) in columns.into_iter().enumerate() {
        causal.column_mut(i).assign(&Array1::from(c));
        aux.column_mut(i).assign(&Array1::from(o));
    }
    Ok(ScoreSeries {
        timestamps: times,
        causal,
        aux,
    })
}

/// Convex combination `(1 - gamma) * causal + gamma * aux`.
pub fn blend(series: &ScoreSeries, gamma: f64) -> Result<Array2<f64>> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(invalid(format!("blend weight {gamma} outside [0, 1]")));
    }
    Ok(&series.causal * (1.0 - gamma) + &series.aux * gamma)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregation {
    Mean,
    Max,
    TopK(usize),
}

impl FromStr for Aggregation {
    type Err = CgtError;
    /// `mean`, `max` or `topk:<k>`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Self::Mean),
            "max" => Ok(Self::Max),
            _ => s
                .strip_prefix("topk:")
                .and_then(|k| k.parse().ok())
                .map(Self::TopK)
                .ok_or_else(|| invalid(format!("unknown aggregation {s:?}"))),
        }
    }
}

impl std::fmt::Display for Aggregation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Mean => f.write_str("mean"),
            Self::Max => f.write_str("max"),
            Self::TopK(k) => write!(f, "topk:{k}"),
        }
    }
}

/// Row-wise reduction of blended per-target scores.
pub fn aggregate(blended: &Array2<f64>, rule: Aggregation) -> Result<Array1<f64>> {
    let d = blended.ncols();
    if let Aggregation::TopK(k) = rule {
        if k == 0 || k > d {
            return Err(invalid(format!("top-k aggregation needs 1 <= k <= {d}, got {k}")));
        }
    }
    Ok(blended
        .rows()
        .into_iter()
        .map(|row| match rule {
            Aggregation::Mean => row.sum() / d as f64,
            Aggregation::Max => row.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            Aggregation::TopK(k) => {
                let mut v = row.to_vec();
                v.sort_by(|a, b| b.total_cmp(a));
                v[..k].iter().sum::<f64>() / k as f64
            }
        })
        .collect())
}

/// Blends and aggregates in one step.
pub fn anomaly_scores(series: &ScoreSeries, gamma: f64, rule: Aggregation) -> Result<Array1<f64>> {
    aggregate(&blend(series, gamma)?, rule)
}

/// CSV `t,S_t,s_c_0..,s_o_0..`; floats use shortest round-trip formatting.
pub fn scores_csv(series: &ScoreSeries, aggregated: &Array1<f64>) -> String {
    let d = series.targets();
    let mut out = String::from("t,S_t");
    for i in 0..d {
        let _ = write!(out, ",s_c_{i}");
    }
    for i in 0..d {
        let _ = write!(out, ",s_o_{i}");
    }
    out.push('\n');
    for (r, &t) in series.timestamps.iter().enumerate() {
        let _ = write!(out, "{t},{}", aggregated[r]);
        for v in series.causal.row(r) {
            let _ = write!(out, ",{v}");
        }
        for v in series.aux.row(r) {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

pub fn write_scores(path: impl AsRef<Path>, series: &ScoreSeries, aggregated: &Array1<f64>) -> Result<()> {
    fs::write(path, scores_csv(series, aggregated))?;
    Ok(())
}

/// Reads a score file back into the per-target series and the aggregate.
pub fn read_scores(path: impl AsRef<Path>) -> Result<(ScoreSeries, Array1<f64>)> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| CgtError::MissingArtifact {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| CgtError::EmptyInput {
        path: path.to_path_buf(),
        message: "score file is empty".into(),
    })?;
    let cols = header.split(',').count();
    if cols < 4 || (cols - 2) % 2 != 0 {
        return Err(CgtError::Ingest {
            path: path.to_path_buf(),
            row: 1,
            column: 0,
            message: format!("unexpected score header {header:?}"),
        });
    }
    let d = (cols - 2) / 2;
    let mut times = Vec::new();
    let mut agg = Vec::new();
    let mut causal = Vec::new();
    let mut aux = Vec::new();
    for (r, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        let bad = |column: usize, message: String| CgtError::Ingest {
            path: path.to_path_buf(),
            row: r + 2,
            column,
            message,
        };
        if fields.len() != cols {
            return Err(bad(0, format!("expected {cols} fields, found {}", fields.len())));
        }
        times.push(fields[0].parse().map_err(|_| bad(1, format!("bad timestamp {:?}", fields[0])))?);
        let mut nums = Vec::with_capacity(cols - 1);
        for (c, f) in fields.iter().enumerate().skip(1) {
            nums.push(f.parse::<f64>().map_err(|_| bad(c + 1, format!("bad number {f:?}")))?);
        }
        agg.push(nums[0]);
        causal.extend_from_slice(&nums[1..1 + d]);
        aux.extend_from_slice(&nums[1 + d..]);
    }
    let n = times.len();
    let shape = |v: Vec<f64>| Array2::from_shape_vec((n, d), v).expect("row-major fill");
    Ok((
        ScoreSeries {
            timestamps: times,
            causal: shape(causal),
            aux: shape(aux),
        },
        Array1::from(agg),
    ))
}
