//! Selection of the deployed blend weight from non-parent permutation
//! sensitivity and gate separation on an unlabeled calibration prefix.

use std::fmt;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::data::{LagSpec, SeriesFrame, TargetBatch};
use crate::error::{invalid, CgtError, Result};
use crate::graph::ParentMask;
use crate::model::{BlockParams, ModelConfig};
use crate::scoring::{aggregate, blend, score_batch, Aggregation, ScoreSeries, SCORE_CHUNK};
use crate::seed::{self, tag};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SafetyMode {
    Hard,
    Soft,
}

impl FromStr for SafetyMode {
    type Err = CgtError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hard" => Ok(Self::Hard),
            "soft" => Ok(Self::Soft),
            _ => Err(invalid(format!("unknown safety mode {s:?}"))),
        }
    }
}

impl fmt::Display for SafetyMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Hard => "hard",
            Self::Soft => "soft",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SafetyConfig {
    pub tau_rel: f64,
    pub tau_alpha: f64,
    pub epsilon: f64,
    pub mode: SafetyMode,
    /// Fraction of the scoring stream used for calibration.
    pub calib_frac: f64,
    /// Minimum calibration length in points.
    pub calib_min: usize,
}

impl Default for SafetyConfig {
    fn default() -> Self {
        Self {
            tau_rel: 0.08,
            tau_alpha: 0.01,
            epsilon: 1e-8,
            mode: SafetyMode::Soft,
            calib_frac: 0.2,
            calib_min: 500,
        }
    }
}

impl SafetyConfig {
    /// Number of leading stream points used for calibration.
    pub fn calibration_len(&self, stream_len: usize) -> usize {
        ((self.calib_frac * stream_len as f64).ceil() as usize)
            .max(self.calib_min)
            .min(stream_len)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SafetyDiagnostics {
    pub r: f64,
    pub m: f64,
    pub gamma_base: f64,
    pub gamma_used: f64,
    pub mode: SafetyMode,
    /// Per-target mean parent gate minus mean non-parent gate.
    pub separations: Vec<f64>,
    /// Targets whose separation is below `tau_alpha`.
    pub fallback: Vec<bool>,
    /// Scoring batches too small to permute.
    pub identity_batches: usize,
}

impl SafetyDiagnostics {
    pub fn fallback_fraction(&self) -> f64 {
        if self.fallback.is_empty() {
            0.0
        } else {
            self.fallback.iter().filter(|&&f| f).count() as f64 / self.fallback.len() as f64
        }
    }

    pub fn to_key_values(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "R={}", self.r);
        let _ = writeln!(out, "M={}", self.m);
        let _ = writeln!(out, "gamma_base={}", self.gamma_base);
        let _ = writeln!(out, "gamma_used={}", self.gamma_used);
        let _ = writeln!(out, "mode={}", self.mode);
        let _ = writeln!(out, "fallback_fraction={}", self.fallback_fraction());
        let _ = writeln!(out, "identity_batches={}", self.identity_batches);
        for (i, s) in self.separations.iter().enumerate() {
            let _ = writeln!(out, "separation.{i}={s}");
        }
        out
    }

    pub fn report(&self) -> String {
        format!(
            "sensitivity R = {:.4}, gate separation M = {:.4}, gamma {} -> {} ({} mode, {:.0}% of targets below separation threshold)",
            self.r,
            self.m,
            self.gamma_base,
            self.gamma_used,
            self.mode,
            100.0 * self.fallback_fraction()
        )
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_key_values())?;
        Ok(())
    }

    /// Reads the deployed blend weight back from a diagnostics file.
    pub fn load_gamma_used(path: impl AsRef<Path>) -> Result<f64> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| CgtError::MissingArtifact {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        text.lines()
            .find_map(|l| l.strip_prefix("gamma_used="))
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| CgtError::MissingArtifact {
                path: path.to_path_buf(),
                message: "no gamma_used entry".into(),
            })
    }
}

/// Permutes the sample order of every non-parent column with one shared
/// permutation. Returns the batch and whether it was too small to permute.
pub fn permute_non_parents(batch: &TargetBatch, mask: &ParentMask, seed: u64) -> (TargetBatch, bool) {
    let b = batch.len();
    if b < 2 {
        return (batch.clone(), true);
    }
    let mut perm: Vec<usize> = (0..b).collect();
    perm.shuffle(&mut seed::stream(seed, &[tag::PERMUTE]));
    let mut out = batch.clone();
    for (c, &parent) in mask.bits.iter().enumerate() {
        if parent {
            continue;
        }
        for (dst, &src) in perm.iter().enumerate() {
            let column = batch.inputs.index_axis(Axis(0), src).column(c).to_owned();
            out.inputs
                .index_axis_mut(Axis(0), dst)
                .column_mut(c)
                .assign(&column);
        }
    }
    (out, false)
}

/// Mean parent gate minus mean non-parent gate; empty sets count as 0.
pub fn gate_separation(params: &BlockParams, mask: &ParentMask) -> f64 {
    let alpha = params.gates();
    let mean = |want: bool| {
        let vals: Vec<f64> = alpha
            .iter()
            .zip(&mask.bits)
            .filter(|(_, &b)| b == want)
            .map(|(&a, _)| a)
            .collect();
        if vals.is_empty() {
            0.0
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    };
    mean(true) - mean(false)
}

/// Relative mean absolute change between two score sequences.
pub fn sensitivity_ratio(mix: &[f64], perm: &[f64], epsilon: f64) -> f64 {
    let n = mix.len().max(1) as f64;
    let diff: f64 = mix.iter().zip(perm).map(|(a, b)| (a - b).abs()).sum::<f64>() / n;
    let scale: f64 = mix.iter().map(|a| a.abs()).sum::<f64>() / n;
    diff / (scale + epsilon)
}

/// Deployed blend weight for the measured `r` and `m`.
pub fn select_gamma(r: f64, m: f64, gamma_base: f64, cfg: &SafetyConfig) -> f64 {
    if r > cfg.tau_rel || m < cfg.tau_alpha {
        match cfg.mode {
            SafetyMode::Hard => 0.0,
            SafetyMode::Soft => {
                gamma_base * ((m - cfg.tau_alpha) / (1.0 - cfg.tau_alpha)).clamp(0.0, 1.0)
            }
        }
    } else {
        gamma_base
    }
}

/// Original and non-parent-permuted scores over a calibration frame.
pub fn stress_scores(
    cfg: &ModelConfig,
    blocks: &[BlockParams],
    masks: &[ParentMask],
    calib: &SeriesFrame,
    seed: u64,
) -> Result<(ScoreSeries, ScoreSeries, usize)> {
    let spec = LagSpec::new(cfg.window, cfg.max_lag)?;
    let times: Vec<usize> = spec.valid_times(calib.len()).collect();
    if times.is_empty() {
        return Err(CgtError::EmptyStream {
            len: calib.len(),
            needed: spec.first_valid() + 1,
        });
    }
    if blocks.len() != masks.len() || blocks.len() != calib.channels() {
        return Err(CgtError::Shape(format!(
            "{} blocks and {} masks for a {}-channel calibration frame",
            blocks.len(),
            masks.len(),
            calib.channels()
        )));
    }
    type Columns = (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, usize);
    let per_target: Vec<Columns> = blocks
        .par_iter()
        .zip(masks.par_iter())
        .map(|(p, m)| -> Result<Columns> {
            let mut out: Columns = Default::default();
            for (k, chunk) in times.chunks(SCORE_CHUNK).enumerate() {
                let batch = TargetBatch::from_times(calib, m.target, chunk, spec)?;
                let (c, o) = score_batch(cfg, p, m, &batch, seed)?;
                let (permuted, flagged) =
                    permute_non_parents(&batch, m, seed::derive_seed(seed, &[tag::PERMUTE, k as u64]));
                let (pc, po) = score_batch(cfg, p, m, &permuted, seed)?;
                out.0.extend(c);
                out.1.extend(o);
                out.2.extend(pc);
                out.3.extend(po);
                out.4 += flagged as usize;
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let n = times.len();
    let d = blocks.len();
    let mut series = [
        Array2::zeros((n, d)),
        Array2::zeros((n, d)),
        Array2::zeros((n, d)),
        Array2::zeros((n, d)),
    ];
    let mut identity = 0;
    for (i, cols) in per_target.into_iter().enumerate() {
        for (arr, col) in series.iter_mut().zip([cols.0, cols.1, cols.2, cols.3]) {
            arr.column_mut(i).assign(&ndarray::Array1::from(col));
        }
        identity = identity.max(cols.4);
    }
    let [c, o, pc, po] = series;
    Ok((
        ScoreSeries {
            timestamps: times.clone(),
            causal: c,
            aux: o,
        },
        ScoreSeries {
            timestamps: times,
            causal: pc,
            aux: po,
        },
        identity,
    ))
}

/// Runs the permutation stress test and selects the deployed blend weight.
#[allow(clippy::too_many_arguments)]
pub fn compute_safety(
    cfg: &ModelConfig,
    blocks: &[BlockParams],
    masks: &[ParentMask],
    calib: &SeriesFrame,
    gamma_base: f64,
    rule: Aggregation,
    safety: &SafetyConfig,
    seed: u64,
) -> Result<SafetyDiagnostics> {
    if calib.is_empty() {
        return Err(CgtError::EmptyStream { len: 0, needed: 1 });
    }
    let (orig, permuted, identity_batches) = stress_scores(cfg, blocks, masks, calib, seed)?;
    let mix = aggregate(&blend(&orig, gamma_base)?, rule)?;
    let perm = aggregate(&blend(&permuted, gamma_base)?, rule)?;
    let r = sensitivity_ratio(mix.as_slice().unwrap(), perm.as_slice().unwrap(), safety.epsilon);
    let separations: Vec<f64> = blocks
        .iter()
        .zip(masks)
        .map(|(p, m)| gate_separation(p, m))
        .collect();
    let m = separations.iter().sum::<f64>() / separations.len().max(1) as f64;
    let gamma_used = select_gamma(r, m, gamma_base, safety);
    if identity_batches > 0 {
        log::warn!("{identity_batches} calibration batch(es) had a single sample and were not permuted");
    }
    Ok(SafetyDiagnostics {
        r,
        m,
        gamma_base,
        gamma_used,
        mode: safety.mode,
        fallback: separations.iter().map(|&s| s < safety.tau_alpha).collect(),
        separations,
        identity_batches,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array1, Array3};

    fn batch(b: usize) -> TargetBatch {
        TargetBatch {
            target: 0,
            inputs: Array3::from_shape_fn((b, 2, 3), |(i, r, c)| (100 * i + 10 * r + c) as f64),
            targets: Array1::zeros(b),
            timestamps: (0..b).collect(),
        }
    }

    #[test]
    fn all_parent_mask_leaves_batch() {
        let m = ParentMask { target: 0, bits: vec![true; 3] };
        let (out, flagged) = permute_non_parents(&batch(6), &m, 1);
        assert_eq!(out, batch(6));
        assert!(!flagged);
    }

    #[test]
    fn single_sample_is_flagged() {
        let m = ParentMask { target: 0, bits: vec![false; 3] };
        let (out, flagged) = permute_non_parents(&batch(1), &m, 1);
        assert_eq!(out, batch(1));
        assert!(flagged);
    }

    #[test]
    fn permutation_preserves_column_multisets_and_parents() {
        let m = ParentMask { target: 0, bits: vec![true, false, false] };
        let b = batch(8);
        let (out, _) = permute_non_parents(&b, &m, 3);
        assert_ne!(out, b);
        for c in 0..3 {
            let mut before: Vec<f64> = b.inputs.slice(ndarray::s![.., .., c]).iter().copied().collect();
            let mut after: Vec<f64> = out.inputs.slice(ndarray::s![.., .., c]).iter().copied().collect();
            if c == 0 {
                assert_eq!(before, after);
            }
            before.sort_by(f64::total_cmp);
            after.sort_by(f64::total_cmp);
            assert_eq!(before, after);
        }
    }

    #[test]
    fn soft_scaling_endpoints() {
        let cfg = SafetyConfig::default();
        assert_eq!(select_gamma(0.5, cfg.tau_alpha, 0.0206, &cfg), 0.0);
        assert_eq!(select_gamma(0.5, 1.0, 0.0206, &cfg), 0.0206);
        assert_eq!(select_gamma(0.0, 0.5, 0.0206, &cfg), 0.0206);
        let hard = SafetyConfig { mode: SafetyMode::Hard, ..cfg };
        assert_eq!(select_gamma(0.5, 0.9, 0.0206, &hard), 0.0);
    }

    #[test]
    fn ratio_is_scale_invariant() {
        let a = [1.0, 2.0, 3.5];
        let b = [1.5, 1.0, 3.0];
        let r = sensitivity_ratio(&a, &b, 0.0);
        let a2: Vec<f64> = a.iter().map(|x| x * 7.0).collect();
        let b2: Vec<f64> = b.iter().map(|x| x * 7.0).collect();
        assert!((r - sensitivity_ratio(&a2, &b2, 0.0)).abs() < 1e-15);
    }

    #[test]
    fn calibration_length_rule() {
        let cfg = SafetyConfig::default();
        assert_eq!(cfg.calibration_len(10_000), 2000);
        assert_eq!(cfg.calibration_len(1200), 500);
        assert_eq!(cfg.calibration_len(300), 300);
    }
}
