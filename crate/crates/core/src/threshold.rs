//! Streaming peaks-over-threshold with a Generalised Pareto tail, and
//! segment-level decision adjustment.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{invalid, CgtError, Result};

pub const XI_MIN: f64 = -0.5;
pub const XI_MAX: f64 = 1.0;
const XI_GRID: usize = 64;
const XI_REFINE_STEPS: usize = 20;
const XI_ZERO: f64 = 1e-6;
const MIN_PEAKS_FOR_GPD: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GpdFit {
    pub sigma: f64,
    pub xi: f64,
    pub log_lik: f64,
}

/// GPD log-likelihood of exceedances `y`; `-inf` outside the support.
pub fn gpd_log_likelihood(y: &[f64], sigma: f64, xi: f64) -> f64 {
    if !(sigma > 0.0) {
        return f64::NEG_INFINITY;
    }
    let n = y.len() as f64;
    if xi.abs() < XI_ZERO {
        return -n * sigma.ln() - y.iter().sum::<f64>() / sigma;
    }
    let mut acc = 0.0;
    for &v in y {
        let w = 1.0 + xi * v / sigma;
        if w <= 0.0 {
            return f64::NEG_INFINITY;
        }
        acc += w.ln();
    }
    -n * sigma.ln() - (1.0 + 1.0 / xi) * acc
}

/// Maximiser of the likelihood in `sigma` for a fixed `xi`.
fn profile_sigma(y: &[f64], xi: f64) -> f64 {
    let n = y.len() as f64;
    let y_max = y.iter().copied().fold(0.0, f64::max);
    let mean = y.iter().sum::<f64>() / n;
    if xi.abs() < XI_ZERO {
        return mean;
    }
    // (1 + xi) * sum(y / (sigma + xi y)) = n has a unique root above the
    // support bound and the left side decreases in sigma.
    let g = |sigma: f64| (1.0 + xi) * y.iter().map(|&v| v / (sigma + xi * v)).sum::<f64>() - n;
    let floor = if xi < 0.0 { -xi * y_max } else { 0.0 };
    let mut lo = if floor > 0.0 { floor * (1.0 + 1e-12) } else { mean * 1e-12 };
    let mut hi = mean.max(y_max).max(lo * 2.0);
    while g(hi) > 0.0 {
        lo = hi;
        hi *= 2.0;
    }
    let (mut a, mut b) = (lo.ln(), hi.ln());
    for _ in 0..200 {
        let mid = 0.5 * (a + b);
        if g(mid.exp()) > 0.0 {
            a = mid;
        } else {
            b = mid;
        }
        if b - a < 1e-14 {
            break;
        }
    }
    (0.5 * (a + b)).exp()
}

fn profile(y: &[f64], xi: f64) -> GpdFit {
    let sigma = profile_sigma(y, xi);
    GpdFit {
        sigma,
        xi,
        log_lik: gpd_log_likelihood(y, sigma, xi),
    }
}

/// Maximum-likelihood GPD fit by profile likelihood over `xi`.
///
/// Fewer than ten peaks fall back to the exponential tail (`xi = 0`).
pub fn fit_gpd(peaks: &[f64]) -> Result<GpdFit> {
    if peaks.iter().any(|&y| !(y > 0.0) || !y.is_finite()) {
        return Err(CgtError::DegenerateFit("peaks must be positive and finite".into()));
    }
    let first = peaks.first().copied();
    if first.is_none() || peaks.iter().all(|&y| Some(y) == first) {
        return Err(CgtError::DegenerateFit(format!(
            "{} peak(s) with fewer than two distinct values",
            peaks.len()
        )));
    }
    if peaks.len() < MIN_PEAKS_FOR_GPD {
        return Ok(profile(peaks, 0.0));
    }
    let step = (XI_MAX - XI_MIN) / (XI_GRID - 1) as f64;
    let grid: Vec<GpdFit> = (0..XI_GRID)
        .map(|k| profile(peaks, XI_MIN + step * k as f64))
        .collect();
    let (k_best, _) = grid
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.log_lik.total_cmp(&b.1.log_lik))
        .expect("non-empty grid");
    let mut best = grid[k_best];

    // Golden-section refinement inside the neighbouring grid cells.
    let mut a = (best.xi - step).max(XI_MIN);
    let mut b = (best.xi + step).min(XI_MAX);
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - ratio * (b - a);
    let mut d = a + ratio * (b - a);
    let mut fc = profile(peaks, c);
    let mut fd = profile(peaks, d);
    for _ in 0..XI_REFINE_STEPS {
        if fc.log_lik > fd.log_lik {
            b = d;
            d = c;
            fd = fc;
            c = b - ratio * (b - a);
            fc = profile(peaks, c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + ratio * (b - a);
            fd = profile(peaks, d);
        }
    }
    for cand in [fc, fd, profile(peaks, 0.0)] {
        if cand.log_lik > best.log_lik {
            best = cand;
        }
    }
    Ok(best)
}

/// Tail quantile with exceedance probability `q` over `n` observations.
pub fn tail_quantile(u: f64, fit: &GpdFit, q: f64, n: usize, n_peaks: usize) -> f64 {
    let r = q * n as f64 / n_peaks as f64;
    if fit.xi.abs() < XI_ZERO {
        u - fit.sigma * r.ln()
    } else {
        u + fit.sigma / fit.xi * (r.powf(-fit.xi) - 1.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpotConfig {
    pub q: f64,
    pub level: f64,
    pub lambda_thr: f64,
    pub burn_frac: f64,
    pub burn_min: usize,
}

impl Default for SpotConfig {
    fn default() -> Self {
        Self {
            q: 1.53e-3,
            level: 0.98,
            lambda_thr: 1.0,
            burn_frac: 0.1,
            burn_min: 500,
        }
    }
}

impl SpotConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.q > 0.0 && self.q < 1.0) {
            return Err(CgtError::Config(format!("spot.q = {} outside (0, 1)", self.q)));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(CgtError::Config(format!("spot.level = {} outside (0, 1)", self.level)));
        }
        if !(self.lambda_thr > 0.0) || !(0.0..=1.0).contains(&self.burn_frac) {
            return Err(CgtError::Config(
                "spot.lambda_thr must be positive and spot.burn_frac within [0, 1]".into(),
            ));
        }
        Ok(())
    }

    /// Length of the initialisation prefix for a stream of `len` scores.
    pub fn burn_in(&self, len: usize) -> usize {
        ((self.burn_frac * len as f64).ceil() as usize).max(self.burn_min)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpotState {
    pub u: f64,
    pub peaks: Vec<f64>,
    pub fit: GpdFit,
    pub n: usize,
    pub z_q: f64,
    pub q: f64,
    pub lambda_thr: f64,
}

impl SpotState {
    pub fn n_peaks(&self) -> usize {
        self.peaks.len()
    }

    fn refresh(&mut self) -> Result<()> {
        self.fit = fit_gpd(&self.peaks)?;
        self.z_q = tail_quantile(self.u, &self.fit, self.q, self.n, self.peaks.len());
        Ok(())
    }
}

pub fn spot_init(init: &[f64], q: f64, level: f64, lambda_thr: f64) -> Result<SpotState> {
    if init.is_empty() {
        return Err(CgtError::Spot("empty initialisation set".into()));
    }
    if init.iter().any(|v| !v.is_finite()) {
        return Err(CgtError::Spot("non-finite score in initialisation set".into()));
    }
    if init.len() < 100 {
        log::warn!("SPOT initialised on only {} points", init.len());
    }
    let mut sorted = init.to_vec();
    sorted.sort_by(f64::total_cmp);
    let idx = ((level * init.len() as f64).ceil() as usize).clamp(1, init.len()) - 1;
    let u = sorted[idx];
    let peaks: Vec<f64> = init.iter().filter(|&&x| x > u).map(|&x| x - u).collect();
    if peaks.is_empty() {
        return Err(CgtError::Spot(format!(
            "no exceedances above the {level} quantile; level too high"
        )));
    }
    let mut state = SpotState {
        u,
        peaks,
        fit: GpdFit { sigma: 1.0, xi: 0.0, log_lik: 0.0 },
        n: init.len(),
        z_q: u,
        q,
        lambda_thr,
    };
    state.refresh()?;
    Ok(state)
}

/// One streaming step: `(theta, theta_tilde, flagged)`, where `theta` is the
/// threshold in force when `x` arrived.
pub fn spot_stream(state: &mut SpotState, x: f64) -> Result<(f64, f64, bool)> {
    let theta = state.z_q;
    let flagged = x > theta;
    if !flagged {
        if x > state.u {
            state.peaks.push(x - state.u);
            state.n += 1;
            state.refresh()?;
        } else {
            state.n += 1;
        }
    }
    Ok((theta, state.lambda_thr * theta, flagged))
}

/// Thresholds and raw decisions for a whole score stream.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdTrace {
    pub timestamps: Vec<usize>,
    pub theta: Vec<f64>,
    pub theta_tilde: Vec<f64>,
    pub decisions: Vec<bool>,
    pub burn_in: usize,
}

/// Initialises on the burn-in prefix, then streams the remaining scores.
/// Burn-in points are judged against the initial threshold without updates.
pub fn run_spot(timestamps: &[usize], scores: &[f64], cfg: &SpotConfig) -> Result<ThresholdTrace> {
    cfg.validate()?;
    if timestamps.len() != scores.len() {
        return Err(CgtError::Shape(format!(
            "{} timestamps for {} scores",
            timestamps.len(),
            scores.len()
        )));
    }
    let burn = cfg.burn_in(scores.len());
    if burn >= scores.len() {
        return Err(CgtError::EmptyStream {
            len: scores.len(),
            needed: burn + 1,
        });
    }
    let mut state = spot_init(&scores[..burn], cfg.q, cfg.level, cfg.lambda_thr)?;
    let mut theta = Vec::with_capacity(scores.len());
    let mut theta_tilde = Vec::with_capacity(scores.len());
    for _ in 0..burn {
        theta.push(state.z_q);
        theta_tilde.push(cfg.lambda_thr * state.z_q);
    }
    for &x in &scores[burn..] {
        let (t, tt, _) = spot_stream(&mut state, x)?;
        theta.push(t);
        theta_tilde.push(tt);
    }
    let decisions = decide(scores, &theta_tilde)?;
    Ok(ThresholdTrace {
        timestamps: timestamps.to_vec(),
        theta,
        theta_tilde,
        decisions,
        burn_in: burn,
    })
}

impl ThresholdTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,theta,theta_tilde,decision_raw\n");
        for k in 0..self.timestamps.len() {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                self.timestamps[k], self.theta[k], self.theta_tilde[k], self.decisions[k] as u8
            );
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<ThresholdTrace> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| CgtError::MissingArtifact {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let mut trace = ThresholdTrace {
            timestamps: Vec::new(),
            theta: Vec::new(),
            theta_tilde: Vec::new(),
            decisions: Vec::new(),
            burn_in: 0,
        };
        for (r, line) in text.lines().enumerate().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || CgtError::Ingest {
                path: path.to_path_buf(),
                row: r + 1,
                column: 0,
                message: format!("malformed trace line {line:?}"),
            };
            if f.len() != 4 {
                return Err(bad());
            }
            trace.timestamps.push(f[0].parse().map_err(|_| bad())?);
            trace.theta.push(f[1].parse().map_err(|_| bad())?);
            trace.theta_tilde.push(f[2].parse().map_err(|_| bad())?);
            trace.decisions.push(match f[3] {
                "0" => false,
                "1" => true,
                _ => return Err(bad()),
            });
        }
        Ok(trace)
    }
}

/// Half-open index range `[start, end)` of a labelled anomaly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
}

/// Maximal runs of `true`.
pub fn segments_from_labels(labels: &[bool]) -> Vec<Segment> {
    let mut out = Vec::new();
    let mut start = None;
    for (t, &l) in labels.iter().enumerate() {
        match (l, start) {
            (true, None) => start = Some(t),
            (false, Some(s)) => {
                out.push(Segment { start: s, end: t });
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push(Segment { start: s, end: labels.len() });
    }
    out
}

/// `S_t > theta_tilde_t` pointwise.
pub fn decide(scores: &[f64], thresholds: &[f64]) -> Result<Vec<bool>> {
    if scores.len() != thresholds.len() {
        return Err(invalid(format!(
            "{} scores but {} thresholds",
            scores.len(),
            thresholds.len()
        )));
    }
    Ok(scores.iter().zip(thresholds).map(|(s, t)| s > t).collect())
}

/// Marks a whole true segment detected when any point in it is flagged.
pub fn point_adjust(raw: &[bool], segments: &[Segment]) -> Vec<bool> {
    let mut adj = raw.to_vec();
    for seg in segments {
        let end = seg.end.min(raw.len());
        if seg.start < end && raw[seg.start..end].iter().any(|&d| d) {
            adj[seg.start..end].iter_mut().for_each(|d| *d = true);
        }
    }
    adj
}

/// Raw decisions and, when ground-truth segments are given, adjusted ones.
pub fn decide_and_adjust(
    scores: &[f64],
    thresholds: &[f64],
    segments: Option<&[Segment]>,
) -> Result<(Vec<bool>, Vec<bool>)> {
    let raw = decide(scores, thresholds)?;
    let adj = match segments {
        Some(s) => point_adjust(&raw, s),
        None => raw.clone(),
    };
    Ok((raw, adj))
}
