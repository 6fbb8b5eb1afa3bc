//! Linear lagged structural causal models with injected anomalies.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use ndarray::{s, Array2};
use rand_distr::{Distribution, StandardNormal};

use crate::data::SeriesFrame;
use crate::error::{invalid, CgtError, Result};
use crate::graph::{CausalGraphPrior, LaggedEdge};
use crate::seed;

/// Steps simulated and discarded before the returned series starts.
const WARMUP: usize = 200;

#[derive(Debug, Clone, PartialEq)]
pub struct ScmSpec {
    pub channels: usize,
    pub max_lag: usize,
    /// `(source, lag, target) -> weight`.
    pub coefficients: BTreeMap<(usize, usize, usize), f64>,
    pub noise_std: Vec<f64>,
    pub len: usize,
    pub seed: u64,
}

impl ScmSpec {
    /// Five channels, lags up to two. Channels 0-2 are drivers without
    /// self-dependence, each feeding one child at both lags; the sinks 3 and
    /// 4 are autoregressive.
    pub fn bench(len: usize, seed: u64) -> Self {
        let coefficients = [
            ((0, 1, 1), 0.4),
            ((0, 2, 1), 1.0),
            ((1, 1, 3), 0.4),
            ((1, 2, 3), 1.0),
            ((2, 1, 4), 0.4),
            ((2, 2, 4), 1.0),
            ((3, 1, 3), 0.3),
            ((4, 1, 4), 0.3),
        ]
        .into_iter()
        .collect();
        Self {
            channels: 5,
            max_lag: 2,
            coefficients,
            noise_std: vec![1.0; 5],
            len,
            seed,
        }
    }

    pub fn graph(&self) -> Result<CausalGraphPrior> {
        let mut g = CausalGraphPrior::empty(self.channels, self.max_lag);
        for (&(j, l, i), &w) in &self.coefficients {
            if w != 0.0 {
                g.insert(LaggedEdge::new(j, l, i))?;
            }
        }
        Ok(g)
    }

    /// Spectral radius of the companion matrix of the lag polynomial.
    pub fn spectral_radius(&self) -> f64 {
        let (d, tau) = (self.channels, self.max_lag);
        let n = d * tau;
        let mut c = DMatrix::<f64>::zeros(n, n);
        for (&(j, l, i), &w) in &self.coefficients {
            c[(i, (l - 1) * d + j)] += w;
        }
        for k in d..n {
            c[(k, k - d)] = 1.0;
        }
        match c.clone().try_schur(1e-12, 10_000) {
            Some(schur) => schur
                .complex_eigenvalues()
                .iter()
                .map(|z| z.norm())
                .fold(0.0, f64::max),
            None => gelfand_radius(c),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.max_lag == 0 || self.len == 0 {
            return Err(invalid("channels, max_lag and len must be positive"));
        }
        if self.noise_std.len() != self.channels || self.noise_std.iter().any(|s| !(*s >= 0.0)) {
            return Err(invalid("noise_std needs one non-negative value per channel"));
        }
        for &(j, l, i) in self.coefficients.keys() {
            if j >= self.channels || i >= self.channels || l == 0 || l > self.max_lag {
                return Err(invalid(format!("coefficient ({j},{l},{i}) out of range")));
            }
        }
        let rho = self.spectral_radius();
        if rho >= 1.0 {
            return Err(invalid(format!("unstable SCM: spectral radius {rho:.4} >= 1")));
        }
        Ok(())
    }
}

/// `||C^(2^k)||^(1/2^k)` with renormalisation; an upper bound that
/// converges to the spectral radius.
fn gelfand_radius(mut m: DMatrix<f64>) -> f64 {
    const SQUARINGS: i32 = 12;
    let mut log_scale = 0.0;
    for _ in 0..SQUARINGS {
        let n = m.norm();
        if n == 0.0 {
            return 0.0;
        }
        m /= n;
        log_scale = 2.0 * (log_scale + n.ln());
        m = &m * &m;
    }
    let n = m.norm();
    if n == 0.0 {
        return 0.0;
    }
    ((log_scale + n.ln()) / 2f64.powi(SQUARINGS)).exp()
}

/// A generated series with its innovations and generating graph.
#[derive(Debug, Clone)]
pub struct Generated {
    pub frame: SeriesFrame,
    pub graph: CausalGraphPrior,
    /// Standardised innovations, `T x D`.
    pub noise: Array2<f64>,
}

fn step(spec: &ScmSpec, x: &mut Array2<f64>, noise: &Array2<f64>, t: usize, broken: Option<(usize, f64)>) {
    for i in 0..spec.channels {
        let e = spec.noise_std[i] * noise[[t, i]];
        if let Some((root, magnitude)) = broken {
            if root == i {
                x[[t, i]] = magnitude * e;
                continue;
            }
        }
        x[[t, i]] = e;
    }
    for (&(j, l, i), &w) in &spec.coefficients {
        if broken.is_some_and(|(root, _)| root == i) {
            continue;
        }
        if t >= l {
            x[[t, i]] += w * x[[t - l, j]];
        }
    }
}

pub fn generate(spec: &ScmSpec) -> Result<Generated> {
    spec.validate()?;
    let total = spec.len + WARMUP;
    let mut rng = seed::stream(spec.seed, &[0x5c]);
    let noise = Array2::from_shape_simple_fn((total, spec.channels), || StandardNormal.sample(&mut rng));
    let mut x = Array2::zeros((total, spec.channels));
    for t in 0..total {
        step(spec, &mut x, &noise, t, None);
    }
    let names = (0..spec.channels).map(|i| format!("x{i}")).collect();
    Ok(Generated {
        frame: SeriesFrame::with_names(x.slice(s![WARMUP.., ..]).to_owned(), names)?,
        graph: spec.graph()?,
        noise: noise.slice(s![WARMUP.., ..]).to_owned(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnomalyKind {
    Spike,
    LevelShift,
    MechanismBreak,
}

impl std::str::FromStr for AnomalyKind {
    type Err = CgtError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spike" => Ok(Self::Spike),
            "level-shift" => Ok(Self::LevelShift),
            "mechanism-break" => Ok(Self::MechanismBreak),
            _ => Err(invalid(format!("unknown anomaly kind {s:?}"))),
        }
    }
}

impl std::fmt::Display for AnomalyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Spike => "spike",
            Self::LevelShift => "level-shift",
            Self::MechanismBreak => "mechanism-break",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnomalyEvent {
    pub start: usize,
    pub length: usize,
    pub root: usize,
    pub kind: AnomalyKind,
    /// In units of the root channel's standard deviation (noise scale for
    /// mechanism breaks).
    pub magnitude: f64,
}

impl AnomalyEvent {
    pub fn end(&self) -> usize {
        self.start + self.length
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnomalySpec {
    pub events: Vec<AnomalyEvent>,
}

/// Injected series, point labels and per-event ground-truth cause sets.
#[derive(Debug, Clone)]
pub struct Injected {
    pub frame: SeriesFrame,
    pub labels: Vec<bool>,
    pub causes: Vec<Vec<usize>>,
}

/// Applies the events of `anomalies` to a generated series. Events must lie
/// in `[first_valid, T)` and must not overlap.
pub fn inject(
    scm: &ScmSpec,
    generated: &Generated,
    anomalies: &AnomalySpec,
    first_valid: usize,
) -> Result<Injected> {
    let t_len = generated.frame.len();
    let mut events = anomalies.events.clone();
    events.sort_by_key(|e| e.start);
    for e in &events {
        if e.root >= scm.channels || e.length == 0 || e.start < first_valid || e.end() > t_len {
            return Err(invalid(format!(
                "event at {} (length {}, root {}) outside [{first_valid}, {t_len})",
                e.start, e.length, e.root
            )));
        }
    }
    if let Some(w) = events.windows(2).find(|w| w[1].start < w[0].end()) {
        return Err(invalid(format!(
            "events starting at {} and {} overlap",
            w[0].start, w[1].start
        )));
    }

    let clean = &generated.frame.values;
    let std: Vec<f64> = (0..scm.channels)
        .map(|i| clean.column(i).std(0.0))
        .collect();
    let mut x = clean.clone();

    // Mechanism breaks re-simulate from their start with the stored noise,
    // in time order, so downstream channels respond through the SCM.
    for e in events.iter().filter(|e| e.kind == AnomalyKind::MechanismBreak) {
        for t in e.start..t_len {
            let broken = (t < e.end()).then_some((e.root, e.magnitude));
            step(scm, &mut x, &generated.noise, t, broken);
        }
    }
    for e in events.iter().filter(|e| e.kind != AnomalyKind::MechanismBreak) {
        let offset = e.magnitude * std[e.root];
        for t in e.start..e.end() {
            x[[t, e.root]] += offset;
        }
    }

    let mut labels = vec![false; t_len];
    for e in &events {
        labels[e.start..e.end()].iter_mut().for_each(|l| *l = true);
    }
    Ok(Injected {
        frame: SeriesFrame::with_names(x, generated.frame.channel_names.clone())?,
        labels,
        causes: events.iter().map(|e| vec![e.root]).collect(),
    })
}

/// Synthetic benchmark layout: series length, split sizes and events.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub len: usize,
    pub train: usize,
    pub val: usize,
    pub seed: u64,
    /// Event starts relative to the beginning of the test split.
    pub events: Vec<AnomalyEvent>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        let ev = |start, root, kind, magnitude| AnomalyEvent {
            start,
            length: 20,
            root,
            kind,
            magnitude,
        };
        Self {
            len: 6000,
            train: 4000,
            val: 800,
            seed: 7,
            events: vec![
                ev(600, 0, AnomalyKind::Spike, 8.0),
                ev(800, 1, AnomalyKind::LevelShift, 8.0),
                ev(1000, 2, AnomalyKind::Spike, 8.0),
            ],
        }
    }
}

/// The three splits of a benchmark run; only the test split has events.
#[derive(Debug, Clone)]
pub struct Bench {
    pub train: SeriesFrame,
    pub val: SeriesFrame,
    pub test: SeriesFrame,
    /// Labels of the test split.
    pub labels: Vec<bool>,
    /// Events with test-relative starts.
    pub events: Vec<AnomalyEvent>,
    pub causes: Vec<Vec<usize>>,
    pub graph: CausalGraphPrior,
}

pub fn build_bench(cfg: &BenchConfig) -> Result<Bench> {
    if cfg.train + cfg.val >= cfg.len {
        return Err(invalid("train and validation splits leave no test data"));
    }
    let scm = ScmSpec::bench(cfg.len, cfg.seed);
    let generated = generate(&scm)?;
    let test_start = cfg.train + cfg.val;
    let absolute = AnomalySpec {
        events: cfg
            .events
            .iter()
            .map(|e| AnomalyEvent { start: e.start + test_start, ..*e })
            .collect(),
    };
    let injected = inject(&scm, &generated, &absolute, test_start)?;
    let frame = &injected.frame;
    let mut events = cfg.events.clone();
    events.sort_by_key(|e| e.start);
    Ok(Bench {
        train: frame.slice_rows(0, cfg.train)?,
        val: frame.slice_rows(cfg.train, test_start)?,
        test: frame.slice_rows(test_start, cfg.len)?,
        labels: injected.labels[test_start..].to_vec(),
        events,
        causes: injected.causes,
        graph: generated.graph,
    })
}

pub fn labels_csv(labels: &[bool]) -> String {
    let mut out = String::from("label\n");
    for &l in labels {
        out.push_str(if l { "1\n" } else { "0\n" });
    }
    out
}

pub fn causes_csv(events: &[AnomalyEvent]) -> String {
    let mut out = String::from("event_id,start,end,root\n");
    for (k, e) in events.iter().enumerate() {
        let _ = writeln!(out, "{k},{},{},{}", e.start, e.end() - 1, e.root);
    }
    out
}

pub fn write_bench(dir: impl AsRef<Path>, bench: &Bench) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    crate::data::write_series(dir.join("train.csv"), &bench.train)?;
    crate::data::write_series(dir.join("val.csv"), &bench.val)?;
    crate::data::write_series(dir.join("test.csv"), &bench.test)?;
    fs::write(dir.join("labels.csv"), labels_csv(&bench.labels))?;
    fs::write(dir.join("causes.csv"), causes_csv(&bench.events))?;
    bench.graph.save(dir.join("true_graph.csv"))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain() -> ScmSpec {
        ScmSpec {
            channels: 3,
            max_lag: 1,
            coefficients: [((0, 1, 1), 0.8), ((1, 1, 2), 0.8)].into_iter().collect(),
            noise_std: vec![1.0; 3],
            len: 500,
            seed: 1,
        }
    }

    #[test]
    fn chain_graph_has_two_edges() {
        assert_eq!(generate(&chain()).unwrap().graph.len(), 2);
    }

    #[test]
    fn zero_coefficients_give_noise() {
        let spec = ScmSpec { coefficients: BTreeMap::new(), ..chain() };
        let g = generate(&spec).unwrap();
        assert_eq!(g.frame.values, g.noise);
    }

    #[test]
    fn unstable_spec_is_rejected() {
        let spec = ScmSpec {
            coefficients: [((0, 1, 0), 1.05)].into_iter().collect(),
            ..chain()
        };
        assert!(generate(&spec).is_err());
        assert!(ScmSpec::bench(100, 0).spectral_radius() < 1.0);
    }

    #[test]
    fn radius_fallback_agrees_with_eigenvalues() {
        let m = DMatrix::from_row_slice(2, 2, &[0.5, 0.3, 0.0, -0.7]);
        assert!((gelfand_radius(m) - 0.7).abs() < 0.01);
        assert!(chain().spectral_radius() < 1e-3);
    }

    #[test]
    fn zero_magnitude_spike_only_labels() {
        let spec = chain();
        let g = generate(&spec).unwrap();
        let ev = AnomalyEvent { start: 100, length: 5, root: 0, kind: AnomalyKind::Spike, magnitude: 0.0 };
        let inj = inject(&spec, &g, &AnomalySpec { events: vec![ev] }, 10).unwrap();
        assert_eq!(inj.frame.values, g.frame.values);
        assert_eq!(inj.labels.iter().filter(|&&l| l).count(), 5);
        assert_eq!(inj.causes, vec![vec![0]]);
    }

    #[test]
    fn spike_moves_root_most() {
        let spec = chain();
        let g = generate(&spec).unwrap();
        let ev = AnomalyEvent { start: 100, length: 5, root: 0, kind: AnomalyKind::Spike, magnitude: 8.0 };
        let inj = inject(&spec, &g, &AnomalySpec { events: vec![ev] }, 10).unwrap();
        let delta = &inj.frame.values - &g.frame.values;
        let (mut best, mut arg) = (0.0, 99);
        for ((_, c), v) in delta.indexed_iter() {
            if v.abs() > best {
                best = v.abs();
                arg = c;
            }
        }
        assert_eq!(arg, 0);
    }

    #[test]
    fn overlapping_events_are_rejected() {
        let spec = chain();
        let g = generate(&spec).unwrap();
        let ev = |start| AnomalyEvent { start, length: 10, root: 0, kind: AnomalyKind::Spike, magnitude: 1.0 };
        assert!(inject(&spec, &g, &AnomalySpec { events: vec![ev(100), ev(105)] }, 10).is_err());
        assert!(inject(&spec, &g, &AnomalySpec { events: vec![ev(5)] }, 10).is_err());
    }

    #[test]
    fn bench_splits() {
        let b = build_bench(&BenchConfig::default()).unwrap();
        assert_eq!((b.train.len(), b.val.len(), b.test.len()), (4000, 800, 1200));
        assert_eq!(b.labels.iter().filter(|&&l| l).count(), 60);
        assert!(b.labels[600] && !b.labels[599] && !b.labels[620]);
    }
}
