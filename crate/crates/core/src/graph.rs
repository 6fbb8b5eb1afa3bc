//! Time-lagged causal graph prior, per-target parent masks, edge-list IO and
//! a linear (partial-correlation) PCMCI-style discovery routine.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, ArrayView1};
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::data::{LagSpec, SeriesFrame};
use crate::error::{CgtError, Result};

/// A directed edge `(source, lag) -> target`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LaggedEdge {
    pub source: usize,
    pub lag: usize,
    pub target: usize,
    pub strength: Option<f64>,
    pub p_value: Option<f64>,
}

impl LaggedEdge {
    pub fn new(source: usize, lag: usize, target: usize) -> Self {
        Self {
            source,
            lag,
            target,
            strength: None,
            p_value: None,
        }
    }

    fn key(&self) -> (usize, usize, usize) {
        (self.source, self.lag, self.target)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CausalGraphPrior {
    channels: usize,
    max_lag: usize,
    edges: BTreeMap<(usize, usize, usize), LaggedEdge>,
}

impl CausalGraphPrior {
    pub fn empty(channels: usize, max_lag: usize) -> Self {
        Self {
            channels,
            max_lag,
            edges: BTreeMap::new(),
        }
    }

    /// Every `(j, lag) -> i` edge.
    pub fn full(channels: usize, max_lag: usize) -> Self {
        let mut g = Self::empty(channels, max_lag);
        for i in 0..channels {
            for j in 0..channels {
                for lag in 1..=max_lag {
                    g.edges.insert((j, lag, i), LaggedEdge::new(j, lag, i));
                }
            }
        }
        g
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn max_lag(&self) -> usize {
        self.max_lag
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn edges(&self) -> impl Iterator<Item = &LaggedEdge> {
        self.edges.values()
    }

    pub fn contains(&self, source: usize, lag: usize, target: usize) -> bool {
        self.edges.contains_key(&(source, lag, target))
    }

    fn validate(&self, e: &LaggedEdge) -> std::result::Result<(), String> {
        if e.source >= self.channels || e.target >= self.channels {
            return Err(format!(
                "channel index out of range (source {}, target {}, D = {})",
                e.source, e.target, self.channels
            ));
        }
        if e.lag == 0 || e.lag > self.max_lag {
            return Err(format!("lag {} outside 1..={}", e.lag, self.max_lag));
        }
        if let Some(p) = e.p_value {
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("p-value {p} outside [0, 1]"));
            }
        }
        Ok(())
    }

    /// Inserts an edge; returns `false` when the triple was already present.
    pub fn insert(&mut self, edge: LaggedEdge) -> Result<bool> {
        self.validate(&edge).map_err(CgtError::InvalidArgument)?;
        Ok(self.edges.insert(edge.key(), edge).is_none())
    }

    /// Graph-supported parents of `target` as `(source, lag)` pairs.
    pub fn parents_of(&self, target: usize) -> Vec<(usize, usize)> {
        self.edges
            .values()
            .filter(|e| e.target == target)
            .map(|e| (e.source, e.lag))
            .collect()
    }

    pub fn to_edge_list(&self) -> String {
        let mut s = String::from("# source,lag,target,strength,p_value\n");
        for e in self.edges.values() {
            let _ = write!(s, "{},{},{}", e.source, e.lag, e.target);
            match (e.strength, e.p_value) {
                (Some(st), Some(p)) => {
                    let _ = write!(s, ",{st:.17e},{p:.17e}");
                }
                (Some(st), None) => {
                    let _ = write!(s, ",{st:.17e}");
                }
                _ => {}
            }
            s.push('\n');
        }
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_edge_list())?;
        Ok(())
    }
}

/// Result of reading an edge list.
#[derive(Debug, Clone)]
pub struct EdgeListImport {
    pub graph: CausalGraphPrior,
    pub duplicates: usize,
}

pub fn parse_edge_list(text: &str, channels: usize, max_lag: usize) -> Result<EdgeListImport> {
    let mut graph = CausalGraphPrior::empty(channels, max_lag);
    let mut duplicates = 0;
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let bad = |message: String| CgtError::EdgeList {
            line: n + 1,
            message,
        };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if !(3..=5).contains(&fields.len()) {
            return Err(bad(format!("expected 3 to 5 fields, found {}", fields.len())));
        }
        let idx = |k: usize| -> Result<usize> {
            fields[k]
                .parse()
                .map_err(|_| bad(format!("field {} is not a non-negative integer: {:?}", k + 1, fields[k])))
        };
        let real = |k: usize| -> Result<Option<f64>> {
            match fields.get(k) {
                None => Ok(None),
                Some(f) => f
                    .parse()
                    .map(Some)
                    .map_err(|_| bad(format!("field {} is not a number: {f:?}", k + 1))),
            }
        };
        let edge = LaggedEdge {
            source: idx(0)?,
            lag: idx(1)?,
            target: idx(2)?,
            strength: real(3)?,
            p_value: real(4)?,
        };
        graph.validate(&edge).map_err(bad)?;
        if graph.edges.insert(edge.key(), edge).is_some() {
            duplicates += 1;
        }
    }
    if duplicates > 0 {
        log::warn!("edge list: collapsed {duplicates} duplicate edge(s)");
    }
    Ok(EdgeListImport { graph, duplicates })
}

pub fn load_edge_list(
    path: impl AsRef<Path>,
    channels: usize,
    max_lag: usize,
) -> Result<EdgeListImport> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| CgtError::MissingArtifact {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    parse_edge_list(&text, channels, max_lag)
}

/// Binary selector of graph-supported sensor-lag columns for one target.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParentMask {
    pub target: usize,
    pub bits: Vec<bool>,
}

impl ParentMask {
    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn parent_count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    pub fn all(target: usize, len: usize, value: bool) -> Self {
        Self {
            target,
            bits: vec![value; len],
        }
    }
}

pub fn parent_mask(graph: &CausalGraphPrior, target: usize) -> Result<ParentMask> {
    if target >= graph.channels {
        return Err(CgtError::InvalidArgument(format!(
            "target {target} out of range for {} channels",
            graph.channels
        )));
    }
    let spec = LagSpec {
        window: 1,
        max_lag: graph.max_lag,
    };
    let mut bits = vec![false; spec.features(graph.channels)];
    for (j, lag) in graph.parents_of(target) {
        bits[spec.column(j, lag)] = true;
    }
    Ok(ParentMask { target, bits })
}

pub fn parent_masks(graph: &CausalGraphPrior) -> Vec<ParentMask> {
    (0..graph.channels)
        .map(|i| parent_mask(graph, i).expect("target in range"))
        .collect()
}

/// Settings for [`discover_pcmci_lite`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscoveryConfig {
    pub max_lag: usize,
    pub alpha: f64,
    pub max_cond: usize,
}

impl Default for DiscoveryConfig {
    fn default() -> Self {
        Self {
            max_lag: 7,
            alpha: 0.01,
            max_cond: 3,
        }
    }
}

/// A lagged variable `x^{sensor}_{t - lag}`; lag 0 is the current value.
type LaggedVar = (usize, usize);

struct LaggedData<'a> {
    series: &'a Array2<f64>,
    /// First row usable for every test (covers the MCI lag shift).
    offset: usize,
}

impl LaggedData<'_> {
    fn rows(&self) -> usize {
        self.series.nrows() - self.offset
    }

    fn column(&self, (j, lag): LaggedVar) -> DVector<f64> {
        let n = self.rows();
        DVector::from_iterator(n, (0..n).map(|r| self.series[[self.offset + r - lag, j]]))
    }

    /// Linear partial correlation of `x` and `y` given `z` and its two-sided p-value.
    fn parcorr(&self, x: LaggedVar, y: LaggedVar, z: &[LaggedVar]) -> (f64, f64) {
        let n = self.rows();
        let mut design = DMatrix::from_element(n, z.len() + 1, 1.0);
        for (k, &var) in z.iter().enumerate() {
            design.set_column(k + 1, &self.column(var));
        }
        let rx = residual(&design, self.column(x));
        let ry = residual(&design, self.column(y));
        let denom = (rx.norm_squared() * ry.norm_squared()).sqrt();
        let r = if denom > 0.0 {
            (rx.dot(&ry) / denom).clamp(-1.0, 1.0)
        } else {
            0.0
        };
        let df = n as f64 - 2.0 - z.len() as f64;
        if df < 1.0 {
            return (r, 1.0);
        }
        let p = if r.abs() >= 1.0 {
            0.0
        } else {
            let t = r * (df / (1.0 - r * r)).sqrt();
            let dist = StudentsT::new(0.0, 1.0, df).expect("df > 0");
            2.0 * (1.0 - dist.cdf(t.abs()))
        };
        (r, p.clamp(0.0, 1.0))
    }
}

fn residual(design: &DMatrix<f64>, y: DVector<f64>) -> DVector<f64> {
    // Normal equations are adequate: designs are at most a few dozen columns
    // of standardised lagged series.
    let xtx = design.transpose() * design;
    let xty = design.transpose() * &y;
    let beta = match xtx.clone().cholesky() {
        Some(ch) => ch.solve(&xty),
        None => xtx
            .svd(true, true)
            .solve(&xty, 1e-12)
            .unwrap_or_else(|_| DVector::zeros(design.ncols())),
    };
    y - design * beta
}

fn is_degenerate(col: ArrayView1<'_, f64>) -> bool {
    let first = col[0];
    col.iter().all(|&v| v == first)
}

/// Two-phase lagged discovery: condition selection per target, then momentary
/// conditional independence tests of the surviving links.
pub fn discover_pcmci_lite(train: &SeriesFrame, cfg: DiscoveryConfig) -> Result<CausalGraphPrior> {
    let d = train.channels();
    let tau = cfg.max_lag;
    if tau == 0 {
        return Err(CgtError::InvalidArgument("max_lag must be >= 1".into()));
    }
    if !(0.0..=1.0).contains(&cfg.alpha) {
        return Err(CgtError::InvalidArgument(format!(
            "alpha {} outside [0, 1]",
            cfg.alpha
        )));
    }
    let offset = 2 * tau;
    if train.len() <= offset + d * tau + 3 {
        return Err(CgtError::EmptyStream {
            len: train.len(),
            needed: offset + d * tau + 3,
        });
    }
    if train.len() < 10 * d * tau {
        log::warn!(
            "causal discovery on {} samples for {} lagged candidates per target; results may be unreliable",
            train.len(),
            d * tau
        );
    }

    let active: Vec<usize> = (0..d)
        .filter(|&j| {
            let degenerate = is_degenerate(train.values.column(j));
            if degenerate {
                log::warn!("causal discovery: channel {j} has zero variance and is excluded");
            }
            !degenerate
        })
        .collect();

    let data = LaggedData {
        series: &train.values,
        offset,
    };

    let selected: Vec<Vec<(LaggedVar, f64)>> = (0..d)
        .into_par_iter()
        .map(|i| {
            if active.contains(&i) {
                select_conditions(&data, i, &active, cfg)
            } else {
                Vec::new()
            }
        })
        .collect();

    let parents: Vec<Vec<LaggedVar>> = selected
        .iter()
        .map(|p| p.iter().map(|(v, _)| *v).collect())
        .collect();

    let links: Vec<LaggedEdge> = (0..d)
        .into_par_iter()
        .flat_map_iter(|i| {
            let parents = &parents;
            let data = &data;
            parents[i]
                .iter()
                .filter_map(move |&(j, lag)| {
                    let mut conds: Vec<LaggedVar> =
                        parents[i].iter().copied().filter(|&v| v != (j, lag)).collect();
                    let mut seen: BTreeSet<LaggedVar> = conds.iter().copied().collect();
                    for &(k, m) in &parents[j] {
                        let shifted = (k, m + lag);
                        if shifted != (j, lag) && seen.insert(shifted) {
                            conds.push(shifted);
                        }
                    }
                    let (r, p) = data.parcorr((j, lag), (i, 0), &conds);
                    (cfg.alpha > 0.0 && p <= cfg.alpha).then_some(LaggedEdge {
                        source: j,
                        lag,
                        target: i,
                        strength: Some(r),
                        p_value: Some(p),
                    })
                })
                .collect::<Vec<_>>()
        })
        .collect();

    let mut graph = CausalGraphPrior::empty(d, tau);
    for e in links {
        graph.insert(e)?;
    }
    Ok(graph)
}

/// Condition-selection phase for one target; returns the surviving candidates
/// sorted by decreasing minimum absolute partial correlation.
fn select_conditions(
    data: &LaggedData<'_>,
    target: usize,
    active: &[usize],
    cfg: DiscoveryConfig,
) -> Vec<(LaggedVar, f64)> {
    if cfg.alpha <= 0.0 {
        return Vec::new();
    }
    let mut parents: Vec<LaggedVar> = active
        .iter()
        .flat_map(|&j| (1..=cfg.max_lag).map(move |lag| (j, lag)))
        .collect();
    let mut strength: BTreeMap<LaggedVar, f64> =
        parents.iter().map(|&v| (v, f64::INFINITY)).collect();

    for p in 0..=cfg.max_cond {
        if parents.len() <= p {
            break;
        }
        let mut removed = Vec::new();
        for &cand in &parents {
            let conds: Vec<LaggedVar> = parents
                .iter()
                .copied()
                .filter(|&v| v != cand)
                .take(p)
                .collect();
            let (r, pval) = data.parcorr(cand, (target, 0), &conds);
            let s = strength.get_mut(&cand).expect("candidate tracked");
            *s = s.min(r.abs());
            if pval > cfg.alpha {
                removed.push(cand);
            }
        }
        parents.retain(|v| !removed.contains(v));
        // Stable sort keeps ties in candidate order, so the result is deterministic.
        parents.sort_by(|a, b| strength[b].total_cmp(&strength[a]));
    }
    parents.into_iter().map(|v| (v, strength[&v])).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_single_edge() {
        let g = parse_edge_list("0,1,1\n", 2, 1).unwrap();
        assert_eq!(g.graph.len(), 1);
        assert!(g.graph.contains(0, 1, 1));
        assert_eq!(g.duplicates, 0);
    }

    #[test]
    fn rejects_lag_zero_and_out_of_range() {
        assert!(matches!(
            parse_edge_list("0,0,1", 2, 1),
            Err(CgtError::EdgeList { line: 1, .. })
        ));
        assert!(parse_edge_list("0,2,1", 2, 1).is_err());
        assert!(parse_edge_list("\n2,1,0", 2, 1).is_err());
        assert!(parse_edge_list("0,1", 2, 1).is_err());
        assert!(parse_edge_list("a,1,1", 2, 1).is_err());
    }

    #[test]
    fn duplicates_collapse() {
        let g = parse_edge_list("# header\n0,1,1\n0,1,1 # again\n", 2, 1).unwrap();
        assert_eq!(g.graph.len(), 1);
        assert_eq!(g.duplicates, 1);
    }

    #[test]
    fn optional_statistics_roundtrip() {
        let mut g = CausalGraphPrior::empty(3, 2);
        g.insert(LaggedEdge {
            source: 2,
            lag: 2,
            target: 0,
            strength: Some(0.123456789),
            p_value: Some(1e-9),
        })
        .unwrap();
        g.insert(LaggedEdge::new(0, 1, 1)).unwrap();
        let back = parse_edge_list(&g.to_edge_list(), 3, 2).unwrap().graph;
        assert_eq!(back, g);
    }

    #[test]
    fn masks_follow_column_convention() {
        let g = CausalGraphPrior::empty(2, 2);
        assert_eq!(parent_mask(&g, 0).unwrap().bits, vec![false; 4]);
        let g = CausalGraphPrior::full(2, 2);
        assert_eq!(parent_mask(&g, 1).unwrap().bits, vec![true; 4]);

        let mut g = CausalGraphPrior::empty(2, 2);
        g.insert(LaggedEdge::new(1, 2, 0)).unwrap();
        assert_eq!(
            parent_mask(&g, 0).unwrap().as_f64(),
            vec![0.0, 0.0, 0.0, 1.0]
        );
        assert_eq!(parent_mask(&g, 1).unwrap().parent_count(), 0);
    }

    #[test]
    fn adding_an_edge_flips_one_bit() {
        let mut g = CausalGraphPrior::empty(3, 3);
        g.insert(LaggedEdge::new(0, 1, 2)).unwrap();
        let before = parent_mask(&g, 2).unwrap();
        g.insert(LaggedEdge::new(1, 3, 2)).unwrap();
        let after = parent_mask(&g, 2).unwrap();
        let flips = before
            .bits
            .iter()
            .zip(&after.bits)
            .filter(|(a, b)| a != b)
            .count();
        assert_eq!(flips, 1);
    }

    #[test]
    fn parcorr_of_independent_columns_is_small() {
        let series = Array2::from_shape_fn((200, 2), |(t, j)| {
            ((t * 7919 + j * 104729) % 1013) as f64 / 1013.0
        });
        let data = LaggedData {
            series: &series,
            offset: 2,
        };
        let (r, p) = data.parcorr((0, 1), (0, 1), &[]);
        assert!((r - 1.0).abs() < 1e-12);
        assert_eq!(p, 0.0);
        let (_, p) = data.parcorr((0, 1), (1, 0), &[(1, 1)]);
        assert!((0.0..=1.0).contains(&p));
    }

    #[test]
    fn zero_alpha_gives_empty_graph() {
        let series = Array2::from_shape_fn((300, 2), |(t, j)| ((t * (j + 3)) % 17) as f64);
        let frame = SeriesFrame::new(series).unwrap();
        let g = discover_pcmci_lite(
            &frame,
            DiscoveryConfig {
                max_lag: 2,
                alpha: 0.0,
                max_cond: 3,
            },
        )
        .unwrap();
        assert!(g.is_empty());
    }

    #[test]
    fn constant_channel_is_excluded() {
        let series = Array2::from_shape_fn((300, 2), |(t, j)| {
            if j == 1 {
                4.0
            } else {
                ((t * 31) % 11) as f64
            }
        });
        let frame = SeriesFrame::new(series).unwrap();
        let g = discover_pcmci_lite(
            &frame,
            DiscoveryConfig {
                max_lag: 2,
                alpha: 0.05,
                max_cond: 2,
            },
        )
        .unwrap();
        assert!(g.edges().all(|e| e.source != 1 && e.target != 1));
    }
}
