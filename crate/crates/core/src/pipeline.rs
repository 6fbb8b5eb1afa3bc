//! Stage orchestration over an artifact directory.
//!
//! Layout of `run.out`:
//! `scaler.txt`, `graph.csv`, `checkpoint/`, `training_log.csv`,
//! `safety.txt`, `scores.csv`, `scores_val.csv`, `threshold.csv`,
//! `attribution.csv`, `metrics.txt`, `config.txt`.

use std::fmt;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::attribution::{
    baseline_stats, rank_root_causes_clamp, rank_root_causes_zscore, training_medians, write_report,
    AttributionMethod, ClampContext, EventRanking,
};
use crate::config::PipelineConfig;
use crate::data::{apply_minmax, fit_minmax, load_series, ScalerParams, SeriesFrame};
use crate::error::{invalid, CgtError, Result};
use crate::graph::{discover_pcmci_lite, load_edge_list, parent_masks, CausalGraphPrior};
use crate::metrics::{attribution_metrics, auroc, detection_metrics};
use crate::model::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::model::ModelConfig;
use crate::safety::{compute_safety, SafetyDiagnostics};
use crate::scoring::{anomaly_scores, read_scores, score_stream, write_scores, ScoreSeries};
use crate::synth::{build_bench, write_bench};
use crate::threshold::{run_spot, segments_from_labels, Segment, ThresholdTrace};
use crate::train::{train_all, write_training_log};

pub const SCALER_FILE: &str = "scaler.txt";
pub const GRAPH_FILE: &str = "graph.csv";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const TRAINING_LOG_FILE: &str = "training_log.csv";
pub const SAFETY_FILE: &str = "safety.txt";
pub const SCORES_FILE: &str = "scores.csv";
pub const VAL_SCORES_FILE: &str = "scores_val.csv";
pub const THRESHOLD_FILE: &str = "threshold.csv";
pub const ATTRIBUTION_FILE: &str = "attribution.csv";
pub const METRICS_FILE: &str = "metrics.txt";
pub const CONFIG_FILE: &str = "config.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Discover,
    Train,
    Score,
    Threshold,
    Evaluate,
    Attribute,
    Synth,
    Pipeline,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Discover => "discover",
            Stage::Train => "train",
            Stage::Score => "score",
            Stage::Threshold => "threshold",
            Stage::Evaluate => "evaluate",
            Stage::Attribute => "attribute",
            Stage::Synth => "synth",
            Stage::Pipeline => "pipeline",
        }
    }
}

impl FromStr for Stage {
    type Err = CgtError;
    fn from_str(s: &str) -> Result<Self> {
        [
            Stage::Discover,
            Stage::Train,
            Stage::Score,
            Stage::Threshold,
            Stage::Evaluate,
            Stage::Attribute,
            Stage::Synth,
            Stage::Pipeline,
        ]
        .into_iter()
        .find(|st| st.name() == s)
        .ok_or_else(|| invalid(format!("unknown stage {s:?}")))
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn need(p: &Option<PathBuf>, key: &str) -> Result<PathBuf> {
    p.clone()
        .ok_or_else(|| CgtError::Config(format!("{key} is not set")))
}

fn require(path: PathBuf, producer: &str) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(CgtError::MissingArtifact {
            message: format!("run the {producer} stage first"),
            path,
        })
    }
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<Vec<bool>> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CgtError::MissingArtifact {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    let mut out = Vec::new();
    for (row, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| CgtError::Ingest {
            path: path.to_path_buf(),
            row: row + 1,
            column: 0,
            message: e.to_string(),
        })?;
        match rec.get(0) {
            Some("0") => out.push(false),
            Some("1") => out.push(true),
            other => {
                return Err(CgtError::Ingest {
                    path: path.to_path_buf(),
                    row: row + 1,
                    column: 0,
                    message: format!("label must be 0 or 1, found {other:?}"),
                })
            }
        }
    }
    Ok(out)
}

/// Ground-truth events: `[start, end)` segments with their cause sets.
#[derive(Debug, Clone, PartialEq)]
pub struct CauseTable {
    pub segments: Vec<Segment>,
    pub causes: Vec<Vec<usize>>,
}

/// Reads `event_id,start,end,root` rows (inclusive `end`); several rows
/// with one id form a multi-cause event.
pub fn load_causes(path: impl AsRef<Path>) -> Result<CauseTable> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CgtError::MissingArtifact {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    let mut table: Vec<(usize, Segment, Vec<usize>)> = Vec::new();
    for (row, rec) in reader.records().enumerate() {
        let bad = |column: usize, message: String| CgtError::Ingest {
            path: path.to_path_buf(),
            row: row + 1,
            column,
            message,
        };
        let rec = rec.map_err(|e| bad(0, e.to_string()))?;
        let field = |k: usize| -> Result<usize> {
            rec.get(k)
                .and_then(|f| f.parse().ok())
                .ok_or_else(|| bad(k, format!("expected a non-negative integer, found {:?}", rec.get(k))))
        };
        let (id, start, end, root) = (field(0)?, field(1)?, field(2)?, field(3)?);
        if end < start {
            return Err(bad(2, format!("end {end} before start {start}")));
        }
        let seg = Segment { start, end: end + 1 };
        match table.iter_mut().find(|(i, _, _)| *i == id) {
            Some((_, s, roots)) if *s == seg => roots.push(root),
            Some(_) => return Err(bad(1, format!("event {id} has inconsistent bounds"))),
            None => table.push((id, seg, vec![root])),
        }
    }
    table.sort_by_key(|(id, _, _)| *id);
    Ok(CauseTable {
        segments: table.iter().map(|(_, s, _)| *s).collect(),
        causes: table.into_iter().map(|(_, _, r)| r).collect(),
    })
}

/// Handle on one run: configuration plus artifact directory.
#[derive(Debug, Clone)]
pub struct Run {
    pub cfg: PipelineConfig,
}

impl Run {
    pub fn new(cfg: PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        fs::create_dir_all(&cfg.run.out)?;
        Ok(Self { cfg })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.cfg.run.out.join(name)
    }

    fn raw(&self, which: &Option<PathBuf>, key: &str) -> Result<SeriesFrame> {
        load_series(need(which, key)?, self.cfg.data.header)
    }

    /// Loads the stored scaler or fits one on the training split.
    pub fn scaler(&self) -> Result<ScalerParams> {
        let path = self.path(SCALER_FILE);
        if path.exists() {
            return ScalerParams::load(path);
        }
        let scaler = fit_minmax(&self.raw(&self.cfg.data.train, "data.train")?);
        scaler.save(path)?;
        Ok(scaler)
    }

    pub fn scaled(&self, which: &Option<PathBuf>, key: &str) -> Result<SeriesFrame> {
        apply_minmax(&self.raw(which, key)?, &self.scaler()?)
    }

    pub fn model_config(&self, channels: usize) -> ModelConfig {
        ModelConfig {
            channels,
            ..self.cfg.model.clone()
        }
    }

    pub fn graph(&self, channels: usize) -> Result<CausalGraphPrior> {
        let path = match &self.cfg.graph.path {
            Some(p) => p.clone(),
            None => require(self.path(GRAPH_FILE), "discover")?,
        };
        Ok(load_edge_list(path, channels, self.cfg.model.max_lag)?.graph)
    }

    pub fn discover(&self) -> Result<CausalGraphPrior> {
        let train = self.scaled(&self.cfg.data.train, "data.train")?;
        let graph = match &self.cfg.graph.path {
            Some(p) => load_edge_list(p, train.channels(), self.cfg.model.max_lag)?.graph,
            None => discover_pcmci_lite(&train, self.cfg.discovery())?,
        };
        graph.save(self.path(GRAPH_FILE))?;
        log::info!("graph: {} edges", graph.len());
        Ok(graph)
    }

    pub fn train(&self) -> Result<Checkpoint> {
        let train = self.scaled(&self.cfg.data.train, "data.train")?;
        let graph = self.graph(train.channels())?;
        let masks = parent_masks(&graph);
        let model = self.model_config(train.channels());
        let trained = train_all(&model, &self.cfg.train, &train, &masks, self.cfg.run.workers)?;
        write_training_log(self.path(TRAINING_LOG_FILE), &trained)?;
        let ckpt = Checkpoint {
            config: model,
            masks,
            blocks: trained.into_iter().map(|b| b.params).collect(),
        };
        save_checkpoint(self.path(CHECKPOINT_DIR), &ckpt, self.cfg.run.checkpoint_dtype)?;
        Ok(ckpt)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        load_checkpoint(require(self.path(CHECKPOINT_DIR), "train")?)
    }

    /// Calibrates the safety gate on the stream prefix, then scores the test
    /// split (and the validation split when configured).
    pub fn score(&self) -> Result<(SafetyDiagnostics, ScoreSeries)> {
        let ckpt = self.checkpoint()?;
        let test = self.scaled(&self.cfg.data.test, "data.test")?;
        let calib = test.slice_rows(0, self.cfg.safety.calibration_len(test.len()))?;
        let seed = self.cfg.run.seed;
        let rule = self.cfg.run.aggregation;
        let safety = compute_safety(
            &ckpt.config,
            &ckpt.blocks,
            &ckpt.masks,
            &calib,
            self.cfg.train.gamma,
            rule,
            &self.cfg.safety,
            seed,
        )?;
        log::info!("{}", safety.report());
        safety.save(self.path(SAFETY_FILE))?;
        let gamma = safety.gamma_used;
        let series = score_stream(&ckpt.config, &ckpt.blocks, &ckpt.masks, &test, seed)?;
        write_scores(self.path(SCORES_FILE), &series, &anomaly_scores(&series, gamma, rule)?)?;
        if self.cfg.data.val.is_some() {
            let val = self.scaled(&self.cfg.data.val, "data.val")?;
            let vs = score_stream(&ckpt.config, &ckpt.blocks, &ckpt.masks, &val, seed)?;
            write_scores(self.path(VAL_SCORES_FILE), &vs, &anomaly_scores(&vs, gamma, rule)?)?;
        }
        Ok((safety, series))
    }

    pub fn scores(&self) -> Result<(ScoreSeries, Vec<f64>)> {
        let (s, a) = read_scores(require(self.path(SCORES_FILE), "score")?)?;
        Ok((s, a.to_vec()))
    }

    pub fn threshold(&self) -> Result<ThresholdTrace> {
        let (series, scores) = self.scores()?;
        let trace = run_spot(&series.timestamps, &scores, &self.cfg.spot)?;
        trace.save(self.path(THRESHOLD_FILE))?;
        Ok(trace)
    }

    fn gamma_used(&self) -> Result<f64> {
        SafetyDiagnostics::load_gamma_used(require(self.path(SAFETY_FILE), "score")?)
    }

    /// Events to attribute: ground-truth segments when a cause table is
    /// configured, otherwise runs of raw threshold decisions.
    pub fn events(&self) -> Result<Vec<Segment>> {
        if let Some(p) = &self.cfg.data.causes {
            return Ok(load_causes(p)?.segments);
        }
        let trace = ThresholdTrace::load(require(self.path(THRESHOLD_FILE), "threshold")?)?;
        Ok(segments_from_labels(&trace.decisions)
            .into_iter()
            .map(|s| Segment {
                start: trace.timestamps[s.start],
                end: trace.timestamps[s.end - 1] + 1,
            })
            .collect())
    }

    pub fn attribute(&self) -> Result<Vec<EventRanking>> {
        let (series, _) = self.scores()?;
        let gamma = self.gamma_used()?;
        let events = self.events()?;
        let rankings = match self.cfg.attribution.method {
            AttributionMethod::ZScore => {
                let (val, _) = read_scores(require(self.path(VAL_SCORES_FILE), "score (with data.val set)")?)?;
                rank_root_causes_zscore(&series, gamma, &baseline_stats(&val, gamma)?, &events)?
            }
            AttributionMethod::Clamp => {
                let ckpt = self.checkpoint()?;
                let test = self.scaled(&self.cfg.data.test, "data.test")?;
                let medians = training_medians(&self.raw(&self.cfg.data.train, "data.train")?, &self.scaler()?);
                let ctx = ClampContext {
                    cfg: &ckpt.config,
                    blocks: &ckpt.blocks,
                    masks: &ckpt.masks,
                    frame: &test,
                    original: &series,
                    medians: &medians,
                    gamma,
                    rule: self.cfg.run.aggregation,
                    seed: self.cfg.run.seed,
                    gate_threshold: self.cfg.attribution.gate_threshold,
                };
                rank_root_causes_clamp(&ctx, &events)?
            }
        };
        write_report(self.path(ATTRIBUTION_FILE), &rankings)?;
        Ok(rankings)
    }

    /// Detection metrics, plus attribution metrics when both a cause table
    /// and an attribution report exist. Returns the key=value report.
    pub fn evaluate(&self) -> Result<String> {
        let (series, scores) = self.scores()?;
        let trace = ThresholdTrace::load(require(self.path(THRESHOLD_FILE), "threshold")?)?;
        let labels = load_labels(need(&self.cfg.data.labels, "data.labels")?)?;
        let last = series.timestamps.last().copied().unwrap_or(0);
        if labels.len() <= last || trace.timestamps != series.timestamps {
            return Err(CgtError::Shape(format!(
                "evaluate: {} labels, {} scores up to t={last}, {} threshold rows",
                labels.len(),
                series.len(),
                trace.timestamps.len()
            )));
        }
        let aligned: Vec<bool> = series.timestamps.iter().map(|&t| labels[t]).collect();
        let mut report = String::new();
        report.push_str(&detection_metrics(&trace.decisions, &aligned, true)?.to_key_values("adjusted."));
        report.push_str(&detection_metrics(&trace.decisions, &aligned, false)?.to_key_values("raw."));
        match auroc(&scores, &aligned) {
            Ok(a) => {
                let _ = writeln!(report, "auroc={a}");
            }
            Err(e) => log::warn!("auroc skipped: {e}"),
        }
        let _ = writeln!(report, "gamma_used={}", self.gamma_used()?);
        let attribution = self.path(ATTRIBUTION_FILE);
        if let (Some(causes), true) = (&self.cfg.data.causes, attribution.exists()) {
            let table = load_causes(causes)?;
            let rankings = read_rankings(&attribution)?;
            if rankings.len() == table.causes.len() {
                let m = attribution_metrics(&rankings, &table.causes, &self.cfg.attribution.percents)?;
                report.push_str(&m.to_key_values("attribution."));
            } else {
                log::warn!(
                    "attribution report has {} events, cause table {}; attribution metrics skipped",
                    rankings.len(),
                    table.causes.len()
                );
            }
        }
        fs::write(self.path(METRICS_FILE), &report)?;
        Ok(report)
    }

    /// Writes the synthetic bench and points the data paths at it.
    pub fn synth(&mut self) -> Result<()> {
        let dir = self.path("data");
        let bench = build_bench(&self.cfg.synth.bench())?;
        write_bench(&dir, &bench)?;
        let d = &mut self.cfg.data;
        d.train = Some(dir.join("train.csv"));
        d.val = Some(dir.join("val.csv"));
        d.test = Some(dir.join("test.csv"));
        d.labels = Some(dir.join("labels.csv"));
        d.causes = Some(dir.join("causes.csv"));
        d.header = true;
        Ok(())
    }

    /// Runs one stage, tagging errors with its name. `pipeline` chains
    /// discover, train, score, threshold, attribute (when events exist) and
    /// evaluate (when labels exist).
    pub fn run(&mut self, stage: Stage) -> Result<Option<String>> {
        let tag = |r: Result<()>| r.map_err(|e| e.in_stage(stage.name()));
        match stage {
            Stage::Discover => tag(self.discover().map(drop))?,
            Stage::Train => tag(self.train().map(drop))?,
            Stage::Score => tag(self.score().map(drop))?,
            Stage::Threshold => tag(self.threshold().map(drop))?,
            Stage::Attribute => tag(self.attribute().map(drop))?,
            Stage::Evaluate => return self.evaluate().map(Some).map_err(|e| e.in_stage(stage.name())),
            Stage::Synth => {
                tag(self.synth())?;
                self.cfg.save(self.path(CONFIG_FILE))?;
            }
            Stage::Pipeline => {
                self.cfg.save(self.path(CONFIG_FILE))?;
                for st in [Stage::Discover, Stage::Train, Stage::Score, Stage::Threshold] {
                    self.run(st)?;
                }
                let has_events = self.cfg.data.causes.is_some()
                    || ThresholdTrace::load(self.path(THRESHOLD_FILE))
                        .map(|t| t.decisions.iter().any(|&d| d))
                        .unwrap_or(false);
                if has_events {
                    self.run(Stage::Attribute)?;
                }
                if self.cfg.data.labels.is_some() {
                    return self.run(Stage::Evaluate);
                }
            }
        }
        Ok(None)
    }
}

/// Sensor orders per event from an attribution report.
pub fn read_rankings(path: impl AsRef<Path>) -> Result<Vec<Vec<usize>>> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CgtError::MissingArtifact {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    let mut rows: Vec<(usize, usize, usize)> = Vec::new();
    for (row, rec) in reader.records().enumerate() {
        let bad = |message: String| CgtError::Ingest {
            path: path.to_path_buf(),
            row: row + 1,
            column: 0,
            message,
        };
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let get = |k: usize| -> Result<usize> {
            rec.get(k)
                .and_then(|f| f.parse().ok())
                .ok_or_else(|| bad(format!("field {} is not an integer", k + 1)))
        };
        rows.push((get(0)?, get(3)?, get(4)?));
    }
    rows.sort();
    let mut out: Vec<Vec<usize>> = Vec::new();
    let mut current = None;
    for (event, _, sensor) in rows {
        if current != Some(event) {
            out.push(Vec::new());
            current = Some(event);
        }
        out.last_mut().expect("pushed above").push(sensor);
    }
    Ok(out)
}
