//! Pipeline configuration as TOML.
//!
//! Every setting lives at `section.key`, either under a `[section]` table or
//! as a dotted key. Unknown keys are rejected. Any entry can be overridden
//! from the environment as `CGT_<SECTION>_<KEY>`, e.g. `CGT_TRAIN_EPOCHS=3`.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::attribution::{AttributionMethod, DEFAULT_GATE_THRESHOLD};
use crate::error::{CgtError, Result};
use crate::graph::DiscoveryConfig;
use crate::model::checkpoint::Dtype;
use crate::model::ModelConfig;
use crate::safety::SafetyConfig;
use crate::scoring::Aggregation;
use crate::synth::BenchConfig;
use crate::threshold::SpotConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct DataPaths {
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub causes: Option<PathBuf>,
    pub header: bool,
}

impl Default for DataPaths {
    fn default() -> Self {
        Self {
            train: None,
            val: None,
            test: None,
            labels: None,
            causes: None,
            header: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Artifact directory.
    pub out: PathBuf,
    pub workers: usize,
    /// Seed for scoring noise and safety permutations.
    pub seed: u64,
    pub aggregation: Aggregation,
    pub checkpoint_dtype: Dtype,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            out: PathBuf::from("artifacts"),
            workers: 1,
            seed: 0,
            aggregation: Aggregation::Mean,
            checkpoint_dtype: Dtype::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphConfig {
    /// Edge list to use instead of running discovery.
    pub path: Option<PathBuf>,
    pub alpha: f64,
    pub max_cond: usize,
}

impl Default for GraphConfig {
    fn default() -> Self {
        let d = DiscoveryConfig::default();
        Self {
            path: None,
            alpha: d.alpha,
            max_cond: d.max_cond,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttributionConfig {
    pub method: AttributionMethod,
    pub gate_threshold: f64,
    pub percents: Vec<u32>,
}

impl Default for AttributionConfig {
    fn default() -> Self {
        Self {
            method: AttributionMethod::Clamp,
            gate_threshold: DEFAULT_GATE_THRESHOLD,
            percents: vec![100, 150],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub len: usize,
    pub train: usize,
    pub val: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let b = BenchConfig::default();
        Self {
            len: b.len,
            train: b.train,
            val: b.val,
            seed: b.seed,
        }
    }
}

impl SynthConfig {
    pub fn bench(&self) -> BenchConfig {
        BenchConfig {
            len: self.len,
            train: self.train,
            val: self.val,
            seed: self.seed,
            ..BenchConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PipelineConfig {
    pub data: DataPaths,
    pub run: RunConfig,
    pub graph: GraphConfig,
    /// `channels` is taken from the data, not from the file.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub safety: SafetyConfig,
    pub spot: SpotConfig,
    pub attribution: AttributionConfig,
    pub synth: SynthConfig,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| CgtError::Config(format!("bad value {value:?} for {key}")))
}

fn parse_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

/// TOML value for a canonical entry string: numbers and booleans stay bare,
/// lists become arrays, everything else is a string.
fn typed(key: &str, v: String) -> toml::Value {
    if key == "attribution.percents" {
        return toml::Value::Array(
            v.split(',')
                .filter_map(|x| x.parse::<i64>().ok())
                .map(toml::Value::Integer)
                .collect(),
        );
    }
    if let Ok(i) = v.parse::<i64>() {
        toml::Value::Integer(i)
    } else if let Ok(b) = v.parse::<bool>() {
        toml::Value::Boolean(b)
    } else if let Some(f) = v.parse::<f64>().ok().filter(|f| f.is_finite()) {
        toml::Value::Float(f)
    } else {
        toml::Value::String(v)
    }
}

fn untyped(key: &str, v: toml::Value) -> Result<String> {
    Ok(match v {
        toml::Value::String(s) => s,
        toml::Value::Integer(i) => i.to_string(),
        toml::Value::Float(f) => f.to_string(),
        toml::Value::Boolean(b) => b.to_string(),
        toml::Value::Array(items) => items
            .into_iter()
            .map(|x| untyped(key, x))
            .collect::<Result<Vec<_>>>()?
            .join(","),
        other => {
            return Err(CgtError::Config(format!(
                "unsupported value {other} for {key}"
            )))
        }
    })
}

fn kv(key: &str, value: impl Display) -> (String, String) {
    (key.to_string(), value.to_string())
}

impl PipelineConfig {
    pub fn discovery(&self) -> DiscoveryConfig {
        DiscoveryConfig {
            max_lag: self.model.max_lag,
            alpha: self.graph.alpha,
            max_cond: self.graph.max_cond,
        }
    }

    /// Sets one `section.key` entry.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let (m, t, s, p) = (&mut self.model, &mut self.train, &mut self.safety, &mut self.spot);
        match key {
            "data.train" => self.data.train = parse_path(v),
            "data.val" => self.data.val = parse_path(v),
            "data.test" => self.data.test = parse_path(v),
            "data.labels" => self.data.labels = parse_path(v),
            "data.causes" => self.data.causes = parse_path(v),
            "data.header" => self.data.header = parse(key, v)?,
            "run.out" => self.run.out = PathBuf::from(v),
            "run.workers" => self.run.workers = parse(key, v)?,
            "run.seed" => self.run.seed = parse(key, v)?,
            "run.aggregation" => self.run.aggregation = parse(key, v)?,
            "run.checkpoint_dtype" => self.run.checkpoint_dtype = parse(key, v)?,
            "graph.path" => self.graph.path = parse_path(v),
            "graph.alpha" => self.graph.alpha = parse(key, v)?,
            "graph.max_cond" => self.graph.max_cond = parse(key, v)?,
            "model.window" => m.window = parse(key, v)?,
            "model.max_lag" => m.max_lag = parse(key, v)?,
            "model.d_model" => m.d_model = parse(key, v)?,
            "model.n_heads" => m.n_heads = parse(key, v)?,
            "model.n_layers" => m.n_layers = parse(key, v)?,
            "model.d_ff" => m.d_ff = parse(key, v)?,
            "model.d_latent" => m.d_latent = parse(key, v)?,
            "model.mc_samples" => m.mc_samples = parse(key, v)?,
            "model.logvar_lo" => m.logvar_lo = parse(key, v)?,
            "model.logvar_hi" => m.logvar_hi = parse(key, v)?,
            "model.positional_encoding" => m.positional_encoding = parse(key, v)?,
            "model.input_norm" => m.input_norm = parse(key, v)?,
            "train.epochs" => t.epochs = parse(key, v)?,
            "train.warmup_epochs" => t.warmup_epochs = parse(key, v)?,
            "train.gamma" => t.gamma = parse(key, v)?,
            "train.beta" => t.beta = parse(key, v)?,
            "train.lambda_res" => t.lambda_res = parse(key, v)?,
            "train.lambda_prior" => t.lambda_prior = parse(key, v)?,
            "train.lambda_other" => t.lambda_other = parse(key, v)?,
            "train.lambda_push" => t.lambda_push = parse(key, v)?,
            "train.lambda_margin" => t.lambda_margin = parse(key, v)?,
            "train.margin" => t.margin = parse(key, v)?,
            "train.lambda_group" => t.lambda_group = parse(key, v)?,
            "train.parent_bce_weight" => t.parent_bce_weight = parse(key, v)?,
            "train.learning_rate" => t.learning_rate = parse(key, v)?,
            "train.clip_norm" => t.clip_norm = parse(key, v)?,
            "train.batch_size" => t.batch_size = parse(key, v)?,
            "train.seed" => t.seed = parse(key, v)?,
            "safety.tau_rel" => s.tau_rel = parse(key, v)?,
            "safety.tau_alpha" => s.tau_alpha = parse(key, v)?,
            "safety.epsilon" => s.epsilon = parse(key, v)?,
            "safety.mode" => s.mode = parse(key, v)?,
            "safety.calib_frac" => s.calib_frac = parse(key, v)?,
            "safety.calib_min" => s.calib_min = parse(key, v)?,
            "spot.q" => p.q = parse(key, v)?,
            "spot.level" => p.level = parse(key, v)?,
            "spot.lambda_thr" => p.lambda_thr = parse(key, v)?,
            "spot.burn_frac" => p.burn_frac = parse(key, v)?,
            "spot.burn_min" => p.burn_min = parse(key, v)?,
            "attribution.method" => self.attribution.method = parse(key, v)?,
            "attribution.gate_threshold" => self.attribution.gate_threshold = parse(key, v)?,
            "attribution.percents" => {
                self.attribution.percents = v
                    .split(',')
                    .map(|x| parse(key, x.trim()))
                    .collect::<Result<_>>()?
            }
            "synth.len" => self.synth.len = parse(key, v)?,
            "synth.train" => self.synth.train = parse(key, v)?,
            "synth.val" => self.synth.val = parse(key, v)?,
            "synth.seed" => self.synth.seed = parse(key, v)?,
            _ => return Err(CgtError::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Every entry in canonical order; `from_text(to_text())` round-trips.
    pub fn entries(&self) -> Vec<(String, String)> {
        let (m, t, s, p) = (&self.model, &self.train, &self.safety, &self.spot);
        let percents: Vec<String> = self.attribution.percents.iter().map(u32::to_string).collect();
        vec![
            kv("data.train", show_path(&self.data.train)),
            kv("data.val", show_path(&self.data.val)),
            kv("data.test", show_path(&self.data.test)),
            kv("data.labels", show_path(&self.data.labels)),
            kv("data.causes", show_path(&self.data.causes)),
            kv("data.header", self.data.header),
            kv("run.out", self.run.out.display()),
            kv("run.workers", self.run.workers),
            kv("run.seed", self.run.seed),
            kv("run.aggregation", self.run.aggregation),
            kv("run.checkpoint_dtype", self.run.checkpoint_dtype.name()),
            kv("graph.path", show_path(&self.graph.path)),
            kv("graph.alpha", self.graph.alpha),
            kv("graph.max_cond", self.graph.max_cond),
            kv("model.window", m.window),
            kv("model.max_lag", m.max_lag),
            kv("model.d_model", m.d_model),
            kv("model.n_heads", m.n_heads),
            kv("model.n_layers", m.n_layers),
            kv("model.d_ff", m.d_ff),
            kv("model.d_latent", m.d_latent),
            kv("model.mc_samples", m.mc_samples),
            kv("model.logvar_lo", m.logvar_lo),
            kv("model.logvar_hi", m.logvar_hi),
            kv("model.positional_encoding", m.positional_encoding),
            kv("model.input_norm", m.input_norm),
            kv("train.epochs", t.epochs),
            kv("train.warmup_epochs", t.warmup_epochs),
            kv("train.gamma", t.gamma),
            kv("train.beta", t.beta),
            kv("train.lambda_res", t.lambda_res),
            kv("train.lambda_prior", t.lambda_prior),
            kv("train.lambda_other", t.lambda_other),
            kv("train.lambda_push", t.lambda_push),
            kv("train.lambda_margin", t.lambda_margin),
            kv("train.margin", t.margin),
            kv("train.lambda_group", t.lambda_group),
            kv("train.parent_bce_weight", t.parent_bce_weight),
            kv("train.learning_rate", t.learning_rate),
            kv("train.clip_norm", t.clip_norm),
            kv("train.batch_size", t.batch_size),
            kv("train.seed", t.seed),
            kv("safety.tau_rel", s.tau_rel),
            kv("safety.tau_alpha", s.tau_alpha),
            kv("safety.epsilon", s.epsilon),
            kv("safety.mode", s.mode),
            kv("safety.calib_frac", s.calib_frac),
            kv("safety.calib_min", s.calib_min),
            kv("spot.q", p.q),
            kv("spot.level", p.level),
            kv("spot.lambda_thr", p.lambda_thr),
            kv("spot.burn_frac", p.burn_frac),
            kv("spot.burn_min", p.burn_min),
            kv("attribution.method", self.attribution.method),
            kv("attribution.gate_threshold", self.attribution.gate_threshold),
            kv("attribution.percents", percents.join(",")),
            kv("synth.len", self.synth.len),
            kv("synth.train", self.synth.train),
            kv("synth.val", self.synth.val),
            kv("synth.seed", self.synth.seed),
        ]
    }

    pub fn to_text(&self) -> String {
        let mut root = toml::Table::new();
        for (key, value) in self.entries() {
            let (section, name) = key.split_once('.').expect("entries are section.key");
            let table = root
                .entry(section)
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            if let toml::Value::Table(t) = table {
                t.insert(name.to_string(), typed(&key, value));
            }
        }
        root.to_string()
    }

    /// Applies the entries of the TOML document `text` on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let root: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| CgtError::Config(e.to_string()))?;
        for (section, value) in root {
            let toml::Value::Table(table) = value else {
                return Err(CgtError::Config(format!(
                    "top-level key {section:?} must be a [section] table"
                )));
            };
            for (name, v) in table {
                let key = format!("{section}.{name}");
                self.set(&key, &untyped(&key, v)?)?;
            }
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| CgtError::MissingArtifact {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Self::from_text(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    /// Applies `CGT_<SECTION>_<KEY>` overrides from `lookup`.
    pub fn apply_overrides<F>(&mut self, lookup: F) -> Result<()>
    where
        F: Fn(&str) -> Option<String>,
    {
        for (key, _) in self.entries() {
            let var = format!("CGT_{}", key.replace('.', "_").to_uppercase());
            if let Some(v) = lookup(&var) {
                self.set(&key, v.trim())
                    .map_err(|e| CgtError::Config(format!("{var}: {e}")))?;
            }
        }
        Ok(())
    }

    pub fn apply_env(&mut self) -> Result<()> {
        self.apply_overrides(|k| std::env::var(k).ok())
    }

    /// Cross-field checks shared by every stage.
    pub fn validate(&self) -> Result<()> {
        let cfg = |e: CgtError| CgtError::Config(e.to_string());
        let mut model = self.model.clone();
        model.channels = model.channels.max(1);
        model.validate().map_err(cfg)?;
        self.train.validate().map_err(cfg)?;
        self.spot.validate().map_err(cfg)?;
        if self.run.workers == 0 {
            return Err(CgtError::Config("run.workers must be at least 1".into()));
        }
        if !(self.graph.alpha > 0.0 && self.graph.alpha < 1.0) {
            return Err(CgtError::Config(format!(
                "graph.alpha must be in (0, 1), got {}",
                self.graph.alpha
            )));
        }
        if self.attribution.percents.is_empty() {
            return Err(CgtError::Config("attribution.percents is empty".into()));
        }
        if self.synth.train + self.synth.val >= self.synth.len {
            return Err(CgtError::Config(format!(
                "synth.train + synth.val ({}) leaves no test split in synth.len {}",
                self.synth.train + self.synth.val,
                self.synth.len
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sections_and_dotted_keys() {
        let cfg = PipelineConfig::from_text(
            "# comment\nmodel.window = 12\n[train]\nepochs = 3 # inline\n[spot]\nq = 0.01\n[attribution]\npercents = [100, 200]\n",
        )
        .unwrap();
        assert_eq!(cfg.model.window, 12);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.spot.q, 0.01);
        assert_eq!(cfg.attribution.percents, vec![100, 200]);
    }

    #[test]
    fn unknown_key_and_bad_syntax_rejected() {
        let msg = PipelineConfig::from_text("\nmodel.widow = 3\n").unwrap_err().to_string();
        assert!(msg.contains("model.widow"), "{msg}");
        let msg = PipelineConfig::from_text("[model]\nwindow = \n").unwrap_err().to_string();
        assert!(msg.contains("line 2"), "{msg}");
        assert!(PipelineConfig::from_text("epochs = 3\n").is_err());
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = PipelineConfig::default();
        cfg.data.train = Some("a/train.csv".into());
        cfg.train.learning_rate = 1.25e-3;
        cfg.run.aggregation = Aggregation::TopK(2);
        let back = PipelineConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn env_overrides() {
        let mut cfg = PipelineConfig::default();
        cfg.apply_overrides(|k| (k == "CGT_TRAIN_EPOCHS").then(|| "4".to_string()))
            .unwrap();
        assert_eq!(cfg.train.epochs, 4);
        let err = cfg
            .apply_overrides(|k| (k == "CGT_SPOT_Q").then(|| "x".to_string()))
            .unwrap_err();
        assert!(err.to_string().contains("CGT_SPOT_Q"));
    }
}
