use std::path::PathBuf;
use std::process::ExitCode;

use cgt_core::config::PipelineConfig;
use cgt_core::pipeline::{Run, Stage};
use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "cgt", version, about = "Causally masked forecasting anomaly detector")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML configuration file.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,

    /// Artifact directory (overrides `run.out`).
    #[arg(short, long, global = true)]
    out: Option<PathBuf>,

    /// Edge list to use as the causal prior instead of discovery.
    #[arg(long, global = true)]
    graph: Option<PathBuf>,

    /// Worker threads for per-target training and scoring.
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// SPOT risk level.
    #[arg(long, global = true)]
    q: Option<f64>,

    /// SPOT initial quantile level.
    #[arg(long, global = true)]
    level: Option<f64>,

    /// Multiplier applied to the SPOT threshold before deciding.
    #[arg(long = "lambda-thr", global = true)]
    lambda_thr: Option<f64>,

    #[arg(long = "burn-frac", global = true)]
    burn_frac: Option<f64>,

    #[arg(long = "burn-min", global = true)]
    burn_min: Option<usize>,

    /// Extra `section.key=value` entries, applied after the file and
    /// environment.
    #[arg(short = 's', long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Fit the scaler and discover (or import) the causal graph.
    Discover,
    /// Train one forecasting block per target.
    Train,
    /// Calibrate the safety gate and score the test stream.
    Score,
    /// Run streaming peaks-over-threshold on the scores.
    Threshold,
    /// Detection and attribution metrics against labels.
    Evaluate,
    /// Rank root-cause sensors per event.
    Attribute,
    /// Write the synthetic benchmark into the artifact directory.
    Synth,
    /// Run every stage in order.
    Pipeline,
}

impl Command {
    fn stage(self) -> Stage {
        match self {
            Command::Discover => Stage::Discover,
            Command::Train => Stage::Train,
            Command::Score => Stage::Score,
            Command::Threshold => Stage::Threshold,
            Command::Evaluate => Stage::Evaluate,
            Command::Attribute => Stage::Attribute,
            Command::Synth => Stage::Synth,
            Command::Pipeline => Stage::Pipeline,
        }
    }
}

fn build_config(cli: &Cli) -> cgt_core::Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    cfg.apply_env()?;
    if let Some(o) = &cli.out {
        cfg.run.out = o.clone();
    }
    if let Some(g) = &cli.graph {
        cfg.graph.path = Some(g.clone());
    }
    if let Some(w) = cli.workers {
        cfg.run.workers = w;
    }
    if let Some(v) = cli.q {
        cfg.spot.q = v;
    }
    if let Some(v) = cli.level {
        cfg.spot.level = v;
    }
    if let Some(v) = cli.lambda_thr {
        cfg.spot.lambda_thr = v;
    }
    if let Some(v) = cli.burn_frac {
        cfg.spot.burn_frac = v;
    }
    if let Some(v) = cli.burn_min {
        cfg.spot.burn_min = v;
    }
    for entry in &cli.set {
        let (k, v) = entry.split_once('=').ok_or_else(|| {
            cgt_core::CgtError::Config(format!("--set expects KEY=VALUE, got {entry:?}"))
        })?;
        cfg.set(k.trim(), v.trim())?;
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let stage = cli.command.stage();
    let result = build_config(&cli)
        .and_then(Run::new)
        .and_then(|mut run| run.run(stage));
    match result {
        Ok(Some(report)) => {
            print!("{report}");
            ExitCode::SUCCESS
        }
        Ok(None) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{stage} failed: {e}");
            ExitCode::FAILURE
        }
    }
}
