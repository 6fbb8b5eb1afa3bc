use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cgt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cgt"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY: &str = "\
[model]
window = 4
max_lag = 2
d_model = 8
n_heads = 2
n_layers = 1
d_ff = 16
d_latent = 2
mc_samples = 2

[train]
epochs = 1

[synth]
len = 2400
train = 800
val = 200
";

fn synth(dir: &Path) {
    let conf = dir.join("tiny.conf");
    fs::write(&conf, TINY).unwrap();
    let out = dir.join("run");
    let o = cgt(&["synth", "-c", conf.to_str().unwrap(), "-o", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn synth_then_pipeline_writes_metrics() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let run = dir.path().join("run");
    let conf = run.join("config.txt");
    let o = cgt(&["pipeline", "-c", conf.to_str().unwrap(), "--workers", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("adjusted.f1="), "{stdout}");
    assert!(stdout.contains("auroc="));
    for f in ["graph.csv", "scores.csv", "threshold.csv", "attribution.csv", "metrics.txt", "safety.txt"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
}

#[test]
fn score_without_checkpoint_fails_with_named_error() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let conf = dir.path().join("run/config.txt");
    let o = cgt(&["score", "-c", conf.to_str().unwrap()]);
    assert!(!o.status.success());
    let err = stderr(&o);
    assert!(err.contains("score failed") && err.contains("checkpoint") && err.contains("train"), "{err}");
}

#[test]
fn evaluate_rejects_mismatched_labels() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let run = dir.path().join("run");
    let conf = run.join("config.txt");
    let c = conf.to_str().unwrap();
    for stage in ["discover", "train", "score", "threshold"] {
        let o = cgt(&[stage, "-c", c]);
        assert!(o.status.success(), "{stage}: {}", stderr(&o));
    }
    let short = dir.path().join("short_labels.csv");
    fs::write(&short, "label\n0\n1\n0\n").unwrap();
    let o = cgt(&["evaluate", "-c", c, "--set", &format!("data.labels={}", short.display())]);
    assert!(!o.status.success());
    let err = stderr(&o);
    assert!(err.contains("evaluate failed") && err.contains("3 labels"), "{err}");
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("bad.conf");
    fs::write(&conf, "[model]\nwindow = 4\nwidth = 9\n").unwrap();
    let o = cgt(&["discover", "-c", conf.to_str().unwrap()]);
    assert!(!o.status.success());
    let err = stderr(&o);
    assert!(err.contains("model.width"), "{err}");

    let o = cgt(&["discover", "--set", "spot.qq=0.1"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("spot.qq"));
}
