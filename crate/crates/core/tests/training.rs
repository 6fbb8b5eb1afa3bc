use std::collections::BTreeMap;

use cgt_core::graph::parent_masks;
use cgt_core::model::ModelConfig;
use cgt_core::synth::{generate, ScmSpec};
use cgt_core::train::{train_all, TrainConfig};
use cgt_core::data::{apply_minmax, fit_minmax};

#[test]
fn causal_loss_falls_on_an_ar1_target() {
    // x1 follows x0 at lag 1 and itself; x0 is white.
    let coefficients: BTreeMap<_, _> = [((0, 1, 1), 0.8), ((1, 1, 1), 0.5)].into_iter().collect();
    let spec = ScmSpec {
        channels: 2,
        max_lag: 2,
        coefficients,
        noise_std: vec![1.0, 0.3],
        len: 1200,
        seed: 2,
    };
    let raw = generate(&spec).unwrap().frame;
    let frame = apply_minmax(&raw, &fit_minmax(&raw)).unwrap();
    let model = ModelConfig {
        window: 6,
        max_lag: 2,
        channels: 2,
        d_model: 8,
        n_heads: 2,
        n_layers: 1,
        d_ff: 16,
        d_latent: 2,
        mc_samples: 2,
        ..ModelConfig::default()
    };
    let masks = parent_masks(&spec.graph().unwrap());
    let tc = TrainConfig { epochs: 5, ..TrainConfig::default() };
    let trained = train_all(&model, &tc, &frame, &masks[1..], 1).unwrap();
    let h = &trained[0].history;
    assert_eq!(h.len(), 5);
    assert!(h[4].causal_nll < h[0].causal_nll, "{} -> {}", h[0].causal_nll, h[4].causal_nll);
    assert!(h.iter().all(|l| l.skipped_batches == 0));
}
