use cgt_core::attribution::{counterfactual_clamp, ClampContext};
use cgt_core::data::{apply_minmax, fit_minmax, SeriesFrame};
use cgt_core::graph::{parent_masks, CausalGraphPrior, LaggedEdge, ParentMask};
use cgt_core::model::{BlockParams, ModelConfig};
use cgt_core::scoring::{score_stream, Aggregation, ScoreSeries};
use cgt_core::synth::{generate, ScmSpec};
use cgt_core::train::{train_all, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn small() -> ModelConfig {
    ModelConfig {
        window: 6,
        max_lag: 2,
        channels: 5,
        d_model: 8,
        n_heads: 2,
        n_layers: 1,
        d_ff: 16,
        d_latent: 2,
        mc_samples: 2,
        ..ModelConfig::default()
    }
}

/// Bench edges without any edge out of sensor 4.
fn graph() -> CausalGraphPrior {
    let mut g = CausalGraphPrior::empty(5, 2);
    for (j, l, i) in [(0, 1, 1), (0, 2, 1), (1, 2, 3), (2, 2, 4), (3, 1, 3)] {
        g.insert(LaggedEdge::new(j, l, i)).unwrap();
    }
    g
}

struct Fixture {
    cfg: ModelConfig,
    blocks: Vec<BlockParams>,
    masks: Vec<ParentMask>,
    frame: SeriesFrame,
    series: ScoreSeries,
}

fn fixture(constant: Option<(usize, f64)>) -> Fixture {
    let cfg = small();
    let masks = parent_masks(&graph());
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let blocks: Vec<BlockParams> = masks
        .iter()
        .map(|m| {
            let mut p = BlockParams::new(&cfg, m, &mut rng);
            p.for_each_group_mut(|_, v| {
                for x in v.iter_mut() {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    *x += 0.3 * e;
                }
            });
            // Saturated gates are exactly zero, so non-parents are invisible.
            for (g, &bit) in p.gate_logits.iter_mut().zip(&m.bits) {
                if !bit {
                    *g = -800.0;
                }
            }
            p
        })
        .collect();
    let mut frame = generate(&ScmSpec::bench(300, 2)).unwrap().frame;
    if let Some((j, c)) = constant {
        frame.values.column_mut(j).fill(c);
    }
    let series = score_stream(&cfg, &blocks, &masks, &frame, 5).unwrap();
    Fixture { cfg, blocks, masks, frame, series }
}

fn ctx<'a>(f: &'a Fixture, medians: &'a [f64]) -> ClampContext<'a> {
    ClampContext {
        cfg: &f.cfg,
        blocks: &f.blocks,
        masks: &f.masks,
        frame: &f.frame,
        original: &f.series,
        medians,
        gamma: 0.3,
        rule: Aggregation::Mean,
        seed: 5,
        gate_threshold: 0.1,
    }
}

#[test]
fn clamping_to_the_current_value_is_a_no_op() {
    let f = fixture(Some((2, 0.25)));
    let medians = [0.0, 0.0, 0.25, 0.0, 0.0];
    let times: Vec<usize> = (100..160).collect();
    let d = ctx(&f, &medians).deltas(2, &times).unwrap();
    assert!(d.iter().all(|&v| v == 0.0), "{d:?}");
}

#[test]
fn sensor_without_children_has_zero_delta() {
    let f = fixture(None);
    let medians = [0.0; 5];
    let c = ctx(&f, &medians);
    assert!(c.affected_blocks(4).is_empty());
    let m = counterfactual_clamp(&c, &(50..90).collect::<Vec<_>>()).unwrap();
    assert!(m.column(4).iter().all(|&v| v == 0.0));
    assert!(m.column(0).iter().any(|&v| v != 0.0));
}

#[test]
fn unaffected_blocks_score_bitwise_equal() {
    let f = fixture(None);
    let medians = [0.0; 5];
    let affected = ctx(&f, &medians).affected_blocks(1);
    assert_eq!(affected, vec![3]);
    let mut clamped = f.frame.clone();
    clamped.values.column_mut(1).fill(medians[1]);
    let s = score_stream(&f.cfg, &f.blocks, &f.masks, &clamped, 5).unwrap();
    // Block 1 forecasts the overwritten column itself; clamping only edits inputs.
    for i in (0..5).filter(|&i| i != 1 && !affected.contains(&i)) {
        assert_eq!(s.causal.column(i), f.series.causal.column(i));
        assert_eq!(s.aux.column(i), f.series.aux.column(i));
    }
    assert_ne!(s.causal.column(3), f.series.causal.column(3));
}

#[test]
fn clamping_the_root_lowers_the_score() {
    let spec = ScmSpec::bench(2000, 6);
    let raw = generate(&spec).unwrap().frame;
    let train_raw = raw.slice_rows(0, 1500).unwrap();
    let scaler = fit_minmax(&train_raw);
    let train = apply_minmax(&train_raw, &scaler).unwrap();
    let cfg = small();
    let masks = parent_masks(&spec.graph().unwrap());
    let tc = TrainConfig { epochs: 6, ..TrainConfig::default() };
    let blocks: Vec<BlockParams> = train_all(&cfg, &tc, &train, &masks, 1)
        .unwrap()
        .into_iter()
        .map(|b| b.params)
        .collect();

    let mut test_raw = raw.slice_rows(1500, 2000).unwrap();
    let std0 = test_raw.values.column(0).std(0.0);
    test_raw.values.slice_mut(ndarray::s![200..220, 0]).mapv_inplace(|v| v + 8.0 * std0);
    let test = apply_minmax(&test_raw, &scaler).unwrap();
    let series = score_stream(&cfg, &blocks, &masks, &test, 1).unwrap();
    let medians: Vec<f64> = (0..5)
        .map(|j| {
            let mut c = train_raw.values.column(j).to_vec();
            c.sort_by(f64::total_cmp);
            scaler.scale_value(j, c[c.len() / 2])
        })
        .collect();
    let ctx = ClampContext {
        cfg: &cfg,
        blocks: &blocks,
        masks: &masks,
        frame: &test,
        original: &series,
        medians: &medians,
        gamma: tc.gamma,
        rule: Aggregation::Mean,
        seed: 1,
        gate_threshold: 0.1,
    };
    let d = ctx.deltas(0, &(202..222).collect::<Vec<_>>()).unwrap();
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    assert!(mean < 0.0, "mean delta {mean}");
}
