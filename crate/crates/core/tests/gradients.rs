use cgt_core::data::TargetBatch;
use cgt_core::graph::ParentMask;
use cgt_core::model::layers::Params;
use cgt_core::model::{BlockParams, InputNorm, ModelConfig, PositionalEncoding};
use cgt_core::train::{normal_noise, objective, ObjectiveWeights, TrainConfig};
use ndarray::{Array1, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn tiny(input_norm: InputNorm, pe: PositionalEncoding) -> ModelConfig {
    ModelConfig {
        window: 4,
        max_lag: 2,
        channels: 3,
        d_model: 8,
        n_heads: 2,
        n_layers: 2,
        d_ff: 16,
        d_latent: 2,
        mc_samples: 2,
        input_norm,
        positional_encoding: pe,
        ..ModelConfig::default()
    }
}

fn jitter(p: &mut BlockParams, rng: &mut ChaCha8Rng, scale: f64) {
    p.visit_mut("", &mut |_, v| {
        for x in v.iter_mut() {
            let e: f64 = StandardNormal.sample(rng);
            *x += scale * e;
        }
    });
}

fn set_coord(p: &mut BlockParams, idx: usize, value: f64) {
    let mut k = 0;
    p.visit_mut("", &mut |_, v| {
        if idx >= k && idx < k + v.len() {
            v[idx - k] = value;
        }
        k += v.len();
    });
}

fn check(cfg: ModelConfig) {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mask = ParentMask { target: 1, bits: vec![true, false, true, true, false, false] };
    let mut params = BlockParams::new(&cfg, &mask, &mut rng);
    jitter(&mut params, &mut rng, 0.3);
    let b = 5;
    let batch = TargetBatch {
        target: 1,
        inputs: Array3::from_shape_simple_fn((b, 4, 6), || StandardNormal.sample(&mut rng)),
        targets: Array1::from_shape_simple_fn(b, || StandardNormal.sample(&mut rng)),
        timestamps: (0..b).collect(),
    };
    let eps = normal_noise(&mut rng, b, 2);
    let tc = TrainConfig::default();
    let weights = ObjectiveWeights { causal: 0.7, aux: 0.3, kl: 0.4, residual: 0.05, gate: true };
    let base = objective(&cfg, &tc, weights, &params, &batch, &mask, &eps, None, true).unwrap();
    let grad = base.grad.unwrap().flatten();
    let flat = params.flatten();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for i in 0..flat.len() {
        let eval = |v: f64| {
            let mut p = params.clone();
            set_coord(&mut p, i, v);
            objective(&cfg, &tc, weights, &p, &batch, &mask, &eps, Some(&base.detached), false)
                .unwrap()
                .loss
                .total
        };
        let fd = (eval(flat[i] + h) - eval(flat[i] - h)) / (2.0 * h);
        let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-6);
        worst = worst.max(rel);
        assert!(rel <= 1e-4, "coordinate {i}: analytic {} vs numeric {fd}", grad[i]);
    }
    eprintln!("worst relative error {worst:e} over {} coordinates", flat.len());
}

#[test]
fn full_objective_gradient_matches_central_differences() {
    check(tiny(InputNorm::None, PositionalEncoding::None));
}

#[test]
fn gradient_with_input_norm_and_positions() {
    check(tiny(InputNorm::Layer, PositionalEncoding::Sinusoidal));
}
