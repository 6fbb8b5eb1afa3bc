use cgt_core::attribution::{baseline_stats, zscores};
use cgt_core::metrics::{auroc, detection_metrics, hit_rate, ndcg};
use cgt_core::safety::sensitivity_ratio;
use cgt_core::scoring::ScoreSeries;
use ndarray::Array2;
use proptest::prelude::*;

fn decisions_and_labels() -> impl Strategy<Value = (Vec<bool>, Vec<bool>)> {
    (1usize..60).prop_flat_map(|t| (prop::collection::vec(any::<bool>(), t), prop::collection::vec(any::<bool>(), t)))
}

fn series(t: usize, d: usize, values: &[f64]) -> ScoreSeries {
    ScoreSeries {
        timestamps: (0..t).collect(),
        causal: Array2::from_shape_vec((t, d), values[..t * d].to_vec()).unwrap(),
        aux: Array2::from_shape_vec((t, d), values[t * d..2 * t * d].to_vec()).unwrap(),
    }
}

proptest! {
    #[test]
    fn point_adjust_never_lowers_recall_or_f1((pred, labels) in decisions_and_labels()) {
        let raw = detection_metrics(&pred, &labels, false).unwrap();
        let adj = detection_metrics(&pred, &labels, true).unwrap();
        prop_assert!(adj.recall >= raw.recall);
        prop_assert!(adj.f1 >= raw.f1 - 1e-12);
    }

    #[test]
    fn auroc_is_invariant_to_monotone_maps(
        raw in prop::collection::vec((0u32..50, any::<bool>()), 2..60),
        a in 0.1f64..10.0,
        b in -5.0f64..5.0,
    ) {
        let labels: Vec<bool> = raw.iter().map(|r| r.1).collect();
        prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
        let s: Vec<f64> = raw.iter().map(|r| r.0 as f64).collect();
        let affine: Vec<f64> = s.iter().map(|x| a * x + b).collect();
        let cubed: Vec<f64> = s.iter().map(|x| (x - 20.0).powi(3)).collect();
        let base = auroc(&s, &labels).unwrap();
        prop_assert!((auroc(&affine, &labels).unwrap() - base).abs() < 1e-12);
        prop_assert!((auroc(&cubed, &labels).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn ranking_metrics_grow_with_percent(
        ranking in Just((0..8).collect::<Vec<usize>>()).prop_shuffle(),
        gt in prop::collection::btree_set(0usize..8, 1..5),
    ) {
        let gt: Vec<usize> = gt.into_iter().collect();
        let mut last = (0.0, 0.0);
        for p in [50u32, 100, 150, 200, 300] {
            let cur = (hit_rate(&ranking, &gt, p), ndcg(&ranking, &gt, p));
            prop_assert!(cur.0 >= last.0 && cur.1 >= last.1 - 1e-15);
            last = cur;
        }
    }

    #[test]
    fn zscores_are_affine_invariant(
        values in prop::collection::vec(-3.0f64..3.0, 2 * 12 * 3),
        a in 0.1f64..10.0,
        b in -5.0f64..5.0,
        gamma in 0.0f64..1.0,
    ) {
        let s = series(12, 3, &values);
        let moved: Vec<f64> = values.iter().map(|v| a * v + b).collect();
        let m = series(12, 3, &moved);
        let times: Vec<usize> = (0..12).collect();
        let z = zscores(&s, gamma, &baseline_stats(&s, gamma).unwrap(), &times).unwrap();
        let zm = zscores(&m, gamma, &baseline_stats(&m, gamma).unwrap(), &times).unwrap();
        for (x, y) in z.iter().zip(zm.iter()) {
            prop_assert!((x - y).abs() < 1e-6 * (1.0 + x.abs()), "{} vs {}", x, y);
        }
    }

    #[test]
    fn sensitivity_ratio_is_scale_invariant(
        pairs in prop::collection::vec((0.1f64..5.0, 0.1f64..5.0), 1..40),
        c in 0.01f64..100.0,
    ) {
        let mix: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let perm: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let r = sensitivity_ratio(&mix, &perm, 0.0);
        let scaled = sensitivity_ratio(
            &mix.iter().map(|v| c * v).collect::<Vec<_>>(),
            &perm.iter().map(|v| c * v).collect::<Vec<_>>(),
            0.0,
        );
        prop_assert!((r - scaled).abs() <= 1e-12 * (1.0 + r));
    }
}
