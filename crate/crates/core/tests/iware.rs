use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use snaremap_core::griddata::PatrolDataset;
use snaremap_core::iware::{
    filter_dataset, optimize_weights_qualified, patrolled_rows, qualified_log_loss, select_thresholds,
    train_iware, IWareConfig, RiskQuery, WeightConfig,
};
use snaremap_core::learners::{BaggingConfig, Learner, LearnerKind, TrainMatrix};
use snaremap_core::synthpark::{generate_park, generate_truth, sample_dataset, TruthConfig};

fn dataset(seed: u64) -> PatrolDataset {
    let grid = Arc::new(generate_park(8, 8, 3, 2, seed).unwrap());
    let truth = generate_truth(&grid, &TruthConfig { intercept: 0.0, ..TruthConfig::default() }, seed);
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let effort: Vec<f64> = (0..4 * 64)
        .map(|_| if r.gen_bool(0.3) { 0.0 } else { r.gen_range(0.1..6.0) })
        .collect();
    sample_dataset(grid, &truth, 4, |t, c| effort[t * 64 + c], seed).unwrap()
}

fn small_trees() -> LearnerKind {
    LearnerKind::BaggedTrees(BaggingConfig { num_trees: 10, ..BaggingConfig::default() })
}

#[test]
fn single_threshold_equals_the_plain_learner() {
    let ds = dataset(1);
    let cfg = IWareConfig { num_thresholds: 1, learner: small_trees(), ..IWareConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let ens = train_iware(&ds, &cfg, &mut rng).unwrap();
    // The ensemble draws the member seed first; replay it for the plain learner.
    let seed: u64 = ChaCha8Rng::seed_from_u64(9).gen();
    let plain = Learner::train(&cfg.learner, &filter_dataset(&ds, 0.0).unwrap(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let ev = patrolled_rows(&ds);
    for (x, &c) in ev.features.iter().zip(&ev.efforts) {
        let (g, _) = ens.predict_raw(x, c).unwrap();
        assert!((g - plain.predict(x).unwrap().prob).abs() <= 1e-12);
    }
}

#[test]
fn training_is_deterministic() {
    let ds = dataset(2);
    let cfg = IWareConfig { num_thresholds: 4, learner: small_trees(), ..IWareConfig::default() };
    let a = train_iware(&ds, &cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let b = train_iware(&ds, &cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
}

/// Exhaustive simplex grid with the given resolution.
fn grid_minimum(preds: &[Vec<f64>], labels: &[bool], q: &[usize], steps: usize) -> f64 {
    let m = preds.len();
    let mut best = f64::INFINITY;
    let h = 1.0 / steps as f64;
    match m {
        1 => best = qualified_log_loss(&[1.0], preds, labels, q),
        2 => {
            for i in 0..=steps {
                let w = [i as f64 * h, 1.0 - i as f64 * h];
                best = best.min(qualified_log_loss(&w, preds, labels, q));
            }
        }
        _ => {
            for i in 0..=steps {
                for j in 0..=steps - i {
                    let w = [i as f64 * h, j as f64 * h, 1.0 - (i + j) as f64 * h];
                    best = best.min(qualified_log_loss(&w, preds, labels, q));
                }
            }
        }
    }
    best
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn optimised_weights_match_grid_search(seed in 0u64..10_000, m in 1usize..=3, qualify in any::<bool>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let n = 40;
        let labels: Vec<bool> = (0..n).map(|_| r.gen_bool(0.4)).collect();
        let preds: Vec<Vec<f64>> = (0..m)
            .map(|_| labels.iter().map(|&y| {
                let base: f64 = if y { 0.6 } else { 0.4 };
                (base + r.gen_range(-0.35..0.35)).clamp(0.01, 0.99)
            }).collect())
            .collect();
        let q: Vec<usize> = (0..n).map(|_| if qualify { r.gen_range(1..=m) } else { m }).collect();
        let cfg = WeightConfig::default();
        let w = optimize_weights_qualified(&preds, &labels, &q, &cfg).unwrap();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(w.iter().all(|&v| v >= 0.0));
        let found = qualified_log_loss(&w, &preds, &labels, &q);
        let grid = grid_minimum(&preds, &labels, &q, if m == 3 { 400 } else { 4000 });
        prop_assert!(found <= grid + 1e-6, "optimiser {} vs grid {}", found, grid);
    }

    #[test]
    fn filtering_keeps_every_positive(seed in 0u64..500, theta in 0.0f64..8.0) {
        let ds = dataset(seed);
        let all = ds.positive_count();
        let m = filter_dataset(&ds, theta);
        match m {
            Ok(m) => prop_assert_eq!(m.num_positives(), all),
            Err(_) => prop_assert_eq!(all, 0),
        }
    }

    #[test]
    fn prediction_is_constant_between_thresholds(seed in 0u64..200, a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let ds = dataset(seed);
        prop_assume!(ds.positive_count() > 0);
        let cfg = IWareConfig { num_thresholds: 4, learner: small_trees(), ..IWareConfig::default() };
        let ens = train_iware(&ds, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let th = ens.thresholds().as_slice().to_vec();
        let x = ds.design_row(1, 10);
        let mut edges = th.clone();
        edges.push(th[th.len() - 1] + 10.0);
        for k in 0..edges.len() - 1 {
            let (lo, hi) = (edges[k], edges[k + 1]);
            if hi <= lo {
                continue;
            }
            let c1 = lo + a * (hi - lo) * 0.999;
            let c2 = lo + b * (hi - lo) * 0.999;
            let q1 = ens.predict_effort_conditioned(&RiskQuery { features: x.clone(), effort: c1 }).unwrap();
            let q2 = ens.predict_effort_conditioned(&RiskQuery { features: x.clone(), effort: c2 }).unwrap();
            prop_assert_eq!(q1, q2);
            prop_assert_eq!(ens.thresholds().qualified(c1), ens.thresholds().qualified(lo));
        }
        let mut prev = 0;
        for c in [0.0, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0] {
            let q = ens.thresholds().qualified(c);
            prop_assert!(q >= prev);
            prev = q;
        }
        prop_assert!((ens.weights().iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn thresholds_start_at_zero_and_increase() {
    for seed in 0..20 {
        let th = select_thresholds(&dataset(seed), 10).unwrap();
        let t = th.as_slice();
        assert_eq!(t[0], 0.0);
        assert!(t.windows(2).all(|w| w[1] > w[0]));
    }
}

#[test]
fn higher_threshold_learners_see_cleaner_labels() {
    let ds = dataset(3);
    let th = select_thresholds(&ds, 5).unwrap();
    let rate = |m: &TrainMatrix| m.num_positives() as f64 / m.len() as f64;
    let rates: Vec<f64> = th.as_slice().iter().map(|&t| rate(&filter_dataset(&ds, t).unwrap())).collect();
    assert!(rates.last().unwrap() > rates.first().unwrap(), "{rates:?}");
}
