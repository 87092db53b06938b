mod common;

use common::rng;
use hmsv::config::RunConfig;
use hmsv::model::ModelConfig;
use hmsv::run::{new_trainer, synth_prepared};
use hmsv::train::*;
use proptest::prelude::*;

fn small_config() -> RunConfig {
    let mut cfg = RunConfig::toy();
    cfg.model = ModelConfig::uniform(32, &[4, 8], 16, 0.4);
    cfg.synth.params.size = 32;
    cfg.schedule.hem_start = 1;
    cfg
}

#[test]
fn lr_schedule_examples() {
    let cfg = ScheduleConfig::default();
    assert_eq!(lr_at(0.0, &cfg), 1e-3);
    assert!((lr_at(40.0 - 1e-9, &cfg) - 1e-6).abs() < 1e-9);
    assert!((lr_at(20.0, &cfg) - 5.005e-4).abs() < 1e-15);
    assert_eq!(lr_at(40.0, &cfg), 1e-3);
    assert_eq!(lr_at(120.0, &cfg), 1e-3);
    assert!((lr_at(80.0, &cfg) - 5.005e-4).abs() < 1e-15);
    assert!((lr_at(120.0 - 1e-9, &cfg) - 1e-6).abs() < 1e-9);
}

#[test]
fn schedule_validation() {
    let bad = ScheduleConfig {
        lr_min: 1e-2,
        ..ScheduleConfig::default()
    };
    assert!(bad.validate().is_err());
    assert!(ScheduleConfig::default().validate().is_ok());
}

#[test]
fn hem_examples() {
    let cfg = ScheduleConfig::default();
    let scores: Vec<f64> = (0..20).map(|i| (i * 7 % 20) as f64 / 20.0).collect();
    let early = hem_weights(&scores, 19, &cfg).unwrap();
    assert!(early.weights.iter().all(|&w| w == 1.0));
    assert!(!early.is_active());
    let t = hem_weights(&scores, 20, &cfg).unwrap();
    assert_eq!(t.weights.iter().filter(|&&w| w == 3.0).count(), 3);
    assert_eq!(t.hard.len(), 3);
    let mut top: Vec<usize> = (0..20).collect();
    top.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut expect = top[..3].to_vec();
    expect.sort_unstable();
    assert_eq!(t.hard, expect);
    assert!(hem_weights(&[], 25, &cfg).is_err());
}

#[test]
fn hem_ties_prefer_lower_index() {
    let cfg = ScheduleConfig::default();
    let t = hem_weights(&[0.5; 20], 20, &cfg).unwrap();
    assert_eq!(t.hard, vec![0, 1, 2]);
}

#[test]
fn hem_sampling_ratio() {
    let cfg = ScheduleConfig::default();
    let scores: Vec<f64> = (0..20).map(|i| i as f64 / 20.0).collect();
    let t = hem_weights(&scores, 20, &cfg).unwrap();
    let mut r = rng(5);
    let (mut hard, mut total) = (0usize, 0usize);
    for _ in 0..5000 {
        for i in epoch_order(&t, &mut r) {
            hard += t.hard.contains(&i) as usize;
            total += 1;
        }
    }
    let freq = hard as f64 / total as f64;
    assert_eq!(total, 100_000);
    assert!((freq / (9.0 / 26.0) - 1.0).abs() < 0.02, "{freq}");
}

#[test]
fn uniform_epochs_are_permutations() {
    let t = DifficultyTable::uniform(10);
    let mut o = epoch_order(&t, &mut rng(6));
    o.sort_unstable();
    assert_eq!(o, (0..10).collect::<Vec<_>>());
}

#[test]
fn early_stop_examples() {
    let rising: Vec<f64> = (0..100).map(|i| i as f64).collect();
    assert_eq!(
        early_stop(&rising, 30).unwrap(),
        StopDecision::Continue { best_epoch: 99 }
    );
    let mut h: Vec<f64> = (0..6).map(|i| i as f64).collect();
    h.extend(std::iter::repeat_n(5.0, 29));
    assert_eq!(h.len(), 35);
    assert_eq!(
        early_stop(&h, 30).unwrap(),
        StopDecision::Continue { best_epoch: 5 }
    );
    h.push(5.0);
    assert_eq!(
        early_stop(&h, 30).unwrap(),
        StopDecision::Stop { best_epoch: 5 }
    );
    assert_eq!(
        early_stop(&[0.1, 0.9, 0.9], 30).unwrap(),
        StopDecision::Continue { best_epoch: 1 }
    );
    assert!(early_stop(&[], 30).is_err());
}

#[test]
fn training_epochs_are_deterministic_and_clipped() {
    let cfg = small_config();
    let data = synth_prepared(&cfg, 0..6).unwrap();
    let run = || {
        let mut t = new_trainer(&cfg).unwrap();
        let a = t.train_epoch(&data).unwrap();
        let b = t.train_epoch(&data).unwrap();
        (t, a, b)
    };
    let (t1, a1, b1) = run();
    let (t2, a2, b2) = run();
    assert_eq!(a1, a2);
    assert_eq!(b1, b2);
    assert_eq!(t1.model.params, t2.model.params);
    assert_eq!(b1.hard.len(), 1);
    for s in a1.steps.iter().chain(&b1.steps) {
        let frac = s.epoch as f64 + ((s.step - 1) % 3) as f64 / 3.0;
        assert!((s.lr - lr_at(frac, &cfg.schedule)).abs() < 1e-12);
        assert!(s.clipped_norm <= cfg.schedule.clip_norm + 1e-9);
    }
    for st in [&a1, &b1] {
        assert!((st.fusion_weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn zero_learning_rate_freezes_parameters() {
    let mut cfg = small_config();
    cfg.schedule.lr_max = 0.0;
    cfg.schedule.lr_min = 0.0;
    let data = synth_prepared(&cfg, 0..4).unwrap();
    let mut t = new_trainer(&cfg).unwrap();
    let before = t.model.params.clone();
    t.train_epoch(&data).unwrap();
    assert_eq!(t.model.params, before);
}

#[test]
fn step_budget_truncates_epoch() {
    let mut cfg = small_config();
    cfg.schedule.max_steps = 2;
    let data = synth_prepared(&cfg, 0..8).unwrap();
    let mut t = new_trainer(&cfg).unwrap();
    let st = t.train_epoch(&data).unwrap();
    assert_eq!(st.steps.len(), 2);
    assert!(st.truncated);
    assert!(t.budget_exhausted());
}

#[test]
fn empty_training_set_rejected() {
    let cfg = small_config();
    let mut t = new_trainer(&cfg).unwrap();
    assert!(t.train_epoch(&[]).is_err());
}

proptest! {
    #[test]
    fn lr_within_bounds_and_restarts(epoch in 0.0f64..600.0) {
        let cfg = ScheduleConfig::default();
        let lr = lr_at(epoch, &cfg);
        prop_assert!(lr >= cfg.lr_min - 1e-18 && lr <= cfg.lr_max + 1e-18);
        for s in cycle_starts(&cfg, 600.0) {
            prop_assert_eq!(lr_at(s, &cfg), cfg.lr_max);
        }
    }

    #[test]
    fn hem_count_is_floor_with_minimum(n in 1usize..200, seed in 0u64..1000) {
        let mut r = rng(seed);
        let scores: Vec<f64> = (0..n).map(|_| rand::Rng::random::<f64>(&mut r)).collect();
        let cfg = ScheduleConfig::default();
        let t = hem_weights(&scores, 25, &cfg).unwrap();
        let k = ((0.15 * n as f64).floor() as usize).max(1);
        prop_assert_eq!(t.weights.iter().filter(|&&w| w == 3.0).count(), k);
        prop_assert!(t.weights.iter().all(|&w| w == 1.0 || w == 3.0));
    }
}
