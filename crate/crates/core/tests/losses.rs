mod common;

use common::*;
use hmsv::losses::*;
use hmsv_tensor::{gradient_check, Tape, Tensor};
use proptest::prelude::*;

fn scalar<F>(f: F) -> f64
where
    F: FnOnce(&Tape<f64>) -> hmsv::Result<hmsv_tensor::Var<f64>>,
{
    let t = Tape::no_grad();
    f(&t).unwrap().item()
}

fn cl(p: &Tensor<f64>, g: &Tensor<f64>, form: ClDiceForm) -> f64 {
    scalar(|t| cldice_loss(t, &t.constant(p.clone()), g, 5, 1e-6, form))
}

fn dl(p: &Tensor<f64>, g: &Tensor<f64>) -> f64 {
    scalar(|t| dice_loss(t, &t.constant(p.clone()), g, 1.0))
}

#[test]
fn dice_hand_example() {
    let p = Tensor::new(&[1, 1, 1, 4], vec![0.8, 0.6, 0.2, 0.1]).unwrap();
    let g = Tensor::new(&[1, 1, 1, 4], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
    assert!((dl(&p, &g) - (1.0 - 3.8 / 4.7)).abs() < 1e-12);
    assert!((dl(&p, &g) - 0.19149).abs() < 1e-5);
}

#[test]
fn dice_perfect_and_empty() {
    let mut r = rng(1);
    let g = binary(&[1, 1, 8, 8], 0.3, &mut r);
    assert_eq!(dl(&g, &g), 0.0);
    let ones = Tensor::ones(&[1, 1, 5, 5]);
    let v = dl(&Tensor::zeros(&[1, 1, 5, 5]), &ones);
    assert!((v - (1.0 - 1.0 / 26.0)).abs() < 1e-12);
}

#[test]
fn dice_rejects_shape_mismatch() {
    let t = Tape::<f64>::new();
    let p = t.constant(Tensor::zeros(&[1, 1, 4, 4]));
    assert!(dice_loss(&t, &p, &Tensor::zeros(&[1, 1, 4, 5]), 1.0).is_err());
}

#[test]
fn bce_examples() {
    let bce = |p: f64, g: f64, w: f64| {
        scalar(|t| {
            weighted_bce(
                t,
                &t.constant(Tensor::full(&[1, 1, 1, 1], p)),
                &Tensor::full(&[1, 1, 1, 1], g),
                &Tensor::full(&[1, 1, 1, 1], w),
                0.05,
            )
        })
    };
    for g in [0.0, 1.0] {
        assert!((bce(0.5, g, 1.0) - std::f64::consts::LN_2).abs() < 1e-12);
    }
    let expected = -(0.975f64 * 0.975f64.ln() + 0.025 * 0.025f64.ln());
    assert!((bce(0.975, 1.0, 1.0) - expected).abs() < 1e-12);
    assert!((bce(0.975, 1.0, 1.0) - 0.116907).abs() < 1e-6);
    assert!((bce(0.3, 1.0, 2.0) - 2.0 * bce(0.3, 1.0, 1.0)).abs() < 1e-12);
    assert!(bce(0.0, 1.0, 1.0).is_finite());
}

#[test]
fn skeleton_of_line_is_line() {
    let g = hline(9, 9, 4, 1, 7);
    let s = scalar_map(&g, 5);
    for (a, b) in s.iter().zip(g.data()) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!(scalar_map(&Tensor::zeros(&[1, 1, 9, 9]), 5)
        .iter()
        .all(|&v| v == 0.0));
}

fn scalar_map(m: &Tensor<f64>, iters: usize) -> Vec<f64> {
    let t = Tape::no_grad();
    soft_skeletonize(&t, &t.constant(m.clone()), iters)
        .unwrap()
        .data()
        .to_vec()
}

#[test]
fn skeleton_of_square_is_thinner() {
    let mut sq = Tensor::zeros(&[1, 1, 9, 9]);
    for r in 2..7 {
        for c in 2..7 {
            sq.data_mut()[r * 9 + c] = 1.0;
        }
    }
    let s = scalar_map(&sq, 5);
    let mass: f64 = s.iter().sum();
    assert!(mass > 0.0 && mass < 25.0);
    for (v, m) in s.iter().zip(sq.data()) {
        assert!(*v >= 0.0 && *v <= *m + 1e-12);
    }
}

#[test]
fn cldice_examples() {
    let g = hline(9, 11, 4, 1, 9);
    assert!(cl(&g, &g, ClDiceForm::Harmonic) <= 1e-6);
    assert!(cl(&Tensor::zeros(&[1, 1, 9, 11]), &g, ClDiceForm::Harmonic) > 0.999);
    let mut broken = g.clone();
    broken.data_mut()[4 * 11 + 5] = 0.0;
    assert!(cl(&broken, &g, ClDiceForm::Harmonic) > cl(&g, &g, ClDiceForm::Harmonic));
    assert!((cl(&g, &g, ClDiceForm::Product) + 1.0).abs() < 1e-9);
}

#[test]
fn composite_examples() {
    let mut r = rng(3);
    let g = binary(&[1, 1, 8, 8], 0.3, &mut r);
    let w = uniform(&[1, 1, 8, 8], 1.0, 3.0, &mut r);
    let cfg = LossConfig::default();
    let t = Tape::no_grad();
    let gv = t.constant(g.clone());
    let terms = composite_loss(&t, &gv, &g, &w, &cfg, false).unwrap();
    let bce = weighted_bce(&t, &gv, &g, &w, 0.05).unwrap().item();
    assert!((terms.total.item() - 0.3 * bce).abs() < 1e-9);

    let p = tie_free_probs(&[1, 1, 8, 8], &mut r);
    let pv = t.constant(p.clone());
    let dice_only = LossConfig {
        w_dice: 1.0,
        w_bce: 0.0,
        w_cldice: 0.0,
        ..LossConfig::default()
    };
    let d = composite_loss(&t, &pv, &g, &w, &dice_only, false)
        .unwrap()
        .total
        .item();
    assert_eq!(d, dice_loss(&t, &pv, &g, 1.0).unwrap().item());
}

#[test]
fn composite_recomposes_to_1e12() {
    let cfg = LossConfig::default();
    for seed in 0..10 {
        let mut r = rng(100 + seed);
        let p = tie_free_probs(&[1, 1, 8, 8], &mut r);
        let g = binary(&[1, 1, 8, 8], 0.3, &mut r);
        let w = uniform(&[1, 1, 8, 8], 1.0, 3.0, &mut r);
        let t = Tape::no_grad();
        let pv = t.constant(p.clone());
        let total = composite_loss(&t, &pv, &g, &w, &cfg, false)
            .unwrap()
            .total
            .item();
        let d = dice_loss(&t, &pv, &g, 1.0).unwrap().item();
        let b = weighted_bce(&t, &pv, &g, &w, 0.05).unwrap().item();
        let c = cldice_loss(&t, &pv, &g, 5, 1e-6, ClDiceForm::Harmonic)
            .unwrap()
            .item();
        assert!((total - (0.4 * d + 0.3 * b + 0.3 * c)).abs() < 1e-12);
    }
}

#[test]
fn mixup_targets_drop_centreline_term() {
    let w = composite_weights(&LossConfig::default(), true);
    assert_eq!(w[2], 0.0);
    assert!((w[0] + w[1] - 1.0).abs() < 1e-12);
    assert_eq!(
        composite_weights(&LossConfig::default(), false),
        [0.4, 0.3, 0.3]
    );
}

#[test]
fn downsampled_targets_stay_binary_unless_mixed() {
    let mut r = rng(4);
    let g = uniform(&[2, 1, 8, 8], 0.0, 1.0, &mut r);
    let d = downsample_target(&g, 4, &[false, true]).unwrap();
    assert!(d.data()[..16].iter().all(|&v| v == 0.0 || v == 1.0));
    assert!(d.data()[16..].iter().any(|&v| v != 0.0 && v != 1.0));
}

#[test]
fn deep_supervision_weights_combine_convexly() {
    let cfg = LossConfig::default();
    assert!((combine_heads([0.37; 4], &cfg) - 0.37).abs() < 1e-15);
    let fused_only = LossConfig {
        deep_supervision: [1.0, 0.0, 0.0, 0.0],
        ..cfg
    };
    assert_eq!(combine_heads([0.2, 9.0, 9.0, 9.0], &fused_only), 0.2);
}

#[test]
fn config_rejects_bad_weights() {
    let bad = LossConfig {
        w_dice: 0.5,
        ..LossConfig::default()
    };
    assert!(bad.validate().is_err());
    let zero_iters = LossConfig {
        skeleton_iters: 0,
        ..LossConfig::default()
    };
    assert!(zero_iters.validate().is_err());
}

#[test]
fn loss_gradients_pass_finite_differences() {
    let cfg = LossConfig::default();
    for seed in 0..4 {
        let mut r = rng(200 + seed);
        let n = 8 + seed as usize;
        let shape = [1, 1, n, n];
        let p = tie_free_probs(&shape, &mut r);
        let g = binary(&shape, 0.3, &mut r);
        let w = uniform(&shape, 1.0, 3.0, &mut r);
        let checks: Vec<(&str, f64)> = vec![
            (
                "dice",
                gradient_check(|t, x| Ok(dice_loss(t, x, &g, 1.0).unwrap()), &p, 1e-6).unwrap(),
            ),
            (
                "bce",
                gradient_check(
                    |t, x| Ok(weighted_bce(t, x, &g, &w, 0.05).unwrap()),
                    &p,
                    1e-6,
                )
                .unwrap(),
            ),
            (
                "skeleton",
                gradient_check(
                    |t, x| Ok(t.sum(&soft_skeletonize(t, x, 5).unwrap())),
                    &p,
                    1e-6,
                )
                .unwrap(),
            ),
            (
                "cldice",
                gradient_check(
                    |t, x| Ok(cldice_loss(t, x, &g, 5, 1e-6, ClDiceForm::Harmonic).unwrap()),
                    &p,
                    1e-6,
                )
                .unwrap(),
            ),
            (
                "composite",
                gradient_check(
                    |t, x| Ok(composite_loss(t, x, &g, &w, &cfg, false).unwrap().total),
                    &p,
                    1e-6,
                )
                .unwrap(),
            ),
        ];
        for (name, e) in checks {
            assert!(e < 1e-4, "{name} seed {seed}: {e}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn losses_stay_in_range(seed in 0u64..5000, density in 0.05f64..0.6) {
        let mut r = rng(seed);
        let p = uniform(&[1, 1, 8, 8], 0.0, 1.0, &mut r);
        let g = binary(&[1, 1, 8, 8], density, &mut r);
        let w = uniform(&[1, 1, 8, 8], 1.0, 3.0, &mut r);
        let t = Tape::no_grad();
        let pv = t.constant(p.clone());
        let d = dice_loss(&t, &pv, &g, 1.0).unwrap().item();
        let c = cldice_loss(&t, &pv, &g, 5, 1e-6, ClDiceForm::Harmonic).unwrap().item();
        let b = weighted_bce(&t, &pv, &g, &w, 0.05).unwrap().item();
        let total = composite_loss(&t, &pv, &g, &w, &LossConfig::default(), false).unwrap().total.item();
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert!((-1e-12..=1.0 + 1e-12).contains(&c));
        prop_assert!(b >= 0.0);
        prop_assert!(total >= 0.0);
    }

    #[test]
    fn skeleton_stays_in_unit_range(seed in 0u64..5000) {
        let mut r = rng(seed);
        let m = uniform(&[1, 1, 10, 10], 0.0, 1.0, &mut r);
        prop_assert!(scalar_map(&m, 5).iter().all(|&v| (-1e-12..=1.0 + 1e-12).contains(&v)));
    }

    #[test]
    fn cldice_symmetric_at_fixed_point(seed in 0u64..5000) {
        let mut r = rng(seed);
        let g = binary(&[1, 1, 8, 8], 0.3, &mut r);
        prop_assert_eq!(cl(&g, &g, ClDiceForm::Harmonic), cl(&g, &g, ClDiceForm::Harmonic));
    }
}
