mod common;

use common::rng;
use hmsv::augment::*;
use hmsv::eval::{predict_image, Segmenter};
use hmsv::raster::Plane;
use hmsv_tensor::Tensor;
use proptest::prelude::*;
use rand::Rng;

fn random_plane(h: usize, w: usize, r: &mut impl Rng) -> Plane {
    Plane::new(h, w, (0..h * w).map(|_| r.random::<f64>()).collect()).unwrap()
}

fn random_sample(n: usize, seed: u64) -> Sample {
    let mut r = rng(seed);
    let mask = Plane::new(
        n,
        n,
        (0..n * n)
            .map(|_| (r.random::<f64>() < 0.2) as u8 as f64)
            .collect(),
    )
    .unwrap();
    Sample {
        image: (0..4).map(|_| random_plane(n, n, &mut r)).collect(),
        mask,
        weight: random_plane(n, n, &mut r).map(|v| 1.0 + 2.0 * v),
    }
}

#[test]
fn zero_probabilities_are_identity() {
    let s = random_sample(16, 1);
    let cfg = AugmentConfig::none();
    let mut r = rng(2);
    assert_eq!(spatial_augment(&s, &cfg, &mut r), s);
    assert_eq!(photometric_augment(&s.image, &cfg, &mut r), s.image);
}

#[test]
fn flips_are_involutions() {
    let p = random_plane(5, 7, &mut rng(3));
    assert_eq!(hflip(&hflip(&p)), p);
    assert_eq!(vflip(&vflip(&p)), p);
    assert_ne!(hflip(&p), p);
}

#[test]
fn photometric_examples() {
    let p = Plane::filled(3, 3, 0.9);
    assert!(brightness_contrast(&p, 0.3, 0.0)
        .data
        .iter()
        .all(|&v| v == 1.0));
    let q = random_plane(4, 4, &mut rng(4));
    assert_eq!(gamma(&q, 1.0), q);
    let g = gamma(&q, 1.2);
    for (a, b) in g.data.iter().zip(&q.data) {
        assert!((a - b.powf(1.2)).abs() < 1e-15);
    }
}

#[test]
fn mixup_examples() {
    let a = random_sample(8, 5);
    let b = random_sample(8, 6);
    assert_eq!(mixup(&a, &b, 1.0), a);
    let zero = Sample {
        image: vec![Plane::filled(4, 4, 0.0); 4],
        mask: Plane::filled(4, 4, 0.0),
        weight: Plane::filled(4, 4, 1.0),
    };
    let one = Sample {
        image: vec![Plane::filled(4, 4, 1.0); 4],
        mask: Plane::filled(4, 4, 1.0),
        weight: Plane::filled(4, 4, 3.0),
    };
    let m = mixup(&zero, &one, 0.5);
    assert!(m.image.iter().all(|p| p.data.iter().all(|&v| v == 0.5)));
    assert!(m.mask.data.iter().all(|&v| v == 0.5));
    assert!(m.weight.data.iter().all(|&v| v == 2.0));
}

#[test]
fn beta_sampler_mean() {
    let mut r = rng(7);
    let n = 100_000;
    let mean: f64 = (0..n).map(|_| sample_lambda(0.2, &mut r)).sum::<f64>() / n as f64;
    assert!((mean - 0.5).abs() < 0.01, "{mean}");
}

#[test]
fn masks_stay_binary_over_1000_trials() {
    let s = random_sample(24, 8);
    let cfg = AugmentConfig {
        p_hflip: 0.5,
        p_vflip: 0.5,
        p_rot90: 0.5,
        p_shift_scale_rotate: 1.0,
        p_elastic: 0.5,
        ..AugmentConfig::default()
    };
    let mut r = rng(9);
    for _ in 0..1000 {
        let out = spatial_augment(&s, &cfg, &mut r);
        assert!(out.mask.data.iter().all(|&v| v == 0.0 || v == 1.0));
    }
}

#[test]
fn photometric_leaves_targets_alone_and_stays_in_range() {
    let s = random_sample(16, 10);
    let cfg = AugmentConfig {
        p_brightness_contrast: 1.0,
        p_hsv: 1.0,
        p_clahe: 1.0,
        p_gamma: 1.0,
        p_noise: 1.0,
        p_blur: 1.0,
        ..AugmentConfig::default()
    };
    let mut r = rng(11);
    for _ in 0..20 {
        let img = photometric_augment(&s.image, &cfg, &mut r);
        assert_eq!(img.len(), 4);
        assert!(img
            .iter()
            .all(|p| p.data.iter().all(|&v| (0.0..=1.0).contains(&v))));
    }
}

#[test]
fn spatial_is_reproducible() {
    let s = random_sample(16, 12);
    let cfg = AugmentConfig::default();
    let a = spatial_augment(&s, &cfg, &mut rng(13));
    let b = spatial_augment(&s, &cfg, &mut rng(13));
    assert_eq!(a, b);
}

#[test]
fn d4_group_is_closed_with_inverses() {
    let all = D4::all();
    let set: std::collections::HashSet<D4> = all.iter().copied().collect();
    assert_eq!(set.len(), 8);
    for a in all {
        assert!(set.contains(&a.inverse()));
        assert_eq!(a.compose(a.inverse()), D4::IDENTITY);
        for b in all {
            assert!(set.contains(&a.compose(b)));
        }
    }
}

#[test]
fn d4_composition_matches_application() {
    let n = 5;
    let data: Vec<u32> = (0..(n * n) as u32).collect();
    for a in D4::all() {
        for b in D4::all() {
            let seq = a.apply_planes(&b.apply_planes(&data, n), n);
            assert_eq!(seq, a.compose(b).apply_planes(&data, n));
        }
        assert_eq!(a.inverse().apply_planes(&a.apply_planes(&data, n), n), data);
    }
}

#[test]
fn tta_fold_of_constant_predictions_is_identity() {
    let x = Tensor::from_fn(&[1, 1, 6, 6], |i| i as f64);
    let preds: Vec<Tensor<f64>> = tta_expand(&x).unwrap();
    let folded = tta_fold(&preds).unwrap();
    assert_eq!(folded, x);
    assert!(tta_expand(&Tensor::<f64>::zeros(&[1, 1, 4, 5])).is_err());
}

/// 3x3 box sum of channel 0 with zero padding, which commutes with D4.
struct BoxModel;

impl Segmenter for BoxModel {
    fn logits(&mut self, x: &Tensor<f32>) -> hmsv::Result<Tensor<f32>> {
        let n = x.shape()[2];
        let d = x.data();
        Ok(Tensor::from_fn(&[1, 1, n, n], |i| {
            let (r, c) = ((i / n) as isize, (i % n) as isize);
            let mut s = 0.0;
            for dr in -1..=1 {
                for dc in -1..=1 {
                    let (rr, cc) = (r + dr, c + dc);
                    if rr >= 0 && cc >= 0 && rr < n as isize && cc < n as isize {
                        s += d[rr as usize * n + cc as usize];
                    }
                }
            }
            s - 4.0
        }))
    }
}

#[test]
fn tta_with_equivariant_model_matches_single_pass() {
    let n = 9;
    let x = Tensor::from_fn(&[4, n, n], |i| {
        let (r, c) = (((i % (n * n)) / n) as i32 - 4, (i % n) as i32 - 4);
        ((r * r + c * c) % 5) as f32 / 4.0
    });
    let single = predict_image(&mut BoxModel, &x, false).unwrap();
    let tta = predict_image(&mut BoxModel, &x, true).unwrap();
    for (a, b) in single.prob.iter().zip(&tta.prob) {
        assert!((a - b).abs() < 1e-12);
    }
    assert_eq!(single.mask, tta.mask);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn d4_inverse_is_bitwise(n in 1usize..9, seed in 0u64..1000) {
        let mut r = rng(seed);
        let x = Tensor::from_fn(&[2, 1, n, n], |_| r.random::<f32>());
        for e in D4::all() {
            prop_assert_eq!(e.inverse().apply(&e.apply(&x).unwrap()).unwrap(), x.clone());
        }
    }

    #[test]
    fn spatial_masks_binary(seed in 0u64..10_000) {
        let s = random_sample(12, seed);
        let out = spatial_augment(&s, &AugmentConfig::default(), &mut rng(seed + 1));
        prop_assert!(out.mask.data.iter().all(|&v| v == 0.0 || v == 1.0));
    }
}
