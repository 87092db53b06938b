mod common;

use common::{hline, rng};
use hmsv::synth::*;
use proptest::prelude::*;

fn sample(seed: u64) -> SynthSample {
    generate(&SynthConfig::default(), &mut rng(seed))
}

#[test]
fn same_seed_same_sample() {
    assert_eq!(sample(3), sample(3));
    assert_ne!(sample(3).mask, sample(4).mask);
}

#[test]
fn vessel_fraction_in_range() {
    for seed in 0..100 {
        let f = sample(seed).vessel_fraction();
        assert!((0.03..=0.20).contains(&f), "seed {seed}: {f}");
    }
}

#[test]
fn leaves_are_one_pixel_wide() {
    let cfg = SynthConfig::default();
    for seed in 0..20 {
        let s = sample(seed);
        let leaves: Vec<_> = s.segments.iter().filter(|g| g.leaf).collect();
        assert!(!leaves.is_empty());
        for seg in leaves {
            assert_eq!(seg.width, 1);
            let mut per_step = std::collections::HashMap::new();
            for (r, c, _) in render_segment(seg, cfg.size) {
                let major = match seg.axis {
                    Axis::Horizontal => c,
                    Axis::Vertical => r,
                };
                *per_step.entry(major).or_insert(0usize) += 1;
            }
            if let Some(&run) = per_step.values().max() {
                assert_eq!(run, 1);
            }
        }
    }
}

#[test]
fn mask_equals_stroke_support() {
    let s = sample(5);
    let n = s.image.height;
    let mut m = vec![0u8; n * n];
    for seg in &s.segments {
        for (r, c, _) in render_segment(seg, n) {
            m[r * n + c] = 1;
        }
    }
    assert_eq!(m, s.mask);
}

#[test]
fn breaks_examples() {
    let (h, w) = (9, 11);
    let g: Vec<u8> = hline(h, w, 4, 1, 9)
        .data()
        .iter()
        .map(|&v| v as u8)
        .collect();
    assert_eq!(skeleton_breaks(&g, &g, h, w), 0);
    let mut pred = g.clone();
    pred[4 * w + 5] = 0;
    assert_eq!(skeleton_breaks(&pred, &g, h, w), 1);
    assert_eq!(skeleton_breaks(&vec![0; h * w], &g, h, w), 0);
    assert_eq!(skeleton_breaks(&g, &vec![0; h * w], h, w), 0);
}

#[test]
fn component_counts() {
    let m = [1, 0, 0, 0, 1, 0, 0, 0, 1];
    assert_eq!(count_components8(&m, 3, 3), 1);
    let m = [1, 0, 1, 0, 0, 0, 1, 0, 1];
    assert_eq!(count_components8(&m, 3, 3), 4);
}

#[test]
fn thinning_synth_masks() {
    for seed in 0..20 {
        let s = sample(seed);
        let n = s.image.height;
        let sk = thin(&s.mask, n, n);
        assert!(no_square(&sk, n, n));
        assert!(sk.iter().zip(&s.mask).all(|(a, b)| a <= b));
        assert_eq!(skeleton_breaks(&s.mask, &s.mask, n, n), 0);
    }
}

fn no_square(m: &[u8], h: usize, w: usize) -> bool {
    (0..h - 1).all(|y| {
        (0..w - 1).all(|x| {
            m[y * w + x] & m[y * w + x + 1] & m[(y + 1) * w + x] & m[(y + 1) * w + x + 1] == 0
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn thin_has_no_square_on_strokes(rects in proptest::collection::vec((0usize..20, 0usize..20, 1usize..5, 1usize..12, any::<bool>()), 1..6)) {
        let n = 24;
        let mut mask = vec![0u8; n * n];
        for (y, x, thick, len, vertical) in rects {
            let (hh, ww) = if vertical { (len, thick) } else { (thick, len) };
            for r in y..(y + hh).min(n) {
                for c in x..(x + ww).min(n) {
                    mask[r * n + c] = 1;
                }
            }
        }
        let sk = thin(&mask, n, n);
        prop_assert!(no_square(&sk, n, n));
    }

    #[test]
    fn thin_synth_has_no_square(seed in 0u64..100_000) {
        let s = sample(seed);
        let n = s.image.height;
        prop_assert!(no_square(&thin(&s.mask, n, n), n, n));
    }

    #[test]
    fn breaks_nonnegative_and_zero_on_perfect(
        g in proptest::collection::vec(0u8..=1, 12 * 12),
        p in proptest::collection::vec(0u8..=1, 12 * 12),
    ) {
        prop_assert_eq!(skeleton_breaks(&g, &g, 12, 12), 0);
        let _ = skeleton_breaks(&p, &g, 12, 12);
    }
}
