//! RED recurrence: scan against the frame loop, invariants and adjoint.

use bsed::red::{backward, forward_scan, forward_sequential, BoundaryGrads, FramePosteriors};
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_post(rng: &mut ChaCha8Rng, c: usize, t: usize) -> FramePosteriors<f64> {
    let start = Array2::from_shape_fn((c, t), |_| rng.random::<f64>());
    let end = Array2::from_shape_fn((c, t), |_| rng.random::<f64>());
    FramePosteriors::new(start, end, 0.1).unwrap()
}

fn max_abs(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

proptest! {
    #[test]
    fn scan_matches_frame_loop(c in 1usize..4, t in 0usize..300, seed in any::<u64>(), prior in 0.0f64..=1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let post = random_post(&mut rng, c, t);
        let a = forward_sequential(&post, prior).unwrap();
        let b = forward_scan(&post, prior).unwrap();
        prop_assert!(max_abs(&a.presence, &b.presence) <= 1e-12);
        prop_assert!(max_abs(&a.onset, &b.onset) <= 1e-12);
        prop_assert!(max_abs(&a.offset, &b.offset) <= 1e-12);
    }

    #[test]
    fn outputs_are_probabilities_and_balance(c in 1usize..3, t in 1usize..200, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let post = random_post(&mut rng, c, t);
        let out = forward_scan(&post, 0.0).unwrap();
        for k in 0..c {
            let mut prev = 0.0;
            for f in 0..t {
                let (p, on, off) = (out.presence[[k, f]], out.onset[[k, f]], out.offset[[k, f]]);
                prop_assert!((-1e-12..=1.0 + 1e-12).contains(&p));
                prop_assert!(on >= -1e-12 && off >= -1e-12);
                // presence changes only through onsets and offsets
                prop_assert!((p - (prev + on - off)).abs() < 1e-12);
                prev = p;
            }
        }
    }
}

#[test]
fn switch_on_and_off_inputs() {
    let s = Array2::from_shape_vec((1, 5), vec![0.0, 1.0, 0.0, 0.0, 0.0]).unwrap();
    let q = Array2::from_shape_vec((1, 5), vec![0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
    let out = forward_scan(&FramePosteriors::<f64>::new(s, q, 0.1).unwrap(), 0.0).unwrap();
    assert_eq!(out.presence.row(0).to_vec(), vec![0.0, 1.0, 1.0, 0.0, 0.0]);
    assert_eq!(out.onset.row(0).to_vec(), vec![0.0, 1.0, 0.0, 0.0, 0.0]);
    assert_eq!(out.offset.row(0).to_vec(), vec![0.0, 0.0, 0.0, 1.0, 0.0]);
}

#[test]
fn constant_posteriors_reach_the_stationary_presence() {
    // x* = s / (s + q)
    let (s, q) = (0.3, 0.1);
    let post: FramePosteriors<f64> =
        FramePosteriors::new(Array2::from_elem((1, 400), s), Array2::from_elem((1, 400), q), 0.1).unwrap();
    let out = forward_scan(&post, 0.0).unwrap();
    assert!((out.presence[[0, 399]] - 0.75).abs() < 1e-12);
}

#[test]
fn f32_scan_matches_f64_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let post = random_post(&mut rng, 3, 5000);
    let reference = forward_sequential(&post, 0.0).unwrap();
    let p32 = FramePosteriors::new(post.start.mapv(|v| v as f32), post.end.mapv(|v| v as f32), 0.1).unwrap();
    let fast = forward_scan(&p32, 0.0).unwrap();
    let err = reference
        .presence
        .iter()
        .zip(&fast.presence)
        .map(|(a, &b)| (a - b as f64).abs())
        .fold(0.0, f64::max);
    assert!(err < 1e-5, "{err}");
}

#[test]
fn adjoint_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (c, t) = (2, 40);
    let post = random_post(&mut rng, c, t);
    let w: Vec<Array2<f64>> = (0..3).map(|_| Array2::from_shape_fn((c, t), |_| rng.random_range(-1.0..1.0))).collect();
    let loss = |p: &FramePosteriors<f64>, prior: f64| {
        let o = forward_sequential(p, prior).unwrap();
        (&o.presence * &w[0]).sum() + (&o.onset * &w[1]).sum() + (&o.offset * &w[2]).sum()
    };
    let prior = 0.3;
    let up = BoundaryGrads {
        presence: w[0].clone(),
        onset: w[1].clone(),
        offset: w[2].clone(),
    };
    let g = backward(&post, prior, &up).unwrap();
    let h = 1e-6;
    for k in 0..c {
        for f in (0..t).step_by(3) {
            for (which, grad) in [(0, &g.start), (1, &g.end)] {
                let mut a = post.clone();
                let mut b = post.clone();
                let (ma, mb) = if which == 0 { (&mut a.start, &mut b.start) } else { (&mut a.end, &mut b.end) };
                ma[[k, f]] += h;
                mb[[k, f]] -= h;
                let num = (loss(&a, prior) - loss(&b, prior)) / (2.0 * h);
                assert!((num - grad[[k, f]]).abs() < 1e-7, "{which} {k} {f}: {num} vs {}", grad[[k, f]]);
            }
        }
    }
    let num = (loss(&post, prior + h) - loss(&post, prior - h)) / (2.0 * h);
    assert!((num - g.prior).abs() < 1e-7);
}
