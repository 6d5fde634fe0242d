//! Loss values against closed forms and tape gradients against differences.

use bsed::losses::{
    derive_frame_targets, focal_loss, focal_term, interval_iou_term, iou_loss, presence_loss, total_loss, FocalOp,
    IouOp, LossConfig, LossParts,
};
use bsed::Event;
use ndarray::Array2;
use nnkit::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-7;

#[test]
fn focal_at_one_half() {
    let (v, _) = focal_term(0.5, 1.0, 2.0, EPS);
    assert!((v - 0.25 * std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn alpha_zero_is_binary_cross_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let p = Array2::from_shape_fn((3, 50), |_| rng.random_range(0.01..0.99));
    let y = Array2::from_shape_fn((3, 50), |_| f64::from(rng.random_bool(0.3)));
    let bce: f64 = p
        .iter()
        .zip(&y)
        .map(|(&p, &y): (&f64, &f64)| -(y * p.ln() + (1.0 - y) * (1.0 - p).ln()))
        .sum::<f64>()
        / 150.0;
    assert!((focal_loss(&p, &y, 0.0, EPS).unwrap() - bce).abs() < 1e-12);
}

#[test]
fn focal_down_weights_easy_examples() {
    for alpha in [0.5, 1.0, 2.0, 4.0] {
        let easy = focal_term(0.9, 1.0, alpha, EPS).0;
        let bce = -(0.9f64).ln();
        assert!((easy - 0.1f64.powf(alpha) * bce).abs() < 1e-12);
        assert!(focal_term(0.1, 0.0, alpha, EPS).0 < bce + 1e-15);
    }
}

#[test]
fn focal_derivative_matches_difference() {
    for &(p, y) in &[(0.3, 1.0), (0.7, 0.0), (0.5, 1.0), (0.02, 0.0)] {
        let h = 1e-6;
        let num = (focal_term(p + h, y, 2.0, EPS).0 - focal_term(p - h, y, 2.0, EPS).0) / (2.0 * h);
        assert!((num - focal_term(p, y, 2.0, EPS).1).abs() < 1e-6);
    }
}

#[test]
fn iou_term_example() {
    let targets = derive_frame_targets(&[Event::truth(0, 0.0, 4.0).unwrap()], 1, 4, 1.0).unwrap();
    // one frame with d_on = 1, d_off = 3 is enough for the arithmetic
    let (v, _, _) = interval_iou_term(1.0, 3.0, 2.0, 2.0);
    assert!((v / 4.0 - 0.1).abs() < 1e-12);
    let perfect = iou_loss(&targets.d_on, &targets.d_off, &targets).unwrap();
    assert_eq!(perfect.value, 0.0);
}

#[test]
fn total_loss_example() {
    let parts = LossParts {
        presence: 0.1,
        onset: 0.01,
        offset: 0.02,
        iou: 0.3,
    };
    assert!((total_loss(&parts, &LossConfig::default()) - 3.4).abs() < 1e-12);
}

#[test]
fn presence_loss_of_exact_targets_is_tiny() {
    let t = derive_frame_targets(&[Event::truth(1, 0.3, 0.9).unwrap()], 2, 10, 0.1).unwrap();
    assert!(presence_loss(&t.presence, &t, EPS).unwrap() < 1e-6);
}

#[test]
fn targets_rasterise_boundaries() {
    let t = derive_frame_targets(&[Event::truth(0, 0.25, 0.61).unwrap()], 1, 10, 0.1).unwrap();
    let on: Vec<usize> = (0..10).filter(|&f| t.onset[[0, f]] == 1.0).collect();
    let off: Vec<usize> = (0..10).filter(|&f| t.offset[[0, f]] == 1.0).collect();
    let pres: Vec<usize> = (0..10).filter(|&f| t.presence[[0, f]] == 1.0).collect();
    assert_eq!((on, off, pres), (vec![2], vec![6], vec![2, 3, 4, 5, 6]));
    for f in 2..=6 {
        assert!((t.d_on[[0, f]] + t.d_off[[0, f]] - 0.36).abs() < 1e-12);
    }
}

#[test]
fn focal_op_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let labels = Array2::from_shape_fn((2, 8), |_| f64::from(rng.random_bool(0.4)));
    let p: Vec<f64> = (0..16).map(|_| rng.random_range(0.05..0.95)).collect();
    let eval = |p: &[f64]| {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::new(vec![2, 8], p.to_vec()).unwrap()).unwrap();
        let l = tape.custom(&[x], Box::new(FocalOp::new(&labels, 2.0, EPS))).unwrap();
        (tape, x, l)
    };
    let (tape, x, l) = eval(&p);
    let g = tape.backward(l).unwrap();
    let gx = g.get(x).unwrap().data().to_vec();
    for i in 0..16 {
        let h = 1e-6;
        let mut a = p.clone();
        let mut b = p.clone();
        a[i] += h;
        b[i] -= h;
        let f = |v: &[f64]| {
            let (t, _, l) = eval(v);
            t.value(l).item().unwrap()
        };
        assert!(((f(&a) - f(&b)) / (2.0 * h) - gx[i]).abs() < 1e-7);
    }
}

#[test]
fn iou_op_matches_reference_and_gradient() {
    let events = [Event::truth(0, 0.1, 0.75).unwrap(), Event::truth(1, 0.3, 0.5).unwrap()];
    let t = derive_frame_targets(&events, 2, 10, 0.1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let d: Vec<f64> = (0..40).map(|_| rng.random_range(0.01..0.8)).collect();
    let d_on = Array2::from_shape_fn((2, 10), |(c, f)| d[f * 4 + 2 * c]);
    let d_off = Array2::from_shape_fn((2, 10), |(c, f)| d[f * 4 + 2 * c + 1]);
    let reference = iou_loss(&d_on, &d_off, &t).unwrap().value;
    let eval = |d: &[f64]| {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::new(vec![10, 4], d.to_vec()).unwrap()).unwrap();
        let l = tape.custom(&[x], Box::new(IouOp::new(&t))).unwrap();
        (tape, x, l)
    };
    let (tape, x, l) = eval(&d);
    assert!((tape.value(l).item().unwrap() - reference).abs() < 1e-12);
    let g = tape.backward(l).unwrap();
    let gx = g.get(x).unwrap().data().to_vec();
    for i in 0..40 {
        let h = 1e-7;
        let mut a = d.clone();
        let mut b = d.clone();
        a[i] += h;
        b[i] -= h;
        let f = |v: &[f64]| {
            let (t, _, l) = eval(v);
            t.value(l).item().unwrap()
        };
        assert!(((f(&a) - f(&b)) / (2.0 * h) - gx[i]).abs() < 1e-5, "coordinate {i}");
    }
}
