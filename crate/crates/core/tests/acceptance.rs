//! Acceptance criteria, one PASS/FAIL line each. Run with `--nocapture`
//! to see the report; the test fails if any criterion fails.

mod common;

use std::time::Instant;

use bsed::bench::{prepare, run_mode, BenchConfig};
use bsed::epn::EpnConfig;
use bsed::infer::{infer_events, InferenceConfig};
use bsed::losses::{focal_term, LossConfig};
use bsed::metrics::{collar_f1, psds1, ClipScenario, EvalScenario, F1Config, PsdsConfig};
use bsed::pipeline::Mode;
use bsed::red::{forward_scan, forward_sequential, FramePosteriors};
use bsed::synth::{generate_dataset, SceneConfig};
use bsed::Event;
use ndarray::Array2;
use nnkit::gradcheck::{all_coords, check_params};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Report {
    failures: Vec<u32>,
}

impl Report {
    fn line(&mut self, n: u32, pass: bool, detail: String) {
        println!("criterion {n}: {} {detail}", if pass { "PASS" } else { "FAIL" });
        if !pass {
            self.failures.push(n);
        }
    }
}

fn red_scan(r: &mut Report) {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut e32, mut e64) = (0.0f64, 0.0f64);
    for _ in 0..200 {
        let (c, t) = (rng.random_range(1..=8), rng.random_range(1..=10_000));
        let s = Array2::from_shape_fn((c, t), |_| rng.random::<f64>());
        let q = Array2::from_shape_fn((c, t), |_| rng.random::<f64>());
        let prior = rng.random::<f64>();
        let p64 = FramePosteriors::new(s.clone(), q.clone(), 0.04).unwrap();
        let (a, b) = (forward_sequential(&p64, prior).unwrap(), forward_scan(&p64, prior).unwrap());
        for (x, y) in [(&a.presence, &b.presence), (&a.onset, &b.onset), (&a.offset, &b.offset)] {
            e64 = x.iter().zip(y).map(|(x, y)| (x - y).abs()).fold(e64, f64::max);
        }
        let p32 = FramePosteriors::new(s.mapv(|v| v as f32), q.mapv(|v| v as f32), 0.04).unwrap();
        let (a, b) = (forward_sequential(&p32, prior as f32).unwrap(), forward_scan(&p32, prior as f32).unwrap());
        for (x, y) in [(&a.presence, &b.presence), (&a.onset, &b.onset), (&a.offset, &b.offset)] {
            e32 = x.iter().zip(y).map(|(x, y)| f64::from((x - y).abs())).fold(e32, f64::max);
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    r.line(1, e32 <= 1e-6 && e64 <= 1e-12 && secs < 10.0, format!("f32 max {e32:.2e}, f64 max {e64:.2e}, {secs:.1} s"));
}

fn gradients(r: &mut Report) {
    let t0 = Instant::now();
    let (sys, store, clip) = common::small_problem(Mode::RedOolEpn, 1);
    let loss = LossConfig::default();
    let mut coords = all_coords(&store);
    coords.shuffle(&mut ChaCha8Rng::seed_from_u64(2));
    coords.truncate(100);
    let checks = check_params(&store, &coords, 1e-5, 1e-6, |tape, s| {
        let (lv, _) = sys
            .clip_loss(tape, s, &clip.features, &clip.targets, &loss)
            .map_err(|e| nnkit::NnError::State(e.to_string()))?;
        Ok(lv.total)
    })
    .unwrap();
    let worst = checks.iter().map(|c| c.rel_error).fold(0.0, f64::max);
    let secs = t0.elapsed().as_secs_f64();
    r.line(2, checks.len() == 100 && worst <= 1e-4 && secs < 120.0, format!("max relative error {worst:.2e} over {} coordinates, {secs:.1} s", checks.len()));
}

fn inference(r: &mut Report) {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let (c, n, k) = (rng.random_range(1..=3), rng.random_range(1..=20), rng.random_range(1..=3));
        let (p, prop) = common::random_instance(&mut rng, c, n, 0.1);
        let got = infer_events(&p, &prop, &InferenceConfig { k, m: None, min_len: None }).unwrap();
        if got != common::naive_infer(&p, &prop, k, c, 0.1) {
            mismatches += 1;
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    r.line(3, mismatches == 0 && secs < 30.0, format!("{mismatches} mismatches in 1000 instances, {secs:.1} s"));
}

fn metric_fixtures(r: &mut Report) {
    let hour = |preds: &[(f64, f64, f64)]| EvalScenario {
        n_classes: 1,
        clips: vec![ClipScenario {
            duration: 3600.0,
            truth: vec![Event::truth(0, 10.0, 20.0).unwrap()],
            predictions: preds.iter().map(|&(s, e, c)| Event::new(0, s, e, c).unwrap()).collect(),
        }],
    };
    let d = PsdsConfig::default();
    let fixtures = [
        psds1(&hour(&[(10.0, 20.0, 0.9), (100.0, 101.0, 0.8)]), &d).unwrap().value,
        psds1(&hour(&[]), &d).unwrap().value,
        psds1(&hour(&[(10.0, 20.0, 0.8), (100.0, 101.0, 0.9)]), &d).unwrap().value,
    ];
    let psds_ok = fixtures.iter().zip([1.0, 0.0, 0.99]).all(|(v, want)| (v - want).abs() <= 0.005);
    let collar = |pred: (f64, f64)| {
        let s = EvalScenario {
            n_classes: 1,
            clips: vec![ClipScenario {
                duration: 10.0,
                truth: vec![Event::truth(0, 1.0, 3.0).unwrap()],
                predictions: vec![Event::new(0, pred.0, pred.1, 1.0).unwrap()],
            }],
        };
        collar_f1(&s, &F1Config::default()).unwrap().macro_f1
    };
    let f1 = [collar((1.0, 3.0)), collar((1.1, 3.5)), collar((1.15, 3.35))];
    let f1_ok = f1 == [1.0, 0.0, 1.0];
    let mut worst = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for scene_seed in 0..50 {
        let scene = SceneConfig::reference(100 + scene_seed);
        let clips = generate_dataset(&scene, 4).unwrap();
        let s = EvalScenario {
            n_classes: scene.n_classes,
            clips: clips
                .iter()
                .map(|c| ClipScenario {
                    duration: scene.clip_len,
                    truth: c.events.clone(),
                    predictions: c.events.iter().map(|e| Event { confidence: rng.random(), ..*e }).collect(),
                })
                .collect(),
        };
        worst = worst.max((psds1(&s, &d).unwrap().value - 1.0).abs());
    }
    r.line(
        4,
        psds_ok && f1_ok && worst <= 1e-9,
        format!("PSDS fixtures {fixtures:.4?}, collar F1 {f1:?}, perfect-detector max deviation {worst:.1e}"),
    );
}

fn benchmark(r: &mut Report) {
    let t0 = Instant::now();
    let modes = [Mode::BceMf, Mode::RedOol, Mode::RedOolEpn];
    let mut scores = Vec::new();
    for seed in 1..=3 {
        let cfg = BenchConfig::reference(seed);
        let data = prepare(&cfg).unwrap();
        let row: Vec<f64> = modes.iter().map(|&m| 100.0 * run_mode(&cfg, &data, m).unwrap().eval.psds.value).collect();
        println!("  seed {seed}: bce-mf {:.2}  red-ool {:.2}  red-ool-epn {:.2}", row[0], row[1], row[2]);
        scores.push(row);
    }
    let secs = t0.elapsed().as_secs_f64();
    let mean = |i: usize| scores.iter().map(|r| r[i]).sum::<f64>() / scores.len() as f64;
    let wins = scores.iter().filter(|r| r[2] > r[0]).count();
    let gain = mean(2) - mean(0);
    r.line(5, wins == 3 && gain >= 2.0 && secs <= 1800.0, format!("red-ool-epn beats bce-mf in {wins}/3 seeds, mean gain {gain:.2} points, {secs:.0} s"));
    let (a, b, c) = (mean(0), mean(1), mean(2));
    r.line(6, a <= b && b <= c, format!("mean PSDS1 bce-mf {a:.2} <= red-ool {b:.2} <= red-ool-epn {c:.2}"));
}

fn epn_size(r: &mut Report) {
    let n = EpnConfig::per_class(5).stack_param_count();
    r.line(7, (n as f64 / 26_000.0 - 1.0).abs() <= 0.15, format!("{n} parameters per class at hidden 32"));
}

fn focal(r: &mut Report) {
    let (v, _) = focal_term(0.5, 1.0, 2.0, 1e-7);
    let err = (v - 0.25 * std::f64::consts::LN_2).abs();
    r.line(8, err <= 1e-12, format!("|FL - ln2/4| = {err:.1e}"));
}

fn fuzz(r: &mut Report) {
    let t = common::fuzz_formats(10_000, 9);
    r.line(
        9,
        t.panicked.is_empty(),
        format!("{} rejected, {} still valid, {} panics", t.rejected, t.accepted, t.panicked.len()),
    );
}

#[test]
fn acceptance_criteria() {
    let mut r = Report { failures: Vec::new() };
    red_scan(&mut r);
    gradients(&mut r);
    inference(&mut r);
    metric_fixtures(&mut r);
    benchmark(&mut r);
    epn_size(&mut r);
    focal(&mut r);
    fuzz(&mut r);
    assert!(r.failures.is_empty(), "failed criteria: {:?}", r.failures);
}
