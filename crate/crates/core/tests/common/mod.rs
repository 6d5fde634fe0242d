//! Oracles and generators shared by the integration tests.
#![allow(dead_code)]

use bsed::epn::RegionProposals;
use bsed::event::sort_events;
use bsed::red::BoundaryProbabilities;
use bsed::Event;
use ndarray::Array2;
use rand::Rng;

/// Literal greedy inference: repeated argmax over surviving frames.
pub fn naive_infer(p: &BoundaryProbabilities, r: &RegionProposals, k: usize, m: usize, min_len: f64) -> Vec<Event> {
    let (c, n) = p.presence.dim();
    let dt = p.frame_dur;
    let clip = n as f64 * dt;
    let mut means: Vec<(usize, f64)> = (0..c)
        .map(|k| {
            let mut s = 0.0;
            for f in 0..n {
                s += p.presence[[k, f]];
            }
            (k, s / n as f64)
        })
        .collect();
    // stable: ties keep the lower class first
    means.sort_by(|a, b| b.1.total_cmp(&a.1));
    let mut out = Vec::new();
    for &(class, _) in means.iter().take(m) {
        let span = |f: usize| {
            let t = (f as f64 + 0.5) * dt;
            ((t - r.d_on[[class, f]]).max(0.0), (t + r.d_off[[class, f]]).min(clip))
        };
        let mut candidates: Vec<usize> = (0..n).collect();
        let mut emitted = 0;
        while emitted < k && !candidates.is_empty() {
            let mut best = candidates[0];
            for &f in &candidates {
                if p.presence[[class, f]] > p.presence[[class, best]] {
                    best = f;
                }
            }
            let (lo, hi) = span(best);
            let inside: Vec<f64> = (0..n)
                .filter(|&f| {
                    let t = (f as f64 + 0.5) * dt;
                    lo <= t && t <= hi
                })
                .map(|f| p.presence[[class, f]])
                .collect();
            let conf = if inside.is_empty() {
                p.presence[[class, best]]
            } else {
                inside.iter().sum::<f64>() / inside.len() as f64
            };
            candidates.retain(|&f| {
                let (a, b) = span(f);
                b < lo || hi < a
            });
            if hi > lo {
                emitted += 1;
                if hi - lo >= min_len - 1e-9 {
                    out.push(Event::new(class, lo, hi, conf.clamp(0.0, 1.0)).unwrap());
                }
            }
        }
    }
    sort_events(&mut out);
    out
}

/// Presence on a coarse grid (to force ties) and durations in half frames.
pub fn random_instance<R: Rng>(rng: &mut R, c: usize, n: usize, dt: f64) -> (BoundaryProbabilities, RegionProposals) {
    let presence = Array2::from_shape_fn((c, n), |_| rng.random_range(0..=10) as f64 / 10.0);
    let d = |rng: &mut R| rng.random_range(0..8) as f64 * dt / 2.0;
    let d_on = Array2::from_shape_fn((c, n), |_| d(rng));
    let d_off = Array2::from_shape_fn((c, n), |_| d(rng));
    (
        BoundaryProbabilities {
            onset: presence.clone(),
            offset: presence.clone(),
            presence,
            frame_dur: dt,
        },
        RegionProposals { d_on, d_off, frame_dur: dt },
    )
}

/// Decoders exercised by the mutation fuzzer, each with a valid input.
pub fn fuzz_corpus() -> Vec<(&'static str, Vec<u8>, fn(&[u8]) -> bool)> {
    use bsed::dataset::events_to_records;
    use bsed::io::{
        decode_features, decode_frame_probs, encode_features, encode_frame_probs, parse_events_tsv,
        write_events_tsv, Features, KeyValues, Manifest, Split,
    };
    use bsed::pipeline::{Mode, System, SystemConfig};
    use bsed::postproc::MedianFilterConfig;
    use bsed::red::FramePosteriors;
    use rand::SeedableRng;

    fn text(b: &[u8]) -> Option<&str> {
        std::str::from_utf8(b).ok()
    }
    let names: Vec<String> = (0..3).map(|i| format!("class{i}")).collect();
    let events = [
        Event::new(0, 0.5, 1.25, 0.9).unwrap(),
        Event::new(2, 3.0, 4.5, 0.4).unwrap(),
        Event::new(1, 0.0, 0.1, 1.0).unwrap(),
    ];
    let tsv = write_events_tsv(&events_to_records("clip00001", &events, &names, true));
    let start = Array2::from_shape_fn((2, 5), |(c, t)| (c * 5 + t) as f64 / 10.0);
    let fpb = encode_frame_probs(&FramePosteriors::new(start.clone(), start.mapv(|v| 1.0 - v), 0.04).unwrap());
    let ffb = encode_features(&Features {
        values: Array2::from_shape_fn((3, 4), |(f, t)| (f as f32) - 0.5 * t as f32),
        frame_dur: 0.1,
    });
    let manifest = Manifest {
        clips: vec![("clip00000".into(), Split::Train), ("clip00001".into(), Split::Eval)],
    }
    .render();
    let mf = MedianFilterConfig { lengths: vec![0.2, 0.0, 1.4], threshold: 0.5 }.render();
    let cfg = SystemConfig {
        mode: Mode::RedOolEpn,
        model: bsed::model::ToyModelConfig { channels: 4, gru_hidden: 3, ..bsed::model::ToyModelConfig::new(4, 3) },
        epn: bsed::epn::EpnConfig { hidden: 2, ..bsed::epn::EpnConfig::per_class(3) },
        frame_dur: 0.1,
    };
    let mut store = nnkit::ParamStore::new();
    System::register(&mut store, cfg, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0)).unwrap();
    let mut params = Vec::new();
    nnkit::checkpoint::write_store(&store, &mut params).unwrap();
    let model_cfg = cfg.to_kv(&names).render();

    vec![
        ("events", tsv.into_bytes(), |b| text(b).is_some_and(|t| parse_events_tsv(t).is_ok())),
        ("frame-probs", fpb, |b| decode_frame_probs(b).is_ok()),
        ("features", ffb, |b| decode_features(b).is_ok()),
        ("manifest", manifest.into_bytes(), |b| text(b).is_some_and(|t| Manifest::parse(t).is_ok())),
        ("mf.cfg", mf.into_bytes(), |b| text(b).is_some_and(|t| MedianFilterConfig::parse(t, 3, 0.5).is_ok())),
        ("params", params, |b| nnkit::checkpoint::parse_store(b).is_ok()),
        ("model.cfg", model_cfg.into_bytes(), |b| {
            text(b).is_some_and(|t| KeyValues::parse(t).is_ok_and(|kv| SystemConfig::from_kv(&kv).is_ok()))
        }),
    ]
}

/// Applies `1..=4` random byte edits (flip, overwrite, insert, delete, truncate).
pub fn mutate<R: Rng>(rng: &mut R, bytes: &[u8]) -> Vec<u8> {
    let mut b = bytes.to_vec();
    for _ in 0..rng.random_range(1..=4) {
        let len = b.len();
        match rng.random_range(0..5) {
            0 if len > 0 => {
                let i = rng.random_range(0..len);
                b[i] ^= 1 << rng.random_range(0..8);
            }
            1 if len > 0 => {
                let i = rng.random_range(0..len);
                b[i] = rng.random();
            }
            2 => {
                let i = rng.random_range(0..=len);
                b.insert(i, rng.random());
            }
            3 if len > 0 => {
                b.remove(rng.random_range(0..len));
            }
            _ => b.truncate(rng.random_range(0..=len)),
        }
    }
    b
}

#[derive(Debug, Default)]
pub struct FuzzTally {
    pub accepted: usize,
    pub rejected: usize,
    pub panicked: Vec<(&'static str, Vec<u8>)>,
}

/// Runs `n` mutations spread over the corpus, catching any panic.
pub fn fuzz_formats(n: usize, seed: u64) -> FuzzTally {
    use rand::SeedableRng;
    let corpus = fuzz_corpus();
    for (name, bytes, decode) in &corpus {
        assert!(decode(bytes), "{name} seed input must decode");
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut tally = FuzzTally::default();
    let hook = std::panic::take_hook();
    std::panic::set_hook(Box::new(|_| {}));
    for i in 0..n {
        let (name, bytes, decode) = &corpus[i % corpus.len()];
        let m = mutate(&mut rng, bytes);
        match std::panic::catch_unwind(|| decode(&m)) {
            Ok(true) => tally.accepted += 1,
            Ok(false) => tally.rejected += 1,
            Err(_) => tally.panicked.push((name, m)),
        }
    }
    std::panic::set_hook(hook);
    tally
}

/// A small system and one synthetic clip with targets, for gradient checks.
pub fn small_problem(
    mode: bsed::pipeline::Mode,
    seed: u64,
) -> (bsed::pipeline::System, nnkit::ParamStore, bsed::train::TrainingClip) {
    use bsed::epn::EpnConfig;
    use bsed::model::ToyModelConfig;
    use bsed::pipeline::{System, SystemConfig};
    use bsed::synth::{generate_dataset, SceneConfig};
    use rand::SeedableRng;

    let scene = SceneConfig {
        n_classes: 2,
        n_features: 4,
        clip_len: 3.0,
        events_per_clip: vec![1.5, 1.0],
        mean_durations: vec![0.5, 1.0],
        decay: vec![Some(0.4), None],
        ..SceneConfig::reference(seed)
    };
    let clip = generate_dataset(&scene, 1).unwrap().remove(0);
    let cfg = SystemConfig {
        mode,
        model: ToyModelConfig { channels: 5, gru_hidden: 4, ..ToyModelConfig::new(4, 2) },
        epn: EpnConfig { hidden: 3, ..EpnConfig::per_class(2) },
        frame_dur: scene.frame_dur,
    };
    let mut store = nnkit::ParamStore::new();
    let sys = System::register(&mut store, cfg, &mut rand_chacha::ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let tc = bsed::train::TrainingClip::new(clip.id, clip.features, clip.events, 2).unwrap();
    (sys, store, tc)
}
