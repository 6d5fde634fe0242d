//! Dataset and checkpoint directories survive a write/read cycle.

mod common;

use bsed::dataset::{Checkpoint, Dataset};
use bsed::event::sort_events;
use bsed::io::Split;
use bsed::pipeline::Mode;
use bsed::postproc::MedianFilterConfig;
use bsed::synth::{generate_dataset, SceneConfig};

#[test]
fn dataset_round_trip() {
    let scene = SceneConfig::reference(6);
    let ds = Dataset::from_synthetic(&scene, generate_dataset(&scene, 25).unwrap(), 20, 6).unwrap();
    let dir = tempfile::tempdir().unwrap();
    ds.write(dir.path()).unwrap();
    let back = Dataset::read(dir.path(), &[]).unwrap();
    assert_eq!(back.info, ds.info);
    assert_eq!(back.manifest, ds.manifest);
    for (a, b) in ds.clips.iter().zip(&back.clips) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.features, b.features);
        let mut q: Vec<_> = a.events.iter().map(|e| e.quantized()).collect();
        let mut r = b.events.clone();
        sort_events(&mut q);
        sort_events(&mut r);
        assert_eq!(q, r);
    }
    let eval = Dataset::read(dir.path(), &[Split::Eval]).unwrap();
    assert_eq!(eval.clips.len(), 5);
    assert!(eval.manifest.clips.iter().all(|(_, s)| *s == Split::Eval));
    assert_eq!(ds.split(Split::Validation).len(), 4);
}

#[test]
fn checkpoint_round_trip_predicts_identically() {
    for mode in [Mode::RedOolEpn, Mode::BceMf] {
        let (sys, store, clip) = common::small_problem(mode, 8);
        let ckpt = Checkpoint {
            cfg: sys.cfg,
            class_names: vec!["dog".into(), "bell".into()],
            store: store.clone(),
            mf: (mode == Mode::BceMf).then(|| MedianFilterConfig { lengths: vec![0.4, 1.2], threshold: 0.5 }),
        };
        let dir = tempfile::tempdir().unwrap();
        ckpt.save(dir.path()).unwrap();
        let back = Checkpoint::load(dir.path(), 0.5).unwrap();
        assert_eq!(back.cfg, ckpt.cfg);
        assert_eq!(back.class_names, ckpt.class_names);
        assert_eq!(back.mf, ckpt.mf);
        let sys2 = bsed::pipeline::System::lookup(&back.store, back.cfg).unwrap();
        let (a, b) = (sys.predict(&store, &clip.features).unwrap(), sys2.predict(&back.store, &clip.features).unwrap());
        assert_eq!(a.probs, b.probs);
        assert_eq!(a.proposals, b.proposals);
    }
}

#[test]
fn missing_files_are_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert!(Dataset::read(dir.path(), &[]).is_err());
    assert!(Checkpoint::load(dir.path(), 0.5).is_err());
}
