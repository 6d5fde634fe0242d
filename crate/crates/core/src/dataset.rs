//! Dataset and checkpoint directories.
//!
//! A dataset directory holds `dataset.cfg`, `manifest.tsv`, `truth.tsv`
//! and `features/<clip>.ffb`. A checkpoint directory holds `params.bsp`,
//! `model.cfg`, optionally `mf.cfg`, and the training log.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use nnkit::ParamStore;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::event::Event;
use crate::io::{
    decode_features, encode_features, parse_events_tsv, read_bytes, read_text, write_events_tsv, write_file,
    EventRecord, KeyValues, Manifest, Split,
};
use crate::pipeline::SystemConfig;
use crate::postproc::MedianFilterConfig;
use crate::synth::{Clip, SceneConfig};
use crate::train::TrainingClip;

/// Marks `n_val` of the clips as validation, balancing class occurrence
/// between the parts: the class with the fewest unassigned clips is placed
/// first, each clip going to the part that still wants that class most,
/// subject to the part sizes.
pub fn stratified_split(labels: &[Vec<bool>], n_val: usize, seed: u64) -> Result<Vec<bool>> {
    let n = labels.len();
    if n_val > n {
        return Err(Error::Config(format!("{n_val} validation clips out of {n}")));
    }
    let c = labels.first().map_or(0, Vec::len);
    if labels.iter().any(|l| l.len() != c) {
        return Err(Error::InvalidArgument("label rows differ in length".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ratio = if n == 0 { 0.0 } else { n_val as f64 / n as f64 };
    // part 0 = train, part 1 = validation
    let mut capacity = [n - n_val, n_val];
    let mut desired: Vec<[f64; 2]> = (0..c)
        .map(|k| {
            let count = labels.iter().filter(|l| l[k]).count() as f64;
            [count * (1.0 - ratio), count * ratio]
        })
        .collect();
    let mut assigned: Vec<Option<usize>> = vec![None; n];
    loop {
        let remaining = |k: usize, a: &[Option<usize>]| (0..n).filter(|&i| a[i].is_none() && labels[i][k]).count();
        let Some(k) = (0..c)
            .map(|k| (remaining(k, &assigned), k))
            .filter(|&(r, _)| r > 0)
            .min()
            .map(|(_, k)| k)
        else {
            break;
        };
        let mut members: Vec<usize> = (0..n).filter(|&i| assigned[i].is_none() && labels[i][k]).collect();
        members.shuffle(&mut rng);
        for i in members {
            let open: Vec<usize> = (0..2).filter(|&p| capacity[p] > 0).collect();
            let part = match open.as_slice() {
                [p] => *p,
                _ => {
                    let key = |p: usize| (desired[k][p], capacity[p] as f64);
                    let (a, b) = (key(0), key(1));
                    if a > b {
                        0
                    } else if b > a {
                        1
                    } else {
                        rng.random_range(0..2)
                    }
                }
            };
            assigned[i] = Some(part);
            capacity[part] -= 1;
            for (kk, on) in labels[i].iter().enumerate() {
                if *on {
                    desired[kk][part] -= 1.0;
                }
            }
        }
    }
    let mut rest: Vec<usize> = (0..n).filter(|&i| assigned[i].is_none()).collect();
    rest.shuffle(&mut rng);
    for i in rest {
        let part = if capacity[1] > 0 { 1 } else { 0 };
        assigned[i] = Some(part);
        capacity[part] -= 1;
    }
    Ok(assigned.into_iter().map(|p| p == Some(1)).collect())
}

pub fn class_presence(events: &[Event], n_classes: usize) -> Vec<bool> {
    let mut v = vec![false; n_classes];
    for e in events {
        if e.class < n_classes {
            v[e.class] = true;
        }
    }
    v
}

/// Number of validation clips for an 80:20 split.
pub fn validation_count(n: usize) -> usize {
    (n as f64 * 0.2).round() as usize
}

pub fn default_class_names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("class{i}")).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetInfo {
    pub class_names: Vec<String>,
    pub frame_dur: f64,
    pub clip_len: f64,
    pub n_features: usize,
}

impl DatasetInfo {
    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        kv.set("classes", self.class_names.join(","));
        kv.set("frame_dur", self.frame_dur);
        kv.set("clip_len", self.clip_len);
        kv.set("n_features", self.n_features);
        kv
    }

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        fn need<T: std::str::FromStr>(kv: &KeyValues, k: &str) -> Result<T> {
            kv.parsed(k)?.ok_or_else(|| Error::Config(format!("dataset.cfg lacks {k}")))
        }
        let class_names: Vec<String> = need::<String>(kv, "classes")?.split(',').map(str::to_string).collect();
        if class_names.iter().any(|n| n.is_empty()) {
            return Err(Error::Config("empty class name in dataset.cfg".into()));
        }
        Ok(Self {
            class_names,
            frame_dur: need(kv, "frame_dur")?,
            clip_len: need(kv, "clip_len")?,
            n_features: need(kv, "n_features")?,
        })
    }
}

/// In-memory dataset with split assignment.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub info: DatasetInfo,
    pub manifest: Manifest,
    pub clips: Vec<TrainingClip>,
}

impl Dataset {
    /// Assembles generated clips: the first `n_trainval` are split 80:20
    /// into train and validation, the remaining ones form the eval split.
    pub fn from_synthetic(scene: &SceneConfig, clips: Vec<Clip>, n_trainval: usize, split_seed: u64) -> Result<Self> {
        if n_trainval > clips.len() {
            return Err(Error::Config("more train/validation clips than generated".into()));
        }
        let labels: Vec<Vec<bool>> = clips[..n_trainval]
            .iter()
            .map(|c| class_presence(&c.events, scene.n_classes))
            .collect();
        let is_val = stratified_split(&labels, validation_count(n_trainval), split_seed)?;
        let mut manifest = Manifest::default();
        let mut out = Vec::with_capacity(clips.len());
        for (i, clip) in clips.into_iter().enumerate() {
            let split = match (i < n_trainval, is_val.get(i)) {
                (true, Some(true)) => Split::Validation,
                (true, _) => Split::Train,
                (false, _) => Split::Eval,
            };
            manifest.clips.push((clip.id.clone(), split));
            out.push(TrainingClip::new(clip.id, clip.features, clip.events, scene.n_classes)?);
        }
        Ok(Self {
            info: DatasetInfo {
                class_names: default_class_names(scene.n_classes),
                frame_dur: scene.frame_dur,
                clip_len: scene.clip_len,
                n_features: scene.n_features,
            },
            manifest,
            clips: out,
        })
    }

    pub fn split(&self, split: Split) -> Vec<TrainingClip> {
        self.manifest
            .clips
            .iter()
            .zip(&self.clips)
            .filter(|((_, s), _)| *s == split)
            .map(|(_, c)| c.clone())
            .collect()
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let feat_dir = dir.join("features");
        std::fs::create_dir_all(&feat_dir).map_err(|e| Error::io(&feat_dir, e))?;
        write_file(&dir.join("dataset.cfg"), self.info.to_kv().render())?;
        write_file(&dir.join("manifest.tsv"), self.manifest.render())?;
        let mut records = Vec::new();
        for clip in &self.clips {
            write_file(&feat_dir.join(format!("{}.ffb", clip.id)), encode_features(&clip.features))?;
            records.extend(events_to_records(&clip.id, &clip.events, &self.info.class_names, false));
        }
        write_file(&dir.join("truth.tsv"), write_events_tsv(&records))
    }

    /// Loads the clips of the requested splits (all when `splits` is empty).
    pub fn read(dir: &Path, splits: &[Split]) -> Result<Self> {
        let info = DatasetInfo::from_kv(&KeyValues::parse(&read_text(&dir.join("dataset.cfg"))?)?)?;
        let full = Manifest::parse(&read_text(&dir.join("manifest.tsv"))?)?;
        let truth = records_by_file(&parse_events_tsv(&read_text(&dir.join("truth.tsv"))?)?, &info.class_names)?;
        let mut manifest = Manifest::default();
        let mut clips = Vec::new();
        for (id, split) in full.clips {
            if !splits.is_empty() && !splits.contains(&split) {
                continue;
            }
            let path = dir.join("features").join(format!("{id}.ffb"));
            let features = decode_features(&read_bytes(&path)?).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            if features.values.nrows() != info.n_features || (features.frame_dur - info.frame_dur).abs() > 1e-6 {
                return Err(Error::Config(format!("{}: shape or frame rate differs from dataset.cfg", path.display())));
            }
            let mut features = features;
            features.frame_dur = info.frame_dur;
            let events = truth.get(&id).cloned().unwrap_or_default();
            clips.push(TrainingClip::new(id.clone(), features, events, info.class_names.len())?);
            manifest.clips.push((id, split));
        }
        Ok(Self { info, manifest, clips })
    }
}

pub fn events_to_records(file: &str, events: &[Event], names: &[String], with_confidence: bool) -> Vec<EventRecord> {
    events
        .iter()
        .map(|e| EventRecord {
            file: file.to_string(),
            onset: e.start,
            offset: e.end,
            label: names.get(e.class).cloned().unwrap_or_else(|| e.class.to_string()),
            confidence: with_confidence.then_some(e.confidence),
        })
        .collect()
}

/// Groups records by file and resolves labels to class indices.
pub fn records_by_file(records: &[EventRecord], names: &[String]) -> Result<HashMap<String, Vec<Event>>> {
    let index: HashMap<&str, usize> = names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
    let mut out: HashMap<String, Vec<Event>> = HashMap::new();
    for r in records {
        let &class = index
            .get(r.label.as_str())
            .ok_or_else(|| Error::Config(format!("unknown event label {:?}", r.label)))?;
        let e = Event::new(class, r.onset, r.offset, r.confidence.unwrap_or(1.0))?;
        out.entry(r.file.clone()).or_default().push(e);
    }
    Ok(out)
}

/// A trained system on disk.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub cfg: SystemConfig,
    pub class_names: Vec<String>,
    pub store: ParamStore,
    pub mf: Option<MedianFilterConfig>,
}

impl Checkpoint {
    pub fn paths(dir: &Path) -> [PathBuf; 3] {
        [dir.join("params.bsp"), dir.join("model.cfg"), dir.join("mf.cfg")]
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let [params, model, mf] = Self::paths(dir);
        let mut bytes = Vec::new();
        nnkit::checkpoint::write_store(&self.store, &mut bytes)?;
        write_file(&params, bytes)?;
        write_file(&model, self.cfg.to_kv(&self.class_names).render())?;
        if let Some(m) = &self.mf {
            write_file(&mf, m.render())?;
        }
        Ok(())
    }

    /// Loads a checkpoint; `threshold` is the operating point given to the
    /// median-filter configuration.
    pub fn load(dir: &Path, threshold: f64) -> Result<Self> {
        let [params, model, mf] = Self::paths(dir);
        let (cfg, class_names) = SystemConfig::from_kv(&KeyValues::parse(&read_text(&model)?)?)?;
        let store = nnkit::checkpoint::parse_store(&read_bytes(&params)?)
            .map_err(|e| Error::Config(format!("{}: {e}", params.display())))?;
        let mf = if mf.exists() {
            Some(MedianFilterConfig::parse(&read_text(&mf)?, cfg.model.n_classes, threshold)?)
        } else {
            None
        };
        Ok(Self {
            cfg,
            class_names,
            store,
            mf,
        })
    }
}
