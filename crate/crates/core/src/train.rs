//! Mini-batch training with AdamW and a warmup-cosine schedule.

use std::fmt::Write as _;
use std::time::Instant;

use nnkit::{AdamW, Gradients, NnError, ParamStore, Schedule, Tape};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::event::Event;
use crate::io::Features;
use crate::losses::{derive_frame_targets, FrameTargets, LossConfig, LossParts};
use crate::pipeline::{LossVars, System, SystemConfig};
use crate::scoring::{score_outputs, predict_all, ScoringConfig};

/// A clip ready for training: features with rasterised targets.
#[derive(Clone, Debug)]
pub struct TrainingClip {
    pub id: String,
    pub features: Features,
    pub events: Vec<Event>,
    pub targets: FrameTargets,
}

impl TrainingClip {
    pub fn new(id: String, features: Features, events: Vec<Event>, n_classes: usize) -> Result<Self> {
        let targets = derive_frame_targets(&events, n_classes, features.values.ncols(), features.frame_dur)?;
        Ok(Self {
            id,
            features,
            events,
            targets,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Peak learning rate of the acoustic model.
    pub lr: f64,
    /// Peak learning rate of the EPN parameters.
    pub epn_lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub loss: LossConfig,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub seed: u64,
    /// Score the validation split after every epoch.
    pub validate: bool,
    /// Stop after this many epochs without validation improvement and
    /// restore the best parameters. Requires `validate`.
    pub patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 16,
            lr: 3e-3,
            epn_lr: 1e-3,
            warmup_steps: 100,
            weight_decay: 1e-3,
            loss: LossConfig::default(),
            clip_norm: Some(5.0),
            seed: 0,
            validate: false,
            patience: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.epn_lr > 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::Config("learning rates must be positive, decay non-negative".into()));
        }
        if self.patience.is_some() && !self.validate {
            return Err(Error::Config("early stopping needs per-epoch validation".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub parts: LossParts,
    pub total: f64,
    pub validation_psds: Option<f64>,
    pub seconds: f64,
}

pub fn render_log_csv(log: &[EpochLog]) -> String {
    let mut out = String::from("epoch,total,presence,onset,offset,iou,validation_psds1,seconds\n");
    for e in log {
        let v = e.validation_psds.map_or(String::new(), |v| format!("{:.4}", 100.0 * v));
        let _ = writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{v},{:.2}",
            e.epoch, e.total, e.parts.presence, e.parts.onset, e.parts.offset, e.parts.iou, e.seconds
        );
    }
    out
}

/// Mean `(d_on, d_off)` in frames over active training frames per class,
/// one frame for classes that never occur.
pub fn mean_distances(clips: &[TrainingClip], n_classes: usize) -> Vec<(f64, f64)> {
    let mut acc = vec![(0.0, 0.0, 0usize); n_classes];
    for clip in clips {
        let t = &clip.targets;
        for ((c, f), &p) in t.presence.indexed_iter() {
            if p > 0.5 {
                acc[c].0 += t.d_on[[c, f]] / t.frame_dur;
                acc[c].1 += t.d_off[[c, f]] / t.frame_dur;
                acc[c].2 += 1;
            }
        }
    }
    acc.into_iter()
        .map(|(on, off, n)| if n == 0 { (1.0, 1.0) } else { ((on / n as f64).max(0.5), (off / n as f64).max(0.5)) })
        .collect()
}

pub struct Trained {
    pub system: System,
    pub store: ParamStore,
    pub log: Vec<EpochLog>,
}

/// Loss and gradients of one clip, with the loss scaled by `weight`.
pub fn clip_gradients(
    system: &System,
    store: &ParamStore,
    clip: &TrainingClip,
    loss: &LossConfig,
    weight: f64,
) -> Result<(Tape, LossParts, f64, Gradients)> {
    let mut tape = Tape::new();
    let (vars, _) = system
        .clip_loss(&mut tape, store, &clip.features, &clip.targets, loss)
        .map_err(|e| numeric_context(e, &clip.id))?;
    let LossVars { total, .. } = vars;
    let value = tape.value(total).data()[0];
    if !value.is_finite() {
        return Err(Error::Numeric(format!("clip {}: loss is {value}", clip.id)));
    }
    let scaled = tape.scale(total, weight)?;
    let grads = tape.backward(scaled).map_err(|e| numeric_context(e.into(), &clip.id))?;
    let parts = vars.parts(&tape);
    Ok((tape, parts, value, grads))
}

fn numeric_context(e: Error, clip: &str) -> Error {
    match e {
        Error::Nn(NnError::NonFinite { op }) => Error::Numeric(format!("clip {clip}: non-finite value in {op}")),
        other => other,
    }
}

/// Trains a fresh system on `train`, optionally scoring `validation` per epoch.
pub fn train(
    cfg: &SystemConfig,
    tc: &TrainConfig,
    train: &[TrainingClip],
    validation: &[TrainingClip],
    scoring: &ScoringConfig,
) -> Result<Trained> {
    tc.validate()?;
    if train.is_empty() {
        return Err(Error::Config("no training clips".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut store = ParamStore::new();
    let system = System::register(&mut store, *cfg, &mut rng)?;
    if let Some(epn) = &system.epn {
        epn.init_head_bias(&mut store, &mean_distances(train, cfg.model.n_classes))?;
    }
    let steps_per_epoch = train.len().div_ceil(tc.batch_size);
    let total_steps = steps_per_epoch * tc.epochs;
    let warmup = tc.warmup_steps.min(total_steps.saturating_sub(1));
    let model_sched = Schedule::new(warmup, total_steps, tc.lr)?;
    let epn_sched = Schedule::new(warmup, total_steps, tc.epn_lr)?;
    let opt = AdamW {
        weight_decay: tc.weight_decay,
        ..AdamW::default()
    };
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::with_capacity(tc.epochs);
    let mut best: Option<(f64, ParamStore)> = None;
    let mut stale = 0usize;
    let mut step = 0usize;
    for epoch in 0..tc.epochs {
        let t0 = Instant::now();
        order.shuffle(&mut rng);
        let mut sum = LossParts::default();
        let mut sum_total = 0.0;
        for batch in order.chunks(tc.batch_size) {
            let weight = 1.0 / batch.len() as f64;
            let results = batch
                .par_iter()
                .map(|&i| clip_gradients(&system, &store, &train[i], &tc.loss, weight))
                .collect::<Result<Vec<_>>>()?;
            store.zero_grad();
            for (tape, parts, total, grads) in &results {
                grads.accumulate_into(tape, &mut store)?;
                sum.presence += parts.presence;
                sum.onset += parts.onset;
                sum.offset += parts.offset;
                sum.iou += parts.iou;
                sum_total += total;
            }
            store
                .check_finite_grads()
                .map_err(|e| Error::Numeric(format!("epoch {epoch}, step {step}: {e}")))?;
            if let Some(max) = tc.clip_norm {
                store.clip_grad_norm(max);
            }
            let (rm, re) = (model_sched.rate(step), epn_sched.rate(step));
            opt.step_with(&mut store, |name| if name.starts_with("epn/") { re } else { rm })?;
            step += 1;
        }
        let n = train.len() as f64;
        let parts = LossParts {
            presence: sum.presence / n,
            onset: sum.onset / n,
            offset: sum.offset / n,
            iou: sum.iou / n,
        };
        let validation_psds = if tc.validate && !validation.is_empty() {
            let outputs = predict_all(&system, &store, validation)?;
            Some(score_outputs(&system.cfg, &outputs, validation, None, scoring)?.psds.value)
        } else {
            None
        };
        log.push(EpochLog {
            epoch,
            parts,
            total: sum_total / n,
            validation_psds,
            seconds: t0.elapsed().as_secs_f64(),
        });
        if let (Some(patience), Some(v)) = (tc.patience, validation_psds) {
            if best.as_ref().is_none_or(|(b, _)| v > *b) {
                best = Some((v, store.clone()));
                stale = 0;
            } else {
                stale += 1;
                if stale >= patience {
                    break;
                }
            }
        }
    }
    if let Some((_, snapshot)) = best {
        store = snapshot;
    }
    Ok(Trained { system, store, log })
}
