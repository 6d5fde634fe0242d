//! Turning system outputs into events and metrics: median-filter
//! post-processing for the frame-wise modes, proposal inference for the
//! EPN mode.

use nnkit::ParamStore;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::event::Event;
use crate::infer::{infer_events, InferenceConfig};
use crate::io::Features;
use crate::metrics::{collar_f1, psds1, ClipScenario, EvalScenario, F1Config, MetricReport, PsdsConfig};
use crate::pipeline::{ClipOutput, System, SystemConfig};
use crate::postproc::{default_length_grid, mf_events, mf_psds, sweep_thresholds, tune_mf, MedianFilterConfig, ScoredClip};
use crate::train::TrainingClip;

#[derive(Clone, Debug, PartialEq)]
pub struct ScoringConfig {
    pub psds: PsdsConfig,
    pub f1: F1Config,
    pub infer: InferenceConfig,
    /// Median-filter lengths searched when tuning, seconds.
    pub mf_grid: Vec<f64>,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self {
            psds: PsdsConfig::default(),
            f1: F1Config::default(),
            infer: InferenceConfig::default(),
            mf_grid: default_length_grid(),
        }
    }
}

pub fn predict_features(system: &System, store: &ParamStore, features: &[&Features]) -> Result<Vec<ClipOutput>> {
    features.par_iter().map(|f| system.predict(store, f)).collect()
}

pub fn predict_all(system: &System, store: &ParamStore, clips: &[TrainingClip]) -> Result<Vec<ClipOutput>> {
    let feats: Vec<&Features> = clips.iter().map(|c| &c.features).collect();
    predict_features(system, store, &feats)
}

fn scored(outputs: &[ClipOutput], clips: &[TrainingClip]) -> Vec<ScoredClip> {
    outputs
        .iter()
        .zip(clips)
        .map(|(o, c)| ScoredClip {
            presence: o.probs.presence.clone(),
            frame_dur: o.probs.frame_dur,
            truth: c.events.clone(),
        })
        .collect()
}

/// Per-class median-filter lengths tuned for PSDS1 on validation outputs.
pub fn tune_on_validation(
    n_classes: usize,
    outputs: &[ClipOutput],
    validation: &[TrainingClip],
    scoring: &ScoringConfig,
) -> Result<MedianFilterConfig> {
    tune_mf(
        &scored(outputs, validation),
        n_classes,
        &scoring.mf_grid,
        scoring.f1.threshold,
        &scoring.psds,
    )
}

/// Events a system emits for one clip. Frame-wise modes threshold the
/// filtered presence at the configured operating point; the EPN mode runs
/// proposal inference.
pub fn clip_events(
    cfg: &SystemConfig,
    output: &ClipOutput,
    mf: Option<&MedianFilterConfig>,
    scoring: &ScoringConfig,
) -> Result<Vec<Event>> {
    match &output.proposals {
        Some(p) if cfg.mode.uses_epn() => infer_events(&output.probs, p, &scoring.infer),
        _ => {
            let identity = MedianFilterConfig {
                threshold: scoring.f1.threshold,
                ..MedianFilterConfig::identity(cfg.model.n_classes)
            };
            mf_events(&output.probs.presence, mf.unwrap_or(&identity), cfg.frame_dur)
        }
    }
}

/// PSDS1 and collar F1 of a system on clips with ground truth.
pub fn score_outputs(
    cfg: &SystemConfig,
    outputs: &[ClipOutput],
    clips: &[TrainingClip],
    mf: Option<&MedianFilterConfig>,
    scoring: &ScoringConfig,
) -> Result<MetricReport> {
    if outputs.len() != clips.len() {
        return Err(Error::InvalidArgument("outputs and clips differ in length".into()));
    }
    let c = cfg.model.n_classes;
    let events = outputs
        .par_iter()
        .map(|o| clip_events(cfg, o, mf, scoring))
        .collect::<Result<Vec<_>>>()?;
    let scenario = EvalScenario {
        n_classes: c,
        clips: clips
            .iter()
            .zip(events)
            .map(|(clip, predictions)| ClipScenario {
                duration: clip.features.values.ncols() as f64 * clip.features.frame_dur,
                truth: clip.events.clone(),
                predictions,
            })
            .collect(),
    };
    let psds = if cfg.mode.uses_epn() {
        psds1(&scenario, &scoring.psds)?
    } else {
        let lengths = mf.map_or_else(|| vec![0.0; c], |m| m.lengths.clone());
        let sc = scored(outputs, clips);
        mf_psds(&sc, &lengths, &sweep_thresholds(&sc), &scoring.psds)?
    };
    let f1 = collar_f1(&scenario, &F1Config { threshold: mf.map_or(scoring.f1.threshold, |m| m.threshold), ..scoring.f1 })?;
    Ok(MetricReport {
        psds,
        f1,
        class_names: (0..c).map(|i| format!("class{i}")).collect(),
    })
}
