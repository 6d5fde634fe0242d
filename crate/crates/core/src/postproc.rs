//! Median-filter baseline: per-class sliding-median smoothing of presence,
//! thresholding, and grouping of consecutive active frames into events.

use ndarray::Array2;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::event::Event;
use crate::io::{round_to, KeyValues};
use crate::metrics::{psds1_threshold_sweep, ClipScenario, EvalScenario, PsdsConfig, PsdsResult};

/// Filter lengths searched when tuning: 0 to 2 s in 0.2 s steps.
pub fn default_length_grid() -> Vec<f64> {
    (0..=10).map(|i| round_to(0.2 * i as f64, 1)).collect()
}

/// Odd window size in frames for a length in seconds (`0` → 1 = identity).
pub fn window_frames(seconds: f64, frame_dur: f64) -> usize {
    if seconds <= 0.0 {
        return 1;
    }
    let n = (seconds / frame_dur - 1e-9).ceil().max(1.0) as usize;
    n | 1
}

/// Centred sliding median with edge replication; `len` is forced odd.
pub fn median_filter(row: &[f64], len: usize) -> Vec<f64> {
    let len = len.max(1) | 1;
    if len == 1 || row.is_empty() {
        return row.to_vec();
    }
    let half = len / 2;
    let n = row.len() as isize;
    let mut window = vec![0.0; len];
    (0..row.len())
        .map(|t| {
            for (j, w) in window.iter_mut().enumerate() {
                let i = (t as isize + j as isize - half as isize).clamp(0, n - 1);
                *w = row[i as usize];
            }
            *window.select_nth_unstable_by(half, f64::total_cmp).1
        })
        .collect()
}

/// Maximal runs with presence ≥ `tau` become events spanning the run's
/// frame borders; confidence is the mean presence over the run.
pub fn threshold_and_group(presence: &Array2<f64>, tau: f64, frame_dur: f64) -> Result<Vec<Event>> {
    let mut out = Vec::new();
    for (class, row) in presence.rows().into_iter().enumerate() {
        let mut f = 0;
        let n = row.len();
        while f < n {
            if row[f] < tau {
                f += 1;
                continue;
            }
            let start = f;
            let mut sum = 0.0;
            while f < n && row[f] >= tau {
                sum += row[f];
                f += 1;
            }
            let conf = (sum / (f - start) as f64).clamp(0.0, 1.0);
            out.push(Event::new(
                class,
                start as f64 * frame_dur,
                f as f64 * frame_dur,
                conf,
            )?);
        }
    }
    Ok(out)
}

/// One clip's presence scores with its reference annotation.
#[derive(Clone, Debug)]
pub struct ScoredClip {
    pub presence: Array2<f64>,
    pub frame_dur: f64,
    pub truth: Vec<Event>,
}

impl ScoredClip {
    pub fn duration(&self) -> f64 {
        self.presence.ncols() as f64 * self.frame_dur
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MedianFilterConfig {
    /// Filter length per class, seconds.
    pub lengths: Vec<f64>,
    /// Operating threshold for event output and F1.
    pub threshold: f64,
}

impl MedianFilterConfig {
    pub fn identity(n_classes: usize) -> Self {
        Self {
            lengths: vec![0.0; n_classes],
            threshold: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lengths.iter().any(|&l| !(0.0..=2.0 + 1e-9).contains(&l)) {
            return Err(Error::Config(format!("filter lengths outside [0, 2] s: {:?}", self.lengths)));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!("threshold {} outside (0, 1)", self.threshold)));
        }
        Ok(())
    }

    /// `class_index = length_seconds`, one class per line.
    pub fn render(&self) -> String {
        let mut kv = KeyValues::default();
        for (c, l) in self.lengths.iter().enumerate() {
            kv.set(&c.to_string(), format!("{l:.1}"));
        }
        kv.render()
    }

    pub fn parse(text: &str, n_classes: usize, threshold: f64) -> Result<Self> {
        let kv = KeyValues::parse(text)?;
        let mut lengths = vec![None; n_classes];
        for (k, v) in kv.entries() {
            let c: usize = k
                .parse()
                .ok()
                .filter(|&c| c < n_classes)
                .ok_or_else(|| Error::Config(format!("mf.cfg: bad class index {k:?}")))?;
            lengths[c] = Some(
                v.parse::<f64>()
                    .map_err(|_| Error::Config(format!("mf.cfg: bad length {v:?}")))?,
            );
        }
        let lengths = lengths
            .into_iter()
            .enumerate()
            .map(|(c, l)| l.ok_or_else(|| Error::Config(format!("mf.cfg: class {c} missing"))))
            .collect::<Result<Vec<_>>>()?;
        let cfg = Self { lengths, threshold };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Filters each class row with its own length.
pub fn apply_mf(presence: &Array2<f64>, lengths: &[f64], frame_dur: f64) -> Result<Array2<f64>> {
    if lengths.len() != presence.nrows() {
        return Err(Error::InvalidArgument(format!(
            "{} filter lengths for {} classes",
            lengths.len(),
            presence.nrows()
        )));
    }
    let mut out = presence.clone();
    for (c, mut row) in out.rows_mut().into_iter().enumerate() {
        let filtered = median_filter(&presence.row(c).to_vec(), window_frames(lengths[c], frame_dur));
        row.iter_mut().zip(filtered).for_each(|(o, v)| *o = v);
    }
    Ok(out)
}

/// Events at the configured operating threshold.
pub fn mf_events(presence: &Array2<f64>, cfg: &MedianFilterConfig, frame_dur: f64) -> Result<Vec<Event>> {
    threshold_and_group(&apply_mf(presence, &cfg.lengths, frame_dur)?, cfg.threshold, frame_dur)
}

/// Thresholds swept for PSDS: 50 quantiles of the pooled presence values
/// together with a uniform 50-point grid over (0, 1).
pub fn sweep_thresholds(clips: &[ScoredClip]) -> Vec<f64> {
    let mut values: Vec<f64> = clips.iter().flat_map(|c| c.presence.iter().copied()).collect();
    let mut taus: Vec<f64> = (1..=50).map(|i| (i as f64 - 0.5) / 50.0).collect();
    if !values.is_empty() {
        values.sort_by(f64::total_cmp);
        let n = values.len();
        taus.extend((0..50).map(|i| values[((i as f64 + 0.5) / 50.0 * n as f64) as usize % n]));
    }
    taus.retain(|t| *t > 0.0);
    taus.sort_by(f64::total_cmp);
    taus.dedup();
    taus
}

fn truth_scenario(clips: &[ScoredClip], n_classes: usize) -> EvalScenario {
    EvalScenario {
        n_classes,
        clips: clips
            .iter()
            .map(|c| ClipScenario {
                duration: c.duration(),
                truth: c.truth.clone(),
                predictions: Vec::new(),
            })
            .collect(),
    }
}

/// PSDS1 of the filtered-and-thresholded system over a threshold sweep.
pub fn mf_psds(
    clips: &[ScoredClip],
    lengths: &[f64],
    thresholds: &[f64],
    cfg: &PsdsConfig,
) -> Result<PsdsResult> {
    let n_classes = lengths.len();
    let filtered = clips
        .par_iter()
        .map(|c| apply_mf(&c.presence, lengths, c.frame_dur))
        .collect::<Result<Vec<_>>>()?;
    let sweeps = thresholds
        .par_iter()
        .map(|&tau| {
            filtered
                .iter()
                .zip(clips)
                .map(|(p, c)| threshold_and_group(p, tau, c.frame_dur))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    psds1_threshold_sweep(&truth_scenario(clips, n_classes), &sweeps, cfg)
}

/// Chooses each class's filter length from `grid` to maximise that class's
/// PSDS1 contribution on `clips`. Grid order is kept; ties keep the earlier
/// (shorter, for an ascending grid) length.
pub fn tune_mf(
    clips: &[ScoredClip],
    n_classes: usize,
    grid: &[f64],
    threshold: f64,
    cfg: &PsdsConfig,
) -> Result<MedianFilterConfig> {
    if clips.is_empty() {
        return Err(Error::Config("median-filter tuning needs validation clips".into()));
    }
    if grid.is_empty() {
        return Err(Error::Config("empty filter-length grid".into()));
    }
    let taus = sweep_thresholds(clips);
    let mut best: Vec<(f64, f64)> = vec![(f64::NEG_INFINITY, grid[0]); n_classes];
    for &len in grid {
        let r = mf_psds(clips, &vec![len; n_classes], &taus, cfg)?;
        for (c, score) in r.per_class.iter().enumerate() {
            let s = score.unwrap_or(0.0);
            if s > best[c].0 {
                best[c] = (s, len);
            }
        }
    }
    let out = MedianFilterConfig {
        lengths: best.into_iter().map(|(_, l)| l).collect(),
        threshold,
    };
    out.validate()?;
    Ok(out)
}
