//! Synthetic scenes: random per-class events rendered as decaying feature
//! templates with onset and offset transients under Gaussian noise.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal, Poisson};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::event::{sort_events, Event};
use crate::io::Features;

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub n_classes: usize,
    pub clip_len: f64,
    pub frame_dur: f64,
    pub n_features: usize,
    /// Poisson mean of the event count, per class.
    pub events_per_clip: Vec<f64>,
    /// Mean event duration in seconds, per class (log-normal).
    pub mean_durations: Vec<f64>,
    /// Standard deviation of log-duration.
    pub duration_sigma: f64,
    /// Time constant of the in-event amplitude decay, per class; `None`
    /// keeps the template at full amplitude.
    pub decay: Vec<Option<f64>>,
    /// Amplitude the decay settles to, relative to the onset amplitude.
    pub decay_floor: f64,
    /// Scale of the onset and offset transient vectors.
    pub onset_gain: f64,
    pub offset_gain: f64,
    pub noise: f64,
    /// Minimum silence between two events of one class, seconds.
    pub min_gap: f64,
    /// Allow events of one class to overlap.
    pub allow_overlap: bool,
    /// Onset draws per event before it is dropped for lack of room.
    pub max_attempts: usize,
    pub seed: u64,
}

impl SceneConfig {
    /// Benchmark scenes: ten-second clips, five classes with mean
    /// durations between 0.4 and 3 s, boundary transients and decaying
    /// in-event evidence at moderate noise.
    pub fn reference(seed: u64) -> Self {
        Self {
            n_classes: 5,
            clip_len: 10.0,
            frame_dur: 0.1,
            n_features: 16,
            events_per_clip: vec![1.2, 1.0, 0.9, 0.8, 0.7],
            mean_durations: vec![0.4, 0.8, 1.5, 2.2, 3.0],
            duration_sigma: 0.5,
            decay: vec![Some(0.4), Some(0.6), Some(0.8), Some(1.0), Some(1.2)],
            decay_floor: 0.2,
            onset_gain: 1.5,
            offset_gain: 1.5,
            noise: 0.6,
            min_gap: 0.3,
            allow_overlap: false,
            max_attempts: 20,
            seed,
        }
    }

    pub fn n_frames(&self) -> usize {
        (self.clip_len / self.frame_dur).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.n_classes;
        let bad = |m: String| Err(Error::Config(m));
        if c == 0 || self.n_features == 0 {
            return bad("need at least one class and one feature".into());
        }
        if self.events_per_clip.len() != c || self.mean_durations.len() != c || self.decay.len() != c {
            return bad(format!("per-class settings must have {c} entries"));
        }
        if !(self.frame_dur > 0.0 && self.clip_len > 0.0) {
            return bad("clip length and frame duration must be positive".into());
        }
        let frames = self.clip_len / self.frame_dur;
        if (frames - frames.round()).abs() > 1e-6 {
            return bad(format!(
                "frame duration {} does not divide clip length {}",
                self.frame_dur, self.clip_len
            ));
        }
        if self.mean_durations.iter().any(|&m| !(m > 0.0 && m < self.clip_len))
            || self.events_per_clip.iter().any(|&r| !(r >= 0.0 && r.is_finite()))
        {
            return bad("durations must lie in (0, clip length) and rates be non-negative".into());
        }
        for (cls, (&r, &m)) in self.events_per_clip.iter().zip(&self.mean_durations).enumerate() {
            if r * (m + self.min_gap) > self.clip_len {
                return bad(format!(
                    "class {cls}: expected event mass {:.2} s exceeds the {} s clip",
                    r * (m + self.min_gap),
                    self.clip_len
                ));
            }
        }
        if self.decay.iter().flatten().any(|&d| !(d > 0.0)) || !(0.0..=1.0).contains(&self.decay_floor) {
            return bad("decay constants must be positive and the floor in [0, 1]".into());
        }
        if !(self.duration_sigma >= 0.0 && self.noise >= 0.0 && self.min_gap >= 0.0) {
            return bad("sigma, noise and gap must be non-negative".into());
        }
        if self.max_attempts == 0 {
            return bad("max_attempts must be at least 1".into());
        }
        Ok(())
    }
}

/// Fixed random vectors shared by every clip of a dataset.
#[derive(Clone, Debug)]
pub struct Templates {
    /// `C × F`, unit norm rows.
    pub body: Array2<f64>,
    pub onset: Array2<f64>,
    pub offset: Array2<f64>,
}

impl Templates {
    pub fn new(cfg: &SceneConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(0);
        let unit_rows = |rng: &mut ChaCha8Rng| {
            let mut m = Array2::from_shape_fn((cfg.n_classes, cfg.n_features), |_| {
                rng.sample::<f64, _>(rand_distr::StandardNormal)
            });
            for mut row in m.rows_mut() {
                let n = row.dot(&row).sqrt().max(1e-12);
                row.mapv_inplace(|v| v / n);
            }
            m
        };
        let body = unit_rows(&mut rng);
        let onset = unit_rows(&mut rng);
        let offset = unit_rows(&mut rng);
        Self { body, onset, offset }
    }
}

#[derive(Clone, Debug)]
pub struct Clip {
    pub id: String,
    pub features: Features,
    pub events: Vec<Event>,
}

pub fn clip_id(index: usize) -> String {
    format!("clip{index:05}")
}

fn clip_rng(cfg: &SceneConfig, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// Log-normal with the given mean: `μ = ln m − σ²/2`.
fn duration_dist(mean: f64, sigma: f64) -> Result<LogNormal<f64>> {
    LogNormal::new(mean.ln() - 0.5 * sigma * sigma, sigma).map_err(|e| Error::Config(e.to_string()))
}

/// Draws the events of one clip.
pub fn sample_events<R: Rng + ?Sized>(cfg: &SceneConfig, rng: &mut R) -> Result<Vec<Event>> {
    let mut events = Vec::new();
    for c in 0..cfg.n_classes {
        let rate = cfg.events_per_clip[c];
        let n = if rate > 0.0 {
            Poisson::new(rate).map_err(|e| Error::Config(e.to_string()))?.sample(rng) as usize
        } else {
            0
        };
        let durs = duration_dist(cfg.mean_durations[c], cfg.duration_sigma)?;
        let mut placed: Vec<(f64, f64)> = Vec::new();
        for _ in 0..n {
            let d: f64 = durs.sample(rng).min(cfg.clip_len);
            for _ in 0..cfg.max_attempts {
                let start = rng.random_range(0.0..=cfg.clip_len - d);
                let end = (start + d).min(cfg.clip_len);
                let clash = !cfg.allow_overlap
                    && placed
                        .iter()
                        .any(|&(s, e)| start < e + cfg.min_gap && s < end + cfg.min_gap);
                if !clash && end > start {
                    placed.push((start, end));
                    events.push(Event::truth(c, start, end)?);
                    break;
                }
            }
        }
    }
    sort_events(&mut events);
    Ok(events)
}

/// Renders events into an `F × T` feature matrix.
///
/// Each event contributes its class body vector scaled by the decay
/// envelope and by the fraction of each frame it covers, plus onset and
/// offset transients in the frames holding its boundaries.
pub fn render<R: Rng + ?Sized>(
    cfg: &SceneConfig,
    templates: &Templates,
    events: &[Event],
    rng: &mut R,
) -> Result<Features> {
    let n = cfg.n_frames();
    let dt = cfg.frame_dur;
    let mut x = Array2::<f64>::zeros((cfg.n_features, n));
    for e in events {
        if e.class >= cfg.n_classes {
            return Err(Error::InvalidArgument(format!("class {} out of range", e.class)));
        }
        let first = ((e.start / dt).floor() as usize).min(n.saturating_sub(1));
        let last = (((e.end / dt).ceil() as usize).max(first + 1) - 1).min(n.saturating_sub(1));
        for f in first..=last {
            let (lo, hi) = (f as f64 * dt, (f + 1) as f64 * dt);
            let cover = (hi.min(e.end) - lo.max(e.start)).max(0.0) / dt;
            let mid = ((lo + hi) / 2.0).clamp(e.start, e.end) - e.start;
            let env = match cfg.decay[e.class] {
                Some(tau) => cfg.decay_floor + (1.0 - cfg.decay_floor) * (-mid / tau).exp(),
                None => 1.0,
            };
            let mut col = x.column_mut(f);
            col.scaled_add(cover * env, &templates.body.row(e.class));
            if f == first {
                col.scaled_add(cfg.onset_gain, &templates.onset.row(e.class));
            }
            if f == last {
                col.scaled_add(cfg.offset_gain, &templates.offset.row(e.class));
            }
        }
    }
    if cfg.noise > 0.0 {
        let normal = Normal::new(0.0, cfg.noise).map_err(|e| Error::Config(e.to_string()))?;
        x.mapv_inplace(|v| v + normal.sample(rng));
    }
    Ok(Features {
        values: x.mapv(|v| v as f32),
        frame_dur: dt,
    })
}

pub fn generate_clip(cfg: &SceneConfig, templates: &Templates, index: usize) -> Result<Clip> {
    let mut rng = clip_rng(cfg, index);
    let events = sample_events(cfg, &mut rng)?;
    let features = render(cfg, templates, &events, &mut rng)?;
    Ok(Clip {
        id: clip_id(index),
        features,
        events,
    })
}

/// Clips `first..first + n`; each clip draws from its own stream, so the
/// result does not depend on thread count or on which range is requested.
pub fn generate_range(cfg: &SceneConfig, first: usize, n: usize) -> Result<Vec<Clip>> {
    cfg.validate()?;
    let templates = Templates::new(cfg);
    (first..first + n)
        .into_par_iter()
        .map(|i| generate_clip(cfg, &templates, i))
        .collect()
}

pub fn generate_dataset(cfg: &SceneConfig, n: usize) -> Result<Vec<Clip>> {
    if n == 0 {
        return Err(Error::Config("need at least one clip".into()));
    }
    generate_range(cfg, 0, n)
}
