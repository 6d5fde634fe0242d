//! Proposal-based event inference: pick the most active classes, then per
//! class greedily emit the highest-presence frame proposal and suppress
//! every remaining proposal that overlaps it.

use ndarray::Array2;

use crate::epn::RegionProposals;
use crate::error::{Error, Result};
use crate::event::{sort_events, Event};
use crate::red::BoundaryProbabilities;

/// Slack on the minimum-length comparison so a one-frame event survives
/// floating-point round-off.
const LENGTH_SLACK: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InferenceConfig {
    /// Maximum events per class.
    pub k: usize,
    /// Maximum classes per clip; `None` keeps all.
    pub m: Option<usize>,
    /// Minimum emitted event length in seconds; `None` means one frame.
    pub min_len: Option<f64>,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            k: 15,
            m: None,
            min_len: None,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self, n_classes: usize) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if let Some(m) = self.m {
            if m == 0 || m > n_classes.max(1) {
                return Err(Error::Config(format!("m must lie in 1..={n_classes}, got {m}")));
            }
        }
        if let Some(l) = self.min_len {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(Error::Config(format!("minimum event length {l}")));
            }
        }
        Ok(())
    }
}

/// The `m` classes with the highest mean presence, best first; ties keep the
/// lower class index first.
pub fn class_preselect(presence: &Array2<f64>, m: usize) -> Vec<usize> {
    let n = presence.ncols().max(1) as f64;
    let means: Vec<f64> = presence.rows().into_iter().map(|r| r.iter().sum::<f64>() / n).collect();
    let mut order: Vec<usize> = (0..means.len()).collect();
    order.sort_by(|&a, &b| means[b].total_cmp(&means[a]));
    order.truncate(m);
    order
}

pub fn infer_events(
    probs: &BoundaryProbabilities,
    proposals: &RegionProposals,
    cfg: &InferenceConfig,
) -> Result<Vec<Event>> {
    let (c, n) = (probs.n_classes(), probs.n_frames());
    if proposals.d_on.dim() != (c, n) || proposals.d_off.dim() != (c, n) {
        return Err(Error::InvalidArgument(format!(
            "proposals {:?} do not match probabilities {:?}",
            proposals.d_on.dim(),
            (c, n)
        )));
    }
    if (proposals.frame_dur - probs.frame_dur).abs() > 1e-9 * probs.frame_dur.max(1.0) {
        return Err(Error::InvalidArgument("proposal and probability frame durations differ".into()));
    }
    cfg.validate(c)?;
    if n == 0 || c == 0 {
        return Ok(Vec::new());
    }
    let dt = probs.frame_dur;
    let min_len = cfg.min_len.unwrap_or(dt) - LENGTH_SLACK;
    let mut out = Vec::new();
    for class in class_preselect(&probs.presence, cfg.m.unwrap_or(c)) {
        for e in select_class(probs, proposals, class, cfg.k)? {
            if e.duration() >= min_len {
                out.push(e);
            }
        }
    }
    sort_events(&mut out);
    Ok(out)
}

/// Greedy selection for one class, before the minimum-length filter.
fn select_class(
    probs: &BoundaryProbabilities,
    proposals: &RegionProposals,
    class: usize,
    k: usize,
) -> Result<Vec<Event>> {
    let n = probs.n_frames();
    let dt = probs.frame_dur;
    let clip = n as f64 * dt;
    let pres = probs.presence.row(class);
    let spans: Vec<(f64, f64)> = (0..n)
        .map(|f| {
            let (lo, hi) = proposals.interval(class, f);
            (lo.max(0.0), hi.min(clip))
        })
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| pres[b].total_cmp(&pres[a]));
    let mut alive = vec![true; n];
    let mut events = Vec::new();
    for &best in &order {
        if events.len() == k {
            break;
        }
        if !alive[best] {
            continue;
        }
        let (lo, hi) = spans[best];
        let mut sum = 0.0;
        let mut count = 0usize;
        for f in 0..n {
            let centre = (f as f64 + 0.5) * dt;
            if centre >= lo && centre <= hi {
                sum += pres[f];
                count += 1;
            }
            if alive[f] && spans[f].0 <= hi && lo <= spans[f].1 {
                alive[f] = false;
            }
        }
        let conf = if count == 0 { pres[best] } else { sum / count as f64 };
        if hi > lo {
            events.push(Event::new(class, lo, hi, conf.clamp(0.0, 1.0))?);
        }
    }
    Ok(events)
}
