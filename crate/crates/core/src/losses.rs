//! Training objectives: frame-wise presence cross-entropy, focal loss on
//! onset/offset probabilities, the duration IoU loss for region proposals
//! and their weighted total.

use ndarray::Array2;
use nnkit::{CustomOp, Tensor};

use crate::error::{Error, Result};
use crate::event::Event;

/// Tolerance used when mapping times onto frame indices.
const INDEX_SLACK: f64 = 1e-9;

/// Frame-level labels and duration targets derived from annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameTargets {
    pub presence: Array2<f64>,
    pub onset: Array2<f64>,
    pub offset: Array2<f64>,
    /// Seconds since onset, valid where `presence == 1`.
    pub d_on: Array2<f64>,
    /// Seconds until offset, valid where `presence == 1`.
    pub d_off: Array2<f64>,
    pub frame_dur: f64,
}

impl FrameTargets {
    pub fn n_classes(&self) -> usize {
        self.presence.nrows()
    }

    pub fn n_frames(&self) -> usize {
        self.presence.ncols()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// Focal exponent.
    pub alpha: f64,
    pub lambda_ool: f64,
    pub lambda_iou: f64,
    /// Probabilities are clamped to `[eps, 1 − eps]` before logs.
    pub eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 2.0,
            lambda_ool: 100.0,
            lambda_iou: 1.0,
            eps: 1e-7,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !(self.lambda_ool >= 0.0) || !(self.lambda_iou >= 0.0) {
            return Err(Error::Config(format!(
                "alpha and lambdas must be non-negative: {self:?}"
            )));
        }
        if !(self.eps > 0.0 && self.eps < 1e-3) {
            return Err(Error::Config(format!("eps must lie in (0, 1e-3), got {}", self.eps)));
        }
        Ok(())
    }
}

/// Rasterises events into frame labels.
///
/// Frame `f` covers `[fΔt, (f+1)Δt)`. An event occupies frames
/// `floor(start/Δt) ..= min(ceil(end/Δt) − 1, T − 1)` (at least one frame).
/// Durations are measured from the frame centre clamped into the event, so
/// `d_on + d_off` always equals the event duration. Where events of one
/// class overlap, the event with the latest onset owns the duration targets.
pub fn derive_frame_targets(
    events: &[Event],
    n_classes: usize,
    n_frames: usize,
    frame_dur: f64,
) -> Result<FrameTargets> {
    if !(frame_dur > 0.0) {
        return Err(Error::InvalidArgument(format!("frame duration {frame_dur}")));
    }
    let clip = n_frames as f64 * frame_dur;
    let shape = (n_classes, n_frames);
    let mut t = FrameTargets {
        presence: Array2::zeros(shape),
        onset: Array2::zeros(shape),
        offset: Array2::zeros(shape),
        d_on: Array2::zeros(shape),
        d_off: Array2::zeros(shape),
        frame_dur,
    };
    let mut order: Vec<&Event> = events.iter().collect();
    order.sort_by(|a, b| a.start.total_cmp(&b.start));
    for e in order {
        if e.end <= e.start {
            return Err(Error::InvalidEvent(format!(
                "onset {} not before offset {}",
                e.start, e.end
            )));
        }
        if e.class >= n_classes {
            return Err(Error::InvalidArgument(format!(
                "class {} out of {n_classes}",
                e.class
            )));
        }
        if e.start < -INDEX_SLACK || e.end > clip + INDEX_SLACK {
            return Err(Error::InvalidEvent(format!(
                "event [{}, {}] outside clip [0, {clip}]",
                e.start, e.end
            )));
        }
        if n_frames == 0 {
            continue;
        }
        let first = ((e.start / frame_dur + INDEX_SLACK).floor().max(0.0) as usize).min(n_frames - 1);
        let last = ((e.end / frame_dur - INDEX_SLACK).ceil() as isize - 1).clamp(first as isize, n_frames as isize - 1)
            as usize;
        t.onset[[e.class, first]] = 1.0;
        t.offset[[e.class, last]] = 1.0;
        for f in first..=last {
            let centre = ((f as f64 + 0.5) * frame_dur).clamp(e.start, e.end);
            t.presence[[e.class, f]] = 1.0;
            t.d_on[[e.class, f]] = centre - e.start;
            t.d_off[[e.class, f]] = e.end - centre;
        }
    }
    Ok(t)
}

/// Focal term and its derivative with respect to `p`.
///
/// Positives contribute `−(1−p)^α log p`, negatives `−p^α log(1−p)`. `p`
/// is clamped to `[eps, 1−eps]`; the derivative is zero where clamping is
/// active.
pub fn focal_term(p: f64, y: f64, alpha: f64, eps: f64) -> (f64, f64) {
    let pc = p.clamp(eps, 1.0 - eps);
    let live = p == pc;
    if y >= 0.5 {
        let w = (1.0 - pc).powf(alpha);
        let v = -w * pc.ln();
        let dw = if alpha == 0.0 { 0.0 } else { -alpha * (1.0 - pc).powf(alpha - 1.0) };
        let d = -(dw * pc.ln() + w / pc);
        (v, if live { d } else { 0.0 })
    } else {
        let w = pc.powf(alpha);
        let v = -w * (1.0 - pc).ln();
        let dw = if alpha == 0.0 { 0.0 } else { alpha * pc.powf(alpha - 1.0) };
        let d = -(dw * (1.0 - pc).ln() - w / (1.0 - pc));
        (v, if live { d } else { 0.0 })
    }
}

/// Mean focal loss over all cells.
pub fn focal_loss(probs: &Array2<f64>, labels: &Array2<f64>, alpha: f64, eps: f64) -> Result<f64> {
    if probs.dim() != labels.dim() {
        return Err(Error::InvalidArgument(format!(
            "probabilities {:?} vs labels {:?}",
            probs.dim(),
            labels.dim()
        )));
    }
    if probs.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| focal_term(p, y, alpha, eps).0)
        .sum();
    Ok(sum / probs.len() as f64)
}

/// Onset and offset focal losses, each averaged over `C·T`.
pub fn focal_onoff_loss(
    onset: &Array2<f64>,
    offset: &Array2<f64>,
    targets: &FrameTargets,
    cfg: &LossConfig,
) -> Result<(f64, f64)> {
    Ok((
        focal_loss(onset, &targets.onset, cfg.alpha, cfg.eps)?,
        focal_loss(offset, &targets.offset, cfg.alpha, cfg.eps)?,
    ))
}

/// Mean binary cross-entropy of presence probabilities.
pub fn presence_loss(presence: &Array2<f64>, targets: &FrameTargets, eps: f64) -> Result<f64> {
    focal_loss(presence, &targets.presence, 0.0, eps)
}

/// Per-frame `1 − IoU` of `[−g_on, g_off]` and `[−p_on, p_off]` with the
/// derivatives with respect to `p_on` and `p_off`. Both intervals contain the
/// origin, so the intersection is `min + min` and the union `max + max`.
pub fn interval_iou_term(g_on: f64, g_off: f64, p_on: f64, p_off: f64) -> (f64, f64, f64) {
    let inter = g_on.min(p_on) + g_off.min(p_off);
    let union = g_on.max(p_on) + g_off.max(p_off);
    if union <= 0.0 {
        return (0.0, 0.0, 0.0);
    }
    let iou = inter / union;
    let d = |g: f64, p: f64| {
        let (di, du) = if p < g { (1.0, 0.0) } else { (0.0, 1.0) };
        -(di * union - inter * du) / (union * union)
    };
    (1.0 - iou, d(g_on, p_on), d(g_off, p_off))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IouLoss {
    pub value: f64,
    /// Active frames skipped because their annotated duration is zero.
    pub excluded: usize,
}

/// Duration-weighted IoU loss over active frames; 0 when there are none.
pub fn iou_loss(d_on: &Array2<f64>, d_off: &Array2<f64>, targets: &FrameTargets) -> Result<IouLoss> {
    if d_on.dim() != targets.presence.dim() || d_off.dim() != targets.presence.dim() {
        return Err(Error::InvalidArgument("proposal and target shapes differ".into()));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    let mut excluded = 0usize;
    for ((idx, &y), (&po, &pf)) in targets.presence.indexed_iter().zip(d_on.iter().zip(d_off)) {
        if y < 0.5 {
            continue;
        }
        let (go, gf) = (targets.d_on[idx], targets.d_off[idx]);
        let dur = go + gf;
        if dur <= 0.0 {
            excluded += 1;
            continue;
        }
        sum += interval_iou_term(go, gf, po, pf).0 / dur;
        count += 1;
    }
    Ok(IouLoss {
        value: if count == 0 { 0.0 } else { sum / count as f64 },
        excluded,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub presence: f64,
    pub onset: f64,
    pub offset: f64,
    pub iou: f64,
}

/// `L_pres + λ_ool (L_on + L_off) + λ_iou L_iou`.
pub fn total_loss(parts: &LossParts, cfg: &LossConfig) -> f64 {
    parts.presence + cfg.lambda_ool * (parts.onset + parts.offset) + cfg.lambda_iou * parts.iou
}

/// Mean focal loss as a tape operation on a probability tensor with the
/// same element count as `labels`.
pub struct FocalOp {
    labels: Vec<f64>,
    alpha: f64,
    eps: f64,
}

impl FocalOp {
    pub fn new(labels: &Array2<f64>, alpha: f64, eps: f64) -> Self {
        Self {
            labels: labels.iter().copied().collect(),
            alpha,
            eps,
        }
    }
}

impl CustomOp for FocalOp {
    fn name(&self) -> &'static str {
        "focal_loss"
    }

    fn forward(&mut self, inputs: &[&Tensor]) -> nnkit::Result<Tensor> {
        let p = single_input(inputs, self.labels.len(), "focal_loss")?;
        if p.numel() == 0 {
            return Ok(Tensor::scalar(0.0));
        }
        let sum: f64 = p
            .data()
            .iter()
            .zip(&self.labels)
            .map(|(&p, &y)| focal_term(p, y, self.alpha, self.eps).0)
            .sum();
        Ok(Tensor::scalar(sum / p.numel() as f64))
    }

    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor) -> nnkit::Result<Vec<Option<Tensor>>> {
        let p = inputs[0];
        let scale = grad.item()? / p.numel().max(1) as f64;
        let g = p.map_indexed(|i, v| scale * focal_term(v, self.labels[i], self.alpha, self.eps).1);
        Ok(vec![Some(g)])
    }
}

/// IoU loss as a tape operation.
///
/// Input: durations in seconds, `T × 2C`, column `2c` = time since onset and
/// `2c+1` = time to offset for class `c`.
pub struct IouOp {
    /// (t, c, g_on, g_off) for every active frame with positive duration.
    frames: Vec<(usize, usize, f64, f64)>,
    n_classes: usize,
    n_frames: usize,
}

impl IouOp {
    pub fn new(targets: &FrameTargets) -> Self {
        let mut frames = Vec::new();
        for ((c, t), &y) in targets.presence.indexed_iter() {
            let (go, gf) = (targets.d_on[[c, t]], targets.d_off[[c, t]]);
            if y >= 0.5 && go + gf > 0.0 {
                frames.push((t, c, go, gf));
            }
        }
        Self {
            frames,
            n_classes: targets.n_classes(),
            n_frames: targets.n_frames(),
        }
    }
}

impl CustomOp for IouOp {
    fn name(&self) -> &'static str {
        "iou_loss"
    }

    fn forward(&mut self, inputs: &[&Tensor]) -> nnkit::Result<Tensor> {
        let d = single_input(inputs, self.n_frames * 2 * self.n_classes, "iou_loss")?;
        if self.frames.is_empty() {
            return Ok(Tensor::scalar(0.0));
        }
        let w = 2 * self.n_classes;
        let sum: f64 = self
            .frames
            .iter()
            .map(|&(t, c, go, gf)| {
                let (po, pf) = (d.data()[t * w + 2 * c], d.data()[t * w + 2 * c + 1]);
                interval_iou_term(go, gf, po, pf).0 / (go + gf)
            })
            .sum();
        Ok(Tensor::scalar(sum / self.frames.len() as f64))
    }

    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor) -> nnkit::Result<Vec<Option<Tensor>>> {
        let d = inputs[0];
        let mut g = Tensor::zeros(d.shape());
        if self.frames.is_empty() {
            return Ok(vec![Some(g)]);
        }
        let scale = grad.item()? / self.frames.len() as f64;
        let w = 2 * self.n_classes;
        for &(t, c, go, gf) in &self.frames {
            let (io, iff) = (t * w + 2 * c, t * w + 2 * c + 1);
            let (_, d_on, d_off) = interval_iou_term(go, gf, d.data()[io], d.data()[iff]);
            let k = scale / (go + gf);
            g.data_mut()[io] += k * d_on;
            g.data_mut()[iff] += k * d_off;
        }
        Ok(vec![Some(g)])
    }
}

fn single_input<'a>(inputs: &[&'a Tensor], numel: usize, op: &str) -> nnkit::Result<&'a Tensor> {
    match inputs {
        [x] if x.numel() == numel => Ok(x),
        _ => Err(nnkit::NnError::InvalidArgument(format!(
            "{op} expects one input with {numel} elements"
        ))),
    }
}

trait MapIndexed {
    fn map_indexed(&self, f: impl Fn(usize, f64) -> f64) -> Tensor;
}

impl MapIndexed for Tensor {
    fn map_indexed(&self, f: impl Fn(usize, f64) -> f64) -> Tensor {
        let data = self.data().iter().enumerate().map(|(i, &v)| f(i, v)).collect();
        Tensor::new(self.shape().to_vec(), data).expect("same shape")
    }
}
