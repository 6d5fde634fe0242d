//! Recurrent event detection (RED).
//!
//! Conditional event-start probabilities `s_t = P(e_t | ¬e_{t-1})` and
//! event-end probabilities `q_t = P(¬e_t | e_{t-1})` drive the presence
//! recurrence
//!
//! ```text
//! P(e_t)       = s_t · (1 − P(e_{t-1})) + (1 − q_t) · P(e_{t-1})
//! onset_t      = s_t · (1 − P(e_{t-1}))
//! offset_t     = q_t · P(e_{t-1})
//! ```
//!
//! which is the affine recurrence `x_t = (1 − s_t − q_t) x_{t-1} + s_t`.
//! The coefficient may be negative (`s_t + q_t > 1`), so the parallel form
//! scans signed affine maps. Classes are independent.

use ndarray::{Array2, ArrayView1, Axis};
use nnkit::scan::{affine_scan, affine_scan_reverse};
use nnkit::{CustomOp, Tensor};
use num_traits::Float;

use crate::error::{Error, Result};

/// Per-class, per-frame conditional start/end probabilities (`C × T`).
#[derive(Clone, Debug, PartialEq)]
pub struct FramePosteriors<T = f64> {
    pub start: Array2<T>,
    pub end: Array2<T>,
    /// Frame duration in seconds.
    pub frame_dur: f64,
}

impl<T: Float> FramePosteriors<T> {
    /// Checks shapes and that every value lies in `[0, 1]`.
    ///
    /// Probabilities coming from a logistic output are strictly inside the
    /// interval; the closed interval is accepted so degenerate switch-on /
    /// switch-off inputs can be expressed directly.
    pub fn new(start: Array2<T>, end: Array2<T>, frame_dur: f64) -> Result<Self> {
        if start.dim() != end.dim() {
            return Err(Error::InvalidArgument(format!(
                "start {:?} and end {:?} shapes differ",
                start.dim(),
                end.dim()
            )));
        }
        if !(frame_dur > 0.0 && frame_dur.is_finite()) {
            return Err(Error::InvalidArgument(format!("frame duration {frame_dur}")));
        }
        let in_unit = |v: &T| *v >= T::zero() && *v <= T::one();
        if !start.iter().all(in_unit) || !end.iter().all(in_unit) {
            return Err(Error::InvalidArgument(
                "posteriors must lie in [0, 1]".into(),
            ));
        }
        Ok(Self {
            start,
            end,
            frame_dur,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.start.nrows()
    }

    pub fn n_frames(&self) -> usize {
        self.start.ncols()
    }
}

/// Presence, onset and offset probabilities (`C × T` each).
#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryProbabilities<T = f64> {
    pub presence: Array2<T>,
    pub onset: Array2<T>,
    pub offset: Array2<T>,
    pub frame_dur: f64,
}

impl<T: Float> BoundaryProbabilities<T> {
    pub fn n_classes(&self) -> usize {
        self.presence.nrows()
    }

    pub fn n_frames(&self) -> usize {
        self.presence.ncols()
    }
}

/// Upstream gradients on the three RED outputs.
#[derive(Clone, Debug)]
pub struct BoundaryGrads {
    pub presence: Array2<f64>,
    pub onset: Array2<f64>,
    pub offset: Array2<f64>,
}

/// Gradients of a scalar loss with respect to RED inputs.
#[derive(Clone, Debug)]
pub struct PosteriorGrads {
    pub start: Array2<f64>,
    pub end: Array2<f64>,
    /// Summed over classes.
    pub prior: f64,
}

fn check_prior<T: Float>(prior: T) -> Result<()> {
    if prior >= T::zero() && prior <= T::one() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "prior must lie in [0, 1], got {}",
            prior.to_f64().unwrap_or(f64::NAN)
        )))
    }
}

/// One class, evaluated frame by frame.
pub fn red_row_sequential<T: Float>(
    s: &[T],
    q: &[T],
    prior: T,
    presence: &mut [T],
    onset: &mut [T],
    offset: &mut [T],
) {
    let mut prev = prior;
    for t in 0..s.len() {
        let on = s[t] * (T::one() - prev);
        let stay = (T::one() - q[t]) * prev;
        onset[t] = on;
        offset[t] = q[t] * prev;
        prev = on + stay;
        presence[t] = prev;
    }
}

/// One class, evaluated as a scan over affine maps.
pub fn red_row_scan<T: Float>(
    s: &[T],
    q: &[T],
    prior: T,
    presence: &mut [T],
    onset: &mut [T],
    offset: &mut [T],
) {
    let a: Vec<T> = s.iter().zip(q).map(|(&s, &q)| T::one() - s - q).collect();
    affine_scan(&a, s, prior, presence);
    for t in 0..s.len() {
        let prev = if t == 0 { prior } else { presence[t - 1] };
        onset[t] = s[t] * (T::one() - prev);
        offset[t] = q[t] * prev;
    }
}

type RowFn<T> = fn(&[T], &[T], T, &mut [T], &mut [T], &mut [T]);

fn forward_with<T: Float>(
    post: &FramePosteriors<T>,
    prior: T,
    row: RowFn<T>,
) -> Result<BoundaryProbabilities<T>> {
    check_prior(prior)?;
    let (c, n) = post.start.dim();
    let mut presence = Array2::from_elem((c, n), T::zero());
    let mut onset = presence.clone();
    let mut offset = presence.clone();
    for k in 0..c {
        let s = post.start.row(k).to_vec();
        let q = post.end.row(k).to_vec();
        let mut p = vec![T::zero(); n];
        let mut on = vec![T::zero(); n];
        let mut off = vec![T::zero(); n];
        row(&s, &q, prior, &mut p, &mut on, &mut off);
        presence.row_mut(k).assign(&ArrayView1::from(&p));
        onset.row_mut(k).assign(&ArrayView1::from(&on));
        offset.row_mut(k).assign(&ArrayView1::from(&off));
    }
    Ok(BoundaryProbabilities {
        presence,
        onset,
        offset,
        frame_dur: post.frame_dur,
    })
}

/// RED forward pass, frame by frame.
pub fn forward_sequential<T: Float>(
    post: &FramePosteriors<T>,
    prior: T,
) -> Result<BoundaryProbabilities<T>> {
    forward_with(post, prior, red_row_sequential::<T>)
}

/// RED forward pass through the parallel affine scan.
pub fn forward_scan<T: Float>(
    post: &FramePosteriors<T>,
    prior: T,
) -> Result<BoundaryProbabilities<T>> {
    forward_with(post, prior, red_row_scan::<T>)
}

/// Adjoint of one class row. Returns the gradient on the prior.
#[allow(clippy::too_many_arguments)]
fn backward_row(
    s: &[f64],
    q: &[f64],
    prior: f64,
    presence: &[f64],
    g_pres: &[f64],
    g_on: &[f64],
    g_off: &[f64],
    ds: &mut [f64],
    dq: &mut [f64],
) -> f64 {
    let n = s.len();
    if n == 0 {
        return 0.0;
    }
    // λ_t = ∂L/∂x_t = g_pres_t + a_{t+1} λ_{t+1} − s_{t+1} g_on_{t+1} + q_{t+1} g_off_{t+1}
    let mut a_next = vec![0.0; n];
    let mut c = vec![0.0; n];
    for t in 0..n {
        c[t] = g_pres[t];
        if t + 1 < n {
            a_next[t] = 1.0 - s[t + 1] - q[t + 1];
            c[t] += -s[t + 1] * g_on[t + 1] + q[t + 1] * g_off[t + 1];
        }
    }
    let mut lambda = vec![0.0; n];
    affine_scan_reverse(&a_next, &c, &mut lambda);
    for t in 0..n {
        let prev = if t == 0 { prior } else { presence[t - 1] };
        ds[t] = (lambda[t] + g_on[t]) * (1.0 - prev);
        dq[t] = (g_off[t] - lambda[t]) * prev;
    }
    (1.0 - s[0] - q[0]) * lambda[0] - s[0] * g_on[0] + q[0] * g_off[0]
}

/// Exact reverse-time adjoint of the RED recurrence.
pub fn backward(
    post: &FramePosteriors<f64>,
    prior: f64,
    upstream: &BoundaryGrads,
) -> Result<PosteriorGrads> {
    check_prior(prior)?;
    let dim = post.start.dim();
    for (name, g) in [
        ("presence", &upstream.presence),
        ("onset", &upstream.onset),
        ("offset", &upstream.offset),
    ] {
        if g.dim() != dim {
            return Err(Error::InvalidArgument(format!(
                "{name} gradient shape {:?} differs from posteriors {dim:?}",
                g.dim()
            )));
        }
    }
    let fwd = forward_sequential(post, prior)?;
    let mut start = Array2::zeros(dim);
    let mut end = Array2::zeros(dim);
    let mut d_prior = 0.0;
    let n = dim.1;
    for k in 0..dim.0 {
        let mut ds = vec![0.0; n];
        let mut dq = vec![0.0; n];
        d_prior += backward_row(
            &post.start.row(k).to_vec(),
            &post.end.row(k).to_vec(),
            prior,
            &fwd.presence.row(k).to_vec(),
            &upstream.presence.row(k).to_vec(),
            &upstream.onset.row(k).to_vec(),
            &upstream.offset.row(k).to_vec(),
            &mut ds,
            &mut dq,
        );
        start.row_mut(k).assign(&ArrayView1::from(&ds));
        end.row_mut(k).assign(&ArrayView1::from(&dq));
    }
    Ok(PosteriorGrads {
        start,
        end,
        prior: d_prior,
    })
}

/// RED as a tape operation.
///
/// Inputs: start and end probabilities, both `C × T`. Output `3C × T`:
/// presence rows `0..C`, onset rows `C..2C`, offset rows `2C..3C`.
pub struct RedOp {
    pub prior: f64,
}

impl CustomOp for RedOp {
    fn name(&self) -> &'static str {
        "red"
    }

    fn forward(&mut self, inputs: &[&Tensor]) -> nnkit::Result<Tensor> {
        let (s, q) = red_inputs(inputs)?;
        let (c, n) = s.dims2()?;
        let mut out = vec![0.0; 3 * c * n];
        let (pres, rest) = out.split_at_mut(c * n);
        let (on, off) = rest.split_at_mut(c * n);
        for k in 0..c {
            let span = k * n..(k + 1) * n;
            red_row_scan(
                &s.data()[span.clone()],
                &q.data()[span.clone()],
                self.prior,
                &mut pres[span.clone()],
                &mut on[span.clone()],
                &mut off[span],
            );
        }
        Tensor::from_rows(3 * c, n, out)
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
    ) -> nnkit::Result<Vec<Option<Tensor>>> {
        let (s, q) = red_inputs(inputs)?;
        let (c, n) = s.dims2()?;
        let g = grad.data();
        let o = output.data();
        let mut ds = vec![0.0; c * n];
        let mut dq = vec![0.0; c * n];
        for k in 0..c {
            let span = k * n..(k + 1) * n;
            let row = |block: usize| &g[block * c * n + k * n..block * c * n + (k + 1) * n];
            backward_row(
                &s.data()[span.clone()],
                &q.data()[span.clone()],
                self.prior,
                &o[span.clone()],
                row(0),
                row(1),
                row(2),
                &mut ds[span.clone()],
                &mut dq[span],
            );
        }
        Ok(vec![
            Some(Tensor::from_rows(c, n, ds)?),
            Some(Tensor::from_rows(c, n, dq)?),
        ])
    }
}

fn red_inputs<'a>(inputs: &[&'a Tensor]) -> nnkit::Result<(&'a Tensor, &'a Tensor)> {
    match inputs {
        [s, q] if s.shape() == q.shape() && s.rank() == 2 => Ok((s, q)),
        _ => Err(nnkit::NnError::InvalidArgument(
            "red expects two C×T inputs of equal shape".into(),
        )),
    }
}

/// Splits a `3C × T` RED output back into its parts.
pub fn split_red_output(t: &Tensor, frame_dur: f64) -> Result<BoundaryProbabilities> {
    let (rows, n) = t.dims2()?;
    if rows % 3 != 0 {
        return Err(Error::InvalidArgument(format!("{rows} rows is not 3C")));
    }
    let c = rows / 3;
    let full = Array2::from_shape_vec((rows, n), t.data().to_vec())
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let part = |i: usize| {
        full.slice_axis(Axis(0), ndarray::Slice::from(i * c..(i + 1) * c))
            .to_owned()
    };
    Ok(BoundaryProbabilities {
        presence: part(0),
        onset: part(1),
        offset: part(2),
        frame_dur,
    })
}
