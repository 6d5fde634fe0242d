//! Gated recurrent unit kernels.
//!
//! Gate rows are ordered (update `z`, reset `r`, candidate `n`):
//!
//! ```text
//! z  = σ(W_iz x + b_z + W_hz h)
//! r  = σ(W_ir x + b_r + W_hr h)
//! n  = tanh(W_in x + b_n + W_hn (r ⊙ h))
//! h' = (1 − z) ⊙ h + z ⊙ n
//! ```
//!
//! `w_ih` is `3h × in`, `w_hh` is `3h × h`, `b` is `3h`.

use crate::tensor::{matvec_acc, matvec_t_acc, outer_acc};

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Per-step activations kept for the backward pass (each `hidden` long).
pub(crate) struct StepState<'a> {
    pub z: &'a [f64],
    pub r: &'a [f64],
    pub n: &'a [f64],
}

/// One recurrent step given precomputed input pre-activations `a`
/// (`W_ih x + b`, length `3h`). Writes gate activations and the new state.
pub(crate) fn step_forward(
    w_hh: &[f64],
    hidden: usize,
    a: &[f64],
    h_prev: &[f64],
    z: &mut [f64],
    r: &mut [f64],
    n: &mut [f64],
    h_out: &mut [f64],
    scratch: &mut [f64],
) {
    let h = hidden;
    // scratch: [u_z | u_r | rh] (3h)
    let (u, rh) = scratch.split_at_mut(2 * h);
    u.fill(0.0);
    matvec_acc(&w_hh[..2 * h * h], h, h_prev, u);
    for i in 0..h {
        z[i] = sigmoid(a[i] + u[i]);
        r[i] = sigmoid(a[h + i] + u[h + i]);
        rh[i] = r[i] * h_prev[i];
    }
    let un = &mut u[..h];
    un.fill(0.0);
    matvec_acc(&w_hh[2 * h * h..], h, rh, un);
    for i in 0..h {
        n[i] = (a[2 * h + i] + un[i]).tanh();
        h_out[i] = (1.0 - z[i]) * h_prev[i] + z[i] * n[i];
    }
}

/// Adjoint of [`step_forward`]. `dh` is the total gradient on the step
/// output. Writes `da` (length `3h`), accumulates into `dw_hh`, and writes
/// the gradient flowing to `h_prev` into `dh_prev`.
pub(crate) fn step_backward(
    w_hh: &[f64],
    hidden: usize,
    st: &StepState<'_>,
    h_prev: &[f64],
    dh: &[f64],
    da: &mut [f64],
    dw_hh: &mut [f64],
    dh_prev: &mut [f64],
    scratch: &mut [f64],
) {
    let h = hidden;
    let (rh, drh) = scratch.split_at_mut(h);
    let drh = &mut drh[..h];
    let (da_zr, da_n) = da.split_at_mut(2 * h);
    for i in 0..h {
        let dn = dh[i] * st.z[i];
        da_n[i] = dn * (1.0 - st.n[i] * st.n[i]);
        let dz = dh[i] * (st.n[i] - h_prev[i]);
        da_zr[i] = dz * st.z[i] * (1.0 - st.z[i]);
        dh_prev[i] = dh[i] * (1.0 - st.z[i]);
        rh[i] = st.r[i] * h_prev[i];
    }
    let w_hn = &w_hh[2 * h * h..];
    drh.fill(0.0);
    matvec_t_acc(w_hn, h, da_n, drh);
    for i in 0..h {
        let dr = drh[i] * h_prev[i];
        da_zr[h + i] = dr * st.r[i] * (1.0 - st.r[i]);
        dh_prev[i] += drh[i] * st.r[i];
    }
    matvec_t_acc(&w_hh[..2 * h * h], h, da_zr, dh_prev);
    outer_acc(&mut dw_hh[..2 * h * h], h, da_zr, h_prev);
    outer_acc(&mut dw_hh[2 * h * h..], h, da_n, rh);
}

/// Cached forward pass over a whole sequence.
#[derive(Clone, Debug)]
pub(crate) struct SeqCache {
    pub z: Vec<f64>,
    pub r: Vec<f64>,
    pub n: Vec<f64>,
}

/// Runs a GRU over `x` (`steps × input`, row-major) from a zero state.
/// Returns the hidden states aligned to input time (`steps × hidden`).
pub(crate) fn seq_forward(
    x: &[f64],
    steps: usize,
    input: usize,
    hidden: usize,
    w_ih: &[f64],
    w_hh: &[f64],
    b: &[f64],
    reverse: bool,
) -> (Vec<f64>, SeqCache) {
    let h3 = 3 * hidden;
    let mut a = vec![0.0; steps * h3];
    for t in 0..steps {
        let row = &mut a[t * h3..(t + 1) * h3];
        row.copy_from_slice(b);
        matvec_acc(w_ih, input, &x[t * input..(t + 1) * input], row);
    }
    let mut out = vec![0.0; steps * hidden];
    let mut cache = SeqCache {
        z: vec![0.0; steps * hidden],
        r: vec![0.0; steps * hidden],
        n: vec![0.0; steps * hidden],
    };
    let zeros = vec![0.0; hidden];
    let mut scratch = vec![0.0; h3];
    let mut h_prev = zeros.clone();
    for k in 0..steps {
        let t = if reverse { steps - 1 - k } else { k };
        let span = t * hidden..(t + 1) * hidden;
        let mut h_new = vec![0.0; hidden];
        step_forward(
            w_hh,
            hidden,
            &a[t * h3..(t + 1) * h3],
            &h_prev,
            &mut cache.z[span.clone()],
            &mut cache.r[span.clone()],
            &mut cache.n[span.clone()],
            &mut h_new,
            &mut scratch,
        );
        out[span].copy_from_slice(&h_new);
        h_prev = h_new;
    }
    (out, cache)
}

pub(crate) struct SeqGrads {
    pub dx: Option<Vec<f64>>,
    pub dw_ih: Vec<f64>,
    pub dw_hh: Vec<f64>,
    pub db: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn seq_backward(
    x: &[f64],
    steps: usize,
    input: usize,
    hidden: usize,
    w_ih: &[f64],
    w_hh: &[f64],
    out: &[f64],
    cache: &SeqCache,
    reverse: bool,
    d_out: &[f64],
    want_dx: bool,
) -> SeqGrads {
    let h3 = 3 * hidden;
    let mut da = vec![0.0; steps * h3];
    let mut dw_hh = vec![0.0; h3 * hidden];
    let mut carry = vec![0.0; hidden];
    let mut dh = vec![0.0; hidden];
    let mut dh_prev = vec![0.0; hidden];
    let mut scratch = vec![0.0; 2 * hidden];
    let zeros = vec![0.0; hidden];
    for k in (0..steps).rev() {
        let t = if reverse { steps - 1 - k } else { k };
        let span = t * hidden..(t + 1) * hidden;
        let h_prev: &[f64] = if k == 0 {
            &zeros
        } else {
            let tp = if reverse { t + 1 } else { t - 1 };
            &out[tp * hidden..(tp + 1) * hidden]
        };
        for i in 0..hidden {
            dh[i] = d_out[t * hidden + i] + carry[i];
        }
        let st = StepState {
            z: &cache.z[span.clone()],
            r: &cache.r[span.clone()],
            n: &cache.n[span],
        };
        step_backward(
            w_hh,
            hidden,
            &st,
            h_prev,
            &dh,
            &mut da[t * h3..(t + 1) * h3],
            &mut dw_hh,
            &mut dh_prev,
            &mut scratch,
        );
        std::mem::swap(&mut carry, &mut dh_prev);
    }
    let mut dw_ih = vec![0.0; h3 * input];
    let mut db = vec![0.0; h3];
    let mut dx = want_dx.then(|| vec![0.0; steps * input]);
    for t in 0..steps {
        let dat = &da[t * h3..(t + 1) * h3];
        let xt = &x[t * input..(t + 1) * input];
        outer_acc(&mut dw_ih, input, dat, xt);
        for (g, d) in db.iter_mut().zip(dat) {
            *g += d;
        }
        if let Some(dx) = dx.as_mut() {
            matvec_t_acc(w_ih, input, dat, &mut dx[t * input..(t + 1) * input]);
        }
    }
    SeqGrads {
        dx,
        dw_ih,
        dw_hh,
        db,
    }
}

/// One cell step `h' = GRU(x, h)` without a tape.
pub fn cell_forward(
    x: &[f64],
    h_prev: &[f64],
    w_ih: &[f64],
    w_hh: &[f64],
    b: &[f64],
) -> Vec<f64> {
    let hidden = h_prev.len();
    let input = x.len();
    assert_eq!(w_ih.len(), 3 * hidden * input);
    assert_eq!(w_hh.len(), 3 * hidden * hidden);
    assert_eq!(b.len(), 3 * hidden);
    let mut a = b.to_vec();
    matvec_acc(w_ih, input, x, &mut a);
    let mut z = vec![0.0; hidden];
    let mut r = vec![0.0; hidden];
    let mut n = vec![0.0; hidden];
    let mut h = vec![0.0; hidden];
    let mut scratch = vec![0.0; 3 * hidden];
    step_forward(
        w_hh, hidden, &a, h_prev, &mut z, &mut r, &mut n, &mut h, &mut scratch,
    );
    h
}
