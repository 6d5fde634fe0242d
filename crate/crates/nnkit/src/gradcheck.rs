//! Central finite-difference checks against tape gradients.

use crate::error::Result;
use crate::param::{ParamId, ParamStore};
use crate::tape::{Tape, Var};

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Clone, Debug)]
pub struct CoordCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

/// Compares tape gradients of `build` (which records a scalar loss on a
/// fresh tape) with central differences of step `h` at each coordinate.
pub fn check_params<F>(
    store: &ParamStore,
    coords: &[(ParamId, usize)],
    h: f64,
    floor: f64,
    mut build: F,
) -> Result<Vec<CoordCheck>>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut work = store.clone();
    work.zero_grad();
    let mut tape = Tape::new();
    let loss = build(&mut tape, &work)?;
    tape.backward_into(loss, &mut work)?;
    let analytic = work.clone();

    let mut eval = |s: &ParamStore| -> Result<f64> {
        let mut t = Tape::new();
        let l = build(&mut t, s)?;
        t.value(l).item()
    };

    let mut out = Vec::with_capacity(coords.len());
    for &(id, index) in coords {
        let orig = work.value(id).data()[index];
        work.value_mut(id).data_mut()[index] = orig + h;
        let up = eval(&work)?;
        work.value_mut(id).data_mut()[index] = orig - h;
        let down = eval(&work)?;
        work.value_mut(id).data_mut()[index] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic.grad(id).data()[index];
        out.push(CoordCheck {
            param: work.name(id).to_owned(),
            index,
            analytic: a,
            numeric,
            rel_error: rel_error(a, numeric, floor),
        });
    }
    Ok(out)
}

/// Central difference of a scalar function of a vector, coordinate `i`.
pub fn central_difference(f: &mut impl FnMut(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut xp = x.to_vec();
    xp[i] = x[i] + h;
    let up = f(&xp);
    xp[i] = x[i] - h;
    let down = f(&xp);
    (up - down) / (2.0 * h)
}

/// Every `(param, index)` coordinate in the store.
pub fn all_coords(store: &ParamStore) -> Vec<(ParamId, usize)> {
    store
        .ids()
        .flat_map(|id| (0..store.value(id).numel()).map(move |i| (id, i)))
        .collect()
}
