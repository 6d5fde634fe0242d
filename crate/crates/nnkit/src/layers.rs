//! Parameter groups for the layers built on the tape.

use rand::Rng;

use crate::error::Result;
use crate::param::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Uniform(−bound, bound) tensor.
pub fn uniform<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = if bound > 0.0 {
        (0..n).map(|_| rng.random_range(-bound..bound)).collect()
    } else {
        vec![0.0; n]
    };
    Tensor::new(shape.to_vec(), data).expect("shape product matches")
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    /// Registers `<prefix>/w` (`out × in`) and `<prefix>/b` with
    /// uniform(±1/√in) initialisation.
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        output: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = 1.0 / (input as f64).sqrt();
        let w = store.insert(format!("{prefix}/w"), uniform(rng, &[output, input], bound))?;
        let b = store.insert(format!("{prefix}/b"), uniform(rng, &[output], bound))?;
        Ok(Self { w, b, input, output })
    }

    pub fn lookup(store: &ParamStore, prefix: &str) -> Result<Self> {
        let w = store.require(&format!("{prefix}/w"))?;
        let b = store.require(&format!("{prefix}/b"))?;
        let (output, input) = store.value(w).dims2()?;
        Ok(Self { w, b, input, output })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w)?;
        let b = tape.param(store, self.b)?;
        tape.linear(x, w, Some(b))
    }

    pub fn num_scalars(input: usize, output: usize) -> usize {
        output * input + output
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Conv1d {
    pub w: ParamId,
    pub b: ParamId,
}

impl Conv1d {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = 1.0 / ((cin * kernel) as f64).sqrt();
        let w = store.insert(format!("{prefix}/w"), uniform(rng, &[cout, cin, kernel], bound))?;
        let b = store.insert(format!("{prefix}/b"), uniform(rng, &[cout], bound))?;
        Ok(Self { w, b })
    }

    pub fn lookup(store: &ParamStore, prefix: &str) -> Result<Self> {
        Ok(Self {
            w: store.require(&format!("{prefix}/w"))?,
            b: store.require(&format!("{prefix}/b"))?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w)?;
        let b = tape.param(store, self.b)?;
        tape.conv1d(x, w, b)
    }
}

/// One GRU direction.
#[derive(Clone, Copy, Debug)]
pub struct Gru {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl Gru {
    /// Registers `<prefix>/w_ih`, `<prefix>/w_hh`, `<prefix>/b`, all
    /// uniform(±1/√fan_in) with fan-in `in`, `hidden` and `hidden` respectively.
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let bi = 1.0 / (input as f64).sqrt();
        let bh = 1.0 / (hidden as f64).sqrt();
        let w_ih = store.insert(format!("{prefix}/w_ih"), uniform(rng, &[3 * hidden, input], bi))?;
        let w_hh = store.insert(format!("{prefix}/w_hh"), uniform(rng, &[3 * hidden, hidden], bh))?;
        let b = store.insert(format!("{prefix}/b"), uniform(rng, &[3 * hidden], bh))?;
        Ok(Self {
            w_ih,
            w_hh,
            b,
            input,
            hidden,
        })
    }

    pub fn lookup(store: &ParamStore, prefix: &str) -> Result<Self> {
        let w_ih = store.require(&format!("{prefix}/w_ih"))?;
        let w_hh = store.require(&format!("{prefix}/w_hh"))?;
        let b = store.require(&format!("{prefix}/b"))?;
        let (h3, input) = store.value(w_ih).dims2()?;
        Ok(Self {
            w_ih,
            w_hh,
            b,
            input,
            hidden: h3 / 3,
        })
    }

    pub fn num_scalars(input: usize, hidden: usize) -> usize {
        3 * hidden * input + 3 * hidden * hidden + 3 * hidden
    }

    pub fn sequence(&self, tape: &mut Tape, store: &ParamStore, x: Var, reverse: bool) -> Result<Var> {
        let w_ih = tape.param(store, self.w_ih)?;
        let w_hh = tape.param(store, self.w_hh)?;
        let b = tape.param(store, self.b)?;
        tape.gru_sequence(x, w_ih, w_hh, b, reverse)
    }

    pub fn cell(&self, tape: &mut Tape, store: &ParamStore, x: Var, h: Var) -> Result<Var> {
        let w_ih = tape.param(store, self.w_ih)?;
        let w_hh = tape.param(store, self.w_hh)?;
        let b = tape.param(store, self.b)?;
        tape.gru_cell(x, h, w_ih, w_hh, b)
    }
}

/// Bidirectional GRU layer: forward and reverse passes concatenated per step.
#[derive(Clone, Copy, Debug)]
pub struct BiGru {
    pub fwd: Gru,
    pub bwd: Gru,
}

impl BiGru {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            fwd: Gru::register(store, &format!("{prefix}_fwd"), input, hidden, rng)?,
            bwd: Gru::register(store, &format!("{prefix}_bwd"), input, hidden, rng)?,
        })
    }

    pub fn lookup(store: &ParamStore, prefix: &str) -> Result<Self> {
        Ok(Self {
            fwd: Gru::lookup(store, &format!("{prefix}_fwd"))?,
            bwd: Gru::lookup(store, &format!("{prefix}_bwd"))?,
        })
    }

    pub fn output_width(&self) -> usize {
        self.fwd.hidden + self.bwd.hidden
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let f = self.fwd.sequence(tape, store, x, false)?;
        let b = self.bwd.sequence(tape, store, x, true)?;
        tape.concat_cols(&[f, b])
    }
}
