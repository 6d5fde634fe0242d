//! Event proposal networks: two-layer bidirectional GRUs over the RED
//! outputs regressing, per frame, the time since onset and the time to
//! offset. Durations leave the network in frames and are scaled by Δt.

use ndarray::Array2;
use nnkit::layers::{BiGru, Linear};
use nnkit::{ParamStore, Tape, Tensor, Var};
use rand::Rng;

use crate::error::{Error, Result};
use crate::red::{BoundaryGrads, BoundaryProbabilities};

const LAYERS: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EpnVariant {
    /// One GRU stack per class on its `(presence, onset, offset)` rows.
    PerClass,
    /// One GRU stack over all `3C` rows.
    Single,
}

impl EpnVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            EpnVariant::PerClass => "per-class",
            EpnVariant::Single => "single",
        }
    }
}

impl std::str::FromStr for EpnVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-class" => Ok(EpnVariant::PerClass),
            "single" => Ok(EpnVariant::Single),
            _ => Err(Error::Config(format!("unknown EPN variant {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EpnConfig {
    pub variant: EpnVariant,
    pub hidden: usize,
    pub n_classes: usize,
}

impl EpnConfig {
    pub fn per_class(n_classes: usize) -> Self {
        Self {
            variant: EpnVariant::PerClass,
            hidden: 32,
            n_classes,
        }
    }

    pub fn single(n_classes: usize) -> Self {
        Self {
            variant: EpnVariant::Single,
            hidden: 256,
            n_classes,
        }
    }

    pub fn input_width(&self) -> usize {
        match self.variant {
            EpnVariant::PerClass => 3,
            EpnVariant::Single => 3 * self.n_classes,
        }
    }

    fn output_width(&self) -> usize {
        match self.variant {
            EpnVariant::PerClass => 2,
            EpnVariant::Single => 2 * self.n_classes,
        }
    }

    fn stacks(&self) -> usize {
        match self.variant {
            EpnVariant::PerClass => self.n_classes,
            EpnVariant::Single => 1,
        }
    }

    fn prefix(&self, stack: usize) -> String {
        match self.variant {
            EpnVariant::PerClass => format!("epn/per-class/{stack}"),
            EpnVariant::Single => "epn/single/shared".to_string(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.n_classes == 0 {
            return Err(Error::Config(format!("EPN needs hidden ≥ 1 and C ≥ 1: {self:?}")));
        }
        Ok(())
    }

    /// Parameters of one stack (one class for the per-class variant).
    pub fn stack_param_count(&self) -> usize {
        let h = self.hidden;
        let mut n = 0;
        let mut input = self.input_width();
        for _ in 0..LAYERS {
            n += 2 * nnkit::layers::Gru::num_scalars(input, h);
            input = 2 * h;
        }
        n + Linear::num_scalars(2 * h, self.output_width())
    }

    pub fn param_count(&self) -> usize {
        self.stacks() * self.stack_param_count()
    }
}

/// Per-frame duration estimates in seconds (`C × T`).
#[derive(Clone, Debug, PartialEq)]
pub struct RegionProposals {
    pub d_on: Array2<f64>,
    pub d_off: Array2<f64>,
    pub frame_dur: f64,
}

impl RegionProposals {
    /// Reads a `T × 2C` tape output (column `2c` on, `2c+1` off).
    pub fn from_tape_output(t: &Tensor, frame_dur: f64) -> Result<Self> {
        let (n, w) = t.dims2()?;
        if w % 2 != 0 {
            return Err(Error::InvalidArgument(format!("{w} proposal columns")));
        }
        let c = w / 2;
        let d = t.data();
        Ok(Self {
            d_on: Array2::from_shape_fn((c, n), |(k, f)| d[f * w + 2 * k]),
            d_off: Array2::from_shape_fn((c, n), |(k, f)| d[f * w + 2 * k + 1]),
            frame_dur,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.d_on.nrows()
    }

    pub fn n_frames(&self) -> usize {
        self.d_on.ncols()
    }

    /// `[t − d_on, t + d_off]` for frame centre `t`.
    pub fn interval(&self, class: usize, frame: usize) -> (f64, f64) {
        let t = (frame as f64 + 0.5) * self.frame_dur;
        (t - self.d_on[[class, frame]], t + self.d_off[[class, frame]])
    }
}

/// `ln(eˣ − 1)` for `x > 0`.
fn inverse_softplus(x: f64) -> f64 {
    x + (-(-x).exp_m1()).ln()
}

#[derive(Clone, Debug)]
struct Stack {
    layers: [BiGru; LAYERS],
    head: Linear,
}

#[derive(Clone, Debug)]
pub struct Epn {
    cfg: EpnConfig,
    stacks: Vec<Stack>,
}

impl Epn {
    /// Registers fresh parameters with uniform(±1/√fan_in) initialisation.
    pub fn register<R: Rng + ?Sized>(store: &mut ParamStore, cfg: EpnConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut stacks = Vec::with_capacity(cfg.stacks());
        for s in 0..cfg.stacks() {
            let p = cfg.prefix(s);
            let l0 = BiGru::register(store, &format!("{p}/gru0"), cfg.input_width(), cfg.hidden, rng)?;
            let l1 = BiGru::register(store, &format!("{p}/gru1"), 2 * cfg.hidden, cfg.hidden, rng)?;
            let head = Linear::register(store, &format!("{p}/head"), 2 * cfg.hidden, cfg.output_width(), rng)?;
            stacks.push(Stack { layers: [l0, l1], head });
        }
        Ok(Self { cfg, stacks })
    }

    /// Binds to parameters already in `store`, checking their shapes.
    pub fn lookup(store: &ParamStore, cfg: EpnConfig) -> Result<Self> {
        cfg.validate()?;
        let mut stacks = Vec::with_capacity(cfg.stacks());
        for s in 0..cfg.stacks() {
            let p = cfg.prefix(s);
            let l0 = BiGru::lookup(store, &format!("{p}/gru0"))?;
            let l1 = BiGru::lookup(store, &format!("{p}/gru1"))?;
            let head = Linear::lookup(store, &format!("{p}/head"))?;
            let ok = l0.fwd.input == cfg.input_width()
                && [l0.fwd, l0.bwd, l1.fwd, l1.bwd].iter().all(|g| g.hidden == cfg.hidden)
                && l1.fwd.input == 2 * cfg.hidden
                && head.input == 2 * cfg.hidden
                && head.output == cfg.output_width();
            if !ok {
                return Err(Error::InvalidArgument(format!(
                    "stored parameters under {p} do not match {cfg:?}"
                )));
            }
            stacks.push(Stack { layers: [l0, l1], head });
        }
        Ok(Self { cfg, stacks })
    }

    /// Sets each head bias so that a zero hidden state predicts
    /// `mean_frames[c] = (d_on, d_off)` frames for class `c`.
    pub fn init_head_bias(&self, store: &mut ParamStore, mean_frames: &[(f64, f64)]) -> Result<()> {
        let c = self.cfg.n_classes;
        if mean_frames.len() != c || mean_frames.iter().any(|&(a, b)| !(a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite())) {
            return Err(Error::InvalidArgument(format!("need {c} positive finite (d_on, d_off) means")));
        }
        for (class, &(on, off)) in mean_frames.iter().enumerate() {
            let (stack, col) = match self.cfg.variant {
                EpnVariant::PerClass => (class, 0),
                EpnVariant::Single => (0, 2 * class),
            };
            let b = store.value_mut(self.stacks[stack].head.b).data_mut();
            b[col] = inverse_softplus(on);
            b[col + 1] = inverse_softplus(off);
        }
        Ok(())
    }

    pub fn config(&self) -> &EpnConfig {
        &self.cfg
    }

    /// Records the network on `tape`. `red` is the `3C × T` RED output;
    /// the result is `T × 2C` durations in seconds.
    pub fn forward_tape(&self, tape: &mut Tape, store: &ParamStore, red: Var, frame_dur: f64) -> Result<Var> {
        let (rows, _) = tape.value(red).dims2()?;
        let c = self.cfg.n_classes;
        if rows != 3 * c {
            return Err(Error::InvalidArgument(format!(
                "EPN for {c} classes got {rows} probability rows"
            )));
        }
        let mut outs = Vec::with_capacity(self.stacks.len());
        for (k, stack) in self.stacks.iter().enumerate() {
            let x = match self.cfg.variant {
                EpnVariant::PerClass => tape.gather_rows(red, &[k, c + k, 2 * c + k])?,
                EpnVariant::Single => red,
            };
            let mut h = tape.transpose(x)?;
            for layer in &stack.layers {
                h = layer.forward(tape, store, h)?;
            }
            let y = stack.head.forward(tape, store, h)?;
            outs.push(tape.softplus(y)?);
        }
        let frames = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs)? };
        Ok(tape.scale(frames, frame_dur)?)
    }

    /// Inference-only forward pass.
    pub fn forward(&self, store: &ParamStore, probs: &BoundaryProbabilities) -> Result<RegionProposals> {
        let mut tape = Tape::new();
        let red = tape.constant(stack_probs(probs)?)?;
        let out = self.forward_tape(&mut tape, store, red, probs.frame_dur)?;
        RegionProposals::from_tape_output(tape.value(out), probs.frame_dur)
    }

    /// Propagates upstream gradients on the proposals back to the
    /// parameters (accumulated into `store`) and the input probabilities.
    pub fn backward(
        &self,
        store: &mut ParamStore,
        probs: &BoundaryProbabilities,
        upstream: &RegionProposals,
    ) -> Result<BoundaryGrads> {
        let (c, n) = (probs.n_classes(), probs.n_frames());
        if upstream.d_on.dim() != (c, n) || upstream.d_off.dim() != (c, n) {
            return Err(Error::InvalidArgument("upstream shape differs from probabilities".into()));
        }
        let mut tape = Tape::new();
        let red = tape.input(stack_probs(probs)?)?;
        let out = self.forward_tape(&mut tape, store, red, probs.frame_dur)?;
        let w = 2 * c;
        let mut g = vec![0.0; n * w];
        for k in 0..c {
            for f in 0..n {
                g[f * w + 2 * k] = upstream.d_on[[k, f]];
                g[f * w + 2 * k + 1] = upstream.d_off[[k, f]];
            }
        }
        let weights = tape.constant(Tensor::from_rows(n, w, g)?)?;
        let prod = tape.mul(out, weights)?;
        let loss = tape.sum(prod)?;
        let grads = tape.backward_into(loss, store)?;
        let d = grads.get(red).cloned().unwrap_or_else(|| Tensor::zeros(&[3 * c, n]));
        let part = |i: usize| Array2::from_shape_fn((c, n), |(k, f)| d.data()[(i * c + k) * n + f]);
        Ok(BoundaryGrads {
            presence: part(0),
            onset: part(1),
            offset: part(2),
        })
    }
}

/// Stacks presence, onset and offset into a `3C × T` tensor.
pub fn stack_probs(probs: &BoundaryProbabilities) -> Result<Tensor> {
    let (c, n) = (probs.n_classes(), probs.n_frames());
    let mut data = Vec::with_capacity(3 * c * n);
    for m in [&probs.presence, &probs.onset, &probs.offset] {
        if m.dim() != (c, n) {
            return Err(Error::InvalidArgument("probability parts differ in shape".into()));
        }
        data.extend(m.iter().copied());
    }
    Ok(Tensor::from_rows(3 * c, n, data)?)
}
