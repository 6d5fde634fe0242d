//! Toy frame-wise acoustic model: two temporal convolutions with tanh, one
//! bidirectional GRU layer and a linear head giving a start and an end
//! logit per class and frame.

use nnkit::layers::{BiGru, Conv1d, Linear};
use nnkit::{ParamStore, Tape, Tensor, Var};
use rand::Rng;

use crate::error::{Error, Result};
use crate::io::Features;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ToyModelConfig {
    pub n_features: usize,
    pub n_classes: usize,
    pub channels: usize,
    pub kernel: usize,
    pub gru_hidden: usize,
}

impl ToyModelConfig {
    pub fn new(n_features: usize, n_classes: usize) -> Self {
        Self {
            n_features,
            n_classes,
            channels: 24,
            kernel: 3,
            gru_hidden: 24,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if [self.n_features, self.n_classes, self.channels, self.gru_hidden].contains(&0) {
            return Err(Error::Config(format!("model sizes must be positive: {self:?}")));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config(format!("kernel {} must be odd", self.kernel)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ToyModel {
    cfg: ToyModelConfig,
    conv0: Conv1d,
    conv1: Conv1d,
    gru: BiGru,
    head: Linear,
}

const PREFIX: &str = "toy";

impl ToyModel {
    pub fn register<R: Rng + ?Sized>(store: &mut ParamStore, cfg: ToyModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (f, ch, k, h) = (cfg.n_features, cfg.channels, cfg.kernel, cfg.gru_hidden);
        Ok(Self {
            cfg,
            conv0: Conv1d::register(store, &format!("{PREFIX}/conv0"), f, ch, k, rng)?,
            conv1: Conv1d::register(store, &format!("{PREFIX}/conv1"), ch, ch, k, rng)?,
            gru: BiGru::register(store, &format!("{PREFIX}/gru"), ch, h, rng)?,
            head: Linear::register(store, &format!("{PREFIX}/head"), 2 * h, 2 * cfg.n_classes, rng)?,
        })
    }

    pub fn lookup(store: &ParamStore, cfg: ToyModelConfig) -> Result<Self> {
        cfg.validate()?;
        let m = Self {
            cfg,
            conv0: Conv1d::lookup(store, &format!("{PREFIX}/conv0"))?,
            conv1: Conv1d::lookup(store, &format!("{PREFIX}/conv1"))?,
            gru: BiGru::lookup(store, &format!("{PREFIX}/gru"))?,
            head: Linear::lookup(store, &format!("{PREFIX}/head"))?,
        };
        let shape_ok = store.value(m.conv0.w).shape() == [cfg.channels, cfg.n_features, cfg.kernel]
            && store.value(m.conv1.w).shape() == [cfg.channels, cfg.channels, cfg.kernel]
            && m.gru.fwd.input == cfg.channels
            && m.gru.fwd.hidden == cfg.gru_hidden
            && m.gru.bwd.hidden == cfg.gru_hidden
            && m.head.output == 2 * cfg.n_classes;
        if !shape_ok {
            return Err(Error::InvalidArgument(format!(
                "stored model parameters do not match {cfg:?}"
            )));
        }
        Ok(m)
    }

    pub fn config(&self) -> &ToyModelConfig {
        &self.cfg
    }

    /// `x` is `T × F`; returns `T × 2C` logits, start logits in columns
    /// `0..C` and end logits in `C..2C`.
    pub fn forward_tape(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let (_, f) = tape.value(x).dims2()?;
        if f != self.cfg.n_features {
            return Err(Error::InvalidArgument(format!(
                "model expects {} features, got {f}",
                self.cfg.n_features
            )));
        }
        let h = self.conv0.forward(tape, store, x)?;
        let h = tape.tanh(h)?;
        let h = self.conv1.forward(tape, store, h)?;
        let h = tape.tanh(h)?;
        let h = self.gru.forward(tape, store, h)?;
        Ok(self.head.forward(tape, store, h)?)
    }
}

/// `F × T` features as a `T × F` tensor.
pub fn feature_tensor(feat: &Features) -> Result<Tensor> {
    let (f, t) = feat.values.dim();
    let data = (0..t)
        .flat_map(|j| (0..f).map(move |i| (i, j)))
        .map(|(i, j)| feat.values[[i, j]] as f64)
        .collect();
    Ok(Tensor::from_rows(t, f, data)?)
}
