//! Systems assembled from the toy model, RED, the EPN and the losses: per
//! clip training objectives and inference outputs for each training mode.

use ndarray::Array2;
use nnkit::{ParamStore, Tape, Tensor, Var};
use rand::Rng;

use crate::epn::{Epn, EpnConfig, RegionProposals};
use crate::error::{Error, Result};
use crate::io::{Features, KeyValues};
use crate::losses::{FocalOp, FrameTargets, IouOp, LossConfig, LossParts};
use crate::model::{feature_tensor, ToyModel, ToyModelConfig};
use crate::red::{split_red_output, BoundaryProbabilities, FramePosteriors, RedOp};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    /// Presence read directly off the start logits, BCE only; median
    /// filter post-processing.
    BceMf,
    /// RED presence, BCE only; median filter post-processing.
    Red,
    /// RED with the focal onset/offset losses; median filter.
    RedOol,
    /// RED, focal losses and the EPN with IoU loss; proposal inference.
    RedOolEpn,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::BceMf, Mode::Red, Mode::RedOol, Mode::RedOolEpn];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::BceMf => "bce-mf",
            Mode::Red => "red",
            Mode::RedOol => "red-ool",
            Mode::RedOolEpn => "red-ool-epn",
        }
    }

    pub fn uses_red(self) -> bool {
        self != Mode::BceMf
    }

    pub fn uses_ool(self) -> bool {
        matches!(self, Mode::RedOol | Mode::RedOolEpn)
    }

    pub fn uses_epn(self) -> bool {
        self == Mode::RedOolEpn
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SystemConfig {
    pub mode: Mode,
    pub model: ToyModelConfig,
    pub epn: EpnConfig,
    pub frame_dur: f64,
}

impl SystemConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.mode.uses_epn() {
            self.epn.validate()?;
            if self.epn.n_classes != self.model.n_classes {
                return Err(Error::Config("EPN and model class counts differ".into()));
            }
        }
        if !(self.frame_dur > 0.0) {
            return Err(Error::Config(format!("frame duration {}", self.frame_dur)));
        }
        Ok(())
    }

    /// The `model.cfg` contents.
    pub fn to_kv(&self, class_names: &[String]) -> KeyValues {
        let mut kv = KeyValues::default();
        kv.set("mode", self.mode.as_str());
        kv.set("n_features", self.model.n_features);
        kv.set("n_classes", self.model.n_classes);
        kv.set("channels", self.model.channels);
        kv.set("kernel", self.model.kernel);
        kv.set("gru_hidden", self.model.gru_hidden);
        kv.set("epn_variant", self.epn.variant.as_str());
        kv.set("epn_hidden", self.epn.hidden);
        kv.set("frame_dur", self.frame_dur);
        kv.set("classes", class_names.join(","));
        kv
    }

    pub fn from_kv(kv: &KeyValues) -> Result<(Self, Vec<String>)> {
        fn need<T: std::str::FromStr>(kv: &KeyValues, k: &str) -> Result<T> {
            kv.parsed(k)?.ok_or_else(|| Error::Config(format!("model.cfg lacks {k}")))
        }
        let mode: Mode = need::<String>(kv, "mode")?.parse()?;
        let n_classes = need(kv, "n_classes")?;
        let model = ToyModelConfig {
            n_features: need(kv, "n_features")?,
            n_classes,
            channels: need(kv, "channels")?,
            kernel: need(kv, "kernel")?,
            gru_hidden: need(kv, "gru_hidden")?,
        };
        let epn = EpnConfig {
            variant: need::<String>(kv, "epn_variant")?.parse()?,
            hidden: need(kv, "epn_hidden")?,
            n_classes,
        };
        let names: Vec<String> = need::<String>(kv, "classes")?.split(',').map(str::to_string).collect();
        if names.len() != n_classes {
            return Err(Error::Config("class list length differs from n_classes".into()));
        }
        let cfg = Self {
            mode,
            model,
            epn,
            frame_dur: need(kv, "frame_dur")?,
        };
        cfg.validate()?;
        Ok((cfg, names))
    }
}

/// Network handles bound to a parameter store.
#[derive(Clone, Debug)]
pub struct System {
    pub cfg: SystemConfig,
    pub model: ToyModel,
    pub epn: Option<Epn>,
}

/// Loss variables recorded on a tape for one clip.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub presence: Var,
    pub onset: Option<Var>,
    pub offset: Option<Var>,
    pub iou: Option<Var>,
}

impl LossVars {
    pub fn parts(&self, tape: &Tape) -> LossParts {
        let v = |x: Option<Var>| x.map_or(0.0, |x| tape.value(x).data()[0]);
        LossParts {
            presence: tape.value(self.presence).data()[0],
            onset: v(self.onset),
            offset: v(self.offset),
            iou: v(self.iou),
        }
    }
}

/// Intermediate tape variables of a forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub logits: Var,
    /// `C × T` presence probabilities.
    pub presence: Var,
    /// `C × T` start and end posteriors when the mode uses RED.
    pub posteriors: Option<(Var, Var)>,
    /// `3C × T` RED output when the mode uses RED.
    pub red: Option<Var>,
    /// `T × 2C` durations in seconds when the mode uses the EPN.
    pub proposals: Option<Var>,
}

/// What a trained system emits for one clip.
#[derive(Clone, Debug)]
pub struct ClipOutput {
    /// Start/end posteriors feeding RED; absent for the frame-wise baseline.
    pub posteriors: Option<FramePosteriors>,
    pub probs: BoundaryProbabilities,
    pub proposals: Option<RegionProposals>,
}

impl System {
    pub fn register<R: Rng + ?Sized>(store: &mut ParamStore, cfg: SystemConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let model = ToyModel::register(store, cfg.model, rng)?;
        let epn = if cfg.mode.uses_epn() {
            Some(Epn::register(store, cfg.epn, rng)?)
        } else {
            None
        };
        Ok(Self { cfg, model, epn })
    }

    pub fn lookup(store: &ParamStore, cfg: SystemConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            model: ToyModel::lookup(store, cfg.model)?,
            epn: if cfg.mode.uses_epn() {
                Some(Epn::lookup(store, cfg.epn)?)
            } else {
                None
            },
        })
    }

    pub fn forward_tape(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<ForwardVars> {
        let c = self.cfg.model.n_classes;
        let logits = self.model.forward_tape(tape, store, x)?;
        let lt = tape.transpose(logits)?;
        let starts: Vec<usize> = (0..c).collect();
        if !self.cfg.mode.uses_red() {
            let s = tape.gather_rows(lt, &starts)?;
            let presence = tape.sigmoid(s)?;
            return Ok(ForwardVars {
                logits,
                presence,
                posteriors: None,
                red: None,
                proposals: None,
            });
        }
        let ends: Vec<usize> = (c..2 * c).collect();
        let probs = tape.sigmoid(lt)?;
        let s = tape.gather_rows(probs, &starts)?;
        let q = tape.gather_rows(probs, &ends)?;
        let red = tape.custom(&[s, q], Box::new(RedOp { prior: 0.0 }))?;
        let presence = tape.gather_rows(red, &starts)?;
        let proposals = match &self.epn {
            Some(epn) => Some(epn.forward_tape(tape, store, red, self.cfg.frame_dur)?),
            None => None,
        };
        Ok(ForwardVars {
            logits,
            presence,
            posteriors: Some((s, q)),
            red: Some(red),
            proposals,
        })
    }

    /// Records the clip's total objective for this mode.
    pub fn clip_loss(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        features: &Features,
        targets: &FrameTargets,
        loss: &LossConfig,
    ) -> Result<(LossVars, ForwardVars)> {
        let c = self.cfg.model.n_classes;
        if targets.n_classes() != c || targets.n_frames() != features.values.ncols() {
            return Err(Error::InvalidArgument("targets do not match the clip".into()));
        }
        let x = tape.constant(feature_tensor(features)?)?;
        let fw = self.forward_tape(tape, store, x)?;
        let presence = tape.custom(&[fw.presence], Box::new(FocalOp::new(&targets.presence, 0.0, loss.eps)))?;
        let mut total = presence;
        let (mut onset, mut offset, mut iou) = (None, None, None);
        if let (true, Some(red)) = (self.cfg.mode.uses_ool(), fw.red) {
            let on_rows: Vec<usize> = (c..2 * c).collect();
            let off_rows: Vec<usize> = (2 * c..3 * c).collect();
            let on_p = tape.gather_rows(red, &on_rows)?;
            let off_p = tape.gather_rows(red, &off_rows)?;
            let on = tape.custom(&[on_p], Box::new(FocalOp::new(&targets.onset, loss.alpha, loss.eps)))?;
            let off = tape.custom(&[off_p], Box::new(FocalOp::new(&targets.offset, loss.alpha, loss.eps)))?;
            let both = tape.add(on, off)?;
            let weighted = tape.scale(both, loss.lambda_ool)?;
            total = tape.add(total, weighted)?;
            onset = Some(on);
            offset = Some(off);
        }
        if let Some(d) = fw.proposals {
            let l = tape.custom(&[d], Box::new(IouOp::new(targets)))?;
            let weighted = tape.scale(l, loss.lambda_iou)?;
            total = tape.add(total, weighted)?;
            iou = Some(l);
        }
        Ok((
            LossVars {
                total,
                presence,
                onset,
                offset,
                iou,
            },
            fw,
        ))
    }

    /// Inference on one clip.
    pub fn predict(&self, store: &ParamStore, features: &Features) -> Result<ClipOutput> {
        let mut tape = Tape::new();
        let x = tape.constant(feature_tensor(features)?)?;
        let fw = self.forward_tape(&mut tape, store, x)?;
        let dt = self.cfg.frame_dur;
        let probs = match fw.red {
            Some(red) => split_red_output(tape.value(red), dt)?,
            None => {
                let p = to_array(tape.value(fw.presence))?;
                let z = Array2::zeros(p.dim());
                BoundaryProbabilities {
                    presence: p,
                    onset: z.clone(),
                    offset: z,
                    frame_dur: dt,
                }
            }
        };
        let proposals = match fw.proposals {
            Some(d) => Some(RegionProposals::from_tape_output(tape.value(d), dt)?),
            None => None,
        };
        let posteriors = match fw.posteriors {
            Some((s, q)) => Some(FramePosteriors::new(
                to_array(tape.value(s))?,
                to_array(tape.value(q))?,
                dt,
            )?),
            None => None,
        };
        Ok(ClipOutput {
            posteriors,
            probs,
            proposals,
        })
    }
}

fn to_array(t: &Tensor) -> Result<Array2<f64>> {
    let (r, c) = t.dims2()?;
    Array2::from_shape_vec((r, c), t.data().to_vec()).map_err(|e| Error::InvalidArgument(e.to_string()))
}
