//! The reference synthetic benchmark: generate, train each mode, tune the
//! median filter on validation, score on eval.

use std::time::Instant;

use crate::dataset::Dataset;
use crate::epn::EpnConfig;
use crate::error::Result;
use crate::io::Split;
use crate::metrics::MetricReport;
use crate::model::ToyModelConfig;
use crate::pipeline::{Mode, SystemConfig};
use crate::postproc::MedianFilterConfig;
use crate::scoring::{predict_all, score_outputs, tune_on_validation, ScoringConfig};
use crate::synth::{generate_dataset, SceneConfig};
use crate::train::{train, EpochLog, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub scene: SceneConfig,
    /// Clips split 80:20 into train and validation.
    pub n_trainval: usize,
    pub n_eval: usize,
    pub model: ToyModelConfig,
    pub epn: EpnConfig,
    pub train: TrainConfig,
    pub scoring: ScoringConfig,
}

impl BenchConfig {
    pub fn reference(seed: u64) -> Self {
        let scene = SceneConfig::reference(seed);
        let (f, c) = (scene.n_features, scene.n_classes);
        Self {
            n_trainval: 2000,
            n_eval: 400,
            model: ToyModelConfig::new(f, c),
            epn: EpnConfig {
                hidden: 16,
                ..EpnConfig::per_class(c)
            },
            train: TrainConfig {
                epochs: 10,
                epn_lr: 3e-3,
                seed,
                ..TrainConfig::default()
            },
            scoring: ScoringConfig::default(),
            scene,
        }
    }

    pub fn system(&self, mode: Mode) -> SystemConfig {
        SystemConfig {
            mode,
            model: self.model,
            epn: self.epn,
            frame_dur: self.scene.frame_dur,
        }
    }
}

pub fn prepare(cfg: &BenchConfig) -> Result<Dataset> {
    let clips = generate_dataset(&cfg.scene, cfg.n_trainval + cfg.n_eval)?;
    Dataset::from_synthetic(&cfg.scene, clips, cfg.n_trainval, cfg.scene.seed)
}

#[derive(Clone, Debug)]
pub struct ModeResult {
    pub mode: Mode,
    pub eval: MetricReport,
    pub mf: Option<MedianFilterConfig>,
    pub log: Vec<EpochLog>,
    pub seconds: f64,
}

pub fn run_mode(cfg: &BenchConfig, data: &Dataset, mode: Mode) -> Result<ModeResult> {
    let t0 = Instant::now();
    let (tr, va, ev) = (data.split(Split::Train), data.split(Split::Validation), data.split(Split::Eval));
    let sys = cfg.system(mode);
    let trained = train(&sys, &cfg.train, &tr, &va, &cfg.scoring)?;
    let mf = if mode.uses_epn() {
        None
    } else {
        let val_out = predict_all(&trained.system, &trained.store, &va)?;
        Some(tune_on_validation(sys.model.n_classes, &val_out, &va, &cfg.scoring)?)
    };
    let eval_out = predict_all(&trained.system, &trained.store, &ev)?;
    let mut eval = score_outputs(&sys, &eval_out, &ev, mf.as_ref(), &cfg.scoring)?;
    eval.class_names = data.info.class_names.clone();
    Ok(ModeResult {
        mode,
        eval,
        mf,
        log: trained.log,
        seconds: t0.elapsed().as_secs_f64(),
    })
}
