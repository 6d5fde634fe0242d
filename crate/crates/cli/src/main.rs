//! `bsed`: generate synthetic data, train, infer, evaluate and compare.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use bsed::dataset::{events_to_records, records_by_file, Checkpoint, Dataset};
use bsed::epn::{EpnConfig, EpnVariant};
use bsed::infer::InferenceConfig;
use bsed::io::{encode_frame_probs, parse_events_tsv, read_text, write_events_tsv, write_file, KeyValues, Split};
use bsed::losses::LossConfig;
use bsed::metrics::{evaluate, ClipScenario, EvalScenario, F1Config, MetricReport};
use bsed::model::ToyModelConfig;
use bsed::pipeline::{Mode, System, SystemConfig};
use bsed::scoring::{clip_events, predict_all, score_outputs, tune_on_validation, ScoringConfig};
use bsed::synth::{generate_dataset, SceneConfig};
use bsed::train::{render_log_csv, train, TrainConfig};
use clap::{Args, Parser, Subcommand};
use nnkit::NnError;

#[derive(Parser, Debug)]
#[command(name = "bsed", version, about = "Boundary-aware sound event detection on synthetic scenes")]
struct Cli {
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// `key = value` file supplying defaults for the subcommand's options.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset directory.
    Generate(GenerateArgs),
    /// Train a system and write a checkpoint directory.
    Train(TrainArgs),
    /// Write the events a checkpoint detects on a split.
    Infer(InferArgs),
    /// Score an events file against a split's ground truth.
    Eval(EvalArgs),
    /// Score two checkpoints side by side on one split.
    Compare(CompareArgs),
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    /// Train + validation clips (split 80:20).
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    n_eval: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    frame_dur: Option<f64>,
    #[arg(long)]
    clip_len: Option<f64>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Replace an existing dataset in `--out`.
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// bce-mf | red | red-ool | red-ool-epn
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epn_lr: Option<f64>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    lambda_ool: Option<f64>,
    #[arg(long)]
    lambda_iou: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    /// per-class | single
    #[arg(long)]
    epn_variant: Option<String>,
    #[arg(long)]
    epn_hidden: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Early stop after this many epochs without validation improvement.
    #[arg(long)]
    patience: Option<usize>,
    /// Skip the per-epoch validation score.
    #[arg(long)]
    no_validate: bool,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Events TSV to write.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    split: Option<String>,
    /// Maximum events per class.
    #[arg(long)]
    k: Option<usize>,
    /// Maximum classes per clip.
    #[arg(long)]
    m: Option<usize>,
    /// Operating threshold for the median-filter modes.
    #[arg(long)]
    threshold: Option<f64>,
    /// Also write each clip's start/end posteriors as `<clip>.fpb` here.
    #[arg(long)]
    probs_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long)]
    split: Option<String>,
    /// F1 operating threshold.
    #[arg(long)]
    threshold: Option<f64>,
    /// Write `class,metric,value` rows here.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CompareArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ours: PathBuf,
    #[arg(long)]
    baseline: PathBuf,
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl From<bsed::Error> for CliError {
    fn from(e: bsed::Error) -> Self {
        use bsed::Error as E;
        match &e {
            E::Numeric(_) | E::Nn(NnError::NonFinite { .. } | NnError::NonFiniteGradient { .. }) => {
                CliError::Numeric(e.to_string())
            }
            E::Config(_) | E::InvalidArgument(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

/// Errors while reading inputs are data errors regardless of kind.
fn data(e: bsed::Error) -> CliError {
    match CliError::from(e) {
        CliError::Usage(m) => CliError::Data(m),
        other => other,
    }
}

type CliResult<T> = Result<T, CliError>;

/// Option values: command-line flag, then config file, then default.
struct Settings {
    kv: KeyValues,
}

impl Settings {
    fn load(path: Option<&Path>, allowed: &[&str]) -> CliResult<Self> {
        let kv = match path {
            Some(p) => KeyValues::parse(&read_text(p).map_err(data)?)
                .map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?,
            None => KeyValues::default(),
        };
        if let Some((k, _)) = kv.entries().iter().find(|(k, _)| !allowed.contains(&k.as_str())) {
            return Err(CliError::Usage(format!("unknown config key {k:?}")));
        }
        Ok(Self { kv })
    }

    fn opt<T: FromStr>(&self, flag: Option<T>, key: &str) -> CliResult<Option<T>> {
        if flag.is_some() {
            return Ok(flag);
        }
        self.kv.parsed(key).map_err(|e| CliError::Usage(format!("config: {e}")))
    }

    fn get<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> CliResult<T> {
        Ok(self.opt(flag, key)?.unwrap_or(default))
    }

    /// Seed from flag, config, then the `BSED_SEED` environment variable.
    fn seed(&self, flag: Option<u64>) -> CliResult<u64> {
        if let Some(s) = self.opt(flag, "seed")? {
            return Ok(s);
        }
        match std::env::var("BSED_SEED") {
            Ok(v) => v
                .trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("BSED_SEED={v:?} is not an integer"))),
            Err(_) => Ok(0),
        }
    }
}

fn parse_split(s: &str) -> CliResult<Split> {
    s.parse().map_err(CliError::Usage)
}

fn parse_with<T: FromStr<Err = bsed::Error>>(s: &str) -> CliResult<T> {
    s.parse().map_err(CliError::from)
}

/// Refuses to reuse a non-empty directory unless `force` is set.
fn prepare_out_dir(dir: &Path, force: bool, owned: &[&str]) -> CliResult<()> {
    if dir.exists() {
        let mut entries = std::fs::read_dir(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
        if entries.next().is_some() {
            if !force {
                return Err(CliError::Usage(format!(
                    "{} is not empty; pass --force to replace it",
                    dir.display()
                )));
            }
            for name in owned {
                let p = dir.join(name);
                let res = if p.is_dir() {
                    std::fs::remove_dir_all(&p)
                } else if p.exists() {
                    std::fs::remove_file(&p)
                } else {
                    Ok(())
                };
                res.map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
            }
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))
}

/// Reference scene with per-class settings spread over `n` classes.
fn scene_for(n: usize, seed: u64) -> SceneConfig {
    let base = SceneConfig::reference(seed);
    if n == base.n_classes {
        return base;
    }
    let lerp = |a: f64, b: f64, i: usize| if n == 1 { a } else { a + (b - a) * i as f64 / (n - 1) as f64 };
    SceneConfig {
        n_classes: n,
        events_per_clip: (0..n).map(|i| lerp(1.2, 0.7, i)).collect(),
        mean_durations: (0..n).map(|i| lerp(0.4, 3.0, i)).collect(),
        decay: (0..n).map(|i| Some(lerp(0.4, 1.2, i))).collect(),
        ..base
    }
}

fn cmd_generate(a: GenerateArgs, config: Option<&Path>) -> CliResult<()> {
    let s = Settings::load(config, &["n", "n_eval", "classes", "frame_dur", "clip_len", "noise", "seed"])?;
    let seed = s.seed(a.seed)?;
    let n = s.get(a.n, "n", 2000)?;
    let n_eval = s.get(a.n_eval, "n_eval", 400)?;
    let classes = s.get(a.classes, "classes", 5)?;
    if classes == 0 {
        return Err(CliError::Usage("--classes must be at least 1".into()));
    }
    let mut scene = scene_for(classes, seed);
    scene.frame_dur = s.get(a.frame_dur, "frame_dur", scene.frame_dur)?;
    scene.clip_len = s.get(a.clip_len, "clip_len", scene.clip_len)?;
    scene.noise = s.get(a.noise, "noise", scene.noise)?;
    scene.validate()?;
    if n + n_eval == 0 {
        return Err(CliError::Usage("nothing to generate".into()));
    }
    prepare_out_dir(&a.out, a.force, &["features", "dataset.cfg", "manifest.tsv", "truth.tsv"])?;
    let clips = generate_dataset(&scene, n + n_eval)?;
    let ds = Dataset::from_synthetic(&scene, clips, n, seed)?;
    ds.write(&a.out).map_err(data)?;
    let count = |sp| ds.manifest.ids(sp).count();
    println!(
        "wrote {} clips to {} (train {}, validation {}, eval {})",
        ds.clips.len(),
        a.out.display(),
        count(Split::Train),
        count(Split::Validation),
        count(Split::Eval)
    );
    Ok(())
}

const TRAIN_KEYS: &[&str] = &[
    "mode", "epochs", "batch_size", "lr", "epn_lr", "warmup", "weight_decay", "lambda_ool", "lambda_iou", "alpha",
    "epn_variant", "epn_hidden", "seed", "patience", "threshold",
];

fn cmd_train(a: TrainArgs, config: Option<&Path>) -> CliResult<()> {
    let s = Settings::load(config, TRAIN_KEYS)?;
    let mode: Mode = parse_with(&s.get(a.mode, "mode", "red-ool-epn".to_string())?)?;
    let variant: EpnVariant = parse_with(&s.get(a.epn_variant, "epn_variant", "per-class".to_string())?)?;
    let defaults = TrainConfig::default();
    let loss_defaults = LossConfig::default();
    let threshold = s.get(a.threshold, "threshold", 0.5)?;
    let tc = TrainConfig {
        epochs: s.get(a.epochs, "epochs", defaults.epochs)?,
        batch_size: s.get(a.batch_size, "batch_size", defaults.batch_size)?,
        lr: s.get(a.lr, "lr", defaults.lr)?,
        epn_lr: s.get(a.epn_lr, "epn_lr", defaults.epn_lr)?,
        warmup_steps: s.get(a.warmup, "warmup", defaults.warmup_steps)?,
        weight_decay: s.get(a.weight_decay, "weight_decay", defaults.weight_decay)?,
        loss: LossConfig {
            alpha: s.get(a.alpha, "alpha", loss_defaults.alpha)?,
            lambda_ool: s.get(a.lambda_ool, "lambda_ool", loss_defaults.lambda_ool)?,
            lambda_iou: s.get(a.lambda_iou, "lambda_iou", loss_defaults.lambda_iou)?,
            ..loss_defaults
        },
        seed: s.seed(a.seed)?,
        validate: !a.no_validate,
        patience: s.opt(a.patience, "patience")?,
        ..defaults
    };
    tc.validate()?;
    let ds = Dataset::read(&a.data, &[Split::Train, Split::Validation]).map_err(data)?;
    let c = ds.info.class_names.len();
    let epn_default = match variant {
        EpnVariant::PerClass => EpnConfig::per_class(c),
        EpnVariant::Single => EpnConfig::single(c),
    };
    let cfg = SystemConfig {
        mode,
        model: ToyModelConfig::new(ds.info.n_features, c),
        epn: EpnConfig {
            hidden: s.get(a.epn_hidden, "epn_hidden", epn_default.hidden)?,
            ..epn_default
        },
        frame_dur: ds.info.frame_dur,
    };
    cfg.validate()?;
    prepare_out_dir(&a.out, a.force, &["params.bsp", "model.cfg", "mf.cfg", "train_log.csv"])?;
    let (tr, va) = (ds.split(Split::Train), ds.split(Split::Validation));
    if tr.is_empty() {
        return Err(CliError::Data("the dataset has no training clips".into()));
    }
    let scoring = ScoringConfig {
        f1: F1Config { threshold, ..F1Config::default() },
        ..ScoringConfig::default()
    };
    let trained = train(&cfg, &tc, &tr, &va, &scoring)?;
    for e in &trained.log {
        let v = e.validation_psds.map_or(String::new(), |v| format!(" validation PSDS1 {:.2}", 100.0 * v));
        eprintln!("epoch {:>3} loss {:.5}{v} ({:.1} s)", e.epoch, e.total, e.seconds);
    }
    let mf = if mode.uses_epn() || va.is_empty() {
        None
    } else {
        let out = predict_all(&trained.system, &trained.store, &va)?;
        Some(tune_on_validation(c, &out, &va, &scoring)?)
    };
    let ckpt = Checkpoint {
        cfg,
        class_names: ds.info.class_names.clone(),
        store: trained.store,
        mf,
    };
    ckpt.save(&a.out).map_err(data)?;
    write_file(&a.out.join("train_log.csv"), render_log_csv(&trained.log)).map_err(data)?;
    println!("wrote checkpoint {} ({} parameters, mode {})", a.out.display(), ckpt.store.num_scalars(), mode.as_str());
    Ok(())
}

fn load_system(dir: &Path, threshold: f64) -> CliResult<(Checkpoint, System)> {
    let ckpt = Checkpoint::load(dir, threshold).map_err(data)?;
    let sys = System::lookup(&ckpt.store, ckpt.cfg).map_err(data)?;
    Ok((ckpt, sys))
}

fn check_compatible(ckpt: &Checkpoint, ds: &Dataset) -> CliResult<()> {
    if ckpt.class_names != ds.info.class_names
        || ckpt.cfg.model.n_features != ds.info.n_features
        || (ckpt.cfg.frame_dur - ds.info.frame_dur).abs() > 1e-9
    {
        return Err(CliError::Data("checkpoint does not match the dataset's classes, features or frame rate".into()));
    }
    Ok(())
}

fn scoring_for(s: &Settings, k: Option<usize>, m: Option<usize>, threshold: Option<f64>) -> CliResult<ScoringConfig> {
    let infer = InferenceConfig {
        k: s.get(k, "k", 15)?,
        m: s.opt(m, "m")?,
        min_len: None,
    };
    let threshold = s.get(threshold, "threshold", 0.5)?;
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(CliError::Usage(format!("threshold {threshold} outside (0, 1)")));
    }
    Ok(ScoringConfig {
        infer,
        f1: F1Config { threshold, ..F1Config::default() },
        ..ScoringConfig::default()
    })
}

fn cmd_infer(a: InferArgs, config: Option<&Path>) -> CliResult<()> {
    let s = Settings::load(config, &["split", "k", "m", "threshold"])?;
    let scoring = scoring_for(&s, a.k, a.m, a.threshold)?;
    let split = parse_split(&s.get(a.split, "split", "eval".to_string())?)?;
    let (ckpt, sys) = load_system(&a.checkpoint, scoring.f1.threshold)?;
    scoring.infer.validate(ckpt.cfg.model.n_classes)?;
    let ds = Dataset::read(&a.data, &[split]).map_err(data)?;
    check_compatible(&ckpt, &ds)?;
    let outputs = predict_all(&sys, &ckpt.store, &ds.clips)?;
    if let Some(dir) = &a.probs_dir {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
        for (clip, out) in ds.clips.iter().zip(&outputs) {
            if let Some(p) = &out.posteriors {
                write_file(&dir.join(format!("{}.fpb", clip.id)), encode_frame_probs(p)).map_err(data)?;
            }
        }
    }
    let mut records = Vec::new();
    for (clip, out) in ds.clips.iter().zip(&outputs) {
        let events = clip_events(&ckpt.cfg, out, ckpt.mf.as_ref(), &scoring)?;
        records.extend(events_to_records(&clip.id, &events, &ckpt.class_names, true));
    }
    write_file(&a.out, write_events_tsv(&records)).map_err(data)?;
    println!("wrote {} events for {} clips to {}", records.len(), ds.clips.len(), a.out.display());
    Ok(())
}

/// Scenario from an events file and a split's ground truth.
fn scenario_from_file(ds: &Dataset, predictions: &Path) -> CliResult<EvalScenario> {
    let records = parse_events_tsv(&read_text(predictions).map_err(data)?)
        .map_err(|e| CliError::Data(format!("{}: {e}", predictions.display())))?;
    let mut by_file = records_by_file(&records, &ds.info.class_names).map_err(data)?;
    let known: std::collections::HashSet<&str> = ds.clips.iter().map(|c| c.id.as_str()).collect();
    if let Some(f) = by_file.keys().find(|f| !known.contains(f.as_str())) {
        return Err(CliError::Data(format!("predictions mention clip {f:?} outside the split")));
    }
    Ok(EvalScenario {
        n_classes: ds.info.class_names.len(),
        clips: ds
            .clips
            .iter()
            .map(|c| ClipScenario {
                duration: c.features.values.ncols() as f64 * c.features.frame_dur,
                truth: c.events.clone(),
                predictions: by_file.remove(&c.id).unwrap_or_default(),
            })
            .collect(),
    })
}

fn emit_report(report: &MetricReport, csv: Option<&Path>) -> CliResult<()> {
    print!("{}", report.render_kv());
    if let Some(p) = csv {
        write_file(p, report.render_csv()).map_err(data)?;
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs, config: Option<&Path>) -> CliResult<()> {
    let s = Settings::load(config, &["split", "threshold"])?;
    let split = parse_split(&s.get(a.split, "split", "eval".to_string())?)?;
    let scoring = scoring_for(&s, None, None, a.threshold)?;
    let ds = Dataset::read(&a.data, &[split]).map_err(data)?;
    let scenario = scenario_from_file(&ds, &a.predictions)?;
    let report = evaluate(&scenario, &scoring.psds, &scoring.f1, &ds.info.class_names).map_err(data)?;
    emit_report(&report, a.csv.as_deref())
}

fn cmd_compare(a: CompareArgs, config: Option<&Path>) -> CliResult<()> {
    let s = Settings::load(config, &["split", "k", "m", "threshold"])?;
    let scoring = scoring_for(&s, a.k, a.m, a.threshold)?;
    let split = parse_split(&s.get(a.split, "split", "eval".to_string())?)?;
    let ds = Dataset::read(&a.data, &[split]).map_err(data)?;
    let mut rows = Vec::new();
    for (name, dir) in [("ours", &a.ours), ("baseline", &a.baseline)] {
        let (ckpt, sys) = load_system(dir, scoring.f1.threshold)?;
        check_compatible(&ckpt, &ds)?;
        scoring.infer.validate(ckpt.cfg.model.n_classes)?;
        if !ckpt.cfg.mode.uses_epn() && ckpt.mf.is_none() {
            eprintln!("{name}: no mf.cfg in {}, using unfiltered presence", dir.display());
        }
        let outputs = predict_all(&sys, &ckpt.store, &ds.clips)?;
        let r = score_outputs(&ckpt.cfg, &outputs, &ds.clips, ckpt.mf.as_ref(), &scoring)?;
        rows.push((name, ckpt.cfg.mode, 100.0 * r.psds.value, 100.0 * r.f1.macro_f1));
    }
    let mut csv = String::from("system,mode,psds1,f1\n");
    println!("{:<10} {:<12} {:>8} {:>8}", "system", "mode", "P1", "F1");
    for (name, mode, p, f) in &rows {
        println!("{name:<10} {:<12} {p:>8.2} {f:>8.2}", mode.as_str());
        csv.push_str(&format!("{name},{},{p:.4},{f:.4}\n", mode.as_str()));
    }
    let (dp, df) = (rows[0].2 - rows[1].2, rows[0].3 - rows[1].3);
    println!("{:<10} {:<12} {dp:>+8.2} {df:>+8.2}", "delta", "");
    csv.push_str(&format!("delta,,{dp:.4},{df:.4}\n"));
    if let Some(p) = &a.csv {
        write_file(p, csv).map_err(data)?;
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(j) = cli.jobs {
        if j == 0 {
            return Err(CliError::Usage("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(j)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    let config = cli.config.as_deref();
    match cli.cmd {
        Command::Generate(a) => cmd_generate(a, config),
        Command::Train(a) => cmd_train(a, config),
        Command::Infer(a) => cmd_infer(a, config),
        Command::Eval(a) => cmd_eval(a, config),
        Command::Compare(a) => cmd_compare(a, config),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (CliError::Usage(m) | CliError::Data(m) | CliError::Numeric(m)) = &e;
            eprintln!("error: {m}");
            ExitCode::from(e.code())
        }
    }
}
