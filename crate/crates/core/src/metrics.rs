//! PSDS1 (intersection-based ROC area, no cross-trigger or variance terms)
//! and collar-based event F1.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::event::Event;

/// Comparisons of coverage ratios and collar deviations allow this much
/// round-off so that boundary cases such as exactly 70 % coverage count.
const SLACK: f64 = 1e-9;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ClipScenario {
    pub duration: f64,
    pub truth: Vec<Event>,
    pub predictions: Vec<Event>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalScenario {
    pub n_classes: usize,
    pub clips: Vec<ClipScenario>,
}

impl EvalScenario {
    pub fn validate(&self) -> Result<()> {
        for (i, clip) in self.clips.iter().enumerate() {
            if !(clip.duration > 0.0 && clip.duration.is_finite()) {
                return Err(Error::Metric(format!("clip {i} has duration {}", clip.duration)));
            }
            if let Some(e) = clip.truth.iter().chain(&clip.predictions).find(|e| e.class >= self.n_classes) {
                return Err(Error::Metric(format!(
                    "clip {i}: class {} out of {}",
                    e.class, self.n_classes
                )));
            }
        }
        Ok(())
    }

    pub fn hours(&self) -> f64 {
        self.clips.iter().map(|c| c.duration).sum::<f64>() / 3600.0
    }

    fn truth_counts(&self) -> Vec<usize> {
        let mut n = vec![0; self.n_classes];
        for e in self.clips.iter().flat_map(|c| &c.truth) {
            n[e.class] += 1;
        }
        n
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PsdsConfig {
    pub rho_dtc: f64,
    pub rho_gtc: f64,
    /// Upper integration limit, false positives per hour.
    pub e_max: f64,
}

impl Default for PsdsConfig {
    fn default() -> Self {
        Self {
            rho_dtc: 0.7,
            rho_gtc: 0.7,
            e_max: 100.0,
        }
    }
}

impl PsdsConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |r: f64| r > 0.0 && r <= 1.0;
        if !unit(self.rho_dtc) || !unit(self.rho_gtc) || !(self.e_max > 0.0) {
            return Err(Error::Config(format!("invalid PSDS settings {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PsdsResult {
    /// Normalised area in `[0, 1]`.
    pub value: f64,
    /// Normalised area per class; `None` for classes without ground truth.
    pub per_class: Vec<Option<f64>>,
}

/// Sorted, merged union of intervals.
fn merge(mut spans: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    spans.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out: Vec<(f64, f64)> = Vec::with_capacity(spans.len());
    for (s, e) in spans {
        match out.last_mut() {
            Some(last) if s <= last.1 => last.1 = last.1.max(e),
            _ => out.push((s, e)),
        }
    }
    out
}

/// Length of `[s, e] ∩ ⋃ spans` for merged `spans`.
fn covered(spans: &[(f64, f64)], s: f64, e: f64) -> f64 {
    spans.iter().map(|&(a, b)| (b.min(e) - a.max(s)).max(0.0)).sum()
}

fn class_spans(events: &[Event], class: usize) -> Vec<(f64, f64)> {
    merge(events.iter().filter(|e| e.class == class).map(|e| (e.start, e.end)).collect())
}

fn dtc_valid(det: &Event, truth_union: &[(f64, f64)], rho: f64) -> bool {
    covered(truth_union, det.start, det.end) >= (rho - SLACK) * det.duration()
}

/// Operating-point curve of one class: `(false positives, true positives)`
/// after admitting each distinct confidence, highest first.
struct ClassCurve {
    points: Vec<(usize, usize)>,
    n_truth: usize,
}

impl ClassCurve {
    /// Normalised area under `TPR(e) = max{TPR_i : eFPR_i ≤ e}`, the step
    /// envelope of the operating points (plus the empty system at the origin).
    fn area(&self, hours: f64, e_max: f64) -> f64 {
        let mut points = self.points.clone();
        points.sort_by_key(|&(fp, _)| fp);
        let mut area = 0.0;
        let mut prev_e = 0.0;
        let mut best_tpr = 0.0f64;
        for (fp, tp) in points {
            let e = (fp as f64 / hours).min(e_max);
            area += best_tpr * (e - prev_e);
            prev_e = e;
            best_tpr = best_tpr.max(tp as f64 / self.n_truth as f64);
        }
        area += best_tpr * (e_max - prev_e);
        area / e_max
    }
}

/// PSDS1 computed in one sweep per class.
///
/// Detection validity does not depend on the threshold, and for every
/// ground-truth event the highest threshold at which it is covered can be
/// found once, so all operating points follow from two sorted lists.
pub fn psds1(scenario: &EvalScenario, cfg: &PsdsConfig) -> Result<PsdsResult> {
    cfg.validate()?;
    scenario.validate()?;
    let counts = scenario.truth_counts();
    if counts.iter().all(|&n| n == 0) {
        return Err(Error::Metric("no ground-truth events".into()));
    }
    let hours = scenario.hours();
    let mut per_class = vec![None; scenario.n_classes];
    for class in 0..scenario.n_classes {
        if counts[class] == 0 {
            continue;
        }
        // (confidence, is false positive) and per-gt detection thresholds
        let mut fp_conf = Vec::new();
        let mut tp_thresholds = Vec::new();
        let mut all_conf = Vec::new();
        for clip in &scenario.clips {
            let truth_union = class_spans(&clip.truth, class);
            let mut valid = Vec::new();
            for d in clip.predictions.iter().filter(|d| d.class == class) {
                all_conf.push(d.confidence);
                if dtc_valid(d, &truth_union, cfg.rho_dtc) {
                    valid.push(d);
                } else {
                    fp_conf.push(d.confidence);
                }
            }
            valid.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
            for g in clip.truth.iter().filter(|g| g.class == class) {
                if let Some(th) = detection_threshold(g, &valid, cfg.rho_gtc) {
                    tp_thresholds.push(th);
                }
            }
        }
        all_conf.sort_by(|a, b| b.total_cmp(a));
        all_conf.dedup();
        fp_conf.sort_by(|a, b| b.total_cmp(a));
        tp_thresholds.sort_by(|a, b| b.total_cmp(a));
        let (mut i_fp, mut i_tp) = (0, 0);
        let mut points = Vec::with_capacity(all_conf.len());
        for &tau in &all_conf {
            while i_fp < fp_conf.len() && fp_conf[i_fp] >= tau {
                i_fp += 1;
            }
            while i_tp < tp_thresholds.len() && tp_thresholds[i_tp] >= tau {
                i_tp += 1;
            }
            points.push((i_fp, i_tp));
        }
        let curve = ClassCurve {
            points,
            n_truth: counts[class],
        };
        per_class[class] = Some(curve.area(hours, cfg.e_max));
    }
    Ok(finish(per_class))
}

fn finish(per_class: Vec<Option<f64>>) -> PsdsResult {
    let scored: Vec<f64> = per_class.iter().flatten().copied().collect();
    PsdsResult {
        value: scored.iter().sum::<f64>() / scored.len() as f64,
        per_class,
    }
}

/// Highest confidence at which the DTC-valid detections (sorted by
/// descending confidence) cover at least `rho` of `g`.
fn detection_threshold(g: &Event, valid: &[&Event], rho: f64) -> Option<f64> {
    let need = (rho - SLACK) * g.duration();
    let mut spans = Vec::new();
    let mut i = 0;
    while i < valid.len() {
        let conf = valid[i].confidence;
        while i < valid.len() && valid[i].confidence == conf {
            let d = valid[i];
            if d.end > g.start && d.start < g.end {
                spans.push((d.start.max(g.start), d.end.min(g.end)));
            }
            i += 1;
        }
        spans = merge(spans);
        if covered(&spans, g.start, g.end) >= need {
            return Some(conf);
        }
    }
    None
}

/// Per-class counts at a single operating threshold.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OperatingPoint {
    pub true_positives: Vec<usize>,
    pub false_positives: Vec<usize>,
}

/// Scores the detections with confidence ≥ `tau` from scratch.
pub fn evaluate_at(scenario: &EvalScenario, cfg: &PsdsConfig, tau: f64) -> OperatingPoint {
    let c = scenario.n_classes;
    let mut tp = vec![0; c];
    let mut fp = vec![0; c];
    for clip in &scenario.clips {
        for class in 0..c {
            let truth_union = class_spans(&clip.truth, class);
            let mut valid = Vec::new();
            for d in clip.predictions.iter().filter(|d| d.class == class && d.confidence >= tau) {
                if dtc_valid(d, &truth_union, cfg.rho_dtc) {
                    valid.push((d.start, d.end));
                } else {
                    fp[class] += 1;
                }
            }
            let valid = merge(valid);
            for g in clip.truth.iter().filter(|g| g.class == class) {
                if covered(&valid, g.start, g.end) >= (cfg.rho_gtc - SLACK) * g.duration() {
                    tp[class] += 1;
                }
            }
        }
    }
    OperatingPoint {
        true_positives: tp,
        false_positives: fp,
    }
}

/// PSDS1 by re-scoring the scenario at every distinct confidence. Slower
/// than [`psds1`] and used to cross-check it.
pub fn psds1_operating_points(scenario: &EvalScenario, cfg: &PsdsConfig) -> Result<PsdsResult> {
    cfg.validate()?;
    scenario.validate()?;
    let counts = scenario.truth_counts();
    if counts.iter().all(|&n| n == 0) {
        return Err(Error::Metric("no ground-truth events".into()));
    }
    let mut taus: Vec<f64> = scenario
        .clips
        .iter()
        .flat_map(|c| c.predictions.iter().map(|d| d.confidence))
        .collect();
    taus.sort_by(|a, b| b.total_cmp(a));
    taus.dedup();
    let ops: Vec<OperatingPoint> = taus.iter().map(|&t| evaluate_at(scenario, cfg, t)).collect();
    let hours = scenario.hours();
    let per_class = (0..scenario.n_classes)
        .map(|c| {
            (counts[c] > 0).then(|| {
                ClassCurve {
                    points: ops.iter().map(|o| (o.false_positives[c], o.true_positives[c])).collect(),
                    n_truth: counts[c],
                }
                .area(hours, cfg.e_max)
            })
        })
        .collect();
    Ok(finish(per_class))
}

/// PSDS1 of a system scored as a family of detection sets, one per
/// operating threshold (`sweeps[i][clip]`), as produced by thresholding
/// frame scores. The scenario supplies ground truth and durations; its
/// predictions are ignored.
pub fn psds1_threshold_sweep(
    scenario: &EvalScenario,
    sweeps: &[Vec<Vec<Event>>],
    cfg: &PsdsConfig,
) -> Result<PsdsResult> {
    cfg.validate()?;
    scenario.validate()?;
    let counts = scenario.truth_counts();
    if counts.iter().all(|&n| n == 0) {
        return Err(Error::Metric("no ground-truth events".into()));
    }
    let mut ops = Vec::with_capacity(sweeps.len());
    for sweep in sweeps {
        if sweep.len() != scenario.clips.len() {
            return Err(Error::InvalidArgument(format!(
                "sweep has {} clips, scenario {}",
                sweep.len(),
                scenario.clips.len()
            )));
        }
        let at = EvalScenario {
            n_classes: scenario.n_classes,
            clips: scenario
                .clips
                .iter()
                .zip(sweep)
                .map(|(c, p)| ClipScenario {
                    duration: c.duration,
                    truth: c.truth.clone(),
                    predictions: p.clone(),
                })
                .collect(),
        };
        at.validate()?;
        ops.push(evaluate_at(&at, cfg, f64::NEG_INFINITY));
    }
    let hours = scenario.hours();
    let per_class = (0..scenario.n_classes)
        .map(|c| {
            (counts[c] > 0).then(|| {
                ClassCurve {
                    points: ops.iter().map(|o| (o.false_positives[c], o.true_positives[c])).collect(),
                    n_truth: counts[c],
                }
                .area(hours, cfg.e_max)
            })
        })
        .collect();
    Ok(finish(per_class))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct F1Config {
    /// Onset tolerance in seconds.
    pub onset_collar: f64,
    /// Offset tolerance is `max(offset_collar, offset_ratio · duration)`.
    pub offset_collar: f64,
    pub offset_ratio: f64,
    /// Only predictions with confidence ≥ `threshold` are scored.
    pub threshold: f64,
}

impl Default for F1Config {
    fn default() -> Self {
        Self {
            onset_collar: 0.2,
            offset_collar: 0.2,
            offset_ratio: 0.2,
            threshold: 0.5,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ClassF1 {
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl ClassF1 {
    fn from_counts(tp: usize, fp: usize, fneg: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fneg);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            true_positives: tp,
            false_positives: fp,
            false_negatives: fneg,
            precision,
            recall,
            f1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct F1Result {
    pub per_class: Vec<ClassF1>,
    /// Mean F1 over classes with at least one ground-truth event.
    pub macro_f1: f64,
}

/// Collar-based F1 with one-to-one greedy matching in ground-truth onset
/// order; each ground truth takes the earliest-onset unmatched prediction
/// within both collars.
pub fn collar_f1(scenario: &EvalScenario, cfg: &F1Config) -> Result<F1Result> {
    if !(cfg.onset_collar > 0.0 && cfg.offset_collar > 0.0 && cfg.offset_ratio >= 0.0) {
        return Err(Error::Config(format!("invalid collars {cfg:?}")));
    }
    scenario.validate()?;
    let c = scenario.n_classes;
    let (mut tp, mut fp, mut fneg) = (vec![0; c], vec![0; c], vec![0; c]);
    for clip in &scenario.clips {
        for class in 0..c {
            let mut truth: Vec<&Event> = clip.truth.iter().filter(|e| e.class == class).collect();
            let mut preds: Vec<&Event> = clip
                .predictions
                .iter()
                .filter(|e| e.class == class && e.confidence >= cfg.threshold)
                .collect();
            truth.sort_by(|a, b| a.start.total_cmp(&b.start));
            preds.sort_by(|a, b| a.start.total_cmp(&b.start));
            let mut used = vec![false; preds.len()];
            let mut hits = 0;
            for g in &truth {
                let off_tol = cfg.offset_collar.max(cfg.offset_ratio * g.duration());
                let found = preds.iter().enumerate().position(|(i, p)| {
                    !used[i]
                        && (p.start - g.start).abs() <= cfg.onset_collar + SLACK
                        && (p.end - g.end).abs() <= off_tol + SLACK
                });
                if let Some(i) = found {
                    used[i] = true;
                    hits += 1;
                }
            }
            tp[class] += hits;
            fp[class] += preds.len() - hits;
            fneg[class] += truth.len() - hits;
        }
    }
    let per_class: Vec<ClassF1> = (0..c).map(|k| ClassF1::from_counts(tp[k], fp[k], fneg[k])).collect();
    let scored: Vec<f64> = (0..c).filter(|&k| tp[k] + fneg[k] > 0).map(|k| per_class[k].f1).collect();
    let macro_f1 = if scored.is_empty() {
        0.0
    } else {
        scored.iter().sum::<f64>() / scored.len() as f64
    };
    Ok(F1Result { per_class, macro_f1 })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub psds: PsdsResult,
    pub f1: F1Result,
    pub class_names: Vec<String>,
}

/// PSDS1 and F1 together. Fails when the scenario has no ground truth.
pub fn evaluate(
    scenario: &EvalScenario,
    psds_cfg: &PsdsConfig,
    f1_cfg: &F1Config,
    class_names: &[String],
) -> Result<MetricReport> {
    if class_names.len() != scenario.n_classes {
        return Err(Error::InvalidArgument(format!(
            "{} class names for {} classes",
            class_names.len(),
            scenario.n_classes
        )));
    }
    let psds = psds1(scenario, psds_cfg)?;
    Ok(MetricReport {
        psds,
        f1: collar_f1(scenario, f1_cfg)?,
        class_names: class_names.to_vec(),
    })
}

impl MetricReport {
    /// Flat `key = value` block, scores ×100.
    pub fn render_kv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "psds1 = {:.4}", 100.0 * self.psds.value);
        let _ = writeln!(out, "f1_macro = {:.4}", 100.0 * self.f1.macro_f1);
        for (i, name) in self.class_names.iter().enumerate() {
            if let Some(p) = self.psds.per_class[i] {
                let _ = writeln!(out, "psds1.{name} = {:.4}", 100.0 * p);
            }
            let _ = writeln!(out, "f1.{name} = {:.4}", 100.0 * self.f1.per_class[i].f1);
        }
        out
    }

    /// `class,metric,value` rows; the aggregate uses the class name `all`.
    pub fn render_csv(&self) -> String {
        let mut out = String::from("class,metric,value\n");
        let _ = writeln!(out, "all,psds1,{:.6}", 100.0 * self.psds.value);
        let _ = writeln!(out, "all,f1,{:.6}", 100.0 * self.f1.macro_f1);
        for (i, name) in self.class_names.iter().enumerate() {
            if let Some(p) = self.psds.per_class[i] {
                let _ = writeln!(out, "{name},psds1,{:.6}", 100.0 * p);
            }
            let f = &self.f1.per_class[i];
            let _ = writeln!(out, "{name},f1,{:.6}", 100.0 * f.f1);
            let _ = writeln!(out, "{name},precision,{:.6}", 100.0 * f.precision);
            let _ = writeln!(out, "{name},recall,{:.6}", 100.0 * f.recall);
        }
        out
    }
}
