//! Detection metrics, oracle artifact scoring, robustness perturbations,
//! correction-step histograms and report files.

mod perturb;

pub use perturb::{gaussian_blur, gaussian_kernel, perturb, quantize, resize_half, Perturbation, ROBUSTNESS_SET};

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{derive_seed, CorrectionTuple, Dataset, DetectionSample, Thresholds};
use crate::inference::{detect, vcot_correct, CorrectOptions, InferenceError, Termination};
use crate::model::Model;
use crate::toyworld::{ArtifactSpec, Category, GridConfig, Label, RegionMask, ToyImage};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const CSV_HEADER: &str = "metric,subset,value";
const STREAM_EVAL_CORRECT: u64 = 20;
const STREAM_EVAL_CLEAN: u64 = 21;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty input")]
    Empty,
    #[error("average precision needs both classes")]
    OneClass,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("resize_half needs even height and width, got {0}x{1}")]
    OddSize(usize, usize),
    #[error("data grid {data:?} does not match model grid {model:?}")]
    GridMismatch { data: GridConfig, model: GridConfig },
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub fn accuracy(verdicts: &[Label], labels: &[Label]) -> Result<f64, EvalError> {
    if verdicts.len() != labels.len() {
        return Err(EvalError::LengthMismatch(verdicts.len(), labels.len()));
    }
    if labels.is_empty() {
        return Err(EvalError::Empty);
    }
    let hits = verdicts.iter().zip(labels).filter(|(v, l)| v == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Step-wise average precision with fake as the positive class. Tied
/// scores enter the curve together.
pub fn average_precision(scores: &[f64], positive: &[bool]) -> Result<f64, EvalError> {
    if scores.len() != positive.len() {
        return Err(EvalError::LengthMismatch(scores.len(), positive.len()));
    }
    if scores.is_empty() {
        return Err(EvalError::Empty);
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    if n_pos == 0 || n_pos == positive.len() {
        return Err(EvalError::OneClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut seen, mut prev_recall, mut ap) = (0usize, 0usize, 0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            tp += positive[order[i]] as usize;
            seen += 1;
            i += 1;
        }
        let recall = tp as f64 / n_pos as f64;
        let precision = tp as f64 / seen as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(ap)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleScores {
    pub structure: f64,
    pub physics: f64,
    pub distortion: f64,
    pub mean: f64,
}

impl OracleScores {
    fn from_array(v: [f64; 3]) -> Self {
        Self {
            structure: v[0],
            physics: v[1],
            distortion: v[2],
            mean: (v[0] + v[1] + v[2]) / 3.0,
        }
    }

    fn as_array(&self) -> [f64; 3] {
        [self.structure, self.physics, self.distortion]
    }

    /// Per-category mean over a set of scores.
    pub fn average(all: &[OracleScores]) -> Self {
        let mut acc = [0.0; 3];
        for s in all {
            for (a, v) in acc.iter_mut().zip(s.as_array()) {
                *a += v;
            }
        }
        let n = all.len().max(1) as f64;
        Self::from_array(acc.map(|a| a / n))
    }
}

/// Binary per-category artifact flags against ground truth. The spec's
/// category is judged inside its region; the other two look at the rest of
/// the image for introduced damage.
pub fn oracle_artifact_score(
    corrected: &ToyImage,
    clean: &ToyImage,
    mask: &RegionMask,
    spec: &ArtifactSpec,
    thresholds: &Thresholds,
) -> OracleScores {
    let inside = corrected.region_rmse(clean, mask);
    let outside = corrected.outside_rmse(clean, mask);
    let v = Category::ALL.map(|c| {
        let rmse = if c == spec.category { inside } else { outside };
        (rmse > thresholds.for_category(c)) as u8 as f64
    });
    OracleScores::from_array(v)
}

/// Apply `f` to every item on up to `threads` workers, keeping input order.
fn par_map<T: Sync, R: Send>(items: &[T], threads: usize, f: impl Fn(usize, &T) -> R + Sync) -> Vec<R> {
    let threads = threads.clamp(1, items.len().max(1));
    if threads == 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let chunk = items.len().div_ceil(threads);
    let f = &f;
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .enumerate()
            .map(|(c, part)| {
                s.spawn(move || {
                    part.iter()
                        .enumerate()
                        .map(|(k, t)| f(c * chunk + k, t))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("eval worker panicked"))
            .collect()
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub accuracy: f64,
    pub average_precision: f64,
    pub n: usize,
    pub malformed: usize,
}

pub fn evaluate_detection(
    model: &Model,
    samples: &[DetectionSample],
    perturbation: Perturbation,
    threads: usize,
) -> Result<DetectionMetrics, EvalError> {
    let results = par_map(samples, threads, |_, s| -> Result<_, EvalError> {
        let img = perturb(&s.image, perturbation)?;
        Ok(detect(model, &img)?)
    });
    let results = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let verdicts: Vec<Label> = results.iter().map(|d| d.verdict).collect();
    let labels: Vec<Label> = samples.iter().map(|s| s.label).collect();
    let scores: Vec<f64> = results.iter().map(|d| d.fake_score).collect();
    let positive: Vec<bool> = labels.iter().map(|l| l.is_fake()).collect();
    Ok(DetectionMetrics {
        accuracy: accuracy(&verdicts, &labels)?,
        average_precision: average_precision(&scores, &positive)?,
        n: samples.len(),
        malformed: results.iter().filter(|d| d.malformed).count(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub perturbation: String,
    pub accuracy: f64,
    pub average_precision: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionMetrics {
    pub n: usize,
    pub region_rmse_before: f64,
    pub region_rmse_single: f64,
    pub region_rmse_multi: f64,
    /// `1 − single/before` on the mean region RMSE.
    pub rmse_reduction_single: f64,
    pub rmse_reduction_multi: f64,
    pub oracle_single: OracleScores,
    pub oracle_multi: OracleScores,
    pub max_rounds_used: usize,
    pub all_halted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TerminationMetrics {
    pub n: usize,
    pub stop_in_round1: f64,
    pub all_halted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub detection: DetectionMetrics,
    pub robustness: Vec<RobustnessRow>,
    pub correction: Option<CorrectionMetrics>,
    pub termination: Option<TerminationMetrics>,
    /// `rounds_used → fraction` over the correction set.
    pub step_histogram: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalOptions {
    pub robustness: bool,
    /// Correction tuples to evaluate; 0 skips correction.
    pub n_correct: usize,
    /// Clean images for the termination check; 0 skips it.
    pub n_clean: usize,
    pub max_rounds: usize,
    pub flow_steps: usize,
    pub seed: u64,
    pub threads: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        let c = CorrectOptions::default();
        Self {
            robustness: true,
            n_correct: 200,
            n_clean: 200,
            max_rounds: c.max_rounds,
            flow_steps: c.flow_steps,
            seed: 0,
            threads: 1,
        }
    }
}

impl EvalOptions {
    fn correct(&self) -> CorrectOptions {
        CorrectOptions {
            max_rounds: self.max_rounds,
            flow_steps: self.flow_steps,
        }
    }
}

/// Fraction of runs per `rounds_used`.
pub fn step_histogram(rounds: &[usize]) -> BTreeMap<usize, f64> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &r in rounds {
        *counts.entry(r).or_default() += 1;
    }
    let n = rounds.len() as f64;
    counts.into_iter().map(|(k, c)| (k, c as f64 / n)).collect()
}

struct CorrectionRun {
    before: f64,
    single: f64,
    multi: f64,
    oracle_single: OracleScores,
    oracle_multi: OracleScores,
    rounds: usize,
    halted: bool,
}

pub fn evaluate_correction(
    model: &Model,
    tuples: &[CorrectionTuple],
    thresholds: &Thresholds,
    opts: &EvalOptions,
) -> Result<(CorrectionMetrics, BTreeMap<usize, f64>), EvalError> {
    if tuples.is_empty() {
        return Err(EvalError::Empty);
    }
    let runs = par_map(tuples, opts.threads, |i, t| -> Result<CorrectionRun, EvalError> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, STREAM_EVAL_CORRECT, i as u64));
        let traj = vcot_correct(model, &t.artifact_image, opts.correct(), &mut rng)?;
        let single = traj.single_step();
        let multi = traj.final_image();
        Ok(CorrectionRun {
            before: t.artifact_image.region_rmse(&t.correct_image, &t.mask),
            single: single.region_rmse(&t.correct_image, &t.mask),
            multi: multi.region_rmse(&t.correct_image, &t.mask),
            oracle_single: oracle_artifact_score(single, &t.correct_image, &t.mask, &t.spec, thresholds),
            oracle_multi: oracle_artifact_score(multi, &t.correct_image, &t.mask, &t.spec, thresholds),
            rounds: traj.rounds_used,
            halted: traj.rounds_used <= opts.max_rounds,
        })
    });
    let runs = runs.into_iter().collect::<Result<Vec<_>, _>>()?;
    let n = runs.len() as f64;
    let mean = |f: fn(&CorrectionRun) -> f64| runs.iter().map(f).sum::<f64>() / n;
    let before = mean(|r| r.before);
    let single = mean(|r| r.single);
    let multi = mean(|r| r.multi);
    let single_scores: Vec<OracleScores> = runs.iter().map(|r| r.oracle_single).collect();
    let multi_scores: Vec<OracleScores> = runs.iter().map(|r| r.oracle_multi).collect();
    let rounds: Vec<usize> = runs.iter().map(|r| r.rounds).collect();
    Ok((
        CorrectionMetrics {
            n: runs.len(),
            region_rmse_before: before,
            region_rmse_single: single,
            region_rmse_multi: multi,
            rmse_reduction_single: 1.0 - single / before,
            rmse_reduction_multi: 1.0 - multi / before,
            oracle_single: OracleScores::average(&single_scores),
            oracle_multi: OracleScores::average(&multi_scores),
            max_rounds_used: rounds.iter().copied().max().unwrap_or(0),
            all_halted: runs.iter().all(|r| r.halted),
        },
        step_histogram(&rounds),
    ))
}

/// Run the loop on clean images; a well-behaved model stops at once.
pub fn evaluate_termination(
    model: &Model,
    clean: &[&ToyImage],
    opts: &EvalOptions,
) -> Result<TerminationMetrics, EvalError> {
    if clean.is_empty() {
        return Err(EvalError::Empty);
    }
    let runs = par_map(clean, opts.threads, |i, img| -> Result<(bool, bool), EvalError> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, STREAM_EVAL_CLEAN, i as u64));
        let traj = vcot_correct(model, img, opts.correct(), &mut rng)?;
        let first = traj.rounds_used == 1 && traj.terminated_by == Termination::StopToken;
        Ok((first, traj.rounds_used <= opts.max_rounds))
    });
    let runs = runs.into_iter().collect::<Result<Vec<_>, _>>()?;
    Ok(TerminationMetrics {
        n: runs.len(),
        stop_in_round1: runs.iter().filter(|r| r.0).count() as f64 / runs.len() as f64,
        all_halted: runs.iter().all(|r| r.1),
    })
}

/// Full evaluation on the test splits of `data`.
pub fn evaluate(model: &Model, data: &Dataset, opts: &EvalOptions) -> Result<MetricsReport, EvalError> {
    if data.manifest.grid != model.config.grid {
        return Err(EvalError::GridMismatch {
            data: data.manifest.grid,
            model: model.config.grid,
        });
    }
    let detection = evaluate_detection(model, &data.test_detect, Perturbation::None, opts.threads)?;
    let mut robustness = vec![RobustnessRow {
        perturbation: Perturbation::None.name(),
        accuracy: detection.accuracy,
        average_precision: detection.average_precision,
    }];
    if opts.robustness {
        for p in ROBUSTNESS_SET {
            let m = evaluate_detection(model, &data.test_detect, p, opts.threads)?;
            robustness.push(RobustnessRow {
                perturbation: p.name(),
                accuracy: m.accuracy,
                average_precision: m.average_precision,
            });
        }
    }
    let n_correct = opts.n_correct.min(data.test_correct.len());
    let (correction, step_histogram) = if n_correct > 0 {
        let (c, h) = evaluate_correction(model, &data.test_correct[..n_correct], &data.manifest.thresholds, opts)?;
        (Some(c), h)
    } else {
        (None, BTreeMap::new())
    };
    let clean: Vec<&ToyImage> = data
        .test_correct
        .iter()
        .take(opts.n_clean)
        .map(|t| &t.correct_image)
        .collect();
    let termination = if clean.is_empty() {
        None
    } else {
        Some(evaluate_termination(model, &clean, opts)?)
    };
    Ok(MetricsReport {
        schema_version: REPORT_SCHEMA_VERSION,
        detection,
        robustness,
        correction,
        termination,
        step_histogram,
    })
}

fn fmt(v: f64) -> String {
    format!("{v:.17e}")
}

/// `metric,subset,value` rows in a fixed order.
pub fn report_csv(r: &MetricsReport) -> String {
    let mut rows = vec![CSV_HEADER.to_string()];
    let mut push = |m: &str, s: &str, v: f64| rows.push(format!("{m},{s},{}", fmt(v)));
    push("accuracy", "clean", r.detection.accuracy);
    push("average_precision", "clean", r.detection.average_precision);
    push("n", "detect", r.detection.n as f64);
    push("malformed", "detect", r.detection.malformed as f64);
    for row in &r.robustness {
        push("accuracy", &row.perturbation, row.accuracy);
        push("average_precision", &row.perturbation, row.average_precision);
    }
    if let Some(c) = &r.correction {
        push("n", "correct", c.n as f64);
        push("region_rmse", "before", c.region_rmse_before);
        push("region_rmse", "single", c.region_rmse_single);
        push("region_rmse", "multi", c.region_rmse_multi);
        push("rmse_reduction", "single", c.rmse_reduction_single);
        push("rmse_reduction", "multi", c.rmse_reduction_multi);
        for (subset, o) in [("single", &c.oracle_single), ("multi", &c.oracle_multi)] {
            push("oracle_structure", subset, o.structure);
            push("oracle_physics", subset, o.physics);
            push("oracle_distortion", subset, o.distortion);
            push("oracle_mean", subset, o.mean);
        }
        push("max_rounds_used", "correct", c.max_rounds_used as f64);
    }
    if let Some(t) = &r.termination {
        push("n", "clean_images", t.n as f64);
        push("stop_in_round1", "clean_images", t.stop_in_round1);
    }
    for (k, v) in &r.step_histogram {
        push("step_fraction", &k.to_string(), *v);
    }
    rows.join("\n") + "\n"
}

pub fn report_json(r: &MetricsReport) -> String {
    serde_json::to_string_pretty(r).expect("report serializes") + "\n"
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

impl ReportFormat {
    /// `.csv` selects CSV; anything else is JSON.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => ReportFormat::Csv,
            _ => ReportFormat::Json,
        }
    }
}

pub fn write_report(report: &MetricsReport, path: &Path, format: ReportFormat) -> Result<(), EvalError> {
    let body = match format {
        ReportFormat::Json => report_json(report),
        ReportFormat::Csv => report_csv(report),
    };
    fs::write(path, body).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })
}
