//! End-to-end runs on one recording: extract, train on the clean prefix,
//! calibrate on its validation tail, detect on the rest.

use std::path::Path;

use crate::detection::{score, score_vitals, threshold, Calibration, DetectionResult, ScoreSeries, ThresholdSpec};
use crate::error::{Error, Result};
use crate::eval::baseline::zscore_baseline;
use crate::eval::metrics::{confusion, point_adjust, ConfusionCounts};
use crate::model::{ModelConfig, ModelState};
use crate::par;
use crate::signal::{BeatTruth, RawSignal};
use crate::training::{split_train_val, train, TrainConfig, TrainReport};
use crate::vitals::{compute_vitals, detect_beats, make_windows, Normalizer, VitalSeries};

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub step_s: f64,
    pub lookback_s: f64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub threshold: ThresholdSpec,
    /// Trailing window, in points, of the z-score baseline.
    pub baseline_window: usize,
    pub point_adjust: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            step_s: 10.0,
            lookback_s: 60.0,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            threshold: ThresholdSpec::default(),
            baseline_window: 12,
            point_adjust: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub vitals: VitalSeries,
    /// Points before the first labelled point; the model never sees later ones.
    pub clean_prefix: usize,
    pub state: ModelState,
    pub normalizer: Normalizer,
    pub report: TrainReport,
    pub detection: DetectionResult,
    /// Counts over the points after the clean prefix.
    pub counts: ConfusionCounts,
    pub baseline: DetectionResult,
    pub baseline_counts: ConfusionCounts,
}

impl PipelineOutcome {
    pub fn f1(&self) -> f64 {
        self.counts.f1()
    }

    pub fn baseline_f1(&self) -> f64 {
        self.baseline_counts.f1()
    }
}

/// Beats, then HR/HRV every `step_s` over a `lookback_s` window.
pub fn extract(signal: &RawSignal, step_s: f64, lookback_s: f64) -> Result<VitalSeries> {
    let beats = detect_beats(signal)?;
    compute_vitals(&beats, step_s, lookback_s)
}

/// Number of leading unlabelled points.
pub fn clean_prefix_len(vitals: &VitalSeries) -> Result<usize> {
    let labels = vitals
        .labels
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig("series has no labels".into()))?;
    Ok(labels.iter().position(|&l| l).unwrap_or(labels.len()))
}

fn scored_counts(pred: &[bool], truth: &[bool], adjust: bool) -> Result<ConfusionCounts> {
    if adjust {
        confusion(&point_adjust(pred, truth)?, truth)
    } else {
        confusion(pred, truth)
    }
}

pub fn run_pipeline(signal: &RawSignal, truth: &BeatTruth, cfg: &PipelineConfig) -> Result<PipelineOutcome> {
    let vitals = extract(signal, cfg.step_s, cfg.lookback_s)?.with_truth(truth);
    run_on_vitals(vitals, cfg)
}

/// The pipeline from labelled vitals onward.
pub fn run_on_vitals(vitals: VitalSeries, cfg: &PipelineConfig) -> Result<PipelineOutcome> {
    let k = cfg.model.window_len;
    let prefix = clean_prefix_len(&vitals)?;
    let clean = make_windows(&vitals.slice(0..prefix), k)?;
    let normalizer = Normalizer::fit(&clean);
    let clean = normalizer.apply(&clean);
    let init = ModelState::init(cfg.model)?;
    let (state, report) = train(&clean, &cfg.train, init)?;

    let (train_w, val_w) = split_train_val(&clean, cfg.train.split_fraction)?;
    let scores = score_vitals(&state, &normalizer, &vitals)?;
    // calibration points in series coordinates, for the baseline
    let (calib, calib_range) = match cfg.threshold.calibration {
        Calibration::ValErrors => (score(&state, &val_w)?, val_w.starts[0]..prefix),
        Calibration::TrainErrors => (score(&state, &train_w)?, 0..val_w.starts[0] + k - 1),
        Calibration::SelfScores => (scores.clone(), 0..vitals.len()),
    };
    let detection = threshold(&scores, &calib, &cfg.threshold)?;

    let base_scores = zscore_baseline(&vitals, cfg.baseline_window)?;
    let base_calib = ScoreSeries {
        scores: base_scores.scores[calib_range.clone()].to_vec(),
        errors: base_scores.errors.slice(ndarray::s![calib_range, ..]).to_owned(),
    };
    let baseline = threshold(&base_scores, &base_calib, &cfg.threshold)?;

    let labels = vitals.labels.as_ref().expect("checked by clean_prefix_len");
    let truth = &labels[prefix..];
    let counts = scored_counts(&detection.labels[prefix..], truth, cfg.point_adjust)?;
    let baseline_counts = scored_counts(&baseline.labels[prefix..], truth, cfg.point_adjust)?;
    Ok(PipelineOutcome {
        vitals,
        clean_prefix: prefix,
        state,
        normalizer,
        report,
        detection,
        counts,
        baseline,
        baseline_counts,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub interval_s: f64,
    pub f1: f64,
    /// Relative change vs the first (smallest) interval, percent.
    pub drop_pct: f64,
    pub n_points: usize,
    pub train_windows: usize,
    pub best_epoch: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("interval_s,f1,drop_pct\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{}\n", r.interval_s, r.f1, r.drop_pct));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// One fresh pipeline per vitals step; runs are independent and go in parallel.
pub fn ablate_sampling(
    signal: &RawSignal,
    truth: &BeatTruth,
    intervals: &[f64],
    cfg: &PipelineConfig,
) -> Result<AblationReport> {
    if intervals.is_empty() {
        return Err(Error::InvalidConfig("no intervals".into()));
    }
    if intervals.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidConfig("intervals must be strictly increasing".into()));
    }
    if let Some(bad) = intervals.iter().find(|&&s| !(1.0..=cfg.lookback_s).contains(&s)) {
        return Err(Error::InvalidConfig(format!(
            "interval {bad} s outside [1, {}] s",
            cfg.lookback_s
        )));
    }
    let beats = detect_beats(signal)?;
    let runs = par::map(intervals, |&step| -> Result<AblationRow> {
        let vitals = compute_vitals(&beats, step, cfg.lookback_s)?.with_truth(truth);
        let run_cfg = PipelineConfig {
            step_s: step,
            ..cfg.clone()
        };
        let out = run_on_vitals(vitals, &run_cfg)?;
        Ok(AblationRow {
            interval_s: step,
            f1: out.f1(),
            drop_pct: 0.0,
            n_points: out.vitals.len(),
            train_windows: out.clean_prefix.saturating_sub(cfg.model.window_len - 1),
            best_epoch: out.report.best_epoch,
        })
    });
    let mut rows = runs.into_iter().collect::<Result<Vec<_>>>()?;
    let reference = rows[0].f1;
    for r in rows.iter_mut() {
        r.drop_pct = if reference > 0.0 { 100.0 * (r.f1 - reference) / reference } else { 0.0 };
    }
    Ok(AblationReport { rows })
}
