//! Anomaly scores from reconstruction error, percentile thresholds and
//! per-variable contributions.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use ndarray::{s, Array2, Axis};

use crate::error::{Error, Result};
use crate::model::{forward, ModelState};
use crate::par;
use crate::vitals::{make_windows, Normalizer, VitalSeries, WindowBatch};

pub const CONTRIBUTION_EPS: f64 = 1e-12;

/// Per-point scores `S_t` and the per-variable squared errors they average.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSeries {
    pub scores: Vec<f64>,
    pub errors: Array2<f64>,
}

impl ScoreSeries {
    pub fn from_errors(errors: Array2<f64>) -> Self {
        let scores = errors.mean_axis(Axis(1)).map(|m| m.to_vec()).unwrap_or_default();
        Self { scores, errors }
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Score stride-1 windows: each point takes the squared error at the last
/// position of the window ending on it; the first `K - 1` points take the
/// first window's errors at their own positions.
pub fn score(model: &ModelState, windows: &WindowBatch) -> Result<ScoreSeries> {
    let (k, n) = (model.config.window_len, model.config.n_vars);
    if windows.window_len() != k || windows.n_vars() != n {
        return Err(Error::ShapeMismatch(format!(
            "windows ({}, {}), model ({k}, {n})",
            windows.window_len(),
            windows.n_vars()
        )));
    }
    if windows.is_empty() {
        return Err(Error::TooFewWindows(0));
    }
    if windows.starts.windows(2).any(|w| w[1] != w[0] + 1) {
        return Err(Error::ShapeMismatch("windows must have consecutive starts".into()));
    }
    let per_window = par::map_range(windows.len(), |w| -> Result<Array2<f64>> {
        let x = windows.windows.index_axis(Axis(0), w);
        let x_hat = forward(x, model)?;
        let sq = (&x - &x_hat).mapv(|e| e * e);
        Ok(if w == 0 { sq } else { sq.slice(s![k - 1.., ..]).to_owned() })
    });
    let mut errors = Array2::zeros((windows.len() + k - 1, n));
    let mut row = 0;
    for block in per_window {
        let block = block?;
        let rows = block.nrows();
        errors.slice_mut(s![row..row + rows, ..]).assign(&block);
        row += rows;
    }
    Ok(ScoreSeries::from_errors(errors))
}

/// Linear-interpolation percentile of the sorted values (`q = 0` is the
/// minimum, `q = 100` the maximum).
pub fn percentile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyInput);
    }
    if !(0.0..=100.0).contains(&q) {
        return Err(Error::InvalidConfig(format!("percentile {q} outside [0, 100]")));
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteSample(i));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let h = (sorted.len() - 1) as f64 * q / 100.0;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    Ok(sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo]))
}

/// Which scores set the thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Calibration {
    TrainErrors,
    ValErrors,
    /// The scored series itself.
    SelfScores,
}

impl FromStr for Calibration {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" | "train_errors" => Ok(Self::TrainErrors),
            "val" | "val_errors" => Ok(Self::ValErrors),
            "self" => Ok(Self::SelfScores),
            other => Err(Error::InvalidConfig(format!("unknown calibration {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdSpec {
    pub low_pct: f64,
    pub high_pct: f64,
    pub calibration: Calibration,
    pub two_sided: bool,
}

impl Default for ThresholdSpec {
    fn default() -> Self {
        Self {
            low_pct: 3.0,
            high_pct: 97.0,
            calibration: Calibration::ValErrors,
            two_sided: true,
        }
    }
}

impl ThresholdSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.low_pct && self.low_pct < self.high_pct && self.high_pct <= 100.0) {
            return Err(Error::InvalidConfig(format!(
                "need 0 <= low ({}) < high ({}) <= 100",
                self.low_pct, self.high_pct
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionResult {
    pub scores: ScoreSeries,
    pub labels: Vec<bool>,
    pub anomalies: Vec<usize>,
    pub tau_low: f64,
    pub tau_high: f64,
    pub contributions: Array2<f64>,
}

impl DetectionResult {
    pub fn anomaly_fraction(&self) -> f64 {
        self.anomalies.len() as f64 / self.labels.len().max(1) as f64
    }
}

/// Label points whose score falls strictly below the low or strictly above
/// the high percentile of the calibration scores.
pub fn threshold(scores: &ScoreSeries, calib: &ScoreSeries, spec: &ThresholdSpec) -> Result<DetectionResult> {
    spec.validate()?;
    if calib.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    let tau_low = percentile(&calib.scores, spec.low_pct)?;
    let tau_high = percentile(&calib.scores, spec.high_pct)?;
    let labels: Vec<bool> = scores
        .scores
        .iter()
        .map(|&s| s > tau_high || (spec.two_sided && s < tau_low))
        .collect();
    let anomalies = labels.iter().enumerate().filter(|(_, &l)| l).map(|(i, _)| i).collect();
    Ok(DetectionResult {
        scores: scores.clone(),
        labels,
        anomalies,
        tau_low,
        tau_high,
        contributions: contributions(scores, CONTRIBUTION_EPS),
    })
}

/// Row-normalised `(e + eps)`: the share of each variable in a point's error.
pub fn contributions(scores: &ScoreSeries, eps: f64) -> Array2<f64> {
    let mut c = scores.errors.mapv(|e| e + eps);
    for mut row in c.rows_mut() {
        let total = row.sum();
        row /= total;
    }
    c
}

/// Scores for a whole vitals series under the given normalization.
pub fn score_vitals(model: &ModelState, normalizer: &Normalizer, vitals: &VitalSeries) -> Result<ScoreSeries> {
    let windows = make_windows(vitals, model.config.window_len)?;
    score(model, &normalizer.apply(&windows))
}

/// Window, score, threshold. `calib` is ignored under self-calibration and
/// required otherwise.
pub fn detect(
    model: &ModelState,
    normalizer: &Normalizer,
    vitals: &VitalSeries,
    spec: &ThresholdSpec,
    calib: Option<&ScoreSeries>,
) -> Result<DetectionResult> {
    let scores = score_vitals(model, normalizer, vitals)?;
    match (spec.calibration, calib) {
        (Calibration::SelfScores, _) => threshold(&scores, &scores, spec),
        (_, Some(c)) => threshold(&scores, c, spec),
        (_, None) => Err(Error::EmptyCalibration),
    }
}

/// `time_s,score,label,tau_low,tau_high,contrib_hr,contrib_hrv`.
pub fn write_detection_csv(result: &DetectionResult, vitals: &VitalSeries, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if vitals.len() != result.labels.len() {
        return Err(Error::LengthMismatch(vitals.len(), result.labels.len()));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut go = || -> std::io::Result<()> {
        writeln!(w, "time_s,score,label,tau_low,tau_high,contrib_hr,contrib_hrv")?;
        for t in 0..result.labels.len() {
            write!(
                w,
                "{},{},{},{},{}",
                vitals.time_of(t),
                result.scores.scores[t],
                u8::from(result.labels[t]),
                result.tau_low,
                result.tau_high
            )?;
            for c in result.contributions.row(t) {
                write!(w, ",{c}")?;
            }
            writeln!(w)?;
        }
        w.flush()
    };
    go().map_err(|e| Error::io(path, e))
}
