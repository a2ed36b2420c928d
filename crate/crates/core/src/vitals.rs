//! Beat detection, HR/HRV extraction and windowing.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{Array3, Axis};

use crate::error::{Error, Result};
use crate::signal::{BeatTruth, RawSignal, SignalKind};

/// Physiological RR range, seconds.
pub const RR_MIN_S: f64 = 0.25;
pub const RR_MAX_S: f64 = 3.0;
/// Minimum time between two detected beats.
pub const REFRACTORY_S: f64 = 0.25;
pub const MIN_DETECT_RATE_HZ: f64 = 32.0;

const DETREND_WINDOW_S: f64 = 0.6;
const ECG_ENVELOPE_S: f64 = 0.15;
const BVP_ENVELOPE_S: f64 = 0.30;
const THRESHOLD_WINDOW_S: f64 = 5.0;
const THRESHOLD_HOP_S: f64 = 0.5;
const THRESHOLD_PERCENTILE: f64 = 95.0;
const THRESHOLD_FRACTION: f64 = 0.5;

/// Detected beat times plus the time range of the signal they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct BeatSeries {
    pub beat_times: Vec<f64>,
    pub source_kind: SignalKind,
    pub start_s: f64,
    pub end_s: f64,
}

impl BeatSeries {
    /// Series spanning exactly first..last beat.
    pub fn from_times(beat_times: Vec<f64>, source_kind: SignalKind) -> Self {
        let start_s = beat_times.first().copied().unwrap_or(0.0);
        let end_s = beat_times.last().copied().unwrap_or(0.0);
        Self {
            beat_times,
            source_kind,
            start_s,
            end_s,
        }
    }

    pub fn span(&self) -> f64 {
        self.end_s - self.start_s
    }
}

fn moving_average(xs: &[f64], width: usize) -> Vec<f64> {
    let n = xs.len();
    let half = width / 2;
    let mut prefix = Vec::with_capacity(n + 1);
    prefix.push(0.0);
    for &x in xs {
        prefix.push(prefix.last().unwrap() + x);
    }
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(n);
            (prefix[hi] - prefix[lo]) / (hi - lo) as f64
        })
        .collect()
}

fn sorted_percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Pan-Tompkins-style beat detector.
///
/// detrend (0.6 s moving average) -> squared derivative -> envelope
/// smoothing (150 ms ECG, 300 ms BVP) -> peaks above half the rolling 95th
/// percentile of the envelope -> 250 ms refractory -> sub-sample refinement
/// on the detrended waveform.
pub fn detect_beats(signal: &RawSignal) -> Result<BeatSeries> {
    let rate = signal.rate_hz();
    if rate < MIN_DETECT_RATE_HZ {
        return Err(Error::InvalidConfig(format!(
            "beat detection needs >= {MIN_DETECT_RATE_HZ} Hz, got {rate}"
        )));
    }
    if signal.len() < 2 || signal.duration() < 2.0 {
        return Err(Error::SignalTooShort(format!("{:.3} s", signal.duration())));
    }
    let xs = signal.samples();
    let n = xs.len();
    let samples_of = |s: f64| ((s * rate).round() as usize).max(1);

    let baseline = moving_average(xs, samples_of(DETREND_WINDOW_S));
    let detrended: Vec<f64> = xs.iter().zip(&baseline).map(|(x, b)| x - b).collect();

    let mut deriv2 = vec![0.0; n];
    for i in 1..n - 1 {
        let d = (detrended[i + 1] - detrended[i - 1]) * rate * 0.5;
        deriv2[i] = d * d;
    }
    let envelope_s = match signal.kind() {
        SignalKind::Ecg => ECG_ENVELOPE_S,
        SignalKind::Bvp => BVP_ENVELOPE_S,
    };
    let env = moving_average(&deriv2, samples_of(envelope_s));

    // Adaptive threshold, evaluated once per hop on a centred window.
    let hop = samples_of(THRESHOLD_HOP_S);
    let half_win = samples_of(THRESHOLD_WINDOW_S) / 2;
    let mut threshold = vec![0.0; n];
    let mut scratch = Vec::new();
    for block in (0..n).step_by(hop) {
        let centre = block + hop / 2;
        let lo = centre.saturating_sub(half_win);
        let hi = (centre + half_win).min(n);
        scratch.clear();
        scratch.extend_from_slice(&env[lo..hi]);
        scratch.sort_by(f64::total_cmp);
        let t = THRESHOLD_FRACTION * sorted_percentile(&scratch, THRESHOLD_PERCENTILE);
        threshold[block..(block + hop).min(n)].fill(t);
    }

    // One candidate per supra-threshold run: its envelope maximum.
    let mut candidates: Vec<usize> = Vec::new();
    let mut i = 0;
    while i < n {
        if env[i] > threshold[i] && threshold[i] > 1e-12 {
            let mut best = i;
            while i < n && env[i] > threshold[i] {
                if env[i] > env[best] {
                    best = i;
                }
                i += 1;
            }
            candidates.push(best);
        } else {
            i += 1;
        }
    }
    if candidates.is_empty() {
        return Err(Error::NoBeatsFound);
    }

    let refractory = REFRACTORY_S * rate;
    let mut peaks: Vec<usize> = Vec::with_capacity(candidates.len());
    for c in candidates {
        match peaks.last_mut() {
            Some(last) if ((c - *last) as f64) < refractory => {
                if env[c] > env[*last] {
                    *last = c;
                }
            }
            _ => peaks.push(c),
        }
    }

    let search = samples_of(0.5 * envelope_s);
    let mut times: Vec<f64> = peaks
        .iter()
        .map(|&p| {
            let lo = p.saturating_sub(search);
            let hi = (p + search + 1).min(n);
            let m = (lo..hi)
                .max_by(|&a, &b| detrended[a].total_cmp(&detrended[b]))
                .unwrap_or(p);
            let mut offset = 0.0;
            if m > 0 && m + 1 < n {
                let (a, b, c) = (detrended[m - 1], detrended[m], detrended[m + 1]);
                let denom = a - 2.0 * b + c;
                if denom < 0.0 {
                    offset = (0.5 * (a - c) / denom).clamp(-0.5, 0.5);
                }
            }
            signal.time_of(m) + offset / rate
        })
        .collect();
    times.dedup_by(|b, a| *b - *a < RR_MIN_S);
    if times.is_empty() {
        return Err(Error::NoBeatsFound);
    }
    Ok(BeatSeries {
        beat_times: times,
        source_kind: signal.kind(),
        start_s: signal.start_time(),
        end_s: signal.end_time(),
    })
}

/// HR (bpm) and HRV (RMSSD, ms) at a fixed step.
#[derive(Debug, Clone, PartialEq)]
pub struct VitalSeries {
    pub hr_bpm: Vec<f64>,
    pub hrv_ms: Vec<f64>,
    pub step_s: f64,
    pub lookback_s: f64,
    /// Wall time of index 0; index `t` summarises `(t0 + t*step - lookback, t0 + t*step]`.
    pub t0: f64,
    pub labels: Option<Vec<bool>>,
}

pub const N_VARS: usize = 2;

impl VitalSeries {
    pub fn len(&self) -> usize {
        self.hr_bpm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hr_bpm.is_empty()
    }

    pub fn time_of(&self, t: usize) -> f64 {
        self.t0 + t as f64 * self.step_s
    }

    pub fn row(&self, t: usize) -> [f64; N_VARS] {
        [self.hr_bpm[t], self.hrv_ms[t]]
    }

    /// Rows `range` as a new series (labels included).
    pub fn slice(&self, range: std::ops::Range<usize>) -> VitalSeries {
        VitalSeries {
            hr_bpm: self.hr_bpm[range.clone()].to_vec(),
            hrv_ms: self.hrv_ms[range.clone()].to_vec(),
            step_s: self.step_s,
            lookback_s: self.lookback_s,
            t0: self.time_of(range.start),
            labels: self.labels.as_ref().map(|l| l[range].to_vec()),
        }
    }

    /// Label each point 1 when stress covers at least half of its lookback window.
    pub fn with_truth(mut self, truth: &BeatTruth) -> Self {
        let labels = (0..self.len())
            .map(|t| {
                let end = self.time_of(t);
                truth.stress_overlap(end - self.lookback_s, end) >= 0.5 * self.lookback_s
            })
            .collect();
        self.labels = Some(labels);
        self
    }
}

/// Sliding HR / RMSSD extraction.
///
/// For each step the beats in `(wall - lookback, wall]` are collected; RR
/// intervals between consecutive beats outside `[0.25, 3.0]` s are treated as
/// gaps. HR = 60 / mean(RR); HRV = RMSSD of adjacent RR pairs in ms. Steps with
/// fewer than 3 beats (or no adjacent RR pair) repeat the previous value.
pub fn compute_vitals(beats: &BeatSeries, step_s: f64, lookback_s: f64) -> Result<VitalSeries> {
    if !(step_s > 0.0 && lookback_s > 0.0) {
        return Err(Error::InvalidConfig("step and lookback must be > 0".into()));
    }
    let span = beats.span();
    if span + 1e-9 < lookback_s {
        return Err(Error::InsufficientBeats(format!(
            "beats span {span:.3} s, lookback is {lookback_s} s"
        )));
    }
    let steps = ((span - lookback_s) / step_s + 1e-9).floor() as usize + 1;
    let t0 = beats.start_s + lookback_s;
    let times = &beats.beat_times;
    let mut hr = Vec::with_capacity(steps);
    let mut hrv = Vec::with_capacity(steps);
    for i in 0..steps {
        let wall = t0 + i as f64 * step_s;
        let lo = times.partition_point(|&b| b <= wall - lookback_s);
        let hi = times.partition_point(|&b| b <= wall);
        match window_vitals(&times[lo..hi]) {
            Some((h, v)) => {
                hr.push(h);
                hrv.push(v);
            }
            None if i == 0 => {
                return Err(Error::InsufficientBeats(format!(
                    "first window ending at {wall:.3} s has {} beats",
                    hi - lo
                )))
            }
            None => {
                hr.push(hr[i - 1]);
                hrv.push(hrv[i - 1]);
            }
        }
    }
    Ok(VitalSeries {
        hr_bpm: hr,
        hrv_ms: hrv,
        step_s,
        lookback_s,
        t0,
        labels: None,
    })
}

fn window_vitals(beats: &[f64]) -> Option<(f64, f64)> {
    if beats.len() < 3 {
        return None;
    }
    let valid = |rr: f64| (RR_MIN_S..=RR_MAX_S).contains(&rr);
    let rr: Vec<f64> = beats.windows(2).map(|w| w[1] - w[0]).collect();
    let good: Vec<f64> = rr.iter().copied().filter(|&r| valid(r)).collect();
    let diffs: Vec<f64> = rr
        .windows(2)
        .filter(|p| valid(p[0]) && valid(p[1]))
        .map(|p| p[1] - p[0])
        .collect();
    if good.is_empty() || diffs.is_empty() {
        return None;
    }
    let mean_rr = good.iter().sum::<f64>() / good.len() as f64;
    let rmssd = (diffs.iter().map(|d| d * d).sum::<f64>() / diffs.len() as f64).sqrt();
    Some((60.0 / mean_rr, 1000.0 * rmssd))
}

pub fn write_vitals_csv(series: &VitalSeries, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut go = || -> std::io::Result<()> {
        match &series.labels {
            Some(_) => writeln!(w, "time_s,hr_bpm,hrv_ms,label")?,
            None => writeln!(w, "time_s,hr_bpm,hrv_ms")?,
        }
        for t in 0..series.len() {
            write!(w, "{},{},{}", series.time_of(t), series.hr_bpm[t], series.hrv_ms[t])?;
            if let Some(l) = &series.labels {
                write!(w, ",{}", u8::from(l[t]))?;
            }
            writeln!(w)?;
        }
        w.flush()
    };
    go().map_err(|e| Error::io(path, e))
}

/// Read a vitals CSV. The step is taken from the timestamps; the lookback,
/// which the file does not record, is set to `lookback_s`.
pub fn load_vitals_csv(path: impl AsRef<Path>, lookback_s: f64) -> Result<VitalSeries> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let headers: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::MalformedFile(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let labelled = match headers.iter().map(String::as_str).collect::<Vec<_>>().as_slice() {
        ["time_s", "hr_bpm", "hrv_ms"] => false,
        ["time_s", "hr_bpm", "hrv_ms", "label"] => true,
        other => return Err(Error::MalformedFile(format!("unexpected vitals header {other:?}"))),
    };
    let (mut times, mut hr, mut hrv, mut labels) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::MalformedFile(e.to_string()))?;
        let num = |i: usize| -> Result<f64> {
            let v = rec
                .get(i)
                .and_then(|s| s.parse::<f64>().ok())
                .ok_or_else(|| Error::MalformedFile(format!("vitals row {}: bad field {i}", row + 1)))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::NonFiniteSample(row))
            }
        };
        times.push(num(0)?);
        hr.push(num(1)?);
        hrv.push(num(2)?);
        if labelled {
            labels.push(match rec.get(3) {
                Some("1") => true,
                Some("0") => false,
                other => return Err(Error::MalformedFile(format!("vitals row {}: label {other:?}", row + 1))),
            });
        }
    }
    let step_s = if times.len() >= 2 { times[1] - times[0] } else { 10.0 };
    if !(step_s > 0.0) {
        return Err(Error::MalformedFile("vitals timestamps not increasing".into()));
    }
    Ok(VitalSeries {
        hr_bpm: hr,
        hrv_ms: hrv,
        step_s,
        lookback_s,
        t0: times.first().copied().unwrap_or(0.0),
        labels: labelled.then_some(labels),
    })
}

/// Stride-1 windows of shape `(num_windows, K, n)` over a vital series.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowBatch {
    pub windows: Array3<f64>,
    /// Per-window ground truth: 1 if any covered point is labelled.
    pub labels: Option<Vec<bool>>,
    /// Series index of each window's first row.
    pub starts: Vec<usize>,
}

impl WindowBatch {
    pub fn len(&self) -> usize {
        self.windows.len_of(Axis(0))
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn window_len(&self) -> usize {
        self.windows.len_of(Axis(1))
    }

    pub fn n_vars(&self) -> usize {
        self.windows.len_of(Axis(2))
    }

    /// Keep the windows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> WindowBatch {
        WindowBatch {
            windows: self.windows.select(Axis(0), indices),
            labels: self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect()),
            starts: indices.iter().map(|&i| self.starts[i]).collect(),
        }
    }
}

pub fn make_windows(series: &VitalSeries, window_len: usize) -> Result<WindowBatch> {
    let t = series.len();
    if window_len == 0 || t < window_len {
        return Err(Error::SeriesTooShort {
            len: t,
            needed: window_len.max(1),
        });
    }
    let count = t - window_len + 1;
    let windows = Array3::from_shape_fn((count, window_len, N_VARS), |(i, j, v)| series.row(i + j)[v]);
    let labels = series
        .labels
        .as_ref()
        .map(|l| (0..count).map(|i| l[i..i + window_len].iter().any(|&b| b)).collect());
    Ok(WindowBatch {
        windows,
        labels,
        starts: (0..count).collect(),
    })
}

/// Per-variable z-score statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub const STD_FLOOR: f64 = 1e-8;

impl Normalizer {
    /// Mean and (population) std over every cell of the batch, per variable.
    pub fn fit(batch: &WindowBatch) -> Self {
        let n = batch.n_vars();
        let mut mean = vec![0.0; n];
        let mut std = vec![0.0; n];
        for v in 0..n {
            let col = batch.windows.index_axis(Axis(2), v);
            let m = col.mean().unwrap_or(0.0);
            let var = col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / col.len().max(1) as f64;
            mean[v] = m;
            std[v] = var.sqrt().max(STD_FLOOR);
        }
        Self { mean, std }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            mean: vec![0.0; n],
            std: vec![1.0; n],
        }
    }

    pub fn apply(&self, batch: &WindowBatch) -> WindowBatch {
        let mut out = batch.clone();
        for ((_, _, v), x) in out.windows.indexed_iter_mut() {
            *x = (*x - self.mean[v]) / self.std[v];
        }
        out
    }

    pub fn invert(&self, batch: &WindowBatch) -> WindowBatch {
        let mut out = batch.clone();
        for ((_, _, v), x) in out.windows.indexed_iter_mut() {
            *x = *x * self.std[v] + self.mean[v];
        }
        out
    }
}

/// Z-score a batch, fitting the statistics when none are supplied.
pub fn normalize(batch: &WindowBatch, stats: Option<&Normalizer>) -> (WindowBatch, Normalizer) {
    let stats = stats.cloned().unwrap_or_else(|| Normalizer::fit(batch));
    (stats.apply(batch), stats)
}
