//! Raw waveform ingestion, resampling and the synthetic ECG/BVP generator.
//!
//! The generator is the ground truth for everything downstream: it emits a
//! waveform together with the exact beat times and the stress episodes that
//! shaped them.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Autocorrelation of the RR-interval jitter process.
pub const RR_AR_COEFF: f64 = 0.8;

/// Width (standard deviation, seconds) of the Gaussian R-wave template.
pub const ECG_TEMPLATE_SIGMA_S: f64 = 0.015;
/// BVP pulses are rendered with a much wider bump.
pub const BVP_TEMPLATE_SIGMA_S: f64 = 0.08;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SignalKind {
    Ecg,
    Bvp,
}

impl SignalKind {
    pub fn template_sigma_s(self) -> f64 {
        match self {
            SignalKind::Ecg => ECG_TEMPLATE_SIGMA_S,
            SignalKind::Bvp => BVP_TEMPLATE_SIGMA_S,
        }
    }
}

impl fmt::Display for SignalKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SignalKind::Ecg => "ecg",
            SignalKind::Bvp => "bvp",
        })
    }
}

impl FromStr for SignalKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ecg" => Ok(SignalKind::Ecg),
            "bvp" | "ppg" => Ok(SignalKind::Bvp),
            other => Err(Error::InvalidConfig(format!("unknown signal kind {other:?}"))),
        }
    }
}

/// A uniformly sampled one-dimensional physiological waveform.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSignal {
    samples: Vec<f64>,
    rate_hz: f64,
    kind: SignalKind,
    start_time: f64,
}

impl RawSignal {
    /// Validates rate and finiteness.
    pub fn new(samples: Vec<f64>, rate_hz: f64, kind: SignalKind, start_time: f64) -> Result<Self> {
        if !(rate_hz.is_finite() && rate_hz > 0.0) {
            return Err(Error::InvalidConfig(format!("rate_hz must be > 0, got {rate_hz}")));
        }
        if let Some(i) = samples.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFiniteSample(i));
        }
        Ok(Self {
            samples,
            rate_hz,
            kind,
            start_time,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn rate_hz(&self) -> f64 {
        self.rate_hz
    }

    pub fn kind(&self) -> SignalKind {
        self.kind
    }

    pub fn start_time(&self) -> f64 {
        self.start_time
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Time spanned from the first to the last sample.
    pub fn duration(&self) -> f64 {
        self.samples.len().saturating_sub(1) as f64 / self.rate_hz
    }

    pub fn time_of(&self, index: usize) -> f64 {
        self.start_time + index as f64 / self.rate_hz
    }

    pub fn end_time(&self) -> f64 {
        self.start_time + self.duration()
    }
}

/// Ground truth emitted alongside a synthetic signal.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BeatTruth {
    pub beat_times: Vec<f64>,
    /// Half-open `[start, end)` stress episodes, seconds.
    pub stress_intervals: Vec<(f64, f64)>,
}

impl BeatTruth {
    pub fn validate(&self) -> Result<()> {
        if self.beat_times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidConfig("beat times must be strictly increasing".into()));
        }
        let mut sorted = self.stress_intervals.clone();
        sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
        if sorted.iter().any(|&(s, e)| !(s < e)) {
            return Err(Error::InvalidConfig("stress interval with start >= end".into()));
        }
        if sorted.windows(2).any(|w| w[1].0 < w[0].1) {
            return Err(Error::InvalidConfig("stress intervals overlap".into()));
        }
        Ok(())
    }

    pub fn in_stress(&self, t: f64) -> bool {
        self.stress_intervals.iter().any(|&(s, e)| t >= s && t < e)
    }

    /// Seconds of `[a, b)` covered by stress episodes.
    pub fn stress_overlap(&self, a: f64, b: f64) -> f64 {
        self.stress_intervals
            .iter()
            .map(|&(s, e)| (e.min(b) - s.max(a)).max(0.0))
            .sum()
    }
}

/// Parameters of the synthetic generator. Parsed from `key = value` text.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub duration_s: f64,
    pub base_hr_bpm: f64,
    pub hr_jitter_bpm: f64,
    pub stress_hr_delta_bpm: f64,
    pub stress_hrv_scale: f64,
    pub episode_count: usize,
    pub episode_len_s: f64,
    /// `f64::INFINITY` disables noise.
    pub noise_snr_db: f64,
    pub seed: u64,
    pub rate_hz: f64,
    pub kind: SignalKind,
    /// Stress-free lead-in; episodes are placed after it.
    pub warmup_s: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            duration_s: 1800.0,
            base_hr_bpm: 70.0,
            hr_jitter_bpm: 3.0,
            stress_hr_delta_bpm: 30.0,
            stress_hrv_scale: 0.5,
            episode_count: 3,
            episode_len_s: 240.0,
            noise_snr_db: 20.0,
            seed: 0,
            rate_hz: 256.0,
            kind: SignalKind::Ecg,
            warmup_s: 600.0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.duration_s.is_finite() && self.duration_s > 0.0) {
            return bad(format!("duration_s must be > 0, got {}", self.duration_s));
        }
        if !(self.rate_hz.is_finite() && self.rate_hz > 0.0) {
            return bad(format!("rate_hz must be > 0, got {}", self.rate_hz));
        }
        let stressed = self.base_hr_bpm + self.stress_hr_delta_bpm;
        for hr in [self.base_hr_bpm, stressed] {
            if !(30.0..=220.0).contains(&hr) {
                return bad(format!("heart rate {hr} bpm outside [30, 220]"));
            }
        }
        if !(self.stress_hrv_scale > 0.0 && self.stress_hrv_scale <= 1.0) {
            return bad(format!("stress_hrv_scale must be in (0, 1], got {}", self.stress_hrv_scale));
        }
        if !(self.hr_jitter_bpm >= 0.0 && self.hr_jitter_bpm.is_finite()) {
            return bad("hr_jitter_bpm must be finite and >= 0".into());
        }
        if self.noise_snr_db.is_nan() {
            return bad("noise_snr_db is NaN".into());
        }
        if self.episode_count > 0 {
            if !(self.episode_len_s > 0.0) {
                return bad("episode_len_s must be > 0".into());
            }
            if !(self.warmup_s >= 0.0) {
                return bad("warmup_s must be >= 0".into());
            }
            let slot = (self.duration_s - self.warmup_s) / self.episode_count as f64;
            if slot <= self.episode_len_s {
                return bad(format!(
                    "{} episodes of {} s do not fit after a {} s warmup",
                    self.episode_count, self.episode_len_s, self.warmup_s
                ));
            }
        }
        Ok(())
    }

    /// Parse `key = value` lines; `#` starts a comment. Unknown keys are rejected.
    pub fn parse_kv(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (key, value) in parse_kv_pairs(text)? {
            let num = || -> Result<f64> {
                value
                    .parse::<f64>()
                    .map_err(|_| Error::InvalidConfig(format!("{key}: bad number {value:?}")))
            };
            match key.as_str() {
                "duration_s" => cfg.duration_s = num()?,
                "base_hr_bpm" => cfg.base_hr_bpm = num()?,
                "hr_jitter_bpm" => cfg.hr_jitter_bpm = num()?,
                "stress_hr_delta_bpm" => cfg.stress_hr_delta_bpm = num()?,
                "stress_hrv_scale" => cfg.stress_hrv_scale = num()?,
                "episode_count" => cfg.episode_count = parse_value(&key, &value)?,
                "episode_len_s" => cfg.episode_len_s = num()?,
                "noise_snr_db" => cfg.noise_snr_db = num()?,
                "seed" => cfg.seed = parse_value(&key, &value)?,
                "rate_hz" => cfg.rate_hz = num()?,
                "kind" => cfg.kind = value.parse()?,
                "warmup_s" => cfg.warmup_s = num()?,
                _ => return Err(Error::InvalidConfig(format!("unknown key {key:?}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> String {
        format!(
            "duration_s = {}\nbase_hr_bpm = {}\nhr_jitter_bpm = {}\nstress_hr_delta_bpm = {}\n\
             stress_hrv_scale = {}\nepisode_count = {}\nepisode_len_s = {}\nnoise_snr_db = {}\n\
             seed = {}\nrate_hz = {}\nkind = {}\nwarmup_s = {}\n",
            self.duration_s,
            self.base_hr_bpm,
            self.hr_jitter_bpm,
            self.stress_hr_delta_bpm,
            self.stress_hrv_scale,
            self.episode_count,
            self.episode_len_s,
            self.noise_snr_db,
            self.seed,
            self.rate_hz,
            self.kind,
            self.warmup_s
        )
    }
}

/// Split `key = value` text into pairs. Shared by every config file format.
pub fn parse_kv_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::InvalidConfig(format!("line {}: expected key = value", lineno + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub(crate) fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse::<T>()
        .map_err(|_| Error::InvalidConfig(format!("{key}: bad value {value:?}")))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SignalFormat {
    /// Header `time_s,value`, or a single `value` column with the rate given out-of-band.
    Csv,
    /// Little-endian f32 stream; rate given out-of-band.
    RawF32,
}

impl FromStr for SignalFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(SignalFormat::Csv),
            "raw_f32" | "f32" => Ok(SignalFormat::RawF32),
            other => Err(Error::InvalidConfig(format!("unknown signal format {other:?}"))),
        }
    }
}

/// Load and validate a waveform.
///
/// `rate_hz` is required for raw streams and value-only CSVs; for timestamped
/// CSVs the rate is derived from the timestamps.
pub fn load_signal(
    path: impl AsRef<Path>,
    format: SignalFormat,
    rate_hz: Option<f64>,
    kind: SignalKind,
) -> Result<RawSignal> {
    let path = path.as_ref();
    match format {
        SignalFormat::RawF32 => {
            let rate = rate_hz.ok_or_else(|| Error::MalformedFile("raw_f32 input needs a rate".into()))?;
            let mut bytes = Vec::new();
            File::open(path)
                .and_then(|mut f| f.read_to_end(&mut bytes))
                .map_err(|e| Error::io(path, e))?;
            if bytes.len() % 4 != 0 {
                return Err(Error::MalformedFile(format!(
                    "raw_f32 stream length {} is not a multiple of 4",
                    bytes.len()
                )));
            }
            let samples = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            RawSignal::new(samples, rate, kind, 0.0)
        }
        SignalFormat::Csv => {
            let file = File::open(path).map_err(|e| Error::io(path, e))?;
            read_signal_csv(file, rate_hz, kind)
        }
    }
}

fn read_signal_csv<R: Read>(reader: R, rate_hz: Option<f64>, kind: SignalKind) -> Result<RawSignal> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::MalformedFile(e.to_string()))?
        .clone();
    let cols: Vec<&str> = headers.iter().collect();
    let timed = match cols.as_slice() {
        ["time_s", "value"] => true,
        ["value"] => false,
        _ => return Err(Error::MalformedFile(format!("unexpected header {cols:?}"))),
    };
    let mut times = Vec::new();
    let mut samples = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::MalformedFile(e.to_string()))?;
        if rec.len() != cols.len() {
            return Err(Error::MalformedFile(format!("row {} has {} fields", row + 1, rec.len())));
        }
        let field = |i: usize| -> Result<f64> {
            rec[i]
                .parse::<f64>()
                .map_err(|_| Error::MalformedFile(format!("row {}: bad number {:?}", row + 1, &rec[i])))
        };
        let value = field(cols.len() - 1)?;
        if !value.is_finite() {
            return Err(Error::NonFiniteSample(row));
        }
        samples.push(value);
        if timed {
            times.push(field(0)?);
        }
    }
    if !timed {
        let rate = rate_hz.ok_or_else(|| Error::MalformedFile("value-only CSV needs a rate".into()))?;
        return RawSignal::new(samples, rate, kind, 0.0);
    }
    if times.len() < 2 {
        return Err(Error::DegenerateSignal(format!("{} samples", times.len())));
    }
    let span = times[times.len() - 1] - times[0];
    if !(span > 0.0) {
        return Err(Error::IrregularSampling { deviation_s: span.abs() });
    }
    let rate = rate_hz.unwrap_or((times.len() - 1) as f64 / span);
    let period = 1.0 / rate;
    let deviation = times
        .windows(2)
        .map(|w| (w[1] - w[0] - period).abs())
        .fold(0.0, f64::max);
    if deviation > 0.01 * period {
        return Err(Error::IrregularSampling { deviation_s: deviation });
    }
    RawSignal::new(samples, rate, kind, times[0])
}

pub fn write_signal_csv(signal: &RawSignal, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut go = || -> std::io::Result<()> {
        writeln!(w, "time_s,value")?;
        for (i, v) in signal.samples().iter().enumerate() {
            writeln!(w, "{},{}", signal.time_of(i), v)?;
        }
        w.flush()
    };
    go().map_err(|e| Error::io(path, e))
}

pub fn write_signal_raw_f32(signal: &RawSignal, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes: Vec<u8> = signal
        .samples()
        .iter()
        .flat_map(|&v| (v as f32).to_le_bytes())
        .collect();
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Truth CSV: header `kind,start_s,end_s`; `beat` rows carry the beat time
/// in both columns, `stress` rows carry an episode.
pub fn write_truth_csv(truth: &BeatTruth, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut go = || -> std::io::Result<()> {
        writeln!(w, "kind,start_s,end_s")?;
        for &(s, e) in &truth.stress_intervals {
            writeln!(w, "stress,{s},{e}")?;
        }
        for &t in &truth.beat_times {
            writeln!(w, "beat,{t},{t}")?;
        }
        w.flush()
    };
    go().map_err(|e| Error::io(path, e))
}

pub fn load_truth_csv(path: impl AsRef<Path>) -> Result<BeatTruth> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let headers = rdr.headers().map_err(|e| Error::MalformedFile(e.to_string()))?;
    if headers.iter().collect::<Vec<_>>() != ["kind", "start_s", "end_s"] {
        return Err(Error::MalformedFile(format!("unexpected truth header {headers:?}")));
    }
    let mut truth = BeatTruth::default();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::MalformedFile(e.to_string()))?;
        let num = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|s| s.parse::<f64>().ok())
                .ok_or_else(|| Error::MalformedFile(format!("truth row {}: bad number", row + 1)))
        };
        match rec.get(0) {
            Some("beat") => truth.beat_times.push(num(1)?),
            Some("stress") => truth.stress_intervals.push((num(1)?, num(2)?)),
            other => return Err(Error::MalformedFile(format!("truth row {}: kind {other:?}", row + 1))),
        }
    }
    truth.validate()?;
    Ok(truth)
}

/// Linear-interpolation downsampling.
///
/// Output sample `j` sits at `start + j / target_hz`; the output has
/// `floor(duration * target_hz) + 1` samples.
pub fn resample(signal: &RawSignal, target_hz: f64) -> Result<RawSignal> {
    if signal.len() < 2 {
        return Err(Error::DegenerateSignal(format!("{} samples", signal.len())));
    }
    if !(target_hz > 0.0 && target_hz.is_finite()) {
        return Err(Error::InvalidConfig(format!("target_hz must be > 0, got {target_hz}")));
    }
    let rate = signal.rate_hz();
    if target_hz > rate * (1.0 + 1e-12) {
        return Err(Error::UpsampleRequested {
            rate_hz: rate,
            target_hz,
        });
    }
    let xs = signal.samples();
    let last = xs.len() - 1;
    let out_len = (signal.duration() * target_hz + 1e-9).floor() as usize + 1;
    let ratio = rate / target_hz;
    let out = (0..out_len)
        .map(|j| {
            let pos = j as f64 * ratio;
            let i0 = (pos.floor() as usize).min(last - 1);
            let frac = (pos - i0 as f64).clamp(0.0, 1.0);
            if frac == 0.0 {
                xs[i0]
            } else {
                xs[i0] + (xs[i0 + 1] - xs[i0]) * frac
            }
        })
        .collect();
    RawSignal::new(out, target_hz, signal.kind(), signal.start_time())
}

fn place_episodes(cfg: &GeneratorConfig, rng: &mut ChaCha8Rng) -> Vec<(f64, f64)> {
    if cfg.episode_count == 0 {
        return Vec::new();
    }
    let slot = (cfg.duration_s - cfg.warmup_s) / cfg.episode_count as f64;
    let slack = slot - cfg.episode_len_s;
    (0..cfg.episode_count)
        .map(|i| {
            let u: f64 = rng.gen_range(0.25..0.75);
            let start = cfg.warmup_s + i as f64 * slot + u * slack;
            (start, start + cfg.episode_len_s)
        })
        .collect()
}

/// Deterministic synthetic ECG-like (or BVP-like) recording with stress episodes.
///
/// RR intervals follow an AR(1) jitter process around `60 / hr`; inside an
/// episode the mean heart rate rises by `stress_hr_delta_bpm` and the jitter
/// amplitude is multiplied by `stress_hrv_scale`. Each beat is rendered as a
/// Gaussian bump of unit height on a flat baseline, then white noise is added
/// at the configured SNR (relative to the clean signal power).
pub fn generate_synthetic(cfg: &GeneratorConfig) -> Result<(RawSignal, BeatTruth)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let stress_intervals = place_episodes(cfg, &mut rng);
    let truth_probe = BeatTruth {
        beat_times: Vec::new(),
        stress_intervals: stress_intervals.clone(),
    };

    // RR std implied by an HR jitter of `hr_jitter_bpm` around the base rate.
    let base_rr = 60.0 / cfg.base_hr_bpm;
    let stress_rr = 60.0 / (cfg.base_hr_bpm + cfg.stress_hr_delta_bpm);
    let rr_sigma = 60.0 * cfg.hr_jitter_bpm / (cfg.base_hr_bpm * cfg.base_hr_bpm);
    let innovation = (1.0 - RR_AR_COEFF * RR_AR_COEFF).sqrt();

    let sigma_t = cfg.kind.template_sigma_s();
    let margin = 5.0 * sigma_t;
    let mut e: f64 = rng.sample(StandardNormal);
    let mut t = margin + rng.gen_range(0.0..1.0) * base_rr;
    let mut beat_times = Vec::new();
    while t < cfg.duration_s - margin {
        beat_times.push(t);
        let z: f64 = rng.sample(StandardNormal);
        e = RR_AR_COEFF * e + innovation * z;
        let (mean, sd) = if truth_probe.in_stress(t) {
            (stress_rr, rr_sigma * cfg.stress_hrv_scale)
        } else {
            (base_rr, rr_sigma)
        };
        t += (mean + sd * e).clamp(0.3, 2.5);
    }

    let n = (cfg.duration_s * cfg.rate_hz).round() as usize;
    let mut samples = vec![0.0; n];
    let half = (margin * cfg.rate_hz).ceil() as i64;
    for &tb in &beat_times {
        let centre = (tb * cfg.rate_hz).round() as i64;
        for i in (centre - half).max(0)..=(centre + half).min(n as i64 - 1) {
            let dt = i as f64 / cfg.rate_hz - tb;
            samples[i as usize] += (-0.5 * (dt / sigma_t).powi(2)).exp();
        }
    }
    if cfg.noise_snr_db.is_finite() && n > 0 {
        let power = samples.iter().map(|x| x * x).sum::<f64>() / n as f64;
        let noise_sd = (power / 10f64.powf(cfg.noise_snr_db / 10.0)).sqrt();
        for x in &mut samples {
            let z: f64 = rng.sample(StandardNormal);
            *x += noise_sd * z;
        }
    }
    let truth = BeatTruth {
        beat_times,
        stress_intervals,
    };
    let signal = RawSignal::new(samples, cfg.rate_hz, cfg.kind, 0.0)?;
    Ok((signal, truth))
}
