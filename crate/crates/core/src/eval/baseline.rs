use ndarray::Array2;

use crate::detection::ScoreSeries;
use crate::error::{Error, Result};
use crate::vitals::{VitalSeries, N_VARS, STD_FLOOR};

/// Rolling z-score detector. Point `t` is compared with the mean and
/// population std of the `window` points before it; points earlier than
/// `window` use the statistics of the first `window` points. The score is
/// the largest absolute z over the variables, and `errors` holds the
/// per-variable |z|.
pub fn zscore_baseline(vitals: &VitalSeries, window: usize) -> Result<ScoreSeries> {
    let t_len = vitals.len();
    if window == 0 || t_len < window {
        return Err(Error::SeriesTooShort {
            len: t_len,
            needed: window.max(1),
        });
    }
    let cols = [&vitals.hr_bpm, &vitals.hrv_ms];
    let mut errors = Array2::zeros((t_len, N_VARS));
    for (v, col) in cols.iter().enumerate() {
        for t in 0..t_len {
            let range = if t < window { &col[..window] } else { &col[t - window..t] };
            let n = window as f64;
            let mean = range.iter().sum::<f64>() / n;
            let var = range.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            errors[[t, v]] = (col[t] - mean).abs() / var.sqrt().max(STD_FLOOR);
        }
    }
    let scores = errors.rows().into_iter().map(|r| r.fold(0.0f64, |m, &x| m.max(x))).collect();
    Ok(ScoreSeries { scores, errors })
}
