//! Stress detection as reconstruction-based anomaly detection.
//!
//! Pipeline: raw ECG/BVP waveform -> beat detection -> HR/HRV vitals every
//! `step` seconds -> stride-1 windows -> reconstruction transformer ->
//! per-point squared error -> percentile thresholds -> labels and per-signal
//! contributions. The [`eval`] module adds metrics, rank statistics, a
//! z-score baseline and the sampling-interval ablation.

pub mod detection;
pub mod error;
pub mod eval;
pub mod model;
pub mod par;
pub mod signal;
pub mod training;
pub mod vitals;

pub use error::{Error, Result};
