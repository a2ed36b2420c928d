//! Reconstruction training: chronological split, optional masking, Adam with
//! exponential learning-rate decay, best-validation checkpointing.

mod checkpoint;

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{forward, loss_and_grad, ModelConfig, ModelState};
use crate::par;
use crate::signal::{parse_kv_pairs, parse_value};
use crate::vitals::WindowBatch;

pub use checkpoint::{load_checkpoint, save_checkpoint, save_checkpoint_with, Checkpoint, Precision, CHECKPOINT_VERSION};

/// Windows per gradient work unit. Fixed so the summation order, and hence the
/// result, does not depend on the thread pool.
const GRAD_CHUNK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    FinetuneAll,
    /// Only the prompt tokens are updated.
    PromptOnly,
}

impl FromStr for TrainMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "finetune_all" => Ok(Self::FinetuneAll),
            "prompt_only" => Ok(Self::PromptOnly),
            other => Err(Error::InvalidConfig(format!("unknown mode {other:?}"))),
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::FinetuneAll => "finetune_all",
            Self::PromptOnly => "prompt_only",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr0: f64,
    pub lr_decay_gamma: f64,
    pub batch_size: usize,
    pub mode: TrainMode,
    /// Fraction of cells hidden from the input and scored; 0 means plain reconstruction.
    pub mask_ratio: f64,
    pub split_fraction: f64,
    pub eval_every_epochs: usize,
    pub seed: u64,
    pub clip_norm: f64,
    /// Stop after this many optimizer steps.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            lr0: 1e-3,
            lr_decay_gamma: 0.9,
            batch_size: 64,
            mode: TrainMode::FinetuneAll,
            mask_ratio: 0.0,
            split_fraction: 0.8,
            eval_every_epochs: 5,
            seed: 0,
            clip_norm: 1.0,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be >= 1");
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad("lr0 must be positive");
        }
        if !(self.lr_decay_gamma > 0.0 && self.lr_decay_gamma <= 1.0) {
            return bad("lr_decay_gamma must be in (0, 1]");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return bad("mask_ratio must be in [0, 1)");
        }
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return bad("split_fraction must be in (0, 1)");
        }
        if self.eval_every_epochs == 0 {
            return bad("eval_every_epochs must be >= 1");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be positive");
        }
        Ok(())
    }

    /// Apply one `key = value` setting; returns false for keys that are not training keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "epochs" => self.epochs = parse_value(key, value)?,
            "lr0" => self.lr0 = parse_value(key, value)?,
            "lr_decay_gamma" => self.lr_decay_gamma = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "mode" => self.mode = value.parse()?,
            "mask_ratio" => self.mask_ratio = parse_value(key, value)?,
            "split_fraction" => self.split_fraction = parse_value(key, value)?,
            "eval_every_epochs" => self.eval_every_epochs = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "clip_norm" => self.clip_norm = parse_value(key, value)?,
            "max_steps" => self.max_steps = Some(parse_value(key, value)?),
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Parse a run config holding both model and training keys.
pub fn parse_run_config(text: &str) -> Result<(ModelConfig, TrainConfig)> {
    let mut model = ModelConfig::default();
    let mut train = TrainConfig::default();
    for (key, value) in parse_kv_pairs(text)? {
        if key == "seed" {
            let seed: u64 = parse_value(&key, &value)?;
            model.seed = seed;
            train.seed = seed;
        } else if !model.set(&key, &value)? && !train.set(&key, &value)? {
            return Err(Error::InvalidConfig(format!("unknown key {key:?}")));
        }
    }
    model.validate()?;
    train.validate()?;
    Ok((model, train))
}

/// Learning rate used throughout epoch `epoch` (zero-based).
pub fn learning_rate(config: &TrainConfig, epoch: usize) -> f64 {
    config.lr0 * config.lr_decay_gamma.powi(epoch as i32)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Train loss of the initial parameters, before any step.
    pub initial_train_loss: f64,
    /// Mean batch loss per epoch.
    pub train_losses: Vec<f64>,
    /// `(epoch, loss)` for each validation pass; epochs are one-based.
    pub val_losses: Vec<(usize, f64)>,
    /// Epoch whose parameters were returned.
    pub best_epoch: usize,
    pub steps: usize,
    pub wall_time_s: f64,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss\n");
        for (i, loss) in self.train_losses.iter().enumerate() {
            let epoch = i + 1;
            let val = self
                .val_losses
                .iter()
                .find(|(e, _)| *e == epoch)
                .map(|(_, v)| v.to_string())
                .unwrap_or_default();
            out.push_str(&format!("{epoch},{loss},{val}\n"));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// First `fraction` of the windows (in time order) for training, the rest for validation.
pub fn split_train_val(batch: &WindowBatch, fraction: f64) -> Result<(WindowBatch, WindowBatch)> {
    let n = batch.len();
    if n < 2 {
        return Err(Error::TooFewWindows(n));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidConfig(format!("split fraction {fraction} not in (0, 1)")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| batch.starts[i]);
    let cut = ((n as f64 * fraction).floor() as usize).clamp(1, n - 1);
    Ok((batch.select(&order[..cut]), batch.select(&order[cut..])))
}

/// Mean squared error over the cells where `mask` is true, or over all cells.
pub fn reconstruction_loss(
    x: ArrayView2<'_, f64>,
    x_hat: ArrayView2<'_, f64>,
    mask: Option<ArrayView2<'_, bool>>,
) -> Result<f64> {
    if x.dim() != x_hat.dim() || mask.is_some_and(|m| m.dim() != x.dim()) {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", x.dim(), x_hat.dim())));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for ((idx, a), b) in x.indexed_iter().zip(x_hat.iter()) {
        if mask.map_or(true, |m| m[idx]) {
            sum += (a - b) * (a - b);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(sum / count as f64)
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z ^ (z >> 31)
}

/// Random cell mask with `round(ratio * K * n)` hidden cells (at least one).
fn cell_mask(shape: (usize, usize), ratio: f64, seed: u64) -> Array2<bool> {
    let cells = shape.0 * shape.1;
    let hidden = ((ratio * cells as f64).round() as usize).clamp(1, cells);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mask = Array2::from_elem(shape, false);
    for i in rand::seq::index::sample(&mut rng, cells, hidden) {
        mask[[i / shape.1, i % shape.1]] = true;
    }
    mask
}

/// Network input and score mask for one training or validation window.
fn prepare(window: ArrayView2<'_, f64>, ratio: f64, seed: u64) -> (Array2<f64>, Option<Array2<bool>>) {
    if ratio == 0.0 {
        return (window.to_owned(), None);
    }
    let mask = cell_mask(window.dim(), ratio, seed);
    let mut input = window.to_owned();
    input.zip_mut_with(&mask, |x, &m| {
        if m {
            *x = 0.0
        }
    });
    (input, Some(mask))
}

/// Mean reconstruction loss over a batch; masked windows use a fixed mask
/// stream so repeated evaluations agree.
pub fn evaluate(state: &ModelState, batch: &WindowBatch, mask_ratio: f64, seed: u64) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::TooFewWindows(0));
    }
    let losses = par::map_range(batch.len(), |i| {
        let target = batch.windows.index_axis(Axis(0), i);
        let (input, mask) = prepare(target, mask_ratio, mix(seed, u64::MAX, i as u64));
        let out = forward(input.view(), state)?;
        reconstruction_loss(target, out.view(), mask.as_ref().map(|m| m.view()))
    });
    let mut sum = 0.0;
    for l in losses {
        sum += l?;
    }
    Ok(sum / batch.len() as f64)
}

/// Mean loss and gradient over `indices`, accumulated in fixed chunks.
fn batch_gradient(
    state: &ModelState,
    batch: &WindowBatch,
    indices: &[usize],
    mask_ratio: f64,
    mask_seed: u64,
) -> Result<(f64, ModelState)> {
    let weight = 1.0 / indices.len() as f64;
    let parts = par::map_chunks(indices, GRAD_CHUNK, |chunk| -> Result<(f64, ModelState)> {
        let mut grads = ModelState::zeros_like(state);
        let mut loss = 0.0;
        for &i in chunk {
            let target = batch.windows.index_axis(Axis(0), i);
            let (input, mask) = prepare(target, mask_ratio, mix(mask_seed, i as u64, 0));
            loss += weight * loss_and_grad(state, input.view(), target, mask.as_ref().map(|m| m.view()), &mut grads, weight)?;
        }
        Ok((loss, grads))
    });
    let mut total = ModelState::zeros_like(state);
    let mut loss = 0.0;
    for part in parts {
        let (l, g) = part?;
        loss += l;
        total.add_scaled(&g, 1.0);
    }
    Ok((loss, total))
}

fn trainable(mode: TrainMode, name: &str) -> bool {
    match mode {
        TrainMode::FinetuneAll => true,
        TrainMode::PromptOnly => name == "prompt",
    }
}

struct Adam {
    m: ModelState,
    v: ModelState,
    t: i32,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Adam {
    fn new(state: &ModelState) -> Self {
        Self {
            m: state.zeros_like(),
            v: state.zeros_like(),
            t: 0,
        }
    }

    /// One update of the trainable tensors; the gradient is rescaled first so
    /// its norm over those tensors is at most `clip`.
    fn step(&mut self, state: &mut ModelState, grads: &ModelState, lr: f64, clip: f64, mode: TrainMode) {
        let grad_params = grads.params();
        let sq: f64 = grad_params
            .iter()
            .filter(|p| trainable(mode, &p.name))
            .flat_map(|p| p.data.iter())
            .map(|g| g * g)
            .sum();
        let norm = sq.sqrt();
        let factor = if norm > clip { clip / norm } else { 1.0 };
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t);
        let c2 = 1.0 - BETA2.powi(self.t);
        let params = state.params_mut();
        let ms = self.m.params_mut();
        let vs = self.v.params_mut();
        for (((p, g), m), v) in params.into_iter().zip(grad_params).zip(ms).zip(vs) {
            if !trainable(mode, &p.name) {
                continue;
            }
            for (((x, &g), m), v) in p.data.iter_mut().zip(g.data).zip(m.data.iter_mut()).zip(v.data.iter_mut()) {
                let g = g * factor;
                *m = BETA1 * *m + (1.0 - BETA1) * g;
                *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                *x -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
            }
        }
    }
}

/// Fit `init` to reconstruct the windows. Labelled-anomalous windows are
/// dropped from the training split. Returns the parameters with the lowest
/// validation loss among the evaluated epochs.
pub fn train(windows: &WindowBatch, config: &TrainConfig, init: ModelState) -> Result<(ModelState, TrainReport)> {
    config.validate()?;
    let mc = init.config;
    if windows.window_len() != mc.window_len || windows.n_vars() != mc.n_vars {
        return Err(Error::ShapeMismatch(format!(
            "windows ({}, {}), model ({}, {})",
            windows.window_len(),
            windows.n_vars(),
            mc.window_len,
            mc.n_vars
        )));
    }
    if config.mode == TrainMode::PromptOnly && mc.n_prompt == 0 {
        return Err(Error::InvalidConfig("prompt_only needs n_prompt >= 1".into()));
    }
    let started = Instant::now();
    let (train_split, val) = split_train_val(windows, config.split_fraction)?;
    let train_set = match &train_split.labels {
        Some(labels) => {
            let keep: Vec<usize> = (0..train_split.len()).filter(|&i| !labels[i]).collect();
            train_split.select(&keep)
        }
        None => train_split,
    };
    if train_set.is_empty() {
        return Err(Error::TooFewWindows(0));
    }

    let mut state = init;
    let mut adam = Adam::new(&state);
    let initial_train_loss = evaluate(&state, &train_set, config.mask_ratio, config.seed)?;
    let mut train_losses = Vec::new();
    let mut val_losses = Vec::new();
    let mut best: Option<(f64, usize, ModelState)> = None;
    let mut steps = 0usize;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 0..config.epochs {
        let lr = learning_rate(config, epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(mix(config.seed, epoch as u64, 1));
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        let mut stopped = false;
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            if config.max_steps.is_some_and(|m| steps >= m) {
                stopped = true;
                break;
            }
            let mask_seed = mix(config.seed, epoch as u64, b as u64 + 2);
            let (loss, grads) = batch_gradient(&state, &train_set, batch, config.mask_ratio, mask_seed)?;
            if !loss.is_finite() || !grads.is_finite() {
                return Err(diverged(epoch + 1, state, best));
            }
            let before = state.clone();
            adam.step(&mut state, &grads, lr, config.clip_norm, config.mode);
            if !state.is_finite() {
                return Err(diverged(epoch + 1, before, best));
            }
            steps += 1;
            loss_sum += loss * batch.len() as f64;
            seen += batch.len();
        }
        if seen > 0 {
            train_losses.push(loss_sum / seen as f64);
        }
        let last = stopped || epoch + 1 == config.epochs || config.max_steps.is_some_and(|m| steps >= m);
        if seen > 0 && ((epoch + 1) % config.eval_every_epochs == 0 || last) {
            let vl = evaluate(&state, &val, config.mask_ratio, config.seed)?;
            if !vl.is_finite() {
                return Err(diverged(epoch + 1, state, best));
            }
            val_losses.push((epoch + 1, vl));
            if best.as_ref().map_or(true, |(b, _, _)| vl < *b) {
                best = Some((vl, epoch + 1, state.clone()));
            }
        }
        if last {
            break;
        }
    }

    let (_, best_epoch, best_state) = best.expect("at least one epoch is evaluated");
    Ok((
        best_state,
        TrainReport {
            initial_train_loss,
            train_losses,
            val_losses,
            best_epoch,
            steps,
            wall_time_s: started.elapsed().as_secs_f64(),
        },
    ))
}

fn diverged(epoch: usize, current: ModelState, best: Option<(f64, usize, ModelState)>) -> Error {
    let last_finite = if current.is_finite() {
        current
    } else {
        best.map(|(_, _, s)| s).unwrap_or(current)
    };
    Error::NonFiniteLoss {
        epoch,
        last_finite: Box::new(last_finite),
    }
}
