#![allow(dead_code)]

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stressad_core::model::{forward, loss_and_grad, ModelConfig, ModelState};

pub fn random2(shape: (usize, usize), seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_simple_fn(shape, || rng.gen_range(-1.0..1.0))
}

/// Initialised model with every parameter perturbed, so no gradient is
/// trivially zero.
pub fn jittered(config: ModelConfig, seed: u64) -> ModelState {
    let mut s = ModelState::init(config).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in s.params_mut() {
        for x in p.data.iter_mut() {
            *x += rng.gen_range(-0.3..0.3);
        }
    }
    s
}

fn mse(state: &ModelState, input: ArrayView2<f64>, target: ArrayView2<f64>, mask: Option<ArrayView2<bool>>) -> f64 {
    let out = forward(input, state).unwrap();
    let mut sum = 0.0;
    let mut count = 0usize;
    for ((idx, o), t) in out.indexed_iter().zip(target.iter()) {
        if mask.map_or(true, |m| m[idx]) {
            sum += (o - t) * (o - t);
            count += 1;
        }
    }
    sum / count as f64
}

/// Worst relative error per parameter group of analytic gradients against
/// central differences.
pub fn gradient_errors(
    state: &ModelState,
    input: ArrayView2<f64>,
    target: ArrayView2<f64>,
    mask: Option<ArrayView2<bool>>,
    step: f64,
    floor: f64,
) -> Vec<(String, f64)> {
    let mut grads = ModelState::zeros_like(state);
    loss_and_grad(state, input, target, mask, &mut grads, 1.0).unwrap();
    let analytic: Vec<Vec<f64>> = grads.params().into_iter().map(|p| p.data.to_vec()).collect();
    let names: Vec<String> = state.params().into_iter().map(|p| p.name).collect();

    let mut probe = state.clone();
    let mut out = Vec::new();
    for (g, name) in names.iter().enumerate() {
        let len = analytic[g].len();
        let mut worst = 0.0f64;
        for i in 0..len {
            let orig = probe.params()[g].data[i];
            probe.params_mut()[g].data[i] = orig + step;
            let up = mse(&probe, input, target, mask);
            probe.params_mut()[g].data[i] = orig - step;
            let down = mse(&probe, input, target, mask);
            probe.params_mut()[g].data[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic[g][i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            worst = worst.max(err);
        }
        out.push((name.clone(), worst));
    }
    out
}
