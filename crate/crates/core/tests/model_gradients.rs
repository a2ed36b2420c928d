mod common;

use common::{gradient_errors, jittered, random2};
use ndarray::Array2;
use stressad_core::model::{loss_and_grad, ModelConfig, ModelState};
use stressad_core::Error;

fn small(patch_size: usize) -> ModelConfig {
    ModelConfig {
        n_vars: 2,
        window_len: 4,
        patch_size,
        embed_dim: 8,
        n_blocks: 2,
        n_heads: 2,
        n_prompt: 2,
        seed: 3,
    }
}

fn assert_close(errors: &[(String, f64)]) {
    for (name, e) in errors {
        assert!(*e < 1e-4, "{name}: relative error {e:e}");
    }
}

#[test]
fn gradients_with_patches_of_two() {
    let state = jittered(small(2), 11);
    let x = random2((4, 2), 1);
    let y = random2((4, 2), 2);
    assert_close(&gradient_errors(&state, x.view(), y.view(), None, 1e-5, 1e-6));
}

#[test]
fn gradients_under_a_score_mask() {
    let state = jittered(small(1), 12);
    let x = random2((4, 2), 3);
    let mask = Array2::from_shape_fn((4, 2), |(t, v)| (t + v) % 2 == 0);
    let masked_input = Array2::from_shape_fn((4, 2), |(t, v)| if mask[[t, v]] { 0.0 } else { x[[t, v]] });
    assert_close(&gradient_errors(
        &state,
        masked_input.view(),
        x.view(),
        Some(mask.view()),
        1e-5,
        1e-6,
    ));
}

#[test]
fn gradients_without_prompt_tokens() {
    let state = jittered(ModelConfig { n_prompt: 0, ..small(1) }, 13);
    let x = random2((4, 2), 4);
    assert_close(&gradient_errors(&state, x.view(), x.view(), None, 1e-5, 1e-6));
}

#[test]
fn loss_weight_scales_gradients() {
    let state = jittered(small(1), 14);
    let x = random2((4, 2), 5);
    let mut g1 = ModelState::zeros_like(&state);
    let mut g3 = ModelState::zeros_like(&state);
    let l1 = loss_and_grad(&state, x.view(), x.view(), None, &mut g1, 1.0).unwrap();
    let l3 = loss_and_grad(&state, x.view(), x.view(), None, &mut g3, 3.0).unwrap();
    assert_eq!(l1, l3);
    for (a, b) in g1.params().iter().zip(g3.params().iter()) {
        for (u, v) in a.data.iter().zip(b.data.iter()) {
            assert!((3.0 * u - v).abs() <= 1e-12 * v.abs().max(1.0));
        }
    }
}

#[test]
fn all_false_mask_is_rejected() {
    let state = jittered(small(1), 15);
    let x = random2((4, 2), 6);
    let mask = Array2::from_elem((4, 2), false);
    let mut g = ModelState::zeros_like(&state);
    let r = loss_and_grad(&state, x.view(), x.view(), Some(mask.view()), &mut g, 1.0);
    assert!(matches!(r, Err(Error::EmptyMask)));
}
