//! Tokenisation, blocks, tower and the full forward/backward pass.

use std::borrow::Cow;

use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis};

use super::layers::{
    dy_weight, gelu, gelu_grad, layer_norm_backward, layer_norm_forward, linear_backward, linear_forward,
    mhsa_backward, mhsa_forward, sigmoid, AttnCache, DyWeight, LnCache,
};
use super::{Block, ModelConfig, ModelState};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Sample,
    Prompt,
    Concat,
}

/// Tokens laid out `(time_tokens, n_vars, embed_dim)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenTensor {
    pub data: Array3<f64>,
    pub kind: TokenKind,
}

fn flat(a: &Array3<f64>) -> ArrayView2<'_, f64> {
    let (l, n, d) = a.dim();
    a.view()
        .into_shape_with_order((l * n, d))
        .expect("token tensors are contiguous")
}

fn contiguous(a: &Array3<f64>) -> Cow<'_, Array3<f64>> {
    if a.is_standard_layout() {
        Cow::Borrowed(a)
    } else {
        Cow::Owned(a.as_standard_layout().into_owned())
    }
}

fn unflat(a: Array2<f64>, l: usize, n: usize) -> Array3<f64> {
    let d = a.ncols();
    a.into_shape_with_order((l, n, d)).expect("row count is l * n")
}

fn check_window(cfg: &ModelConfig, window: &ArrayView2<'_, f64>) -> Result<()> {
    if window.dim() != (cfg.window_len, cfg.n_vars) {
        return Err(Error::ShapeMismatch(format!(
            "window {:?}, model expects ({}, {})",
            window.dim(),
            cfg.window_len,
            cfg.n_vars
        )));
    }
    Ok(())
}

/// Patch matrix with row `t * n + v` holding `window[t*k..(t+1)*k, v]`.
fn patches_of(cfg: &ModelConfig, window: &ArrayView2<'_, f64>) -> Array2<f64> {
    let (k, n) = (cfg.patch_size, cfg.n_vars);
    Array2::from_shape_fn((cfg.n_patches() * n, k), |(r, j)| window[[(r / n) * k + j, r % n]])
}

fn patchify_raw(state: &ModelState, patches: &Array2<f64>) -> Array3<f64> {
    let cfg = &state.config;
    let mut z = unflat(linear_forward(patches.view(), &state.patch), cfg.n_patches(), cfg.n_vars);
    for (mut tok, pos) in z.outer_iter_mut().zip(state.pos.outer_iter()) {
        tok += &pos;
    }
    z
}

/// Split the window into `K / k` patches per variable, project each to `d`
/// with a projection shared across variables and add positional embeddings.
pub fn patchify(window: ArrayView2<'_, f64>, state: &ModelState) -> Result<TokenTensor> {
    check_window(&state.config, &window)?;
    let patches = patches_of(&state.config, &window);
    Ok(TokenTensor {
        data: patchify_raw(state, &patches),
        kind: TokenKind::Sample,
    })
}

fn concat_raw(state: &ModelState, sample: &Array3<f64>) -> Array3<f64> {
    let p = state.config.n_prompt;
    let (ls, n, d) = sample.dim();
    let mut out = Array3::zeros((p + ls, n, d));
    out.slice_mut(s![..p, .., ..]).assign(&state.prompt);
    out.slice_mut(s![p.., .., ..]).assign(sample);
    out
}

/// Prepend the prompt tokens along the time axis.
pub fn concat_prompt(sample: &TokenTensor, state: &ModelState) -> Result<TokenTensor> {
    if sample.kind != TokenKind::Sample {
        return Err(Error::ShapeMismatch("concat_prompt expects sample tokens".into()));
    }
    let cfg = &state.config;
    if sample.data.dim() != (cfg.n_patches(), cfg.n_vars, cfg.embed_dim) {
        return Err(Error::ShapeMismatch(format!("sample tokens {:?}", sample.data.dim())));
    }
    Ok(TokenTensor {
        data: concat_raw(state, &sample.data),
        kind: TokenKind::Concat,
    })
}

struct TimeAttnCache {
    ln: LnCache,
    attn: Vec<AttnCache>,
}

fn time_attn_forward(blk: &Block, heads: usize, x: &Array3<f64>) -> (Array3<f64>, TimeAttnCache) {
    let (l, n, d) = x.dim();
    let (u, ln) = layer_norm_forward(flat(x), &blk.norm_time);
    let u = unflat(u, l, n);
    let mut out = x.clone();
    let mut attn = Vec::with_capacity(n);
    for v in 0..n {
        let (y, c) = mhsa_forward(&blk.time_attn, heads, u.index_axis(Axis(1), v));
        let mut dst = out.index_axis_mut(Axis(1), v);
        dst += &y;
        attn.push(c);
    }
    debug_assert_eq!(out.dim(), (l, n, d));
    (out, TimeAttnCache { ln, attn })
}

fn time_attn_backward(
    blk: &Block,
    g: &mut Block,
    heads: usize,
    cache: &TimeAttnCache,
    dout: &Array3<f64>,
) -> Array3<f64> {
    let (l, n, d) = dout.dim();
    let mut du = Array3::zeros((l, n, d));
    for v in 0..n {
        let dx = mhsa_backward(&blk.time_attn, &mut g.time_attn, heads, &cache.attn[v], dout.index_axis(Axis(1), v));
        du.index_axis_mut(Axis(1), v).assign(&dx);
    }
    let dx = layer_norm_backward(&blk.norm_time, &mut g.norm_time, &cache.ln, flat(&du));
    dout + &unflat(dx, l, n)
}

struct VarAttnCache {
    ln: LnCache,
    attn: Vec<AttnCache>,
    skip: usize,
}

/// Variable attention on time positions `skip..`; earlier positions pass through.
fn var_attn_forward(blk: &Block, heads: usize, x: &Array3<f64>, skip: usize) -> (Array3<f64>, VarAttnCache) {
    let (l, n, _) = x.dim();
    let (u, ln) = layer_norm_forward(flat(x), &blk.norm_var);
    let u = unflat(u, l, n);
    let mut out = x.clone();
    let mut attn = Vec::with_capacity(l.saturating_sub(skip));
    for t in skip..l {
        let (y, c) = mhsa_forward(&blk.var_attn, heads, u.index_axis(Axis(0), t));
        let mut dst = out.index_axis_mut(Axis(0), t);
        dst += &y;
        attn.push(c);
    }
    (out, VarAttnCache { ln, attn, skip })
}

fn var_attn_backward(
    blk: &Block,
    g: &mut Block,
    heads: usize,
    cache: &VarAttnCache,
    dout: &Array3<f64>,
) -> Array3<f64> {
    let (l, n, d) = dout.dim();
    let mut du = Array3::zeros((l, n, d));
    for (i, t) in (cache.skip..l).enumerate() {
        let dx = mhsa_backward(&blk.var_attn, &mut g.var_attn, heads, &cache.attn[i], dout.index_axis(Axis(0), t));
        du.index_axis_mut(Axis(0), t).assign(&dx);
    }
    let dx = layer_norm_backward(&blk.norm_var, &mut g.norm_var, &cache.ln, flat(&du));
    dout + &unflat(dx, l, n)
}

struct FfnCache {
    ln: LnCache,
    u: Array2<f64>,
    hidden: Array3<f64>,
    mixed: Array2<f64>,
    act: Array2<f64>,
    dy: DyWeight,
}

/// Point-wise `d -> 2d -> d` FFN whose hidden layer is summed with a
/// DyLinear pass across the time-token axis before the activation.
fn ffn_forward(blk: &Block, x: &Array3<f64>) -> (Array3<f64>, FfnCache) {
    let (l, n, _) = x.dim();
    let (u, ln) = layer_norm_forward(flat(x), &blk.norm_ffn);
    let hidden = unflat(linear_forward(u.view(), &blk.ffn_in), l, n);
    let dy = dy_weight(&blk.ffn_dyn, l, l);
    let mut mixed3 = hidden.clone();
    for v in 0..n {
        let mix = dy.weight.dot(&hidden.index_axis(Axis(1), v));
        let mut dst = mixed3.index_axis_mut(Axis(1), v);
        dst += &mix;
    }
    let mixed = flat(&mixed3).to_owned();
    let act = mixed.mapv(gelu);
    let y = unflat(linear_forward(act.view(), &blk.ffn_out), l, n);
    (
        x + &y,
        FfnCache {
            ln,
            u,
            hidden,
            mixed,
            act,
            dy,
        },
    )
}

fn ffn_backward(blk: &Block, g: &mut Block, cache: &FfnCache, dout: &Array3<f64>) -> Array3<f64> {
    let (l, n, _) = dout.dim();
    let dact = linear_backward(cache.act.view(), &blk.ffn_out, &mut g.ffn_out, flat(dout));
    let dmixed = unflat(
        ndarray::Zip::from(&dact).and(&cache.mixed).map_collect(|&da, &m| da * gelu_grad(m)),
        l,
        n,
    );
    let mut dhidden = dmixed.clone();
    let mut dweight = Array2::zeros((l, l));
    for v in 0..n {
        let dm = dmixed.index_axis(Axis(1), v);
        let back = cache.dy.weight.t().dot(&dm);
        let mut dst = dhidden.index_axis_mut(Axis(1), v);
        dst += &back;
        dweight += &dm.dot(&cache.hidden.index_axis(Axis(1), v).t());
    }
    g.ffn_dyn += &cache.dy.pull_back(&dweight);
    let du = linear_backward(cache.u.view(), &blk.ffn_in, &mut g.ffn_in, flat(&dhidden));
    let dx = layer_norm_backward(&blk.norm_ffn, &mut g.norm_ffn, &cache.ln, du.view());
    dout + &unflat(dx, l, n)
}

fn gate_raw(x: &Array3<f64>, alpha: &Array1<f64>) -> Array3<f64> {
    x * &alpha.mapv(sigmoid)
}

fn gate_backward(x: &Array3<f64>, alpha: &Array1<f64>, g_alpha: &mut Array1<f64>, dout: &Array3<f64>) -> Array3<f64> {
    let sig = alpha.mapv(sigmoid);
    let dsig = sig.mapv(|s| s * (1.0 - s));
    let prod = flat(&(dout * x)).sum_axis(Axis(0));
    *g_alpha += &(prod * &dsig);
    dout * &sig
}

struct BlockCache {
    time: TimeAttnCache,
    var: VarAttnCache,
    pre_gate_attn: Array3<f64>,
    ffn: FfnCache,
    pre_gate_ffn: Array3<f64>,
}

fn block_forward(blk: &Block, heads: usize, skip: usize, x: &Array3<f64>) -> (Array3<f64>, BlockCache) {
    let (x1, time) = time_attn_forward(blk, heads, x);
    let (x2, var) = var_attn_forward(blk, heads, &x1, skip);
    let x3 = gate_raw(&x2, &blk.gate_attn);
    let (x4, ffn) = ffn_forward(blk, &x3);
    let x5 = gate_raw(&x4, &blk.gate_ffn);
    (
        x5,
        BlockCache {
            time,
            var,
            pre_gate_attn: x2,
            ffn,
            pre_gate_ffn: x4,
        },
    )
}

fn block_backward(blk: &Block, g: &mut Block, heads: usize, cache: &BlockCache, dout: &Array3<f64>) -> Array3<f64> {
    let d4 = gate_backward(&cache.pre_gate_ffn, &blk.gate_ffn, &mut g.gate_ffn, dout);
    let d3 = ffn_backward(blk, g, &cache.ffn, &d4);
    let d2 = gate_backward(&cache.pre_gate_attn, &blk.gate_attn, &mut g.gate_attn, &d3);
    let d1 = var_attn_backward(blk, g, heads, &cache.var, &d2);
    time_attn_backward(blk, g, heads, &cache.time, &d1)
}

fn block_of(state: &ModelState, block_idx: usize) -> Result<&Block> {
    state
        .blocks
        .get(block_idx)
        .ok_or_else(|| Error::ShapeMismatch(format!("block {block_idx} of {}", state.blocks.len())))
}

fn check_tokens(state: &ModelState, tokens: &TokenTensor) -> Result<()> {
    let cfg = &state.config;
    let (_, n, d) = tokens.data.dim();
    if n != cfg.n_vars || d != cfg.embed_dim {
        return Err(Error::ShapeMismatch(format!("tokens {:?}", tokens.data.dim())));
    }
    Ok(())
}

/// Pre-norm multi-head self-attention along the time-token axis, run
/// independently per variable, plus the residual.
pub fn time_attention(tokens: &TokenTensor, state: &ModelState, block_idx: usize) -> Result<TokenTensor> {
    check_tokens(state, tokens)?;
    let blk = block_of(state, block_idx)?;
    let (data, _) = time_attn_forward(blk, state.config.n_heads, &contiguous(&tokens.data));
    Ok(TokenTensor { data, kind: tokens.kind })
}

/// Pre-norm multi-head self-attention along the variable axis, per time
/// token, plus the residual. Prompt positions of a concatenated tensor are
/// passed through unchanged.
pub fn variable_attention(tokens: &TokenTensor, state: &ModelState, block_idx: usize) -> Result<TokenTensor> {
    check_tokens(state, tokens)?;
    let blk = block_of(state, block_idx)?;
    let skip = prompt_positions(state, tokens);
    let (data, _) = var_attn_forward(blk, state.config.n_heads, &contiguous(&tokens.data), skip);
    Ok(TokenTensor { data, kind: tokens.kind })
}

fn prompt_positions(state: &ModelState, tokens: &TokenTensor) -> usize {
    match tokens.kind {
        TokenKind::Concat => state.config.n_prompt.min(tokens.data.dim().0),
        TokenKind::Sample => 0,
        TokenKind::Prompt => tokens.data.dim().0,
    }
}

pub fn dynamic_ffn(tokens: &TokenTensor, state: &ModelState, block_idx: usize) -> Result<TokenTensor> {
    check_tokens(state, tokens)?;
    let blk = block_of(state, block_idx)?;
    let (data, _) = ffn_forward(blk, &contiguous(&tokens.data));
    Ok(TokenTensor { data, kind: tokens.kind })
}

/// Element-wise `x * sigmoid(alpha)`, broadcast over time and variables.
pub fn gate(tokens: &TokenTensor, alpha: &Array1<f64>) -> Result<TokenTensor> {
    if tokens.data.dim().2 != alpha.len() {
        return Err(Error::ShapeMismatch(format!(
            "gate of width {} on tokens {:?}",
            alpha.len(),
            tokens.data.dim()
        )));
    }
    Ok(TokenTensor {
        data: gate_raw(&tokens.data, alpha),
        kind: tokens.kind,
    })
}

struct TowerCache {
    z: Array3<f64>,
    dy: DyWeight,
    mixed: Array2<f64>,
    pre_act: Array2<f64>,
    act: Array2<f64>,
    mlp: Array2<f64>,
}

fn tower_forward(state: &ModelState, z: Array3<f64>) -> (Array2<f64>, TowerCache) {
    let cfg = &state.config;
    let tw = &state.tower;
    let (ls, n, _) = z.dim();
    let k = cfg.patch_size;
    let dy = dy_weight(&tw.dyn_w, ls, ls);
    let mut mixed3 = z.clone();
    for v in 0..n {
        let mix = dy.weight.dot(&z.index_axis(Axis(1), v));
        let mut dst = mixed3.index_axis_mut(Axis(1), v);
        dst += &mix;
    }
    let mixed = flat(&mixed3).to_owned();
    let pre_act = linear_forward(mixed.view(), &tw.mlp_in);
    let act = pre_act.mapv(gelu);
    let mlp = linear_forward(act.view(), &tw.mlp_out);
    let patches = linear_forward(mlp.view(), &tw.proj);
    let out = Array2::from_shape_fn((ls * k, n), |(i, v)| patches[[(i / k) * n + v, i % k]]);
    (
        out,
        TowerCache {
            z,
            dy,
            mixed,
            pre_act,
            act,
            mlp,
        },
    )
}

fn tower_backward(state: &ModelState, g: &mut ModelState, cache: &TowerCache, dout: &Array2<f64>) -> Array3<f64> {
    let tw = &state.tower;
    let (ls, n, _) = cache.z.dim();
    let k = state.config.patch_size;
    let dpatches = Array2::from_shape_fn((ls * n, k), |(r, j)| dout[[(r / n) * k + j, r % n]]);
    let dmlp = linear_backward(cache.mlp.view(), &tw.proj, &mut g.tower.proj, dpatches.view());
    let dact = linear_backward(cache.act.view(), &tw.mlp_out, &mut g.tower.mlp_out, dmlp.view());
    let dpre = ndarray::Zip::from(&dact)
        .and(&cache.pre_act)
        .map_collect(|&da, &x| da * gelu_grad(x));
    let dmixed = unflat(
        linear_backward(cache.mixed.view(), &tw.mlp_in, &mut g.tower.mlp_in, dpre.view()),
        ls,
        n,
    );
    let mut dz = dmixed.clone();
    let mut dweight = Array2::zeros((ls, ls));
    for v in 0..n {
        let dm = dmixed.index_axis(Axis(1), v);
        let back = cache.dy.weight.t().dot(&dm);
        let mut dst = dz.index_axis_mut(Axis(1), v);
        dst += &back;
        dweight += &dm.dot(&cache.z.index_axis(Axis(1), v).t());
    }
    g.tower.dyn_w += &cache.dy.pull_back(&dweight);
    dz
}

/// Reconstruct a `(K, n)` window from sample tokens:
/// `Proj(MLP(z + DyLinear(z)))`, patches concatenated in time order.
pub fn tower(tokens: &TokenTensor, state: &ModelState) -> Result<Array2<f64>> {
    let cfg = &state.config;
    if tokens.data.dim() != (cfg.n_patches(), cfg.n_vars, cfg.embed_dim) {
        return Err(Error::ShapeMismatch(format!(
            "tower expects ({}, {}, {}), got {:?}",
            cfg.n_patches(),
            cfg.n_vars,
            cfg.embed_dim,
            tokens.data.dim()
        )));
    }
    Ok(tower_forward(state, tokens.data.as_standard_layout().into_owned()).0)
}

pub(crate) struct ForwardCache {
    patches: Array2<f64>,
    blocks: Vec<BlockCache>,
    tower: TowerCache,
}

pub(crate) fn forward_cached(state: &ModelState, window: ArrayView2<'_, f64>) -> Result<(Array2<f64>, ForwardCache)> {
    let cfg = &state.config;
    check_window(cfg, &window)?;
    let patches = patches_of(cfg, &window);
    let mut x = concat_raw(state, &patchify_raw(state, &patches));
    let mut blocks = Vec::with_capacity(state.blocks.len());
    for blk in &state.blocks {
        let (next, cache) = block_forward(blk, cfg.n_heads, cfg.n_prompt, &x);
        x = next;
        blocks.push(cache);
    }
    let z = x.slice(s![cfg.n_prompt.., .., ..]).to_owned();
    let (out, tower) = tower_forward(state, z);
    Ok((
        out,
        ForwardCache {
            patches,
            blocks,
            tower,
        },
    ))
}

/// Accumulate parameter gradients of a scalar loss into `grads`, given the
/// loss gradient w.r.t. the reconstruction.
pub(crate) fn backward_into(state: &ModelState, cache: &ForwardCache, d_out: &Array2<f64>, grads: &mut ModelState) {
    let cfg = &state.config;
    let p = cfg.n_prompt;
    let dz = tower_backward(state, grads, &cache.tower, d_out);
    let (ls, n, d) = dz.dim();
    let mut dx = Array3::zeros((p + ls, n, d));
    dx.slice_mut(s![p.., .., ..]).assign(&dz);
    for (i, blk) in state.blocks.iter().enumerate().rev() {
        dx = block_backward(blk, &mut grads.blocks[i], cfg.n_heads, &cache.blocks[i], &dx);
    }
    grads.prompt += &dx.slice(s![..p, .., ..]);
    let dsample = dx.slice(s![p.., .., ..]).to_owned();
    for (mut gp, tok) in grads.pos.outer_iter_mut().zip(dsample.outer_iter()) {
        gp += &tok.sum_axis(Axis(0));
    }
    let _ = linear_backward(cache.patches.view(), &state.patch, &mut grads.patch, flat(&dsample));
}

/// Full reconstruction of one `(K, n)` window.
pub fn forward(window: ArrayView2<'_, f64>, state: &ModelState) -> Result<Array2<f64>> {
    forward_cached(state, window).map(|(out, _)| out)
}

/// Mean squared reconstruction error of one window and its gradient.
///
/// `input` is what the network sees (possibly masked); the loss compares the
/// reconstruction against `target` on the cells where `score_mask` is true
/// (every cell when `None`). Gradients are added to `grads`.
pub fn loss_and_grad(
    state: &ModelState,
    input: ArrayView2<'_, f64>,
    target: ArrayView2<'_, f64>,
    score_mask: Option<ArrayView2<'_, bool>>,
    grads: &mut ModelState,
    weight: f64,
) -> Result<f64> {
    let (recon, cache) = forward_cached(state, input)?;
    if target.dim() != recon.dim() {
        return Err(Error::ShapeMismatch(format!("target {:?}", target.dim())));
    }
    let count = match &score_mask {
        Some(m) => m.iter().filter(|&&b| b).count(),
        None => recon.len(),
    };
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    let mut d_out = &recon - &target;
    if let Some(m) = &score_mask {
        ndarray::Zip::from(&mut d_out).and(m).for_each(|d, &keep| {
            if !keep {
                *d = 0.0
            }
        });
    }
    let loss = d_out.iter().map(|e| e * e).sum::<f64>() / count as f64;
    d_out.mapv_inplace(|e| 2.0 * e * weight / count as f64);
    backward_into(state, &cache, &d_out, grads);
    Ok(loss)
}
