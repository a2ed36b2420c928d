//! Forward/backward primitives shared by the network.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};

use super::{Attention, LayerNorm, Linear, LN_EPS};
use crate::error::{Error, Result};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// 1-D linear interpolation matrix `(out_len, in_len)` with half-pixel
/// centres and edge clamping (the usual image-resize convention).
/// Equal lengths give the identity.
pub fn interp_matrix(out_len: usize, in_len: usize) -> Array2<f64> {
    let mut m = Array2::zeros((out_len, in_len));
    if in_len == 0 {
        return m;
    }
    let scale = in_len as f64 / out_len as f64;
    for i in 0..out_len {
        let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(in_len - 1);
        let frac = src - lo as f64;
        m[[i, lo]] += 1.0 - frac;
        if frac > 0.0 {
            m[[i, hi]] += frac;
        }
    }
    m
}

/// Bilinear resize of a matrix to `(rows, cols)`. Bilinear interpolation is
/// separable, so this is `R_rows · w · R_colsᵀ`.
pub fn bilinear_resize(w: &Array2<f64>, rows: usize, cols: usize) -> Array2<f64> {
    let (r, c) = w.dim();
    interp_matrix(rows, r).dot(w).dot(&interp_matrix(cols, c).t())
}

pub(crate) struct DyWeight {
    pub weight: Array2<f64>,
    rows: Array2<f64>,
    cols: Array2<f64>,
}

/// Resized dynamic weight `(l_out, l_in)` plus the interpolation factors
/// needed to push gradients back onto the stored weight.
pub(crate) fn dy_weight(w: &Array2<f64>, l_out: usize, l_in: usize) -> DyWeight {
    let rows = interp_matrix(l_out, w.nrows());
    let cols = interp_matrix(l_in, w.ncols());
    DyWeight {
        weight: rows.dot(w).dot(&cols.t()),
        rows,
        cols,
    }
}

impl DyWeight {
    /// Gradient w.r.t. the stored weight given the gradient w.r.t. the resized one.
    pub fn pull_back(&self, d_weight: &Array2<f64>) -> Array2<f64> {
        self.rows.t().dot(d_weight).dot(&self.cols)
    }
}

/// `Interp(w) · z`, with `w` resized to `(l_out, l_in)` where `l_in` is the
/// number of rows of `z`.
pub fn dylinear(z: ArrayView2<'_, f64>, w: &Array2<f64>, l_out: usize) -> Result<Array2<f64>> {
    let l_in = z.nrows();
    if l_in == 0 || l_out == 0 || w.is_empty() {
        return Err(Error::DegenerateShape(format!(
            "dylinear with l_in={l_in}, l_out={l_out}, w={:?}",
            w.dim()
        )));
    }
    Ok(dy_weight(w, l_out, l_in).weight.dot(&z))
}

pub(crate) fn linear_forward(x: ArrayView2<'_, f64>, l: &Linear) -> Array2<f64> {
    x.dot(&l.w) + &l.b
}

/// Accumulates weight/bias gradients into `g`; returns the input gradient.
pub(crate) fn linear_backward(
    x: ArrayView2<'_, f64>,
    l: &Linear,
    g: &mut Linear,
    dy: ArrayView2<'_, f64>,
) -> Array2<f64> {
    g.w += &x.t().dot(&dy);
    g.b += &dy.sum_axis(Axis(0));
    dy.dot(&l.w.t())
}

pub(crate) struct LnCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

/// Layer norm over the last axis of each row.
pub(crate) fn layer_norm_forward(x: ArrayView2<'_, f64>, ln: &LayerNorm) -> (Array2<f64>, LnCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.to_owned();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
        let mean = row.sum() / d;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
        *r = 1.0 / (var + LN_EPS).sqrt();
        let rs = *r;
        row.mapv_inplace(|v| (v - mean) * rs);
    }
    let y = &xhat * &ln.gamma + &ln.beta;
    (y, LnCache { xhat, rstd })
}

pub(crate) fn layer_norm_backward(
    ln: &LayerNorm,
    g: &mut LayerNorm,
    cache: &LnCache,
    dy: ArrayView2<'_, f64>,
) -> Array2<f64> {
    g.gamma += &(&dy * &cache.xhat).sum_axis(Axis(0));
    g.beta += &dy.sum_axis(Axis(0));
    let dxhat = &dy * &ln.gamma;
    let d = dy.ncols() as f64;
    let mut dx = Array2::zeros(dy.raw_dim());
    for i in 0..dy.nrows() {
        let gx = dxhat.row(i);
        let xh = cache.xhat.row(i);
        let mean_g = gx.sum() / d;
        let mean_gx = gx.dot(&xh) / d;
        let r = cache.rstd[i];
        for j in 0..dy.ncols() {
            dx[[i, j]] = r * (gx[j] - mean_g - xh[j] * mean_gx);
        }
    }
    dx
}

pub(crate) struct AttnCache {
    x: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    o: Array2<f64>,
}

impl AttnCache {
    #[cfg(test)]
    pub fn probs(&self) -> &[Array2<f64>] {
        &self.probs
    }
}

fn softmax_rows(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

/// Multi-head scaled dot-product self-attention over the rows of `x`.
pub(crate) fn mhsa_forward(a: &Attention, heads: usize, x: ArrayView2<'_, f64>) -> (Array2<f64>, AttnCache) {
    let d = x.ncols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let q = linear_forward(x, &a.query);
    let k = linear_forward(x, &a.key);
    let v = linear_forward(x, &a.value);
    let mut o = Array2::zeros(x.raw_dim());
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let mut p = q.slice(cols).dot(&k.slice(cols).t()) * scale;
        softmax_rows(&mut p);
        o.slice_mut(cols).assign(&p.dot(&v.slice(cols)));
        probs.push(p);
    }
    let y = linear_forward(o.view(), &a.out);
    (
        y,
        AttnCache {
            x: x.to_owned(),
            q,
            k,
            v,
            probs,
            o,
        },
    )
}

pub(crate) fn mhsa_backward(
    a: &Attention,
    g: &mut Attention,
    heads: usize,
    cache: &AttnCache,
    dy: ArrayView2<'_, f64>,
) -> Array2<f64> {
    let d = dy.ncols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let d_o = linear_backward(cache.o.view(), &a.out, &mut g.out, dy);
    let mut dq = Array2::zeros(cache.q.raw_dim());
    let mut dk = Array2::zeros(cache.k.raw_dim());
    let mut dv = Array2::zeros(cache.v.raw_dim());
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let p = &cache.probs[h];
        let d_oh = d_o.slice(cols);
        let dp = d_oh.dot(&cache.v.slice(cols).t());
        dv.slice_mut(cols).assign(&p.t().dot(&d_oh));
        // softmax backward: dS = P * (dP - rowsum(dP * P))
        let mut ds = dp.clone();
        for i in 0..p.nrows() {
            let dot: f64 = p.row(i).dot(&dp.row(i));
            for j in 0..p.ncols() {
                ds[[i, j]] = p[[i, j]] * (dp[[i, j]] - dot) * scale;
            }
        }
        dq.slice_mut(cols).assign(&ds.dot(&cache.k.slice(cols)));
        dk.slice_mut(cols).assign(&ds.t().dot(&cache.q.slice(cols)));
    }
    let x = cache.x.view();
    let mut dx = linear_backward(x, &a.query, &mut g.query, dq.view());
    dx += &linear_backward(x, &a.key, &mut g.key, dk.view());
    dx += &linear_backward(x, &a.value, &mut g.value, dv.view());
    dx
}
