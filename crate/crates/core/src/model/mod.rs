//! Reconstruction transformer over short multivariate windows.
//!
//! A window `(K, n)` is cut into non-overlapping time patches, projected to
//! `d`-dimensional sample tokens, prefixed with learnable prompt tokens along
//! the time axis and pushed through `N` blocks of time attention, variable
//! attention, gating and a dynamic FFN. The tower maps the sample tokens back
//! to a `(K, n)` reconstruction.
//!
//! Everything runs in `f64` with hand-written backward passes.

mod layers;
mod network;

use ndarray::{Array1, Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::signal::parse_value;

pub use layers::{bilinear_resize, dylinear, gelu, interp_matrix};
pub use network::{
    concat_prompt, dynamic_ffn, forward, gate, loss_and_grad, patchify, time_attention, tower,
    variable_attention, TokenKind, TokenTensor,
};

/// Side of the square dynamic-operator weight before it is resized.
pub const DYN_WIDTH: usize = 8;
/// Initial gate logit: `sigmoid(4) ~ 0.982`.
pub const GATE_INIT: f64 = 4.0;
pub const INIT_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub n_vars: usize,
    pub window_len: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub n_prompt: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_vars: 2,
            window_len: 5,
            patch_size: 1,
            embed_dim: 128,
            n_blocks: 3,
            n_heads: 4,
            n_prompt: 4,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_vars", self.n_vars),
            ("window_len", self.window_len),
            ("patch_size", self.patch_size),
            ("embed_dim", self.embed_dim),
            ("n_heads", self.n_heads),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("{name} must be >= 1")));
        }
        if self.window_len % self.patch_size != 0 {
            return Err(Error::InvalidConfig(format!(
                "patch_size {} does not divide window_len {}",
                self.patch_size, self.window_len
            )));
        }
        if self.embed_dim % self.n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "embed_dim {} not divisible by n_heads {}",
                self.embed_dim, self.n_heads
            )));
        }
        Ok(())
    }

    /// Sample tokens per variable, `K / k`.
    pub fn n_patches(&self) -> usize {
        self.window_len / self.patch_size
    }

    /// Time tokens after the prompt is prepended.
    pub fn n_tokens(&self) -> usize {
        self.n_prompt + self.n_patches()
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.n_heads
    }

    /// Apply one `key = value` setting; returns false for keys that are not model keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "n_vars" => self.n_vars = parse_value(key, value)?,
            "window_len" => self.window_len = parse_value(key, value)?,
            "patch_size" => self.patch_size = parse_value(key, value)?,
            "embed_dim" => self.embed_dim = parse_value(key, value)?,
            "n_blocks" => self.n_blocks = parse_value(key, value)?,
            "n_heads" => self.n_heads = parse_value(key, value)?,
            "n_prompt" => self.n_prompt = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Affine map `x W + b` with `W: (in, out)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Linear {
    fn init(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Self {
        Self {
            w: normal2(rng, fan_in, fan_out),
            b: Array1::zeros(fan_out),
        }
    }

    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            w: Array2::zeros((fan_in, fan_out)),
            b: Array1::zeros(fan_out),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

impl LayerNorm {
    fn new(d: usize) -> Self {
        Self {
            gamma: Array1::ones(d),
            beta: Array1::zeros(d),
        }
    }

    fn zeros(d: usize) -> Self {
        Self {
            gamma: Array1::zeros(d),
            beta: Array1::zeros(d),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
}

impl Attention {
    fn init(rng: &mut ChaCha8Rng, d: usize) -> Self {
        Self {
            query: Linear::init(rng, d, d),
            key: Linear::init(rng, d, d),
            value: Linear::init(rng, d, d),
            out: Linear::init(rng, d, d),
        }
    }

    fn zeros(d: usize) -> Self {
        Self {
            query: Linear::zeros(d, d),
            key: Linear::zeros(d, d),
            value: Linear::zeros(d, d),
            out: Linear::zeros(d, d),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub norm_time: LayerNorm,
    pub time_attn: Attention,
    pub norm_var: LayerNorm,
    pub var_attn: Attention,
    pub gate_attn: Array1<f64>,
    pub norm_ffn: LayerNorm,
    pub ffn_in: Linear,
    /// Dynamic operator weight, resized to `(L, L)` over the live token count.
    pub ffn_dyn: Array2<f64>,
    pub ffn_out: Linear,
    pub gate_ffn: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tower {
    pub dyn_w: Array2<f64>,
    pub mlp_in: Linear,
    pub mlp_out: Linear,
    /// Unpatchify projection `d -> k`.
    pub proj: Linear,
}

/// All learnable parameters. The same type doubles as the gradient
/// accumulator and the optimizer moment buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub patch: Linear,
    /// `(K / k, d)`, shared across variables.
    pub pos: Array2<f64>,
    /// `(p, n, d)`.
    pub prompt: Array3<f64>,
    pub blocks: Vec<Block>,
    pub tower: Tower,
}

fn normal2(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
    let dist = Normal::new(0.0, INIT_STD).expect("valid std");
    Array2::from_shape_simple_fn((r, c), || dist.sample(rng))
}

/// Borrowed view of one named parameter tensor.
pub struct ParamRef<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

pub struct ParamMut<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a mut [f64],
}

/// Expands `$h!(name, tensor)` for every parameter tensor in canonical order.
macro_rules! tensor_list {
    ($s:expr, $iter:ident, $h:ident) => {{
        $h!("patch.w".to_string(), $s.patch.w);
        $h!("patch.b".to_string(), $s.patch.b);
        $h!("pos".to_string(), $s.pos);
        $h!("prompt".to_string(), $s.prompt);
        for (i, b) in $s.blocks.$iter().enumerate() {
            let p = |s: &str| format!("blocks.{i}.{s}");
            $h!(p("norm_time.gamma"), b.norm_time.gamma);
            $h!(p("norm_time.beta"), b.norm_time.beta);
            $h!(p("time_attn.query.w"), b.time_attn.query.w);
            $h!(p("time_attn.query.b"), b.time_attn.query.b);
            $h!(p("time_attn.key.w"), b.time_attn.key.w);
            $h!(p("time_attn.key.b"), b.time_attn.key.b);
            $h!(p("time_attn.value.w"), b.time_attn.value.w);
            $h!(p("time_attn.value.b"), b.time_attn.value.b);
            $h!(p("time_attn.out.w"), b.time_attn.out.w);
            $h!(p("time_attn.out.b"), b.time_attn.out.b);
            $h!(p("norm_var.gamma"), b.norm_var.gamma);
            $h!(p("norm_var.beta"), b.norm_var.beta);
            $h!(p("var_attn.query.w"), b.var_attn.query.w);
            $h!(p("var_attn.query.b"), b.var_attn.query.b);
            $h!(p("var_attn.key.w"), b.var_attn.key.w);
            $h!(p("var_attn.key.b"), b.var_attn.key.b);
            $h!(p("var_attn.value.w"), b.var_attn.value.w);
            $h!(p("var_attn.value.b"), b.var_attn.value.b);
            $h!(p("var_attn.out.w"), b.var_attn.out.w);
            $h!(p("var_attn.out.b"), b.var_attn.out.b);
            $h!(p("gate_attn"), b.gate_attn);
            $h!(p("norm_ffn.gamma"), b.norm_ffn.gamma);
            $h!(p("norm_ffn.beta"), b.norm_ffn.beta);
            $h!(p("ffn_in.w"), b.ffn_in.w);
            $h!(p("ffn_in.b"), b.ffn_in.b);
            $h!(p("ffn_dyn"), b.ffn_dyn);
            $h!(p("ffn_out.w"), b.ffn_out.w);
            $h!(p("ffn_out.b"), b.ffn_out.b);
            $h!(p("gate_ffn"), b.gate_ffn);
        }
        $h!("tower.dyn".to_string(), $s.tower.dyn_w);
        $h!("tower.mlp_in.w".to_string(), $s.tower.mlp_in.w);
        $h!("tower.mlp_in.b".to_string(), $s.tower.mlp_in.b);
        $h!("tower.mlp_out.w".to_string(), $s.tower.mlp_out.w);
        $h!("tower.mlp_out.b".to_string(), $s.tower.mlp_out.b);
        $h!("tower.proj.w".to_string(), $s.tower.proj.w);
        $h!("tower.proj.b".to_string(), $s.tower.proj.b);
    }};
}

impl ModelState {
    /// Fresh parameters: N(0, 0.02) projections, zero biases, unit layer-norm
    /// scales and gate logits of +4.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.embed_dim;
        let n = config.n_vars;
        let dist = Normal::new(0.0, INIT_STD).expect("valid std");
        let patch = Linear::init(&mut rng, config.patch_size, d);
        let pos = normal2(&mut rng, config.n_patches(), d);
        let prompt = Array3::from_shape_simple_fn((config.n_prompt, n, d), || dist.sample(&mut rng));
        let blocks = (0..config.n_blocks)
            .map(|_| Block {
                norm_time: LayerNorm::new(d),
                time_attn: Attention::init(&mut rng, d),
                norm_var: LayerNorm::new(d),
                var_attn: Attention::init(&mut rng, d),
                gate_attn: Array1::from_elem(d, GATE_INIT),
                norm_ffn: LayerNorm::new(d),
                ffn_in: Linear::init(&mut rng, d, 2 * d),
                ffn_dyn: normal2(&mut rng, DYN_WIDTH, DYN_WIDTH),
                ffn_out: Linear::init(&mut rng, 2 * d, d),
                gate_ffn: Array1::from_elem(d, GATE_INIT),
            })
            .collect();
        let tower = Tower {
            dyn_w: normal2(&mut rng, DYN_WIDTH, DYN_WIDTH),
            mlp_in: Linear::init(&mut rng, d, d),
            mlp_out: Linear::init(&mut rng, d, d),
            proj: Linear::init(&mut rng, d, config.patch_size),
        };
        Ok(Self {
            config,
            patch,
            pos,
            prompt,
            blocks,
            tower,
        })
    }

    /// All-zero tensors with this state's shapes.
    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.config)
    }

    pub fn zeros(config: ModelConfig) -> Self {
        let d = config.embed_dim;
        let n = config.n_vars;
        let blocks = (0..config.n_blocks)
            .map(|_| Block {
                norm_time: LayerNorm::zeros(d),
                time_attn: Attention::zeros(d),
                norm_var: LayerNorm::zeros(d),
                var_attn: Attention::zeros(d),
                gate_attn: Array1::zeros(d),
                norm_ffn: LayerNorm::zeros(d),
                ffn_in: Linear::zeros(d, 2 * d),
                ffn_dyn: Array2::zeros((DYN_WIDTH, DYN_WIDTH)),
                ffn_out: Linear::zeros(2 * d, d),
                gate_ffn: Array1::zeros(d),
            })
            .collect();
        Self {
            config,
            patch: Linear::zeros(config.patch_size, d),
            pos: Array2::zeros((config.n_patches(), d)),
            prompt: Array3::zeros((config.n_prompt, n, d)),
            blocks,
            tower: Tower {
                dyn_w: Array2::zeros((DYN_WIDTH, DYN_WIDTH)),
                mlp_in: Linear::zeros(d, d),
                mlp_out: Linear::zeros(d, d),
                proj: Linear::zeros(d, config.patch_size),
            },
        }
    }

    /// Named parameter tensors in a fixed canonical order.
    pub fn params(&self) -> Vec<ParamRef<'_>> {
        let mut out = Vec::new();
        macro_rules! push {
            ($name:expr, $a:expr) => {
                out.push(ParamRef {
                    name: $name,
                    shape: $a.shape().to_vec(),
                    data: $a.as_slice().expect("standard layout"),
                })
            };
        }
        tensor_list!(self, iter, push);
        out
    }

    pub fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        let mut out = Vec::new();
        macro_rules! push {
            ($name:expr, $a:expr) => {{
                let shape = $a.shape().to_vec();
                out.push(ParamMut {
                    name: $name,
                    shape,
                    data: $a.as_slice_mut().expect("standard layout"),
                })
            }};
        }
        tensor_list!(self, iter_mut, push);
        out
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.data.len()).sum()
    }

    /// True when every parameter is finite.
    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|p| p.data.iter().all(|x| x.is_finite()))
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &ModelState, scale: f64) {
        for (dst, src) in self.params_mut().into_iter().zip(other.params()) {
            for (d, s) in dst.data.iter_mut().zip(src.data) {
                *d += scale * s;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for p in self.params_mut() {
            p.data.iter_mut().for_each(|x| *x *= factor);
        }
    }

    /// Euclidean norm over every parameter.
    pub fn norm(&self) -> f64 {
        self.params()
            .iter()
            .flat_map(|p| p.data.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }
}
