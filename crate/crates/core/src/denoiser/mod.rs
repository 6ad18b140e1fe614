//! The trainable denoising network `Denoise(x_t, t, c) -> x0_hat`.
//!
//! Token layout: the text embedding and the projected noising step fuse
//! into a single leading token; each motion frame concatenated with its
//! audio features becomes one token. After additive sinusoidal positional
//! encoding the sequence runs through a pre-norm bidirectional
//! self-attention stack; an output head maps the frame tokens back to
//! feature space and the leading token is discarded.
//!
//! Forward, backward, and the training loop are hand-rolled in f64 so
//! gradients are exact and checkable against finite differences.

mod backward;
mod forward;
mod train;

pub use backward::{compute_gradients, TrainItem};
pub use forward::{forward, timestep_embedding};
pub use train::{train, AdamConfig, TrainConfig, TrainReport, TrainSet};

use ndarray::{Array1, Array2};
use rand::Rng;

use crate::error::{Error, Result};

pub(crate) const LN_EPS: f64 = 1e-5;

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct DenoiserConfig {
    /// Motion feature dimension D.
    pub feature_dim: usize,
    /// Per-frame audio condition width A.
    pub audio_dim: usize,
    /// Text embedding width.
    pub text_dim: usize,
    pub hidden_dim: usize,
    pub layers: usize,
    pub heads: usize,
    /// Disabling the positional encoding makes the frame tokens
    /// permutation-equivariant; kept as a probe switch.
    pub positional_encoding: bool,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            feature_dim: 659,
            audio_dim: 1133,
            text_dim: 512,
            hidden_dim: 256,
            layers: 8,
            heads: 4,
            positional_encoding: true,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0
            || self.audio_dim == 0
            || self.text_dim == 0
            || self.hidden_dim == 0
            || self.layers == 0
            || self.heads == 0
        {
            return Err(Error::invalid("denoiser config fields must be positive"));
        }
        if self.hidden_dim % self.heads != 0 {
            return Err(Error::invalid(format!(
                "hidden dim {} is not divisible by {} heads",
                self.hidden_dim, self.heads
            )));
        }
        if self.hidden_dim % 2 != 0 {
            return Err(Error::invalid(
                "hidden dim must be even for the sinusoidal embeddings",
            ));
        }
        Ok(())
    }

    pub fn ff_dim(&self) -> usize {
        4 * self.hidden_dim
    }
}

/// One attention block: pre-norm multi-head self-attention plus a
/// pre-norm feed-forward, both with residual connections.
#[derive(Debug, Clone)]
pub struct LayerParams {
    pub ln1_gamma: Array2<f64>,
    pub ln1_beta: Array2<f64>,
    pub w_q: Array2<f64>,
    pub b_q: Array2<f64>,
    pub w_k: Array2<f64>,
    pub b_k: Array2<f64>,
    pub w_v: Array2<f64>,
    pub b_v: Array2<f64>,
    pub w_o: Array2<f64>,
    pub b_o: Array2<f64>,
    pub ln2_gamma: Array2<f64>,
    pub ln2_beta: Array2<f64>,
    pub w_ff1: Array2<f64>,
    pub b_ff1: Array2<f64>,
    pub w_ff2: Array2<f64>,
    pub b_ff2: Array2<f64>,
}

/// The full parameter set. Every tensor is a 2-D array (biases and norm
/// scales are `1 x n`) so optimizer, checkpoint, and gradient-check code
/// can walk one uniform list.
#[derive(Debug, Clone)]
pub struct DenoiserParams {
    pub config: DenoiserConfig,
    /// Timestep MLP over the sinusoidal step embedding.
    pub t_w1: Array2<f64>,
    pub t_b1: Array2<f64>,
    pub t_w2: Array2<f64>,
    pub t_b2: Array2<f64>,
    /// Leading-token projection of `[text ; t_emb]`.
    pub cond_w: Array2<f64>,
    pub cond_b: Array2<f64>,
    /// Frame-token projection of `[x_t frame ; audio frame]`.
    pub in_w: Array2<f64>,
    pub in_b: Array2<f64>,
    pub layers: Vec<LayerParams>,
    pub final_ln_gamma: Array2<f64>,
    pub final_ln_beta: Array2<f64>,
    /// Zero-initialized so the untrained model predicts x0_hat = 0.
    pub out_w: Array2<f64>,
    pub out_b: Array2<f64>,
}

fn xavier<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Array2<f64> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
}

impl DenoiserParams {
    /// Seeded initialization: Xavier-uniform weights, zero biases, unit
    /// norm scales, zero output head.
    pub fn init<R: Rng>(config: DenoiserConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let h = config.hidden_dim;
        let ff = config.ff_dim();
        let layers = (0..config.layers)
            .map(|_| LayerParams {
                ln1_gamma: Array2::ones((1, h)),
                ln1_beta: Array2::zeros((1, h)),
                w_q: xavier(rng, h, h),
                b_q: Array2::zeros((1, h)),
                w_k: xavier(rng, h, h),
                b_k: Array2::zeros((1, h)),
                w_v: xavier(rng, h, h),
                b_v: Array2::zeros((1, h)),
                w_o: xavier(rng, h, h),
                b_o: Array2::zeros((1, h)),
                ln2_gamma: Array2::ones((1, h)),
                ln2_beta: Array2::zeros((1, h)),
                w_ff1: xavier(rng, h, ff),
                b_ff1: Array2::zeros((1, ff)),
                w_ff2: xavier(rng, ff, h),
                b_ff2: Array2::zeros((1, h)),
            })
            .collect();
        Ok(DenoiserParams {
            t_w1: xavier(rng, h, h),
            t_b1: Array2::zeros((1, h)),
            t_w2: xavier(rng, h, h),
            t_b2: Array2::zeros((1, h)),
            cond_w: xavier(rng, config.text_dim + h, h),
            cond_b: Array2::zeros((1, h)),
            in_w: xavier(rng, config.feature_dim + config.audio_dim, h),
            in_b: Array2::zeros((1, h)),
            layers,
            final_ln_gamma: Array2::ones((1, h)),
            final_ln_beta: Array2::zeros((1, h)),
            out_w: Array2::zeros((h, config.feature_dim)),
            out_b: Array2::zeros((1, config.feature_dim)),
            config,
        })
    }

    /// Same structure with every tensor zeroed; the gradient container.
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for (_, t) in out.tensors_mut() {
            t.fill(0.0);
        }
        out
    }

    /// Ordered (name, tensor) view over every parameter.
    pub fn tensors(&self) -> Vec<(String, &Array2<f64>)> {
        let mut v: Vec<(String, &Array2<f64>)> = vec![
            ("t_mlp.w1".into(), &self.t_w1),
            ("t_mlp.b1".into(), &self.t_b1),
            ("t_mlp.w2".into(), &self.t_w2),
            ("t_mlp.b2".into(), &self.t_b2),
            ("cond.w".into(), &self.cond_w),
            ("cond.b".into(), &self.cond_b),
            ("input.w".into(), &self.in_w),
            ("input.b".into(), &self.in_b),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            v.push((format!("layers.{i}.ln1.gamma"), &l.ln1_gamma));
            v.push((format!("layers.{i}.ln1.beta"), &l.ln1_beta));
            v.push((format!("layers.{i}.attn.w_q"), &l.w_q));
            v.push((format!("layers.{i}.attn.b_q"), &l.b_q));
            v.push((format!("layers.{i}.attn.w_k"), &l.w_k));
            v.push((format!("layers.{i}.attn.b_k"), &l.b_k));
            v.push((format!("layers.{i}.attn.w_v"), &l.w_v));
            v.push((format!("layers.{i}.attn.b_v"), &l.b_v));
            v.push((format!("layers.{i}.attn.w_o"), &l.w_o));
            v.push((format!("layers.{i}.attn.b_o"), &l.b_o));
            v.push((format!("layers.{i}.ln2.gamma"), &l.ln2_gamma));
            v.push((format!("layers.{i}.ln2.beta"), &l.ln2_beta));
            v.push((format!("layers.{i}.ff.w1"), &l.w_ff1));
            v.push((format!("layers.{i}.ff.b1"), &l.b_ff1));
            v.push((format!("layers.{i}.ff.w2"), &l.w_ff2));
            v.push((format!("layers.{i}.ff.b2"), &l.b_ff2));
        }
        v.push(("final_ln.gamma".into(), &self.final_ln_gamma));
        v.push(("final_ln.beta".into(), &self.final_ln_beta));
        v.push(("output.w".into(), &self.out_w));
        v.push(("output.b".into(), &self.out_b));
        v
    }

    /// Mutable counterpart of [`tensors`](Self::tensors), same order.
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Array2<f64>)> {
        let mut v: Vec<(String, &mut Array2<f64>)> = vec![
            ("t_mlp.w1".into(), &mut self.t_w1),
            ("t_mlp.b1".into(), &mut self.t_b1),
            ("t_mlp.w2".into(), &mut self.t_w2),
            ("t_mlp.b2".into(), &mut self.t_b2),
            ("cond.w".into(), &mut self.cond_w),
            ("cond.b".into(), &mut self.cond_b),
            ("input.w".into(), &mut self.in_w),
            ("input.b".into(), &mut self.in_b),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            v.push((format!("layers.{i}.ln1.gamma"), &mut l.ln1_gamma));
            v.push((format!("layers.{i}.ln1.beta"), &mut l.ln1_beta));
            v.push((format!("layers.{i}.attn.w_q"), &mut l.w_q));
            v.push((format!("layers.{i}.attn.b_q"), &mut l.b_q));
            v.push((format!("layers.{i}.attn.w_k"), &mut l.w_k));
            v.push((format!("layers.{i}.attn.b_k"), &mut l.b_k));
            v.push((format!("layers.{i}.attn.w_v"), &mut l.w_v));
            v.push((format!("layers.{i}.attn.b_v"), &mut l.b_v));
            v.push((format!("layers.{i}.attn.w_o"), &mut l.w_o));
            v.push((format!("layers.{i}.attn.b_o"), &mut l.b_o));
            v.push((format!("layers.{i}.ln2.gamma"), &mut l.ln2_gamma));
            v.push((format!("layers.{i}.ln2.beta"), &mut l.ln2_beta));
            v.push((format!("layers.{i}.ff.w1"), &mut l.w_ff1));
            v.push((format!("layers.{i}.ff.b1"), &mut l.b_ff1));
            v.push((format!("layers.{i}.ff.w2"), &mut l.w_ff2));
            v.push((format!("layers.{i}.ff.b2"), &mut l.b_ff2));
        }
        v.push(("final_ln.gamma".into(), &mut self.final_ln_gamma));
        v.push(("final_ln.beta".into(), &mut self.final_ln_beta));
        v.push(("output.w".into(), &mut self.out_w));
        v.push(("output.b".into(), &mut self.out_b));
        v
    }

    /// Total scalar parameter count.
    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

/// Sinusoidal embedding shared by the noising step and the positional
/// encoding: first half `sin(pos * freq_i)`, second half `cos(pos * freq_i)`
/// with `freq_i = 10000^(-2i/dim)`.
pub fn sinusoidal_embedding(pos: f64, dim: usize) -> Array1<f64> {
    assert!(dim % 2 == 0, "sinusoidal embedding dim must be even");
    let half = dim / 2;
    let mut out = Array1::<f64>::zeros(dim);
    for i in 0..half {
        let freq = (-(2.0 * i as f64 / dim as f64) * 10_000f64.ln()).exp();
        out[i] = (pos * freq).sin();
        out[half + i] = (pos * freq).cos();
    }
    out
}
