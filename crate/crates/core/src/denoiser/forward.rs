//! Forward pass with the activation cache the backward pass consumes.

use ndarray::{concatenate, s, Array1, Array2, Axis};

use super::{sinusoidal_embedding, DenoiserParams, LN_EPS};
use crate::conditioning::ConditionBundle;
use crate::error::{Error, Result};

pub(crate) fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044715;
    let u = C * (x + A * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    const A: f64 = 0.044715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x)
}

pub(crate) fn gelu_matrix(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(gelu)
}

/// Row-wise layer norm. Returns the output plus the normalized rows and
/// inverse std needed by the backward pass.
pub(crate) fn layer_norm(
    x: &Array2<f64>,
    gamma: &Array2<f64>,
    beta: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
    let (rows, cols) = x.dim();
    let mut x_hat = Array2::<f64>::zeros((rows, cols));
    let mut inv_std = Array1::<f64>::zeros(rows);
    for r in 0..rows {
        let row = x.row(r);
        let mean = row.sum() / cols as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let istd = 1.0 / (var + LN_EPS).sqrt();
        inv_std[r] = istd;
        for c in 0..cols {
            x_hat[(r, c)] = (row[c] - mean) * istd;
        }
    }
    let out = &x_hat * gamma + beta;
    (out, x_hat, inv_std)
}

/// Row-wise softmax, numerically stabilized.
pub(crate) fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Per-layer activations kept for the backward pass.
pub(crate) struct LayerCache {
    pub ln1_xhat: Array2<f64>,
    pub ln1_inv_std: Array1<f64>,
    pub n1: Array2<f64>,
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    /// Softmax attention weights per head, each `L x L`.
    pub attn: Vec<Array2<f64>>,
    /// Concatenated per-head mixes, pre output projection.
    pub mixed: Array2<f64>,
    pub ln2_xhat: Array2<f64>,
    pub ln2_inv_std: Array1<f64>,
    pub n2: Array2<f64>,
    pub ff_pre: Array2<f64>,
    pub ff_act: Array2<f64>,
}

pub(crate) struct ForwardCache {
    pub sin_t: Array2<f64>,
    pub t_pre: Array2<f64>,
    pub t_act: Array2<f64>,
    pub tok0_in: Array2<f64>,
    pub frames_in: Array2<f64>,
    pub layers: Vec<LayerCache>,
    pub final_xhat: Array2<f64>,
    pub final_inv_std: Array1<f64>,
    pub final_norm: Array2<f64>,
}

fn check_shapes(
    params: &DenoiserParams,
    x_t: &Array2<f64>,
    bundle: &ConditionBundle,
) -> Result<()> {
    let cfg = &params.config;
    if x_t.ncols() != cfg.feature_dim {
        return Err(Error::shape(format!(
            "x_t has {} feature columns, config expects {}",
            x_t.ncols(),
            cfg.feature_dim
        )));
    }
    if x_t.nrows() == 0 {
        return Err(Error::shape("x_t has no frames"));
    }
    if bundle.text.len() != cfg.text_dim {
        return Err(Error::shape(format!(
            "text embedding has {} entries, config expects {}",
            bundle.text.len(),
            cfg.text_dim
        )));
    }
    if bundle.audio.nrows() != x_t.nrows() || bundle.audio.ncols() != cfg.audio_dim {
        return Err(Error::shape(format!(
            "audio is {}x{}, expected {}x{}",
            bundle.audio.nrows(),
            bundle.audio.ncols(),
            x_t.nrows(),
            cfg.audio_dim
        )));
    }
    Ok(())
}

/// The noising-step embedding: sinusoidal features pushed through the
/// learned two-layer projection.
pub fn timestep_embedding(params: &DenoiserParams, t: usize) -> Array1<f64> {
    let sin_t = sinusoidal_embedding(t as f64, params.config.hidden_dim)
        .insert_axis(Axis(0));
    let pre = sin_t.dot(&params.t_w1) + &params.t_b1;
    let act = gelu_matrix(&pre);
    (act.dot(&params.t_w2) + &params.t_b2).row(0).to_owned()
}

pub(crate) fn forward_cached(
    params: &DenoiserParams,
    x_t: &Array2<f64>,
    t: usize,
    bundle: &ConditionBundle,
) -> Result<(Array2<f64>, ForwardCache)> {
    check_shapes(params, x_t, bundle)?;
    let cfg = &params.config;
    let h = cfg.hidden_dim;
    let frames = x_t.nrows();
    let tokens = frames + 1;

    // Leading token: [text ; projected noising step].
    let sin_t = sinusoidal_embedding(t as f64, h).insert_axis(Axis(0));
    let t_pre = sin_t.dot(&params.t_w1) + &params.t_b1;
    let t_act = gelu_matrix(&t_pre);
    let t_emb = t_act.dot(&params.t_w2) + &params.t_b2;
    let text_row = bundle.text.view().insert_axis(Axis(0));
    let tok0_in = concatenate![Axis(1), text_row, t_emb.view()];
    let tok0 = tok0_in.dot(&params.cond_w) + &params.cond_b;

    // Frame tokens: [x_t frame ; audio frame].
    let frames_in = concatenate![Axis(1), x_t.view(), bundle.audio.view()];
    let frame_toks = frames_in.dot(&params.in_w) + &params.in_b;

    let mut x = concatenate![Axis(0), tok0.view(), frame_toks.view()];
    if cfg.positional_encoding {
        for (pos, mut row) in x.rows_mut().into_iter().enumerate() {
            let pe = sinusoidal_embedding(pos as f64, h);
            row += &pe;
        }
    }

    let head_dim = h / cfg.heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut layer_caches = Vec::with_capacity(cfg.layers);

    for layer in &params.layers {
        let (n1, ln1_xhat, ln1_inv_std) = layer_norm(&x, &layer.ln1_gamma, &layer.ln1_beta);
        let q = n1.dot(&layer.w_q) + &layer.b_q;
        let k = n1.dot(&layer.w_k) + &layer.b_k;
        let v = n1.dot(&layer.w_v) + &layer.b_v;

        let mut mixed = Array2::<f64>::zeros((tokens, h));
        let mut attn = Vec::with_capacity(cfg.heads);
        for head in 0..cfg.heads {
            let cols = head * head_dim..(head + 1) * head_dim;
            let qh = q.slice(s![.., cols.clone()]);
            let kh = k.slice(s![.., cols.clone()]);
            let vh = v.slice(s![.., cols.clone()]);
            let scores = qh.dot(&kh.t()) * scale;
            let a = softmax_rows(&scores);
            let oh = a.dot(&vh);
            mixed.slice_mut(s![.., cols]).assign(&oh);
            attn.push(a);
        }
        let attn_out = mixed.dot(&layer.w_o) + &layer.b_o;
        let x_mid = &x + &attn_out;

        let (n2, ln2_xhat, ln2_inv_std) = layer_norm(&x_mid, &layer.ln2_gamma, &layer.ln2_beta);
        let ff_pre = n2.dot(&layer.w_ff1) + &layer.b_ff1;
        let ff_act = gelu_matrix(&ff_pre);
        let ff_out = ff_act.dot(&layer.w_ff2) + &layer.b_ff2;
        let x_out = &x_mid + &ff_out;

        layer_caches.push(LayerCache {
            ln1_xhat,
            ln1_inv_std,
            n1,
            q,
            k,
            v,
            attn,
            mixed,
            ln2_xhat,
            ln2_inv_std,
            n2,
            ff_pre,
            ff_act,
        });
        x = x_out;
    }

    let (final_norm, final_xhat, final_inv_std) =
        layer_norm(&x, &params.final_ln_gamma, &params.final_ln_beta);
    let frame_rows = final_norm.slice(s![1.., ..]);
    let out = frame_rows.dot(&params.out_w) + &params.out_b;

    let cache = ForwardCache {
        sin_t,
        t_pre,
        t_act,
        tok0_in,
        frames_in,
        layers: layer_caches,
        final_xhat,
        final_inv_std,
        final_norm,
    };
    Ok((out, cache))
}

/// Predicts the clean sample `x0_hat` from `(x_t, t, c)`.
pub fn forward(
    params: &DenoiserParams,
    x_t: &Array2<f64>,
    t: usize,
    bundle: &ConditionBundle,
) -> Result<Array2<f64>> {
    forward_cached(params, x_t, t, bundle).map(|(out, _)| out)
}
