//! Denoising diffusion core: cosine noise schedule, closed-form forward
//! noising, training losses, the x0-prediction posterior step, and the
//! sampling loop with classifier-free guidance.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::conditioning::ConditionBundle;
use crate::error::{Error, Result};

/// Per-step and cumulative signal-retention coefficients for `T` steps.
///
/// `alpha_bar(t)` is defined for `t` in `0..=T` with `alpha_bar(0) = 1`;
/// `alpha(t)` and the posterior variance are defined for `t` in `1..=T`.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    posterior_var: Vec<f64>,
}

impl NoiseSchedule {
    /// Cosine schedule: `alpha_bar(t) = f(t)/f(0)` with
    /// `f(t) = cos^2(((t/T + s)/(1 + s)) * pi/2)`, `s = 0.008`, and the
    /// per-step alpha floored at 0.001. `alpha_bar` is rebuilt from the
    /// floored per-step values so the cumulative-product identity holds
    /// exactly.
    pub fn cosine(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("noise schedule needs at least 1 step"));
        }
        let s = 0.008;
        let f = |t: f64| {
            let x = ((t / steps as f64 + s) / (1.0 + s)) * std::f64::consts::FRAC_PI_2;
            x.cos().powi(2)
        };
        let f0 = f(0.0);
        let mut alpha = vec![1.0; steps + 1];
        let mut alpha_bar = vec![1.0; steps + 1];
        let mut posterior_var = vec![0.0; steps + 1];
        let mut prev_bar = 1.0;
        for t in 1..=steps {
            let raw_bar = f(t as f64) / f0;
            let a = (raw_bar / prev_bar).clamp(0.001, 1.0);
            alpha[t] = a;
            alpha_bar[t] = alpha_bar[t - 1] * a;
            prev_bar = raw_bar;
        }
        for t in 1..=steps {
            let beta = 1.0 - alpha[t];
            let prev = alpha_bar[t - 1];
            posterior_var[t] = (1.0 - prev) / (1.0 - alpha_bar[t]) * beta;
        }
        Ok(NoiseSchedule {
            alpha,
            alpha_bar,
            posterior_var,
        })
    }

    pub fn steps(&self) -> usize {
        self.alpha.len() - 1
    }

    /// Per-step retention, `1 <= t <= T`.
    pub fn alpha(&self, t: usize) -> f64 {
        assert!(t >= 1 && t <= self.steps(), "alpha index {t} out of range");
        self.alpha[t]
    }

    /// Cumulative retention, `0 <= t <= T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        assert!(t <= self.steps(), "alpha_bar index {t} out of range");
        self.alpha_bar[t]
    }

    /// Posterior variance `beta_tilde(t)`, `1 <= t <= T`; zero at `t = 1`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        assert!(
            t >= 1 && t <= self.steps(),
            "posterior variance index {t} out of range"
        );
        self.posterior_var[t]
    }
}

/// Standard-normal matrix drawn row-major from `rng`.
pub fn randn_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.sample::<f64, _>(StandardNormal))
}

/// Closed-form forward noising:
/// `x_t = sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * noise`.
pub fn q_sample(
    x0: &Array2<f64>,
    t: usize,
    noise: &Array2<f64>,
    schedule: &NoiseSchedule,
) -> Result<Array2<f64>> {
    if x0.dim() != noise.dim() {
        return Err(Error::shape(format!(
            "x0 is {:?} but noise is {:?}",
            x0.dim(),
            noise.dim()
        )));
    }
    let ab = schedule.alpha_bar(t);
    Ok(x0 * ab.sqrt() + noise * (1.0 - ab).sqrt())
}

/// Training objective comparing the predicted clean sample to the target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossKind {
    /// Mean elementwise Huber: `e^2/2` for `|e| <= delta`, else
    /// `delta * (|e| - delta/2)`.
    Huber { delta: f64 },
    /// Mean squared error (the ablation switch).
    Mse,
}

/// Mean loss over all entries. Panics if shapes differ (caller contract).
pub fn training_loss(x0: &Array2<f64>, x0_hat: &Array2<f64>, kind: LossKind) -> f64 {
    assert_eq!(x0.dim(), x0_hat.dim(), "loss inputs must share a shape");
    let n = x0.len() as f64;
    let mut total = 0.0;
    for (a, b) in x0_hat.iter().zip(x0.iter()) {
        let e = a - b;
        total += match kind {
            LossKind::Huber { delta } => {
                if e.abs() <= delta {
                    0.5 * e * e
                } else {
                    delta * (e.abs() - 0.5 * delta)
                }
            }
            LossKind::Mse => e * e,
        };
    }
    total / n
}

/// Derivative of the elementwise loss with respect to the prediction.
pub fn loss_gradient(e: f64, kind: LossKind) -> f64 {
    match kind {
        LossKind::Huber { delta } => e.clamp(-delta, delta),
        LossKind::Mse => 2.0 * e,
    }
}

/// One reverse step: samples `x_{t-1}` from the DDPM posterior
/// `q(x_{t-1} | x_t, x0_hat)`. The final step (`t = 1`) is deterministic.
pub fn posterior_step(
    x0_hat: &Array2<f64>,
    x_t: &Array2<f64>,
    t: usize,
    schedule: &NoiseSchedule,
    noise: &Array2<f64>,
) -> Result<Array2<f64>> {
    if t == 0 {
        return Err(Error::invalid("posterior step is defined for t >= 1"));
    }
    if x0_hat.dim() != x_t.dim() || noise.dim() != x_t.dim() {
        return Err(Error::shape(format!(
            "posterior step shapes disagree: x0_hat {:?}, x_t {:?}, noise {:?}",
            x0_hat.dim(),
            x_t.dim(),
            noise.dim()
        )));
    }
    let ab_t = schedule.alpha_bar(t);
    let ab_prev = schedule.alpha_bar(t - 1);
    let a_t = schedule.alpha(t);
    let beta_t = 1.0 - a_t;
    let denom = 1.0 - ab_t;
    let coef_x0 = ab_prev.sqrt() * beta_t / denom;
    let coef_xt = a_t.sqrt() * (1.0 - ab_prev) / denom;
    let mean = x0_hat * coef_x0 + x_t * coef_xt;
    let var = schedule.posterior_variance(t);
    if t == 1 || var == 0.0 {
        Ok(mean)
    } else {
        Ok(mean + noise * var.sqrt())
    }
}

/// The denoising network interface: predicts the clean sample from a noisy
/// one, the step index, and the condition bundle.
pub trait Denoiser: Sync {
    fn denoise(&self, x_t: &Array2<f64>, t: usize, cond: &ConditionBundle) -> Result<Array2<f64>>;
}

impl<F> Denoiser for F
where
    F: Fn(&Array2<f64>, usize, &ConditionBundle) -> Result<Array2<f64>> + Sync,
{
    fn denoise(&self, x_t: &Array2<f64>, t: usize, cond: &ConditionBundle) -> Result<Array2<f64>> {
        self(x_t, t, cond)
    }
}

/// Classifier-free guidance mix
/// `gamma * Denoise(x_t, t, [d, a]) + (1 - gamma) * Denoise(x_t, t, [∅, a])`.
///
/// The endpoints are exact: `gamma = 0` returns the audio-only prediction
/// and `gamma = 1` the text-conditioned one, bit for bit. `gamma` outside
/// `[0, 1]` extrapolates.
pub fn cfg_denoise(
    model: &dyn Denoiser,
    x_t: &Array2<f64>,
    t: usize,
    bundle: &ConditionBundle,
    gamma: f64,
) -> Result<Array2<f64>> {
    if !bundle.has_text || gamma == 0.0 {
        // Both branches would see the same (text-free) condition.
        return model.denoise(x_t, t, &bundle.with_text_masked());
    }
    if gamma == 1.0 {
        return model.denoise(x_t, t, bundle);
    }
    let with_text = model.denoise(x_t, t, bundle)?;
    let without_text = model.denoise(x_t, t, &bundle.with_text_masked())?;
    Ok(with_text * gamma + without_text * (1.0 - gamma))
}

/// Full reverse process: starts from `x_T ~ N(0, I)` of shape
/// `frames x dim` and walks `t = T..1`, predicting the clean sample with
/// guidance and stepping through the posterior. Deterministic given the rng
/// seed.
pub fn sample_loop<R: Rng>(
    model: &dyn Denoiser,
    bundle: &ConditionBundle,
    gamma: f64,
    frames: usize,
    dim: usize,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Array2<f64>> {
    let mut x = randn_matrix(rng, frames, dim);
    let zero = Array2::<f64>::zeros((frames, dim));
    for t in (1..=schedule.steps()).rev() {
        let x0_hat = cfg_denoise(model, &x, t, bundle, gamma)?;
        if x0_hat.dim() != x.dim() {
            return Err(Error::shape(format!(
                "denoiser returned {:?}, expected {:?}",
                x0_hat.dim(),
                x.dim()
            )));
        }
        let noise = if t > 1 {
            randn_matrix(rng, frames, dim)
        } else {
            zero.clone()
        };
        x = posterior_step(&x0_hat, &x, t, schedule, &noise)?;
    }
    Ok(x)
}
