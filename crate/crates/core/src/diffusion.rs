//! Noise schedule, forward process, noise-prediction loss, classifier-free
//! guidance and a deterministic first-order DPM sampler.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BETA_START: f64 = 1e-4;
pub const BETA_END: f64 = 0.02;
/// Timestep count at which the beta range is used unscaled.
pub const REFERENCE_STEPS: usize = 1000;
const MAX_BETA: f64 = 0.999;

/// Fixed variance schedule: `alpha_bar[t] = prod_{s<=t} (1 - beta[s])`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear betas from `1e-4` to `0.02` at 1000 steps. Other step counts
    /// scale the range by `1000 / steps` so the terminal signal level stays
    /// comparable.
    pub fn linear(steps: usize) -> Result<Self> {
        if steps < 2 {
            return Err(Error::config(format!("schedule needs at least 2 steps, got {steps}")));
        }
        let scale = REFERENCE_STEPS as f64 / steps as f64;
        let beta: Vec<f64> = (0..steps)
            .map(|i| {
                let frac = i as f64 / (steps - 1) as f64;
                let b = if steps == REFERENCE_STEPS {
                    BETA_START + (BETA_END - BETA_START) * frac
                } else {
                    scale * (BETA_START + (BETA_END - BETA_START) * frac)
                };
                b.min(MAX_BETA)
            })
            .collect();
        let mut alpha_bar = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for b in &beta {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        Ok(NoiseSchedule { beta, alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.steps() {
            return Err(Error::config(format!("timestep {t} outside 0..{}", self.steps())));
        }
        Ok(())
    }

    /// Signal and noise coefficients `(sqrt(ab_t), sqrt(1 - ab_t))`.
    pub fn coefficients(&self, t: usize) -> (f64, f64) {
        let ab = self.alpha_bar[t];
        (ab.sqrt(), (1.0 - ab).sqrt())
    }

    /// Half log signal-to-noise ratio `log(alpha_t / sigma_t)`.
    pub fn half_log_snr(&self, t: usize) -> f64 {
        let (a, s) = self.coefficients(t);
        (a / s).ln()
    }
}

pub fn make_schedule(steps: usize) -> Result<NoiseSchedule> {
    NoiseSchedule::linear(steps)
}

/// A latent video `[frames, channels, height, width]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentVideo<T> {
    pub tensor: Tensor<T>,
}

impl<T: Scalar> LatentVideo<T> {
    pub fn new(tensor: Tensor<T>) -> Result<Self> {
        if tensor.rank() != 4 {
            return Err(Error::shape(format!(
                "latent video must be [frames, channels, h, w], got {:?}",
                tensor.shape()
            )));
        }
        Ok(LatentVideo { tensor })
    }

    pub fn frames(&self) -> usize {
        self.tensor.dim(0)
    }

    pub fn channels(&self) -> usize {
        self.tensor.dim(1)
    }

    pub fn height(&self) -> usize {
        self.tensor.dim(2)
    }

    pub fn width(&self) -> usize {
        self.tensor.dim(3)
    }
}

/// `z_t = sqrt(ab_t) z_0 + sqrt(1 - ab_t) eps`.
pub fn forward_diffuse<T: Scalar>(
    z0: &Tensor<T>,
    t: usize,
    eps: &Tensor<T>,
    schedule: &NoiseSchedule,
) -> Result<Tensor<T>> {
    schedule.check_t(t)?;
    let (a, s) = schedule.coefficients(t);
    let (a, s) = (T::of(a), T::of(s));
    z0.zip_map(eps, |z, e| a * z + s * e)
}

/// Solves the forward process for `z_0` given the noise that produced `z_t`.
pub fn recover_z0<T: Scalar>(
    zt: &Tensor<T>,
    t: usize,
    eps: &Tensor<T>,
    schedule: &NoiseSchedule,
) -> Result<Tensor<T>> {
    schedule.check_t(t)?;
    let (a, s) = schedule.coefficients(t);
    let (a, s) = (T::of(a), T::of(s));
    zt.zip_map(eps, |z, e| (z - s * e) / a)
}

/// Per-element squared error and its mean.
pub fn mse_noise_loss<T: Scalar>(eps_pred: &Tensor<T>, eps: &Tensor<T>) -> Result<(Tensor<T>, T)> {
    let per = eps_pred.zip_map(eps, |p, e| (p - e) * (p - e))?;
    let mean = per.mean();
    Ok((per, mean))
}

/// `uncond + scale * (cond - uncond)`. Scales 1 and 0 return the matching
/// prediction unchanged.
pub fn cfg_combine<T: Scalar>(cond: &Tensor<T>, uncond: &Tensor<T>, scale: f64) -> Result<Tensor<T>> {
    cond.check_same_shape(uncond)?;
    if scale == 1.0 {
        return Ok(cond.clone());
    }
    if scale == 0.0 {
        return Ok(uncond.clone());
    }
    let s = T::of(scale);
    cond.zip_map(uncond, |c, u| u + s * (c - u))
}

/// Anything that predicts the noise in `z_t`, with and without its
/// conditioning.
pub trait NoisePredictor<T: Scalar> {
    fn predict(&self, z_t: &Tensor<T>, t: usize, conditional: bool) -> Result<Tensor<T>>;
}

impl<T: Scalar, F> NoisePredictor<T> for F
where
    F: Fn(&Tensor<T>, usize, bool) -> Result<Tensor<T>>,
{
    fn predict(&self, z_t: &Tensor<T>, t: usize, conditional: bool) -> Result<Tensor<T>> {
        self(z_t, t, conditional)
    }
}

/// Strictly decreasing timesteps from `T-1` down to `0`, `steps` long,
/// spaced quadratically so they are denser at low noise. Neighbours that
/// would round to the same timestep are pushed apart.
pub fn sampling_timesteps(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 {
        return Err(Error::config("sampler needs at least one step"));
    }
    if steps > total {
        return Err(Error::config(format!(
            "{steps} sampling steps exceed the {total} schedule steps"
        )));
    }
    if steps == 1 {
        return Ok(vec![total - 1]);
    }
    let mut ts = vec![0; steps];
    for i in (0..steps - 1).rev() {
        let frac = (steps - 1 - i) as f64 / (steps - 1) as f64;
        let q = ((total - 1) as f64 * frac * frac).round() as usize;
        ts[i] = q.max(ts[i + 1] + 1);
    }
    Ok(ts)
}

/// Guided noise prediction at one timestep.
pub fn guided_eps<T: Scalar>(
    model: &impl NoisePredictor<T>,
    x: &Tensor<T>,
    t: usize,
    guidance: f64,
) -> Result<Tensor<T>> {
    let cond = model.predict(x, t, true)?;
    if guidance == 1.0 {
        return Ok(cond);
    }
    let uncond = model.predict(x, t, false)?;
    cfg_combine(&cond, &uncond, guidance)
}

/// Integrates the probability-flow ODE from `x_start` (at timestep `T-1`)
/// with first-order DPM updates in half-log-SNR `lambda`:
///
/// `x_s = (alpha_s / alpha_t) x_t - sigma_s (exp(lambda_s - lambda_t) - 1) eps`.
///
/// The last update goes to the clean endpoint (`alpha = 1`, `sigma = 0`).
pub fn dpm_sample_from<T: Scalar>(
    model: &impl NoisePredictor<T>,
    schedule: &NoiseSchedule,
    x_start: Tensor<T>,
    steps: usize,
    guidance: f64,
) -> Result<Tensor<T>> {
    let ts = sampling_timesteps(schedule.steps(), steps)?;
    let mut x = x_start;
    for (i, &t) in ts.iter().enumerate() {
        let eps = guided_eps(model, &x, t, guidance)?;
        let (a_t, s_t) = schedule.coefficients(t);
        x = match ts.get(i + 1) {
            Some(&s) => {
                let (a_s, s_s) = schedule.coefficients(s);
                let h = schedule.half_log_snr(s) - schedule.half_log_snr(t);
                let cx = T::of(a_s / a_t);
                let ce = T::of(s_s * h.exp_m1());
                x.zip_map(&eps, |xv, ev| cx * xv - ce * ev)?
            }
            None => {
                let inv = T::of(1.0 / a_t);
                let se = T::of(s_t);
                x.zip_map(&eps, |xv, ev| (xv - se * ev) * inv)?
            }
        };
        x.ensure_finite(&format!("sampler state at timestep {t}"))?;
    }
    Ok(x)
}

/// Draws `x_T ~ N(0, I)` from `seed` and runs [`dpm_sample_from`].
pub fn dpm_sample<T: Scalar>(
    model: &impl NoisePredictor<T>,
    schedule: &NoiseSchedule,
    shape: &[usize],
    steps: usize,
    guidance: f64,
    seed: u64,
) -> Result<Tensor<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::randn(shape, 1.0, &mut rng);
    dpm_sample_from(model, schedule, x, steps, guidance)
}
