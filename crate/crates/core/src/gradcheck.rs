//! Central-difference gradient estimates and comparison against backprop.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Tape;
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::model::{LossMode, ModelConfig, Prepared, ProteusModel};
use crate::nn::{Ctx, GradSet, ParamStore};
use crate::synthdata::{generate_clip, make_identities, TrainingSample};
use crate::tensor::Tensor;

/// Denominator floor for relative errors, so entries whose true gradient
/// is numerically zero are judged on an absolute scale.
pub const REL_ERROR_FLOOR: f64 = 1e-6;
/// Central-difference step for the model check; large enough that f64
/// roundoff in a loss of order one stays below the tolerance.
pub const FD_STEP: f64 = 1e-4;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// `(f(p + eps) - f(p - eps)) / (2 eps)` for every scalar of every
/// parameter. The loss is evaluated twice at the unperturbed point first;
/// differing results mean the function is not deterministic.
pub fn finite_diff_grad<F>(loss_fn: F, params: &ParamStore<f64>, eps: f64) -> Result<Vec<Tensor<f64>>>
where
    F: Fn(&ParamStore<f64>) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::config(format!("finite-difference step must be positive, got {eps}")));
    }
    let a = loss_fn(params)?;
    let b = loss_fn(params)?;
    if a.to_bits() != b.to_bits() {
        return Err(Error::Nondeterministic(format!("{a} then {b}")));
    }
    let mut work = params.clone();
    let mut out = Vec::with_capacity(params.len());
    for id in params.ids() {
        let n = params.value(id).numel();
        let mut g = Tensor::zeros(params.value(id).shape());
        for i in 0..n {
            let orig = work.value(id).data()[i];
            work.value_mut(id).data_mut()[i] = orig + eps;
            let plus = loss_fn(&work)?;
            work.value_mut(id).data_mut()[i] = orig - eps;
            let minus = loss_fn(&work)?;
            work.value_mut(id).data_mut()[i] = orig;
            g.data_mut()[i] = (plus - minus) / (2.0 * eps);
        }
        out.push(g);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Parameter name, flat index, analytic and numeric values of the worst entry.
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Compares backprop gradients with finite-difference estimates entry by
/// entry. Parameters absent from `analytic` are treated as zero gradient.
pub fn compare(store: &ParamStore<f64>, analytic: &GradSet<f64>, numeric: &[Tensor<f64>]) -> GradCheckReport {
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: None,
    };
    for (id, num) in store.ids().zip(numeric) {
        let zeros;
        let ana = match analytic.get(id) {
            Some(g) => g,
            None => {
                zeros = Tensor::zeros(num.shape());
                &zeros
            }
        };
        for (i, (&a, &n)) in ana.data().iter().zip(num.data()).enumerate() {
            let e = relative_error(a, n);
            report.checked += 1;
            if e > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = e;
                report.worst = Some((store.get(id).name.clone(), i, a, n));
            }
        }
    }
    report
}

/// A generated clip cropped to the tiny model's 16x16 frames around the
/// sprite, so the motion weights are not all zero.
pub fn tiny_sample(seed: u64) -> Result<TrainingSample<f64>> {
    let config = ModelConfig::tiny();
    let (h, w) = (config.height, config.width);
    let sprite = &make_identities(1, seed)[0];
    let mut s = generate_clip(sprite, 1, config.frames, seed)?;
    let (fh, fw) = (s.meta.frame_height, s.meta.frame_width);
    let b = s.meta.ref_box;
    let x0 = (b.x + b.w / 2).saturating_sub(w / 2).min(fw - w);
    let y0 = (b.y + b.h / 2).saturating_sub(h / 2).min(fh - h);
    let frames = config.frames;
    let pick = |t: &Tensor<f64>, planes: usize| {
        Tensor::from_fn(&[planes, h, w], |i| {
            let (p, y, x) = (i / (h * w), (i / w) % h, i % w);
            t.data()[(p * fh + y0 + y) * fw + x0 + x]
        })
    };
    s.video = pick(&s.video, frames * 3).reshape(&[frames, 3, h, w])?;
    s.heatmap = pick(&s.heatmap, frames);
    s.mask = pick(&s.mask, frames);
    Ok(s)
}

pub fn tiny_item(seed: u64) -> Result<Prepared<f64>> {
    Prepared::from_sample(&tiny_sample(seed)?)
}

/// Backprop versus central differences for the tiny two-block model. All
/// parameters are perturbed away from their initial values so zero-initialised
/// projections do not hide upstream gradients.
pub fn model_check(seed: u64, mode: LossMode, lambda: f64) -> Result<GradCheckReport> {
    let config = ModelConfig::tiny();
    let (model, mut store) = ProteusModel::new::<f64>(config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    store.perturb(0.05, &mut rng);
    let item = tiny_item(seed)?;
    let schedule = NoiseSchedule::linear(config.timesteps)?;
    let eps = Tensor::randn(&config.latent_shape(), 1.0, &mut rng);
    let t = config.timesteps / 3;
    let loss = |p: &ParamStore<f64>| -> Result<(f64, GradSet<f64>)> {
        let tape = Tape::new();
        let cx = Ctx::new(&tape, p);
        let l = model.loss(&cx, &item, &schedule, t, &eps, mode, lambda, false)?;
        let v = tape.value(l).data()[0];
        let mut g = tape.backward(l)?;
        Ok((v, cx.collect(&mut g)))
    };
    let (_, analytic) = loss(&store)?;
    let numeric = finite_diff_grad(|p| Ok(loss(p)?.0), &store, FD_STEP)?;
    Ok(compare(&store, &analytic, &numeric))
}
