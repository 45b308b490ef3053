//! Training loop: per-sample gradients on worker threads, summed in a fixed
//! order, then an AdamW step under a cosine schedule with warm restarts.

use std::f64::consts::PI;
use std::fs;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autograd::Tape;
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::model::{config_fields, LossMode, Prepared, ProteusModel};
use crate::nn::{Ctx, GradSet, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Full-size training settings, for reference. The defaults below are
/// sized for a CPU toy run.
pub const FULL_SCALE_BATCH: usize = 64;
pub const FULL_SCALE_LR: f64 = 3e-6;
pub const FULL_SCALE_STEPS: usize = 3800;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch: usize,
    pub steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub restart_period: usize,
    pub cfg_null_prob: f64,
    pub lambda: f64,
    pub loss_mode: LossMode,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch: 8,
            steps: 2000,
            lr: 1e-3,
            weight_decay: 0.01,
            restart_period: 500,
            cfg_null_prob: 0.1,
            lambda: 1.0,
            loss_mode: LossMode::Ld,
            seed: 0,
            log_every: 50,
        }
    }
}

config_fields!(TrainConfig {
    batch,
    steps,
    lr,
    weight_decay,
    restart_period,
    cfg_null_prob,
    lambda,
    loss_mode,
    seed,
    log_every,
});

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.cfg_null_prob) {
            return Err(Error::Config(format!(
                "cfg_null_prob must be in [0, 1], got {}",
                self.cfg_null_prob
            )));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.batch == 0 || self.restart_period == 0 {
            return Err(Error::Config("batch and restart_period must be positive".into()));
        }
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("lr and weight_decay must be non-negative".into()));
        }
        Ok(())
    }
}

/// Cosine decay from `base` to zero, restarting every `period` steps.
pub fn cosine_with_restarts(base: f64, step: usize, period: usize) -> f64 {
    let phase = (step % period) as f64 / period as f64;
    base * 0.5 * (1.0 + (PI * phase).cos())
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    t: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(store: &ParamStore<T>, weight_decay: f64) -> Self {
        let zeros = || store.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    /// Updates every parameter flagged in `mask` from its `grad`, then zeroes
    /// all gradients.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64, mask: &[bool]) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            if !mask[k] {
                continue;
            }
            let p = store.get_mut(id);
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let decay = T::of(lr * self.weight_decay);
            for (((w, g), m), v) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(p.grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let gf = g.as_f64();
                let mf = b1 * m.as_f64() + (1.0 - b1) * gf;
                let vf = b2 * v.as_f64() + (1.0 - b2) * gf * gf;
                *m = T::of(mf);
                *v = T::of(vf);
                let update = T::of(lr * (mf / c1) / ((vf / c2).sqrt() + self.eps));
                *w = *w - decay * *w - update;
            }
        }
        store.zero_grads();
    }
}

/// Random draws for one batch element; identical across loss modes.
#[derive(Debug, Clone)]
pub struct Draw<T> {
    pub clip: usize,
    pub t: usize,
    pub drop: bool,
    pub eps: Tensor<T>,
}

pub fn draw<T: Scalar>(
    config: &TrainConfig,
    step: usize,
    index: usize,
    clips: usize,
    timesteps: usize,
    shape: &[usize],
) -> Draw<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(((step as u64) << 20) | index as u64);
    let clip = rng.gen_range(0..clips);
    let t = rng.gen_range(0..timesteps);
    let drop = rng.gen::<f64>() < config.cfg_null_prob;
    Draw {
        clip,
        t,
        drop,
        eps: Tensor::randn(shape, 1.0, &mut rng),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

/// Number of worker threads from `PROTEUS_THREADS` (default 1).
pub fn thread_count() -> usize {
    std::env::var("PROTEUS_THREADS")
        .ok()
        .and_then(|s| s.parse().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

pub struct Trainer<T: Scalar> {
    pub model: ProteusModel,
    pub store: ParamStore<T>,
    pub config: TrainConfig,
    pub schedule: NoiseSchedule,
    pub optimizer: AdamW<T>,
    pub step: usize,
    /// Where a diagnostic file is written if the loss turns non-finite.
    pub dump_dir: Option<PathBuf>,
    mask: Vec<bool>,
    pool: rayon::ThreadPool,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: ProteusModel, store: ParamStore<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let schedule = NoiseSchedule::linear(model.config.timesteps)?;
        let mask = store
            .params()
            .iter()
            .map(|p| ProteusModel::is_trained(&p.name, config.loss_mode))
            .collect();
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(thread_count())
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        Ok(Trainer {
            optimizer: AdamW::new(&store, config.weight_decay),
            model,
            store,
            config,
            schedule,
            step: 0,
            dump_dir: None,
            mask,
            pool,
        })
    }

    /// Replaces the worker pool. Results do not depend on the thread count.
    pub fn with_threads(mut self, threads: usize) -> Result<Self> {
        self.pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads.max(1))
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        Ok(self)
    }

    /// Mean loss and summed gradients of one batch without updating.
    pub fn batch_gradients(&self, data: &[Prepared<T>]) -> Result<(f64, GradSet<T>, Vec<Draw<T>>)> {
        if data.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        let c = &self.config;
        let shape = self.model.config.latent_shape();
        let draws: Vec<Draw<T>> = (0..c.batch)
            .map(|i| draw(c, self.step, i, data.len(), self.schedule.steps(), &shape))
            .collect();
        let results: Vec<Result<(f64, GradSet<T>)>> = self.pool.install(|| {
            draws
                .par_iter()
                .map(|d| {
                    let tape = Tape::new();
                    let cx = Ctx::new(&tape, &self.store);
                    let loss = self.model.loss(
                        &cx,
                        &data[d.clip],
                        &self.schedule,
                        d.t,
                        &d.eps,
                        c.loss_mode,
                        c.lambda,
                        d.drop,
                    )?;
                    let value = tape.value(loss).data()[0].as_f64();
                    let mut g = tape.backward(loss)?;
                    Ok((value, cx.collect(&mut g)))
                })
                .collect()
        });
        let mut total = GradSet::empty(self.store.len());
        let mut loss = 0.0;
        for r in results {
            let (l, g) = r?;
            loss += l;
            total.merge(g)?;
        }
        total.scale(T::of(1.0 / c.batch as f64));
        Ok((loss / c.batch as f64, total, draws))
    }

    pub fn train_step(&mut self, data: &[Prepared<T>]) -> Result<StepReport> {
        let (loss, grads, draws) = self.batch_gradients(data)?;
        if !loss.is_finite() {
            self.dump(loss, &draws);
            return Err(Error::NonFinite(format!("loss {loss} at step {}", self.step)));
        }
        grads.accumulate_into(&mut self.store)?;
        let lr = cosine_with_restarts(self.config.lr, self.step, self.config.restart_period);
        self.optimizer.step(&mut self.store, lr, &self.mask);
        let report = StepReport {
            step: self.step,
            loss,
            lr,
        };
        self.step += 1;
        Ok(report)
    }

    /// Runs the remaining configured steps, calling `log` on every report.
    pub fn run(&mut self, data: &[Prepared<T>], mut log: impl FnMut(&StepReport)) -> Result<Vec<StepReport>> {
        let mut out = Vec::with_capacity(self.config.steps);
        while self.step < self.config.steps {
            let r = self.train_step(data)?;
            log(&r);
            out.push(r);
        }
        Ok(out)
    }

    fn dump(&self, loss: f64, draws: &[Draw<T>]) {
        let Some(dir) = &self.dump_dir else { return };
        let mut text = format!(
            "step = {}\nloss = {loss}\nseed = {}\nloss_mode = {}\n",
            self.step, self.config.seed, self.config.loss_mode
        );
        for (i, d) in draws.iter().enumerate() {
            text.push_str(&format!(
                "sample.{i} = clip {} t {} drop {} eps_finite {}\n",
                d.clip,
                d.t,
                d.drop,
                d.eps.all_finite()
            ));
        }
        let _ = fs::create_dir_all(dir);
        let _ = fs::write(dir.join(format!("nan_step{}.txt", self.step)), text);
    }
}

/// Mean of the first and last `window` values.
pub fn smoothed_endpoints(losses: &[f64], window: usize) -> (f64, f64) {
    let w = window.clamp(1, losses.len().max(1));
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len().max(1) as f64;
    (mean(&losses[..w.min(losses.len())]), mean(&losses[losses.len().saturating_sub(w)..]))
}
