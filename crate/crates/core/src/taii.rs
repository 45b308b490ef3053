//! Time-aware identity injection: a resampler that turns the fused identity
//! into a timestep-dependent sequence for the denoiser's per-block
//! cross-attention.

use rand::Rng;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{AdaLayerNorm, Attention, Ctx, FeedForward, Init, LayerNorm, Linear, ParamStore, TimestepEmbedder};
use crate::scalar::Scalar;

/// Resampler depth used by the full model.
pub const DEFAULT_UNITS: usize = 10;

/// Adaptive norm, cross-attention to the fused identity, adaptive norm,
/// feed-forward; each with a residual.
#[derive(Debug, Clone)]
pub struct ResamplerBlock {
    pub norm_ca: AdaLayerNorm,
    pub cross_attn: Attention,
    pub norm_ff: AdaLayerNorm,
    pub ffn: FeedForward,
}

#[derive(Debug, Clone)]
pub struct Resampler {
    pub time: TimestepEmbedder,
    pub kv_norm: LayerNorm,
    pub blocks: Vec<ResamplerBlock>,
    pub out_norm: LayerNorm,
    /// Zero-initialized, so a fresh resampler emits exactly zero.
    pub out_proj: Linear,
    pub timesteps: usize,
}

/// Output of one resampler pass.
pub struct TimeAwareIdentity {
    pub w_t_fusion: Var,
    /// Leaf holding the raw sinusoidal timestep features.
    pub time_features: Var,
    pub t: usize,
}

impl Resampler {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        prefix: &str,
        d: usize,
        heads: usize,
        units: usize,
        timesteps: usize,
    ) -> Self {
        Resampler {
            time: TimestepEmbedder::new(store, rng, &format!("{prefix}.time"), d),
            kv_norm: LayerNorm::new(store, rng, &format!("{prefix}.kv_norm"), d),
            blocks: (0..units)
                .map(|i| {
                    let p = format!("{prefix}.blocks.{i}");
                    ResamplerBlock {
                        norm_ca: AdaLayerNorm::new(store, rng, &format!("{p}.norm_ca"), d, d),
                        cross_attn: Attention::new(store, rng, &format!("{p}.cross_attn"), d, heads),
                        norm_ff: AdaLayerNorm::new(store, rng, &format!("{p}.norm_ff"), d, d),
                        ffn: FeedForward::new(store, rng, &format!("{p}.ffn"), d, 2 * d),
                    }
                })
                .collect(),
            out_norm: LayerNorm::new(store, rng, &format!("{prefix}.out_norm"), d),
            out_proj: Linear::with_init(store, rng, &format!("{prefix}.out_proj"), d, d, true, Init::Zeros),
            timesteps,
        }
    }

    /// `W_t = phi(W_fusion, t)`; same row count as `W_fusion`.
    pub fn forward<T: Scalar>(&self, cx: &Ctx<'_, T>, w_fusion: Var, t: usize) -> Result<TimeAwareIdentity> {
        if t >= self.timesteps {
            return Err(Error::config(format!("timestep {t} outside 0..{}", self.timesteps)));
        }
        let tape = cx.tape;
        let (time_features, temb) = self.time.forward(cx, t)?;
        let kv = self.kv_norm.forward(cx, w_fusion)?;
        let mut x = w_fusion;
        for b in &self.blocks {
            let h = b.norm_ca.forward(cx, x, temb)?;
            x = tape.add(x, b.cross_attn.forward(cx, h, kv)?)?;
            let h = b.norm_ff.forward(cx, x, temb)?;
            x = tape.add(x, b.ffn.forward(cx, h)?)?;
        }
        let x = self.out_norm.forward(cx, x)?;
        let w_t_fusion = self.out_proj.forward(cx, x)?;
        Ok(TimeAwareIdentity {
            w_t_fusion,
            time_features,
            t,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn run(store: &ParamStore<f64>, r: &Resampler, w: &Tensor<f64>, t: usize) -> Tensor<f64> {
        let tape = Tape::new();
        let cx = Ctx::new(&tape, store);
        let x = cx.input(w.clone());
        let out = r.forward(&cx, x, t).unwrap();
        let v = tape.value(out.w_t_fusion).clone();
        v
    }

    #[test]
    fn fresh_resampler_emits_zero_with_matching_shape() {
        for units in [0, 3] {
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let mut store = ParamStore::new();
            let r = Resampler::new(&mut store, &mut rng, "taii", 8, 2, units, 200);
            let w = Tensor::randn(&[35, 8], 1.0, &mut rng);
            for t in [0, 10, 199] {
                let out = run(&store, &r, &w, t);
                assert_eq!(out.shape(), &[35, 8]);
                assert_eq!(out.max_abs(), 0.0);
            }
        }
    }

    #[test]
    fn output_depends_on_timestep_once_weights_move() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let r = Resampler::new(&mut store, &mut rng, "taii", 8, 2, 2, 200);
        store.perturb(0.2, &mut rng);
        let w = Tensor::randn(&[6, 8], 1.0, &mut rng);
        let a = run(&store, &r, &w, 10);
        let b = run(&store, &r, &w, 190);
        assert!(a.sub(&b).unwrap().max_abs() > 1e-6);
    }

    #[test]
    fn timestep_out_of_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::<f64>::new();
        let r = Resampler::new(&mut store, &mut rng, "taii", 8, 2, 1, 50);
        let tape = Tape::new();
        let cx = Ctx::new(&tape, &store);
        let x = cx.input(Tensor::zeros(&[2, 8]));
        assert!(r.forward(&cx, x, 50).is_err());
    }
}
