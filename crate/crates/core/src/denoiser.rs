//! Miniature diffusion transformer over the joint `[condition, video]`
//! token sequence, with an identity cross-attention residual in every block.

use rand::Rng;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::latent::{patchify, unpatch_index};
use crate::nn::{AdaLayerNorm, Attention, Ctx, FeedForward, Init, Linear, ParamId, ParamStore, TimestepEmbedder};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiTConfig {
    pub blocks: usize,
    pub d_model: usize,
    pub heads: usize,
    pub patch: usize,
    /// Latent layout `[frames, channels, height, width]`.
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Longest condition sequence the positional table covers.
    pub max_cond: usize,
    pub ffn_mult: usize,
    pub timesteps: usize,
}

impl DiTConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks < 2 {
            return Err(Error::config("the denoiser needs at least two blocks"));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::config(format!(
                "{} heads do not divide d_model {}",
                self.heads, self.d_model
            )));
        }
        if self.patch == 0 || self.height % self.patch != 0 || self.width % self.patch != 0 {
            return Err(Error::config(format!(
                "{}x{} latent is not divisible into {}-patches",
                self.height, self.width, self.patch
            )));
        }
        Ok(())
    }

    pub fn frame_tokens(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    pub fn video_tokens(&self) -> usize {
        self.frames * self.frame_tokens()
    }

    pub fn token_dim(&self) -> usize {
        self.channels * self.patch * self.patch
    }

    pub fn latent_shape(&self) -> [usize; 4] {
        [self.frames, self.channels, self.height, self.width]
    }
}

/// `Z' = Z + MHCA(Q = Z, K = W, V = W)`.
pub fn inject_identity_residual<T: Scalar>(cx: &Ctx<'_, T>, attn: &Attention, z: Var, w: Var) -> Result<Var> {
    let (zs, ws) = (cx.tape.shape(z), cx.tape.shape(w));
    if zs.len() != 2 || ws.len() != 2 || zs[1] != ws[1] {
        return Err(Error::shape(format!("cannot inject {ws:?} into {zs:?}")));
    }
    let r = attn.forward(cx, z, w)?;
    cx.tape.add(z, r)
}

#[derive(Debug, Clone)]
pub struct DiTBlock {
    pub norm1: AdaLayerNorm,
    pub attn: Attention,
    pub inject: Attention,
    pub norm2: AdaLayerNorm,
    pub ffn: FeedForward,
}

impl DiTBlock {
    /// Self-attention over all tokens, identity injection, feed-forward.
    pub fn forward<T: Scalar>(&self, cx: &Ctx<'_, T>, z: Var, temb: Var, identity: Option<Var>) -> Result<Var> {
        let t = cx.tape;
        let h = self.norm1.forward(cx, z, temb)?;
        let mut z = t.add(z, self.attn.forward(cx, h, h)?)?;
        if let Some(w) = identity {
            z = inject_identity_residual(cx, &self.inject, z, w)?;
        }
        let h = self.norm2.forward(cx, z, temb)?;
        t.add(z, self.ffn.forward(cx, h)?)
    }
}

#[derive(Debug, Clone)]
pub struct DiT {
    pub config: DiTConfig,
    pub time: TimestepEmbedder,
    pub embed: Linear,
    pub video_pos: ParamId,
    pub cond_pos: ParamId,
    pub blocks: Vec<DiTBlock>,
    pub norm_out: AdaLayerNorm,
    /// Zero-initialized output head.
    pub head: Linear,
    /// Per-feature, timestep-dependent multiple of the noisy input added to
    /// the head output; zero at init.
    pub skip: Linear,
}

/// Token sequence plus the handles the rest of the forward pass needs.
pub struct Tokens {
    pub seq: Var,
    pub patches: Var,
    pub temb: Var,
    pub time_features: Var,
    pub cond_len: usize,
}

impl DiT {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        prefix: &str,
        config: DiTConfig,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let td = config.token_dim();
        Ok(DiT {
            config,
            time: TimestepEmbedder::new(store, rng, &format!("{prefix}.time"), d),
            embed: Linear::new(store, rng, &format!("{prefix}.embed"), td, d, true),
            video_pos: store.add(
                &format!("{prefix}.video_pos"),
                &[config.video_tokens(), d],
                Init::Normal(0.5),
                rng,
            ),
            cond_pos: store.add(&format!("{prefix}.cond_pos"), &[config.max_cond, d], Init::Normal(0.5), rng),
            blocks: (0..config.blocks)
                .map(|i| {
                    let p = format!("{prefix}.blocks.{i}");
                    DiTBlock {
                        norm1: AdaLayerNorm::new(store, rng, &format!("{p}.norm1"), d, d),
                        attn: Attention::new(store, rng, &format!("{p}.attn"), d, config.heads),
                        inject: Attention::new(store, rng, &format!("{p}.inject"), d, config.heads),
                        norm2: AdaLayerNorm::new(store, rng, &format!("{p}.norm2"), d, d),
                        ffn: FeedForward::new(store, rng, &format!("{p}.ffn"), d, config.ffn_mult * d),
                    }
                })
                .collect(),
            norm_out: AdaLayerNorm::new(store, rng, &format!("{prefix}.norm_out"), d, d),
            head: Linear::with_init(store, rng, &format!("{prefix}.head"), d, td, true, Init::Zeros),
            skip: Linear::with_init(store, rng, &format!("{prefix}.skip"), d, td, true, Init::Zeros),
        })
    }

    /// Patchifies `z_t`, embeds it, adds positions and the timestep embedding
    /// to the video rows, and prepends the position-tagged condition rows.
    pub fn tokenize<T: Scalar>(&self, cx: &Ctx<'_, T>, z_t: &Tensor<T>, t: usize, cond: Var) -> Result<Tokens> {
        let c = &self.config;
        if z_t.shape() != c.latent_shape() {
            return Err(Error::shape(format!(
                "latent {:?} does not match the configured {:?}",
                z_t.shape(),
                c.latent_shape()
            )));
        }
        if t >= c.timesteps {
            return Err(Error::config(format!("timestep {t} outside 0..{}", c.timesteps)));
        }
        let tape = cx.tape;
        let cs = tape.shape(cond);
        if cs.len() != 2 || cs[1] != c.d_model || cs[0] == 0 || cs[0] > c.max_cond {
            return Err(Error::shape(format!(
                "condition {cs:?} must be [1..={}, {}]",
                c.max_cond, c.d_model
            )));
        }
        let cond_len = cs[0];
        let (time_features, temb) = self.time.forward(cx, t)?;
        let patches = cx.input(patchify(z_t, c.patch)?);
        let v = self.embed.forward(cx, patches)?;
        let v = tape.add(v, cx.p(self.video_pos))?;
        let v = tape.add_row(v, temb)?;
        let pos: Vec<usize> = (0..cond_len).collect();
        let cp = tape.gather_rows(cx.p(self.cond_pos), &pos)?;
        let cond = tape.add(cond, cp)?;
        Ok(Tokens {
            seq: tape.concat_rows(&[cond, v])?,
            patches,
            temb,
            time_features,
            cond_len,
        })
    }

    /// Noise prediction with the shape of `z_t`.
    pub fn forward<T: Scalar>(
        &self,
        cx: &Ctx<'_, T>,
        z_t: &Tensor<T>,
        t: usize,
        cond: Var,
        identity: Option<Var>,
    ) -> Result<Var> {
        let tape = cx.tape;
        let tok = self.tokenize(cx, z_t, t, cond)?;
        let mut z = tok.seq;
        for b in &self.blocks {
            z = b.forward(cx, z, tok.temb, identity)?;
        }
        let video = tape.slice_rows(z, tok.cond_len, self.config.video_tokens())?;
        let h = self.norm_out.forward(cx, video, tok.temb)?;
        let out = self.head.forward(cx, h)?;
        let gate = self.skip.forward(cx, tok.temb)?;
        let out = tape.add(out, tape.mul_row(tok.patches, gate)?)?;
        let shape = self.config.latent_shape();
        tape.permute(out, unpatch_index(&shape, self.config.patch)?, &shape)
    }
}
