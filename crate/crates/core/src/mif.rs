//! Multimodal identity fusion: a Q-Former over `[queries, identity text]`
//! that cross-attends to the visual identity, and the condition sequence
//! that appends its projected output to the prompt embedding.

use rand::Rng;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{Attention, Ctx, FeedForward, Init, LayerNorm, Linear, ParamId, ParamStore};
use crate::scalar::Scalar;

/// Number of learnable fusion queries.
pub const QUERY_COUNT: usize = 32;

/// One fusion layer: `W <- W + SA(LN W)`, `W <- W + CA(LN W, I)`,
/// `W <- W + FFN(LN W)`.
#[derive(Debug, Clone)]
pub struct QFormerLayer {
    pub norm_sa: LayerNorm,
    pub self_attn: Attention,
    pub norm_ca: LayerNorm,
    pub cross_attn: Attention,
    pub norm_ff: LayerNorm,
    pub ffn: FeedForward,
}

impl QFormerLayer {
    fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        prefix: &str,
        d: usize,
        heads: usize,
    ) -> Self {
        QFormerLayer {
            norm_sa: LayerNorm::new(store, rng, &format!("{prefix}.norm_sa"), d),
            self_attn: Attention::new(store, rng, &format!("{prefix}.self_attn"), d, heads),
            norm_ca: LayerNorm::new(store, rng, &format!("{prefix}.norm_ca"), d),
            cross_attn: Attention::new(store, rng, &format!("{prefix}.cross_attn"), d, heads),
            norm_ff: LayerNorm::new(store, rng, &format!("{prefix}.norm_ff"), d),
            ffn: FeedForward::new(store, rng, &format!("{prefix}.ffn"), d, 2 * d),
        }
    }

    pub fn forward<T: Scalar>(&self, cx: &Ctx<'_, T>, w: Var, visual: Var) -> Result<Var> {
        let t = cx.tape;
        let h = self.norm_sa.forward(cx, w)?;
        let w = t.add(w, self.self_attn.forward(cx, h, h)?)?;
        let h = self.norm_ca.forward(cx, w)?;
        let w = t.add(w, self.cross_attn.forward(cx, h, visual)?)?;
        let h = self.norm_ff.forward(cx, w)?;
        t.add(w, self.ffn.forward(cx, h)?)
    }

    pub fn zero_residual_outputs<T: Scalar>(&self, store: &mut ParamStore<T>) {
        self.self_attn.zero_output(store);
        self.cross_attn.zero_output(store);
        self.ffn.zero_output(store);
    }
}

#[derive(Debug, Clone)]
pub struct QFormer {
    pub queries: ParamId,
    pub layers: Vec<QFormerLayer>,
    pub d_model: usize,
}

impl QFormer {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        prefix: &str,
        d_model: usize,
        heads: usize,
        layers: usize,
    ) -> Result<Self> {
        if layers == 0 {
            return Err(Error::config("fusion needs at least one layer"));
        }
        Ok(QFormer {
            queries: store.add(
                &format!("{prefix}.queries"),
                &[QUERY_COUNT, d_model],
                Init::Normal(1.0),
                rng,
            ),
            layers: (0..layers)
                .map(|i| QFormerLayer::new(store, rng, &format!("{prefix}.layers.{i}"), d_model, heads))
                .collect(),
            d_model,
        })
    }

    /// `W_0 = [Q, T_identity]` pushed through every layer; returns the last
    /// state with shape `[32 + n_id, d_model]`.
    pub fn fuse<T: Scalar>(&self, cx: &Ctx<'_, T>, t_identity: Var, visual: Var) -> Result<Var> {
        let t = cx.tape;
        for v in [t_identity, visual] {
            let s = t.shape(v);
            if s.len() != 2 || s[1] != self.d_model {
                return Err(Error::shape(format!(
                    "fusion input {s:?} does not have width {}",
                    self.d_model
                )));
            }
        }
        let mut w = t.concat_rows(&[cx.p(self.queries), t_identity])?;
        for layer in &self.layers {
            w = layer.forward(cx, w, visual)?;
        }
        Ok(w)
    }

    pub fn zero_residual_outputs<T: Scalar>(&self, store: &mut ParamStore<T>) {
        for l in &self.layers {
            l.zero_residual_outputs(store);
        }
    }
}

/// `[T_user, Linear(W_fusion)]`.
pub fn build_condition_sequence<T: Scalar>(
    cx: &Ctx<'_, T>,
    proj: &Linear,
    t_user: Var,
    w_fusion: Var,
) -> Result<Var> {
    let projected = proj.forward(cx, w_fusion)?;
    cx.tape.concat_rows(&[t_user, projected])
}
