//! Named parameters and the small set of layers the models are built from.

use std::cell::RefCell;
use std::collections::HashMap;

use rand::Rng;

use crate::autograd::{Grads, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    /// Normal with std `1/sqrt(fan_in)`, taking fan-in from the first axis.
    FanIn,
}

/// Flat, ordered registry of named parameters.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        shape: &[usize],
        init: Init,
        rng: &mut R,
    ) -> ParamId {
        assert!(!self.by_name.contains_key(name), "duplicate parameter {name}");
        let value = match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::full(shape, T::one()),
            Init::Normal(std) => Tensor::randn(shape, std, rng),
            Init::FanIn => Tensor::randn(shape, 1.0 / (shape[0].max(1) as f64).sqrt(), rng),
        };
        let id = self.params.len();
        self.params.push(Param {
            name: name.to_string(),
            grad: Tensor::zeros(shape),
            value,
        });
        self.by_name.insert(name.to_string(), id);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(T::zero());
        }
    }

    /// Replace the value of a named parameter, checking its shape.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::config(format!("unknown parameter {name}")))?;
        let p = &mut self.params[id.0];
        p.value.check_same_shape(&value)?;
        p.value = value;
        Ok(())
    }

    /// Adds `N(0, std)` noise to every parameter, including zero-initialized
    /// ones. Used to exercise all pathways in gradient checks.
    pub fn perturb<R: Rng + ?Sized>(&mut self, std: f64, rng: &mut R) {
        for p in &mut self.params {
            let noise = Tensor::<T>::randn(p.value.shape(), std, rng);
            p.value.add_assign(&noise).expect("same shape");
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.cast(),
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}

/// Per-parameter gradients gathered from one or more backward passes.
#[derive(Debug, Clone)]
pub struct GradSet<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> GradSet<T> {
    pub fn empty(n: usize) -> Self {
        GradSet {
            grads: (0..n).map(|_| None).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads[id.0].as_ref()
    }

    /// Sum of `other` into `self`.
    pub fn merge(&mut self, other: GradSet<T>) -> Result<()> {
        for (dst, src) in self.grads.iter_mut().zip(other.grads) {
            match (dst.as_mut(), src) {
                (Some(d), Some(s)) => d.add_assign(&s)?,
                (None, Some(s)) => *dst = Some(s),
                _ => {}
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, s: T) {
        for g in self.grads.iter_mut().flatten() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }

    /// L2 norm of the gradients whose parameter name starts with `prefix`.
    pub fn norm_with_prefix(&self, store: &ParamStore<T>, prefix: &str) -> f64 {
        let mut s = 0.0;
        for (i, g) in self.grads.iter().enumerate() {
            if let Some(g) = g {
                if store.params[i].name.starts_with(prefix) {
                    s += g.data().iter().map(|v| v.as_f64().powi(2)).sum::<f64>();
                }
            }
        }
        s.sqrt()
    }

    /// Writes gradients into the store's `grad` buffers, adding to whatever
    /// is already there.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) -> Result<()> {
        for (p, g) in store.params.iter_mut().zip(&self.grads) {
            if let Some(g) = g {
                p.grad.add_assign(g)?;
            }
        }
        Ok(())
    }
}

/// Binds a [`ParamStore`] to a [`Tape`] for one forward pass. Each parameter
/// becomes a single leaf on first use so its gradient accumulates in one
/// place.
pub struct Ctx<'a, T: Scalar> {
    pub tape: &'a Tape<T>,
    pub params: &'a ParamStore<T>,
    bound: RefCell<Vec<Option<Var>>>,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(tape: &'a Tape<T>, params: &'a ParamStore<T>) -> Self {
        Ctx {
            tape,
            params,
            bound: RefCell::new(vec![None; params.len()]),
        }
    }

    pub fn p(&self, id: ParamId) -> Var {
        if let Some(v) = self.bound.borrow()[id.0] {
            return v;
        }
        let v = self.tape.leaf(self.params.value(id).clone());
        self.bound.borrow_mut()[id.0] = Some(v);
        v
    }

    pub fn input(&self, t: Tensor<T>) -> Var {
        self.tape.leaf(t)
    }

    /// Parameter gradients after a backward pass. Parameters never touched
    /// by the forward pass have no entry.
    pub fn collect(&self, grads: &mut Grads<T>) -> GradSet<T> {
        GradSet {
            grads: self
                .bound
                .borrow()
                .iter()
                .map(|b| b.and_then(|v| grads.take(v)))
                .collect(),
        }
    }

    /// Whether a parameter was used by this forward pass.
    pub fn touched(&self, id: ParamId) -> bool {
        self.bound.borrow()[id.0].is_some()
    }
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Self {
        Self::with_init(store, rng, prefix, in_dim, out_dim, bias, Init::FanIn)
    }

    pub fn with_init<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        init: Init,
    ) -> Self {
        let w = store.add(&join(prefix, "w"), &[in_dim, out_dim], init, rng);
        let b = bias.then(|| store.add(&join(prefix, "b"), &[out_dim], Init::Zeros, rng));
        Linear {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<T: Scalar>(&self, cx: &Ctx<'_, T>, x: Var) -> Result<Var> {
        cx.tape.linear(x, cx.p(self.w), self.b.map(|b| cx.p(b)))
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        std::iter::once(self.w).chain(self.b).collect()
    }
}

/// Layer norm with a learned elementwise affine.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        prefix: &str,
        dim: usize,
    ) -> Self {
        LayerNorm {
            gamma: store.add(&join(prefix, "gamma"), &[dim], Init::Ones, rng),
            beta: store.add(&join(prefix, "beta"), &[dim], Init::Zeros, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, cx: &Ctx<'_, T>, x: Var) -> Result<Var> {
        let t = cx.tape;
        let y = t.layer_norm(x);
        let y = t.mul_row(y, cx.p(self.gamma))?;
        t.add_row(y, cx.p(self.beta))
    }
}

/// Layer norm whose scale and shift are predicted from a conditioning
/// vector: `LN(x) * (1 + scale(c)) + shift(c)`. Both maps start at zero, so
/// a fresh module is a plain layer norm.
#[derive(Debug, Clone)]
pub struct AdaLayerNorm {
    pub scale: Linear,
    pub shift: Linear,
}

impl AdaLayerNorm {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        prefix: &str,
        cond_dim: usize,
        dim: usize,
    ) -> Self {
        AdaLayerNorm {
            scale: Linear::with_init(
                store,
                rng,
                &join(prefix, "scale"),
                cond_dim,
                dim,
                true,
                Init::Zeros,
            ),
            shift: Linear::with_init(
                store,
                rng,
                &join(prefix, "shift"),
                cond_dim,
                dim,
                true,
                Init::Zeros,
            ),
        }
    }

    /// `x` is `[n, d]`, `cond` is `[1, c]`.
    pub fn forward<T: Scalar>(&self, cx: &Ctx<'_, T>, x: Var, cond: Var) -> Result<Var> {
        let t = cx.tape;
        let scale = self.scale.forward(cx, cond)?;
        let shift = self.shift.forward(cx, cond)?;
        let y = t.layer_norm(x);
        let y = t.mul_row(y, t.add_scalar(scale, T::one()))?;
        t.add_row(y, shift)
    }
}

/// Multi-head attention with bias-free projections. With zero key/value
/// inputs the output is exactly zero.
#[derive(Debug, Clone)]
pub struct Attention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        prefix: &str,
        dim: usize,
        heads: usize,
    ) -> Self {
        assert!(heads > 0 && dim % heads == 0, "{heads} heads for width {dim}");
        Attention {
            wq: Linear::new(store, rng, &join(prefix, "q"), dim, dim, false),
            wk: Linear::new(store, rng, &join(prefix, "k"), dim, dim, false),
            wv: Linear::new(store, rng, &join(prefix, "v"), dim, dim, false),
            wo: Linear::new(store, rng, &join(prefix, "o"), dim, dim, false),
            heads,
        }
    }

    pub fn forward<T: Scalar>(&self, cx: &Ctx<'_, T>, xq: Var, xkv: Var) -> Result<Var> {
        let q = self.wq.forward(cx, xq)?;
        let k = self.wk.forward(cx, xkv)?;
        let v = self.wv.forward(cx, xkv)?;
        let a = cx.tape.attention(q, k, v, self.heads)?;
        self.wo.forward(cx, a)
    }

    pub fn zero_output<T: Scalar>(&self, store: &mut ParamStore<T>) {
        store.value_mut(self.wo.w).fill(T::zero());
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        prefix: &str,
        dim: usize,
        hidden: usize,
    ) -> Self {
        FeedForward {
            up: Linear::new(store, rng, &join(prefix, "up"), dim, hidden, true),
            down: Linear::new(store, rng, &join(prefix, "down"), hidden, dim, true),
        }
    }

    pub fn forward<T: Scalar>(&self, cx: &Ctx<'_, T>, x: Var) -> Result<Var> {
        let h = self.up.forward(cx, x)?;
        let h = cx.tape.gelu(h);
        self.down.forward(cx, h)
    }

    pub fn zero_output<T: Scalar>(&self, store: &mut ParamStore<T>) {
        store.value_mut(self.down.w).fill(T::zero());
        if let Some(b) = self.down.b {
            store.value_mut(b).fill(T::zero());
        }
    }
}

/// Pre-norm self-attention block.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
}

impl TransformerBlock {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        prefix: &str,
        dim: usize,
        heads: usize,
        hidden: usize,
    ) -> Self {
        TransformerBlock {
            norm1: LayerNorm::new(store, rng, &join(prefix, "norm1"), dim),
            attn: Attention::new(store, rng, &join(prefix, "attn"), dim, heads),
            norm2: LayerNorm::new(store, rng, &join(prefix, "norm2"), dim),
            ffn: FeedForward::new(store, rng, &join(prefix, "ffn"), dim, hidden),
        }
    }

    pub fn forward<T: Scalar>(&self, cx: &Ctx<'_, T>, x: Var) -> Result<Var> {
        let t = cx.tape;
        let h = self.norm1.forward(cx, x)?;
        let x = t.add(x, self.attn.forward(cx, h, h)?)?;
        let h = self.norm2.forward(cx, x)?;
        t.add(x, self.ffn.forward(cx, h)?)
    }
}

/// Width of the fixed sinusoidal timestep features.
pub const TIME_FEATURES: usize = 64;

/// `[sin(t f_0) .. sin(t f_{k-1}), cos(t f_0) .. cos(t f_{k-1})]` with
/// geometric frequencies `f_i = 10000^(-i/k)`, returned as `[1, dim]`.
pub fn sinusoidal_embedding<T: Scalar>(t: f64, dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut out = vec![T::zero(); dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = T::of((t * freq).sin());
        out[half + i] = T::of((t * freq).cos());
    }
    Tensor::new(&[1, dim], out).expect("embedding shape")
}

/// Sinusoidal features followed by a learned two-layer map.
#[derive(Debug, Clone)]
pub struct TimestepEmbedder {
    pub l1: Linear,
    pub l2: Linear,
}

impl TimestepEmbedder {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        prefix: &str,
        dim: usize,
    ) -> Self {
        TimestepEmbedder {
            l1: Linear::new(store, rng, &join(prefix, "l1"), TIME_FEATURES, dim, true),
            l2: Linear::new(store, rng, &join(prefix, "l2"), dim, dim, true),
        }
    }

    /// Returns `(features_leaf, embedding)`; the leaf lets callers read the
    /// gradient reaching the raw timestep features.
    pub fn forward<T: Scalar>(&self, cx: &Ctx<'_, T>, t: usize) -> Result<(Var, Var)> {
        let feats = cx.input(sinusoidal_embedding(t as f64, TIME_FEATURES));
        let h = self.l1.forward(cx, feats)?;
        let h = cx.tape.silu(h);
        Ok((feats, self.l2.forward(cx, h)?))
    }
}
