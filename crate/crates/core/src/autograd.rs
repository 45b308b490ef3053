//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation pushes a node holding its output value and enough saved
//! state to run its adjoint. Handles ([`Var`]) are plain indices into the
//! tape, so they are `Copy` and carry no lifetime. A tape is built for one
//! forward pass and dropped afterwards.

use std::cell::{Ref, RefCell};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    MulConst(Var, Tensor<T>),
    Square(Var),
    LayerNorm { x: Var, rstd: Vec<T> },
    Gelu(Var),
    Silu(Var),
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<T> },
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    GatherRows { table: Var, ids: Vec<usize> },
    Permute { x: Var, index: Vec<usize> },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Layer-norm epsilon used throughout the crate.
pub const LN_EPS: f64 = 1e-5;

pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    // tanh approximation; returns (value, derivative)
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let a = T::of(0.044715);
    let half = T::of(0.5);
    let one = T::one();
    let inner = c * (x + a * x * x * x);
    let th = inner.tanh();
    let value = half * x * (one + th);
    let dinner = c * (one + T::of(3.0) * a * x * x);
    let deriv = half * (one + th) + half * x * (one - th * th) * dinner;
    (value, deriv)
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var(nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.value(v).shape().to_vec()
    }

    pub fn leaf(&self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(&self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `x @ w + b` with `w` stored as `[in, out]`.
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let out = {
            let xv = self.value(x);
            let wv = self.value(w);
            let mut out = xv.matmul(&wv)?;
            if let Some(b) = b {
                let bv = self.value(b);
                let (_, cols) = out.dims2()?;
                if bv.numel() != cols {
                    return Err(Error::shape(format!(
                        "bias of {} for {cols} outputs",
                        bv.numel()
                    )));
                }
                for row in out.data_mut().chunks_mut(cols) {
                    for (o, &bb) in row.iter_mut().zip(bv.data()) {
                        *o += bb;
                    }
                }
            }
            out
        };
        Ok(self.push(out, Op::Linear { x, w, b }))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(&self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(&self.value(b))?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(&self.value(b), |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    fn row_broadcast(&self, a: Var, row: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let av = self.value(a);
        let rv = self.value(row);
        let cols = *av.shape().last().unwrap_or(&1);
        if rv.numel() != cols {
            return Err(Error::shape(format!(
                "row broadcast of {} values over {:?}",
                rv.numel(),
                av.shape()
            )));
        }
        let mut out = av.clone();
        for r in out.data_mut().chunks_mut(cols) {
            for (o, &x) in r.iter_mut().zip(rv.data()) {
                *o = f(*o, x);
            }
        }
        Ok(out)
    }

    /// Adds a row vector (any shape with `cols` elements) to every row.
    pub fn add_row(&self, a: Var, row: Var) -> Result<Var> {
        let out = self.row_broadcast(a, row, |x, r| x + r)?;
        Ok(self.push(out, Op::AddRow(a, row)))
    }

    pub fn mul_row(&self, a: Var, row: Var) -> Result<Var> {
        let out = self.row_broadcast(a, row, |x, r| x * r)?;
        Ok(self.push(out, Op::MulRow(a, row)))
    }

    pub fn scale(&self, a: Var, s: T) -> Var {
        let out = self.value(a).scale(s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn add_scalar(&self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|v| v + s);
        self.push(out, Op::AddScalar(a))
    }

    /// Elementwise product with a constant (non-differentiated) tensor.
    pub fn mul_const(&self, a: Var, w: Tensor<T>) -> Result<Var> {
        let out = self.value(a).zip_map(&w, |x, y| x * y)?;
        Ok(self.push(out, Op::MulConst(a, w)))
    }

    pub fn square(&self, a: Var) -> Var {
        let out = self.value(a).map(|v| v * v);
        self.push(out, Op::Square(a))
    }

    /// Normalizes each row of the last axis to zero mean and unit variance.
    pub fn layer_norm(&self, x: Var) -> Var {
        let (out, rstd) = {
            let xv = self.value(x);
            let cols = *xv.shape().last().unwrap_or(&1);
            let n = T::of(cols as f64);
            let eps = T::of(LN_EPS);
            let mut out = xv.clone();
            let mut rstd = Vec::with_capacity(xv.numel() / cols.max(1));
            for row in out.data_mut().chunks_mut(cols) {
                let mean = row.iter().copied().sum::<T>() / n;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
                let r = T::one() / (var + eps).sqrt();
                for v in row.iter_mut() {
                    *v = (*v - mean) * r;
                }
                rstd.push(r);
            }
            (out, rstd)
        };
        self.push(out, Op::LayerNorm { x, rstd })
    }

    pub fn gelu(&self, x: Var) -> Var {
        let out = self.value(x).map(|v| gelu_parts(v).0);
        self.push(out, Op::Gelu(x))
    }

    pub fn silu(&self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * sigmoid(v));
        self.push(out, Op::Silu(x))
    }

    /// Multi-head scaled dot-product attention on already-projected inputs.
    ///
    /// `q` is `[n_q, d]`, `k` and `v` are `[n_k, d]`; head `h` uses columns
    /// `h*d/heads .. (h+1)*d/heads`. Softmax subtracts the row maximum.
    pub fn attention(&self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (out, probs) = {
            let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
            attention_forward(&qv, &kv, &vv, heads)?
        };
        Ok(self.push(out, Op::Attention { q, k, v, heads, probs }))
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        let out = {
            let vals: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
            let refs: Vec<&Tensor<T>> = vals.iter().map(|r| &**r).collect();
            Tensor::concat_rows(&refs)?
        };
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_rows(&self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(x).slice_rows(start, len)?;
        Ok(self.push(out, Op::SliceRows { x, start }))
    }

    /// Row lookup into a `[vocab, d]` table.
    pub fn gather_rows(&self, table: Var, ids: &[usize]) -> Result<Var> {
        let out = {
            let tv = self.value(table);
            let (rows, cols) = tv.dims2()?;
            let mut data = Vec::with_capacity(ids.len() * cols);
            for &id in ids {
                if id >= rows {
                    return Err(Error::shape(format!("row {id} out of table with {rows} rows")));
                }
                data.extend_from_slice(tv.row(id));
            }
            Tensor::new(&[ids.len(), cols], data)?
        };
        Ok(self.push(
            out,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// `out.flat[i] = x.flat[index[i]]`, reshaped to `shape`. `index` must be
    /// a permutation of `0..numel`.
    pub fn permute(&self, x: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let out = {
            let xv = self.value(x);
            if index.len() != xv.numel() {
                return Err(Error::shape("permutation length differs from element count"));
            }
            let data = index.iter().map(|&i| xv.data()[i]).collect();
            Tensor::new(shape, data)?
        };
        Ok(self.push(out, Op::Permute { x, index }))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    pub fn sum(&self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x))
    }

    pub fn mean(&self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).mean());
        self.push(out, Op::Mean(x))
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, out: Var) -> Result<Grads<T>> {
        let numel = self.value(out).numel();
        if numel != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar output, got {numel} elements"
            )));
        }
        self.backward_with(out, Tensor::full(&self.shape(out), T::one()))
    }

    /// Reverse sweep seeded with an explicit cotangent for `out`.
    pub fn backward_with(&self, out: Var, seed: Tensor<T>) -> Result<Grads<T>> {
        let nodes = self.nodes.borrow();
        seed.check_same_shape(&nodes[out.0].value)?;
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(seed);

        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            let val = |v: Var| &nodes[v.0].value;
            let mut acc = |v: Var, t: Tensor<T>| -> Result<()> {
                match &mut grads[v.0] {
                    Some(existing) => existing.add_assign(&t),
                    slot @ None => {
                        *slot = Some(t);
                        Ok(())
                    }
                }
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    acc(*a, g.matmul_t(val(*b), false, true)?)?;
                    acc(*b, val(*a).matmul_t(&g, true, false)?)?;
                }
                Op::Linear { x, w, b } => {
                    acc(*x, g.matmul_t(val(*w), false, true)?)?;
                    acc(*w, val(*x).matmul_t(&g, true, false)?)?;
                    if let Some(b) = b {
                        let bshape = val(*b).shape().to_vec();
                        acc(*b, col_sum(&g).reshape(&bshape)?)?;
                    }
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone())?;
                    acc(*b, g)?;
                }
                Op::Sub(a, b) => {
                    acc(*a, g.clone())?;
                    acc(*b, g.scale(-T::one()))?;
                }
                Op::Mul(a, b) => {
                    acc(*a, g.zip_map(val(*b), |x, y| x * y)?)?;
                    acc(*b, g.zip_map(val(*a), |x, y| x * y)?)?;
                }
                Op::AddRow(a, r) => {
                    let rshape = val(*r).shape().to_vec();
                    acc(*r, col_sum(&g).reshape(&rshape)?)?;
                    acc(*a, g)?;
                }
                Op::MulRow(a, r) => {
                    let rv = val(*r);
                    let cols = rv.numel();
                    let ga = g.zip_map(val(*a), |x, y| x * y)?;
                    let gr = col_sum(&ga.reshape(&[g.numel() / cols, cols])?);
                    acc(*r, gr.reshape(rv.shape())?)?;
                    let mut gx = g;
                    for row in gx.data_mut().chunks_mut(cols) {
                        for (o, &s) in row.iter_mut().zip(rv.data()) {
                            *o *= s;
                        }
                    }
                    acc(*a, gx)?;
                }
                Op::Scale(a, s) => acc(*a, g.scale(*s))?,
                Op::AddScalar(a) => acc(*a, g)?,
                Op::MulConst(a, w) => acc(*a, g.zip_map(w, |x, y| x * y)?)?,
                Op::Square(a) => {
                    let two = T::of(2.0);
                    acc(*a, g.zip_map(val(*a), |x, y| two * x * y)?)?;
                }
                Op::LayerNorm { x, rstd } => {
                    let y = &node.value;
                    let cols = *y.shape().last().unwrap_or(&1);
                    let n = T::of(cols as f64);
                    let mut gx = g;
                    for ((grow, yrow), &r) in gx
                        .data_mut()
                        .chunks_mut(cols)
                        .zip(y.data().chunks(cols))
                        .zip(rstd)
                    {
                        let mg = grow.iter().copied().sum::<T>() / n;
                        let mgy = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum::<T>() / n;
                        for (gv, &yv) in grow.iter_mut().zip(yrow) {
                            *gv = r * (*gv - mg - yv * mgy);
                        }
                    }
                    acc(*x, gx)?;
                }
                Op::Gelu(x) => acc(*x, g.zip_map(val(*x), |gv, xv| gv * gelu_parts(xv).1)?)?,
                Op::Silu(x) => acc(
                    *x,
                    g.zip_map(val(*x), |gv, xv| {
                        let s = sigmoid(xv);
                        gv * s * (T::one() + xv * (T::one() - s))
                    })?,
                )?,
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    probs,
                } => {
                    let (gq, gk, gv) =
                        attention_backward(val(*q), val(*k), val(*v), *heads, probs, &g)?;
                    acc(*q, gq)?;
                    acc(*k, gk)?;
                    acc(*v, gv)?;
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let rows = val(p).dim(0);
                        acc(p, g.slice_rows(start, rows)?)?;
                        start += rows;
                    }
                }
                Op::SliceRows { x, start } => {
                    let xv = val(*x);
                    let cols = xv.dim(1);
                    let mut gx = Tensor::zeros(xv.shape());
                    gx.data_mut()[start * cols..start * cols + g.numel()]
                        .copy_from_slice(g.data());
                    acc(*x, gx)?;
                }
                Op::GatherRows { table, ids } => {
                    let tv = val(*table);
                    let cols = tv.dim(1);
                    let mut gt = Tensor::zeros(tv.shape());
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut gt.data_mut()[id * cols..(id + 1) * cols];
                        for (d, &s) in dst.iter_mut().zip(g.row(r)) {
                            *d += s;
                        }
                    }
                    acc(*table, gt)?;
                }
                Op::Permute { x, index } => {
                    let xv = val(*x);
                    let mut gx = Tensor::zeros(xv.shape());
                    let dst = gx.data_mut();
                    for (o, &src) in index.iter().enumerate() {
                        dst[src] += g.data()[o];
                    }
                    acc(*x, gx)?;
                }
                Op::Reshape(x) => {
                    let s = val(*x).shape().to_vec();
                    acc(*x, g.reshape(&s)?)?;
                }
                Op::Sum(x) => {
                    let s = val(*x).shape().to_vec();
                    acc(*x, Tensor::full(&s, g.data()[0]))?;
                }
                Op::Mean(x) => {
                    let xv = val(*x);
                    let n = T::of(xv.numel() as f64);
                    acc(*x, Tensor::full(xv.shape(), g.data()[0] / n))?;
                }
            }
        }
        Ok(Grads { grads })
    }
}

fn col_sum<T: Scalar>(g: &Tensor<T>) -> Tensor<T> {
    let cols = *g.shape().last().unwrap_or(&1);
    let mut out = vec![T::zero(); cols];
    for row in g.data().chunks(cols) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    Tensor::new(&[cols], out).expect("column sum shape")
}

fn check_attention_shapes<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
) -> Result<(usize, usize, usize)> {
    let (nq, d) = q.dims2()?;
    let (nk, dk) = k.dims2()?;
    let (nv, dv) = v.dims2()?;
    if dk != d || dv != d || nv != nk {
        return Err(Error::shape(format!(
            "attention q{:?} k{:?} v{:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::config(format!("{heads} heads do not divide width {d}")));
    }
    if nq == 0 || nk == 0 {
        return Err(Error::shape("attention needs at least one query and one key"));
    }
    Ok((nq, nk, d))
}

fn attention_forward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
) -> Result<(Tensor<T>, Vec<T>)> {
    let (nq, nk, d) = check_attention_shapes(q, k, v, heads)?;
    let dh = d / heads;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let mut probs = vec![T::zero(); heads * nq * nk];
    let mut out = vec![T::zero(); nq * d];
    for h in 0..heads {
        let off = h * dh;
        let p = &mut probs[h * nq * nk..(h + 1) * nq * nk];
        T::gemm(
            nq,
            dh,
            nk,
            scale,
            &q.data()[off..],
            d as isize,
            1,
            &k.data()[off..],
            1,
            d as isize,
            T::zero(),
            p,
            nk as isize,
            1,
        );
        for row in p.chunks_mut(nk) {
            let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let mut s = T::zero();
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                s += *x;
            }
            for x in row.iter_mut() {
                *x /= s;
            }
        }
        T::gemm(
            nq,
            nk,
            dh,
            T::one(),
            p,
            nk as isize,
            1,
            &v.data()[off..],
            d as isize,
            1,
            T::zero(),
            &mut out[off..],
            d as isize,
            1,
        );
    }
    Ok((Tensor::new(&[nq, d], out)?, probs))
}

type Triple<T> = (Tensor<T>, Tensor<T>, Tensor<T>);

fn attention_backward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
    probs: &[T],
    g: &Tensor<T>,
) -> Result<Triple<T>> {
    let (nq, nk, d) = check_attention_shapes(q, k, v, heads)?;
    let dh = d / heads;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let mut gq = vec![T::zero(); nq * d];
    let mut gk = vec![T::zero(); nk * d];
    let mut gv = vec![T::zero(); nk * d];
    let mut dp = vec![T::zero(); nq * nk];
    for h in 0..heads {
        let off = h * dh;
        let p = &probs[h * nq * nk..(h + 1) * nq * nk];
        // dV = P^T dO
        T::gemm(
            nk,
            nq,
            dh,
            T::one(),
            p,
            1,
            nk as isize,
            &g.data()[off..],
            d as isize,
            1,
            T::zero(),
            &mut gv[off..],
            d as isize,
            1,
        );
        // dP = dO V^T
        T::gemm(
            nq,
            dh,
            nk,
            T::one(),
            &g.data()[off..],
            d as isize,
            1,
            &v.data()[off..],
            1,
            d as isize,
            T::zero(),
            &mut dp,
            nk as isize,
            1,
        );
        // dS = P * (dP - rowsum(dP * P)), folded with the logit scale
        for (dprow, prow) in dp.chunks_mut(nk).zip(p.chunks(nk)) {
            let dot: T = dprow.iter().zip(prow).map(|(&a, &b)| a * b).sum();
            for (x, &pp) in dprow.iter_mut().zip(prow) {
                *x = pp * (*x - dot) * scale;
            }
        }
        // dQ = dS K ; dK = dS^T Q
        T::gemm(
            nq,
            nk,
            dh,
            T::one(),
            &dp,
            nk as isize,
            1,
            &k.data()[off..],
            d as isize,
            1,
            T::zero(),
            &mut gq[off..],
            d as isize,
            1,
        );
        T::gemm(
            nk,
            nq,
            dh,
            T::one(),
            &dp,
            1,
            nk as isize,
            &q.data()[off..],
            d as isize,
            1,
            T::zero(),
            &mut gk[off..],
            d as isize,
            1,
        );
    }
    Ok((
        Tensor::new(&[nq, d], gq)?,
        Tensor::new(&[nk, d], gk)?,
        Tensor::new(&[nk, d], gv)?,
    ))
}
