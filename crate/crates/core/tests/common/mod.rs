//! Scalar-loop reference implementations. Everything here works on plain
//! `f64` slices in row-major order and shares no code with the library.
#![allow(dead_code)]

use proteus_core::nn::ParamStore;
use proteus_core::Scalar;

pub fn param<T: Scalar>(store: &ParamStore<T>, name: &str) -> Vec<f64> {
    let id = store.id(name).unwrap_or_else(|| panic!("no parameter {name}"));
    store.value(id).to_f64_vec()
}

/// `x [n, din] @ w [din, dout] + b`.
pub fn linear(x: &[f64], n: usize, din: usize, w: &[f64], b: Option<&[f64]>, dout: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * dout];
    for i in 0..n {
        for j in 0..dout {
            let mut s = b.map_or(0.0, |b| b[j]);
            for k in 0..din {
                s += x[i * din + k] * w[k * dout + j];
            }
            out[i * dout + j] = s;
        }
    }
    out
}

pub fn linear_named<T: Scalar>(
    store: &ParamStore<T>,
    prefix: &str,
    x: &[f64],
    n: usize,
    din: usize,
    dout: usize,
) -> Vec<f64> {
    let w = param(store, &format!("{prefix}.w"));
    let b = store.id(&format!("{prefix}.b")).map(|id| store.value(id).to_f64_vec());
    linear(x, n, din, &w, b.as_deref(), dout)
}

pub const LN_EPS: f64 = 1e-5;

pub fn normalize_rows(x: &[f64], n: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        for j in 0..d {
            out[i * d + j] = (row[j] - mean) / (var + LN_EPS).sqrt();
        }
    }
    out
}

pub fn layer_norm(x: &[f64], n: usize, d: usize, gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let y = normalize_rows(x, n, d);
    (0..n * d).map(|i| y[i] * gamma[i % d] + beta[i % d]).collect()
}

pub fn layer_norm_named<T: Scalar>(store: &ParamStore<T>, prefix: &str, x: &[f64], n: usize, d: usize) -> Vec<f64> {
    layer_norm(
        x,
        n,
        d,
        &param(store, &format!("{prefix}.gamma")),
        &param(store, &format!("{prefix}.beta")),
    )
}

/// `LN(x) * (1 + scale(c)) + shift(c)` with `c` a single row of width `dc`.
pub fn ada_layer_norm<T: Scalar>(
    store: &ParamStore<T>,
    prefix: &str,
    x: &[f64],
    n: usize,
    d: usize,
    cond: &[f64],
) -> Vec<f64> {
    let dc = cond.len();
    let scale = linear_named(store, &format!("{prefix}.scale"), cond, 1, dc, d);
    let shift = linear_named(store, &format!("{prefix}.shift"), cond, 1, dc, d);
    let y = normalize_rows(x, n, d);
    (0..n * d).map(|i| y[i] * (1.0 + scale[i % d]) + shift[i % d]).collect()
}

/// Softmax attention per head over already-projected `q [nq, d]`,
/// `k, v [nk, d]`.
pub fn attention_core(q: &[f64], k: &[f64], v: &[f64], nq: usize, nk: usize, d: usize, heads: usize) -> Vec<f64> {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; nq * d];
    for h in 0..heads {
        for i in 0..nq {
            let mut logits = vec![0.0; nk];
            for j in 0..nk {
                let mut s = 0.0;
                for c in 0..dh {
                    s += q[i * d + h * dh + c] * k[j * d + h * dh + c];
                }
                logits[j] = s * scale;
            }
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..dh {
                let mut s = 0.0;
                for j in 0..nk {
                    s += e[j] / z * v[j * d + h * dh + c];
                }
                out[i * d + h * dh + c] = s;
            }
        }
    }
    out
}

/// Multi-head attention with bias-free q/k/v/o projections named
/// `{prefix}.{q,k,v,o}.w`.
pub fn attention<T: Scalar>(
    store: &ParamStore<T>,
    prefix: &str,
    xq: &[f64],
    xkv: &[f64],
    nq: usize,
    nk: usize,
    d: usize,
    heads: usize,
) -> Vec<f64> {
    let q = linear(xq, nq, d, &param(store, &format!("{prefix}.q.w")), None, d);
    let k = linear(xkv, nk, d, &param(store, &format!("{prefix}.k.w")), None, d);
    let v = linear(xkv, nk, d, &param(store, &format!("{prefix}.v.w")), None, d);
    let a = attention_core(&q, &k, &v, nq, nk, d, heads);
    linear(&a, nq, d, &param(store, &format!("{prefix}.o.w")), None, d)
}

pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

pub fn feed_forward<T: Scalar>(store: &ParamStore<T>, prefix: &str, x: &[f64], n: usize, d: usize) -> Vec<f64> {
    let hidden = store.value(store.id(&format!("{prefix}.up.w")).unwrap()).shape()[1];
    let h: Vec<f64> = linear_named(store, &format!("{prefix}.up"), x, n, d, hidden)
        .into_iter()
        .map(gelu)
        .collect();
    linear_named(store, &format!("{prefix}.down"), &h, n, hidden, d)
}

pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// One query-former layer: pre-norm self-attention, cross-attention to the
/// visual tokens and feed-forward, each with a residual connection.
pub fn qformer_layer<T: Scalar>(
    store: &ParamStore<T>,
    prefix: &str,
    w: &[f64],
    visual: &[f64],
    n: usize,
    nv: usize,
    d: usize,
    heads: usize,
) -> Vec<f64> {
    let h = layer_norm_named(store, &format!("{prefix}.norm_sa"), w, n, d);
    let w = add(w, &attention(store, &format!("{prefix}.self_attn"), &h, &h, n, n, d, heads));
    let h = layer_norm_named(store, &format!("{prefix}.norm_ca"), &w, n, d);
    let w = add(&w, &attention(store, &format!("{prefix}.cross_attn"), &h, visual, n, nv, d, heads));
    let h = layer_norm_named(store, &format!("{prefix}.norm_ff"), &w, n, d);
    add(&w, &feed_forward(store, &format!("{prefix}.ffn"), &h, n, d))
}

/// Linear beta schedule on `[1e-4, 0.02]` stretched to `steps` and its
/// running product of `1 - beta`.
pub fn alpha_bar(steps: usize) -> Vec<f64> {
    let scale = 1000.0 / steps as f64;
    let mut prod = 1.0;
    (0..steps)
        .map(|t| {
            let frac = if steps == 1 { 0.0 } else { t as f64 / (steps - 1) as f64 };
            let beta = ((1e-4 + (0.02 - 1e-4) * frac) * scale).min(0.999);
            prod *= 1.0 - beta;
            prod
        })
        .collect()
}

pub fn forward_diffuse(z0: &[f64], eps: &[f64], alpha_bar: f64) -> Vec<f64> {
    z0.iter()
        .zip(eps)
        .map(|(z, e)| alpha_bar.sqrt() * z + (1.0 - alpha_bar).sqrt() * e)
        .collect()
}

pub fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
}

/// Per-clip standardized, sigmoid-squashed, masked flow magnitude. `mags`
/// holds one `[H*W]` magnitude plane per flow.
pub fn heatmap(mags: &[Vec<f64>], mask: &[f64], frames: usize, hw: usize) -> Vec<f64> {
    let mut vals = Vec::new();
    for f in 0..frames {
        let plane = &mags[f.min(mags.len() - 1)];
        for p in 0..hw {
            if mask[f * hw + p] > 0.5 {
                vals.push(plane[p]);
            }
        }
    }
    let mut out = vec![0.0; frames * hw];
    if vals.is_empty() || vals.iter().all(|&m| m < 1e-3) {
        return out;
    }
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
    for f in 0..frames {
        let plane = &mags[f.min(mags.len() - 1)];
        for p in 0..hw {
            if mask[f * hw + p] > 0.5 {
                let z = if std > 1e-3 { (plane[p] - mean) / std } else { 0.0 };
                out[f * hw + p] = 1.0 / (1.0 + (-z).exp());
            }
        }
    }
    out
}

/// Mean over `k x k` blocks of each `[H, W]` plane.
pub fn pool(x: &[f64], frames: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let (lh, lw) = (h / k, w / k);
    let mut out = vec![0.0; frames * lh * lw];
    for f in 0..frames {
        for y in 0..h {
            for xx in 0..w {
                out[(f * lh + y / k) * lw + xx / k] += x[(f * h + y) * w + xx] / (k * k) as f64;
            }
        }
    }
    out
}

/// `mean((1 + lambda * M'[f, y, x]) * loss[f, c, y, x])`.
pub fn weighted_loss(loss: &[f64], m: &[f64], f: usize, c: usize, hw: usize, lambda: f64) -> f64 {
    let mut s = 0.0;
    for fr in 0..f {
        for ch in 0..c {
            for p in 0..hw {
                s += (1.0 + lambda * m[fr * hw + p]) * loss[(fr * c + ch) * hw + p];
            }
        }
    }
    s / (f * c * hw) as f64
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Tolerance for agreement with the oracles, scaled by the magnitude of
/// the expected values.
pub fn tol<T: Scalar>(expected: &[f64]) -> f64 {
    let base = if T::DTYPE == proteus_core::DType::F32 { 1e-6 } else { 1e-10 };
    base * expected.iter().fold(1.0f64, |m, v| m.max(v.abs()))
}
