//! Motion-aware loss weighting: dense optical flow, body-masked motion
//! heatmaps, pooling to latent resolution and the reweighted loss.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::grayscale;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Coarsest pyramid level keeps both sides at least this large.
pub const PYRAMID_MIN: usize = 8;
pub const PYRAMID_LEVELS: usize = 3;
/// Lucas-Kanade window radius (13x13 window). Smaller windows leave
/// aperture errors on the smooth sprite textures.
pub const WINDOW_RADIUS: usize = 6;
pub const LK_ITERATIONS: usize = 8;
/// Masked clips whose every magnitude is below this are treated as static.
pub const STATIC_MAGNITUDE: f64 = 1e-3;

/// Per-pixel displacement from frame a to frame b, in pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Self {
        FlowField {
            width,
            height,
            u: vec![0.0; width * height],
            v: vec![0.0; width * height],
        }
    }

    pub fn magnitude(&self) -> Vec<f64> {
        self.u.iter().zip(&self.v).map(|(u, v)| u.hypot(*v)).collect()
    }

    /// Mean `(u, v)` over pixels where `mask > 0.5`; `None` for an empty mask.
    pub fn masked_mean(&self, mask: &[f64]) -> Option<(f64, f64)> {
        let mut n = 0usize;
        let (mut su, mut sv) = (0.0, 0.0);
        for i in 0..self.u.len() {
            if mask[i] > 0.5 {
                n += 1;
                su += self.u[i];
                sv += self.v[i];
            }
        }
        (n > 0).then(|| (su / n as f64, sv / n as f64))
    }
}

/// Gray plane with clamped bilinear sampling.
#[derive(Debug, Clone)]
struct Plane {
    w: usize,
    h: usize,
    d: Vec<f64>,
}

impl Plane {
    fn at(&self, x: usize, y: usize) -> f64 {
        self.d[y * self.w + x]
    }

    fn sample(&self, x: f64, y: f64) -> f64 {
        let x = x.clamp(0.0, (self.w - 1) as f64);
        let y = y.clamp(0.0, (self.h - 1) as f64);
        let (x0, y0) = (x.floor() as usize, y.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(self.w - 1), (y0 + 1).min(self.h - 1));
        let (fx, fy) = (x - x0 as f64, y - y0 as f64);
        let top = self.at(x0, y0) * (1.0 - fx) + self.at(x1, y0) * fx;
        let bot = self.at(x0, y1) * (1.0 - fx) + self.at(x1, y1) * fx;
        top * (1.0 - fy) + bot * fy
    }

    fn half(&self) -> Plane {
        let (w, h) = (self.w / 2, self.h / 2);
        let mut d = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let s = self.at(2 * x, 2 * y)
                    + self.at(2 * x + 1, 2 * y)
                    + self.at(2 * x, 2 * y + 1)
                    + self.at(2 * x + 1, 2 * y + 1);
                d.push(0.25 * s);
            }
        }
        Plane { w, h, d }
    }

    /// Central-difference gradients with one-sided edges.
    fn gradients(&self) -> (Vec<f64>, Vec<f64>) {
        let (w, h) = (self.w, self.h);
        let mut gx = vec![0.0; w * h];
        let mut gy = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let (xl, xr) = (x.saturating_sub(1), (x + 1).min(w - 1));
                let (yu, yd) = (y.saturating_sub(1), (y + 1).min(h - 1));
                gx[y * w + x] = (self.at(xr, y) - self.at(xl, y)) / (xr - xl).max(1) as f64;
                gy[y * w + x] = (self.at(x, yd) - self.at(x, yu)) / (yd - yu).max(1) as f64;
            }
        }
        (gx, gy)
    }
}

fn pyramid(p: Plane, levels: usize) -> Vec<Plane> {
    let mut out = vec![p];
    while out.len() < levels {
        let last = out.last().expect("non-empty");
        if last.w / 2 < PYRAMID_MIN || last.h / 2 < PYRAMID_MIN {
            break;
        }
        let next = last.half();
        out.push(next);
    }
    out
}

fn lk_level(a: &Plane, b: &Plane, u: &mut [f64], v: &mut [f64]) {
    let (w, h) = (a.w, a.h);
    let (gx, gy) = a.gradients();
    let r = WINDOW_RADIUS as isize;
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
            let mut win = Vec::with_capacity((2 * WINDOW_RADIUS + 1).pow(2));
            for dy in -r..=r {
                for dx in -r..=r {
                    let (xx, yy) = (x as isize + dx, y as isize + dy);
                    if xx < 0 || yy < 0 || xx >= w as isize || yy >= h as isize {
                        continue;
                    }
                    let j = yy as usize * w + xx as usize;
                    sxx += gx[j] * gx[j];
                    sxy += gx[j] * gy[j];
                    syy += gy[j] * gy[j];
                    win.push((xx as f64, yy as f64, j));
                }
            }
            let det = sxx * syy - sxy * sxy;
            let trace = sxx + syy;
            if trace <= 1e-9 || det <= 1e-6 * trace * trace {
                continue;
            }
            for _ in 0..LK_ITERATIONS {
                let (mut bx, mut by) = (0.0, 0.0);
                for &(xx, yy, j) in &win {
                    let it = b.sample(xx + u[i], yy + v[i]) - a.d[j];
                    bx += gx[j] * it;
                    by += gy[j] * it;
                }
                let du = -(syy * bx - sxy * by) / det;
                let dv = -(sxx * by - sxy * bx) / det;
                u[i] = (u[i] + du).clamp(-(w as f64), w as f64);
                v[i] = (v[i] + dv).clamp(-(h as f64), h as f64);
                if du.abs() + dv.abs() < 1e-4 {
                    break;
                }
            }
        }
    }
}

/// Coarse-to-fine iterative Lucas-Kanade flow between two `[C, H, W]`
/// frames (converted to gray).
pub fn dense_flow<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<FlowField> {
    a.check_same_shape(b)?;
    let (h, w) = (a.shape()[1], a.shape()[2]);
    if h < PYRAMID_MIN || w < PYRAMID_MIN {
        return Err(Error::shape(format!(
            "{w}x{h} frames are smaller than the {PYRAMID_MIN}-pixel pyramid minimum"
        )));
    }
    let pa = pyramid(Plane { w, h, d: grayscale(a)? }, PYRAMID_LEVELS);
    let pb = pyramid(Plane { w, h, d: grayscale(b)? }, PYRAMID_LEVELS);
    let top = pa.last().expect("non-empty");
    let mut u = vec![0.0; top.w * top.h];
    let mut v = vec![0.0; top.w * top.h];
    for lvl in (0..pa.len()).rev() {
        let (la, lb) = (&pa[lvl], &pb[lvl]);
        if u.len() != la.w * la.h {
            let (cw, ch) = (pa[lvl + 1].w, pa[lvl + 1].h);
            let mut nu = vec![0.0; la.w * la.h];
            let mut nv = vec![0.0; la.w * la.h];
            for y in 0..la.h {
                for x in 0..la.w {
                    let j = (y / 2).min(ch - 1) * cw + (x / 2).min(cw - 1);
                    nu[y * la.w + x] = 2.0 * u[j];
                    nv[y * la.w + x] = 2.0 * v[j];
                }
            }
            u = nu;
            v = nv;
        }
        lk_level(la, lb, &mut u, &mut v);
    }
    Ok(FlowField { width: w, height: h, u, v })
}

/// Flow between every consecutive pair of a `[F, C, H, W]` clip.
pub fn clip_flows<T: Scalar>(video: &Tensor<T>) -> Result<Vec<FlowField>> {
    let f = video.shape()[0];
    if video.rank() != 4 || f < 2 {
        return Err(Error::shape(format!("need a [F>=2, C, H, W] clip, got {:?}", video.shape())));
    }
    let frames: Vec<Tensor<T>> = (0..f).map(|i| frame(video, i)).collect();
    (0..f - 1)
        .into_par_iter()
        .map(|i| dense_flow(&frames[i], &frames[i + 1]))
        .collect()
}

/// Frame `i` of a `[F, C, H, W]` clip.
pub fn frame<T: Scalar>(video: &Tensor<T>, i: usize) -> Tensor<T> {
    let s = video.shape();
    let n = s[1] * s[2] * s[3];
    Tensor::new(&s[1..], video.data()[i * n..(i + 1) * n].to_vec()).expect("frame slice")
}

/// Heatmap `[F, H, W]`: flow magnitude standardized over masked pixels,
/// squashed by a sigmoid, then zeroed off the mask. Frame `i` uses the flow
/// from `i` to `i + 1`; the last frame reuses the last flow. A clip with no
/// masked motion maps to all zeros.
pub fn motion_heatmap(flows: &[FlowField], mask: &Tensor<f64>) -> Result<Tensor<f64>> {
    let [f, h, w] = mask.shape() else {
        return Err(Error::shape(format!("mask must be [F, H, W], got {:?}", mask.shape())));
    };
    let (f, h, w) = (*f, *h, *w);
    if flows.is_empty() || !(flows.len() == f || flows.len() + 1 == f) {
        return Err(Error::shape(format!("{} flows for {f} frames", flows.len())));
    }
    if flows.iter().any(|fl| fl.width != w || fl.height != h) {
        return Err(Error::shape("flow size differs from mask size"));
    }
    let n = h * w;
    let mut mag = Vec::with_capacity(f * n);
    for i in 0..f {
        mag.extend(flows[i.min(flows.len() - 1)].magnitude());
    }
    let m = mask.data();
    let masked: Vec<f64> = (0..f * n).filter(|&i| m[i] > 0.5).map(|i| mag[i]).collect();
    let mut out = vec![0.0; f * n];
    if masked.is_empty() || masked.iter().all(|&x| x < STATIC_MAGNITUDE) {
        return Tensor::new(&[f, h, w], out);
    }
    let mean = masked.iter().sum::<f64>() / masked.len() as f64;
    let var = masked.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / masked.len() as f64;
    let std = var.sqrt();
    for i in 0..f * n {
        if m[i] > 0.5 {
            let z = if std > STATIC_MAGNITUDE { (mag[i] - mean) / std } else { 0.0 };
            out[i] = 1.0 / (1.0 + (-z).exp());
        }
    }
    Tensor::new(&[f, h, w], out)
}

/// Latent-resolution loss weights `[F, h_lat, w_lat]` in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionWeightMap<T> {
    pub m_prime: Tensor<T>,
}

/// Mean pooling of `[F, H, W]` over `factor x factor` blocks.
pub fn downsample_to_latent<T: Scalar>(heatmap: &Tensor<T>, factor: usize) -> Result<MotionWeightMap<T>> {
    let [f, h, w] = heatmap.shape() else {
        return Err(Error::shape(format!("heatmap must be [F, H, W], got {:?}", heatmap.shape())));
    };
    let (f, h, w) = (*f, *h, *w);
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::config(format!("{h}x{w} heatmap is not divisible by {factor}")));
    }
    let (lh, lw) = (h / factor, w / factor);
    let d = heatmap.data();
    let inv = T::of(1.0 / (factor * factor) as f64);
    let mut out = Vec::with_capacity(f * lh * lw);
    for fr in 0..f {
        for y in 0..lh {
            for x in 0..lw {
                let mut s = T::zero();
                for dy in 0..factor {
                    for dx in 0..factor {
                        s = s + d[(fr * h + y * factor + dy) * w + x * factor + dx];
                    }
                }
                out.push(s * inv);
            }
        }
    }
    Ok(MotionWeightMap {
        m_prime: Tensor::new(&[f, lh, lw], out)?,
    })
}

impl<T: Scalar> MotionWeightMap<T> {
    /// `1 + lambda * M'` broadcast over the latent channels of `shape`
    /// (`[F, C, h, w]`). With `lambda = 0` every weight is exactly one.
    pub fn loss_weights(&self, shape: &[usize], lambda: f64) -> Result<Tensor<T>> {
        check_lambda(lambda)?;
        let [f, c, h, w] = shape else {
            return Err(Error::shape(format!("latent shape must be rank 4, got {shape:?}")));
        };
        if self.m_prime.shape() != [*f, *h, *w] {
            return Err(Error::shape(format!(
                "weight map {:?} does not broadcast to {shape:?}",
                self.m_prime.shape()
            )));
        }
        let l = T::of(lambda);
        let m = self.m_prime.data();
        let n = h * w;
        let mut out = Vec::with_capacity(f * c * n);
        for fr in 0..*f {
            for _ in 0..*c {
                out.extend(m[fr * n..(fr + 1) * n].iter().map(|&x| T::one() + l * x));
            }
        }
        Tensor::new(shape, out)
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::config(format!("motion weight lambda must be >= 0, got {lambda}")));
    }
    Ok(())
}

/// `mean((1 + lambda * M') * loss)`.
pub fn weighted_loss<T: Scalar>(per_elem: &Tensor<T>, m: &MotionWeightMap<T>, lambda: f64) -> Result<T> {
    let w = m.loss_weights(per_elem.shape(), lambda)?;
    Ok(per_elem.zip_map(&w, |l, w| l * w)?.mean())
}
