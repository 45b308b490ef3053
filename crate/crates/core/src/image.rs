//! Small image helpers shared by the encoders, flow and the data generator.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Axis-aligned pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl PixelBox {
    pub fn area(&self) -> usize {
        self.w * self.h
    }

    pub fn fits_in(&self, width: usize, height: usize) -> bool {
        self.x + self.w <= width && self.y + self.h <= height
    }
}

/// Bilinear resample of the `region` of a `[C, H, W]` image to `[C, out_h, out_w]`.
///
/// Sample positions are pixel centers and are clamped to the region, so no
/// pixel outside `region` ever contributes.
pub fn resample_bilinear<T: Scalar>(
    img: &Tensor<T>,
    region: PixelBox,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor<T>> {
    let (c, h, w) = chw(img)?;
    if region.area() == 0 {
        return Err(Error::shape("cannot resample an empty region"));
    }
    if !region.fits_in(w, h) {
        return Err(Error::shape(format!("region {region:?} outside {w}x{h} image")));
    }
    let mut out = Vec::with_capacity(c * out_h * out_w);
    let lo_x = region.x as f64;
    let hi_x = (region.x + region.w - 1) as f64;
    let lo_y = region.y as f64;
    let hi_y = (region.y + region.h - 1) as f64;
    let data = img.data();
    for ch in 0..c {
        let plane = &data[ch * h * w..(ch + 1) * h * w];
        for oy in 0..out_h {
            let sy = (lo_y + (oy as f64 + 0.5) * region.h as f64 / out_h as f64 - 0.5).clamp(lo_y, hi_y);
            let y0 = sy.floor() as usize;
            let y1 = (y0 + 1).min(hi_y as usize);
            let fy = sy - y0 as f64;
            for ox in 0..out_w {
                let sx =
                    (lo_x + (ox as f64 + 0.5) * region.w as f64 / out_w as f64 - 0.5).clamp(lo_x, hi_x);
                let x0 = sx.floor() as usize;
                let x1 = (x0 + 1).min(hi_x as usize);
                let fx = sx - x0 as f64;
                let p = |yy: usize, xx: usize| plane[yy * w + xx].as_f64();
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bot = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                out.push(T::of(top * (1.0 - fy) + bot * fy));
            }
        }
    }
    Tensor::new(&[c, out_h, out_w], out)
}

pub fn chw<T: Scalar>(img: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match img.shape() {
        [c, h, w] => Ok((*c, *h, *w)),
        s => Err(Error::shape(format!("expected [C, H, W] image, got {s:?}"))),
    }
}

/// Luma of an RGB `[3, H, W]` image (or passthrough for one channel).
pub fn grayscale<T: Scalar>(img: &Tensor<T>) -> Result<Vec<f64>> {
    let (c, h, w) = chw(img)?;
    let d = img.data();
    let n = h * w;
    match c {
        1 => Ok(d.iter().map(|v| v.as_f64()).collect()),
        3 => Ok((0..n)
            .map(|i| 0.299 * d[i].as_f64() + 0.587 * d[n + i].as_f64() + 0.114 * d[2 * n + i].as_f64())
            .collect()),
        _ => Err(Error::shape(format!("cannot convert {c} channels to gray"))),
    }
}

/// Non-overlapping `p x p` patches of a `[C, H, W]` image as rows of
/// `C * p * p` values, raster order over patches.
pub fn image_patches<T: Scalar>(img: &Tensor<T>, p: usize) -> Result<Tensor<T>> {
    let (c, h, w) = chw(img)?;
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::config(format!("{h}x{w} image is not divisible into {p}-pixel patches")));
    }
    let (gh, gw) = (h / p, w / p);
    let d = img.data();
    let mut out = Vec::with_capacity(c * h * w);
    for py in 0..gh {
        for px in 0..gw {
            for ch in 0..c {
                for dy in 0..p {
                    for dx in 0..p {
                        out.push(d[ch * h * w + (py * p + dy) * w + px * p + dx]);
                    }
                }
            }
        }
    }
    Tensor::new(&[gh * gw, c * p * p], out)
}

/// Binary 8-bit PGM (`P5`) encoding of values in `[0, 1]`.
pub fn encode_pgm(values: &[f64], width: usize, height: usize) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(
        values
            .iter()
            .take(width * height)
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    out
}
