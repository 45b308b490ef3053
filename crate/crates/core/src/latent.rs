//! Fixed space-to-channel "autoencoder" between pixel video and latents,
//! plus the token patchify used by the denoiser.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Spatial downsampling of the toy latent.
pub const LATENT_FACTOR: usize = 8;

fn dims4<T: Scalar>(x: &Tensor<T>, what: &str) -> Result<(usize, usize, usize, usize)> {
    match x.shape() {
        [f, c, h, w] => Ok((*f, *c, *h, *w)),
        s => Err(Error::shape(format!("{what} must be [F, C, H, W], got {s:?}"))),
    }
}

/// `[F, C, H, W]` -> `[F, C*f*f, H/f, W/f]`; channel index is
/// `(c * f + dy) * f + dx`.
pub fn space_to_channel<T: Scalar>(x: &Tensor<T>, f: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = dims4(x, "video")?;
    if f == 0 || h % f != 0 || w % f != 0 {
        return Err(Error::config(format!("{h}x{w} frames are not divisible by {f}")));
    }
    let (lh, lw) = (h / f, w / f);
    let cc = c * f * f;
    let d = x.data();
    let mut out = vec![T::zero(); x.numel()];
    for fr in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let oc = (ch * f + y % f) * f + xx % f;
                    let o = ((fr * cc + oc) * lh + y / f) * lw + xx / f;
                    out[o] = d[((fr * c + ch) * h + y) * w + xx];
                }
            }
        }
    }
    Tensor::new(&[n, cc, lh, lw], out)
}

/// Inverse of [`space_to_channel`].
pub fn channel_to_space<T: Scalar>(z: &Tensor<T>, f: usize) -> Result<Tensor<T>> {
    let (n, cc, lh, lw) = dims4(z, "latent")?;
    if f == 0 || cc % (f * f) != 0 {
        return Err(Error::config(format!("{cc} channels cannot unfold by {f}")));
    }
    let (c, h, w) = (cc / (f * f), lh * f, lw * f);
    let d = z.data();
    let mut out = vec![T::zero(); z.numel()];
    for fr in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let ic = (ch * f + y % f) * f + xx % f;
                    out[((fr * c + ch) * h + y) * w + xx] = d[((fr * cc + ic) * lh + y / f) * lw + xx / f];
                }
            }
        }
    }
    Tensor::new(&[n, c, h, w], out)
}

/// Pixels in `[0, 1]` to latents in `[-1, 1]`.
pub fn encode_video<T: Scalar>(video: &Tensor<T>) -> Result<Tensor<T>> {
    let two = T::of(2.0);
    space_to_channel(&video.map(|v| two * v - T::one()), LATENT_FACTOR)
}

/// Latents back to pixels, clamped to `[0, 1]`.
pub fn decode_video<T: Scalar>(z: &Tensor<T>) -> Result<Tensor<T>> {
    let half = T::of(0.5);
    let x = channel_to_space(z, LATENT_FACTOR)?;
    Ok(x.map(|v| ((v + T::one()) * half).max(T::zero()).min(T::one())))
}

/// Index map taking a `[F, C, H, W]` latent to tokens `[F * (H/p) * (W/p), C*p*p]`
/// (frame-major, then raster order); token feature index is `(c * p + dy) * p + dx`.
/// `out[i] = latent[index[i]]`.
pub fn patch_index(shape: &[usize], p: usize) -> Result<Vec<usize>> {
    let [f, c, h, w] = shape else {
        return Err(Error::shape(format!("latent must be rank 4, got {shape:?}")));
    };
    let (f, c, h, w) = (*f, *c, *h, *w);
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::config(format!("{h}x{w} latent is not divisible into {p}-patches")));
    }
    let mut idx = Vec::with_capacity(f * c * h * w);
    for fr in 0..f {
        for py in 0..h / p {
            for px in 0..w / p {
                for ch in 0..c {
                    for dy in 0..p {
                        for dx in 0..p {
                            idx.push(((fr * c + ch) * h + py * p + dy) * w + px * p + dx);
                        }
                    }
                }
            }
        }
    }
    Ok(idx)
}

/// Inverse permutation: `latent[j] = tokens[inverse[j]]`.
pub fn unpatch_index(shape: &[usize], p: usize) -> Result<Vec<usize>> {
    let fwd = patch_index(shape, p)?;
    let mut inv = vec![0; fwd.len()];
    for (i, &j) in fwd.iter().enumerate() {
        inv[j] = i;
    }
    Ok(inv)
}

pub fn patchify<T: Scalar>(z: &Tensor<T>, p: usize) -> Result<Tensor<T>> {
    let idx = patch_index(z.shape(), p)?;
    let (f, c, h, w) = dims4(z, "latent")?;
    let d = z.data();
    Tensor::new(
        &[f * (h / p) * (w / p), c * p * p],
        idx.iter().map(|&i| d[i]).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn space_to_channel_round_trips() {
        let x = Tensor::<f64>::from_fn(&[2, 3, 16, 24], |i| i as f64);
        let z = space_to_channel(&x, 8).unwrap();
        assert_eq!(z.shape(), &[2, 192, 2, 3]);
        assert_eq!(channel_to_space(&z, 8).unwrap(), x);
    }

    #[test]
    fn codec_maps_unit_range() {
        let x = Tensor::<f32>::from_fn(&[1, 3, 8, 8], |i| (i % 5) as f32 / 4.0);
        let z = encode_video(&x).unwrap();
        assert!(z.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(decode_video(&z).unwrap(), x);
    }

    #[test]
    fn patch_counts() {
        let z = Tensor::<f64>::zeros(&[1, 1, 8, 8]);
        assert_eq!(patchify(&z, 4).unwrap().shape(), &[4, 16]);
        assert!(patchify(&Tensor::<f64>::zeros(&[1, 1, 6, 8]), 4).is_err());
    }

    #[test]
    fn unpatch_inverts_patch() {
        let shape = [2, 3, 4, 6];
        let z = Tensor::<f64>::from_fn(&shape, |i| i as f64);
        let tokens = patchify(&z, 2).unwrap();
        let inv = unpatch_index(&shape, 2).unwrap();
        let back: Vec<f64> = inv.iter().map(|&i| tokens.data()[i]).collect();
        assert_eq!(back, z.data());
    }
}
