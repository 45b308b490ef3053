//! Toy identity encoders: a small text encoder and a two-branch visual
//! encoder (whole reference image plus face crop) fused by attention.

pub mod prompt;

use rand::Rng;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::image::{image_patches, resample_bilinear, PixelBox};
use crate::nn::{Ctx, Init, LayerNorm, Linear, ParamId, ParamStore, TransformerBlock};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use prompt::{decompose_prompt, PromptBundle};

/// Reference image `[3, h, w]` in `[0, 1]` with the face rectangle in its
/// own pixel coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceImage<T> {
    pub pixels: Tensor<T>,
    pub face_box: PixelBox,
}

impl<T: Scalar> ReferenceImage<T> {
    pub fn new(pixels: Tensor<T>, face_box: PixelBox) -> Result<Self> {
        let r = ReferenceImage { pixels, face_box };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        let (_, h, w) = crate::image::chw(&self.pixels)?;
        if self.face_box.area() == 0 {
            return Err(Error::shape("face box has zero area"));
        }
        if !self.face_box.fits_in(w, h) {
            return Err(Error::shape(format!(
                "face box {:?} outside {w}x{h} reference",
                self.face_box
            )));
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.pixels.dim(2)
    }

    pub fn height(&self) -> usize {
        self.pixels.dim(1)
    }

    /// Face area as a fraction of this image's area.
    pub fn face_fraction(&self) -> f64 {
        self.face_box.area() as f64 / (self.width() * self.height()) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TextConfig {
    pub d_model: usize,
    pub heads: usize,
    pub blocks: usize,
    pub max_len: usize,
}

#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub embed: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub norm: LayerNorm,
    pub config: TextConfig,
}

impl TextEncoder {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        prefix: &str,
        config: TextConfig,
    ) -> Self {
        let d = config.d_model;
        TextEncoder {
            embed: store.add(
                &format!("{prefix}.embed"),
                &[prompt::vocab_size(), d],
                Init::Normal(1.0),
                rng,
            ),
            pos: store.add(&format!("{prefix}.pos"), &[config.max_len, d], Init::Normal(0.5), rng),
            blocks: (0..config.blocks)
                .map(|i| {
                    TransformerBlock::new(store, rng, &format!("{prefix}.blocks.{i}"), d, config.heads, 2 * d)
                })
                .collect(),
            norm: LayerNorm::new(store, rng, &format!("{prefix}.norm"), d),
            config,
        }
    }

    /// `[n_tokens, d_model]` contextual embeddings.
    pub fn forward<T: Scalar>(&self, cx: &Ctx<'_, T>, tokens: &[usize]) -> Result<Var> {
        let vocab = prompt::vocab_size();
        if let Some(bad) = tokens.iter().position(|&t| t >= vocab) {
            return Err(Error::Parse {
                position: bad,
                message: format!("token id {} outside the {vocab}-word vocabulary", tokens[bad]),
            });
        }
        if tokens.is_empty() || tokens.len() > self.config.max_len {
            return Err(Error::shape(format!(
                "text length {} outside 1..={}",
                tokens.len(),
                self.config.max_len
            )));
        }
        let t = cx.tape;
        let x = t.gather_rows(cx.p(self.embed), tokens)?;
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let pos = t.gather_rows(cx.p(self.pos), &positions)?;
        let mut x = t.add(x, pos)?;
        for b in &self.blocks {
            x = b.forward(cx, x)?;
        }
        self.norm.forward(cx, x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VisualConfig {
    pub d_model: usize,
    pub heads: usize,
    /// Side of the square the whole reference is resampled to.
    pub global_size: usize,
    /// Side of the square the face crop is resampled to.
    pub face_size: usize,
    pub patch: usize,
    pub fusion_layers: usize,
}

impl VisualConfig {
    pub fn tokens(&self) -> usize {
        (self.global_size / self.patch).pow(2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.global_size % self.patch != 0 || self.face_size % self.patch != 0 {
            return Err(Error::config("visual sizes must be multiples of the patch size"));
        }
        if self.global_size != self.face_size {
            return Err(Error::config(
                "global and face branches must yield the same token count",
            ));
        }
        Ok(())
    }
}

/// One patch-embedding branch: linear patch projection, learned positions
/// and a transformer block.
#[derive(Debug, Clone)]
pub struct Branch {
    pub embed: Linear,
    pub pos: ParamId,
    pub block: TransformerBlock,
}

impl Branch {
    fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        prefix: &str,
        c: &VisualConfig,
    ) -> Self {
        let d = c.d_model;
        Branch {
            embed: Linear::new(store, rng, &format!("{prefix}.embed"), 3 * c.patch * c.patch, d, true),
            pos: store.add(&format!("{prefix}.pos"), &[c.tokens(), d], Init::Normal(0.5), rng),
            block: TransformerBlock::new(store, rng, &format!("{prefix}.block"), d, c.heads, 2 * d),
        }
    }

    fn forward<T: Scalar>(&self, cx: &Ctx<'_, T>, patches: Tensor<T>) -> Result<Var> {
        let x = cx.input(patches);
        let x = self.embed.forward(cx, x)?;
        let x = cx.tape.add(x, cx.p(self.pos))?;
        self.block.forward(cx, x)
    }
}

/// Fused visual identity `[n_v, d_model]`.
#[derive(Debug, Clone)]
pub struct VisualEncoder {
    pub global: Branch,
    pub face: Branch,
    pub fusion: Vec<TransformerBlock>,
    pub norm: LayerNorm,
    pub config: VisualConfig,
}

impl VisualEncoder {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        prefix: &str,
        config: VisualConfig,
    ) -> Result<Self> {
        config.validate()?;
        Ok(VisualEncoder {
            global: Branch::new(store, rng, &format!("{prefix}.global"), &config),
            face: Branch::new(store, rng, &format!("{prefix}.face"), &config),
            fusion: (0..config.fusion_layers)
                .map(|i| {
                    TransformerBlock::new(
                        store,
                        rng,
                        &format!("{prefix}.fusion.{i}"),
                        config.d_model,
                        config.heads,
                        2 * config.d_model,
                    )
                })
                .collect(),
            norm: LayerNorm::new(store, rng, &format!("{prefix}.norm"), config.d_model),
            config,
        })
    }

    /// Patches of the whole reference, resampled to a fixed square.
    pub fn global_patches<T: Scalar>(&self, r: &ReferenceImage<T>) -> Result<Tensor<T>> {
        let s = self.config.global_size;
        let full = PixelBox {
            x: 0,
            y: 0,
            w: r.width(),
            h: r.height(),
        };
        image_patches(&resample_bilinear(&r.pixels, full, s, s)?, self.config.patch)
    }

    /// Patches of the face crop, bilinearly resampled to a fixed square.
    pub fn face_patches<T: Scalar>(&self, r: &ReferenceImage<T>) -> Result<Tensor<T>> {
        r.validate()?;
        let s = self.config.face_size;
        image_patches(&resample_bilinear(&r.pixels, r.face_box, s, s)?, self.config.patch)
    }

    pub fn global_tokens<T: Scalar>(&self, cx: &Ctx<'_, T>, r: &ReferenceImage<T>) -> Result<Var> {
        self.global.forward(cx, self.global_patches(r)?)
    }

    pub fn face_tokens<T: Scalar>(&self, cx: &Ctx<'_, T>, r: &ReferenceImage<T>) -> Result<Var> {
        self.face.forward(cx, self.face_patches(r)?)
    }

    /// Attention over both token sets; output row `i` sums fused rows `i`
    /// and `n_v + i` so every row mixes both branches.
    pub fn fuse<T: Scalar>(&self, cx: &Ctx<'_, T>, global: Var, face: Var) -> Result<Var> {
        let t = cx.tape;
        let n = self.config.tokens();
        let mut x = t.concat_rows(&[global, face])?;
        for b in &self.fusion {
            x = b.forward(cx, x)?;
        }
        let a = t.slice_rows(x, 0, n)?;
        let b = t.slice_rows(x, n, n)?;
        self.norm.forward(cx, t.add(a, b)?)
    }

    pub fn forward<T: Scalar>(&self, cx: &Ctx<'_, T>, r: &ReferenceImage<T>) -> Result<Var> {
        let g = self.global_tokens(cx, r)?;
        let f = self.face_tokens(cx, r)?;
        self.fuse(cx, g, f)
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na * nb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn visual() -> (ParamStore<f64>, VisualEncoder) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let enc = VisualEncoder::new(
            &mut store,
            &mut rng,
            "vis",
            VisualConfig {
                d_model: 8,
                heads: 2,
                global_size: 8,
                face_size: 8,
                patch: 4,
                fusion_layers: 2,
            },
        )
        .unwrap();
        (store, enc)
    }

    fn reference(seed: u64) -> ReferenceImage<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let px = Tensor::from_fn(&[3, 12, 10], |_| rng.gen::<f64>());
        ReferenceImage::new(px, PixelBox { x: 2, y: 3, w: 5, h: 6 }).unwrap()
    }

    fn eval(store: &ParamStore<f64>, f: impl FnOnce(&Ctx<'_, f64>) -> Var) -> Tensor<f64> {
        let tape = Tape::new();
        let cx = Ctx::new(&tape, store);
        let v = f(&cx);
        let out = tape.value(v).clone();
        out
    }

    #[test]
    fn output_shape() {
        let (store, enc) = visual();
        let r = reference(1);
        let out = eval(&store, |cx| enc.forward(cx, &r).unwrap());
        assert_eq!(out.shape(), &[4, 8]);
        assert!(out.all_finite());
    }

    #[test]
    fn face_branch_ignores_pixels_outside_crop() {
        let (store, enc) = visual();
        let a = reference(1);
        let mut b = a.clone();
        let fb = b.face_box;
        for c in 0..3 {
            for y in 0..12 {
                for x in 0..10 {
                    let inside = x >= fb.x && x < fb.x + fb.w && y >= fb.y && y < fb.y + fb.h;
                    if !inside {
                        b.pixels.data_mut()[c * 120 + y * 10 + x] = 0.5;
                    }
                }
            }
        }
        let fa = eval(&store, |cx| enc.face_tokens(cx, &a).unwrap());
        let fbt = eval(&store, |cx| enc.face_tokens(cx, &b).unwrap());
        assert_eq!(fa, fbt);
        let ga = eval(&store, |cx| enc.global_tokens(cx, &a).unwrap());
        let gb = eval(&store, |cx| enc.global_tokens(cx, &b).unwrap());
        assert_ne!(ga, gb);
    }

    #[test]
    fn both_branches_contribute() {
        let (store, enc) = visual();
        let r = reference(2);
        let full = eval(&store, |cx| enc.forward(cx, &r).unwrap());
        let no_face = eval(&store, |cx| {
            let g = enc.global_tokens(cx, &r).unwrap();
            let f = cx.input(Tensor::zeros(&[4, 8]));
            enc.fuse(cx, g, f).unwrap()
        });
        let no_global = eval(&store, |cx| {
            let g = cx.input(Tensor::zeros(&[4, 8]));
            let f = enc.face_tokens(cx, &r).unwrap();
            enc.fuse(cx, g, f).unwrap()
        });
        assert!(full.sub(&no_face).unwrap().max_abs() > 1e-6);
        assert!(full.sub(&no_global).unwrap().max_abs() > 1e-6);
    }

    #[test]
    fn zero_area_face_box_is_rejected() {
        let px = Tensor::<f64>::zeros(&[3, 8, 8]);
        assert!(ReferenceImage::new(px.clone(), PixelBox { x: 1, y: 1, w: 0, h: 3 }).is_err());
        let (_, enc) = visual();
        let bad = ReferenceImage {
            pixels: px,
            face_box: PixelBox { x: 1, y: 1, w: 3, h: 0 },
        };
        assert!(enc.face_patches(&bad).is_err());
    }

    #[test]
    fn text_encoder_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::<f64>::new();
        let enc = TextEncoder::new(
            &mut store,
            &mut rng,
            "text",
            TextConfig {
                d_model: 8,
                heads: 2,
                blocks: 2,
                max_len: 12,
            },
        );
        let toks = prompt::tokenize("red square person , walks right , on grid").unwrap();
        let a = eval(&store, |cx| enc.forward(cx, &toks).unwrap());
        let b = eval(&store, |cx| enc.forward(cx, &toks).unwrap());
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[toks.len(), 8]);
        let mut swapped = toks.clone();
        swapped.swap(0, 1);
        let c = eval(&store, |cx| enc.forward(cx, &swapped).unwrap());
        assert!(a.sub(&c).unwrap().max_abs() > 1e-6);

        let tape = Tape::new();
        let cx = Ctx::new(&tape, &store);
        assert!(matches!(enc.forward(&cx, &[0, 999]), Err(Error::Parse { position: 1, .. })));
    }

    #[test]
    fn cosine_basics() {
        assert!((cosine(&[1.0, 2.0], &[2.0, 4.0]) - 1.0).abs() < 1e-12);
        assert!(cosine(&[1.0, 0.0], &[0.0, 1.0]).abs() < 1e-12);
        assert_eq!(cosine(&[0.0], &[1.0]), 0.0);
    }
}
