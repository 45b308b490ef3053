//! Deterministic sprite-video corpus: textured identities performing
//! scripted actions over grayscale backgrounds, with masks, heatmaps,
//! reference crops and matching prompts.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::aml::{clip_flows, motion_heatmap};
use crate::error::{Error, Result};
use crate::identity::prompt::{Action, PromptBundle, PromptSpec, BACKGROUNDS, COLORS, SHAPES};
use crate::identity::ReferenceImage;
use crate::image::PixelBox;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const FRAME_HEIGHT: usize = 32;
pub const FRAME_WIDTH: usize = 48;
pub const DEFAULT_FRAMES: usize = 9;
pub const SPRITE_SIZES: [usize; 4] = [14, 16, 18, 20];
pub const DEFAULT_FACE_AREA_MIN: f64 = 0.06;
/// Pixels of context kept around the sprite in the reference crop.
pub const REFERENCE_MARGIN: usize = 2;
/// Minimum channel spread for a pixel to count as sprite rather than
/// (grayscale) background.
pub const CHROMA_THRESHOLD: f64 = 0.12;

pub const RGB: [[f64; 3]; 8] = [
    [0.90, 0.15, 0.15],
    [0.15, 0.80, 0.20],
    [0.20, 0.30, 0.95],
    [0.95, 0.90, 0.15],
    [0.98, 0.55, 0.10],
    [0.60, 0.20, 0.85],
    [0.10, 0.85, 0.90],
    [0.95, 0.20, 0.75],
];

/// Sinusoidal texture `0.5 + 0.5 sin(fx x + fy y + phase)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Wave {
    pub fx: f64,
    pub fy: f64,
    pub phase: f64,
}

impl Wave {
    fn random<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> Self {
        let mut f = || rng.gen_range(lo..hi) * if rng.gen::<bool>() { 1.0 } else { -1.0 };
        let (fx, fy) = (f(), f());
        Wave {
            fx,
            fy,
            phase: rng.gen_range(0.0..2.0 * PI),
        }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        0.5 + 0.5 * (self.fx * x + self.fy * y + self.phase).sin()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpriteIdentity {
    pub id: usize,
    pub shape: usize,
    pub color: usize,
    pub size: usize,
    pub body: Wave,
    pub face: [Wave; 2],
}

impl SpriteIdentity {
    pub fn face_side(&self) -> usize {
        (self.size as f64 * 5.0 / 8.0).round() as usize
    }

    /// Vertical offset of the face center from the sprite center.
    pub fn face_offset(&self) -> usize {
        if SHAPES[self.shape] == "triangle" {
            self.size / 8
        } else {
            0
        }
    }

    fn inside_body(&self, rx: f64, ry: f64) -> bool {
        let h = self.size as f64 / 2.0;
        match SHAPES[self.shape] {
            "square" => (-h..h).contains(&rx) && (-h..h).contains(&ry),
            "circle" => rx * rx + ry * ry < h * h,
            _ => (-h..h).contains(&ry) && rx.abs() < (ry + h) / 2.0,
        }
    }

    fn inside_face(&self, rx: f64, ry: f64) -> bool {
        let f = self.face_side() as f64 / 2.0;
        let ry = ry - self.face_offset() as f64;
        (-f..f).contains(&rx) && (-f..f).contains(&ry)
    }

    fn face_rgb(&self, rx: f64, ry: f64) -> [f64; 3] {
        let p = self.face[0].at(rx, ry) * self.face[1].at(rx, ry);
        RGB[self.color].map(|c| 0.1 + 0.85 * (p * 0.95 + (1.0 - p) * c * 0.35))
    }

    fn body_rgb(&self, rx: f64, ry: f64) -> [f64; 3] {
        let t = 0.5 + 0.5 * self.body.at(rx, ry);
        RGB[self.color].map(|c| c * t)
    }
}

/// Identities come in pairs that share colour and shape but not texture,
/// so the prompt alone cannot tell them apart.
pub fn make_identities(n: usize, seed: u64) -> Vec<SpriteIdentity> {
    (0..n)
        .map(|id| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(1 + id as u64);
            let pair = id / 2;
            SpriteIdentity {
                id,
                color: pair % COLORS.len(),
                shape: pair % SHAPES.len(),
                size: SPRITE_SIZES[rng.gen_range(0..SPRITE_SIZES.len())],
                body: Wave::random(&mut rng, 0.5, 1.1),
                face: [Wave::random(&mut rng, 0.6, 1.2), Wave::random(&mut rng, 0.6, 1.2)],
            }
        })
        .collect()
}

pub fn background_value(background: usize, x: usize, y: usize) -> f64 {
    match BACKGROUNDS[background] {
        "grid" => {
            if x % 8 == 0 || y % 8 == 0 {
                0.3
            } else {
                0.6
            }
        }
        "stripes" => {
            if (y / 3) % 2 == 0 {
                0.45
            } else {
                0.65
            }
        }
        _ => 0.5,
    }
}

/// Sprite top-left corner and rotation per frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub x: i64,
    pub y: i64,
    pub angle: f64,
}

/// Scripted trajectory; every pose keeps the sprite inside the frame.
pub fn trajectory<R: Rng + ?Sized>(action: Action, size: usize, frames: usize, rng: &mut R) -> Vec<Pose> {
    let (w, h, s) = (FRAME_WIDTH as i64, FRAME_HEIGHT as i64, size as i64);
    let span = (frames - 1) as i64;
    let speed = |room: i64, max: i64| if span == 0 { 0 } else { (room / span).min(max) };
    let pose = |x, y| Pose { x, y, angle: 0.0 };
    match action {
        Action::WalkRight | Action::WalkLeft => {
            let v = speed(w - s, 2);
            let x0 = rng.gen_range(0..=w - s - v * span);
            let y = rng.gen_range(0..=h - s);
            (0..frames as i64)
                .map(|i| {
                    let x = if action == Action::WalkRight { x0 + v * i } else { x0 + v * (span - i) };
                    pose(x, y)
                })
                .collect()
        }
        Action::WalkUp => {
            let v = speed(h - s, 1);
            let x = rng.gen_range(0..=w - s);
            let y0 = rng.gen_range(v * span..=h - s);
            (0..frames as i64).map(|i| pose(x, y0 - v * i)).collect()
        }
        Action::Bounce => {
            let amp = 4.min(h - s);
            let x = rng.gen_range(0..=w - s);
            let y0 = rng.gen_range(amp..=h - s);
            (0..frames)
                .map(|i| {
                    let lift = (amp as f64 * (PI * i as f64 / 4.0).sin().abs()).round() as i64;
                    pose(x, y0 - lift)
                })
                .collect()
        }
        Action::Spin | Action::Stay => {
            let x = rng.gen_range(0..=w - s);
            let y = rng.gen_range(0..=h - s);
            (0..frames)
                .map(|i| Pose {
                    x,
                    y,
                    angle: if action == Action::Spin { i as f64 * PI / 8.0 } else { 0.0 },
                })
                .collect()
        }
    }
}

/// One rendered frame `[3, H, W]` and its body mask `[H, W]`.
pub fn render_frame(sprite: &SpriteIdentity, background: usize, pose: Pose) -> (Vec<f64>, Vec<f64>) {
    let (w, h) = (FRAME_WIDTH, FRAME_HEIGHT);
    let n = w * h;
    let mut rgb = vec![0.0; 3 * n];
    let mut mask = vec![0.0; n];
    let half = sprite.size as f64 / 2.0;
    let (cx, cy) = (pose.x as f64 + half, pose.y as f64 + half);
    let (sin, cos) = pose.angle.sin_cos();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let (lx, ly) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            let (rx, ry) = if pose.angle == 0.0 {
                (lx, ly)
            } else {
                (cos * lx + sin * ly, -sin * lx + cos * ly)
            };
            let px = if sprite.inside_face(rx, ry) {
                Some(sprite.face_rgb(rx, ry))
            } else if sprite.inside_body(rx, ry) {
                Some(sprite.body_rgb(rx, ry))
            } else {
                None
            };
            match px {
                Some(c) => {
                    mask[i] = 1.0;
                    for k in 0..3 {
                        rgb[k * n + i] = c[k];
                    }
                }
                None => {
                    let g = background_value(background, x, y);
                    for k in 0..3 {
                        rgb[k * n + i] = g;
                    }
                }
            }
        }
    }
    (rgb, mask)
}

/// Face rectangle in frame coordinates for an unrotated pose.
pub fn face_box_at(sprite: &SpriteIdentity, pose: Pose) -> PixelBox {
    let f = sprite.face_side();
    let off = (sprite.size - f) / 2;
    PixelBox {
        x: (pose.x + off as i64) as usize,
        y: (pose.y + off as i64 + sprite.face_offset() as i64) as usize,
        w: f,
        h: f,
    }
}

/// Face rectangle implied by a sprite bounding box and shape.
pub fn face_box_in(bbox: PixelBox, shape: usize) -> PixelBox {
    let size = bbox.w.max(bbox.h);
    let f = ((size as f64 * 5.0 / 8.0).round() as usize).min(bbox.w).min(bbox.h).max(1);
    let dy = if SHAPES[shape] == "triangle" { size / 8 } else { 0 };
    // The sprite square shares the box's bottom edge; a triangle's apex row
    // can render empty.
    let top = (bbox.y + bbox.h).saturating_sub(size);
    let x = bbox.x + (bbox.w - f) / 2;
    let y = (top + (size - f) / 2 + dy).clamp(bbox.y, bbox.y + bbox.h - f);
    PixelBox { x, y, w: f, h: f }
}

/// Bounding box of mask pixels `> 0.5` in a `[H, W]` plane.
pub fn mask_bbox(mask: &[f64], width: usize, height: usize) -> Option<PixelBox> {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..height {
        for x in 0..width {
            if mask[y * width + x] > 0.5 {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
            }
        }
    }
    (x0 != usize::MAX).then(|| PixelBox {
        x: x0,
        y: y0,
        w: x1 - x0 + 1,
        h: y1 - y0 + 1,
    })
}

/// Sprite detector for generated frames: pixels whose colour channels
/// spread by more than [`CHROMA_THRESHOLD`].
pub fn chroma_mask<T: Scalar>(frame: &Tensor<T>) -> Vec<f64> {
    let n = frame.shape()[1] * frame.shape()[2];
    let d = frame.data();
    (0..n)
        .map(|i| {
            let c = [d[i], d[n + i], d[2 * n + i]].map(|v| v.as_f64());
            let spread = c.iter().cloned().fold(f64::MIN, f64::max) - c.iter().cloned().fold(f64::MAX, f64::min);
            (spread > CHROMA_THRESHOLD) as u8 as f64
        })
        .collect()
}

/// Crop of a `[C, H, W]` image.
pub fn crop<T: Scalar>(img: &Tensor<T>, b: PixelBox) -> Result<Tensor<T>> {
    let (c, h, w) = crate::image::chw(img)?;
    if !b.fits_in(w, h) || b.area() == 0 {
        return Err(Error::shape(format!("crop {b:?} outside {w}x{h}")));
    }
    let d = img.data();
    let mut out = Vec::with_capacity(c * b.area());
    for ch in 0..c {
        for y in b.y..b.y + b.h {
            out.extend_from_slice(&d[ch * h * w + y * w + b.x..ch * h * w + y * w + b.x + b.w]);
        }
    }
    Tensor::new(&[c, b.h, b.w], out)
}

/// Sprite bounding box grown by the margin, clamped to the frame.
pub fn reference_region(bbox: PixelBox, width: usize, height: usize) -> PixelBox {
    let x = bbox.x.saturating_sub(REFERENCE_MARGIN);
    let y = bbox.y.saturating_sub(REFERENCE_MARGIN);
    let x1 = (bbox.x + bbox.w + REFERENCE_MARGIN).min(width);
    let y1 = (bbox.y + bbox.h + REFERENCE_MARGIN).min(height);
    PixelBox { x, y, w: x1 - x, h: y1 - y }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipMeta {
    pub identity: usize,
    pub clip: usize,
    pub action: Action,
    pub background: usize,
    /// Face rectangle in frame-0 coordinates.
    pub face_box: PixelBox,
    /// Reference crop rectangle in frame-0 coordinates.
    pub ref_box: PixelBox,
    pub frame_width: usize,
    pub frame_height: usize,
    pub seed: u64,
}

impl ClipMeta {
    pub fn face_fraction(&self) -> f64 {
        self.face_box.area() as f64 / (self.frame_width * self.frame_height) as f64
    }

    pub fn to_text(&self) -> String {
        let b = |p: PixelBox| format!("{},{},{},{}", p.x, p.y, p.w, p.h);
        format!(
            "identity = {}\nclip = {}\naction = {}\nbackground = {}\nface_box = {}\nref_box = {}\nframe_size = {},{}\nface_fraction = {:.6}\nseed = {}\n",
            self.identity,
            self.clip,
            self.action.name(),
            BACKGROUNDS[self.background],
            b(self.face_box),
            b(self.ref_box),
            self.frame_width,
            self.frame_height,
            self.face_fraction(),
            self.seed
        )
    }

    pub fn parse(text: &str) -> Result<Self> {
        let kv = parse_key_values(text)?;
        let get = |k: &str| kv.get(k).ok_or_else(|| Error::Format(format!("meta is missing {k:?}")));
        let num = |k: &str| -> Result<u64> {
            get(k)?.parse().map_err(|_| Error::Format(format!("meta {k:?} is not a number")))
        };
        let nums = |k: &str| -> Result<Vec<usize>> {
            get(k)?
                .split(',')
                .map(|s| s.trim().parse().map_err(|_| Error::Format(format!("meta {k:?} is malformed"))))
                .collect()
        };
        let pbox = |k: &str| -> Result<PixelBox> {
            match nums(k)?.as_slice() {
                [x, y, w, h] => Ok(PixelBox { x: *x, y: *y, w: *w, h: *h }),
                _ => Err(Error::Format(format!("meta {k:?} needs four numbers"))),
            }
        };
        let size = nums("frame_size")?;
        if size.len() != 2 {
            return Err(Error::Format("frame_size needs two numbers".into()));
        }
        let action = Action::from_name(get("action")?)
            .ok_or_else(|| Error::Format(format!("unknown action {:?}", get("action").unwrap())))?;
        let background = BACKGROUNDS
            .iter()
            .position(|b| b == get("background").unwrap())
            .ok_or_else(|| Error::Format("unknown background".into()))?;
        Ok(ClipMeta {
            identity: num("identity")? as usize,
            clip: num("clip")? as usize,
            action,
            background,
            face_box: pbox("face_box")?,
            ref_box: pbox("ref_box")?,
            frame_width: size[0],
            frame_height: size[1],
            seed: num("seed")?,
        })
    }
}

/// `key = value` lines; `#` starts a comment. Duplicate keys are errors.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("line {}: expected key = value", n + 1)))?;
        let k = k.trim().to_string();
        if out.insert(k.clone(), v.trim().to_string()).is_some() {
            return Err(Error::Format(format!("line {}: duplicate key {k:?}", n + 1)));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct TrainingSample<T> {
    pub meta: ClipMeta,
    /// `[F, 3, H, W]` in `[0, 1]`.
    pub video: Tensor<T>,
    /// `[F, H, W]` binary.
    pub mask: Tensor<T>,
    /// `[F, H, W]` pixel-resolution motion heatmap.
    pub heatmap: Tensor<T>,
    pub reference: ReferenceImage<T>,
    pub prompts: PromptBundle,
}

impl<T: Scalar> TrainingSample<T> {
    pub fn cast<U: Scalar>(&self) -> TrainingSample<U> {
        TrainingSample {
            meta: self.meta.clone(),
            video: self.video.cast(),
            mask: self.mask.cast(),
            heatmap: self.heatmap.cast(),
            reference: ReferenceImage {
                pixels: self.reference.pixels.cast(),
                face_box: self.reference.face_box,
            },
            prompts: self.prompts.clone(),
        }
    }
}

/// Keep iff the face occupies at least `threshold` of the frame.
pub fn face_area_filter(meta: &ClipMeta, threshold: f64) -> bool {
    meta.face_fraction() >= threshold
}

/// Renders one clip; depends only on `(seed, identity, clip)`.
pub fn generate_clip(sprite: &SpriteIdentity, clip: usize, frames: usize, seed: u64) -> Result<TrainingSample<f64>> {
    if frames < 2 {
        return Err(Error::config("clips need at least two frames"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((sprite.id as u64) << 32) | (clip as u64 + 1) | (1 << 63));
    let action = Action::ALL[(clip + 2 * sprite.id) % Action::ALL.len()];
    let background = rng.gen_range(0..BACKGROUNDS.len());
    let poses = trajectory(action, sprite.size, frames, &mut rng);
    let (w, h) = (FRAME_WIDTH, FRAME_HEIGHT);
    let mut video = Vec::with_capacity(frames * 3 * w * h);
    let mut mask = Vec::with_capacity(frames * w * h);
    for &p in &poses {
        let (rgb, m) = render_frame(sprite, background, p);
        video.extend(rgb);
        mask.extend(m);
    }
    let video = Tensor::new(&[frames, 3, h, w], video)?;
    let mask = Tensor::new(&[frames, h, w], mask)?;
    let flows = clip_flows(&video)?;
    let heatmap = motion_heatmap(&flows, &mask)?;

    let m0 = &mask.data()[..w * h];
    let bbox = mask_bbox(m0, w, h).ok_or_else(|| Error::shape("sprite left the first frame"))?;
    let ref_box = reference_region(bbox, w, h);
    let face_box = face_box_at(sprite, poses[0]);
    let frame0 = crate::aml::frame(&video, 0);
    let reference = ReferenceImage::new(
        crop(&frame0, ref_box)?,
        PixelBox {
            x: face_box.x - ref_box.x,
            y: face_box.y - ref_box.y,
            w: face_box.w,
            h: face_box.h,
        },
    )?;
    let spec = PromptSpec {
        color: sprite.color,
        shape: sprite.shape,
        action,
        background,
    };
    Ok(TrainingSample {
        meta: ClipMeta {
            identity: sprite.id,
            clip,
            action,
            background,
            face_box,
            ref_box,
            frame_width: w,
            frame_height: h,
            seed,
        },
        video,
        mask,
        heatmap,
        reference,
        prompts: PromptBundle::from_tokens(spec.tokens())?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorpusConfig {
    pub ids: usize,
    pub clips_per_id: usize,
    pub frames: usize,
    pub seed: u64,
    pub face_area_min: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            ids: 4,
            clips_per_id: 4,
            frames: DEFAULT_FRAMES,
            seed: 0,
            face_area_min: DEFAULT_FACE_AREA_MIN,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusReport {
    pub kept: usize,
    pub dropped: usize,
    pub identities: usize,
}

/// All clips of a corpus in `(identity, clip)` order, with their filter
/// decision.
pub fn generate_samples(config: &CorpusConfig) -> Result<Vec<(TrainingSample<f64>, bool)>> {
    let sprites = make_identities(config.ids, config.seed);
    let jobs: Vec<(usize, usize)> = (0..config.ids)
        .flat_map(|i| (0..config.clips_per_id).map(move |c| (i, c)))
        .collect();
    jobs.par_iter()
        .map(|&(i, c)| {
            let s = generate_clip(&sprites[i], c, config.frames, config.seed)?;
            let keep = face_area_filter(&s.meta, config.face_area_min);
            Ok((s, keep))
        })
        .collect()
}

pub fn clip_dir(root: &Path, identity: usize, clip: usize) -> PathBuf {
    root.join(format!("id{identity:03}")).join(format!("clip{clip:03}"))
}

pub fn write_sample(dir: &Path, s: &TrainingSample<f64>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    s.video.cast::<f32>().save(dir.join("video.ptns"))?;
    s.mask.cast::<f32>().save(dir.join("mask.ptns"))?;
    s.heatmap.cast::<f32>().save(dir.join("heatmap.ptns"))?;
    s.reference.pixels.cast::<f32>().save(dir.join("ref.ptns"))?;
    let write = |name: &str, text: String| {
        let p = dir.join(name);
        fs::write(&p, text).map_err(|e| Error::io(p, e))
    };
    write("prompt.txt", format!("{}\n", s.prompts.text()))?;
    write("meta.txt", s.meta.to_text())
}

pub fn read_sample<T: Scalar>(dir: &Path) -> Result<TrainingSample<T>> {
    let read = |name: &str| {
        let p = dir.join(name);
        fs::read_to_string(&p).map_err(|e| Error::io(p, e))
    };
    let meta = ClipMeta::parse(&read("meta.txt")?)?;
    let prompts = PromptBundle::parse_text(read("prompt.txt")?.trim())?;
    let pixels = Tensor::load(dir.join("ref.ptns"))?;
    let rb = meta.ref_box;
    let fb = meta.face_box;
    let reference = ReferenceImage::new(
        pixels,
        PixelBox {
            x: fb.x.wrapping_sub(rb.x),
            y: fb.y.wrapping_sub(rb.y),
            w: fb.w,
            h: fb.h,
        },
    )?;
    Ok(TrainingSample {
        video: Tensor::load(dir.join("video.ptns"))?,
        mask: Tensor::load(dir.join("mask.ptns"))?,
        heatmap: Tensor::load(dir.join("heatmap.ptns"))?,
        reference,
        prompts,
        meta,
    })
}

/// Generates, filters and writes a corpus under `root`.
pub fn generate_corpus(config: &CorpusConfig, root: &Path) -> Result<CorpusReport> {
    if config.frames < 2 {
        return Err(Error::config("clips need at least two frames"));
    }
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let samples = generate_samples(config)?;
    let mut report = CorpusReport {
        kept: 0,
        dropped: 0,
        identities: 0,
    };
    let mut ids = std::collections::BTreeSet::new();
    for (s, keep) in &samples {
        if *keep {
            write_sample(&clip_dir(root, s.meta.identity, s.meta.clip), s)?;
            ids.insert(s.meta.identity);
            report.kept += 1;
        } else {
            report.dropped += 1;
        }
    }
    report.identities = ids.len();
    Ok(report)
}

/// Every clip directory under `root`, sorted.
pub fn list_clips(root: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let entries = |p: &Path| -> Result<Vec<PathBuf>> {
        let mut v: Vec<PathBuf> = fs::read_dir(p)
            .map_err(|e| Error::io(p, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        v.sort();
        Ok(v)
    };
    for id in entries(root)? {
        for clip in entries(&id)? {
            if clip.join("meta.txt").is_file() {
                out.push(clip);
            }
        }
    }
    Ok(out)
}

pub fn load_corpus<T: Scalar>(root: &Path) -> Result<Vec<TrainingSample<T>>> {
    let clips = list_clips(root)?;
    if clips.is_empty() {
        return Err(Error::config(format!("no clips found under {}", root.display())));
    }
    clips.iter().map(|c| read_sample(c)).collect()
}

/// SHA-256 over every file's relative path and bytes, in sorted order.
pub fn dir_hash(root: &Path) -> Result<String> {
    fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        let mut entries: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(&p, out)?;
            } else {
                out.push(p);
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    walk(root, &mut files)?;
    let mut h = Sha256::new();
    for f in files {
        let rel = f.strip_prefix(root).unwrap_or(&f);
        h.update(rel.to_string_lossy().as_bytes());
        h.update([0]);
        h.update(fs::read(&f).map_err(|e| Error::io(&f, e))?);
    }
    Ok(hex::encode(h.finalize()))
}
