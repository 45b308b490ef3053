//! Metrics on generated clips: identity similarity in the face-branch
//! embedding space, prompt/visual agreement and mean sprite motion.

use std::fmt::Write as _;

use crate::aml::{clip_flows, frame};
use crate::autograd::Tape;
use crate::diffusion::NoiseSchedule;
use crate::error::Result;
use crate::identity::prompt::{parse, PromptBundle};
use crate::identity::{cosine, ReferenceImage};
use crate::image::{chw, PixelBox};
use crate::latent::decode_video;
use crate::model::{LossMode, ProteusModel};
use crate::nn::{Ctx, ParamStore};
use crate::scalar::Scalar;
use crate::synthdata::{chroma_mask, crop, face_box_in, mask_bbox, reference_region, TrainingSample};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct EvalItem<T> {
    pub reference: ReferenceImage<T>,
    pub prompts: PromptBundle,
}

impl<T: Scalar> EvalItem<T> {
    pub fn from_sample(s: &TrainingSample<T>) -> Self {
        EvalItem {
            reference: s.reference.clone(),
            prompts: s.prompts.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    pub steps: usize,
    pub guidance: f64,
    pub seed: u64,
    /// Samples drawn per eval item.
    pub samples_per_item: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            steps: 50,
            guidance: 6.0,
            seed: 0,
            samples_per_item: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MetricsReport {
    pub identity_sim: f64,
    pub text_sim: f64,
    pub motion_amplitude: f64,
    pub samples: usize,
    /// Samples excluded because sampling diverged.
    pub failed: usize,
    /// Samples in which no sprite was detected (scored as zero similarity).
    pub undetected: usize,
}

/// Metrics of one decoded `[F, 3, H, W]` clip.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VideoMetrics {
    pub identity_sim: f64,
    pub text_sim: f64,
    pub motion_amplitude: f64,
    pub detected: bool,
}

/// 3x3 box filter of a `[C, H, W]` image, clamped at the borders.
pub fn smooth<T: Scalar>(img: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, h, w) = chw(img)?;
    let d = img.data();
    Ok(Tensor::from_fn(img.shape(), |i| {
        let (c, y, x) = (i / (h * w), (i / w) % h, i % w);
        let (mut s, mut n) = (0.0, 0.0);
        for yy in y.saturating_sub(1)..(y + 2).min(h) {
            for xx in x.saturating_sub(1)..(x + 2).min(w) {
                s += d[(c * h + yy) * w + xx].as_f64();
                n += 1.0;
            }
        }
        T::of(s / n)
    }))
}

/// Sprite mask of a possibly noisy generated frame: the largest 8-connected
/// chroma region of the smoothed frame, restricted to raw chroma pixels
/// within one pixel of it. On a clean render this equals the raw mask of a
/// single sprite.
pub fn detect_sprite<T: Scalar>(img: &Tensor<T>) -> Result<Vec<f64>> {
    let (_, h, w) = chw(img)?;
    let coarse = chroma_mask(&smooth(img)?);
    let mut label = vec![0usize; h * w];
    let (mut best, mut best_size, mut next) = (0, 0, 0);
    for start in 0..h * w {
        if coarse[start] < 0.5 || label[start] != 0 {
            continue;
        }
        next += 1;
        label[start] = next;
        let mut stack = vec![start];
        let mut size = 0;
        while let Some(p) = stack.pop() {
            size += 1;
            let (y, x) = (p / w, p % w);
            for yy in y.saturating_sub(1)..(y + 2).min(h) {
                for xx in x.saturating_sub(1)..(x + 2).min(w) {
                    let q = yy * w + xx;
                    if coarse[q] > 0.5 && label[q] == 0 {
                        label[q] = next;
                        stack.push(q);
                    }
                }
            }
        }
        if size > best_size {
            (best, best_size) = (next, size);
        }
    }
    let raw = chroma_mask(img);
    let near = |p: usize| {
        let (y, x) = (p / w, p % w);
        (y.saturating_sub(1)..(y + 2).min(h))
            .any(|yy| (x.saturating_sub(1)..(x + 2).min(w)).any(|xx| best != 0 && label[yy * w + xx] == best))
    };
    Ok((0..h * w).map(|p| (raw[p] > 0.5 && near(p)) as u8 as f64).collect())
}

/// Reference built from a frame by sprite detection: the detected bounding
/// box plus margin, with the face box implied by the prompt's shape.
pub fn detect_reference<T: Scalar>(img: &Tensor<T>, shape: usize) -> Result<Option<ReferenceImage<T>>> {
    let (_, h, w) = chw(img)?;
    let Some(bbox) = mask_bbox(&detect_sprite(img)?, w, h) else {
        return Ok(None);
    };
    let region = reference_region(bbox, w, h);
    let face = face_box_in(bbox, shape);
    let local = PixelBox {
        x: face.x - region.x,
        y: face.y - region.y,
        w: face.w,
        h: face.h,
    };
    Ok(Some(ReferenceImage::new(crop(img, region)?, local)?))
}

/// Flattened face-branch tokens.
pub fn face_embedding<T: Scalar>(model: &ProteusModel, store: &ParamStore<T>, r: &ReferenceImage<T>) -> Result<Vec<f64>> {
    let tape = Tape::new();
    let cx = Ctx::new(&tape, store);
    let v = model.visual.face_tokens(&cx, r)?;
    let out = tape.value(v).to_f64_vec();
    Ok(out)
}

pub fn identity_similarity<T: Scalar>(
    model: &ProteusModel,
    store: &ParamStore<T>,
    a: &ReferenceImage<T>,
    b: &ReferenceImage<T>,
) -> Result<f64> {
    Ok(cosine(&face_embedding(model, store, a)?, &face_embedding(model, store, b)?))
}

/// Cosine between the mean text token of the prompt and the mean pooled
/// visual token of the reference.
pub fn text_similarity<T: Scalar>(
    model: &ProteusModel,
    store: &ParamStore<T>,
    prompts: &PromptBundle,
    r: &ReferenceImage<T>,
) -> Result<f64> {
    let tape = Tape::new();
    let cx = Ctx::new(&tape, store);
    let text = model.text.forward(&cx, &prompts.y_user)?;
    let vis = model.visual.forward(&cx, r)?;
    let pool = |v| -> Vec<f64> {
        let t = tape.value(v);
        let (n, d) = (t.shape()[0], t.shape()[1]);
        (0..d)
            .map(|j| (0..n).map(|i| t.data()[i * d + j].as_f64()).sum::<f64>() / n as f64)
            .collect()
    };
    Ok(cosine(&pool(text), &pool(vis)))
}

/// Mean flow magnitude over detected sprite pixels of each frame pair. Flow
/// is estimated on smoothed frames.
pub fn motion_amplitude<T: Scalar>(video: &Tensor<T>) -> Result<f64> {
    let s = video.shape();
    let mut smoothed = Vec::with_capacity(video.numel());
    for i in 0..s[0] {
        smoothed.extend_from_slice(smooth(&frame(video, i))?.data());
    }
    let flows = clip_flows(&Tensor::new(s, smoothed)?)?;
    let (mut sum, mut count) = (0.0, 0usize);
    for (i, f) in flows.iter().enumerate() {
        let mask = detect_sprite(&frame(video, i))?;
        for (m, mag) in mask.iter().zip(f.magnitude()) {
            if *m > 0.5 {
                sum += mag;
                count += 1;
            }
        }
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

pub fn video_metrics<T: Scalar>(
    model: &ProteusModel,
    store: &ParamStore<T>,
    video: &Tensor<T>,
    item: &EvalItem<T>,
) -> Result<VideoMetrics> {
    let shape = parse(&item.prompts.y_user)?.shape;
    let motion = motion_amplitude(video)?;
    let Some(found) = detect_reference(&frame(video, 0), shape)? else {
        return Ok(VideoMetrics {
            identity_sim: 0.0,
            text_sim: 0.0,
            motion_amplitude: motion,
            detected: false,
        });
    };
    Ok(VideoMetrics {
        identity_sim: identity_similarity(model, store, &found, &item.reference)?,
        text_sim: text_similarity(model, store, &item.prompts, &found)?,
        motion_amplitude: motion,
        detected: true,
    })
}

/// Samples every item and averages the metrics. A sample whose latent is not
/// finite counts as failed and is left out of the means.
pub fn evaluate<T: Scalar>(
    model: &ProteusModel,
    store: &ParamStore<T>,
    items: &[EvalItem<T>],
    mode: LossMode,
    config: &EvalConfig,
) -> Result<MetricsReport> {
    let schedule = NoiseSchedule::linear(model.config.timesteps)?;
    let mut report = MetricsReport::default();
    let mut k = 0u64;
    for item in items {
        for _ in 0..config.samples_per_item {
            let seed = config.seed.wrapping_mul(1_000_003).wrapping_add(k);
            k += 1;
            let z = model.sample(
                store,
                &schedule,
                &item.prompts,
                &item.reference,
                mode,
                config.steps,
                config.guidance,
                seed,
            );
            let z = match z {
                Ok(z) if z.all_finite() => z,
                Ok(_) | Err(crate::Error::NonFinite(_)) => {
                    report.failed += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            let m = video_metrics(model, store, &decode_video(&z)?, item)?;
            report.identity_sim += m.identity_sim;
            report.text_sim += m.text_sim;
            report.motion_amplitude += m.motion_amplitude;
            report.undetected += (!m.detected) as usize;
            report.samples += 1;
        }
    }
    if report.samples > 0 {
        let n = report.samples as f64;
        report.identity_sim /= n;
        report.text_sim /= n;
        report.motion_amplitude /= n;
    }
    Ok(report)
}

pub const CSV_HEADER: &str = "run_id,loss_mode,step,identity_sim,text_sim,motion_amplitude";

pub fn csv_row(run_id: &str, mode: LossMode, step: usize, m: &MetricsReport) -> String {
    format!(
        "{run_id},{mode},{step},{:.6},{:.6},{:.6}",
        m.identity_sim, m.text_sim, m.motion_amplitude
    )
}

/// Plain-text table for terminal output.
pub fn table(rows: &[(String, LossMode, usize, MetricsReport)]) -> String {
    let mut s = format!(
        "{:<16} {:<4} {:>6} {:>12} {:>9} {:>8} {:>7} {:>6}\n",
        "run", "mode", "step", "identity_sim", "text_sim", "motion", "samples", "failed"
    );
    for (id, mode, step, m) in rows {
        let _ = writeln!(
            s,
            "{:<16} {:<4} {:>6} {:>12.4} {:>9.4} {:>8.4} {:>7} {:>6}",
            id, mode, step, m.identity_sim, m.text_sim, m.motion_amplitude, m.samples, m.failed
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::synthdata::{generate_clip, make_identities};

    #[test]
    fn self_similarity_is_one() {
        let (model, store) = ProteusModel::new::<f64>(ModelConfig::default(), 0).unwrap();
        let s = generate_clip(&make_identities(1, 0)[0], 0, 3, 0).unwrap();
        let item = EvalItem::from_sample(&s);
        let m = video_metrics(&model, &store, &s.video, &item).unwrap();
        assert!(m.detected);
        let again = detect_reference(&frame(&s.video, 0), parse(&s.prompts.y_user).unwrap().shape)
            .unwrap()
            .unwrap();
        let sim = identity_similarity(&model, &store, &again, &again).unwrap();
        assert!((sim - 1.0).abs() < 1e-6);
    }

    #[test]
    fn static_video_has_no_motion() {
        let s = generate_clip(&make_identities(1, 0)[0], 0, 3, 0).unwrap();
        let f0 = frame(&s.video, 0);
        let mut data = Vec::new();
        for _ in 0..4 {
            data.extend_from_slice(f0.data());
        }
        let still = Tensor::new(&[4, 3, 32, 48], data).unwrap();
        assert!(motion_amplitude(&still).unwrap() < 0.05);
    }

    #[test]
    fn blank_video_is_undetected() {
        let (model, store) = ProteusModel::new::<f64>(ModelConfig::tiny(), 0).unwrap();
        let s = generate_clip(&make_identities(1, 0)[0], 0, 2, 0).unwrap();
        let grey = Tensor::full(&[2, 3, 32, 48], 0.5);
        let m = video_metrics(&model, &store, &grey, &EvalItem::from_sample(&s)).unwrap();
        assert!(!m.detected);
        assert_eq!(m.identity_sim, 0.0);
    }

    #[test]
    fn clean_first_frame_recovers_the_reference() {
        for sprite in &make_identities(12, 1) {
            for clip in 0..3 {
                let s = generate_clip(sprite, clip, 2, 1).unwrap();
                let found = detect_reference(&frame(&s.video, 0), sprite.shape).unwrap().unwrap();
                assert_eq!(found, s.reference, "identity {} clip {clip}", sprite.id);
            }
        }
    }

    #[test]
    fn detection_on_clean_frames_matches_raw_chroma() {
        for (id, sprite) in make_identities(4, 3).iter().enumerate() {
            let s = generate_clip(sprite, id, 2, 3).unwrap();
            let f0 = frame(&s.video, 0);
            assert_eq!(detect_sprite(&f0).unwrap(), chroma_mask(&f0));
        }
    }

    #[test]
    fn detection_ignores_isolated_noise() {
        let s = generate_clip(&make_identities(1, 0)[0], 0, 2, 0).unwrap();
        let mut f0 = frame(&s.video, 0);
        let clean = chroma_mask(&f0);
        // A single saturated pixel far from the sprite.
        let b = mask_bbox(&clean, 48, 32).unwrap();
        let (x, y) = if b.x > 10 { (1, 1) } else { (46, 30) };
        f0.data_mut()[y * 48 + x] = 1.0;
        assert_ne!(chroma_mask(&f0), clean);
        assert_eq!(detect_sprite(&f0).unwrap(), clean);
    }

    #[test]
    fn csv_has_header_columns() {
        let row = csv_row("r", LossMode::Ld, 3, &MetricsReport::default());
        assert_eq!(row.split(',').count(), CSV_HEADER.split(',').count());
    }
}
