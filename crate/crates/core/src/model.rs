//! The full conditioned denoiser: text and visual identity encoders, query
//! fusion, the time-aware resampler and the diffusion transformer, plus
//! checkpoints.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::aml::MotionWeightMap;
use crate::autograd::{Tape, Var};
use crate::denoiser::{DiT, DiTConfig};
use crate::diffusion::{dpm_sample, forward_diffuse, NoiseSchedule};
use crate::error::{Error, Result};
use crate::identity::prompt::PromptBundle;
use crate::identity::{ReferenceImage, TextConfig, TextEncoder, VisualConfig, VisualEncoder};
use crate::latent::{encode_video, LATENT_FACTOR};
use crate::mif::{build_condition_sequence, QFormer, QUERY_COUNT};
use crate::nn::{Ctx, Init, Linear, ParamId, ParamStore};
use crate::scalar::{DType, Scalar};
use crate::synthdata::TrainingSample;
use crate::taii::Resampler;
use crate::tensor::Tensor;

/// Which conditioning paths a forward pass uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LossMode {
    /// Prompt only.
    La,
    /// Prompt plus fused identity appended to the condition sequence.
    Lb,
    /// Adds per-block identity injection.
    Lc,
    /// `Lc` with motion-weighted loss.
    Ld,
}

impl LossMode {
    pub const ALL: [LossMode; 4] = [LossMode::La, LossMode::Lb, LossMode::Lc, LossMode::Ld];

    pub fn uses_fusion(self) -> bool {
        self >= LossMode::Lb
    }

    pub fn uses_injection(self) -> bool {
        self >= LossMode::Lc
    }

    pub fn uses_motion(self) -> bool {
        self == LossMode::Ld
    }
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossMode::La => "La",
            LossMode::Lb => "Lb",
            LossMode::Lc => "Lc",
            LossMode::Ld => "Ld",
        })
    }
}

impl FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossMode::ALL
            .into_iter()
            .find(|m| m.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown loss mode {s:?} (expected La, Lb, Lc or Ld)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub dit_blocks: usize,
    pub dit_patch: usize,
    pub ffn_mult: usize,
    pub text_blocks: usize,
    pub text_max_len: usize,
    pub visual_size: usize,
    pub visual_patch: usize,
    pub visual_fusion_layers: usize,
    pub qformer_layers: usize,
    pub taii_units: usize,
    pub null_len: usize,
    pub timesteps: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            heads: 4,
            dit_blocks: 4,
            dit_patch: 2,
            ffn_mult: 4,
            text_blocks: 2,
            text_max_len: 12,
            visual_size: 16,
            visual_patch: 4,
            visual_fusion_layers: 2,
            qformer_layers: 4,
            taii_units: crate::taii::DEFAULT_UNITS,
            null_len: 8,
            timesteps: 200,
            frames: crate::synthdata::DEFAULT_FRAMES,
            height: crate::synthdata::FRAME_HEIGHT,
            width: crate::synthdata::FRAME_WIDTH,
        }
    }
}

macro_rules! config_fields {
    ($ty:ty { $($field:ident),* $(,)? }) => {
        impl $ty {
            pub const KEYS: &'static [&'static str] = &[$(stringify!($field)),*];

            /// Sets one field from its text form.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $(stringify!($field) => {
                        self.$field = value.trim().parse().map_err(|_| {
                            Error::Config(format!("{key}: cannot parse {value:?}"))
                        })?;
                    })*
                    _ => return Err(Error::Config(format!("unknown key {key:?}"))),
                }
                Ok(())
            }

            /// `key = value` lines in declaration order.
            pub fn to_text(&self) -> String {
                let mut s = String::new();
                $(s.push_str(&format!("{} = {}\n", stringify!($field), self.$field));)*
                s
            }
        }
    };
}
pub(crate) use config_fields;

config_fields!(ModelConfig {
    d_model,
    heads,
    dit_blocks,
    dit_patch,
    ffn_mult,
    text_blocks,
    text_max_len,
    visual_size,
    visual_patch,
    visual_fusion_layers,
    qformer_layers,
    taii_units,
    null_len,
    timesteps,
    frames,
    height,
    width,
});

impl ModelConfig {
    /// A two-block f64-checkable model; every conditioning path is present.
    pub fn tiny() -> Self {
        ModelConfig {
            d_model: 8,
            heads: 2,
            dit_blocks: 2,
            dit_patch: 2,
            ffn_mult: 2,
            text_blocks: 1,
            text_max_len: 12,
            visual_size: 8,
            visual_patch: 4,
            visual_fusion_layers: 1,
            qformer_layers: 1,
            taii_units: 1,
            null_len: 2,
            timesteps: 50,
            frames: 2,
            height: 16,
            width: 16,
        }
    }

    pub fn latent_shape(&self) -> [usize; 4] {
        [
            self.frames,
            3 * LATENT_FACTOR * LATENT_FACTOR,
            self.height / LATENT_FACTOR,
            self.width / LATENT_FACTOR,
        ]
    }

    pub fn dit(&self) -> DiTConfig {
        let [frames, channels, height, width] = self.latent_shape();
        DiTConfig {
            blocks: self.dit_blocks,
            d_model: self.d_model,
            heads: self.heads,
            patch: self.dit_patch,
            frames,
            channels,
            height,
            width,
            max_cond: self.max_cond(),
            ffn_mult: self.ffn_mult,
            timesteps: self.timesteps,
        }
    }

    /// Prompt tokens plus the fused identity rows (queries and identity tokens).
    pub fn max_cond(&self) -> usize {
        (2 * self.text_max_len + QUERY_COUNT).max(self.null_len)
    }

    pub fn validate(&self) -> Result<()> {
        if self.height % LATENT_FACTOR != 0 || self.width % LATENT_FACTOR != 0 {
            return Err(Error::config(format!(
                "frame size {}x{} is not a multiple of {LATENT_FACTOR}",
                self.width, self.height
            )));
        }
        if self.null_len == 0 || self.frames == 0 {
            return Err(Error::config("null_len and frames must be positive"));
        }
        if self.timesteps < 2 {
            return Err(Error::config("timesteps must be at least 2"));
        }
        self.dit().validate()
    }
}

/// A training clip reduced to what the loss needs.
#[derive(Debug, Clone)]
pub struct Prepared<T> {
    pub z0: Tensor<T>,
    pub reference: ReferenceImage<T>,
    pub prompts: PromptBundle,
    pub motion: MotionWeightMap<T>,
    pub identity: usize,
}

impl<T: Scalar> Prepared<T> {
    pub fn from_sample(s: &TrainingSample<T>) -> Result<Self> {
        Ok(Prepared {
            z0: encode_video(&s.video)?,
            reference: s.reference.clone(),
            prompts: s.prompts.clone(),
            motion: crate::aml::downsample_to_latent(&s.heatmap, LATENT_FACTOR)?,
            identity: s.meta.identity,
        })
    }
}

/// Condition sequence and the fused identity it was built from.
pub struct Condition {
    pub cond: Var,
    pub fused: Option<Var>,
}

/// Encoder outputs frozen for sampling.
#[derive(Debug, Clone)]
pub struct FrozenCondition<T> {
    pub cond: Tensor<T>,
    pub null: Tensor<T>,
    pub fused: Option<Tensor<T>>,
}

#[derive(Debug, Clone)]
pub struct ProteusModel {
    pub config: ModelConfig,
    pub text: TextEncoder,
    pub visual: VisualEncoder,
    pub qformer: QFormer,
    pub fusion_proj: Linear,
    pub taii: Resampler,
    pub dit: DiT,
    pub null_cond: ParamId,
}

pub const TEXT_PREFIX: &str = "text";
pub const VISUAL_PREFIX: &str = "visual";
pub const QFORMER_PREFIX: &str = "qformer";
pub const FUSION_PROJ_PREFIX: &str = "fusion_proj";
pub const TAII_PREFIX: &str = "taii";
pub const DIT_PREFIX: &str = "dit";
pub const NULL_NAME: &str = "null_cond";

impl ProteusModel {
    /// Builds the model and its parameters from `seed`.
    pub fn new<T: Scalar>(config: ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.d_model;
        let text = TextEncoder::new(
            &mut store,
            &mut rng,
            TEXT_PREFIX,
            TextConfig {
                d_model: d,
                heads: config.heads,
                blocks: config.text_blocks,
                max_len: config.text_max_len,
            },
        );
        let visual = VisualEncoder::new(
            &mut store,
            &mut rng,
            VISUAL_PREFIX,
            VisualConfig {
                d_model: d,
                heads: config.heads,
                global_size: config.visual_size,
                face_size: config.visual_size,
                patch: config.visual_patch,
                fusion_layers: config.visual_fusion_layers,
            },
        )?;
        let qformer = QFormer::new(&mut store, &mut rng, QFORMER_PREFIX, d, config.heads, config.qformer_layers)?;
        let fusion_proj = Linear::new(&mut store, &mut rng, FUSION_PROJ_PREFIX, d, d, true);
        let taii = Resampler::new(
            &mut store,
            &mut rng,
            TAII_PREFIX,
            d,
            config.heads,
            config.taii_units,
            config.timesteps,
        );
        let dit = DiT::new(&mut store, &mut rng, DIT_PREFIX, config.dit())?;
        let null_cond = store.add(NULL_NAME, &[config.null_len, d], Init::Normal(0.5), &mut rng);
        Ok((
            ProteusModel {
                config,
                text,
                visual,
                qformer,
                fusion_proj,
                taii,
                dit,
                null_cond,
            },
            store,
        ))
    }

    /// Parameter-name prefixes a loss mode trains.
    pub fn trained_prefixes(mode: LossMode) -> Vec<&'static str> {
        let mut p = vec![TEXT_PREFIX, DIT_PREFIX, NULL_NAME];
        if mode.uses_fusion() {
            p.extend([VISUAL_PREFIX, QFORMER_PREFIX, FUSION_PROJ_PREFIX]);
        }
        if mode.uses_injection() {
            p.push(TAII_PREFIX);
        }
        p
    }

    /// Whether parameter `name` is trained under `mode`. The per-block
    /// injection attention only exists for `Lc` and above.
    pub fn is_trained(name: &str, mode: LossMode) -> bool {
        if name.contains(".inject.") && !mode.uses_injection() {
            return false;
        }
        Self::trained_prefixes(mode)
            .iter()
            .any(|p| name == *p || name.starts_with(&format!("{p}.")))
    }

    /// Fused identity `W_fusion` for a prompt and reference.
    pub fn fuse_identity<T: Scalar>(
        &self,
        cx: &Ctx<'_, T>,
        prompts: &PromptBundle,
        reference: &ReferenceImage<T>,
    ) -> Result<Var> {
        let t_identity = self.text.forward(cx, &prompts.y_identity)?;
        let visual = self.visual.forward(cx, reference)?;
        self.qformer.fuse(cx, t_identity, visual)
    }

    /// Condition sequence for `mode`; `drop` swaps it for the learned null
    /// sequence (the fused identity is still built when injection needs it).
    pub fn condition<T: Scalar>(
        &self,
        cx: &Ctx<'_, T>,
        prompts: &PromptBundle,
        reference: &ReferenceImage<T>,
        mode: LossMode,
        drop: bool,
    ) -> Result<Condition> {
        let need_fused = mode.uses_injection() || (mode.uses_fusion() && !drop);
        let fused = if need_fused {
            Some(self.fuse_identity(cx, prompts, reference)?)
        } else {
            None
        };
        let cond = if drop {
            cx.p(self.null_cond)
        } else {
            let t_user = self.text.forward(cx, &prompts.y_user)?;
            match (mode.uses_fusion(), fused) {
                (true, Some(w)) => build_condition_sequence(cx, &self.fusion_proj, t_user, w)?,
                _ => t_user,
            }
        };
        Ok(Condition {
            cond,
            fused: if mode.uses_injection() { fused } else { None },
        })
    }

    /// Noise prediction for `z_t` at `t` given a prepared condition.
    pub fn predict<T: Scalar>(&self, cx: &Ctx<'_, T>, z_t: &Tensor<T>, t: usize, c: &Condition) -> Result<Var> {
        let identity = match c.fused {
            Some(w) => Some(self.taii.forward(cx, w, t)?.w_t_fusion),
            None => None,
        };
        self.dit.forward(cx, z_t, t, c.cond, identity)
    }

    /// Training loss for one clip at timestep `t` with noise `eps`.
    /// `Ld` multiplies the squared error by `1 + lambda * M'`.
    #[allow(clippy::too_many_arguments)]
    pub fn loss<T: Scalar>(
        &self,
        cx: &Ctx<'_, T>,
        item: &Prepared<T>,
        schedule: &NoiseSchedule,
        t: usize,
        eps: &Tensor<T>,
        mode: LossMode,
        lambda: f64,
        drop: bool,
    ) -> Result<Var> {
        let z_t = forward_diffuse(&item.z0, t, eps, schedule)?;
        let c = self.condition(cx, &item.prompts, &item.reference, mode, drop)?;
        let pred = self.predict(cx, &z_t, t, &c)?;
        let tape = cx.tape;
        let diff = tape.sub(pred, cx.input(eps.clone()))?;
        let sq = tape.square(diff);
        let sq = if mode.uses_motion() {
            let w = item.motion.loss_weights(eps.shape(), lambda)?;
            tape.mul_const(sq, w)?
        } else {
            sq
        };
        Ok(tape.mean(sq))
    }

    /// Runs the encoders once so sampling only re-evaluates the resampler
    /// and denoiser.
    pub fn freeze_condition<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        prompts: &PromptBundle,
        reference: &ReferenceImage<T>,
        mode: LossMode,
    ) -> Result<FrozenCondition<T>> {
        let tape = Tape::new();
        let cx = Ctx::new(&tape, store);
        let c = self.condition(&cx, prompts, reference, mode, false)?;
        let cond = tape.value(c.cond).clone();
        let fused = c.fused.map(|f| tape.value(f).clone());
        Ok(FrozenCondition {
            cond,
            null: store.value(self.null_cond).clone(),
            fused,
        })
    }

    /// Noise prediction from frozen encoder outputs.
    pub fn predict_frozen<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        frozen: &FrozenCondition<T>,
        z_t: &Tensor<T>,
        t: usize,
        conditional: bool,
    ) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let cx = Ctx::new(&tape, store);
        let c = Condition {
            cond: cx.input(if conditional { frozen.cond.clone() } else { frozen.null.clone() }),
            fused: frozen.fused.clone().map(|f| cx.input(f)),
        };
        let out = self.predict(&cx, z_t, t, &c)?;
        let v = tape.value(out).clone();
        Ok(v)
    }

    /// Guided DPM sampling of a latent clip.
    #[allow(clippy::too_many_arguments)]
    pub fn sample<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        schedule: &NoiseSchedule,
        prompts: &PromptBundle,
        reference: &ReferenceImage<T>,
        mode: LossMode,
        steps: usize,
        guidance: f64,
        seed: u64,
    ) -> Result<Tensor<T>> {
        let frozen = self.freeze_condition(store, prompts, reference, mode)?;
        let predictor =
            |z: &Tensor<T>, t: usize, conditional: bool| self.predict_frozen(store, &frozen, z, t, conditional);
        dpm_sample(
            &predictor,
            schedule,
            &self.config.latent_shape(),
            steps,
            guidance,
            seed,
        )
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"PCKPT01\n";

/// Writes `magic, u64 manifest length, manifest, payloads`. The manifest
/// holds the model config followed by `param <name> <dtype> <shape> <offset>`
/// lines; offsets are relative to the payload start and each payload is a
/// complete tensor blob.
pub fn save_checkpoint<T: Scalar>(path: &Path, config: &ModelConfig, store: &ParamStore<T>) -> Result<()> {
    let mut manifest = config.to_text();
    let mut payload = Vec::new();
    for p in store.params() {
        let shape: Vec<String> = p.value.shape().iter().map(|d| d.to_string()).collect();
        manifest.push_str(&format!(
            "param {} {} {} {}\n",
            p.name,
            T::DTYPE.name(),
            if shape.is_empty() { "-".to_string() } else { shape.join(",") },
            payload.len()
        ));
        payload.extend(p.value.to_bytes());
    }
    let mut out = Vec::with_capacity(16 + manifest.len() + payload.len());
    out.write_all(CHECKPOINT_MAGIC).expect("vec write");
    out.write_all(&(manifest.len() as u64).to_le_bytes()).expect("vec write");
    out.write_all(manifest.as_bytes()).expect("vec write");
    out.write_all(&payload).expect("vec write");
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint into a freshly built model of the stored config,
/// converting payloads to `T`.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(ProteusModel, ParamStore<T>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::Format(format!("{}: {m}", path.display()));
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint"));
    }
    let mlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let manifest = bytes
        .get(16..16 + mlen)
        .ok_or_else(|| bad("truncated manifest"))
        .and_then(|m| std::str::from_utf8(m).map_err(|_| bad("manifest is not UTF-8")))?;
    let payload = &bytes[16 + mlen..];
    let mut config = ModelConfig::default();
    let mut entries = Vec::new();
    for line in manifest.lines() {
        if let Some(rest) = line.strip_prefix("param ") {
            let parts: Vec<&str> = rest.split(' ').collect();
            let [name, dtype, _shape, offset] = parts.as_slice() else {
                return Err(bad(&format!("bad manifest line {line:?}")));
            };
            if DType::from_name(dtype).is_none() {
                return Err(bad(&format!("unknown dtype {dtype}")));
            }
            let offset: usize = offset.parse().map_err(|_| bad("bad offset"))?;
            entries.push((name.to_string(), offset));
        } else if let Some((k, v)) = line.split_once('=') {
            config.set(k.trim(), v.trim())?;
        }
    }
    let (model, mut store) = ProteusModel::new::<T>(config, 0)?;
    if entries.len() != store.len() {
        return Err(bad(&format!("{} parameters stored, model has {}", entries.len(), store.len())));
    }
    for (name, offset) in entries {
        let blob = payload.get(offset..).ok_or_else(|| bad("offset past end"))?;
        let (t, _) = Tensor::<T>::from_bytes(blob)?;
        store.set(&name, t)?;
    }
    Ok((model, store))
}
