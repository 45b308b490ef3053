use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use proteus_core::aml::{clip_flows, motion_heatmap};
use proteus_core::config::RunConfig;
use proteus_core::eval::{csv_row, evaluate, table, EvalConfig, EvalItem, CSV_HEADER};
use proteus_core::gradcheck::model_check;
use proteus_core::identity::PromptBundle;
use proteus_core::image::encode_pgm;
use proteus_core::latent::decode_video;
use proteus_core::model::{load_checkpoint, save_checkpoint, LossMode, Prepared, ProteusModel};
use proteus_core::synthdata::{dir_hash, generate_corpus, list_clips, load_corpus, read_sample, CorpusConfig};
use proteus_core::train::{thread_count, Trainer};
use proteus_core::{DType, Error, Result, Scalar, Tensor};

#[derive(Parser, Debug)]
#[command(
    name = "proteus",
    version,
    about = "Toy identity-conditioned video diffusion: data, training, sampling and evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic sprite-video corpus
    GenData(GenDataArgs),
    /// Train a model on a generated corpus
    Train(TrainArgs),
    /// Sample a clip for one reference and prompt
    Sample(SampleArgs),
    /// Sample every clip of a corpus and report metrics
    Eval(EvalArgs),
    /// Recompute motion heatmaps and write PGM previews
    FlowHeatmap(FlowArgs),
    /// Compare backprop with finite differences on the tiny f64 model
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    /// Output directory (created if missing)
    #[arg(long, default_value = "dataset")]
    out: PathBuf,
    /// Number of sprite identities
    #[arg(long, default_value_t = 4)]
    ids: usize,
    /// Clips per identity
    #[arg(long, default_value_t = 4)]
    clips: usize,
    /// Frames per clip
    #[arg(long, default_value_t = 9)]
    frames: usize,
    /// Minimum face-box fraction of the frame area
    #[arg(long, default_value_t = 0.06)]
    face_area_min: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Corpus directory
    #[arg(long, default_value = "dataset")]
    data: PathBuf,
    /// Run directory for checkpoint, config and loss log
    #[arg(long, default_value = "run")]
    out: PathBuf,
    /// `key = value` config file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Config override `key=value`, repeatable; wins over the file
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// La | Lb | Lc | Ld [config default: Ld]
    #[arg(long)]
    loss_mode: Option<LossMode>,
    /// Motion weight [config default: 1.0]
    #[arg(long)]
    lambda: Option<f64>,
    /// Optimizer steps [config default: 2000]
    #[arg(long)]
    steps: Option<usize>,
    /// Batch size [config default: 8]
    #[arg(long)]
    batch: Option<usize>,
    /// Peak learning rate [config default: 0.001]
    #[arg(long)]
    lr: Option<f64>,
    /// Scalar type for parameters and data
    #[arg(long, default_value = "f32", value_parser = parse_dtype)]
    dtype: DType,
    /// Training seed [config default: 0]
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct SampleArgs {
    /// Checkpoint written by `train`
    #[arg(long)]
    checkpoint: PathBuf,
    /// Clip directory providing the reference image (and prompt)
    #[arg(long)]
    clip: PathBuf,
    /// Prompt text; defaults to the clip's prompt
    #[arg(long)]
    prompt: Option<String>,
    /// Output directory for video.ptns and PGM frames
    #[arg(long, default_value = "sample")]
    out: PathBuf,
    /// Conditioning paths to use: La | Lb | Lc | Ld
    #[arg(long, default_value = "Ld")]
    loss_mode: LossMode,
    /// Sampler steps
    #[arg(long, default_value_t = 50)]
    steps: usize,
    /// Classifier-free guidance scale
    #[arg(long, default_value_t = 6.0)]
    guidance: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Corpus directory of eval clips
    #[arg(long, default_value = "dataset")]
    data: PathBuf,
    /// Conditioning paths to use: La | Lb | Lc | Ld
    #[arg(long, default_value = "Ld")]
    loss_mode: LossMode,
    #[arg(long, default_value_t = 50)]
    steps: usize,
    #[arg(long, default_value_t = 6.0)]
    guidance: f64,
    /// Samples per clip
    #[arg(long, default_value_t = 1)]
    samples: usize,
    /// Use only the first N clips (0 = all)
    #[arg(long, default_value_t = 0)]
    limit: usize,
    /// Run identifier for the CSV
    #[arg(long, default_value = "run")]
    run_id: String,
    /// Training step recorded in the CSV
    #[arg(long, default_value_t = 0)]
    step: usize,
    /// CSV file to append to
    #[arg(long, default_value = "metrics.csv")]
    csv: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct FlowArgs {
    /// Clip directory or corpus root
    #[arg(long)]
    input: PathBuf,
    /// Output directory for previews
    #[arg(long, default_value = "heatmaps")]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value = "Ld")]
    loss_mode: LossMode,
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    /// Pass threshold on the maximum relative error
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_dtype(s: &str) -> std::result::Result<DType, String> {
    DType::from_name(s).ok_or_else(|| format!("unknown dtype {s:?} (expected f32 or f64)"))
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } | Error::Format(_) => 2,
        Error::NonFinite(_) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let _ = rayon::ThreadPoolBuilder::new().num_threads(thread_count()).build_global();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => match a.dtype {
            DType::F32 => train::<f32>(a),
            DType::F64 => train::<f64>(a),
        },
        Command::Sample(a) => sample(a),
        Command::Eval(a) => eval(a),
        Command::FlowHeatmap(a) => flow_heatmap(a),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn gen_data(a: GenDataArgs) -> Result<u8> {
    let config = CorpusConfig {
        ids: a.ids,
        clips_per_id: a.clips,
        frames: a.frames,
        seed: a.seed,
        face_area_min: a.face_area_min,
    };
    let report = generate_corpus(&config, &a.out)?;
    println!(
        "kept {} dropped {} identities {}",
        report.kept, report.dropped, report.identities
    );
    println!("hash {}", dir_hash(&a.out)?);
    Ok(0)
}

fn train<T: Scalar>(a: TrainArgs) -> Result<u8> {
    let mut rc = match &a.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    rc.apply_overrides(&a.overrides)?;
    let t = &mut rc.train;
    if let Some(v) = a.loss_mode {
        t.loss_mode = v;
    }
    if let Some(v) = a.lambda {
        t.lambda = v;
    }
    if let Some(v) = a.steps {
        t.steps = v;
    }
    if let Some(v) = a.batch {
        t.batch = v;
    }
    if let Some(v) = a.lr {
        t.lr = v;
    }
    if let Some(v) = a.seed {
        t.seed = v;
    }
    rc.validate()?;

    let samples = load_corpus::<T>(&a.data)?;
    let data = samples.iter().map(Prepared::from_sample).collect::<Result<Vec<_>>>()?;
    if let Some(s) = data.first() {
        let want = rc.model.latent_shape();
        if s.z0.shape() != want {
            return Err(Error::Config(format!(
                "corpus latent shape {:?} does not match model {:?}",
                s.z0.shape(),
                want
            )));
        }
    }
    create_dir(&a.out)?;
    write_file(&a.out.join("config.txt"), rc.to_text().as_bytes())?;

    let (model, store) = ProteusModel::new::<T>(rc.model, rc.train.seed)?;
    println!(
        "training {} clips, {} parameters, mode {}",
        data.len(),
        store.num_scalars(),
        rc.train.loss_mode
    );
    let mut trainer = Trainer::new(model, store, rc.train.clone())?;
    trainer.dump_dir = Some(a.out.clone());
    let mut log = String::from("step,loss,lr\n");
    let every = rc.train.log_every.max(1);
    let last = rc.train.steps.saturating_sub(1);
    let result = trainer.run(&data, |r| {
        log.push_str(&format!("{},{:.9},{:.6e}\n", r.step, r.loss, r.lr));
        if r.step % every == 0 || r.step == last {
            println!("step {} loss {:.6} lr {:.3e}", r.step, r.loss, r.lr);
        }
    });
    write_file(&a.out.join("train_log.csv"), log.as_bytes())?;
    result?;
    let ckpt = a.out.join("checkpoint.ckpt");
    save_checkpoint(&ckpt, &trainer.model.config, &trainer.store)?;
    println!("wrote {}", ckpt.display());
    Ok(0)
}

fn write_frames(dir: &Path, video: &Tensor<f32>) -> Result<()> {
    let s = video.shape();
    let (f, h, w) = (s[0], s[2], s[3]);
    for i in 0..f {
        let frame = proteus_core::aml::frame(video, i);
        let grey = proteus_core::image::grayscale(&frame)?;
        write_file(&dir.join(format!("frame_{i:02}.pgm")), &encode_pgm(&grey, w, h))?;
    }
    Ok(())
}

fn sample(a: SampleArgs) -> Result<u8> {
    let (model, store) = load_checkpoint::<f32>(&a.checkpoint)?;
    let clip = read_sample::<f32>(&a.clip)?;
    let prompts = match &a.prompt {
        Some(p) => PromptBundle::parse_text(p)?,
        None => clip.prompts.clone(),
    };
    let schedule = proteus_core::diffusion::NoiseSchedule::linear(model.config.timesteps)?;
    let z = model.sample(
        &store,
        &schedule,
        &prompts,
        &clip.reference,
        a.loss_mode,
        a.steps,
        a.guidance,
        a.seed,
    )?;
    z.ensure_finite("sampled latent")?;
    let video = decode_video(&z)?;
    create_dir(&a.out)?;
    video.save(a.out.join("video.ptns"))?;
    write_frames(&a.out, &video)?;
    println!("prompt: {}", prompts.text());
    println!("wrote {} frames to {}", video.shape()[0], a.out.display());
    Ok(0)
}

fn eval(a: EvalArgs) -> Result<u8> {
    let (model, store) = load_checkpoint::<f32>(&a.checkpoint)?;
    let mut samples = load_corpus::<f32>(&a.data)?;
    if a.limit > 0 {
        samples.truncate(a.limit);
    }
    let items: Vec<EvalItem<f32>> = samples.iter().map(EvalItem::from_sample).collect();
    let config = EvalConfig {
        steps: a.steps,
        guidance: a.guidance,
        seed: a.seed,
        samples_per_item: a.samples,
    };
    let report = evaluate(&model, &store, &items, a.loss_mode, &config)?;
    print!("{}", table(&[(a.run_id.clone(), a.loss_mode, a.step, report)]));
    let fresh = !a.csv.exists();
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&a.csv)
        .map_err(|e| Error::io(&a.csv, e))?;
    let mut text = String::new();
    if fresh {
        text.push_str(CSV_HEADER);
        text.push('\n');
    }
    text.push_str(&csv_row(&a.run_id, a.loss_mode, a.step, &report));
    text.push('\n');
    f.write_all(text.as_bytes()).map_err(|e| Error::io(&a.csv, e))?;
    if report.failed > 0 {
        eprintln!("{} samples diverged and were excluded", report.failed);
    }
    Ok(0)
}

fn flow_heatmap(a: FlowArgs) -> Result<u8> {
    let clips = if a.input.join("video.ptns").exists() {
        vec![a.input.clone()]
    } else {
        list_clips(&a.input)?
    };
    if clips.is_empty() {
        return Err(Error::Config(format!("no clips under {}", a.input.display())));
    }
    for (k, dir) in clips.iter().enumerate() {
        let s = read_sample::<f64>(dir)?;
        let heat = motion_heatmap(&clip_flows(&s.video)?, &s.mask)?;
        let out = if clips.len() == 1 {
            a.out.clone()
        } else {
            a.out.join(format!("clip{k:03}"))
        };
        create_dir(&out)?;
        heat.cast::<f32>().save(out.join("heatmap.ptns"))?;
        let sh = heat.shape();
        let (h, w) = (sh[1], sh[2]);
        for i in 0..sh[0] {
            let plane = &heat.data()[i * h * w..(i + 1) * h * w];
            write_file(&out.join(format!("heatmap_{i:02}.pgm")), &encode_pgm(plane, w, h))?;
        }
        println!("{} -> {}", dir.display(), out.display());
    }
    Ok(0)
}

fn gradcheck(a: GradcheckArgs) -> Result<u8> {
    let r = model_check(a.seed, a.loss_mode, a.lambda)?;
    println!("checked {} entries, max relative error {:.3e}", r.checked, r.max_rel_error);
    if let Some((name, i, ana, num)) = &r.worst {
        println!("worst: {name}[{i}] analytic {ana:.6e} numeric {num:.6e}");
    }
    if r.passed(a.tol) {
        println!("PASS (tol {:.1e})", a.tol);
        Ok(0)
    } else {
        println!("FAIL (tol {:.1e})", a.tol);
        Ok(3)
    }
}
