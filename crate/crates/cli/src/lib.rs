//! Command-line and HTTP front ends for the `facemotion` library.

pub mod api;
pub mod service;

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use facemotion::animator::{Animator, ExpressionSource, PoseTransfer, ReenactMode};
use facemotion::eval::{evaluate, Protocol};
use facemotion::pipeline::{
    append_jsonl, expression_features, load_dataset, synthetic_dataset, write_folder, Checkpoint, RunConfig,
    SyntheticConfig, TrainState, VaeState,
};
use facemotion::{Error, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

pub const CHECKPOINT_ENV: &str = "FACEMOTION_CHECKPOINT";
pub const VAE_ENV: &str = "FACEMOTION_VAE";

#[derive(Debug, Parser)]
#[command(name = "facemotion", version, about = "Keypoint-based face reenactment and editing")]
pub struct Cli {
    /// Trained model checkpoint.
    #[arg(long, global = true, env = CHECKPOINT_ENV)]
    pub checkpoint: Option<PathBuf>,
    /// Separate checkpoint holding the expression VAE.
    #[arg(long, global = true, env = VAE_ENV)]
    pub vae: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Reenact the source face with the driving frame's motion.
    Animate(AnimateArgs),
    /// Render the source with explicit pose and expression overrides.
    Edit(EditArgs),
    /// Blend source and driving expressions through the VAE latent space.
    Interpolate(InterpolateArgs),
    /// Render the source at its neutral keypoints.
    Canonical(CanonicalArgs),
    /// Train the motion model.
    Train(TrainArgs),
    /// Fit the expression VAE on features from a trained model.
    TrainVae(TrainVaeArgs),
    /// Score reconstructions on a dataset.
    Eval(EvalArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
    /// Write a synthetic dataset as a folder of PNG sequences.
    Synth(SynthArgs),
}

fn parse_pose(s: &str) -> std::result::Result<[f64; 3], String> {
    let v: Vec<f64> = s.split(',').map(|p| p.trim().parse::<f64>().map_err(|e| e.to_string())).collect::<std::result::Result<_, _>>()?;
    v.try_into().map_err(|_| "expected yaw,pitch,roll".to_string())
}

fn parse_pair(s: &str) -> std::result::Result<[f64; 2], String> {
    let v: Vec<f64> = s.split(',').map(|p| p.trim().parse::<f64>().map_err(|e| e.to_string())).collect::<std::result::Result<_, _>>()?;
    v.try_into().map_err(|_| "expected x,y".to_string())
}

fn parse_list(s: &str) -> std::result::Result<Vec<f64>, String> {
    s.split(',').map(|p| p.trim().parse::<f64>().map_err(|e| e.to_string())).collect()
}

/// Parses a snake_case enum value through its serde representation.
fn parse_enum<T: DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

#[derive(Debug, Args)]
pub struct FrameArgs {
    #[arg(long)]
    pub source: PathBuf,
    /// Source head pose as yaw,pitch,roll in radians. Frontal when omitted.
    #[arg(long, value_parser = parse_pose, allow_hyphen_values = true)]
    pub source_pose: Option<[f64; 3]>,
    /// Output PNG.
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AnimateArgs {
    #[command(flatten)]
    pub frame: FrameArgs,
    #[arg(long)]
    pub driving: PathBuf,
    #[arg(long, value_parser = parse_pose, allow_hyphen_values = true)]
    pub driving_pose: Option<[f64; 3]>,
    /// same_identity or cross_identity.
    #[arg(long, value_parser = parse_enum::<ReenactMode>, default_value = "same_identity")]
    pub mode: ReenactMode,
    /// absolute or relative.
    #[arg(long, value_parser = parse_enum::<PoseTransfer>, default_value = "absolute")]
    pub pose: PoseTransfer,
    /// Reference driving frame for relative pose transfer.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[arg(long, value_parser = parse_pose, allow_hyphen_values = true)]
    pub reference_pose: Option<[f64; 3]>,
}

#[derive(Debug, Args)]
pub struct EditArgs {
    #[command(flatten)]
    pub frame: FrameArgs,
    #[arg(long)]
    pub driving: Option<PathBuf>,
    #[arg(long, value_parser = parse_pose, allow_hyphen_values = true)]
    pub driving_pose: Option<[f64; 3]>,
    /// Radians.
    #[arg(long, allow_hyphen_values = true)]
    pub yaw: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub pitch: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub roll: Option<f64>,
    /// x,y in normalized image coordinates.
    #[arg(long, value_parser = parse_pair, allow_hyphen_values = true)]
    pub translation: Option<[f64; 2]>,
    #[arg(long)]
    pub scale: Option<f64>,
    /// source, driving, vae_latent or neutral.
    #[arg(long, value_parser = parse_enum::<ExpressionSource>)]
    pub expression: Option<ExpressionSource>,
    /// Comma-separated latent code for vae_latent.
    #[arg(long, value_parser = parse_list, allow_hyphen_values = true)]
    pub latent: Option<Vec<f64>>,
    /// Interpolate source to driving expression in latent space.
    #[arg(long)]
    pub alpha: Option<f64>,
}

#[derive(Debug, Args)]
pub struct InterpolateArgs {
    #[command(flatten)]
    pub frame: FrameArgs,
    #[arg(long)]
    pub driving: PathBuf,
    #[arg(long, value_parser = parse_pose, allow_hyphen_values = true)]
    pub driving_pose: Option<[f64; 3]>,
    #[arg(long)]
    pub alpha: f64,
}

#[derive(Debug, Args)]
pub struct CanonicalArgs {
    #[command(flatten)]
    pub frame: FrameArgs,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Run configuration (TOML). Defaults to the small synthetic setup.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Continue from this checkpoint instead of a fresh initialization.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Overrides the configured step count.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, short)]
    pub out: PathBuf,
    /// Per-step metrics as JSON lines.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainVaeArgs {
    /// Overrides the configured step count.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Checkpoint to write: the model plus the fitted VAE.
    #[arg(long, short)]
    pub out: PathBuf,
    #[arg(long)]
    pub metrics: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// same_identity or cross_identity.
    #[arg(long, value_parser = parse_enum::<Protocol>, default_value = "same_identity")]
    pub protocol: Protocol,
    /// Dataset folder. Defaults to the data source in the checkpoint config.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Also write per-frame records as JSON lines.
    #[arg(long)]
    pub jsonl: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: String,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, short)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long)]
    pub sequences: Option<usize>,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

fn require_checkpoint(cli: &Cli) -> std::result::Result<&Path, CliError> {
    cli.checkpoint
        .as_deref()
        .ok_or_else(|| CliError::Usage(format!("no checkpoint given (use --checkpoint or {CHECKPOINT_ENV})")))
}

fn load_model(cli: &Cli) -> std::result::Result<Animator, CliError> {
    Ok(Animator::load(require_checkpoint(cli)?, cli.vae.as_deref())?)
}

fn read_b64(path: &Path) -> Result<String> {
    Ok(api::encode_b64(&std::fs::read(path)?))
}

fn write_image(out: &Path, image_b64: &str) -> Result<()> {
    std::fs::write(out, api::decode_b64(image_b64)?)?;
    Ok(())
}

fn print_json(value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string(value).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    println!("{text}");
    Ok(())
}

#[derive(Serialize)]
struct Written<'a> {
    out: &'a Path,
    keypoints: &'a [[f64; 2]],
}

fn execute(cli: Cli) -> std::result::Result<(), CliError> {
    match &cli.command {
        Command::Animate(a) => {
            let model = load_model(&cli)?;
            let body = api::AnimateBody {
                source: read_b64(&a.frame.source)?,
                driving: read_b64(&a.driving)?,
                source_pose: a.frame.source_pose,
                driving_pose: a.driving_pose,
                mode: a.mode,
                pose: a.pose,
                reference: a.reference.as_deref().map(read_b64).transpose()?,
                reference_pose: a.reference_pose,
            };
            let res = api::animate(&model, &body)?;
            write_image(&a.frame.out, &res.image)?;
            print_json(&Written { out: &a.frame.out, keypoints: &res.keypoints })?;
        }
        Command::Edit(a) => {
            let model = load_model(&cli)?;
            let body = api::EditBody {
                source: read_b64(&a.frame.source)?,
                driving: a.driving.as_deref().map(read_b64).transpose()?,
                source_pose: a.frame.source_pose,
                driving_pose: a.driving_pose,
                yaw: a.yaw,
                pitch: a.pitch,
                roll: a.roll,
                translation: a.translation,
                scale: a.scale,
                expression: a.expression,
                latent: a.latent.clone(),
                alpha: a.alpha,
            };
            let res = api::edit(&model, &body)?;
            write_image(&a.frame.out, &res.image)?;
            print_json(&Written { out: &a.frame.out, keypoints: &res.keypoints })?;
        }
        Command::Interpolate(a) => {
            let model = load_model(&cli)?;
            let body = api::InterpolateBody {
                source: read_b64(&a.frame.source)?,
                driving: read_b64(&a.driving)?,
                alpha: a.alpha,
                source_pose: a.frame.source_pose,
                driving_pose: a.driving_pose,
            };
            let res = api::interpolate(&model, &body)?;
            write_image(&a.frame.out, &res.image)?;
            print_json(&Written { out: &a.frame.out, keypoints: &res.keypoints })?;
        }
        Command::Canonical(a) => {
            let model = load_model(&cli)?;
            let res = api::canonical(&model, &read_b64(&a.frame.source)?, a.frame.source_pose)?;
            write_image(&a.frame.out, &res.image)?;
            print_json(&Written { out: &a.frame.out, keypoints: &res.keypoints })?;
        }
        Command::Train(a) => train(a)?,
        Command::TrainVae(a) => train_vae(require_checkpoint(&cli)?, a)?,
        Command::Eval(a) => {
            let model = load_model(&cli)?;
            let size = model.config().net.image_size;
            let dataset = match &a.data {
                Some(path) => facemotion::pipeline::ingest_folder(path, size)?,
                None => load_dataset(&model.config().data, size)?,
            };
            let report = evaluate(&model, &dataset, a.protocol)?;
            println!("{}", report.to_table());
            if let Some(path) = &a.jsonl {
                std::fs::write(path, report.to_jsonl()?)?;
            }
        }
        Command::Serve(a) => {
            let path = require_checkpoint(&cli)?.to_path_buf();
            let model = load_model(&cli)?;
            let state = service::AppState::new(model, Some(path), cli.vae.clone());
            let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
            rt.block_on(service::serve(state, &a.addr))?;
        }
        Command::Synth(a) => {
            let defaults = SyntheticConfig::default();
            let cfg = SyntheticConfig {
                sequences: a.sequences.unwrap_or(defaults.sequences),
                frames_per_sequence: a.frames.unwrap_or(defaults.frames_per_sequence),
                seed: a.seed.unwrap_or(defaults.seed),
                ..defaults
            };
            let ds = synthetic_dataset(&cfg, a.size)?;
            write_folder(&ds, &a.out)?;
            log::info!("wrote {} frames to {}", ds.num_frames(), a.out.display());
        }
    }
    Ok(())
}

fn train(a: &TrainArgs) -> Result<()> {
    let mut state = match (&a.resume, &a.config) {
        (Some(path), _) => Checkpoint::load(path)?.restore()?,
        (None, Some(path)) => TrainState::new(&RunConfig::load(path)?)?,
        (None, None) => TrainState::new(&RunConfig::toy())?,
    };
    let steps = a.steps.unwrap_or(state.config.steps) as u64;
    let dataset = load_dataset(&state.config.data, state.config.net.image_size)?;
    let every = state.config.checkpoint_every.max(1) as u64;
    let started = Instant::now();
    while state.step < steps {
        let m = state.train_on(&dataset)?;
        if let Some(path) = &a.metrics {
            append_jsonl(path, &m)?;
        }
        if m.step % every == 0 || m.step == steps {
            Checkpoint::from_state(&state, None).save(&a.out)?;
            log::info!(
                "step {} total {:.4} l1 {:.4} ({:.0}s)",
                m.step,
                m.losses["total"],
                m.reconstruction_l1,
                started.elapsed().as_secs_f64()
            );
        }
    }
    if !a.out.exists() {
        Checkpoint::from_state(&state, None).save(&a.out)?;
    }
    Ok(())
}

fn train_vae(checkpoint: &Path, a: &TrainVaeArgs) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let state = ckpt.restore()?;
    let cfg = &state.config;
    let mut vae = match ckpt.restore_vae() {
        Ok(v) => v,
        Err(Error::MissingVae) => VaeState::new(&cfg.vae, cfg.seed, cfg.optim.beta1, cfg.optim.beta2, cfg.optim.eps)?,
        Err(e) => return Err(e),
    };
    let dataset = load_dataset(&cfg.data, cfg.net.image_size)?;
    let features = expression_features(&state.nets, &dataset)?;
    let steps = a.steps.unwrap_or(cfg.vae_steps) as u64;
    while vae.step < steps {
        let m = vae.train_on(&features)?;
        if let Some(path) = &a.metrics {
            append_jsonl(path, &m)?;
        }
        if m.step % 100 == 0 {
            log::info!("vae step {} total {:.4} kl {:.4}", m.step, m.total, m.kl);
        }
    }
    let (_, report) = vae.diagnose(&features)?;
    log::info!("active units {} of {}", report.active_units, report.mu_variance.len());
    Checkpoint::from_state(&state, Some(&vae)).save(&a.out)
}
