//! Command-line interface wiring. The binary is a thin shell over
//! [`run`], which parses arguments, loads configuration, and dispatches
//! to the library crates.
//!
//! Exit codes: 0 success, 2 usage, 3 configuration, 4 runtime failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command as Proc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

use uwm_core::container::{write_tensors, ContainerError, TensorData};
use uwm_core::parallel::set_workers;
use uwm_model::layout::Mode;
use uwm_train::ablate::run_ablation;
use uwm_train::config::{apply_overrides, ConfigError, RunConfig};
use uwm_train::report::{evaluate, write_reports, VariantOutcome, VariantRow};
use uwm_train::trainer::{resume_training, run_stage, Pipeline, Stage, TrainError};
use uwm_train::{eval, report};
use uwm_world::{
    generate_episode, load_dataset, save_dataset, DatasetError, Episode, WorldError,
};

#[derive(Debug, Error)]
enum CliError {
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error("missing required flag: --{0}")]
    MissingFlag(&'static str),
    #[error("world: {0}")]
    World(#[from] WorldError),
    #[error("dataset: {0}")]
    Dataset(#[from] DatasetError),
    #[error("train: {0}")]
    Train(#[from] TrainError),
    #[error("report: {0}")]
    Report(#[from] report::ReportError),
    #[error("image: {0}")]
    Image(#[from] image::ImageError),
    #[error("container: {0}")]
    Container(#[from] ContainerError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::MissingFlag(_) => 3,
            _ => 4,
        }
    }
}

#[derive(Parser)]
#[command(
    name = "uwm",
    version,
    about = "Driving world model: dataset generation, staged training, evaluation, \
             future-frame generation, and ablations"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; built-in defaults when omitted.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Master seed for data generation, initialization, and sampling.
    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// Directory all artifacts are written under.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,

    /// Override one config entry, e.g. `--set train.lr=1e-4`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    set: Vec<String>,

    /// Worker threads for the data-parallel sections.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Ar,
    Fm,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate an episode dataset with a manifest.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Pretrain the image tokenizer and the semantic autoencoder.
    TrainTokenizer {
        #[command(flatten)]
        common: Common,
        /// Saved dataset directory; regenerated from the config when omitted.
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
    },
    /// Pretrain the detection head on encoded scenes.
    PretrainPerception {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
    },
    /// Run the joint stages: alignment, then instruction mixing.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// Continue an interrupted joint stage from this checkpoint.
        #[arg(long, value_name = "PATH")]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint: displacement, collisions, detection, FID.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// Also dump per-frame displacement and collision indicators.
        #[arg(long)]
        verbose: bool,
    },
    /// Roll a checkpoint forward and write predicted frames and plans.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// Generation head: discrete autoregressive or flow matching.
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Euler steps for the flow-matching sampler.
        #[arg(long = "fm-steps", value_name = "N")]
        fm_steps: Option<usize>,
        /// Frame index to roll from in each episode.
        #[arg(long, default_value_t = 0)]
        frame: usize,
    },
    /// Train and score the component and head-ordering ablation grids.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
    },
}

impl Cmd {
    fn common(&self) -> &Common {
        match self {
            Cmd::GenData { common }
            | Cmd::TrainTokenizer { common, .. }
            | Cmd::PretrainPerception { common, .. }
            | Cmd::Train { common, .. }
            | Cmd::Eval { common, .. }
            | Cmd::Generate { common, .. }
            | Cmd::Ablate { common, .. } => common,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Cmd::GenData { .. } => "gen-data",
            Cmd::TrainTokenizer { .. } => "train-tokenizer",
            Cmd::PretrainPerception { .. } => "pretrain-perception",
            Cmd::Train { .. } => "train",
            Cmd::Eval { .. } => "eval",
            Cmd::Generate { .. } => "generate",
            Cmd::Ablate { .. } => "ablate",
        }
    }
}

/// Parse argv and dispatch; returns the process exit code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    if let Some(n) = cli.cmd.common().workers {
        set_workers(n);
    }
    match dispatch(&cli.cmd) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn load_config(common: &Common) -> Result<RunConfig, ConfigError> {
    let mut value = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path)?;
            serde_json::from_str(&text)?
        }
        None => RunConfig::default().to_value(),
    };
    apply_overrides(&mut value, &common.set)?;
    RunConfig::from_value(value)
}

/// Episodes from a saved dataset, or regenerated from (config, seed).
fn load_episodes(
    cfg: &RunConfig,
    seed: u64,
    data: Option<&Path>,
) -> Result<Vec<Episode>, CliError> {
    match data {
        Some(dir) => {
            let (manifest, episodes) = load_dataset(dir)?;
            if serde_json::to_value(&manifest.config)? != serde_json::to_value(&cfg.world)? {
                return Err(ConfigError::Key(format!(
                    "world section differs from the dataset manifest in {}",
                    dir.display()
                ))
                .into());
            }
            Ok(episodes)
        }
        None => (0..cfg.data.episodes)
            .map(|i| generate_episode(seed.wrapping_add(i as u64), &cfg.world))
            .collect::<Result<_, _>>()
            .map_err(Into::into),
    }
}

fn git_describe() -> Option<String> {
    let out = Proc::new("git").args(["describe", "--always", "--dirty"]).output().ok()?;
    if !out.status.success() {
        return None;
    }
    let s = String::from_utf8(out.stdout).ok()?;
    let trimmed = s.trim();
    (!trimmed.is_empty()).then(|| trimmed.to_string())
}

/// Provenance record every subcommand leaves beside its artifacts.
fn write_run_json(common: &Common, command: &str, cfg: &RunConfig) -> Result<(), CliError> {
    fs::create_dir_all(&common.out)?;
    let record = serde_json::json!({
        "command": command,
        "seed": common.seed,
        "config_hash": cfg.hash(),
        "overrides": common.set,
        "git": git_describe(),
    });
    fs::write(
        common.out.join("run.json"),
        serde_json::to_string_pretty(&record)? + "\n",
    )?;
    Ok(())
}

fn dispatch(cmd: &Cmd) -> Result<(), CliError> {
    match cmd {
        Cmd::GenData { common } => {
            let cfg = load_config(common)?;
            write_run_json(common, cmd.name(), &cfg)?;
            let episodes = load_episodes(&cfg, common.seed, None)?;
            save_dataset(&common.out, &cfg.world, &episodes)?;
            println!(
                "wrote {} episodes to {}",
                episodes.len(),
                common.out.display()
            );
            Ok(())
        }
        Cmd::TrainTokenizer { common, data } => {
            let cfg = load_config(common)?;
            write_run_json(common, cmd.name(), &cfg)?;
            let episodes = load_episodes(&cfg, common.seed, data.as_deref())?;
            let path = run_stage(
                Stage::PretrainTokenizer,
                &cfg,
                &episodes,
                &common.out,
                common.seed,
            )?;
            println!("wrote {}", path.display());
            Ok(())
        }
        Cmd::PretrainPerception { common, data } => {
            let cfg = load_config(common)?;
            write_run_json(common, cmd.name(), &cfg)?;
            let episodes = load_episodes(&cfg, common.seed, data.as_deref())?;
            let path = run_stage(
                Stage::PretrainPerception,
                &cfg,
                &episodes,
                &common.out,
                common.seed,
            )?;
            println!("wrote {}", path.display());
            Ok(())
        }
        Cmd::Train { common, data, resume } => {
            let cfg = load_config(common)?;
            write_run_json(common, cmd.name(), &cfg)?;
            let episodes = load_episodes(&cfg, common.seed, data.as_deref())?;
            if let Some(ckpt) = resume {
                let path = resume_training(ckpt, &episodes, &common.out)?;
                println!("wrote {}", path.display());
                return Ok(());
            }
            for stage in [Stage::Stage1, Stage::Stage2] {
                let artifact = common.out.join(stage.artifact());
                if artifact.exists() {
                    println!("keeping finished {}", artifact.display());
                    continue;
                }
                let path = run_stage(stage, &cfg, &episodes, &common.out, common.seed)?;
                println!("wrote {}", path.display());
            }
            Ok(())
        }
        Cmd::Eval { common, checkpoint, data, verbose } => {
            let ckpt = checkpoint.as_ref().ok_or(CliError::MissingFlag("checkpoint"))?;
            let mut pipe = Pipeline::load(ckpt, true)?;
            override_eval_section(&mut pipe, &common.set)?;
            write_run_json(common, cmd.name(), &pipe.cfg)?;
            let episodes = load_episodes(&pipe.cfg, common.seed, data.as_deref())?;
            let report = evaluate(&pipe, &episodes, *verbose)?;
            let horizons = eval::horizons(pipe.cfg.world.horizon);
            let row = VariantRow {
                variant: "model".into(),
                order: report.order.clone(),
                outcome: VariantOutcome::Evaluated(report),
            };
            write_reports(
                &common.out,
                &serde_json::to_value(&row)?,
                std::slice::from_ref(&row),
                &horizons,
            )?;
            println!("wrote {}", common.out.join("metrics.json").display());
            Ok(())
        }
        Cmd::Generate { common, checkpoint, data, mode, fm_steps, frame } => {
            let ckpt = checkpoint.as_ref().ok_or(CliError::MissingFlag("checkpoint"))?;
            let mut pipe = Pipeline::load(ckpt, true)?;
            if let Some(m) = mode {
                pipe.cfg.train.mode = match m {
                    ModeArg::Ar => Mode::Ar,
                    ModeArg::Fm => Mode::Fm,
                };
            }
            if let Some(n) = fm_steps {
                pipe.cfg.fm.n_steps = *n;
            }
            write_run_json(common, cmd.name(), &pipe.cfg)?;
            let episodes = load_episodes(&pipe.cfg, common.seed, data.as_deref())?;
            generate_outputs(&pipe, &episodes, *frame, common)?;
            Ok(())
        }
        Cmd::Ablate { common, data } => {
            let cfg = load_config(common)?;
            write_run_json(common, cmd.name(), &cfg)?;
            let episodes = load_episodes(&cfg, common.seed, data.as_deref())?;
            run_ablation(&cfg, &episodes, &common.out, common.seed)?;
            println!("wrote {}", common.out.join("metrics.json").display());
            Ok(())
        }
    }
}

/// Post-load overrides for a checkpointed model: only the evaluation
/// section is adjustable, everything else is burned into the weights.
fn override_eval_section(pipe: &mut Pipeline, sets: &[String]) -> Result<(), CliError> {
    if sets.is_empty() {
        return Ok(());
    }
    for s in sets {
        let key = s.split('=').next().unwrap_or(s);
        if !key.starts_with("eval.") {
            return Err(ConfigError::Key(format!(
                "{key}: only eval.* settings apply to a loaded checkpoint"
            ))
            .into());
        }
    }
    let mut value = pipe.cfg.to_value();
    apply_overrides(&mut value, sets)?;
    pipe.cfg = RunConfig::from_value(value)?;
    Ok(())
}

/// Render a flat `(3,h,w)` raster in [0,1] as an RGB png.
fn write_png(path: &Path, pixels: &[f32], h: usize, w: usize) -> Result<(), CliError> {
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = |c: usize| {
                (pixels[c * h * w + y * w + x].clamp(0.0, 1.0) * 255.0).round() as u8
            };
            img.put_pixel(x as u32, y as u32, image::Rgb([px(0), px(1), px(2)]));
        }
    }
    img.save(path)?;
    Ok(())
}

/// One rollout per episode: a png preview plus a container holding the
/// raster and the planned trajectory.
fn generate_outputs(
    pipe: &Pipeline,
    episodes: &[Episode],
    frame: usize,
    common: &Common,
) -> Result<(), CliError> {
    fs::create_dir_all(&common.out)?;
    for (e, ep) in episodes.iter().enumerate() {
        if frame >= ep.usable {
            return Err(ConfigError::Key(format!(
                "frame {frame} outside the {} usable frames of episode {e}",
                ep.usable
            ))
            .into());
        }
        let roll = pipe.rollout(ep, frame, common.seed.wrapping_add(e as u64))?;
        let stem = format!("ep_{e:05}");
        let mut entries: Vec<(String, TensorData)> = Vec::new();
        if let Some((pixels, h, w)) = &roll.frame {
            write_png(&common.out.join(format!("{stem}.png")), pixels, *h, *w)?;
            entries.push((
                "pixels".into(),
                TensorData::F32 { dims: vec![3, *h, *w], data: pixels.clone() },
            ));
        }
        if let Some(traj) = &roll.traj {
            let data: Vec<f32> = traj.iter().map(|&v| v as f32).collect();
            entries.push((
                "trajectory".into(),
                TensorData::F32 { dims: vec![traj.nrows(), traj.ncols()], data },
            ));
        }
        if !entries.is_empty() {
            write_tensors(&common.out.join(format!("{stem}.uwm")), &entries)?;
        }
    }
    println!("wrote {} rollouts to {}", episodes.len(), common.out.display());
    Ok(())
}
