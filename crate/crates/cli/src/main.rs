use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::bail;
use clap::{Args, Parser, Subcommand, ValueEnum};
use longedit_core::config::{preset_for_task, ControlType, EditConfig, Resolution, TaskKind};
use longedit_core::diffusion::{Backbone, ToyBackend, ToyCrossAttention};
use longedit_core::interpolation::{Interpolator, MidpointInterpolator};
use longedit_core::metrics::PooledEmbedder;
use longedit_core::pipeline::{
    error_report, evaluate_files, run_job, write_error, write_json, DiskStore, InversionPass, JobAdapters, JobSpec,
};
use longedit_core::video::{frame_grid, load_video, save_image, LoadOptions};
use longedit_core::Error;

#[derive(Parser)]
#[command(name = "longedit", version, args_override_self = true, about = "Text-driven editing of long videos, one window at a time")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Edit a video and write the result with metrics and provenance.
    Edit(EditArgs),
    /// Precompute inversion trajectories into a cache directory.
    Invert(InvertArgs),
    /// Score an edited video against its source.
    Evaluate(EvaluateArgs),
    /// Write a grid of evenly spaced frames.
    Preview(PreviewArgs),
    /// Print the default configuration of a task kind.
    Preset(PresetArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendKind {
    /// Deterministic analytic backbone without weights.
    Toy,
}

#[derive(Args)]
struct BackendArgs {
    #[arg(long, value_enum, default_value = "toy")]
    backend: BackendKind,
    /// Attention coupling of the toy backbone.
    #[arg(long, default_value_t = 0.5, allow_negative_numbers = true)]
    toy_coupling: f64,
}

impl BackendArgs {
    fn build(&self) -> Box<dyn Backbone> {
        match self.backend {
            BackendKind::Toy => Box::new(
                ToyBackend::new()
                    .with_attention_coupling(self.toy_coupling)
                    .with_cross_attention(ToyCrossAttention::ContentDependent),
            ),
        }
    }
}

/// Config file plus per-field overrides.
#[derive(Args)]
struct ConfigArgs {
    /// TOML or JSON config; without it the task preset is used.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Task preset to start from when no config file is given.
    #[arg(long)]
    task: Option<TaskKind>,
    #[arg(long)]
    source_prompt: Option<String>,
    #[arg(long)]
    target_prompt: Option<String>,
    /// Object word(s) of the source prompt; repeat for several.
    #[arg(long = "object-token")]
    object_tokens: Vec<String>,
    #[arg(long)]
    window_size: Option<usize>,
    #[arg(long)]
    num_steps: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    guidance_scale: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    control_scale: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    fusion_gamma: Option<f64>,
    #[arg(long)]
    gamma_cutoff_step: Option<usize>,
    #[arg(long)]
    fusion_cutoff_step: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    mask_threshold: Option<f64>,
    #[arg(long)]
    control_type: Option<ControlType>,
    #[arg(long)]
    seed: Option<u64>,
    /// Frame size as HxW, e.g. 512x512.
    #[arg(long)]
    resolution: Option<Resolution>,
    #[arg(long)]
    use_mask: Option<bool>,
    #[arg(long)]
    mask_inverted: Option<bool>,
    #[arg(long, allow_negative_numbers = true)]
    canny_low: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    canny_high: Option<f64>,
    #[arg(long)]
    capture_max_resolution: Option<usize>,
}

impl ConfigArgs {
    fn resolve(&self) -> anyhow::Result<EditConfig> {
        let mut c = match (&self.config, self.task) {
            (Some(path), _) => EditConfig::load(path)?,
            (None, Some(task)) => preset_for_task(task),
            (None, None) => bail!("give --config or --task"),
        };
        macro_rules! set {
            ($($field:ident),*) => {$(
                if let Some(v) = self.$field.clone() {
                    c.$field = v;
                }
            )*};
        }
        set!(
            source_prompt,
            target_prompt,
            window_size,
            num_steps,
            guidance_scale,
            control_scale,
            fusion_gamma,
            gamma_cutoff_step,
            fusion_cutoff_step,
            mask_threshold,
            control_type,
            seed,
            resolution,
            use_mask,
            mask_inverted,
            capture_max_resolution
        );
        if !self.object_tokens.is_empty() {
            c.object_tokens = self.object_tokens.clone();
        }
        if let Some(v) = self.canny_low {
            c.canny.low_threshold = v;
        }
        if let Some(v) = self.canny_high {
            c.canny.high_threshold = v;
        }
        Ok(c)
    }
}

#[derive(Args)]
struct EditArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    backend: BackendArgs,
    /// Frame directory, GIF, or any container ffmpeg reads.
    #[arg(long, short)]
    input: PathBuf,
    /// Output directory.
    #[arg(long, short)]
    output: PathBuf,
    /// File name of the edited video inside the output directory.
    #[arg(long, default_value = "edited.gif")]
    video_name: String,
    #[arg(long)]
    max_frames: Option<usize>,
    /// Skip both smoothing stages.
    #[arg(long)]
    no_interpolation: bool,
    #[arg(long)]
    dump_frames: bool,
    #[arg(long)]
    dump_masks: bool,
    #[arg(long)]
    dump_control: bool,
    /// Keep inversion trajectories on disk instead of in memory.
    #[arg(long)]
    spill_inversion: bool,
    /// Reuse trajectories written by `invert`.
    #[arg(long)]
    inversion_cache: Option<PathBuf>,
}

#[derive(Args)]
struct InvertArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    backend: BackendArgs,
    #[arg(long, short)]
    input: PathBuf,
    /// Cache directory to write.
    #[arg(long)]
    cache: PathBuf,
    #[arg(long)]
    max_frames: Option<usize>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    edited: PathBuf,
    #[arg(long)]
    target_prompt: String,
    /// Resize both clips to HxW; defaults to the edited clip's size.
    #[arg(long)]
    resolution: Option<Resolution>,
    /// Write the report here instead of stdout.
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct PreviewArgs {
    #[arg(long, short)]
    input: PathBuf,
    /// PNG to write.
    #[arg(long, short)]
    output: PathBuf,
    #[arg(long, default_value_t = 8)]
    frames: usize,
    #[arg(long)]
    resolution: Option<Resolution>,
}

#[derive(Args)]
struct PresetArgs {
    task: TaskKind,
    /// Print JSON instead of TOML.
    #[arg(long)]
    json: bool,
}

fn edit(args: EditArgs) -> anyhow::Result<()> {
    let config = match args.config.resolve().and_then(|c| Ok(c.validated()?)) {
        Ok(c) => c,
        Err(e) => {
            if let Some(core) = e.downcast_ref::<Error>() {
                write_error(&args.output, core)?;
            }
            return Err(e);
        }
    };
    let backbone = args.backend.build();
    let psi: Option<&dyn Interpolator> = (!args.no_interpolation).then_some(&MidpointInterpolator);
    let mut spec = JobSpec::new(config, &args.input, &args.output);
    spec.video_name = args.video_name;
    spec.max_frames = args.max_frames;
    spec.dump_frames = args.dump_frames;
    spec.dump_masks = args.dump_masks;
    spec.dump_control = args.dump_control;
    spec.spill_inversion = args.spill_inversion;
    spec.inversion_cache = args.inversion_cache;
    let adapters = JobAdapters {
        backbone: backbone.as_ref(),
        interpolator: psi,
        control_model: None,
        embedder: &PooledEmbedder::default(),
    };
    let (_, artifacts) = run_job(&spec, &adapters)?;
    println!("{}", serde_json::to_string_pretty(&artifacts)?);
    Ok(())
}

fn invert(args: InvertArgs) -> anyhow::Result<()> {
    let config = args.config.resolve()?.validated()?;
    let backbone = args.backend.build();
    let clip = load_video(
        &args.input,
        &LoadOptions {
            resolution: Some(config.resolution),
            max_frames: args.max_frames,
        },
    )?;
    let pass = InversionPass::new(backbone.as_ref(), &config, config.use_mask)?;
    let store = DiskStore::create(&args.cache, pass.manifest(&config, clip.len())?)?;
    pass.run(&clip, &store)?;
    println!("inverted {} frames into {}", clip.len(), args.cache.display());
    Ok(())
}

fn evaluate(args: EvaluateArgs) -> anyhow::Result<()> {
    let report = evaluate_files(
        &args.source,
        &args.edited,
        &args.target_prompt,
        args.resolution,
        &PooledEmbedder::default(),
    )?;
    match args.output {
        Some(path) => write_json(&path, &report)?,
        None => println!("{}", report.to_json()?),
    }
    Ok(())
}

fn preview(args: PreviewArgs) -> anyhow::Result<()> {
    let clip = load_video(
        &args.input,
        &LoadOptions {
            resolution: args.resolution,
            max_frames: None,
        },
    )?;
    if args.frames == 0 {
        bail!("--frames must be at least 1");
    }
    save_image(&frame_grid(&clip, args.frames), &args.output)?;
    Ok(())
}

fn preset(args: PresetArgs) -> anyhow::Result<()> {
    let c = preset_for_task(args.task);
    if args.json {
        println!("{}", c.to_json_string()?);
    } else {
        print!("{}", c.to_toml_string()?);
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Edit(a) => edit(a),
        Command::Invert(a) => invert(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Preview(a) => preview(a),
        Command::Preset(a) => preset(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let report = match e.downcast_ref::<Error>() {
                Some(core) => error_report(core),
                None => serde_json::json!({"kind": "usage", "message": format!("{e:#}")}),
            };
            eprintln!("{report}");
            ExitCode::FAILURE
        }
    }
}
