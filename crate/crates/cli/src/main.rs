use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use mvinpaint::config::{PipelineConfig, Targets};
use mvinpaint::pipeline::{run, run_stage, Stage};
use mvinpaint::synth::{render_scene, write_scene, SceneParams};
use mvinpaint::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_PIPELINE: u8 = 3;

#[derive(Parser)]
#[command(name = "mvinpaint", version, about = "Remove masked objects from RGB-D sequences")]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Pipeline configuration file (key = value lines).
    #[arg(long)]
    config: PathBuf,

    /// Target frame id; repeat for several. Overrides `targets`.
    #[arg(long = "target")]
    targets: Vec<usize>,

    /// Output directory. Overrides `output`.
    #[arg(long)]
    out: Option<PathBuf>,

    /// Override a config key, e.g. `--set lambda2=0.5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the whole pipeline.
    Run {
        #[command(flatten)]
        common: Common,

        /// Write intermediate images, tables and stage artifacts.
        #[arg(long)]
        debug: bool,
    },
    /// Run a single stage on artifacts of the previous one.
    Stage {
        /// select, warp, combine, color or depth.
        name: String,

        #[command(flatten)]
        common: Common,
    },
    /// Render a synthetic test sequence with ground truth.
    Synth {
        #[arg(long)]
        out: PathBuf,

        #[arg(long, default_value_t = 60)]
        frames: usize,

        #[arg(long, default_value_t = 320)]
        width: usize,

        #[arg(long, default_value_t = 240)]
        height: usize,

        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load_config(common: &Common) -> Result<PipelineConfig, Error> {
    let mut cfg = PipelineConfig::load(&common.config)?;
    for kv in &common.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if !common.targets.is_empty() {
        cfg.targets = Targets::Ids(common.targets.clone());
    }
    if let Some(out) = &common.out {
        cfg.output = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => EXIT_USAGE,
        Error::Input(_) | Error::Frame { .. } | Error::Io(_) | Error::Image(_) | Error::MissingArtifact(_) | Error::Artifact { .. } => EXIT_DATA,
        _ => EXIT_PIPELINE,
    }
}

fn fail(e: Error) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(exit_code(&e))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    match cli.command {
        Command::Run { common, debug } => {
            let mut cfg = match load_config(&common) {
                Ok(c) => c,
                Err(e) => return fail(e),
            };
            cfg.debug |= debug;
            let report = match run(&cfg) {
                Ok(r) => r,
                Err(e) => return fail(e),
            };
            print!("{}", report.to_text());
            let residual: usize = report.frames.iter().map(|f| f.residual_pixels).sum();
            if report.failed_masks() > 0 || residual > 0 {
                eprintln!("error: {} mask(s) failed, {residual} pixel(s) left unfilled", report.failed_masks());
                return ExitCode::from(EXIT_PIPELINE);
            }
            ExitCode::SUCCESS
        }
        Command::Stage { name, common } => {
            let Some(stage) = Stage::parse(&name) else {
                eprintln!("error: unknown stage {name:?} (expected select, warp, combine, color or depth)");
                return ExitCode::from(EXIT_USAGE);
            };
            let cfg = match load_config(&common) {
                Ok(c) => c,
                Err(e) => return fail(e),
            };
            match run_stage(&cfg, stage) {
                Ok(files) => {
                    for f in files {
                        println!("{}", f.display());
                    }
                    ExitCode::SUCCESS
                }
                Err(e) => fail(e),
            }
        }
        Command::Synth {
            out,
            frames,
            width,
            height,
            seed,
        } => {
            let params = SceneParams {
                frames,
                width,
                height,
                focal: SceneParams::default().focal * width as f64 / 320.0,
                seed,
                ..SceneParams::default()
            };
            let result = write_scene(&out, &render_scene(&params)).with_context(|| format!("writing {}", out.display()));
            match result {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => {
                    eprintln!("error: {e:#}");
                    ExitCode::from(EXIT_DATA)
                }
            }
        }
    }
}
