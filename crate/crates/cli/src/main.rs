//! Command-line driver: data generation, SpaDe and backbone training,
//! plug-and-play preprocessing and evaluation.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use alldepth::depthmap::io::Split;
use alldepth::depthmap::Tag;
use alldepth::ErrorClass;
use clap::{Parser, Subcommand, ValueEnum};

use commands::{Context, EvaluateArgs, ModelSpec, ReportFormats, StageSel};
use config::RunConfig;

#[derive(Parser, Debug)]
#[command(
    name = "alldepth",
    version,
    about = "Depth completion with uncertainty-aware preprocessing and fusion"
)]
struct Cli {
    /// TOML run configuration; command-line flags take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// More log output (-v info, -vv debug). `RUST_LOG` overrides.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic dataset with a manifest.
    GenerateData {
        #[arg(long)]
        scenes: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Fraction of scenes rendered at night.
        #[arg(long)]
        night_ratio: Option<f64>,
    },
    /// Train SpaDe: stage 1 (depth), stage 2 (uncertainty) or both.
    TrainSpade {
        #[arg(long, value_name = "MANIFEST")]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "both")]
        stage: StageArg,
        /// Output checkpoint; also the stage-1 input for `--stage 2` unless `--init` is given.
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        init: Option<PathBuf>,
        /// Loss curve CSV (defaults next to the checkpoint).
        #[arg(long)]
        losses: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write SpaDe-merged sparse maps as a new dataset.
    Preprocess {
        #[arg(long, value_name = "MANIFEST")]
        data: PathBuf,
        #[arg(long)]
        spade_ckpt: PathBuf,
        /// Log-uncertainty threshold; `-inf` keeps the input unchanged.
        #[arg(long, allow_hyphen_values = true)]
        tau: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a backbone on raw sparse input.
    TrainBackbone {
        #[arg(long, value_name = "MANIFEST")]
        data: PathBuf,
        /// Registry name.
        #[arg(long)]
        backbone: Option<String>,
        #[arg(long)]
        ckpt: PathBuf,
        /// Restrict training to one illumination tag.
        #[arg(long, value_enum, default_value = "all")]
        tag: TagArg,
        #[arg(long)]
        losses: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a backbone with uncertainty-driven residual learning on top of a frozen SpaDe.
    TrainUrl {
        #[arg(long, value_name = "MANIFEST")]
        data: PathBuf,
        #[arg(long)]
        spade_ckpt: PathBuf,
        #[arg(long)]
        backbone: Option<String>,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        losses: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate models per day/night/all split.
    Evaluate {
        #[arg(long, value_name = "MANIFEST")]
        data: PathBuf,
        /// gt | spade=CKPT | backbone=CKPT | pnp=SPADE,BACKBONE | url=SPADE,BACKBONE (repeatable).
        #[arg(long = "model", required = true)]
        models: Vec<ModelSpec>,
        #[arg(long, value_enum, default_value = "both")]
        report: ReportArg,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        out: PathBuf,
        /// Write error and uncertainty maps for this many samples per model.
        #[arg(long, default_value_t = 0)]
        plots: usize,
    },
    /// Print the effective configuration and its digest.
    ShowConfig,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    Both,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TagArg {
    Day,
    Night,
    All,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ReportArg {
    Csv,
    Markdown,
    Both,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Test,
    All,
}

fn run(cli: Cli) -> alldepth::Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::GenerateData {
            scenes,
            out,
            seed,
            night_ratio,
        } => {
            if let Some(n) = scenes {
                cfg.data.scenes = n;
            }
            if let Some(s) = seed {
                cfg.data.seed = s;
            }
            if let Some(r) = night_ratio {
                cfg.data.dataset.day_ratio = 1.0 - r;
            }
            commands::generate_data(&Context::new(cfg)?, &out)?;
        }
        Command::TrainSpade {
            data,
            stage,
            ckpt,
            init,
            losses,
            seed,
        } => {
            if let Some(s) = seed {
                cfg.spade.seed = s;
            }
            let stage = match stage {
                StageArg::One => StageSel::One,
                StageArg::Two => StageSel::Two,
                StageArg::Both => StageSel::Both,
            };
            let ctx = Context::new(cfg)?;
            commands::train_spade(
                &ctx,
                &data,
                stage,
                &ckpt,
                init.as_deref(),
                losses.as_deref(),
            )?;
        }
        Command::Preprocess {
            data,
            spade_ckpt,
            tau,
            out,
        } => {
            if let Some(t) = tau {
                cfg.url.fusion.tau = t;
            }
            commands::preprocess(&Context::new(cfg)?, &data, &spade_ckpt, &out)?;
        }
        Command::TrainBackbone {
            data,
            backbone,
            ckpt,
            tag,
            losses,
            seed,
        } => {
            if let Some(b) = backbone {
                cfg.backbone.name = b;
            }
            if let Some(s) = seed {
                cfg.backbone.train.seed = s;
            }
            let tag = match tag {
                TagArg::Day => Some(Tag::Day),
                TagArg::Night => Some(Tag::Night),
                TagArg::All => None,
            };
            commands::train_sparse_backbone(
                &Context::new(cfg)?,
                &data,
                tag,
                &ckpt,
                losses.as_deref(),
            )?;
        }
        Command::TrainUrl {
            data,
            spade_ckpt,
            backbone,
            ckpt,
            losses,
            seed,
        } => {
            if let Some(b) = backbone {
                cfg.backbone.name = b;
            }
            if let Some(s) = seed {
                cfg.url.seed = s;
            }
            commands::train_url_backbone(
                &Context::new(cfg)?,
                &data,
                &spade_ckpt,
                &ckpt,
                losses.as_deref(),
            )?;
        }
        Command::Evaluate {
            data,
            models,
            report,
            split,
            out,
            plots,
        } => {
            let formats = ReportFormats {
                csv: matches!(report, ReportArg::Csv | ReportArg::Both),
                markdown: matches!(report, ReportArg::Markdown | ReportArg::Both),
            };
            let split = match split {
                SplitArg::Train => Some(Split::Train),
                SplitArg::Test => Some(Split::Test),
                SplitArg::All => None,
            };
            let args = EvaluateArgs {
                data: &data,
                models: &models,
                split,
                formats,
                out: &out,
                plots,
            };
            commands::evaluate_models(&Context::new(cfg)?, &args)?;
        }
        Command::ShowConfig => {
            let ctx = Context::new(cfg)?;
            print!("{}", ctx.cfg.to_toml());
            println!("# digest {}", ctx.digest);
        }
    }
    Ok(())
}

fn exit_code(class: ErrorClass) -> u8 {
    match class {
        ErrorClass::Io => 1,
        ErrorClass::Config => 2,
        ErrorClass::Numerical => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.class()))
        }
    }
}
