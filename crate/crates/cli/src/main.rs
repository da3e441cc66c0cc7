//! `trafficmoe` command line: one pipeline stage per invocation.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use trafficmoe::pipeline::{self, Command, Config, EvalSplit, TrainTarget};
use trafficmoe::Error;

#[derive(Parser)]
#[command(name = "trafficmoe", version, about = "Mixture-of-experts traffic speed forecasting pipeline")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args)]
struct Global {
    /// TOML or JSON configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configuration seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory holding all artifacts.
    #[arg(long, global = true, default_value = ".")]
    workdir: PathBuf,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic scenario into raw/.
    Synth,
    /// Align raw CSVs onto the time grid.
    Ingest,
    /// Compute slowdown speed and the denoised incident indicator.
    Denoise,
    /// Build the feature tensor and the day split.
    Featurize,
    /// Train a model.
    Train {
        #[arg(value_enum)]
        target: Target,
    },
    /// Score every trained model on the test split.
    Evaluate {
        #[arg(value_enum, default_value = "all")]
        split: Split,
    },
    /// Attention profiles and variable importance per condition.
    Interpret,
    /// Assemble result tables and figure data.
    Report,
    /// Print the effective configuration as TOML.
    Config,
}

#[derive(Clone, Copy, ValueEnum)]
enum Target {
    Recurrent,
    Nonrecurrent,
    Moe,
    TftAll,
    Deepar,
    LobNoop,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    All,
    Recurrent,
    Nonrecurrent,
    IncidentSegments,
}

fn load_config(g: &Global) -> Result<Config, Error> {
    let mut cfg = match &g.config {
        None => Config::default(),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            if p.extension().is_some_and(|e| e == "json") {
                let cfg: Config = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                cfg.validate()?;
                cfg
            } else {
                Config::from_toml(&text)?
            }
        }
    };
    if let Some(s) = g.seed {
        cfg = cfg.with_seed(s);
    }
    Ok(cfg)
}

fn command(c: &Cmd) -> Option<Command> {
    Some(match c {
        Cmd::Synth => Command::Synth,
        Cmd::Ingest => Command::Ingest,
        Cmd::Denoise => Command::Denoise,
        Cmd::Featurize => Command::Featurize,
        Cmd::Train { target } => Command::Train(match target {
            Target::Recurrent => TrainTarget::Recurrent,
            Target::Nonrecurrent => TrainTarget::Nonrecurrent,
            Target::Moe => TrainTarget::Moe,
            Target::TftAll => TrainTarget::TftAll,
            Target::Deepar => TrainTarget::Deepar,
            Target::LobNoop => TrainTarget::LobNoop,
        }),
        Cmd::Evaluate { split } => Command::Evaluate(match split {
            Split::All => EvalSplit::All,
            Split::Recurrent => EvalSplit::Recurrent,
            Split::Nonrecurrent => EvalSplit::Nonrecurrent,
            Split::IncidentSegments => EvalSplit::IncidentSegments,
        }),
        Cmd::Interpret => Command::Interpret,
        Cmd::Report => Command::Report,
        Cmd::Config => return None,
    })
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::Split(_)) => 2,
        Some(Error::Prerequisite { .. } | Error::Stale { .. }) => 3,
        Some(Error::Numeric(_) | Error::Denoise(_)) => 4,
        _ => 1,
    }
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let cfg = load_config(&cli.global)?;
    let Some(cmd) = command(&cli.command) else {
        print!("{}", cfg.to_toml()?);
        return Ok(());
    };
    let workdir: &Path = &cli.global.workdir;
    std::fs::create_dir_all(workdir).with_context(|| format!("creating {}", workdir.display()))?;
    let out = pipeline::run(cmd, &cfg, workdir)?;
    if out.up_to_date {
        println!("{}: up to date", out.command);
    } else {
        println!("{}: wrote {} files", out.command, out.outputs.len());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e:#}");
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
