//! The `phyc` command line.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};

use phyc_core::error::{Error, Result};

mod commands;
mod config;

use commands::*;

#[derive(Parser, Debug)]
#[command(
    name = "phyc",
    version,
    about = "Dual-LoRA object and physics concept customization at desk scale"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the synthetic object × physics grid corpus.
    GenData(GenData),
    /// Train the frozen base denoiser and text encoder on clean images.
    Pretrain(Pretrain),
    /// Learn one object concept and one physics concept.
    Train(Train),
    /// Sample composed-prompt images from a concept checkpoint.
    Sample(Sample),
    /// Fit the frozen evaluation probe on a grid corpus.
    ProbeTrain(ProbeTrain),
    /// Best-of-N benchmark over a directory of concept checkpoints.
    Eval(Eval),
    /// Full vs. w/o isometric vs. w/o decouple over several seeds.
    Ablate(Ablate),
    /// Grid over the two loss weights.
    Sweep(Sweep),
}

fn dispatch(matches: &clap::ArgMatches) -> Result<()> {
    let cli =
        Cli::from_arg_matches(matches).map_err(|e| Error::Config(one_line(&e.to_string())))?;
    let (_, sub) = matches.subcommand().expect("subcommand is required");
    match &cli.command {
        Command::GenData(a) => gen_data(&resolved(a, sub, a.config.as_deref())?),
        Command::Pretrain(a) => pretrain(&resolved(a, sub, a.config.as_deref())?),
        Command::Train(a) => train(&resolved(a, sub, a.config.as_deref())?),
        Command::Sample(a) => sample(&resolved(a, sub, a.config.as_deref())?),
        Command::ProbeTrain(a) => probe_train(&resolved(a, sub, a.config.as_deref())?),
        Command::Eval(a) => eval(&resolved(a, sub, a.config.as_deref())?),
        Command::Ablate(a) => ablate(&resolved(a, sub, a.config.as_deref())?),
        Command::Sweep(a) => sweep(&resolved(a, sub, a.config.as_deref())?),
    }
}

fn resolved<A>(parsed: &A, matches: &clap::ArgMatches, path: Option<&Path>) -> Result<A>
where
    A: serde::Serialize + serde::de::DeserializeOwned,
{
    config::resolve(parsed, matches, path)
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn usage_code(kind: clap::error::ErrorKind) -> &'static str {
    use clap::error::ErrorKind as K;
    match kind {
        K::UnknownArgument => "unknown_flag",
        K::MissingRequiredArgument => "missing_flag",
        K::InvalidValue | K::ValueValidation => "invalid_value",
        K::InvalidSubcommand | K::MissingSubcommand => "unknown_subcommand",
        _ => "usage",
    }
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("PHYC_THREADS") else {
        return Ok(());
    };
    let n: usize = v.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        Error::Config(format!(
            "PHYC_THREADS must be a positive integer, got {v:?}"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(e.to_string()))
}

/// Parses `std::env::args`, runs the subcommand and maps failures to an exit
/// code with a one-line `code: message` on stderr.
pub fn run() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let matches = match Cli::command().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind as K;
            if matches!(e.kind(), K::DisplayHelp | K::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg
                .lines()
                .next()
                .unwrap_or("")
                .trim_start_matches("error: ");
            eprintln!("{}: {}", usage_code(e.kind()), one_line(first));
            return ExitCode::from(2);
        }
    };
    let run = init_threads().and_then(|()| dispatch(&matches));
    match run {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}: {}", e.code(), one_line(&e.to_string()));
            ExitCode::FAILURE
        }
    }
}

/// The option's value, or a missing-flag error naming it.
pub(crate) fn need<'a, T>(value: &'a Option<T>, flag: &str) -> Result<&'a T> {
    value
        .as_ref()
        .ok_or_else(|| Error::MissingFlag(flag.to_string()))
}

pub(crate) fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}
