//! `asldn`: synthetic ASL phantoms, residual-CNN training, denoising, and
//! evaluation from one flat config file.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use asl_denoise_cli::commands;
use asl_denoise_cli::config::RunConfig;
use asl_denoise_cli::CliError;

#[derive(Parser, Debug)]
#[command(
    name = "asldn",
    version,
    about = "Denoise arterial spin labeling CBF maps with a small residual CNN"
)]
struct Cli {
    /// Key = value config file, applied before any --set override.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Override one config key; repeatable. Dedicated flags win over --set.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Master seed, overriding the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory, overriding the config file.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Replace outputs that already exist.
    #[arg(long, global = true)]
    overwrite: bool,

    /// Print the effective configuration for this invocation and exit
    /// without running the command.
    #[arg(long, global = true)]
    dump_config: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic subjects and write them with a manifest.
    Phantom,
    /// Train the residual CNN on the leading manifest subjects.
    Train,
    /// Apply a trained checkpoint to the held-out (or all) subjects.
    Denoise,
    /// Score raw, smoothed, reference, and denoised volumes per subject.
    Evaluate,
    /// Check every hand-derived gradient against finite differences.
    Gradcheck,
}

fn effective_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    cfg.apply_set_args(&cli.set)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    if cli.overwrite {
        cfg.overwrite = true;
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = effective_config(cli)?;
    if cli.dump_config {
        print!("{}", cfg.dump());
        return Ok(());
    }
    match cli.command {
        Command::Phantom => commands::cmd_phantom(&cfg),
        Command::Train => commands::cmd_train(&cfg),
        Command::Denoise => commands::cmd_denoise(&cfg),
        Command::Evaluate => commands::cmd_evaluate(&cfg),
        Command::Gradcheck => commands::cmd_gradcheck(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help and --version land here as non-errors and exit 0;
            // anything else is a usage problem.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
