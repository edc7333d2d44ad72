use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mimk::metrics::format_sig6;
use mimk::report::{
    cmd_ablate_augmentation, cmd_eval, cmd_phantom, cmd_plot, cmd_train, CliError, CliResult, DebugModel,
    RunConfigFile,
};

/// Masked image modeling on MRI k-space magnitude images.
#[derive(Parser)]
#[command(name = "mimk", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Run config file (`key = value` lines).
    #[arg(long)]
    config: PathBuf,
    /// Output directory, overrides `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed, overrides `seed`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic phantoms, their k-space renderings and a manifest.
    Phantom {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        coils: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write a run directory.
    Train(RunArgs),
    /// Score a checkpoint on the configured evaluation split.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Bypass the model: `identity` predicts the target, `zero` predicts zeros.
        #[arg(long)]
        debug_model: Option<DebugModel>,
    },
    /// Train with and without flip/crop augmentation and compare.
    AblateAug(RunArgs),
    /// Plot columns of a metrics CSV as SVG.
    Plot {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "train_loss,val_loss")]
        columns: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load(args: &RunArgs) -> CliResult<RunConfigFile> {
    let cfg = RunConfigFile::load(&args.config).map_err(|e| match e {
        mimk::Error::Io { .. } => CliError::Usage(e.to_string()),
        other => other.into(),
    })?;
    Ok(cfg.with_overrides(args.seed, args.out.as_deref())?)
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Phantom { n, size, seed, coils, out } => {
            cmd_phantom(n, size, seed, coils, &out)?;
            println!("wrote {n} phantoms to {}", out.display());
        }
        Command::Train(args) => {
            let cfg = load(&args)?;
            let outcome = cmd_train(&cfg)?;
            if let Some(last) = outcome.rows.last() {
                println!(
                    "epoch {} train_loss {} val_loss {} val_ssim {}",
                    last.epoch,
                    format_sig6(last.train_loss),
                    format_sig6(last.val_loss),
                    format_sig6(last.val_ssim)
                );
            }
        }
        Command::Eval { run, checkpoint, debug_model } => {
            let cfg = load(&run)?;
            print!("{}", cmd_eval(&cfg, checkpoint.as_deref(), debug_model)?.to_csv());
        }
        Command::AblateAug(args) => {
            let cfg = load(&args)?;
            print!("{}", cmd_ablate_augmentation(&cfg)?.csv);
        }
        Command::Plot { csv, columns, out } => cmd_plot(&csv, &columns, &out)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
