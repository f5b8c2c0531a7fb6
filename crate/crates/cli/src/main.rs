use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dualmix_cli::commands::{cmd_eval, cmd_gen_data, cmd_run};
use dualmix_cli::config::{parse_config, Mode, Overrides};
use dualmix_cli::report::cmd_report;
use dualmix_cli::CliError;

#[derive(Parser)]
#[command(name = "dualmix", about = "Dual-level domain mixing for semi-supervised segmentation adaptation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunFlags {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    no_style_transfer: bool,
    #[arg(long)]
    mode: Option<Mode>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the generated splits as DMX1 files.
    GenData(RunFlags),
    /// Run the configured mode (framework by default).
    Run(RunFlags),
    /// Run the vanilla self-training comparison.
    VanillaSt(RunFlags),
    /// Per-class IoU and mIoU of a checkpoint on a dataset file.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Compare run directories.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

fn load(flags: &RunFlags, mode: Option<Mode>) -> Result<dualmix_cli::config::RunConfig, CliError> {
    let overrides = Overrides {
        seed: flags.seed,
        out: flags.out.clone(),
        rounds: flags.rounds,
        no_style_transfer: flags.no_style_transfer,
        mode: mode.or(flags.mode),
    };
    Ok(parse_config(flags.config.as_deref(), &overrides)?)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData(flags) => {
            for p in cmd_gen_data(&load(&flags, None)?)? {
                println!("{}", p.display());
            }
        }
        Command::Run(flags) => {
            let cfg = load(&flags, None)?;
            for row in cmd_run(&cfg)?.rows {
                println!("round {} {:<10} {:<10} mIoU {:.4}", row.round, row.stage, row.model, row.score.miou);
            }
        }
        Command::VanillaSt(flags) => {
            if flags.mode.is_some_and(|m| m != Mode::VanillaSt) {
                return Err(CliError::Usage("vanilla-st does not take --mode".into()));
            }
            let cfg = load(&flags, Some(Mode::VanillaSt))?;
            for row in cmd_run(&cfg)?.rows {
                println!("round {} {:<10} {:<10} mIoU {:.4}", row.round, row.stage, row.model, row.score.miou);
            }
        }
        Command::Eval { checkpoint, data } => print!("{}", cmd_eval(&checkpoint, &data)?),
        Command::Report { runs, out } => {
            let (csv, svg) = cmd_report(&runs, &out)?;
            println!("{}\n{}", csv.display(), svg.display());
        }
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
