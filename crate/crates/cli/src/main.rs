use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use drlpdid_cli::{load, run, CliError, Mode, Overrides};

#[derive(Parser)]
#[command(
    name = "drlpdid",
    version,
    about = "Doubly robust local-projections DiD"
)]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Event studies on a CSV panel.
    Estimate(RunArgs),
    /// Monte Carlo campaign.
    Simulate(RunArgs),
    /// Check a CSV panel and print its summary.
    Validate {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        cluster: Option<String>,
    },
}

fn execute(cli: Cli) -> Result<(), CliError> {
    let (mode, args) = match cli.command {
        Command::Validate { input, cluster } => {
            let summary = run::validate(&input, cluster)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&summary).expect("summary serializes")
            );
            return Ok(());
        }
        Command::Estimate(a) => (Mode::Estimate, a),
        Command::Simulate(a) => (Mode::Simulate, a),
    };
    let loaded = load(
        &args.config,
        mode,
        &Overrides {
            seed: args.seed,
            out: args.out,
        },
    )?;
    let summary = run::run(&loaded)?;
    for f in &summary.files {
        println!("{}", f.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
