use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use oscavg_cli::{run, ExperimentConfig};

/// Runs one averaging / source-seeking experiment described by a JSON config.
#[derive(Parser, Debug)]
#[command(name = "oscavg", version, about)]
struct Args {
    /// Experiment config (JSON). The "command" key selects the experiment.
    #[arg(long)]
    config: PathBuf,
    /// Directory for the CSV and JSON outputs.
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
    /// Suppress the summary line.
    #[arg(long)]
    quiet: bool,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let result = ExperimentConfig::load(&args.config).and_then(|cfg| run(&cfg, &args.out_dir));
    match result {
        Ok(outcome) => {
            if !args.quiet {
                println!("{}", outcome.summary);
                for f in &outcome.files {
                    println!("  wrote {}", f.display());
                }
            }
            ExitCode::from(outcome.verdict.exit_code())
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
