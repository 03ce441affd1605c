use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use edpflow::cli::{run_experiment, ExperimentConfig, ExperimentKind, EXIT_CONFIG, EXIT_FAIL, EXIT_PASS};
use edpflow::Error;

#[derive(Parser)]
#[command(name = "edpflow", version, about = "Fast-reaction limit studies for two-species reaction-drift-diffusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a JSON config.
    Run { config: PathBuf },
    /// Check a JSON config without running it.
    Validate { config: PathBuf },
    /// Print a complete example config.
    ExportDefaults {
        /// Experiment kind to fill in (snake_case).
        #[arg(long)]
        kind: Option<String>,
    },
}

fn threads() -> Result<Option<usize>, String> {
    match std::env::var("EDPFLOW_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|n| *n > 0)
            .map(Some)
            .ok_or_else(|| format!("EDPFLOW_THREADS must be a positive integer, got {v:?}")),
        Err(_) => Ok(None),
    }
}

fn exit(code: i32) -> ExitCode {
    ExitCode::from(code as u8)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::ExportDefaults { kind } => {
            let mut cfg = ExperimentConfig::defaults();
            if let Some(k) = kind {
                match serde_json::from_value::<ExperimentKind>(serde_json::Value::String(k.clone())) {
                    Ok(k) => cfg = ExperimentConfig::defaults_for(k),
                    Err(_) => {
                        eprintln!("unknown experiment kind {k:?}");
                        return exit(EXIT_CONFIG);
                    }
                }
            }
            println!("{}", serde_json::to_string_pretty(&cfg).expect("serializable"));
            exit(EXIT_PASS)
        }
        Command::Validate { config } => match ExperimentConfig::from_file(&config) {
            Ok(_) => {
                println!("{}: ok", config.display());
                exit(EXIT_PASS)
            }
            Err(e) => {
                eprintln!("{}: {e}", config.display());
                exit(EXIT_CONFIG)
            }
        },
        Command::Run { config } => {
            let cfg = match ExperimentConfig::from_file(&config) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("{}: {e}", config.display());
                    return exit(EXIT_CONFIG);
                }
            };
            let threads = match threads() {
                Ok(t) => t,
                Err(e) => {
                    eprintln!("{e}");
                    return exit(EXIT_CONFIG);
                }
            };
            match run_experiment(&cfg, threads) {
                Ok(report) => {
                    print!("{}", report.to_text());
                    exit(if report.passed { EXIT_PASS } else { EXIT_FAIL })
                }
                Err(e @ Error::Config(_)) => {
                    eprintln!("{e}");
                    exit(EXIT_CONFIG)
                }
                Err(e) => {
                    eprintln!("run failed: {e}");
                    exit(EXIT_FAIL)
                }
            }
        }
    }
}
