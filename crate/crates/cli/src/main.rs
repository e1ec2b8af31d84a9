use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use noisyfed_cli::commands::{self, Artifact};
use noisyfed_cli::config::Axis;
use noisyfed_cli::{CliError, ExperimentConfig};

#[derive(Parser)]
#[command(name = "noisyfed", version, about = "Noisy FedAvg / SGD simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON). Defaults apply when omitted.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output prefix; overrides `output_prefix` from the config.
    #[arg(long, value_name = "PREFIX")]
    out: Option<String>,
    /// Run this single seed instead of `repeat_seeds`.
    #[arg(long, value_name = "N")]
    seed_override: Option<u64>,
    /// Print CSV instead of a table.
    #[arg(long)]
    csv: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train once per seed and write metrics files plus a summary.
    Run(Common),
    /// Compare noise-free, uplink-only and downlink-only runs along r or E.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        axis: Option<Axis>,
        /// Comma-separated axis values.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<usize>>,
    },
    /// Evaluate the convergence bound without training.
    Bounds(Common),
    /// Compare total transmit power against fixed-SNR scaling.
    Power {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 100)]
        rounds: usize,
        #[arg(long, default_value_t = 5)]
        local_steps: usize,
    },
    /// Show the dissimilarity-bound counterexample.
    BcdDemo {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 50)]
        clients: usize,
        /// The supposed bound G.
        #[arg(long, default_value_t = 1.0)]
        bound: f64,
    },
}

fn threads() -> Result<Option<usize>, CliError> {
    match std::env::var("NOISYFED_THREADS") {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CliError::usage(format!(
                "NOISYFED_THREADS must be a positive integer, got '{v}'"
            ))),
        },
    }
}

fn load(common: &Common) -> Result<ExperimentConfig, CliError> {
    let mut config = match &common.config {
        Some(path) => ExperimentConfig::from_path(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed_override {
        config.repeat_seeds = vec![seed];
    }
    if let Some(out) = &common.out {
        config.output_prefix = out.clone();
    }
    Ok(config)
}

fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run(common) => {
            let config = load(&common)?;
            let threads = threads()?;
            let output = commands::run(&config, &config.output_prefix, threads)?;
            commands::write_artifacts(&output.artifacts)?;
            let summary = output.summary;
            if common.csv {
                println!("seed,final_loss,k_star,status");
                for r in &summary.runs {
                    println!(
                        "{},{},{},{:?}",
                        r.seed,
                        noisyfed_cli::metrics::number(r.final_loss),
                        r.k_star,
                        r.status
                    );
                }
            } else {
                for r in &summary.runs {
                    println!(
                        "seed {:>4}  final loss {:.10e}  k* {:>5}  {:?}  -> {}",
                        r.seed, r.final_loss, r.k_star, r.status, r.metrics_file
                    );
                }
                println!(
                    "mean {:.10e}  std {:.10e}",
                    summary.final_loss_mean, summary.final_loss_std
                );
                if let Some(b) = &summary.bound {
                    println!("bound {:.10e}", b.total);
                }
            }
        }
        Command::Sweep { common, axis, values } => {
            let config = load(&common)?;
            let threads = threads()?;
            let axis = axis.unwrap_or(config.sweep.axis);
            let values = values.unwrap_or_else(|| config.sweep.values.clone());
            let rows = commands::sweep(&config, axis, &values, threads)?;
            let text = commands::render_sweep(axis, &rows);
            commands::write_artifacts(&[Artifact {
                path: PathBuf::from(format!("{}_sweep_{}.csv", config.output_prefix, axis.name())),
                contents: text.clone(),
            }])?;
            if common.csv {
                print!("{text}");
            } else {
                println!(
                    "{:>6} {:<14} {:>18} {:>18}",
                    axis.name(),
                    "variant",
                    "final_loss",
                    "excess"
                );
                for r in &rows {
                    println!(
                        "{:>6} {:<14} {:>18.10e} {:>18.10e}",
                        r.value,
                        r.variant.name(),
                        r.final_loss,
                        r.excess
                    );
                }
            }
        }
        Command::Bounds(common) => {
            let config = load(&common)?;
            let b = commands::bounds(&config)?;
            print!("{}", commands::render_bounds(&b, common.csv));
        }
        Command::Power {
            common,
            rounds,
            local_steps,
        } => print!("{}", commands::render_power(rounds, local_steps, common.csv)?),
        Command::BcdDemo { clients, bound, .. } => print!("{}", commands::render_bcd(clients, bound)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
