use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fedchain::experiment::{emit_plot_data, run_experiment, ExperimentConfig};
use fedchain::ledger::verify_export;
use fedchain::Error;

#[derive(Parser)]
#[command(
    name = "fedchain",
    version,
    about = "Personalized DP federated learning simulator with a simulated ledger"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the epsilon sweep and write metrics, chain exports and a summary.
    Run {
        /// Key-value config file; flags below override its values.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated epsilon targets.
        #[arg(long, value_delimiter = ',')]
        epsilon: Option<Vec<f64>>,
        #[arg(long)]
        rounds: Option<u32>,
        #[arg(long)]
        clients: Option<usize>,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',')]
        seed: Option<Vec<u64>>,
        /// Overrides the default delta of 1/clients.
        #[arg(long)]
        delta: Option<f64>,
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Extra `key=value` settings, applied last.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Average metrics files over seeds into plot-ready series.
    PlotData {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Audit a chain export.
    VerifyChain {
        #[arg(long = "in")]
        input: PathBuf,
    },
}

const EXIT_CONFIG: u8 = 1;
const EXIT_RUNTIME: u8 = 2;

#[allow(clippy::too_many_arguments)]
fn build_config(
    config: Option<PathBuf>,
    epsilon: Option<Vec<f64>>,
    rounds: Option<u32>,
    clients: Option<usize>,
    seed: Option<Vec<u64>>,
    delta: Option<f64>,
    threads: Option<usize>,
    out: Option<PathBuf>,
    set: Vec<String>,
) -> Result<ExperimentConfig, Error> {
    let mut cfg = match config {
        Some(path) => ExperimentConfig::from_file(&path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(v) = epsilon {
        cfg.epsilon_sweep = v;
    }
    if let Some(v) = rounds {
        cfg.training.global_rounds = v;
    }
    if let Some(v) = clients {
        cfg.clients = v;
    }
    if let Some(v) = seed {
        cfg.seeds = v;
    }
    if let Some(v) = delta {
        cfg.delta = Some(v);
    }
    if let Some(v) = threads {
        cfg.threads = v;
    }
    if let Some(v) = out {
        cfg.output_dir = v;
    }
    for kv in set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            let _ = e.print();
            return ExitCode::from(EXIT_CONFIG);
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
    };
    match cli.command {
        Command::Run {
            config,
            epsilon,
            rounds,
            clients,
            seed,
            delta,
            threads,
            out,
            set,
        } => {
            let cfg = match build_config(config, epsilon, rounds, clients, seed, delta, threads, out, set) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(EXIT_CONFIG);
                }
            };
            match run_experiment(&cfg) {
                Ok(report) => {
                    for run in &report.runs {
                        match &run.outcome {
                            Ok(stats) => println!(
                                "eps {} seed {}: {} rounds, final accuracy {}, gas {} ({:.6} ETH)",
                                run.epsilon,
                                run.seed,
                                stats.rounds,
                                stats
                                    .final_accuracy
                                    .map_or_else(|| "-".to_string(), |a| format!("{a:.4}")),
                                stats.total_gas,
                                stats.total_cost.eth
                            ),
                            Err(e) => println!("eps {} seed {}: failed: {e}", run.epsilon, run.seed),
                        }
                    }
                    println!("summary: {}", report.summary_path.display());
                    ExitCode::SUCCESS
                }
                Err(Error::Config(msg)) => {
                    eprintln!("error: {msg}");
                    ExitCode::from(EXIT_CONFIG)
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(EXIT_RUNTIME)
                }
            }
        }
        Command::PlotData { input, out } => match emit_plot_data(&input, &out) {
            Ok(paths) => {
                for p in paths {
                    println!("{}", p.display());
                }
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(EXIT_RUNTIME)
            }
        },
        Command::VerifyChain { input } => {
            let text = match std::fs::read_to_string(&input) {
                Ok(t) => t,
                Err(e) => {
                    eprintln!("error: {}: {e}", input.display());
                    return ExitCode::from(EXIT_RUNTIME);
                }
            };
            let report = verify_export(&text, None);
            println!("{report}");
            if report.is_valid() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_RUNTIME)
            }
        }
    }
}
