use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fedval_cli::{cmd_compare, cmd_prob, cmd_run, format_prob_table, CliError, CliResult};
use fedval_core::orchestrator::Cutoff;

/// Deterministic federated-learning simulations.
#[derive(Parser)]
#[command(name = "fedval", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Workers {
    /// Worker threads; 0 uses every logical core. Results do not depend on it.
    #[arg(long, env = "FEDVAL_WORKERS", default_value_t = 0)]
    workers: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its artifacts.
    Run {
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        workers: Workers,
    },
    /// Run several strategies on the same data, seeds and attackers.
    Compare {
        config: PathBuf,
        /// Comma-separated overrides: fedavg, fedval, fedprox[:mu],
        /// multi_krum[:f], lfr[:f], trimmed_mean[:f].
        #[arg(long, value_delimiter = ',', required = true)]
        strategies: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        workers: Workers,
    },
    /// Chance that a round selects at least k0 malicious clients.
    Prob {
        /// Clients selected per round.
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        n: u64,
        /// Fraction of malicious clients in the population.
        #[arg(long)]
        p: f64,
        /// Derive k0 as ceil(0.75 * threshold * n).
        #[arg(long, conflicts_with = "k0", required_unless_present = "k0")]
        threshold: Option<f64>,
        #[arg(long)]
        k0: Option<usize>,
        /// Comma-separated round counts.
        #[arg(long, value_delimiter = ',', required = true)]
        rounds: Vec<u64>,
    },
}

fn dispatch(command: Command) -> CliResult<()> {
    match command {
        Command::Run {
            config,
            out,
            workers,
        } => {
            let m = cmd_run(&config, &out, workers.workers)?;
            println!(
                "{} rounds of {} in {:.1}s, artifacts in {}",
                m.rounds,
                m.strategy,
                m.duration_seconds,
                out.display()
            );
        }
        Command::Compare {
            config,
            strategies,
            out,
            workers,
        } => {
            let m = cmd_compare(&config, &strategies, &out, workers.workers)?;
            for run in &m.runs {
                println!(
                    "{}\t{:.1}s\t{}",
                    run.strategy,
                    run.manifest.duration_seconds,
                    out.join(&run.dir).display()
                );
            }
            println!("combined\t{}", out.join(&m.combined).display());
        }
        Command::Prob {
            n,
            p,
            threshold,
            k0,
            rounds,
        } => {
            let cutoff = match (threshold, k0) {
                (_, Some(k)) => Cutoff::K0(k),
                (Some(t), None) => Cutoff::Threshold(t),
                (None, None) => {
                    return Err(CliError::Validation("give --threshold or --k0".into()))
                }
            };
            let rows = cmd_prob(n as usize, p, cutoff, &rounds)?;
            print!("{}", format_prob_table(&rows));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // Usage mistakes count as invalid input.
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
