use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use hartree::config::{RunConfig, THREADS_ENV};
use hartree::crosscheck::crosscheck;
use hartree::runner::{self, RunReport, Status};
use hartree::{Error, Result};

#[derive(Parser)]
#[command(name = "hartree", version, about = "Coulomb Hartree density-operator simulator")]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, env = THREADS_ENV)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a TOML config.
    Run {
        config: PathBuf,
        /// Override `output.dir` (also `HARTREE_OUTPUT_DIR`).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Fit decay exponents from a diagnostics CSV.
    Report {
        csv: PathBuf,
        #[arg(long, num_args = 2, value_names = ["T0", "T1"], default_values_t = [2.0, 20.0])]
        window: Vec<f64>,
    },
    /// Run the dense-kernel, Coulomb and free-flow self-checks.
    Crosscheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Continue a run from a snapshot.
    Resume {
        snapshot: PathBuf,
        config: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn load(path: &PathBuf, output: Option<PathBuf>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    cfg.apply_env();
    if let Some(dir) = output {
        cfg.output.dir = dir;
    }
    Ok(cfg)
}

fn print_report(report: &RunReport) {
    print!("{}", report.render());
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config, output } => {
            let cfg = load(&config, output)?;
            print_report(&runner::run(&cfg)?);
        }
        Command::Resume {
            snapshot,
            config,
            output,
        } => {
            let cfg = load(&config, output)?;
            print_report(&runner::resume(&snapshot, &cfg)?);
        }
        Command::Report { csv, window } => {
            if !(window[0] > 0.0 && window[1] > window[0]) {
                return Err(Error::Config(format!("invalid fit window {window:?}")));
            }
            print_report(&runner::report(&csv, (window[0], window[1]))?);
        }
        Command::Crosscheck { seed } => {
            let checks = crosscheck(seed)?;
            for c in &checks {
                println!("{} = {}  # {}", c.name, c.status.as_str(), c.detail);
            }
            let ok = checks.iter().all(|c| c.status != Status::Fail);
            println!("overall = {}", Status::from_bool(ok).as_str());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not size thread pool: {e}");
        }
    }
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
