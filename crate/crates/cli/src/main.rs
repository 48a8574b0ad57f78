use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use equirl::sim::{Sim, Task};
use equirl_cli::config::{Algorithm, RunConfig};
use equirl_cli::train::{evaluate, load_run, train, LOG_HEADER};
use equirl_cli::verify::{run_suite, Suite, VerifyOptions};
use equirl_cli::{plot, RUNS_ENV};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "equirl", version, about = "Equivariant DQN / SAC on a symmetric manipulation simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run and write its directory (config.toml, log.csv,
    /// timing.csv, checkpoint.bin).
    Train {
        /// TOML config; flags below override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        task: Option<Task>,
        #[arg(long)]
        algorithm: Option<Algorithm>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<u64>,
        /// Run directory; defaults to $EQUIRL_RUNS/<algorithm>-<task>-s<seed>.
        #[arg(long)]
        run_dir: Option<PathBuf>,
    },
    /// Greedy evaluation of a trained run.
    Eval {
        run_dir: PathBuf,
        #[arg(long, default_value_t = 20)]
        episodes: usize,
    },
    /// Run oracle suites (all by default); exits nonzero on any failure.
    Verify {
        suites: Vec<Suite>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Disable kernel projection in the equivariance suite's networks.
        #[arg(long)]
        inject_fault: bool,
    },
    /// SVG chart of discounted return, mean and standard error over seeds.
    /// Inputs are `label=path.csv` or bare paths labelled by their run.
    Plot {
        #[arg(required = true)]
        inputs: Vec<String>,
        #[arg(long, short, default_value = "returns.svg")]
        out: PathBuf,
        #[arg(long, default_value = "")]
        title: String,
    },
}

fn runs_root() -> PathBuf {
    std::env::var_os(RUNS_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train { config, task, algorithm, seed, steps, run_dir } => {
            let mut cfg = match &config {
                Some(p) => RunConfig::load(p)?,
                None => RunConfig::for_algorithm(task.unwrap_or(Task::Pull), algorithm.unwrap_or(Algorithm::EquiDqn)),
            };
            if config.is_some() {
                if let Some(t) = task {
                    cfg.task = t;
                }
                if let Some(a) = algorithm {
                    cfg.algorithm = a;
                }
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(s) = steps {
                cfg.total_steps = s;
            }
            let dir = run_dir.unwrap_or_else(|| runs_root().join(cfg.run_name()));
            println!("run directory {}", dir.display());
            println!("{LOG_HEADER}");
            let out = train(&cfg, &dir, &mut |row| println!("{}", row.to_csv()))?;
            println!("demonstrations: {} steps, {} buffer entries", out.demo_steps, out.demo_transitions);
            Ok(true)
        }
        Command::Eval { run_dir, episodes } => {
            let (cfg, agent) = load_run(&run_dir).with_context(|| format!("loading {}", run_dir.display()))?;
            let sim = Sim::new(cfg.sim_config())?;
            let e = evaluate(&agent, &sim, cfg.task, cfg.group_order, episodes, cfg.gamma())?;
            let row = e.row(0);
            println!("return_mean,return_stderr,success_rate");
            println!("{},{},{}", row.return_mean, row.return_stderr, row.success_rate);
            Ok(true)
        }
        Command::Verify { suites, seed, inject_fault } => {
            let suites = if suites.is_empty() { Suite::ALL.to_vec() } else { suites };
            let opts = VerifyOptions { seed, inject_fault };
            let mut ok = true;
            for s in suites {
                let report = run_suite(s, &opts)?;
                println!("{report}");
                ok &= report.passed();
            }
            println!("{}", if ok { "all suites passed" } else { "some suites FAILED" });
            Ok(ok)
        }
        Command::Plot { inputs, out, title } => {
            let curves = plot::plot(&inputs, &out, &title)?;
            println!("wrote {} ({} series)", out.display(), curves.len());
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
