use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use fbsde::problem::ProblemKind;
use fbsde::Precision;
use fbsde_cli::commands::{self, Outcome};
use fbsde_cli::{load_config, RunConfig};

/// Output root when neither `--out` nor the config names a directory.
const OUT_ENV: &str = "FBSDE_OUT";

#[derive(Parser)]
#[command(name = "fbsde", version, about = "Deep BSDE solver for fully-coupled FBSDEs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Search the sufficient convergence condition over λ
    Check(Common),
    /// Train one network stack and evaluate it
    Train(Common),
    /// Convergence study over a list of N
    Study(Common),
    /// Dump the LQ Riccati mesh
    Riccati {
        #[command(flatten)]
        common: Common,
        /// Keep every k-th mesh node
        #[arg(long, default_value_t = 100)]
        every: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    problem: Option<String>,
    /// Comma-separated step counts
    #[arg(long = "N", value_delimiter = ',')]
    steps: Option<Vec<usize>>,
    #[arg(long = "T", allow_negative_numbers = true)]
    horizon: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long, value_enum)]
    precision: Option<PrecisionArg>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    parallel_runs: Option<usize>,
}

impl Common {
    fn resolve(&self, command: &str) -> anyhow::Result<(RunConfig, PathBuf)> {
        let mut config = match (&self.config, &self.problem) {
            (Some(path), _) => load_config(path)?,
            (None, Some(name)) => RunConfig::minimal(ProblemKind::from_name(name)?),
            (None, None) => anyhow::bail!("either --config or --problem is required"),
        };
        if let Some(name) = &self.problem {
            config.problem = ProblemKind::from_name(name)?;
        }
        if let Some(n) = &self.steps {
            config.steps = n.clone();
        }
        config.horizon = self.horizon.or(config.horizon);
        config.seed = self.seed.unwrap_or(config.seed);
        config.training.iterations = self.iters.unwrap_or(config.training.iterations);
        config.training.batch = self.batch.unwrap_or(config.training.batch);
        config.runs = self.runs.unwrap_or(config.runs);
        config.parallel_runs = self.parallel_runs.unwrap_or(config.parallel_runs);
        if let Some(p) = self.precision {
            config.precision = match p {
                PrecisionArg::F32 => Precision::F32,
                PrecisionArg::F64 => Precision::F64,
            };
        }
        if let Some(out) = &self.out {
            config.out = Some(out.clone());
        }
        config.validate()?;
        let out = config.out.clone().unwrap_or_else(|| {
            let root = std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from("fbsde-runs"), PathBuf::from);
            root.join(format!("{command}-{}", config.problem))
        });
        Ok((config, out))
    }
}

fn run(cli: Cli) -> anyhow::Result<Outcome> {
    match cli.command {
        Command::Check(common) => {
            let (config, out) = common.resolve("check")?;
            let (r, outcome) = commands::check(&config, &out)?;
            println!("problem      {} (T = {}, m = {})", r.problem, r.horizon, r.m);
            println!("B_lower      {:e} ({:?})", r.report.b_lower.value, r.report.b_lower.branch);
            match &r.report.best {
                Some(b) => println!("best         B = {:e}, A = {:e} at {:?}", b.b_bar, b.a_bar, b.lambda.as_array()),
                None => println!("best         none, the lower bound already exceeds 1"),
            }
            println!("feasible     {}", r.report.feasible);
            println!("written to   {}", out.display());
            Ok(outcome)
        }
        Command::Train(common) => {
            let (config, out) = common.resolve("train")?;
            let (r, outcome) = commands::train(&config, &out)?;
            let e = &r.evaluation;
            println!("iterations   {} (stopped on divergence: {})", r.iterations_run, r.train_diverged);
            println!("train loss   {:e}", r.final_train_loss);
            println!("errors       x {:e}  y {:e}  z {:e}  total {:e}", e.error_x, e.error_y, e.error_z, e.total);
            println!("diverged     {:.3} of {} paths", e.diverged_fraction, e.paths);
            println!("written to   {}", out.display());
            Ok(outcome)
        }
        Command::Study(common) => {
            let (config, out) = common.resolve("study")?;
            let progress = |n: usize, r: &fbsde::solver::RunRecord| {
                eprintln!(
                    "N = {n:>4} run {}  total {:.4e}  loss {:.4e}{}",
                    r.run,
                    r.report.total,
                    r.report.loss,
                    if r.train_diverged { "  (diverged)" } else { "" }
                );
            };
            let (result, outcome) = commands::study(&config, &out, &progress)?;
            println!("{:>6} {:>12} {:>12} {:>12}", "N", "total", "std", "loss");
            for row in &result.table.rows {
                println!("{:>6} {:>12.4e} {:>12.4e} {:>12.4e}", row.n, row.total.0, row.total.1, row.loss_mean);
            }
            let rates = result.table.rates;
            println!("rates        x {:.3}  y {:.3}  z {:.3}  total {:.3}", rates.x, rates.y, rates.z, rates.total);
            println!("verdict      {:?}", result.verdict());
            println!("written to   {}", out.display());
            Ok(outcome)
        }
        Command::Riccati { common, every } => {
            let (config, out) = common.resolve("riccati")?;
            let outcome = commands::riccati(&config, &out, every).context("riccati mesh")?;
            println!("written to   {}", out.join("riccati.csv").display());
            Ok(outcome)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(outcome) => ExitCode::from(outcome.exit_code()),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
