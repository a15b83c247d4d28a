use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use cicme::harness::{self, PlanFile, RunPlan};
use cicme::scm::make_experiment;
use cicme::{Experiment, Method};

#[derive(Parser)]
#[command(name = "cicme", version, about = "Multi-domain causal mechanism estimation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run (or resume) a sweep and write its summaries.
    Run(RunArgs),
    /// Rebuild summaries from an existing result directory.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Write one generated dataset as CSV files.
    Gen {
        #[arg(long)]
        experiment: Experiment,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// TOML file with any of the keys below; flags win over it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    experiments: Option<Vec<Experiment>>,
    #[arg(long, value_delimiter = ',')]
    sizes: Option<Vec<usize>>,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<Method>>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Parallel coordinates (default: available cores).
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long)]
    threshold: Option<f64>,
}

impl RunArgs {
    fn plan(self) -> Result<RunPlan> {
        let mut plan = RunPlan {
            jobs: std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
            ..RunPlan::default()
        };
        if let Some(path) = &self.config {
            PlanFile::read(path)?.apply(&mut plan);
        }
        let flags = PlanFile {
            experiments: self.experiments,
            sizes: self.sizes,
            repeats: self.repeats,
            methods: self.methods,
            seed: self.seed,
            out: self.out,
            jobs: self.jobs,
            alpha: self.alpha,
            gamma: self.gamma,
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            threshold: self.threshold,
        };
        flags.apply(&mut plan);
        Ok(plan)
    }
}

fn run(args: RunArgs) -> Result<bool> {
    let plan = args.plan()?;
    let exe = harness::execute(&plan)?;
    harness::report(&exe.records, &plan.out_dir)?;
    println!(
        "{} records ({} coordinates resumed), {} failed; results in {}",
        exe.records.len(),
        exe.resumed,
        exe.failed,
        plan.out_dir.display()
    );
    Ok(exe.failed == 0)
}

fn report(dir: PathBuf) -> Result<bool> {
    let records = harness::load_records(&dir)?;
    if records.is_empty() {
        bail!("no records in {}", dir.display());
    }
    let s = harness::report(&records, &dir)?;
    print!("{}", s.markdown);
    Ok(records.iter().all(|r| !r.failed()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let outcome = match Cli::parse().command {
        Command::Run(args) => run(args),
        Command::Report { input } => report(input),
        Command::Gen { experiment, n, seed, out } => make_experiment(experiment, n, seed)
            .and_then(|ds| ds.write_dir(&out))
            .with_context(|| format!("writing dataset to {}", out.display()))
            .map(|_| true),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
