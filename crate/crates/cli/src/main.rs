use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fbsde_cli::{parse_assignment, run_to_dir, ConfigError, Experiment, ExperimentConfig, Overrides};

#[derive(Parser)]
#[command(name = "fbsde", version, about = "Forward-backward SDE experiments")]
struct Cli {
    /// JSON experiment file; its `experiment` must match the subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed overriding the file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory overriding the file.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; defaults to the number of cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Shortcut for `--set paths=N`.
    #[arg(long, global = true)]
    paths: Option<usize>,
    /// Shortcut for `--set steps=N`.
    #[arg(long, global = true)]
    steps: Option<usize>,
    /// Parameter override `dotted.key=value`, value read as JSON; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Forward paths, terminal states and the small-noise gap table.
    Forward,
    /// Solve one backward equation by regression (and optionally the transform).
    Solve,
    /// Finite-difference reference field.
    Pde,
    /// Small-noise sweep with the fitted convergence rate.
    Sweep,
    /// Large-deviation rate and optional empirical check.
    Ldp,
    /// Burgers equation with damping.
    Burgers,
    /// Two-dimensional Navier–Stokes divergence check.
    Ns2d,
    /// Statistical property suites.
    Proptest,
}

impl Command {
    fn experiment(self) -> Experiment {
        match self {
            Self::Forward => Experiment::Forward,
            Self::Solve => Experiment::Solve,
            Self::Pde => Experiment::Pde,
            Self::Sweep => Experiment::Sweep,
            Self::Ldp => Experiment::Ldp,
            Self::Burgers => Experiment::Burgers,
            Self::Ns2d => Experiment::Ns2d,
            Self::Proptest => Experiment::Proptest,
        }
    }
}

fn load(cli: &Cli) -> Result<ExperimentConfig, ConfigError> {
    let mut params: Vec<_> = cli.set.iter().map(|s| parse_assignment(s)).collect::<Result<_, _>>()?;
    params.extend(cli.paths.map(|n| ("paths".to_string(), n.into())));
    params.extend(cli.steps.map(|n| ("steps".to_string(), n.into())));
    let overrides = Overrides { seed: cli.seed, output: cli.out.clone(), params };
    ExperimentConfig::resolve(cli.command.experiment(), cli.config.as_deref(), &overrides)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match load(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let threads = cli.threads.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if threads == 0 {
        eprintln!("error: invalid `--threads`: must be at least 1");
        return ExitCode::from(2);
    }
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
        eprintln!("error: cannot start worker pool: {e}");
        return ExitCode::from(1);
    }
    match run_to_dir(&cfg, threads) {
        Ok(outcome) => {
            println!("{}", serde_json::to_string_pretty(&outcome.summary).unwrap_or_default());
            println!("wrote {} table(s) to {}", outcome.tables.len(), cfg.output.display());
            if outcome.flagged {
                eprintln!("flagged: see {}", cfg.output.join(fbsde_cli::MANIFEST).display());
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
