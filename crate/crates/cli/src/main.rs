use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Parser, Subcommand};
use qshampoo::commands::{self, parse_shape, CommandError};
use qshampoo::config::{ExperimentConfig, Format, Mode, OptimizerKind, ProblemKind};
use qshampoo::Outcome;

const EXIT_FAILURE: u8 = 1;
const EXIT_USAGE: u8 = 2;

#[derive(Debug, Parser)]
#[command(name = "qshampoo", version, about = "4-bit Shampoo preconditioner studies")]
struct Cli {
    /// TOML experiment config; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file; stdout when absent.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    format: Option<Format>,
    /// Optimizer state mode (train) or the single mode to report (memreport).
    #[arg(long, global = true, value_enum)]
    mode: Option<Mode>,
    /// Fill the wall_ms column with real timings.
    #[arg(long, global = true)]
    timing: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone)]
struct Shape(Vec<usize>);

impl FromStr for Shape {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        parse_shape(s).map(Shape).ok_or_else(|| format!("expected a shape like 64x32, got {s:?}"))
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// 2×2 vanilla vs Cholesky quantization, checked against reference values.
    Toy,
    /// NRE/AE of inverse 4th roots over synthetic SPD matrices.
    Matstudy {
        #[arg(long)]
        n_matrices: Option<usize>,
        #[arg(long)]
        order: Option<usize>,
        /// Disable quantization.
        #[arg(long)]
        exact: bool,
    },
    /// Train a desk-scale problem and log loss, gradient norm and root spectra.
    Train {
        #[arg(long, value_enum)]
        problem: Option<ProblemKind>,
        #[arg(long, value_enum)]
        optimizer: Option<OptimizerKind>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Logical optimizer-state bytes per mode for a list of shapes.
    Memreport {
        #[arg(long = "shape")]
        shapes: Vec<Shape>,
    },
}

fn configure(cli: &Cli) -> Result<ExperimentConfig, String> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p).map_err(|e| e.to_string())?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.run.seed = seed;
        cfg.matstudy.seeds = vec![seed];
    }
    if let Some(out) = &cli.out {
        cfg.run.out = Some(out.clone());
    }
    if let Some(f) = cli.format {
        cfg.run.format = f;
    }
    cfg.run.timing |= cli.timing;
    if let Some(m) = cli.mode {
        cfg.shampoo.mode = Some(m);
        cfg.memreport.modes = vec![m];
    }
    match &cli.command {
        Command::Toy => {}
        Command::Matstudy { n_matrices, order, exact } => {
            if let Some(n) = n_matrices {
                cfg.matstudy.n_matrices = *n;
            }
            if let Some(o) = order {
                cfg.matstudy.order = *o;
            }
            if *exact {
                cfg.shampoo.exact = Some(true);
            }
        }
        Command::Train { problem, optimizer, steps, lr } => {
            let t = &mut cfg.train;
            if let Some(p) = problem {
                t.problem = *p;
            }
            if let Some(o) = optimizer {
                t.optimizer = *o;
            }
            if let Some(s) = steps {
                t.steps = *s;
            }
            if let Some(lr) = lr {
                t.lr = *lr;
            }
        }
        Command::Memreport { shapes } => {
            if !shapes.is_empty() {
                cfg.memreport.shapes = shapes.iter().map(|s| s.0.clone()).collect();
            }
        }
    }
    cfg.validate().map_err(|e| e.to_string())?;
    Ok(cfg)
}

fn run(cli: &Cli, cfg: &ExperimentConfig) -> Result<Outcome, CommandError> {
    match cli.command {
        Command::Toy => commands::cmd_toy(cfg),
        Command::Matstudy { .. } => commands::cmd_matstudy(cfg),
        Command::Train { .. } => commands::cmd_train(cfg),
        Command::Memreport { .. } => commands::cmd_memreport(cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match configure(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("qshampoo: {e}");
            return ExitCode::from(EXIT_USAGE);
        }
    };
    let outcome = match run(&cli, &cfg) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("qshampoo: {e}");
            return ExitCode::from(EXIT_FAILURE);
        }
    };
    if let Err(e) = outcome.report.write(cfg.run.format, cfg.run.out.as_deref()) {
        eprintln!("qshampoo: {e}");
        return ExitCode::from(EXIT_FAILURE);
    }
    match outcome.failure {
        None => ExitCode::SUCCESS,
        Some(msg) => {
            eprintln!("qshampoo {}: {msg}", outcome.report.command);
            ExitCode::from(EXIT_FAILURE)
        }
    }
}
