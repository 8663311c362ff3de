mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "certilip",
    version,
    about = "Train, certify and attack 1-Lipschitz convex-potential networks"
)]
struct Cli {
    /// Seed for every random choice in the run (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// TOML experiment configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a network and write metrics, checkpoints and a final report.
    Train(TrainArgs),
    /// Clean accuracy and loss on the test split.
    Eval(CheckpointArgs),
    /// Certified accuracy at each budget.
    Certify(CertifyArgs),
    /// PGD l2 attack at each budget, checked against the certificates.
    Attack(AttackArgs),
    /// Sampled lower bound on the network's Lipschitz constant.
    Lipschitz(LipschitzArgs),
    /// Simulate a convex-potential flow and its contraction envelope.
    FlowSim(FlowArgs),
    /// Print a checkpoint's manifest summary.
    Inspect(CheckpointArgs),
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    margin: Option<f64>,
    /// Fix every CPL step to this value (disables certification).
    #[arg(long)]
    relaxed_h: Option<f64>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Continue from a checkpoint directory.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CheckpointArgs {
    /// Checkpoint directory (default: <out>/checkpoints/last).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CertifyArgs {
    #[command(flatten)]
    ckpt: CheckpointArgs,
    /// Comma-separated budgets; fractions like 36/255 are accepted.
    #[arg(long)]
    eps: Option<String>,
}

#[derive(Debug, Args)]
struct AttackArgs {
    #[command(flatten)]
    ckpt: CheckpointArgs,
    #[arg(long)]
    eps: Option<String>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    random_start: bool,
}

#[derive(Debug, Args)]
struct LipschitzArgs {
    #[command(flatten)]
    ckpt: CheckpointArgs,
    #[arg(long, default_value_t = 100)]
    pairs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FlowKind {
    Zero,
    Quadratic,
    Diagonal,
    Rotation,
    Icnn,
}

#[derive(Debug, Args)]
struct FlowArgs {
    #[arg(long, value_enum)]
    spec: FlowKind,
    /// Curvature of the quadratic potential.
    #[arg(long, default_value_t = 1.0)]
    mu: f64,
    /// Horizon.
    #[arg(long = "T", default_value_t = 1.0)]
    horizon: f64,
    #[arg(long, default_value_t = 1e-3)]
    step: f64,
    #[arg(long, default_value_t = 2)]
    dim: usize,
    /// Scale of a random skew part added to the field.
    #[arg(long, default_value_t = 0.0)]
    skew: f64,
    /// Also compare the discrete schemes with this step size.
    #[arg(long)]
    scheme_step: Option<f64>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Ok(v) = std::env::var("CERTILIP_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| CliError::argument(format!("CERTILIP_THREADS must be a positive integer, got {v:?}")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| CliError::argument(e.to_string()))?;
    }
    let ctx = commands::Context {
        seed: cli.seed,
        out: cli.out,
        config: cli.config,
    };
    match cli.command {
        Command::Train(a) => commands::train(
            &ctx,
            commands::TrainOverrides {
                epochs: a.epochs,
                lr: a.lr,
                batch_size: a.batch_size,
                margin: a.margin,
                relaxed_h: a.relaxed_h,
                checkpoint_every: a.checkpoint_every,
                resume: a.resume,
            },
        ),
        Command::Eval(a) => commands::eval(&ctx, a.checkpoint),
        Command::Certify(a) => commands::certify(&ctx, a.ckpt.checkpoint, a.eps),
        Command::Attack(a) => commands::attack(&ctx, a.ckpt.checkpoint, a.eps, a.iterations, a.random_start),
        Command::Lipschitz(a) => commands::lipschitz(&ctx, a.ckpt.checkpoint, a.pairs),
        Command::FlowSim(a) => commands::flow_sim(
            &ctx,
            commands::FlowOptions {
                kind: match a.spec {
                    FlowKind::Zero => "zero",
                    FlowKind::Quadratic => "quadratic",
                    FlowKind::Diagonal => "diagonal",
                    FlowKind::Rotation => "rotation",
                    FlowKind::Icnn => "icnn",
                },
                mu: a.mu,
                horizon: a.horizon,
                step: a.step,
                dim: a.dim,
                skew: a.skew,
                scheme_step: a.scheme_step,
            },
        ),
        Command::Inspect(a) => commands::inspect(&ctx, a.checkpoint),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let err = CliError::new("usage.invalid", e.to_string().trim_end().to_string());
            eprintln!("{err}");
            return ExitCode::from(err.exit_code() as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
