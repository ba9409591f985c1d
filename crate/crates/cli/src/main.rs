use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand};
use dpsc::nn::GroupSpec;
use dpsc_cli::commands::{self, AccountArgs, HessianArgs, HistogramArgs};
use dpsc_cli::config::{Arch, DataSource};
use dpsc_cli::CliError;

/// Differentially private training of ScaleNorm residual networks, privacy
/// accounting and curvature diagnostics.
///
/// Exit codes: 0 success, 1 unexpected failure, 2 configuration error,
/// 3 data or checkpoint error, 4 privacy budget ceiling reached.
#[derive(Parser)]
#[command(name = "dpsc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a key = value run configuration.
    Train {
        config: PathBuf,
        /// Validate, print parameter count and σ, write nothing.
        #[arg(long)]
        dry_run: bool,
    },
    /// Privacy spent by the Poisson-subsampled Gaussian mechanism.
    Account {
        #[arg(long)]
        q: Option<f64>,
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long, default_value_t = 1e-5)]
        delta: f64,
        /// Calibrate σ for this ε instead of taking --sigma.
        #[arg(long)]
        target_epsilon: Option<f64>,
    },
    /// Trace and top-k eigenvalues of the training-loss Hessian.
    Hessian {
        #[arg(long)]
        checkpoint: PathBuf,
        /// cifar10:<dir>, raw:<path> or synth[:n=..,classes=..,size=..,noise=..,seed=..]
        #[arg(long)]
        data: String,
        #[arg(long, default_value_t = 128)]
        k: usize,
        #[arg(long, default_value_t = 1000)]
        iters: usize,
        #[arg(long, default_value_t = 1e-3)]
        tol: f64,
        /// Samples drawn (seeded) from the training split.
        #[arg(long, default_value_t = 512)]
        slice: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Analyse the EMA weights instead of the raw ones.
        #[arg(long)]
        ema: bool,
        #[arg(long)]
        max_hvp_calls: Option<usize>,
        /// Wall-clock budget in seconds; the report is marked incomplete
        /// when it runs out.
        #[arg(long)]
        time_limit: Option<f64>,
        /// Directory for hessian.txt and eigenvalues.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Histogram of one activation tap, written as CSV.
    Histogram {
        #[arg(long)]
        checkpoint: PathBuf,
        /// `<layer>.<V_R|V_F|V_A|V_AS>` (`V_A^S` is accepted for `V_AS`)
        #[arg(long)]
        tap: String,
        #[arg(long)]
        data: String,
        #[arg(long, default_value_t = dpsc::instrumentation::DEFAULT_BINS)]
        bins: usize,
        /// symmetric, auto or lo:hi
        #[arg(long, default_value = "symmetric", allow_hyphen_values = true)]
        range: String,
        #[arg(long, default_value_t = 256)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        ema: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Total and per-layer parameter counts.
    Paramcount {
        #[arg(long)]
        arch: String,
        #[arg(long)]
        scale_norm: bool,
        /// Group count, or `channels` for one group per channel.
        #[arg(long, default_value = "32")]
        groups: String,
        /// Channel width (tiny) or hidden size (mlp).
        #[arg(long)]
        width: Option<usize>,
    },
}

fn groups(s: &str) -> Result<GroupSpec, CliError> {
    s.parse().map_err(|e: dpsc::Error| CliError::config(e.to_string()))
}

fn run(cli: Cli) -> Result<(), CliError> {
    let stdout = &mut std::io::stdout().lock();
    match cli.command {
        Command::Train { config, dry_run } => commands::train(&config, dry_run, stdout),
        Command::Account {
            q,
            sigma,
            steps,
            delta,
            target_epsilon,
        } => commands::account(
            &AccountArgs {
                q,
                sigma,
                steps,
                delta,
                target_epsilon,
            },
            stdout,
        ),
        Command::Hessian {
            checkpoint,
            data,
            k,
            iters,
            tol,
            slice,
            seed,
            ema,
            max_hvp_calls,
            time_limit,
            out,
        } => {
            let time_limit = time_limit
                .map(|s| {
                    Duration::try_from_secs_f64(s).map_err(|_| CliError::config("--time-limit must be non-negative"))
                })
                .transpose()?;
            commands::hessian(
                &HessianArgs {
                    checkpoint,
                    data: data.parse::<DataSource>()?,
                    k,
                    iters,
                    tol,
                    slice,
                    seed,
                    ema,
                    max_hvp_calls,
                    time_limit,
                    out,
                },
                stdout,
            )
        }
        Command::Histogram {
            checkpoint,
            tap,
            data,
            bins,
            range,
            samples,
            seed,
            ema,
            out,
        } => commands::histogram_cmd(
            &HistogramArgs {
                checkpoint,
                tap,
                data: data.parse()?,
                bins,
                range: commands::parse_range(&range)?,
                samples,
                seed,
                ema,
                out,
            },
            stdout,
        ),
        Command::Paramcount {
            arch,
            scale_norm,
            groups: g,
            width,
        } => commands::paramcount(arch.parse::<Arch>()?, scale_norm, groups(&g)?, width, stdout),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("dpsc: {e}");
            ExitCode::from(e.code() as u8)
        }
    }
}
