use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dinr::cli::{cmd_metrics, cmd_pretrain, cmd_reconstruct, cmd_sweep, CliError, GlobalOpts};
use dinr::solver::Method;

/// Sparse-view CT reconstruction experiments.
#[derive(Parser)]
#[command(name = "dinr", version, about)]
struct Cli {
    /// Experiment configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the master seed (and the pretraining seed).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Force single-threaded, bit-reproducible execution.
    #[arg(long, global = true)]
    deterministic: bool,

    /// Override the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Worker threads for independent grid cells.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the ellipse dataset and train the denoiser.
    Pretrain,
    /// Run the (views x methods) reconstruction grid and write the summary.
    Reconstruct,
    /// Sweep omega or rho_ratio over one (views, method) cell.
    Sweep {
        /// Parameter to sweep: omega | rho_ratio.
        #[arg(long)]
        param: String,
        /// Comma-separated values, run in the given order.
        #[arg(long)]
        values: String,
        #[arg(long)]
        views: usize,
        #[arg(long)]
        method: String,
    },
    /// Recompute PSNR/SSIM/ROI reports from saved volumes.
    Metrics {
        /// Reconstructed volume file.
        #[arg(long)]
        recon: PathBuf,
        /// Ground-truth volume file.
        #[arg(long)]
        truth: PathBuf,
        /// Declared data range.
        #[arg(long, default_value_t = 1.0)]
        range: f64,
        /// ROI anchor as `row,col`; proposed from the truth when absent.
        #[arg(long)]
        anchor: Option<String>,
        /// Method label for the report row.
        #[arg(long, default_value = "recon")]
        method: String,
        /// View-count label for the report row.
        #[arg(long, default_value_t = 0)]
        views: usize,
    },
}

fn require_config(cli: &Cli) -> Result<&PathBuf, CliError> {
    cli.config.as_ref().ok_or_else(|| {
        CliError::Config(dinr::Error::invalid("--config PATH is required for this command"))
    })
}

fn dispatch(cli: &Cli) -> Result<i32, CliError> {
    let opts = GlobalOpts {
        seed: cli.seed,
        out: cli.out.clone(),
        deterministic: cli.deterministic,
        threads: cli.threads,
    };
    match &cli.command {
        Command::Pretrain => {
            cmd_pretrain(require_config(cli)?, &opts)?;
            Ok(0)
        }
        Command::Reconstruct => cmd_reconstruct(require_config(cli)?, &opts),
        Command::Sweep { param, values, views, method } => {
            let parsed: Result<Vec<f64>, _> =
                values.split(',').map(|s| s.trim().parse::<f64>()).collect();
            let parsed = parsed.map_err(|_| {
                CliError::Config(dinr::Error::invalid(format!("bad --values list {values:?}")))
            })?;
            let method: Method = method.parse().map_err(CliError::Config)?;
            cmd_sweep(require_config(cli)?, &opts, param, &parsed, *views, method)
        }
        Command::Metrics { recon, truth, range, anchor, method, views } => {
            let anchor = match anchor {
                Some(text) => {
                    let parts: Vec<&str> = text.split(',').map(str::trim).collect();
                    let parse = |s: &str| s.parse::<usize>().ok();
                    match parts.as_slice() {
                        [r, c] => match (parse(r), parse(c)) {
                            (Some(r), Some(c)) => Some((r, c)),
                            _ => {
                                return Err(CliError::Config(dinr::Error::invalid(
                                    "bad --anchor, expected row,col",
                                )))
                            }
                        },
                        _ => {
                            return Err(CliError::Config(dinr::Error::invalid(
                                "bad --anchor, expected row,col",
                            )))
                        }
                    }
                }
                None => None,
            };
            cmd_metrics(recon, truth, *range, anchor, method, *views, cli.out.as_deref())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(0) => ExitCode::SUCCESS,
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("{}", e.message());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
