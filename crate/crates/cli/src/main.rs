//! `vcsel-polar`: simulate and analyze polarization fluctuations of
//! quantum-well vertical cavity lasers.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use vcsel_polar_cli::commands::{
    cmd_correlate, cmd_derive, cmd_figures, cmd_fit, cmd_invert, cmd_simulate, CommandContext,
};
use vcsel_polar_cli::config::RunConfig;
use vcsel_polar_cli::exit_code;
use vcsel_polar_cli::output::resolve_out_dir;

#[derive(Parser)]
#[command(
    name = "vcsel-polar",
    version,
    about = "Polarization-fluctuation simulation and parameter estimation for quantum-well VCSELs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (default: config output.dir, then $VCSEL_POLAR_OUT,
    /// then ./out).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Override the configured RNG seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Freeze the intensity-noise amplitude at its stationary value
    /// (nonlinear mode).
    #[arg(long)]
    frozen_noise: bool,
}

#[derive(Args)]
struct InputArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Input artifact produced by an earlier stage.
    #[arg(long)]
    input: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Report the dimensionless model parameters and stability flags.
    Derive(CommonArgs),
    /// Run the Langevin simulation and write the fluctuation series.
    Simulate(SimulateArgs),
    /// Estimate the correlators of a simulated series.
    Correlate(InputArgs),
    /// Fit the correlator channels with the damped-cosine forms.
    Fit(InputArgs),
    /// Invert fitted observables for the physical parameters.
    Invert(InputArgs),
    /// Emit plot-ready data: sphere vector fields, covariance ellipses and
    /// the correlator lag curves.
    Figures(CommonArgs),
}

fn context(common: &CommonArgs, seed: Option<u64>, frozen: bool) -> anyhow::Result<CommandContext> {
    let config = RunConfig::load(&common.config)?;
    let out_dir = resolve_out_dir(
        common.out.clone(),
        config.output.as_ref().and_then(|o| o.dir.as_deref()),
    );
    Ok(CommandContext {
        config,
        out_dir,
        seed_override: seed,
        frozen_noise: frozen,
    })
}

fn run() -> anyhow::Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Derive(args) => cmd_derive(&context(args, None, false)?),
        Command::Simulate(args) => {
            cmd_simulate(&context(&args.common, args.seed, args.frozen_noise)?)
        }
        Command::Correlate(args) => cmd_correlate(&context(&args.common, None, false)?, &args.input),
        Command::Fit(args) => cmd_fit(&context(&args.common, None, false)?, &args.input),
        Command::Invert(args) => cmd_invert(&context(&args.common, None, false)?, &args.input),
        Command::Figures(args) => cmd_figures(&context(args, None, false)?),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err) as u8)
        }
    }
}
