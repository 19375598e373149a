mod commands;
mod model;
mod run;

use std::process::ExitCode;

use agropanel::{par, Result};
use clap::{Parser, Subcommand};

use crate::run::Run;

#[derive(Parser)]
#[command(name = "agropanel", version, about = "Weather aggregation, exposure bins and panel regressions for yield data")]
struct Cli {
    /// Worker threads (default: one per core)
    #[arg(long, global = true, env = "AGROPANEL_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Interpolate station values for one date onto a grid
    Interpolate(commands::InterpolateArgs),
    /// Fraction of each coarse cell covered by a land-cover class
    Zonal(commands::ZonalArgs),
    /// Aggregate a grid stack to admin units with a weight matrix
    Project(commands::ProjectArgs),
    /// Seasonal temperature exposure bins from daily unit tmax/tmin
    Bins(commands::BinsArgs),
    /// Degree days between two thresholds from exposure bins
    Degdays(commands::DegdaysArgs),
    /// Fixed-effects regression on exposure bins or a temperature polynomial
    Regress(commands::RegressArgs),
    /// Mean effect of a uniform warming with a delta-method SE
    Impact(commands::ImpactArgs),
    /// Placebo test that reshuffles weather across units
    Permtest(commands::PermtestArgs),
    /// Moran's I of regression residuals
    Moran(commands::MoranArgs),
    /// Spatial error model by maximum likelihood
    Sem(commands::SemArgs),
    /// Estimate the specification grid and draw the chart
    Speccurve(commands::SpeccurveArgs),
    /// Write a synthetic data set with known truth
    Simulate(commands::SimulateArgs),
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match dispatch(cli, argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("agropanel: {e}");
            ExitCode::from(if e.is_io() { 1 } else { 2 })
        }
    }
}

fn dispatch(cli: Cli, argv: Vec<String>) -> Result<()> {
    if let Some(n) = cli.threads {
        par::configure_threads(n)?;
    }
    let mut run = Run::new(argv);
    match cli.command {
        Command::Interpolate(a) => commands::interpolate(a, &mut run),
        Command::Zonal(a) => commands::zonal(a, &mut run),
        Command::Project(a) => commands::project(a, &mut run),
        Command::Bins(a) => commands::bins(a, &mut run),
        Command::Degdays(a) => commands::degdays(a, &mut run),
        Command::Regress(a) => commands::regress(a, &mut run),
        Command::Impact(a) => commands::impact(a, &mut run),
        Command::Permtest(a) => commands::permtest(a, &mut run),
        Command::Moran(a) => commands::moran(a, &mut run),
        Command::Sem(a) => commands::sem(a, &mut run),
        Command::Speccurve(a) => commands::speccurve(a, &mut run),
        Command::Simulate(a) => commands::simulate(a, &mut run),
    }
}
