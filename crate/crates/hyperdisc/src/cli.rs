//! Command-line interface.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::{self, Stage};
use crate::error::Result;
use crate::pipeline::{self, DiscoveryRun, RunOptions};

#[derive(Debug, Parser)]
#[command(name = "hyperdisc", version, about = "Sparse hyperelastic model discovery with quantified uncertainty")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// JSON run configuration, merged over the preset when both are given.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Named preset: treloar, cardiac-synthetic, cardiac-experimental,
    /// desk-isotropic, desk-calibration.
    #[arg(long)]
    pub preset: Option<String>,
    /// Root seed, overriding the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory, overriding the configuration.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads for batch model evaluations.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Suppress stage progress on stderr.
    #[arg(long, short)]
    pub quiet: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// GP fit, distillation, Sobol' reduction and refinement.
    Discover {
        #[command(flatten)]
        run: RunArgs,
        /// Last stage to run.
        #[arg(long, value_enum, default_value_t = Stage::All)]
        stage: Stage,
    },
    /// GP fit and distillation of a fixed library.
    Calibrate {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Recompute metrics.json of a finished run.
    Metrics {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Write plot tables under <run>/plots.
    ExportPlots {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        threads: Option<usize>,
    },
}

fn resolve(run: &RunArgs) -> Result<config::RunConfig> {
    let mut cfg = config::load(run.config.as_deref(), run.preset.as_deref())?;
    if let Some(s) = run.seed {
        cfg.seed = s;
    }
    if let Some(o) = &run.out {
        cfg.output_dir = o.clone();
    }
    Ok(cfg)
}

fn report(run: &DiscoveryRun) {
    let m = &run.metrics;
    println!("run directory: {}", run.dir.display());
    println!(
        "gp: R2 = {:.4}  RMSE = {:.4} kPa  EC95 = {:.2}%",
        m.gp.r2,
        m.gp.rmse,
        100.0 * m.gp.ec
    );
    for s in &m.sobol {
        println!("sobol pass {}: kept {}", s.pass, s.kept.join(" "));
    }
    for model in &m.models {
        println!(
            "{}: R2 = {:.4}  RMSE = {:.4} kPa  EC95 = {:.2}%",
            model.stage,
            model.metrics.r2,
            model.metrics.rmse,
            100.0 * model.metrics.ec
        );
        for p in &model.parameters {
            println!(
                "  {:>10}  mean {:.5}  95% [{:.5}, {:.5}]",
                p.name, p.mean, p.q025, p.q975
            );
        }
    }
}

/// Runs a parsed command.
pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Discover { run, stage } => {
            let cfg = resolve(&run)?;
            let opts = RunOptions {
                stage,
                threads: run.threads,
                progress: !run.quiet,
            };
            report(&pipeline::run_discovery(cfg, &opts)?);
        }
        Command::Calibrate { run } => {
            let cfg = resolve(&run)?;
            let opts = RunOptions {
                stage: Stage::Distill,
                threads: run.threads,
                progress: !run.quiet,
            };
            report(&pipeline::run_calibration(cfg, &opts)?);
        }
        Command::Metrics { run, threads } => {
            let m = pipeline::recompute_metrics(&run, threads)?;
            println!("{}", serde_json::to_string_pretty(&m).unwrap_or_default());
        }
        Command::ExportPlots { run, threads } => {
            let e = pipeline::export_plots(&run, threads)?;
            let n = e.gp_functions.len() + e.model_functions.len() + e.sobol_curves.len()
                + usize::from(e.parameter_samples.is_some());
            println!("wrote {n} tables under {}", run.join("plots").display());
        }
    }
    Ok(())
}
