//! Command-line front-end.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use echo4_core::detection::DecayModel;
use serde::Serialize;

use crate::config::Loaded;
use crate::error::{CliError, Result};
use crate::pipeline::{self, PhaseMatchRequest};
use crate::runner::with_threads;

#[derive(Debug, Parser)]
#[command(name = "echo4", version, about = "Four-level photon-echo simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Run configuration (JSON).
    pub config: PathBuf,
    /// Override a config value, e.g. `--set ensemble.n_classes=512`.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    pub set: Vec<String>,
    /// Output directory; defaults to the config's `output_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads; results do not depend on this.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Override the run seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

impl RunArgs {
    fn load(&self) -> Result<Loaded> {
        let mut overrides = self.set.clone();
        if let Some(s) = self.seed {
            overrides.push(format!("seed={s}"));
        }
        Loaded::from_path(&self.config, &overrides)
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModelArg {
    Exponential,
    Gaussian,
    LorentzianFt,
    VoigtFt,
}

impl From<ModelArg> for DecayModel {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::Exponential => DecayModel::Exponential,
            ModelArg::Gaussian => DecayModel::Gaussian,
            ModelArg::LorentzianFt => DecayModel::LorentzianFt,
            ModelArg::VoigtFt => DecayModel::VoigtFt,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run every sweep point and write emission, spectra and a manifest.
    Simulate(RunArgs),
    /// Run the holeburning preparation only.
    Prepare(RunArgs),
    /// Fit a decay model to (delay, amplitude) pairs from a CSV file.
    Fit {
        input: PathBuf,
        #[arg(long, value_enum, default_value = "exponential")]
        model: ModelArg,
        /// Column holding delays; the first column by default.
        #[arg(long)]
        x: Option<String>,
        /// Column holding amplitudes; the second column by default.
        #[arg(long)]
        y: Option<String>,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Phase-matching penalty for a beam geometry (JSON).
    Phasematch { input: PathBuf },
    /// Check a configuration and every sweep point without simulating.
    Validate(RunArgs),
}

fn print_json<T: Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v).expect("serializable"));
    Ok(())
}

/// Runs a parsed command and returns the process exit code.
pub fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Simulate(a) => {
            let l = a.load()?;
            let out = l.output_dir(a.out.as_deref());
            log::info!("simulating {} point(s) into {}", l.points().len(), out.display());
            let o = with_threads(a.threads, || pipeline::simulate(&l, &out))?;
            print_json(&serde_json::json!({ "output": o.dir, "points": o.points, "fit": o.fit }))?;
            Ok(0)
        }
        Command::Prepare(a) => {
            let l = a.load()?;
            let out = l.output_dir(a.out.as_deref());
            let s = with_threads(a.threads, || pipeline::prepare(&l, &out))?;
            print_json(&s)?;
            Ok(0)
        }
        Command::Fit { input, model, x, y, out } => {
            let pts = pipeline::read_points(&input, x.as_deref(), y.as_deref())?;
            let report = pipeline::fit_points(&pts, model.into())?;
            let text = serde_json::to_string_pretty(&report).expect("serializable");
            match out {
                Some(p) => std::fs::write(&p, text).map_err(CliError::io(p.display().to_string()))?,
                None => println!("{text}"),
            }
            Ok(if report.misfit { 4 } else { 0 })
        }
        Command::Phasematch { input } => {
            let text = std::fs::read_to_string(&input).map_err(CliError::io(input.display().to_string()))?;
            let req: PhaseMatchRequest =
                serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", input.display())))?;
            print_json(&pipeline::phasematch(&req)?)?;
            Ok(0)
        }
        Command::Validate(a) => {
            let l = a.load()?;
            for n in pipeline::validate(&l)? {
                println!("{n}");
            }
            println!("config ok, sha256 {}", l.hash);
            Ok(0)
        }
    }
}
