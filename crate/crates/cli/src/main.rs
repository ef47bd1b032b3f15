//! `mf`: runs the forecasting pipeline stage by stage or end to end.
//!
//! Every stage reads a run config (`--config`) and writes into `--out`.
//! Exit status is 0 on success, 2 for bad input or configuration and 1
//! for anything else.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use mforecast_core::aggregate::LatentNorm;
use mforecast_core::pipeline::{self, Inputs, RunConfig};
use mforecast_core::synth::PlantSpec;
use mforecast_core::Error;

#[derive(Parser)]
#[command(name = "mf", version, about = "Forecast survey distributions from model internals")]
struct Cli {
    /// Worker threads for every parallel stage (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a planted model, corpus, survey and ground truth.
    Synth(SynthArgs),
    /// Train and evaluate party probes.
    Probe(RunArgs),
    /// Select and validate party value vectors.
    Select(RunArgs),
    /// Sample personas and estimate distribution tables.
    Forecast(RunArgs),
    /// Compare forecasts with the survey and write the report.
    Evaluate(RunArgs),
    /// Probe, select, forecast and evaluate in one go.
    Pipeline(RunArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Plant spec JSON; the built-in spec when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Output-head corruption strength, at least 0.
    #[arg(long)]
    corruption: Option<f64>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `out` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    entropy_threshold: Option<f64>,
    #[arg(long)]
    fence: Option<f64>,
    #[arg(long)]
    templates: Option<usize>,
    #[arg(long)]
    personas: Option<usize>,
    /// Latent normalization: softmax or minshift.
    #[arg(long)]
    norm: Option<LatentNorm>,
}

impl RunArgs {
    fn load(&self) -> Result<(RunConfig, PathBuf)> {
        let mut cfg = RunConfig::load(&self.config)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(t) = self.entropy_threshold {
            cfg.entropy_threshold = t;
        }
        if let Some(f) = self.fence {
            cfg.fence = f;
        }
        if let Some(j) = self.templates {
            cfg.templates = Some(j);
        }
        if let Some(n) = self.personas {
            cfg.personas = n;
        }
        if let Some(n) = self.norm {
            cfg.latent_norm = n;
        }
        cfg.validate()?;
        let out = match (&self.out, &cfg.out) {
            (Some(o), _) => o.clone(),
            (None, Some(o)) => cfg.resolve(o),
            (None, None) => {
                return Err(Error::RunConfig("no output directory: pass --out or set `out` in the config".into()).into())
            }
        };
        Ok((cfg, out))
    }
}

fn synth(args: &SynthArgs) -> Result<()> {
    let mut spec = match &args.config {
        Some(p) => {
            let bytes = std::fs::read(p).map_err(|e| Error::Io { path: p.clone(), source: e })?;
            PlantSpec::from_json(&bytes)?
        }
        None => PlantSpec::default(),
    };
    if let Some(s) = args.seed {
        spec.seed = s;
    }
    if let Some(g) = args.corruption {
        spec.corruption = g;
    }
    spec.validate()?;
    let world = pipeline::run_synth(&spec, &args.out)?;
    log::info!(
        "wrote synthetic world with {} planted neurons to {}",
        world.planted.len(),
        args.out.display()
    );
    println!("{}", args.out.join("run.json").display());
    Ok(())
}

fn report_path(out: &Path, stage: &str) {
    println!("{}", out.join(stage).display());
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(Error::RunConfig("--workers must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring worker pool")?;
    }
    match &cli.command {
        Command::Synth(a) => synth(a),
        Command::Probe(a) => {
            let (cfg, out) = a.load()?;
            let inputs = Inputs::load(&cfg)?;
            for r in pipeline::run_probe(&cfg, &inputs, &out)? {
                log::info!(
                    "probe {} layer {}: holdout F1 {:.3}",
                    r.probe.party,
                    r.probe.layer,
                    r.metrics.f1
                );
            }
            report_path(&out, "probe");
            Ok(())
        }
        Command::Select(a) => {
            let (cfg, out) = a.load()?;
            let inputs = Inputs::load(&cfg)?;
            for s in pipeline::run_select(&cfg, &inputs, &out)? {
                log::info!("{}: {} aligned, {} diametric", s.party, s.aligned.len(), s.diametric.len());
            }
            report_path(&out, "select");
            Ok(())
        }
        Command::Forecast(a) => {
            let (cfg, out) = a.load()?;
            let inputs = Inputs::load(&cfg)?;
            pipeline::run_forecast(&cfg, &inputs, &out)?;
            report_path(&out, "forecast");
            Ok(())
        }
        Command::Evaluate(a) => {
            let (cfg, out) = a.load()?;
            let country = mforecast_core::persona::CountryConfig::load(&cfg.resolve(&cfg.country))?;
            let report = pipeline::run_evaluate(&cfg, &country, &out)?;
            log::info!("overall latent win rate {:.3}", report.overall.rate);
            report_path(&out, "evaluate");
            Ok(())
        }
        Command::Pipeline(a) => {
            let (cfg, out) = a.load()?;
            let run = pipeline::run_pipeline(&cfg, &out)?;
            if let Some(r) = &run.report {
                log::info!("overall latent win rate {:.3}", r.overall.rate);
            }
            println!("{}", out.display());
            Ok(())
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(e) if e.is_user_error() => 2,
        Some(_) => 1,
        None => 1,
    }
}

fn main() -> ExitCode {
    let level = std::env::var("MF_LOG_LEVEL").unwrap_or_else(|_| "info".into());
    env_logger::Builder::new()
        .parse_filters(&level)
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

