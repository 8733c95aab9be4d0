use std::path::PathBuf;
use std::process::ExitCode;

use adaperf::eval::DEFAULT_TAUS;
use adaperf::pipeline::{
    write_report, ExperimentConfig, MeasuredSuite, Pipeline, ReportInputs, Stage, OUTPUT_ROOT_ENV,
};
use adaperf::Error;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

/// Performance testing for adaptive neural networks.
#[derive(Parser)]
#[command(name = "adaperf", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Root for relative `output_dir` values.
    #[arg(long, env = OUTPUT_ROOT_ENV)]
    output_root: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run every pending stage, resuming from the last completed one.
    Run(Common),
    /// Train (or load) the adaptive model.
    TrainAdnn(Common),
    /// Train the perturbation generator against the adaptive model.
    TrainGenerator(Common),
    /// Generate the test suite from the trained generator.
    Generate(Common),
    /// Run the iterative per-sample baseline.
    Baseline(Common),
    /// Measure latency, sweep thresholds and write the comparison report.
    Evaluate(Common),
    /// Re-evaluate the generated suite under uniform thresholds.
    SweepThresholds {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        taus: Option<Vec<f32>>,
    },
    /// Retrain the adaptive model on the generated suite.
    MitigateRetrain(Common),
    /// Train and evaluate the linear input filter.
    MitigateDetect(Common),
    /// Rebuild the report from persisted suites.
    Report {
        #[command(flatten)]
        common: Common,
        /// Suite directories to merge instead of the experiment's own.
        #[arg(long = "suite")]
        suites: Vec<PathBuf>,
        /// Output directory when merging explicit suites.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn open(common: &Common) -> adaperf::Result<Pipeline> {
    let config = ExperimentConfig::load(&common.config)?;
    let dir = config.resolve_output_dir(common.output_root.as_deref());
    Pipeline::open(config, &dir)
}

fn print(value: &impl Serialize) -> adaperf::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn stage(common: &Common, stage: Stage) -> adaperf::Result<()> {
    let mut p = open(common)?;
    p.run_stage(stage)?;
    eprintln!("{} done in {}", stage.name(), p.layout().root.display());
    Ok(())
}

fn run(cli: Cli) -> adaperf::Result<()> {
    match cli.command {
        Command::Run(c) => {
            let mut p = open(&c)?;
            let s = p.run_all()?;
            for st in &s.skipped {
                eprintln!("{} already complete", st.name());
            }
            for st in &s.ran {
                eprintln!("{} done", st.name());
            }
            println!("{}", s.dir.display());
            Ok(())
        }
        Command::TrainAdnn(c) => stage(&c, Stage::TrainAdnn),
        Command::TrainGenerator(c) => stage(&c, Stage::TrainGenerator),
        Command::Generate(c) => stage(&c, Stage::Generate),
        Command::Baseline(c) => stage(&c, Stage::Baseline),
        Command::Evaluate(c) => stage(&c, Stage::Evaluate),
        Command::SweepThresholds { common, taus } => {
            let p = open(&common)?;
            let rows = p.sweep_thresholds(&taus.unwrap_or_else(|| DEFAULT_TAUS.to_vec()))?;
            print(&rows)
        }
        Command::MitigateRetrain(c) => print(&open(&c)?.mitigate_retrain()?),
        Command::MitigateDetect(c) => print(&open(&c)?.mitigate_detect()?),
        Command::Report { common, suites, out } => {
            if suites.is_empty() {
                for f in open(&common)?.write_report()? {
                    println!("{}", f.display());
                }
                return Ok(());
            }
            let config = ExperimentConfig::load(&common.config)?;
            let out = out.ok_or_else(|| Error::Config("--out is required with --suite".into()))?;
            let inputs = ReportInputs {
                suites: suites.iter().map(|d| MeasuredSuite::load(d)).collect::<adaperf::Result<_>>()?,
                sweep: None,
                overhead: None,
                distribution_bins: config.evaluation.distribution_bins,
            };
            for f in write_report(&out, &inputs)? {
                println!("{}", f.display());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            match e {
                Error::Config(_) | Error::Json(_) => ExitCode::from(2),
                _ => ExitCode::from(3),
            }
        }
    }
}
