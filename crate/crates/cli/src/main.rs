use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand};
use seaice_cli::{
    cmd_defaults, cmd_evaluate, cmd_predict, cmd_synth, cmd_train, EvaluateInput, ExperimentConfig, Overrides,
    PredictRequest,
};
use seaice_core::metrics::Grouping;

#[derive(Parser)]
#[command(name = "seaice", version, about = "Sea-ice concentration surrogate forecasting")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON experiment config; defaults are embedded.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Ice-edge concentration threshold.
    #[arg(long, global = true)]
    threshold: Option<f64>,
    #[arg(long, global = true, value_parser = parse_grouping)]
    grouping: Option<Grouping>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic weekly dataset.
    Synth,
    /// Train the single models and the ensemblers.
    Train,
    /// Forecast 52 weeks from one issue date.
    Predict {
        /// Model or ensemble checkpoint, or `climatology`.
        #[arg(long)]
        checkpoint: String,
        /// Observation SIF header; defaults to the config's data source.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Issue date (YYYY-MM-DD, a week start).
        #[arg(long)]
        issue: NaiveDate,
        /// Lead weeks (0-51) to render as PGM.
        #[arg(long, value_delimiter = ',')]
        weeks: Vec<usize>,
    },
    /// Score forecasts against actuals.
    Evaluate {
        /// Directory of checkpoints from `train`; forecasts the test years.
        #[arg(long, conflicts_with_all = ["forecast", "actual"])]
        models: Option<PathBuf>,
        /// Forecast as NAME=SIF; repeat for more sources.
        #[arg(long, requires = "actual")]
        forecast: Vec<String>,
        /// Actual observations SIF.
        #[arg(long)]
        actual: Option<PathBuf>,
    },
    /// Print the embedded default config.
    Defaults,
}

fn parse_grouping(s: &str) -> Result<Grouping, String> {
    s.parse().map_err(|e| format!("{e}"))
}

fn run(cli: Cli) -> Result<()> {
    if let Command::Defaults = cli.command {
        println!("{}", cmd_defaults()?);
        return Ok(());
    }
    let overrides = Overrides {
        seed: cli.common.seed,
        out: cli.common.out,
        threshold: cli.common.threshold,
        grouping: cli.common.grouping,
    };
    let cfg = ExperimentConfig::resolve(cli.common.config.as_deref(), &overrides)?;
    match cli.command {
        Command::Synth => {
            let path = cmd_synth(&cfg)?;
            println!("{}", path.display());
        }
        Command::Train => {
            let system = cmd_train(&cfg)?;
            println!("selected ensemble_{}", system.selected_ensemble().kind());
        }
        Command::Predict { checkpoint, data, issue, weeks } => {
            cmd_predict(&cfg, &PredictRequest { checkpoint, data, issue, weeks })?;
            println!("{}", cfg.output_dir.join("forecast.json").display());
        }
        Command::Evaluate { models, forecast, actual } => {
            let input = match (models, actual) {
                (Some(dir), _) => EvaluateInput::Models(dir),
                (None, Some(actual)) => EvaluateInput::Files { actual, forecasts: forecast },
                (None, None) => anyhow::bail!("pass --models DIR or --actual SIF with --forecast NAME=SIF"),
            };
            let eval = cmd_evaluate(&cfg, &input)?;
            for (grouping, reports) in &eval.tables {
                for (name, report) in reports {
                    if let Some((mae, ssim)) = report.mean() {
                        println!("{:9} {name:18} mae {mae:.4} ssim {ssim:.4}", grouping.as_str());
                    }
                }
            }
        }
        Command::Defaults => unreachable!(),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
