//! `chaintrace` — synthetic microservice corpora, window-graph building,
//! one-class detector training, scoring, root-cause path ranking, and
//! sensitivity sweeps, as one composable pipeline over fixed-name files.
//!
//! Exit codes: 0 success, 1 validation or input error (one `ERROR 1: …`
//! line on stderr), 2 internal failure.

mod config;
mod pipeline;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use pipeline::SweepKind;

#[derive(Parser)]
#[command(
    name = "chaintrace",
    version,
    about = "Anomaly detection over microservice call chains"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// JSON config file; sections and keys mirror the --set paths.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Master seed; derives one sub-seed per pipeline stage.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,

    /// Directory for all input and output artifacts.
    #[arg(long, value_name = "DIR", default_value = "out")]
    out: PathBuf,

    /// Override one config key (repeatable), e.g. --set train.epochs=10.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Common {
    fn load(&self) -> chaintrace::Result<config::RunConfig> {
        config::load(self.config.as_deref(), self.seed, &self.set)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic span corpus with optional anomalies and scaling.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Parse and validate spans.ndjson, writing rejected lines.
    Ingest {
        #[command(flatten)]
        common: Common,
        /// Span file to read instead of OUT/spans.ndjson.
        #[arg(long, value_name = "FILE")]
        input: Option<PathBuf>,
    },
    /// Aggregate spans into standardized per-window service graphs.
    BuildGraphs {
        #[command(flatten)]
        common: Common,
    },
    /// Train the one-class detector on the leading windows.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Score every window against a trained model.
    Score {
        #[command(flatten)]
        common: Common,
    },
    /// Rank candidate root-cause paths for one window.
    Trace {
        #[command(flatten)]
        common: Common,
        /// Window index to analyze; defaults to the last window.
        #[arg(long, value_name = "W")]
        window: Option<i64>,
        /// Ranked paths to keep; defaults to score.top_k.
        #[arg(long, value_name = "K")]
        top_k: Option<usize>,
    },
    /// Metrics and sensitivity sweeps.
    Eval {
        #[command(subcommand)]
        cmd: EvalCmd,
    },
}

#[derive(Subcommand)]
enum EvalCmd {
    /// AUC and confusion metrics over scores.csv.
    Auc {
        #[command(flatten)]
        common: Common,
        /// Decision threshold; defaults to the one stored in model.json.
        #[arg(long, value_name = "T")]
        threshold: Option<f64>,
    },
    /// Weight-decay sensitivity sweep over the benchmark protocol.
    SweepWd {
        #[command(flatten)]
        common: Common,
        /// Comma-separated decay coefficients (default built-in grid).
        #[arg(long, value_delimiter = ',', value_name = "G")]
        grid: Vec<f64>,
        /// Comma-separated benchmark seeds (default 0,1,2).
        #[arg(long, value_delimiter = ',', value_name = "S")]
        seeds: Vec<u64>,
    },
    /// Scaling-frequency sensitivity sweep over the benchmark protocol.
    SweepScaling {
        #[command(flatten)]
        common: Common,
        /// Comma-separated event frequencies per hour (default built-in grid).
        #[arg(long, value_delimiter = ',', value_name = "G")]
        grid: Vec<f64>,
        /// Comma-separated benchmark seeds (default 0,1,2).
        #[arg(long, value_delimiter = ',', value_name = "S")]
        seeds: Vec<u64>,
    },
}

fn dispatch(cli: Cli) -> chaintrace::Result<()> {
    match cli.cmd {
        Cmd::Synth { common } => pipeline::cmd_synth(&common.load()?, &common.out),
        Cmd::Ingest { common, input } => pipeline::cmd_ingest(&common.out, input.as_deref()),
        Cmd::BuildGraphs { common } => pipeline::cmd_build_graphs(&common.load()?, &common.out),
        Cmd::Train { common } => pipeline::cmd_train(&common.load()?, &common.out),
        Cmd::Score { common } => pipeline::cmd_score(&common.out),
        Cmd::Trace {
            common,
            window,
            top_k,
        } => pipeline::cmd_trace(&common.load()?, &common.out, window, top_k),
        Cmd::Eval { cmd } => match cmd {
            EvalCmd::Auc { common, threshold } => pipeline::cmd_eval_auc(&common.out, threshold),
            EvalCmd::SweepWd {
                common,
                grid,
                seeds,
            } => pipeline::cmd_sweep(
                &common.load()?,
                &common.out,
                SweepKind::WeightDecay,
                &grid,
                &seeds,
            ),
            EvalCmd::SweepScaling {
                common,
                grid,
                seeds,
            } => pipeline::cmd_sweep(
                &common.load()?,
                &common.out,
                SweepKind::Scaling,
                &grid,
                &seeds,
            ),
        },
    }
}

/// First line of an error display, without clap's "error: " prefix.
fn one_line(text: &str) -> String {
    text.lines()
        .find(|l| !l.trim().is_empty())
        .unwrap_or("unknown error")
        .trim_start_matches("error: ")
        .to_string()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{}", e);
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("ERROR 1: {}", one_line(&e.to_string()));
            return ExitCode::from(1);
        }
    };
    match std::panic::catch_unwind(|| dispatch(cli)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("ERROR 1: {}", one_line(&e.to_string()));
            ExitCode::from(1)
        }
        Err(_) => {
            // The default panic hook already printed the payload.
            eprintln!("ERROR 2: internal failure");
            ExitCode::from(2)
        }
    }
}
