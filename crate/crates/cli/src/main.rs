//! `neumat`: batch front end for profiling, approximating, lowering,
//! running, costing and fine-tuning small networks.

mod commands;
mod error;
mod inputs;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::LazyLock;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use error::{CliError, CliResult};

static VERSION: LazyLock<String> = LazyLock::new(|| {
    format!(
        "{} (graph format {}, weights format {}, plan format {}, range format {})",
        env!("CARGO_PKG_VERSION"),
        neumat::ir::io::GRAPH_FORMAT_VERSION,
        neumat::ir::io::WEIGHTS_VERSION,
        neumat::lowering::PLAN_FORMAT_VERSION,
        neumat::profiler::RANGE_FORMAT_VERSION,
    )
});

#[derive(Debug, Parser)]
#[command(name = "neumat", version = VERSION.as_str(), about = "Piecewise-linear lowering and accelerator cost modelling for small networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Record the input range of every nonlinear operator on a dataset.
    Profile(ProfileArgs),
    /// Build one piecewise-linear table, or one per profiled range.
    Approximate(ApproximateArgs),
    /// Rewrite a graph into matrix-unit primitives.
    Lower(LowerArgs),
    /// Execute a plan and compare it with the reference graph.
    Run(RunArgs),
    /// Estimate latency and energy of a plan on the accelerator.
    Simulate(SimulateArgs),
    /// Find the best tiling for one matrix multiplication.
    Search(SearchArgs),
    /// Fine-tune a plan's weights through its tables.
    Train(TrainArgs),
    /// Summarize parameter overhead, cost and error for several plans.
    Report(ReportArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct ProfileArgs {
    /// Graph JSON (weights are read from the container it names).
    #[arg(long)]
    pub graph: PathBuf,
    /// Calibration data: CSV `label,f_1..f_d` or a container with `features` and `labels`.
    #[arg(long)]
    pub data: PathBuf,
    /// `minmax` or `percentile(p)`.
    #[arg(long, default_value = "minmax")]
    pub policy: String,
    /// Fraction of the observed width added on each side.
    #[arg(long, default_value_t = neumat::profiler::DEFAULT_PADDING)]
    pub padding: f64,
    #[arg(long, default_value = "ranges.json")]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ApproximateArgs {
    /// Function to approximate (exp, reciprocal, sqrt, rsqrt, gelu, tanh, sigmoid, erf, square).
    #[arg(long, requires = "range", conflicts_with = "from_ranges")]
    pub func: Option<String>,
    /// Interval to fit, `A B`.
    #[arg(long, num_args = 2, value_names = ["A", "B"], allow_negative_numbers = true)]
    pub range: Option<Vec<f64>>,
    /// Build a table for every entry of a ranges file instead.
    #[arg(long)]
    pub from_ranges: Option<PathBuf>,
    /// Horizontal step of the elastic fit.
    #[arg(long)]
    pub dlx: Option<f64>,
    /// Vertical budget per segment of the elastic fit.
    #[arg(long)]
    pub dly: Option<f64>,
    /// Mean-error threshold above which a segment is bias-corrected.
    #[arg(long, default_value_t = 0.0)]
    pub eth: f64,
    /// Upper bound on elastic segments.
    #[arg(long)]
    pub max_segments: Option<usize>,
    /// Equal-width fit with this many segments instead of the elastic one.
    #[arg(long, conflicts_with_all = ["dlx", "dly", "max_segments"])]
    pub segments: Option<usize>,
    /// Bias-correct the equal-width fit.
    #[arg(long, requires = "segments")]
    pub corrected: bool,
    /// Output file, or output directory with `--from-ranges`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct LowerArgs {
    #[arg(long)]
    pub graph: PathBuf,
    /// Directory of `<key>.json` tables; may be omitted for ReLU-only graphs.
    #[arg(long)]
    pub tables: Option<PathBuf>,
    /// Ranges file used to warn about tables that do not cover them.
    #[arg(long)]
    pub ranges: Option<PathBuf>,
    #[arg(long, default_value = "plan.json")]
    pub out: PathBuf,
    /// Quantize matmul operands to INT8 and tables to 16-bit fixed point.
    #[arg(long, requires = "data")]
    pub int8: bool,
    /// Calibration data for `--int8`.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct RunArgs {
    #[arg(long)]
    pub plan: PathBuf,
    /// Container of input tensors (optionally with a leading sample axis) or a dataset.
    #[arg(long)]
    pub input: PathBuf,
    /// Reference graph; when given, `fidelity.csv` is written.
    #[arg(long)]
    pub graph: Option<PathBuf>,
    /// Evaluate nonlinearities exactly instead of through the tables.
    #[arg(long)]
    pub exact: bool,
    /// Output directory.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct SimulateArgs {
    #[arg(long)]
    pub plan: PathBuf,
    /// Accelerator JSON; defaults to the built-in configuration.
    #[arg(long)]
    pub accel: Option<PathBuf>,
    /// Try every stationary scheme, not only the accelerator's.
    #[arg(long)]
    pub search_stationary: bool,
    /// Joules per matmul; blockings above it are discarded.
    #[arg(long)]
    pub energy_budget: Option<f64>,
    #[arg(long, default_value = "cost.csv")]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct SearchArgs {
    #[arg(long)]
    pub m: usize,
    #[arg(long)]
    pub k: usize,
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub accel: Option<PathBuf>,
    #[arg(long)]
    pub search_stationary: bool,
    #[arg(long)]
    pub energy_budget: Option<f64>,
    #[arg(long, default_value = "blocking.json")]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub plan: PathBuf,
    /// Training data: CSV `label,f_1..f_d` or a container with `features` and `labels`.
    #[arg(long)]
    pub data: PathBuf,
    /// Training config JSON; unspecified fields take defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Held-out data for the `eval_acc` column.
    #[arg(long)]
    pub eval: Option<PathBuf>,
    /// Train through exact nonlinearities (baseline) instead of the tables.
    #[arg(long)]
    pub exact: bool,
    /// Output directory for `weights.nmwt`, `metrics.csv` and `plan.json`.
    #[arg(long, default_value = "train")]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ReportArgs {
    /// Plan files to summarize, one row each.
    #[arg(long, num_args = 1.., required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub accel: Option<PathBuf>,
    /// Reference graph for the error columns (needs `--data`).
    #[arg(long, requires = "data")]
    pub graph: Option<PathBuf>,
    #[arg(long, requires = "graph")]
    pub data: Option<PathBuf>,
    #[arg(long, default_value = "summary.csv")]
    pub out: PathBuf,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Profile(_) => "profile",
            Command::Approximate(_) => "approximate",
            Command::Lower(_) => "lower",
            Command::Run(_) => "run",
            Command::Simulate(_) => "simulate",
            Command::Search(_) => "search",
            Command::Train(_) => "train",
            Command::Report(_) => "report",
        }
    }

    fn execute(&self) -> CliResult<()> {
        match self {
            Command::Profile(a) => commands::profile(a),
            Command::Approximate(a) => commands::approximate(a),
            Command::Lower(a) => commands::lower(a),
            Command::Run(a) => commands::run(a),
            Command::Simulate(a) => commands::simulate(a),
            Command::Search(a) => commands::search(a),
            Command::Train(a) => commands::train(a),
            Command::Report(a) => commands::report(a),
        }
    }
}

fn fail(err: &CliError, context: &str) -> ExitCode {
    let line = serde_json::json!({
        "code": err.code(),
        "message": err.to_string(),
        "context": context,
    });
    eprintln!("{line}");
    ExitCode::from(err.code() as u8)
}

fn configure_threads() -> CliResult<()> {
    let Ok(v) = std::env::var("NEUMAT_THREADS") else { return Ok(()) };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::usage(format!("NEUMAT_THREADS must be a positive integer, got '{v}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::usage(format!("cannot size the thread pool: {e}")))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let text = e.render().to_string();
            let message = text.lines().next().unwrap_or_default().trim_start_matches("error: ");
            return fail(&CliError::usage(message), "arguments");
        }
    };
    if let Err(e) = configure_threads() {
        return fail(&e, "environment");
    }
    match cli.command.execute() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e, cli.command.name()),
    }
}
