use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde::de::DeserializeOwned;

use robust_poet::backtest::{ingest_csv, rolling_backtest, Rebalance, Strategy};
use robust_poet::elliptical::Scenario;
use robust_poet::harness::{
    emit, run_experiment, run_factor_count_experiment, ExperimentConfig, FactorCountConfig,
    Metric, OutputFormat,
};
use robust_poet::{Error, FactorCount, PipelineSpec, PrecisionMethod, ScenarioSpec};

#[derive(Parser)]
#[command(name = "robust-poet", version, about = "Robust factor-model scatter, covariance and precision estimation")]
struct Cli {
    /// Worker threads for the global pool (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
    Text,
}

impl From<Format> for OutputFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Csv => OutputFormat::Csv,
            Format::Json => OutputFormat::Json,
            Format::Text => OutputFormat::Text,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum RebalanceArg {
    Monthly,
}

#[derive(Clone, Copy, ValueEnum)]
enum TemplateKind {
    Simulate,
    Factors,
    Backtest,
}

#[derive(Subcommand)]
enum Command {
    /// Monte-Carlo comparison of estimator pipelines on a simulated factor model.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
        /// Overrides `reps` in the config.
        #[arg(long)]
        reps: Option<usize>,
        /// Overrides `seed` in the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Also write every per-replicate value as JSON.
        #[arg(long)]
        dump: Option<PathBuf>,
    },
    /// Frequencies of the estimated factor count over a grid of dimensions.
    Factors {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Rolling minimum-variance backtest on a wide CSV of daily returns.
    Backtest {
        #[arg(long)]
        data: PathBuf,
        /// Trailing window in calendar months.
        #[arg(long, default_value_t = 120)]
        window: u32,
        #[arg(long, value_enum, default_value = "monthly")]
        rebalance: RebalanceArg,
        /// JSON list of strategies; the equal-weight benchmark is always added.
        #[arg(long)]
        pipelines: Option<PathBuf>,
        #[arg(long, default_value = "date")]
        date_column: String,
        /// Comma-separated tickers to keep.
        #[arg(long, value_delimiter = ',')]
        tickers: Option<Vec<String>>,
        /// Risk table CSV; the weight history goes next to it as `<out>.weights.json`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Weight history path, overriding the default next to `--out`.
        #[arg(long)]
        weights_out: Option<PathBuf>,
    },
    /// Prints an example configuration file.
    Template {
        #[arg(value_enum)]
        kind: TemplateKind,
    },
}

enum CliError {
    Config(String),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Runtime(m) => write!(f, "runtime failure: {m}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Validation(_) | Error::Json(_) => CliError::Config(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn to_json<T: serde::Serialize>(value: &T) -> Result<String, CliError> {
    serde_json::to_string_pretty(value)
        .map(|s| s + "\n")
        .map_err(|e| CliError::Runtime(e.to_string()))
}

fn simulate(
    config: &Path,
    out: Option<&Path>,
    format: Format,
    reps: Option<usize>,
    seed: Option<u64>,
    dump: Option<&Path>,
) -> Result<(), CliError> {
    let mut cfg: ExperimentConfig = read_json(config)?;
    cfg.reps = reps.unwrap_or(cfg.reps);
    cfg.seed = seed.unwrap_or(cfg.seed);
    cfg.validate()?;
    info!(
        "simulating {} pipelines, n = {}, d = {}, {} replicates",
        cfg.pipelines.len(),
        cfg.scenario.n,
        cfg.scenario.d,
        cfg.reps
    );
    let output = run_experiment(&cfg)?;
    for row in output.table.rows.iter().filter(|r| r.failures > 0) {
        warn!("{} / {}: {} failed replicates", row.pipeline, row.metric, row.failures);
    }
    emit(&output.table.render(format.into())?, out)?;
    if let Some(path) = dump {
        emit(&to_json(&output.replicates)?, Some(path))?;
    }
    Ok(())
}

fn factors(
    config: &Path,
    out: Option<&Path>,
    format: Format,
    reps: Option<usize>,
    seed: Option<u64>,
) -> Result<(), CliError> {
    let mut cfg: FactorCountConfig = read_json(config)?;
    cfg.reps = reps.unwrap_or(cfg.reps);
    cfg.seed = seed.unwrap_or(cfg.seed);
    let table = run_factor_count_experiment(&cfg)?;
    emit(&table.render(format.into())?, out)?;
    Ok(())
}

fn weights_path(out: Option<&Path>, explicit: Option<&Path>) -> Option<PathBuf> {
    explicit.map(Path::to_path_buf).or_else(|| {
        out.map(|p| {
            let mut s = p.as_os_str().to_owned();
            s.push(".weights.json");
            PathBuf::from(s)
        })
    })
}

#[allow(clippy::too_many_arguments)]
fn backtest(
    data: &Path,
    window: u32,
    rebalance: RebalanceArg,
    pipelines: Option<&Path>,
    date_column: &str,
    tickers: Option<&[String]>,
    out: Option<&Path>,
    weights_out: Option<&Path>,
) -> Result<(), CliError> {
    let mut strategies: Vec<Strategy> = match pipelines {
        Some(p) => read_json(p)?,
        None => default_strategies(),
    };
    if !strategies.iter().any(|s| matches!(s, Strategy::EqualWeight)) {
        strategies.insert(0, Strategy::EqualWeight);
    }
    for s in &strategies {
        if let Strategy::Pipeline(spec) = s {
            spec.validate()?;
        }
    }
    let ingested = ingest_csv(data, date_column, tickers)?;
    if !ingested.dropped.is_empty() {
        warn!("dropped tickers with missing values: {}", ingested.dropped.join(", "));
    }
    let rebalance = match rebalance {
        RebalanceArg::Monthly => Rebalance::Monthly,
    };
    let report = rolling_backtest(&ingested.panel, &strategies, window, rebalance)?;
    for gap in &report.gaps {
        warn!("{gap:?}");
    }
    emit(&report.risk_csv()?, out)?;
    if let Some(path) = weights_path(out, weights_out) {
        emit(&report.weights_json()?, Some(&path))?;
    }
    Ok(())
}

fn default_strategies() -> Vec<Strategy> {
    vec![
        Strategy::EqualWeight,
        Strategy::Pipeline(PipelineSpec::sample(FactorCount::Gr)),
        Strategy::Pipeline(PipelineSpec::poet_ss(FactorCount::Gr)),
        Strategy::Pipeline(PipelineSpec::poet_tme(FactorCount::Gr)),
    ]
}

fn template(kind: TemplateKind) -> Result<String, CliError> {
    let scenario = ScenarioSpec::standard(Scenario::II, 100, 200, 1);
    match kind {
        TemplateKind::Simulate => {
            let known = FactorCount::Known { m: 3 };
            to_json(&ExperimentConfig {
                scenario,
                pipelines: vec![
                    PipelineSpec::sample(known).with_precision(PrecisionMethod::Clime),
                    PipelineSpec::poet_ss(known).with_precision(PrecisionMethod::Clime),
                    PipelineSpec::poet_tme(known).with_precision(PrecisionMethod::Clime),
                ],
                reps: robust_poet::harness::DEFAULT_REPS,
                metrics: Metric::scatter_set().into_iter().chain(Metric::precision_set()).collect(),
                seed: 0,
            })
        }
        TemplateKind::Factors => to_json(&FactorCountConfig {
            scenario,
            d_grid: vec![100, 200, 400],
            methods: vec![
                robust_poet::FactorCriterion::Er,
                robust_poet::FactorCriterion::Gr,
            ],
            max_factors: 8,
            reps: robust_poet::harness::DEFAULT_REPS,
            scatter_kind: robust_poet::ScatterChoice::SpatialSign,
            seed: 0,
        }),
        TemplateKind::Backtest => to_json(&default_strategies()),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    match cli.command {
        Command::Simulate { config, out, format, reps, seed, dump } => {
            simulate(&config, out.as_deref(), format, reps, seed, dump.as_deref())
        }
        Command::Factors { config, out, format, reps, seed } => {
            factors(&config, out.as_deref(), format, reps, seed)
        }
        Command::Backtest {
            data,
            window,
            rebalance,
            pipelines,
            date_column,
            tickers,
            out,
            weights_out,
        } => backtest(
            &data,
            window,
            rebalance,
            pipelines.as_deref(),
            &date_column,
            tickers.as_deref(),
            out.as_deref(),
            weights_out.as_deref(),
        ),
        Command::Template { kind } => {
            print!("{}", template(kind)?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
