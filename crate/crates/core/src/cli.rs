//! Command-line surface: CSV ingestion, config handling, and the
//! `fit` / `compare` / `simulate` subcommands.
//!
//! Configuration comes from an optional TOML file plus command-line flags;
//! flags win. Artifacts land in the output directory under fixed names:
//! `fit.json` and `coefficients.csv` for fits (and the winning model of a
//! comparison), `comparison.csv` for comparisons, and `sim_results.csv`
//! for simulation studies. Identical inputs produce byte-identical
//! artifacts regardless of `--threads`.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::design::{build_design_matrix_with, Dataset, ModelFormula, Obs, ReferenceLevels};
use crate::engine::{fit, wald_table, FitOptions, GeeFit, Structure};
use crate::error::{Error, Result};
use crate::expfam::Family;
use crate::selection::{compare_structures, ComparisonReport};
use crate::simulation::{
    run_consistency_study, run_coverage_study, run_selection_study, SimResult, SimScenario,
};

/// Crossover-design GEE fitting, QIC structure comparison, and the
/// Monte-Carlo study harness.
#[derive(Debug, Parser)]
#[command(name = "crossgee", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit one marginal model and write fit.json + coefficients.csv.
    Fit(FitArgs),
    /// Fit several working correlations, rank them by QIC, and write
    /// comparison.csv plus the winning model's fit.json + coefficients.csv.
    Compare(CompareArgs),
    /// Run a simulation study and write sim_results.csv.
    Simulate(SimulateArgs),
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for artifacts (created if missing).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (0 = library default).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Debug, Args)]
struct ModelArgs {
    /// Input data CSV.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Comma-separated model terms, e.g. "intercept,period,treatment".
    #[arg(long)]
    formula: Option<String>,
    /// Response family: gaussian, poisson, binomial, or gamma.
    #[arg(long)]
    family: Option<String>,
}

#[derive(Debug, Args)]
struct FitArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    model: ModelArgs,
    /// Working correlation structure.
    #[arg(long)]
    structure: Option<String>,
}

#[derive(Debug, Args)]
struct CompareArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    model: ModelArgs,
    /// Comma-separated candidate structures (default: all seven).
    #[arg(long)]
    structure: Option<String>,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Master seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Study kind: selection, coverage, or consistency.
    #[arg(long)]
    study: Option<String>,
    /// Use the full replicate grid 2..=100 instead of the default
    /// subsample {2, 5, 10, 25, 50, 100}.
    #[arg(long)]
    full_grid: bool,
}

/// Column mapping of the input CSV. Optional columns fall back to the
/// conventional name when present and stay absent otherwise; naming one
/// explicitly makes it required.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ColumnMap {
    pub subject: String,
    pub period: String,
    pub occasion: String,
    pub treatment: String,
    pub sequence: String,
    pub response: String,
    pub time: Option<String>,
    pub baseline: Option<String>,
}

impl Default for ColumnMap {
    fn default() -> Self {
        ColumnMap {
            subject: "subject".into(),
            period: "period".into(),
            occasion: "occasion".into(),
            treatment: "treatment".into(),
            sequence: "sequence".into(),
            response: "response".into(),
            time: None,
            baseline: None,
        }
    }
}

/// `[data]` section: file path plus column mapping.
#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
struct DataConfig {
    path: Option<PathBuf>,
    #[serde(flatten)]
    columns: ColumnMap,
}

/// `[model]` section.
#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ModelConfig {
    formula: Vec<String>,
    family: Option<String>,
    structure: Option<String>,
    structures: Vec<String>,
    period_reference: Option<i64>,
    occasion_reference: Option<i64>,
    treatment_reference: Option<String>,
    sequence_reference: Option<String>,
}

/// `[fit]` section.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FitConfig {
    tol: f64,
    max_iter: usize,
    literal_residual_scale: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        let o = FitOptions::default();
        FitConfig {
            tol: o.tol,
            max_iter: o.max_iter,
            literal_residual_scale: o.literal_residual_scale,
        }
    }
}

/// `[simulate]` section.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SimulateConfig {
    study: String,
    periods: usize,
    occasions: usize,
    sequences: usize,
    n_grid: Vec<usize>,
    reps: usize,
    sigma2: f64,
    intercept: f64,
    seed: u64,
    coverage_n: usize,
    coverage_reps: usize,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        let s = SimScenario::default();
        SimulateConfig {
            study: "selection".into(),
            periods: s.periods,
            occasions: s.occasions,
            sequences: s.sequences,
            n_grid: s.n_grid,
            reps: s.reps,
            sigma2: s.sigma2,
            intercept: s.intercept,
            seed: s.seed,
            coverage_n: 50,
            coverage_reps: 500,
        }
    }
}

/// `[output]` section.
#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
struct OutputConfig {
    dir: Option<PathBuf>,
    threads: Option<usize>,
}

/// The full configuration file.
#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    data: DataConfig,
    model: ModelConfig,
    fit: FitConfig,
    simulate: SimulateConfig,
    output: OutputConfig,
}

impl RunConfig {
    /// Parse a TOML config file.
    pub fn from_path(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Io(format!("cli: cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text)
            .map_err(|e| Error::Config(format!("cli: invalid config {}: {e}", path.display())))
    }

    fn references(&self) -> ReferenceLevels {
        ReferenceLevels {
            period: self.model.period_reference,
            occasion: self.model.occasion_reference,
            treatment: self.model.treatment_reference.clone(),
            sequence: self.model.sequence_reference.clone(),
        }
    }

    fn fit_options(&self) -> FitOptions {
        FitOptions {
            tol: self.fit.tol,
            max_iter: self.fit.max_iter,
            literal_residual_scale: self.fit.literal_residual_scale,
        }
    }

    fn scenario(&self) -> SimScenario {
        SimScenario {
            periods: self.simulate.periods,
            occasions: self.simulate.occasions,
            sequences: self.simulate.sequences,
            n_grid: self.simulate.n_grid.clone(),
            reps: self.simulate.reps,
            sigma2: self.simulate.sigma2,
            intercept: self.simulate.intercept,
            seed: self.simulate.seed,
        }
    }
}

/// Read a long-format CSV into a validated [`Dataset`].
///
/// The header row is required; the mapped subject, period, occasion,
/// treatment, sequence, and response columns must exist. Optional time and
/// baseline columns are picked up under their conventional names, or under
/// the mapped names (then required).
pub fn ingest_csv(path: &Path, columns: &ColumnMap) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Io(format!("cli: cannot open {}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| {
            Error::Schema(format!(
                "cli: cannot read header of {}: {e}",
                path.display()
            ))
        })?
        .clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Err(Error::Schema(format!(
            "cli: {} is empty or has no header row",
            path.display()
        )));
    }

    let find = |name: &str| headers.iter().position(|h| h == name);
    let require = |name: &str| {
        find(name).ok_or_else(|| {
            Error::Schema(format!(
                "cli: {} has no column {name:?}; found {:?}",
                path.display(),
                headers.iter().collect::<Vec<_>>()
            ))
        })
    };
    let subject = require(&columns.subject)?;
    let period = require(&columns.period)?;
    let occasion = require(&columns.occasion)?;
    let treatment = require(&columns.treatment)?;
    let sequence = require(&columns.sequence)?;
    let response = require(&columns.response)?;
    let time = match &columns.time {
        Some(name) => Some(require(name)?),
        None => find("time"),
    };
    let baseline = match &columns.baseline {
        Some(name) => Some(require(name)?),
        None => find("baseline"),
    };

    let mut obs = Vec::new();
    for (i, record) in reader.records().enumerate() {
        // 1-based data row number, counting the header as row 1
        let row = i + 2;
        let record =
            record.map_err(|e| Error::Io(format!("cli: {} row {row}: {e}", path.display())))?;
        let field = |idx: usize, name: &str| -> Result<&str> {
            record.get(idx).ok_or_else(|| {
                Error::Schema(format!(
                    "cli: {} row {row} has no value for column {name:?}",
                    path.display()
                ))
            })
        };
        let parse_f64 = |idx: usize, name: &str| -> Result<f64> {
            let raw = field(idx, name)?;
            raw.parse().map_err(|_| Error::Parse {
                row,
                column: name.into(),
                value: raw.into(),
            })
        };
        let parse_i64 = |idx: usize, name: &str| -> Result<i64> {
            let raw = field(idx, name)?;
            raw.parse().map_err(|_| Error::Parse {
                row,
                column: name.into(),
                value: raw.into(),
            })
        };
        let parse_opt = |idx: Option<usize>, name: &str| -> Result<Option<f64>> {
            match idx {
                None => Ok(None),
                Some(idx) => {
                    let raw = field(idx, name)?;
                    if raw.is_empty() {
                        Ok(None)
                    } else {
                        raw.parse().map(Some).map_err(|_| Error::Parse {
                            row,
                            column: name.into(),
                            value: raw.into(),
                        })
                    }
                }
            }
        };
        obs.push(Obs {
            subject: field(subject, &columns.subject)?.to_string(),
            period: parse_i64(period, &columns.period)?,
            occasion: parse_i64(occasion, &columns.occasion)?,
            treatment: field(treatment, &columns.treatment)?.to_string(),
            sequence: field(sequence, &columns.sequence)?.to_string(),
            response: parse_f64(response, &columns.response)?,
            time: parse_opt(time, "time")?,
            baseline: parse_opt(baseline, "baseline")?,
        });
    }
    if obs.is_empty() {
        return Err(Error::Schema(format!(
            "cli: {} contains no data rows",
            path.display()
        )));
    }
    Dataset::new(obs)
}

/// Entry point used by the binary; returns the process exit code.
pub fn main() -> i32 {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.class());
            1
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Fit(args) => {
            let config = load_config(&args.common)?;
            let ctx = ModelContext::resolve(&config, &args.model)?;
            let structure = match &args.structure {
                Some(s) => Structure::parse(s)?,
                None => match &config.model.structure {
                    Some(s) => Structure::parse(s)?,
                    None => Structure::Independence,
                },
            };
            let out = output_dir(&args.common, &config)?;
            with_thread_pool(threads(&args.common, &config), || {
                let fitted = fit(
                    &ctx.dataset,
                    &ctx.formula,
                    ctx.family,
                    structure,
                    &config.fit_options(),
                )?;
                write_fit_artifacts(&out, &fitted)
            })
        }
        Command::Compare(args) => {
            let config = load_config(&args.common)?;
            let ctx = ModelContext::resolve(&config, &args.model)?;
            let candidates = parse_structures(&args.structure, &config)?;
            let out = output_dir(&args.common, &config)?;
            with_thread_pool(threads(&args.common, &config), || {
                let report = compare_structures(
                    &ctx.dataset,
                    &ctx.formula,
                    ctx.family,
                    &candidates,
                    &config.fit_options(),
                )?;
                write_comparison_artifacts(&out, &report)
            })
        }
        Command::Simulate(args) => {
            let config = load_config(&args.common)?;
            let mut scenario = config.scenario();
            if let Some(seed) = args.seed {
                scenario.seed = seed;
            }
            if args.full_grid {
                scenario.n_grid = (2..=100).collect();
            }
            let study = args
                .study
                .clone()
                .unwrap_or_else(|| config.simulate.study.clone());
            let out = output_dir(&args.common, &config)?;
            with_thread_pool(threads(&args.common, &config), || {
                let result = match study.as_str() {
                    "selection" => run_selection_study(&scenario)?,
                    "coverage" => run_coverage_study(
                        &scenario,
                        config.simulate.coverage_n,
                        config.simulate.coverage_reps,
                    )?,
                    "consistency" => {
                        let grid = scenario.n_grid.clone();
                        run_consistency_study(&scenario, &grid, scenario.reps)?
                    }
                    other => {
                        return Err(Error::Config(format!(
                            "cli: unknown study {other:?}; expected selection, coverage, \
                             or consistency"
                        )))
                    }
                };
                result.validate()?;
                write_sim_artifacts(&out, &result)
            })
        }
    }
}

/// Resolved data + mean model shared by `fit` and `compare`.
struct ModelContext {
    dataset: Dataset,
    formula: ModelFormula,
    family: Family,
}

impl ModelContext {
    fn resolve(config: &RunConfig, model: &ModelArgs) -> Result<ModelContext> {
        let path = model
            .data
            .clone()
            .or_else(|| config.data.path.clone())
            .ok_or_else(|| {
                Error::Config("cli: no input data; pass --data or set [data] path".into())
            })?;
        let dataset = ingest_csv(&path, &config.data.columns)?;
        let terms: Vec<String> = match &model.formula {
            Some(list) => list.split(',').map(|t| t.trim().to_string()).collect(),
            None if !config.model.formula.is_empty() => config.model.formula.clone(),
            None => vec!["intercept".into()],
        };
        let formula = ModelFormula::parse(&terms)?;
        let family = match &model.family {
            Some(f) => Family::parse(f)?,
            None => match &config.model.family {
                Some(f) => Family::parse(f)?,
                None => Family::Gaussian,
            },
        };
        // surface design errors (missing columns, rank problems) before
        // any artifact is written
        build_design_matrix_with(&dataset, &formula, &config.references())?;
        Ok(ModelContext {
            dataset,
            formula,
            family,
        })
    }
}

fn load_config(common: &CommonArgs) -> Result<RunConfig> {
    match &common.config {
        Some(path) => RunConfig::from_path(path),
        None => Ok(RunConfig::default()),
    }
}

fn threads(common: &CommonArgs, config: &RunConfig) -> usize {
    common.threads.or(config.output.threads).unwrap_or(0)
}

fn output_dir(common: &CommonArgs, config: &RunConfig) -> Result<PathBuf> {
    let dir = common
        .out
        .clone()
        .or_else(|| config.output.dir.clone())
        .unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir)
        .map_err(|e| Error::Io(format!("cli: cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

/// Run `body` on a dedicated rayon pool of `threads` workers (0 = the
/// global default pool).
fn with_thread_pool<T>(threads: usize, body: impl FnOnce() -> Result<T> + Send) -> Result<T>
where
    T: Send,
{
    if threads == 0 {
        return body();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("cli: cannot build thread pool: {e}")))?;
    pool.install(body)
}

fn parse_structures(flag: &Option<String>, config: &RunConfig) -> Result<Vec<Structure>> {
    let names: Vec<String> = match flag {
        Some(list) => list.split(',').map(|s| s.trim().to_string()).collect(),
        None if !config.model.structures.is_empty() => config.model.structures.clone(),
        None => return Ok(Structure::ALL.to_vec()),
    };
    names.iter().map(|n| Structure::parse(n)).collect()
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path)
        .map_err(|e| Error::Io(format!("cli: cannot create {}: {e}", path.display())))?;
    f.write_all(bytes)
        .map_err(|e| Error::Io(format!("cli: cannot write {}: {e}", path.display())))?;
    Ok(())
}

fn write_fit_artifacts(out: &Path, fitted: &GeeFit) -> Result<()> {
    let json = serde_json::to_string_pretty(fitted)
        .map_err(|e| Error::Io(format!("cli: cannot serialize fit: {e}")))?;
    write_file(&out.join("fit.json"), format!("{json}\n").as_bytes())?;
    write_file(&out.join("coefficients.csv"), &coefficients_csv(fitted)?)?;
    Ok(())
}

fn coefficients_csv(fitted: &GeeFit) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["term", "estimate", "robust_se", "z", "p_value"])
        .map_err(Error::from)?;
    for row in wald_table(fitted) {
        w.serialize((row.label, row.estimate, row.robust_se, row.z, row.p_value))
            .map_err(Error::from)?;
    }
    w.into_inner()
        .map_err(|e| Error::Io(format!("cli: cannot finish coefficients.csv: {e}")))
}

fn write_comparison_artifacts(out: &Path, report: &ComparisonReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "structure",
        "qic",
        "delta",
        "corr_params",
        "converged",
        "error",
    ])
    .map_err(Error::from)?;
    for row in &report.rows {
        w.serialize((
            row.structure.name(),
            row.qic,
            row.delta,
            row.corr_params,
            row.converged,
            row.error.as_deref().unwrap_or(""),
        ))
        .map_err(Error::from)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Io(format!("cli: cannot finish comparison.csv: {e}")))?;
    write_file(&out.join("comparison.csv"), &bytes)?;
    write_fit_artifacts(out, &report.winner_fit)
}

fn write_sim_artifacts(out: &Path, result: &SimResult) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["n", "structure", "metric", "value", "lo", "hi"])
        .map_err(Error::from)?;
    for row in &result.rows {
        w.serialize((
            row.n,
            &row.structure,
            &row.metric,
            row.value,
            row.lo,
            row.hi,
        ))
        .map_err(Error::from)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Io(format!("cli: cannot finish sim_results.csv: {e}")))?;
    write_file(&out.join("sim_results.csv"), &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(name: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("crossgee-cli-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    /// Long-format CSV with `subjects` per sequence pair, `periods`, and
    /// `occ` occasions per period.
    fn write_csv(name: &str, subjects: usize, periods: usize, occ: usize) -> PathBuf {
        let path = tmp(name);
        let mut text = String::from("subject,period,occasion,treatment,sequence,response\n");
        for s in 0..subjects {
            let seq = if s % 2 == 0 { "AB" } else { "BA" };
            for j in 1..=periods {
                for k in 1..=occ {
                    let trt = if (j + s) % 2 == 0 { "A" } else { "B" };
                    text.push_str(&format!(
                        "p{s:02},{j},{k},{trt},{seq},{}\n",
                        (s * 100 + j * 10 + k) as f64 * 0.01
                    ));
                }
            }
        }
        fs::write(&path, text).unwrap();
        path
    }

    #[test]
    fn ingest_matches_expected_row_counts() {
        // 12 subjects × 3 periods × 10 occasions
        let path = write_csv("blood.csv", 12, 3, 10);
        let ds = ingest_csv(&path, &ColumnMap::default()).unwrap();
        assert_eq!(ds.n_obs(), 360);
        assert_eq!(ds.n_subjects(), 12);
        assert!(ds.balanced());

        // 8 subjects × 2 periods × 3 occasions
        let path = write_csv("cattle.csv", 8, 2, 3);
        let ds = ingest_csv(&path, &ColumnMap::default()).unwrap();
        assert_eq!(ds.n_obs(), 48);
    }

    #[test]
    fn ingest_rejects_empty_and_malformed_files() {
        let empty = tmp("empty.csv");
        fs::write(&empty, "").unwrap();
        assert!(matches!(
            ingest_csv(&empty, &ColumnMap::default()),
            Err(Error::Schema(_))
        ));

        let headers_only = tmp("headers_only.csv");
        fs::write(
            &headers_only,
            "subject,period,occasion,treatment,sequence,response\n",
        )
        .unwrap();
        assert!(matches!(
            ingest_csv(&headers_only, &ColumnMap::default()),
            Err(Error::Schema(_))
        ));

        let missing_column = tmp("missing.csv");
        fs::write(&missing_column, "subject,period,response\na,1,2.0\n").unwrap();
        match ingest_csv(&missing_column, &ColumnMap::default()) {
            Err(Error::Schema(msg)) => assert!(msg.contains("occasion")),
            other => panic!("expected SchemaError, got {other:?}"),
        }
    }

    #[test]
    fn ingest_reports_parse_errors_with_row_numbers() {
        let path = tmp("badnum.csv");
        fs::write(
            &path,
            "subject,period,occasion,treatment,sequence,response\n\
             a,1,1,A,AB,1.0\n\
             a,1,2,A,AB,oops\n",
        )
        .unwrap();
        match ingest_csv(&path, &ColumnMap::default()) {
            Err(Error::Parse { row, column, value }) => {
                assert_eq!(row, 3);
                assert_eq!(column, "response");
                assert_eq!(value, "oops");
            }
            other => panic!("expected ParseError, got {other:?}"),
        }
    }

    #[test]
    fn ingest_rejects_duplicate_cells() {
        let path = tmp("dup.csv");
        fs::write(
            &path,
            "subject,period,occasion,treatment,sequence,response\n\
             a,1,1,A,AB,1.0\n\
             a,1,1,A,AB,2.0\n",
        )
        .unwrap();
        assert!(matches!(
            ingest_csv(&path, &ColumnMap::default()),
            Err(Error::Duplicate { .. })
        ));
    }

    #[test]
    fn ingest_honors_column_mapping_and_optional_columns() {
        let path = tmp("mapped.csv");
        fs::write(
            &path,
            "id,per,rep,arm,grp,y,time\n\
             a,1,1,A,AB,1.0,0.5\n\
             a,1,2,A,AB,2.0,1.5\n\
             b,1,1,B,BA,3.0,0.5\n\
             b,1,2,B,BA,4.0,1.5\n",
        )
        .unwrap();
        let columns = ColumnMap {
            subject: "id".into(),
            period: "per".into(),
            occasion: "rep".into(),
            treatment: "arm".into(),
            sequence: "grp".into(),
            response: "y".into(),
            time: None,
            baseline: None,
        };
        let ds = ingest_csv(&path, &columns).unwrap();
        assert_eq!(ds.n_obs(), 4);
        // "time" picked up by its conventional name
        assert_eq!(ds.rows()[0].time, Some(0.5));
        assert_eq!(ds.rows()[0].baseline, None);

        // explicitly mapped optional column must exist
        let demanding = ColumnMap {
            baseline: Some("base".into()),
            ..columns
        };
        assert!(matches!(
            ingest_csv(&path, &demanding),
            Err(Error::Schema(_))
        ));
    }

    #[test]
    fn config_round_trip_and_defaults() {
        let path = tmp("config.toml");
        fs::write(
            &path,
            r#"
[data]
path = "data.csv"
subject = "id"

[model]
formula = ["intercept", "period"]
family = "gaussian"
structure = "kron_ar1"
treatment_reference = "B"

[fit]
tol = 1e-8
max_iter = 50

[simulate]
study = "consistency"
n_grid = [10, 30]
reps = 7
seed = 9

[output]
threads = 2
"#,
        )
        .unwrap();
        let config = RunConfig::from_path(&path).unwrap();
        assert_eq!(config.data.path.as_deref(), Some(Path::new("data.csv")));
        assert_eq!(config.data.columns.subject, "id");
        assert_eq!(config.data.columns.period, "period");
        assert_eq!(config.model.formula, vec!["intercept", "period"]);
        assert_eq!(config.references().treatment.as_deref(), Some("B"));
        assert_eq!(config.fit_options().tol, 1e-8);
        assert_eq!(config.fit_options().max_iter, 50);
        let scenario = config.scenario();
        assert_eq!(scenario.n_grid, vec![10, 30]);
        assert_eq!(scenario.reps, 7);
        assert_eq!(scenario.seed, 9);
        assert_eq!(config.output.threads, Some(2));

        // unknown keys are configuration errors, not silent typos
        let bad = tmp("bad_config.toml");
        fs::write(&bad, "[fit]\ntolerance = 1e-8\n").unwrap();
        assert!(matches!(RunConfig::from_path(&bad), Err(Error::Config(_))));
    }

    #[test]
    fn csv_artifacts_have_expected_shape() {
        let data = write_csv("artifacts.csv", 6, 2, 3);
        let ds = ingest_csv(&data, &ColumnMap::default()).unwrap();
        let formula = ModelFormula::parse(&["intercept", "period", "treatment"]).unwrap();
        let fitted = fit(
            &ds,
            &formula,
            Family::Gaussian,
            Structure::Independence,
            &FitOptions::default(),
        )
        .unwrap();
        let bytes = coefficients_csv(&fitted).unwrap();
        let text = String::from_utf8(bytes).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "term,estimate,robust_se,z,p_value");
        assert_eq!(lines.len(), 1 + fitted.labels.len());
    }
}
