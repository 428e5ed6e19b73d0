//! Command-line front end: `estimate`, `simulate`, `validate`.
//!
//! Besides the named flags, any `--section.key value` (or `--section.key=value`)
//! overrides the matching config key.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::config::{read_config, AnalysisConfig, ConfigError, OutputFormat, SimulationConfig};
use crate::data::{load_dataset, validate_positivity_resolved, Dataset, SubgroupSpec, Subgroups};
use crate::estimators::{
    estimate_all, extrapolation_diagnostic, ipw_weights, iow_weights, EstimationContext, EstimationError,
};
use crate::inference::{bootstrap_estimates, BootstrapConfig, InferenceError};
use crate::nuisance::fit_and_predict;
use crate::report::{
    cell_rows, failed_rows, BootstrapSummary, DataSummary, Diagnostics, EstimateReport, ModelSummary, Software,
    WeightSummary, SCHEMA_VERSION,
};
use crate::rng::derive_seed;
use crate::simulation::{oracle_truths, run_mc_study, McConfig, McResult, Scenario, TruthTable};

/// Exit status when some requested cell could not be computed.
pub const EXIT_CELL_ERRORS: i32 = 1;
/// Exit status for configuration, input or runtime failures.
pub const EXIT_FAILURE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "subgroup-transport", version, about = "Subgroup effects transported from a randomized trial to a target population")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Estimate subgroup means and effects from CSV data.
    Estimate(EstimateArgs),
    /// Run a Monte Carlo simulation study.
    Simulate(SimulateArgs),
    /// Check a config (and its data) without estimating.
    Validate(ValidateArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FormatArg {
    Json,
    Table,
}

#[derive(Debug, Args)]
struct EstimateArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; defaults to the number of available cores.
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long, value_enum)]
    format: Option<FormatArg>,
    /// Report path; stdout when neither this nor `output.path` is set.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    scenario: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Debug, Args)]
struct ValidateArgs {
    #[arg(long)]
    config: PathBuf,
}

/// Splits `--a.b value` / `--a.b=value` overrides from the arguments clap sees.
fn split_overrides(args: Vec<OsString>) -> Result<(Vec<OsString>, Vec<(String, String)>)> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let s = arg.to_string_lossy().into_owned();
        let key = s.strip_prefix("--").filter(|k| k.split('=').next().is_some_and(|k| k.contains('.')));
        match key {
            Some(k) => match k.split_once('=') {
                Some((k, v)) => overrides.push((k.to_string(), v.to_string())),
                None => {
                    let v = it.next().ok_or_else(|| anyhow!("override --{k} needs a value"))?;
                    overrides.push((k.to_string(), v.to_string_lossy().into_owned()));
                }
            },
            None => rest.push(arg),
        }
    }
    Ok((rest, overrides))
}

/// Runs the CLI and returns the process exit status.
pub fn run<I: IntoIterator<Item = OsString>>(args: I) -> i32 {
    let (args, overrides) = match split_overrides(args.into_iter().collect()) {
        Ok(x) => x,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_FAILURE;
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_FAILURE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Estimate(a) => cmd_estimate(a, &overrides),
        Command::Simulate(a) => cmd_simulate(a, &overrides),
        Command::Validate(a) => cmd_validate(a, &overrides),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_FAILURE
        }
    }
}

fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        None => Ok(f()),
        Some(0) => bail!("--threads must be positive"),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(n).build()?;
            Ok(pool.install(f))
        }
    }
}

/// Writes via a temporary file in the target directory, then renames.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).with_context(|| format!("writing in {}", dir.display()))?;
    tmp.write_all(contents)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.parent().unwrap_or(Path::new(".")).join(p)
    }
}

fn config_error(e: ConfigError) -> anyhow::Error {
    anyhow!("invalid config: {e}")
}

struct Loaded {
    cfg: AnalysisConfig,
    ds: Dataset,
    groups: Subgroups,
}

fn load_analysis(path: &Path, overrides: &[(String, String)]) -> Result<Loaded> {
    let cfg: AnalysisConfig = read_config(path, overrides).map_err(config_error)?;
    cfg.validate().map_err(config_error)?;
    let data_path = resolve(path, &cfg.data.path);
    let ds = load_dataset(&data_path, &cfg.data.roles(), cfg.data.design)
        .with_context(|| format!("loading {}", data_path.display()))?;
    let spec = match &cfg.subgroups.levels {
        Some(levels) => SubgroupSpec { source_column: cfg.subgroups.column.clone(), levels: levels.clone() },
        None => SubgroupSpec::by_distinct_values(&ds, &cfg.subgroups.column)?,
    };
    let groups = spec.resolve(&ds).context("subgroups")?;
    let nuisance = cfg.nuisance_spec().map_err(config_error)?;
    for (path, f) in [("models.participation", &nuisance.participation), ("models.outcome", &nuisance.outcome)] {
        f.validate(&ds).map_err(|e| anyhow!("invalid config: {path}: {e}"))?;
    }
    if let crate::nuisance::TreatmentModel::Known(p) = &nuisance.treatment {
        if p.len() != ds.treatment_levels().len() {
            bail!(
                "invalid config: models.treatment_probabilities: {} values for {} arms",
                p.len(),
                ds.treatment_levels().len()
            );
        }
    }
    Ok(Loaded { cfg, ds, groups })
}

/// Config as echoed in reports: run-local settings (threads, output) removed
/// so that reports depend only on the analysis.
fn echo<T: Serialize>(cfg: &T) -> serde_json::Value {
    let mut v = serde_json::to_value(cfg).expect("config serializes");
    if let Some(o) = v.as_object_mut() {
        o.remove("threads");
        o.remove("output");
        o.remove("seed");
    }
    v
}

/// Runs an analysis and builds its report.
pub fn run_estimate(cfg_path: &Path, overrides: &[(String, String)], seed: Option<u64>) -> Result<EstimateReport> {
    let Loaded { cfg, ds, groups } = load_analysis(cfg_path, overrides)?;
    let seed = seed.or(cfg.seed).ok_or_else(|| anyhow!("a seed is required (--seed or `seed` in the config)"))?;
    let spec = cfg.nuisance_spec().map_err(config_error)?;
    let estimators = cfg.estimator_set();
    let labels = groups.labels().to_vec();
    let arms = ds.treatment_levels().to_vec();

    let positivity = validate_positivity_resolved(&ds, &groups);
    let extrapolation = extrapolation_diagnostic(&ds, &groups);
    let (means, effects, diagnostics, bootstrap) = match fit_and_predict(&ds, &spec) {
        Err(e) => {
            let err = EstimationError::Nuisance(e.to_string());
            let (m, f) = failed_rows(&estimators, &labels, &arms, &err);
            (m, f, None, None)
        }
        Ok((ns, table)) => {
            let ctx = EstimationContext::new(&ds, &groups, &table);
            let mut weights = Vec::new();
            for scope in &cfg.estimands.scopes {
                for v in 0..groups.len() {
                    for a in 0..arms.len() {
                        let w = match scope {
                            crate::data::EstimandScope::EntirePopulation => ipw_weights(&ctx, v, a),
                            crate::data::EstimandScope::NonRandomized => iow_weights(&ctx, v, a),
                        };
                        if let Ok(w) = w {
                            weights.push(WeightSummary::new(&w, &labels[v], &arms[a]));
                        }
                    }
                }
            }
            let diagnostics = Diagnostics {
                positivity,
                extrapolation,
                weights,
                models: ModelSummary::all(&ns, &arms),
            };
            let b = &cfg.bootstrap;
            if b.replicates == 0 {
                let set = estimate_all(&ctx, &estimators, &spec.outcome);
                let (m, f) = cell_rows(&set, None, None);
                (m, f, Some(diagnostics), None)
            } else {
                let bc = BootstrapConfig {
                    replicates: b.replicates,
                    seed: derive_seed(seed, 0xB007),
                    stratify_by_s: b.stratify_by_s,
                    ci_level: b.ci_level,
                };
                let stratified = b.stratify_by_s || ds.design() == crate::data::Design::NonNested;
                match bootstrap_estimates(&ds, &spec, &groups, &estimators, &bc) {
                    Ok(res) => {
                        let (m, f) = cell_rows(&res.estimates, Some(&res.intervals), None);
                        let summary = BootstrapSummary {
                            replicates: res.replicates,
                            failed_replicates: res.failed_replicates,
                            stratified,
                            ci_level: b.ci_level,
                        };
                        (m, f, Some(diagnostics), Some(summary))
                    }
                    Err(e @ InferenceError::TooManyFailures { failed, .. }) => {
                        let set = estimate_all(&ctx, &estimators, &spec.outcome);
                        let (m, f) = cell_rows(&set, None, Some(&e.to_string()));
                        let summary = BootstrapSummary {
                            replicates: b.replicates,
                            failed_replicates: failed,
                            stratified,
                            ci_level: b.ci_level,
                        };
                        (m, f, Some(diagnostics), Some(summary))
                    }
                    Err(e) => return Err(e.into()),
                }
            }
        }
    };
    let all_ok = means.iter().all(|m| m.status == crate::report::CellStatus::Ok)
        && effects.iter().all(|m| m.status == crate::report::CellStatus::Ok);
    Ok(EstimateReport {
        schema_version: SCHEMA_VERSION.into(),
        software: Software::current(),
        seed,
        config: echo(&cfg),
        outcome_family: spec.outcome.family,
        data: DataSummary::new(&ds, &labels),
        bootstrap,
        means,
        effects,
        diagnostics,
        all_ok,
    })
}

fn cmd_estimate(a: EstimateArgs, overrides: &[(String, String)]) -> Result<i32> {
    let cfg: AnalysisConfig = read_config(&a.config, overrides).map_err(config_error)?;
    let threads = a.threads.or(cfg.threads);
    let report = with_threads(threads, || run_estimate(&a.config, overrides, a.seed))??;
    let format = match a.format {
        Some(FormatArg::Json) => OutputFormat::Json,
        Some(FormatArg::Table) => OutputFormat::Table,
        None => cfg.output.format,
    };
    let out_path = a.output.or_else(|| cfg.output.path.as_ref().map(|p| resolve(&a.config, p)));
    let json = report.to_json();
    match &out_path {
        Some(p) => {
            write_atomic(p, json.as_bytes())?;
            eprintln!("wrote {}", p.display());
        }
        None if format == OutputFormat::Json => print!("{json}"),
        None => {}
    }
    if format == OutputFormat::Table {
        print!("{}", report.to_table());
    }
    if report.all_ok {
        Ok(0)
    } else {
        for m in &report.means {
            if let Some(e) = &m.error {
                eprintln!("cell {} {} {}: {} {}", m.estimator, m.subgroup, m.arm, e.code, e.message);
            }
        }
        Ok(EXIT_CELL_ERRORS)
    }
}

#[derive(Debug, Serialize)]
struct SimulationOutput<'a> {
    schema_version: &'a str,
    software: Software,
    seed: u64,
    config: serde_json::Value,
    oracle: OracleInfo,
    result: &'a McResult,
}

#[derive(Debug, Serialize)]
struct OracleInfo {
    m: u64,
    seed: u64,
    source: String,
}

/// Output files of a simulation run.
#[derive(Debug, Clone)]
pub struct SimulationFiles {
    pub json: PathBuf,
    pub csv: PathBuf,
    pub summary: PathBuf,
}

/// Loads the frozen truths from `path` or computes them.
fn truths_for(cfg: &SimulationConfig, cfg_path: &Path, seed: u64) -> Result<(TruthTable, String)> {
    match &cfg.oracle.fixture {
        Some(p) => {
            let path = resolve(cfg_path, p);
            let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
            let table: TruthTable = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            if table.dgp != cfg.dgp {
                bail!("invalid config: oracle.fixture: {} was computed for a different DGP", path.display());
            }
            Ok((table, format!("fixture:{}", p.display())))
        }
        None => Ok((oracle_truths(&cfg.dgp, cfg.oracle.m, derive_seed(seed, 0x0AC1E))?, "computed".into())),
    }
}

pub fn run_simulate(
    cfg_path: &Path,
    overrides: &[(String, String)],
    scenario: Option<&str>,
    seed: Option<u64>,
) -> Result<(McResult, SimulationFiles)> {
    let cfg: SimulationConfig = read_config(cfg_path, overrides).map_err(config_error)?;
    cfg.validate().map_err(config_error)?;
    let scenario = match scenario {
        Some(s) => s.parse::<Scenario>()?,
        None => cfg.scenario.ok_or_else(|| anyhow!("a scenario is required (--scenario or `scenario` in the config)"))?,
    };
    let seed = seed.or(cfg.seed).ok_or_else(|| anyhow!("a seed is required (--seed or `seed` in the config)"))?;
    let (truths, source) = truths_for(&cfg, cfg_path, seed)?;
    let mc = McConfig {
        design: cfg.study.design,
        replications: cfg.study.replications,
        seed,
        estimators: cfg.estimator_set(),
        omit: cfg.study.omit.clone(),
        bootstrap: cfg.study.bootstrap,
        ci_level: cfg.study.ci_level,
    };
    let result = run_mc_study(&cfg.dgp, scenario, &mc, &truths)?;
    let mut echoed = echo(&cfg);
    if let Some(o) = echoed.as_object_mut() {
        o.insert("scenario".into(), serde_json::to_value(scenario)?);
        if let Some(oracle) = o.get_mut("oracle").and_then(|v| v.as_object_mut()) {
            oracle.remove("fixture");
        }
    }
    let out = SimulationOutput {
        schema_version: SCHEMA_VERSION,
        software: Software::current(),
        seed,
        config: echoed,
        oracle: OracleInfo { m: truths.m, seed: truths.seed, source: if source == "computed" { source } else { "fixture".into() } },
        result: &result,
    };
    let dir = resolve(cfg_path, &cfg.output.dir);
    let stem = format!("mc_{}", scenario.as_str());
    let files = SimulationFiles {
        json: dir.join(format!("{stem}.json")),
        csv: dir.join(format!("{stem}.csv")),
        summary: dir.join(format!("{stem}_summary.txt")),
    };
    write_atomic(&files.json, (serde_json::to_string_pretty(&out)? + "\n").as_bytes())?;
    write_atomic(&files.csv, result.to_csv().as_bytes())?;
    write_atomic(&files.summary, result.summary().as_bytes())?;
    Ok((result, files))
}

fn cmd_simulate(a: SimulateArgs, overrides: &[(String, String)]) -> Result<i32> {
    let cfg: SimulationConfig = read_config(&a.config, overrides).map_err(config_error)?;
    let threads = a.threads.or(cfg.threads);
    let (result, files) =
        with_threads(threads, || run_simulate(&a.config, overrides, a.scenario.as_deref(), a.seed))??;
    print!("{}", result.summary());
    eprintln!("wrote {}, {}, {}", files.json.display(), files.csv.display(), files.summary.display());
    Ok(0)
}

fn cmd_validate(a: ValidateArgs, overrides: &[(String, String)]) -> Result<i32> {
    let text = std::fs::read_to_string(&a.config).with_context(|| format!("reading {}", a.config.display()))?;
    let is_simulation = text.parse::<toml::Table>().map(|t| t.contains_key("study")).unwrap_or(false);
    if is_simulation {
        let cfg: SimulationConfig = read_config(&a.config, overrides).map_err(config_error)?;
        cfg.validate().map_err(config_error)?;
        println!("simulation config OK: {} estimators, R = {}", cfg.estimator_set().len(), cfg.study.replications);
        return Ok(0);
    }
    let Loaded { cfg, ds, groups } = load_analysis(&a.config, overrides)?;
    let positivity = validate_positivity_resolved(&ds, &groups);
    println!("{}", serde_json::to_string_pretty(&positivity)?);
    println!(
        "analysis config OK: n = {} ({} trial), {} subgroups, {} arms, {} estimators",
        ds.len(),
        ds.n_trial(),
        groups.len(),
        ds.treatment_levels().len(),
        cfg.estimator_set().len()
    );
    if positivity.has_empty_trial_cells() {
        eprintln!("warning: some subgroup has no trial participants in an arm; those cells will fail");
        return Ok(EXIT_CELL_ERRORS);
    }
    Ok(0)
}
