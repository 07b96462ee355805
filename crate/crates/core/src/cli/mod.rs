//! Command-line surface: argument types and the `fit`, `scan`, `simulate`
//! and `impute` commands. Every command writes its artifacts and a
//! `manifest.json` into `--out`; wall-clock timings go to `timings.json`
//! so that every other artifact is byte-identical across repeated runs.

pub mod ingest;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;
use serde::Serialize;

use crate::elbo::{impute, Objective};
use crate::error::{PlnError, Result};
use crate::model::{CountTable, Design, FitResult};
use crate::nef::Family;
use crate::optim::{fit_rank, fit_rank_scan, Method, OptimConfig, RankScanResult};
use crate::selection::Criterion;
use crate::simulate::{self, SimSpec, RNG_ALGORITHM};
use crate::viz::{self, CriteriaRow, ExportInput, FactorMap, Labels};

pub use ingest::{ingest, IngestConfig, IngestReport, OffsetMode};

pub const THREADS_ENV: &str = "PLNFIT_THREADS";

#[derive(Debug, Parser)]
#[command(name = "plnfit", version, about = "Poisson-lognormal PCA for count tables")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Worker threads; PLNFIT_THREADS takes precedence. Defaults to all cores.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Repeat for more log output on stderr.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Clone, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case", tag = "command")]
pub enum Command {
    /// Fit one rank and export factor maps.
    Fit(FitArgs),
    /// Fit a range of ranks and pick one by ICL or BIC.
    Scan(ScanArgs),
    /// Write a seeded simulated data set.
    Simulate(SimulateArgs),
    /// Fit one rank and fill unobserved counts with their fitted means.
    Impute(FitArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct InputArgs {
    /// Count table: first row variable names, first column sample names.
    #[arg(long)]
    pub counts: PathBuf,
    /// Covariate table keyed by sample name; an intercept is always added.
    #[arg(long)]
    pub covariates: Option<PathBuf>,
    /// Comma-separated covariate columns to use (default: all).
    #[arg(long, value_delimiter = ',')]
    pub covariate_columns: Option<Vec<String>>,
    /// Offset table (samples × variables, or one column per sample).
    #[arg(long)]
    pub offsets: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "none")]
    pub offset_mode: OffsetMode,
    /// Two-column table mapping each variable to an offset group.
    #[arg(long)]
    pub groups: Option<PathBuf>,
    /// Drop variables whose observed total count is below this value
    /// (offsets are computed before the filter).
    #[arg(long, default_value_t = 0.0)]
    pub min_abundance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum FamilyArg {
    Poisson,
    Gaussian,
}

impl FamilyArg {
    pub fn family(self) -> Family {
        match self {
            FamilyArg::Poisson => Family::Poisson,
            FamilyArg::Gaussian => Family::GaussianUnitVariance,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodArg {
    Mma,
    Pgd,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct OptimArgs {
    #[arg(long, value_enum, default_value = "poisson")]
    pub family: FamilyArg,
    #[arg(long)]
    pub max_iter: Option<usize>,
    /// Relative objective tolerance.
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long, value_enum)]
    pub method: Option<MethodArg>,
    /// JSON file with optimizer settings; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

impl OptimArgs {
    pub fn resolve(&self) -> Result<OptimConfig> {
        let mut config = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| PlnError::Input(format!("{}: {e}", path.display())))?;
                serde_json::from_str(&text)
                    .map_err(|e| PlnError::Config(format!("{}: {e}", path.display())))?
            }
            None => OptimConfig::default(),
        };
        if let Some(v) = self.max_iter {
            config.max_iterations = v;
        }
        if let Some(v) = self.tol {
            config.objective_tol = v;
        }
        if let Some(m) = self.method {
            config.method = match m {
                MethodArg::Mma => Method::Mma,
                MethodArg::Pgd => Method::ProjectedGradient,
            };
        }
        config.validate()?;
        Ok(config)
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct FitArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
    #[arg(long)]
    pub rank: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Recorded in the manifest; fitting itself is deterministic.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CriterionArg {
    Icl,
    Bic,
}

impl From<CriterionArg> for Criterion {
    fn from(c: CriterionArg) -> Self {
        match c {
            CriterionArg::Icl => Criterion::Icl,
            CriterionArg::Bic => Criterion::Bic,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ScanArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
    /// Ranks as a range `1..5` / `1-5` or a list `1,2,4`.
    #[arg(long, value_parser = parse_ranks)]
    pub ranks: Ranks,
    #[arg(long, value_enum, default_value = "icl")]
    pub criterion: CriterionArg,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(transparent)]
pub struct Ranks(pub Vec<usize>);

pub fn parse_ranks(text: &str) -> std::result::Result<Ranks, String> {
    let parse = |s: &str| {
        s.trim()
            .parse::<usize>()
            .map_err(|_| format!("{s:?} is not a rank"))
    };
    let range = text.split_once("..").or_else(|| text.split_once('-'));
    let mut ranks: Vec<usize> = match range {
        Some((lo, hi)) => {
            let hi = hi.trim_start_matches('=');
            let (lo, hi) = (parse(lo)?, parse(hi)?);
            (lo..=hi).collect()
        }
        None => text.split(',').map(parse).collect::<std::result::Result<_, _>>()?,
    };
    ranks.sort_unstable();
    ranks.dedup();
    if ranks.is_empty() || ranks[0] == 0 {
        return Err("ranks must be a nonempty set of positive integers".into());
    }
    Ok(Ranks(ranks))
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SimulateArgs {
    /// JSON simulation spec; when given, the size flags are ignored.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    #[arg(long, default_value_t = 20)]
    pub p: usize,
    #[arg(long, default_value_t = 2)]
    pub q: usize,
    /// Covariate columns including the intercept.
    #[arg(long, default_value_t = 2)]
    pub d: usize,
    #[arg(long, default_value_t = 0.0)]
    pub missing: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

impl SimulateArgs {
    pub fn spec(&self) -> Result<SimSpec> {
        match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| PlnError::Input(format!("{}: {e}", path.display())))?;
                serde_json::from_str(&text).map_err(|e| PlnError::Config(format!("{}: {e}", path.display())))
            }
            None => Ok(SimSpec {
                missing_fraction: self.missing,
                ..SimSpec::standard(self.n, self.p, self.q, self.d, self.seed)
            }),
        }
    }
}

/// Worker count: `PLNFIT_THREADS`, then `--threads`, then all cores.
pub fn resolve_threads(flag: Option<usize>) -> Result<usize> {
    let from_env = match std::env::var(THREADS_ENV) {
        Ok(v) if !v.trim().is_empty() => Some(
            v.trim()
                .parse::<usize>()
                .map_err(|_| PlnError::Config(format!("{THREADS_ENV}={v:?} is not a positive integer")))?,
        ),
        _ => None,
    };
    let threads = from_env
        .or(flag)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if threads == 0 {
        return Err(PlnError::Config("thread count must be at least 1".into()));
    }
    Ok(threads)
}

/// Per-rank entry of the manifest.
#[derive(Debug, Clone, Serialize)]
pub struct RankSummary {
    pub rank: usize,
    pub elbo: Option<f64>,
    pub bic: Option<f64>,
    pub icl: Option<f64>,
    pub entropy: Option<f64>,
    pub r2: Option<f64>,
    pub status: Option<&'static str>,
    pub iterations: Option<usize>,
    pub evaluations: Option<usize>,
    pub gradient_norm: Option<f64>,
    pub error: Option<String>,
}

impl RankSummary {
    fn from_fit(fit: &FitResult) -> Self {
        Self {
            rank: fit.rank,
            elbo: Some(fit.elbo),
            bic: Some(fit.criteria.bic),
            icl: Some(fit.criteria.icl),
            entropy: Some(fit.criteria.entropy),
            r2: fit.criteria.r2,
            status: Some(fit.status.as_str()),
            iterations: Some(fit.iterations),
            evaluations: Some(fit.evaluations),
            gradient_norm: Some(fit.gradient_norm),
            error: None,
        }
    }

    fn failed(rank: usize, err: &PlnError) -> Self {
        Self {
            rank,
            elbo: None,
            bic: None,
            icl: None,
            entropy: None,
            r2: None,
            status: None,
            iterations: None,
            evaluations: None,
            gradient_norm: None,
            error: Some(err.to_string()),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: Command,
    pub threads: usize,
    pub seed: u64,
    pub rng: &'static str,
    pub family: Option<&'static str>,
    pub optimizer: Option<OptimConfig>,
    pub data: Option<DataSummary>,
    pub ranks: Vec<RankSummary>,
    pub chosen_rank: BTreeMap<&'static str, Option<usize>>,
    pub artifacts: Vec<String>,
    pub timings: &'static str,
}

#[derive(Debug, Clone, Serialize)]
pub struct DataSummary {
    pub samples: usize,
    pub variables: usize,
    pub covariates: Vec<String>,
    pub observed_fraction: f64,
    pub ingest: Option<IngestReport>,
}

impl DataSummary {
    fn new(counts: &CountTable, design: &Design, ingest: Option<IngestReport>) -> Self {
        Self {
            samples: counts.nrows(),
            variables: counts.ncols(),
            covariates: design.covariate_names.clone(),
            observed_fraction: counts.observed_count() as f64 / (counts.nrows() * counts.ncols()) as f64,
            ingest,
        }
    }
}

/// Wall-clock seconds per stage, written apart from the manifest.
#[derive(Debug, Default, Serialize)]
struct Timings(BTreeMap<&'static str, f64>);

impl Timings {
    fn record<T>(&mut self, stage: &'static str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.0.insert(stage, start.elapsed().as_secs_f64());
        out
    }
}

/// Outcome of a command, for the caller to report.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub out: PathBuf,
    pub artifacts: Vec<String>,
    pub chosen_rank: Option<usize>,
}

pub fn run(command: &Command, threads: usize) -> Result<RunSummary> {
    match command {
        Command::Fit(args) => run_fit(command, args, threads),
        Command::Scan(args) => run_scan(command, args, threads),
        Command::Simulate(args) => run_simulate(command, args, threads),
        Command::Impute(args) => run_impute(command, args, threads),
    }
}

fn ingest_config(input: &InputArgs, family: FamilyArg) -> IngestConfig {
    IngestConfig {
        counts: input.counts.clone(),
        covariates: input.covariates.clone(),
        covariate_columns: input.covariate_columns.clone(),
        offsets: input.offsets.clone(),
        offset_mode: input.offset_mode,
        groups: input.groups.clone(),
        min_abundance: input.min_abundance,
        integer_counts: family == FamilyArg::Poisson,
    }
}

fn file_names(paths: &[PathBuf]) -> Vec<String> {
    paths
        .iter()
        .filter_map(|p| p.file_name().map(|f| f.to_string_lossy().into_owned()))
        .collect()
}

fn write(out: &Path, name: &str, body: &str, artifacts: &mut Vec<String>) -> Result<()> {
    fs::write(out.join(name), body)?;
    artifacts.push(name.to_string());
    Ok(())
}

fn finish(out: &Path, mut manifest: Manifest, timings: &Timings) -> Result<RunSummary> {
    manifest.artifacts.push("manifest.json".into());
    manifest.artifacts.sort();
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| PlnError::Io(e.to_string()))?;
    fs::write(out.join("manifest.json"), json + "\n")?;
    let timing_json = serde_json::to_string_pretty(timings).map_err(|e| PlnError::Io(e.to_string()))?;
    fs::write(out.join(manifest.timings), timing_json + "\n")?;
    let chosen = manifest.chosen_rank.values().flatten().next().copied();
    Ok(RunSummary {
        out: out.to_path_buf(),
        artifacts: manifest.artifacts,
        chosen_rank: chosen,
    })
}

fn base_manifest(command: &Command, threads: usize, seed: u64) -> Manifest {
    Manifest {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        command: command.clone(),
        threads,
        seed,
        rng: RNG_ALGORITHM,
        family: None,
        optimizer: None,
        data: None,
        ranks: Vec::new(),
        chosen_rank: BTreeMap::new(),
        artifacts: Vec::new(),
        timings: "timings.json",
    }
}

/// Factor map, correlations and CSV/plot export for one fit.
fn export_fit(
    fit: &FitResult,
    counts: &CountTable,
    design: &Design,
    criteria: &[CriteriaRow],
    chosen: Option<usize>,
    out: &Path,
) -> Result<Vec<String>> {
    let map = FactorMap::orthogonalize(&fit.latent.p_tilde)?;
    let correlations = viz::correlation_circle(&fit.latent.p_tilde.dense(), &map.scores)?;
    let written = viz::export(
        &ExportInput {
            fit,
            map: &map,
            correlations: &correlations,
            criteria,
            chosen_rank: chosen,
            labels: Labels {
                samples: &counts.row_names,
                variables: &counts.col_names,
            },
        },
        out,
    )?;
    let mut names = file_names(&written);
    let theta = viz::matrix_csv("variable", &design.covariate_names, &counts.col_names, &fit.params.theta);
    write(out, "theta.csv", &theta, &mut names)?;
    Ok(names)
}

fn run_fit(command: &Command, args: &FitArgs, threads: usize) -> Result<RunSummary> {
    let mut timings = Timings::default();
    let config = args.optim.resolve()?;
    let family = args.optim.family.family();
    fs::create_dir_all(&args.out)?;
    let (counts, design, report) =
        timings.record("ingest", || ingest(&ingest_config(&args.input, args.optim.family)))?;
    let fit = timings.record("fit", || fit_rank(&counts, &design, &family, args.rank, &config))?;
    let rows = [CriteriaRow::from_fit(&fit)];
    let artifacts = timings.record("export", || export_fit(&fit, &counts, &design, &rows, Some(fit.rank), &args.out))?;

    let mut manifest = base_manifest(command, threads, args.seed);
    manifest.family = Some(family.name());
    manifest.optimizer = Some(config);
    manifest.data = Some(DataSummary::new(&counts, &design, Some(report)));
    manifest.ranks = vec![RankSummary::from_fit(&fit)];
    manifest.chosen_rank.insert("requested", Some(fit.rank));
    manifest.artifacts = artifacts;
    finish(&args.out, manifest, &timings)
}

fn scan_rows(scan: &RankScanResult) -> (Vec<CriteriaRow>, Vec<RankSummary>) {
    scan.fits
        .iter()
        .map(|f| match &f.fit {
            Ok(fit) => (CriteriaRow::from_fit(fit), RankSummary::from_fit(fit)),
            Err(err) => (
                CriteriaRow {
                    rank: f.rank,
                    criteria: None,
                    status: None,
                    iterations: None,
                    error: Some(err.to_string()),
                },
                RankSummary::failed(f.rank, err),
            ),
        })
        .unzip()
}

fn run_scan(command: &Command, args: &ScanArgs, threads: usize) -> Result<RunSummary> {
    let mut timings = Timings::default();
    let config = args.optim.resolve()?;
    let family = args.optim.family.family();
    fs::create_dir_all(&args.out)?;
    let (counts, design, report) =
        timings.record("ingest", || ingest(&ingest_config(&args.input, args.optim.family)))?;
    let scan = timings.record("scan", || fit_rank_scan(&counts, &design, &family, &args.ranks.0, &config))?;
    let criterion = Criterion::from(args.criterion);
    let chosen = scan
        .best(criterion)
        .ok_or_else(|| PlnError::Optimization("every rank in the scan failed".into()))?;
    let (rows, summaries) = scan_rows(&scan);
    let fit = scan.get(chosen).expect("chosen rank has a fit");
    let artifacts = timings.record("export", || export_fit(fit, &counts, &design, &rows, Some(chosen), &args.out))?;

    let mut manifest = base_manifest(command, threads, args.seed);
    manifest.family = Some(family.name());
    manifest.optimizer = Some(config);
    manifest.data = Some(DataSummary::new(&counts, &design, Some(report)));
    manifest.ranks = summaries;
    manifest.chosen_rank.insert("icl", scan.best(Criterion::Icl));
    manifest.chosen_rank.insert("bic", scan.best(Criterion::Bic));
    manifest.artifacts = artifacts;
    let mut summary = finish(&args.out, manifest, &timings)?;
    summary.chosen_rank = Some(chosen);
    Ok(summary)
}

fn run_simulate(command: &Command, args: &SimulateArgs, threads: usize) -> Result<RunSummary> {
    let mut timings = Timings::default();
    let spec = args.spec()?;
    fs::create_dir_all(&args.out)?;
    let (counts, design, truth) = timings.record("sample", || simulate::sample(&spec))?;
    let (n, p, d) = (counts.nrows(), counts.ncols(), design.ncovariates());
    let samples: Vec<String> = (1..=n).map(|i| format!("S{i}")).collect();
    let variables: Vec<String> = (1..=p).map(|j| format!("V{j}")).collect();
    let counts = counts.with_names(samples.clone(), variables.clone())?;
    let covariate_names: Vec<String> = (1..d).map(|k| format!("x{k}")).collect();

    let mut artifacts = Vec::new();
    let out = &args.out;
    write(out, "counts.csv", &ingest::write_counts(&counts, "sample"), &mut artifacts)?;
    if d > 1 {
        let x = design.covariates().columns(1, d - 1).into_owned();
        write(out, "covariates.csv", &viz::matrix_csv("sample", &covariate_names, &samples, &x), &mut artifacts)?;
    }
    if design.offsets().amax() > 0.0 {
        write(out, "offsets.csv", &viz::matrix_csv("sample", &variables, &samples, design.offsets()), &mut artifacts)?;
    }
    let mut theta_names = vec!["(Intercept)".to_string()];
    theta_names.extend(covariate_names);
    let loading_names: Vec<String> = (1..=truth.loadings.ncols()).map(|k| format!("F{k}")).collect();
    write(out, "true_theta.csv", &viz::matrix_csv("variable", &theta_names, &variables, &truth.theta), &mut artifacts)?;
    write(out, "true_sigma.csv", &viz::matrix_csv("variable", &variables, &variables, &truth.sigma), &mut artifacts)?;
    write(
        out,
        "true_loadings.csv",
        &viz::matrix_csv("variable", &loading_names, &variables, &truth.loadings),
        &mut artifacts,
    )?;
    let spec_json = serde_json::to_string_pretty(&spec).map_err(|e| PlnError::Io(e.to_string()))?;
    write(out, "spec.json", &(spec_json + "\n"), &mut artifacts)?;

    let mut manifest = base_manifest(command, threads, spec.seed);
    manifest.data = Some(DataSummary::new(&counts, &design, None));
    manifest.artifacts = artifacts;
    finish(out, manifest, &timings)
}

fn run_impute(command: &Command, args: &FitArgs, threads: usize) -> Result<RunSummary> {
    let mut timings = Timings::default();
    let config = args.optim.resolve()?;
    let family = args.optim.family.family();
    fs::create_dir_all(&args.out)?;
    let (counts, design, report) =
        timings.record("ingest", || ingest(&ingest_config(&args.input, args.optim.family)))?;
    let fit = timings.record("fit", || fit_rank(&counts, &design, &family, args.rank, &config))?;
    let completed = completed_table(&counts, &design, &family, &fit)?;

    let mut artifacts = Vec::new();
    write(
        &args.out,
        "imputed_counts.csv",
        &viz::matrix_csv("sample", &counts.col_names, &counts.row_names, &completed),
        &mut artifacts,
    )?;
    let mut manifest = base_manifest(command, threads, args.seed);
    manifest.family = Some(family.name());
    manifest.optimizer = Some(config);
    manifest.data = Some(DataSummary::new(&counts, &design, Some(report)));
    manifest.ranks = vec![RankSummary::from_fit(&fit)];
    manifest.chosen_rank.insert("requested", Some(fit.rank));
    manifest.artifacts = artifacts;
    finish(&args.out, manifest, &timings)
}

/// Observed counts kept, unobserved ones replaced by `A′` at the fit.
pub fn completed_table(counts: &CountTable, design: &Design, family: &Family, fit: &FitResult) -> Result<DMatrix<f64>> {
    let mut objective = Objective::new(family, counts, design, fit.rank)?;
    objective.value(&fit.params, &fit.vstate)?;
    Ok(impute(counts, objective.workspace()))
}

/// Error report printed on failure.
#[derive(Debug, Serialize)]
pub struct ErrorReport {
    pub kind: &'static str,
    pub message: String,
}

impl From<&PlnError> for ErrorReport {
    fn from(err: &PlnError) -> Self {
        Self {
            kind: err.kind(),
            message: err.to_string(),
        }
    }
}
