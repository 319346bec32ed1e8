//! Command-line pipeline: featurize, fit, predict, explore, synth, report.
//!
//! Every command reads one TOML run config, writes its artifacts into the
//! output directory, and drops a manifest with content hashes of its inputs
//! and outputs. Given the same config, seed, and inputs, outputs are byte
//! identical regardless of worker count.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data_model::{RowKind, Schema, VariableSpec};
use crate::explorer::{enumerate_feature_sets, run_exploration, square_plot_data, ExplorationConfig};
use crate::featurizer::{
    build_embedding_matrix, fit_maps, group_by_region, BandwidthRule, FeaturizerConfig,
};
use crate::inference::{
    exit_poll_table, fit_scatter, gender_gap, Level, SubgroupQuery, TableConfig,
};
use crate::io::{
    self, build_augmentation_rows, generate_synthetic, load_crosswalk, load_exitpoll,
    load_outcomes, load_records, merge_outcomes, Crosswalk, EmbeddingArtifact, IoError,
    SyntheticSpec,
};
use crate::solver::{
    cross_validate, fit_at, fraction_deviance_explained, DesignProblem, PathConfig, SolverError,
};

#[derive(Debug, Parser)]
#[command(name = "ecoreg", version, about = "Aggregate outcome regression on survey embeddings")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Run configuration TOML.
    #[arg(long, global = true, default_value = "ecoreg.toml")]
    pub config: PathBuf,
    /// Directory for artifacts and manifests.
    #[arg(long, global = true, default_value = "out")]
    pub output_dir: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; 0 means one per core. Outputs do not depend on this.
    #[arg(long, global = true, default_value_t = 0)]
    pub workers: usize,
}

#[derive(Debug, Subcommand, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    /// Fit feature maps and embed every region.
    Featurize,
    /// Cross-validate and fit the outcome model.
    Fit,
    /// Subgroup prediction tables and gap report.
    Predict,
    /// Rank single-feature-set models and emit square-plot data.
    Explore,
    /// Generate a synthetic dataset with known coefficients.
    Synth,
    /// Summarize the fitted model and training fit quality.
    Report,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Featurize => "featurize",
            Command::Fit => "fit",
            Command::Predict => "predict",
            Command::Explore => "explore",
            Command::Synth => "synth",
            Command::Report => "report",
        }
    }
}

/// Validation errors exit with 2, internal errors with 1.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Internal(_) => 1,
        }
    }
}

fn validation(e: impl std::fmt::Display) -> CliError {
    CliError::Validation(e.to_string())
}

fn internal(e: impl std::fmt::Display) -> CliError {
    CliError::Internal(e.to_string())
}

fn io_error(e: IoError) -> CliError {
    match e {
        IoError::Io(inner) => CliError::Internal(inner.to_string()),
        other => CliError::Validation(other.to_string()),
    }
}

fn solver_error(e: SolverError) -> CliError {
    match e {
        SolverError::NotConverged { .. } => CliError::Internal(e.to_string()),
        other => CliError::Validation(other.to_string()),
    }
}

// --- run configuration ---

fn default_alpha_grid() -> Vec<f64> {
    vec![1.0]
}

fn default_n_lambda() -> usize {
    50
}

fn default_n_folds() -> usize {
    10
}

fn default_max_sweeps() -> usize {
    10000
}

fn default_tol() -> f64 {
    1e-7
}

fn default_participation() -> f64 {
    0.6
}

fn default_row_weight() -> f64 {
    1.0
}

fn default_low_support_floor() -> f64 {
    10.0
}

fn default_rff() -> usize {
    64
}

fn default_count_scale() -> f64 {
    100.0
}

fn default_samples() -> (usize, usize) {
    (40, 80)
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub data: DataConfig,
    #[serde(default)]
    pub featurizer: FeaturizerSection,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub augmentation: AugmentationSection,
    #[serde(default)]
    pub predict: PredictSection,
    #[serde(default)]
    pub gap: Option<GapSection>,
    #[serde(default)]
    pub explore: ExploreSection,
    #[serde(default)]
    pub synth: Option<SynthSection>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub schema: PathBuf,
    pub records: PathBuf,
    #[serde(default)]
    pub outcomes: Option<PathBuf>,
    #[serde(default)]
    pub crosswalk: Option<PathBuf>,
    #[serde(default)]
    pub exitpoll: Option<PathBuf>,
}

/// `bandwidth` is either the string "median" or a fixed sigma.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum BandwidthField {
    Rule(String),
    Sigma(f64),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeaturizerSection {
    #[serde(default = "default_rff")]
    pub rff_features_per_real: usize,
    #[serde(default)]
    pub bandwidth: Option<BandwidthField>,
    #[serde(default)]
    pub include_interactions: bool,
    #[serde(default)]
    pub offset_form: bool,
}

impl Default for FeaturizerSection {
    fn default() -> Self {
        FeaturizerSection {
            rff_features_per_real: default_rff(),
            bandwidth: None,
            include_interactions: false,
            offset_form: false,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    #[serde(default = "default_alpha_grid")]
    pub alpha_grid: Vec<f64>,
    #[serde(default = "default_n_lambda")]
    pub n_lambda: usize,
    #[serde(default)]
    pub lambda_min_ratio: Option<f64>,
    #[serde(default = "default_n_folds")]
    pub n_folds: usize,
    #[serde(default = "default_max_sweeps")]
    pub max_sweeps: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
    /// Select the one-standard-error lambda instead of the minimizer.
    #[serde(default)]
    pub use_1se: bool,
}

impl Default for SolverSection {
    fn default() -> Self {
        SolverSection {
            alpha_grid: default_alpha_grid(),
            n_lambda: default_n_lambda(),
            lambda_min_ratio: None,
            n_folds: default_n_folds(),
            max_sweeps: default_max_sweeps(),
            tol: default_tol(),
            use_1se: false,
        }
    }
}

impl SolverSection {
    fn path(&self) -> PathConfig {
        PathConfig {
            n_lambda: self.n_lambda,
            lambda_min_ratio: self.lambda_min_ratio,
            max_sweeps: self.max_sweeps,
            tol: self.tol,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationSection {
    #[serde(default = "default_participation")]
    pub default_participation: f64,
    /// Likelihood weight per exit-poll pseudo-row, in units of outcome
    /// counts. True-outcome rows keep their full count totals.
    #[serde(default = "default_row_weight")]
    pub row_weight: f64,
}

impl Default for AugmentationSection {
    fn default() -> Self {
        AugmentationSection {
            default_participation: default_participation(),
            row_weight: default_row_weight(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuerySpec {
    pub name: String,
    pub query: String,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictSection {
    /// national | state | region
    #[serde(default)]
    pub level: Option<String>,
    /// Declares the query list a partition, enabling frac_electorate.
    #[serde(default)]
    pub partition: bool,
    #[serde(default = "default_low_support_floor")]
    pub low_support_floor: f64,
    #[serde(default)]
    pub queries: Vec<QuerySpec>,
}

impl Default for PredictSection {
    fn default() -> Self {
        PredictSection {
            level: None,
            partition: false,
            low_support_floor: default_low_support_floor(),
            queries: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GapSection {
    pub first: String,
    pub second: String,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExploreSection {
    /// Categorical variables (or a*b interactions) to emit square-plot data for.
    #[serde(default)]
    pub targets: Vec<String>,
    #[serde(default)]
    pub top_k: Option<usize>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    pub n_regions: usize,
    #[serde(default = "crate::cli::one")]
    pub n_states: usize,
    #[serde(default = "default_samples")]
    pub samples_per_region: (usize, usize),
    #[serde(default)]
    pub intercepts: [f64; 3],
    #[serde(default = "default_count_scale")]
    pub count_scale: f64,
    /// Group name -> Normal(0, scale) coefficient scale.
    #[serde(default)]
    pub effects: BTreeMap<String, f64>,
}

pub(crate) fn one() -> usize {
    1
}

// --- schema file ---

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SchemaVariableFile {
    name: String,
    #[serde(rename = "type")]
    kind: String,
    #[serde(default)]
    levels: Vec<String>,
    #[serde(default)]
    reference: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SchemaFile {
    variables: Vec<SchemaVariableFile>,
    #[serde(default)]
    interactions: Vec<(String, String)>,
}

/// Load a schema TOML:
/// ```toml
/// [[variables]]
/// name = "sex"
/// type = "categorical"
/// levels = ["m", "w"]
/// reference = "m"
///
/// [[variables]]
/// name = "age"
/// type = "real"
///
/// interactions = [["sex", "age"]]
/// ```
pub fn load_schema(path: &Path) -> Result<Schema, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Validation(format!("cannot read {}: {e}", path.display())))?;
    let file: SchemaFile = toml::from_str(&text)
        .map_err(|e| CliError::Validation(format!("bad schema file {}: {e}", path.display())))?;
    let mut variables = Vec::new();
    for v in file.variables {
        let spec = match v.kind.as_str() {
            "real" => VariableSpec::real(&v.name),
            "categorical" => {
                let reference = v.reference.clone().or_else(|| v.levels.first().cloned());
                let Some(reference) = reference else {
                    return Err(CliError::Validation(format!(
                        "categorical variable `{}` needs levels",
                        v.name
                    )));
                };
                VariableSpec::categorical(&v.name, v.levels.clone(), &reference)
            }
            other => {
                return Err(CliError::Validation(format!(
                    "variable `{}` has unknown type `{other}`",
                    v.name
                )))
            }
        };
        variables.push(spec);
    }
    Schema::new(variables, file.interactions).map_err(validation)
}

pub fn load_run_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Validation(format!("cannot read {}: {e}", path.display())))?;
    toml::from_str(&text)
        .map_err(|e| CliError::Validation(format!("bad config {}: {e}", path.display())))
}

fn featurizer_config(cfg: &RunConfig, seed: u64) -> Result<FeaturizerConfig, CliError> {
    let mut out = FeaturizerConfig::new(cfg.featurizer.rff_features_per_real, seed);
    out.include_interactions = cfg.featurizer.include_interactions;
    out.offset_form = cfg.featurizer.offset_form;
    out.bandwidth_rule = match &cfg.featurizer.bandwidth {
        None => BandwidthRule::Median,
        Some(BandwidthField::Sigma(s)) if *s > 0.0 => BandwidthRule::Fixed(*s),
        Some(BandwidthField::Sigma(s)) => {
            return Err(CliError::Validation(format!("bandwidth must be positive, got {s}")))
        }
        Some(BandwidthField::Rule(r)) if r == "median" => BandwidthRule::Median,
        Some(BandwidthField::Rule(r)) => {
            return Err(CliError::Validation(format!("unknown bandwidth rule `{r}`")))
        }
    };
    Ok(out)
}

/// State id: the region id up to the first `-`, or the whole id.
pub fn state_of(region_id: &str) -> &str {
    region_id.split('-').next().unwrap_or(region_id)
}

fn region_to_state_map<'a>(regions: impl Iterator<Item = &'a String>) -> BTreeMap<String, String> {
    regions
        .map(|r| (r.clone(), state_of(r).to_string()))
        .collect()
}

// --- manifests ---

#[derive(Debug, Serialize)]
struct Manifest {
    command: &'static str,
    package_version: &'static str,
    seed: u64,
    config_hash: String,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path)
        .map_err(|e| CliError::Validation(format!("cannot read {}: {e}", path.display())))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

struct ManifestBuilder {
    command: &'static str,
    seed: u64,
    config_hash: String,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

impl ManifestBuilder {
    fn new(command: &'static str, seed: u64, config_path: &Path) -> Result<Self, CliError> {
        Ok(ManifestBuilder {
            command,
            seed,
            config_hash: sha256_file(config_path)?,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        })
    }

    fn input(&mut self, path: &Path) -> Result<(), CliError> {
        self.inputs.insert(
            path.file_name().unwrap().to_string_lossy().to_string(),
            sha256_file(path)?,
        );
        Ok(())
    }

    fn output(&mut self, path: &Path) -> Result<(), CliError> {
        self.outputs.insert(
            path.file_name().unwrap().to_string_lossy().to_string(),
            sha256_file(path)?,
        );
        Ok(())
    }

    fn write(self, output_dir: &Path) -> Result<(), CliError> {
        let manifest = Manifest {
            command: self.command,
            package_version: env!("CARGO_PKG_VERSION"),
            seed: self.seed,
            config_hash: self.config_hash,
            inputs: self.inputs,
            outputs: self.outputs,
        };
        let path = output_dir.join(format!("manifest_{}.json", self.command));
        let mut text = serde_json::to_string_pretty(&manifest).map_err(internal)?;
        text.push('\n');
        std::fs::write(path, text).map_err(internal)
    }
}

// --- shared assembly ---

struct LoadedData {
    schema: Schema,
    records: Vec<crate::data_model::Record>,
}

fn load_data(cfg: &RunConfig) -> Result<LoadedData, CliError> {
    let schema = load_schema(&cfg.data.schema)?;
    let records = load_records(&cfg.data.records, &schema).map_err(io_error)?;
    if records.is_empty() {
        return Err(CliError::Validation("records file is empty".into()));
    }
    Ok(LoadedData { schema, records })
}

fn embeddings_path(output_dir: &Path) -> PathBuf {
    output_dir.join("embeddings.bin")
}

fn fit_path_file(output_dir: &Path) -> PathBuf {
    output_dir.join("fit.bin")
}

fn load_artifact(output_dir: &Path) -> Result<EmbeddingArtifact, CliError> {
    let path = embeddings_path(output_dir);
    if !path.exists() {
        return Err(CliError::Validation(format!(
            "{} not found; run `ecoreg featurize` first",
            path.display()
        )));
    }
    io::load_embedding(&path).map_err(io_error)
}

/// Assemble the training problem: embedding rows joined with merged
/// outcomes, plus exit-poll pseudo-rows when configured.
fn assemble_problem(
    cfg: &RunConfig,
    artifact: &EmbeddingArtifact,
    records: &[crate::data_model::Record],
) -> Result<DesignProblem, CliError> {
    let outcomes_path = cfg.data.outcomes.as_ref().ok_or_else(|| {
        CliError::Validation("config is missing data.outcomes".into())
    })?;
    let outcomes = load_outcomes(outcomes_path).map_err(io_error)?;
    let crosswalk = match &cfg.data.crosswalk {
        Some(path) => load_crosswalk(path).map_err(io_error)?,
        None => Crosswalk::identity(outcomes.iter().map(|(g, _)| g.as_str())),
    };
    let table = merge_outcomes(&outcomes, &crosswalk).map_err(io_error)?;

    let matrix = &artifact.matrix;
    if table.rows.len() != matrix.n_rows()
        || table
            .rows
            .iter()
            .zip(&matrix.row_ids)
            .any(|(row, id)| &row.region_id != id)
    {
        return Err(CliError::Validation(
            "outcome regions do not match the embedded regions; re-run featurize".into(),
        ));
    }

    let mut x = matrix.rows.clone();
    let mut y = Array2::zeros((table.rows.len(), 3));
    for (i, row) in table.rows.iter().enumerate() {
        for k in 0..3 {
            y[[i, k]] = row.outcome.counts[k];
        }
    }
    let mut row_ids = matrix.row_ids.clone();
    let mut row_kinds = matrix.row_kinds.clone();
    let mut cv_weights: Vec<f64> = y.axis_iter(Axis(0)).map(|r| r.sum()).collect();

    if let Some(exitpoll_path) = &cfg.data.exitpoll {
        let polls = load_exitpoll(exitpoll_path).map_err(io_error)?;
        let grouped = group_by_region(records);
        let region_to_state = region_to_state_map(grouped.keys());
        let aug = build_augmentation_rows(
            &polls,
            &grouped,
            &artifact.maps,
            &region_to_state,
            cfg.augmentation.default_participation,
        )
        .map_err(io_error)?;
        let p = x.ncols();
        let mut x2 = Array2::zeros((x.nrows() + aug.len(), p));
        x2.slice_mut(ndarray::s![..x.nrows(), ..]).assign(&x);
        let mut y2 = Array2::zeros((y.nrows() + aug.len(), 3));
        y2.slice_mut(ndarray::s![..y.nrows(), ..]).assign(&y);
        for (j, row) in aug.iter().enumerate() {
            let i = x.nrows() + j;
            x2.row_mut(i).assign(&row.embedding);
            for k in 0..3 {
                y2[[i, k]] = row.outcome.counts[k];
            }
            row_ids.push(row.row_id.clone());
            row_kinds.push(RowKind::ExitPollSubgroup);
            cv_weights.push(cfg.augmentation.row_weight);
        }
        x = x2;
        y = y2;
    }

    let mut problem = DesignProblem::new(x, y, matrix.layout.clone(), row_ids, row_kinds)
        .map_err(solver_error)?;
    problem.row_cv_weights = Array1::from(cv_weights);
    Ok(problem)
}

// --- csv helpers ---

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<(), CliError> {
    let mut wtr = csv::Writer::from_path(path).map_err(internal)?;
    wtr.write_record(header).map_err(internal)?;
    for row in rows {
        wtr.write_record(row).map_err(internal)?;
    }
    wtr.flush().map_err(internal)
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

// --- commands ---

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.workers)
        .build()
        .map_err(internal)?;
    pool.install(|| dispatch(cli))
}

fn dispatch(cli: &Cli) -> Result<(), CliError> {
    let cfg = load_run_config(&cli.config)?;
    let seed = cli.seed.unwrap_or(cfg.seed);
    std::fs::create_dir_all(&cli.output_dir).map_err(internal)?;
    let mut manifest = ManifestBuilder::new(cli.command.name(), seed, &cli.config)?;
    match cli.command {
        Command::Featurize => cmd_featurize(&cfg, seed, &cli.output_dir, &mut manifest)?,
        Command::Fit => cmd_fit(&cfg, seed, &cli.output_dir, &mut manifest)?,
        Command::Predict => cmd_predict(&cfg, seed, &cli.output_dir, &mut manifest)?,
        Command::Explore => cmd_explore(&cfg, seed, &cli.output_dir, &mut manifest)?,
        Command::Synth => cmd_synth(&cfg, seed, &cli.output_dir, &mut manifest)?,
        Command::Report => cmd_report(&cfg, seed, &cli.output_dir, &mut manifest)?,
    }
    manifest.write(&cli.output_dir)
}

fn cmd_featurize(
    cfg: &RunConfig,
    seed: u64,
    output_dir: &Path,
    manifest: &mut ManifestBuilder,
) -> Result<(), CliError> {
    manifest.input(&cfg.data.schema)?;
    manifest.input(&cfg.data.records)?;
    let data = load_data(cfg)?;
    let fconfig = featurizer_config(cfg, seed)?;
    let maps = fit_maps(&data.records, &data.schema, &fconfig).map_err(validation)?;
    let grouped = group_by_region(&data.records);
    let matrix = build_embedding_matrix(&grouped, &maps).map_err(validation)?;
    let artifact = EmbeddingArtifact { matrix, maps };
    let path = embeddings_path(output_dir);
    io::save_embedding(&path, &artifact).map_err(io_error)?;
    manifest.output(&path)?;
    eprintln!(
        "featurize: {} regions, {} features",
        artifact.matrix.n_rows(),
        artifact.matrix.rows.ncols()
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct FitSummary {
    alpha: f64,
    lambda: f64,
    lambda_1se: f64,
    use_1se: bool,
    nonzero_groups: usize,
    active_groups: Vec<String>,
    frac_deviance_explained: f64,
    converged: bool,
    n_rows: usize,
    n_exit_poll_rows: usize,
}

fn cmd_fit(
    cfg: &RunConfig,
    seed: u64,
    output_dir: &Path,
    manifest: &mut ManifestBuilder,
) -> Result<(), CliError> {
    manifest.input(&cfg.data.schema)?;
    manifest.input(&cfg.data.records)?;
    manifest.input(&embeddings_path(output_dir))?;
    if let Some(p) = &cfg.data.outcomes {
        manifest.input(p)?;
    }
    for p in [&cfg.data.crosswalk, &cfg.data.exitpoll].into_iter().flatten() {
        manifest.input(p)?;
    }

    let data = load_data(cfg)?;
    let artifact = load_artifact(output_dir)?;
    let problem = assemble_problem(cfg, &artifact, &data.records)?;
    let path_cfg = cfg.solver.path();
    let selection = cross_validate(
        &problem,
        &cfg.solver.alpha_grid,
        &path_cfg,
        cfg.solver.n_folds,
        seed,
    )
    .map_err(solver_error)?;
    let lambda = if cfg.solver.use_1se {
        selection.lambda_1se
    } else {
        selection.best_lambda
    };
    let fit = match fit_at(&problem, selection.best_alpha, lambda, &path_cfg) {
        Ok(fit) => fit,
        Err(SolverError::NotConverged { fit, final_change, .. }) => {
            eprintln!("fit: warning: final fit not converged (change {final_change:.2e})");
            *fit
        }
        Err(e) => return Err(solver_error(e)),
    };
    let mut fit = fit;
    fit.cv_table = selection.table.clone();

    let fit_file = fit_path_file(output_dir);
    io::save_fit(&fit_file, &fit).map_err(io_error)?;
    manifest.output(&fit_file)?;

    let cv_path = output_dir.join("cv_table.csv");
    let rows: Vec<Vec<String>> = selection
        .table
        .iter()
        .map(|e| {
            vec![
                fmt(e.alpha),
                fmt(e.lambda),
                fmt(e.mean_deviance),
                fmt(e.se),
                e.flagged.to_string(),
            ]
        })
        .collect();
    write_csv(&cv_path, &["alpha", "lambda", "mean_deviance", "se", "flagged"], &rows)?;
    manifest.output(&cv_path)?;

    let n_exit = problem
        .row_kinds
        .iter()
        .filter(|k| **k == RowKind::ExitPollSubgroup)
        .count();
    let summary = FitSummary {
        alpha: fit.alpha,
        lambda: fit.lambda,
        lambda_1se: selection.lambda_1se,
        use_1se: cfg.solver.use_1se,
        nonzero_groups: fit.nonzero_groups,
        active_groups: fit.active_groups().iter().map(|s| s.to_string()).collect(),
        frac_deviance_explained: fraction_deviance_explained(&fit, &problem),
        converged: fit.converged,
        n_rows: problem.n_rows(),
        n_exit_poll_rows: n_exit,
    };
    let summary_path = output_dir.join("fit_summary.json");
    let mut text = serde_json::to_string_pretty(&summary).map_err(internal)?;
    text.push('\n');
    std::fs::write(&summary_path, text).map_err(internal)?;
    manifest.output(&summary_path)?;
    eprintln!(
        "fit: alpha {}, lambda {:.6}, {} active groups, frac deviance {:.4}",
        summary.alpha, summary.lambda, summary.nonzero_groups, summary.frac_deviance_explained
    );
    Ok(())
}

fn parse_level(raw: Option<&str>) -> Result<Level, CliError> {
    match raw.unwrap_or("national") {
        "national" => Ok(Level::National),
        "state" => Ok(Level::PerState),
        "region" => Ok(Level::PerRegion),
        other => Err(CliError::Validation(format!(
            "predict.level must be national, state, or region; got `{other}`"
        ))),
    }
}

fn parse_queries(specs: &[QuerySpec], schema: &Schema) -> Result<Vec<SubgroupQuery>, CliError> {
    if specs.is_empty() {
        return Err(CliError::Validation(
            "config has no [[predict.queries]] entries".into(),
        ));
    }
    let mut queries = Vec::new();
    for spec in specs {
        let q = SubgroupQuery::parse(spec.name.clone(), &spec.query).map_err(validation)?;
        q.validate(schema).map_err(validation)?;
        queries.push(q);
    }
    Ok(queries)
}

#[derive(Debug, Serialize)]
struct PredictSidecar {
    level: String,
    is_partition: bool,
    low_support_floor: f64,
    fit_lambda: f64,
    fit_alpha: f64,
    rows: Vec<SidecarRow>,
}

#[derive(Debug, Serialize)]
struct SidecarRow {
    group: String,
    share_a: f64,
    share_b: f64,
    frac_electorate: Option<f64>,
    participation: f64,
    other_nonvoting: f64,
    level: String,
    unit_id: String,
    low_support: bool,
}

fn cmd_predict(
    cfg: &RunConfig,
    _seed: u64,
    output_dir: &Path,
    manifest: &mut ManifestBuilder,
) -> Result<(), CliError> {
    manifest.input(&cfg.data.schema)?;
    manifest.input(&cfg.data.records)?;
    manifest.input(&embeddings_path(output_dir))?;
    manifest.input(&fit_path_file(output_dir))?;

    let data = load_data(cfg)?;
    let artifact = load_artifact(output_dir)?;
    let fit = io::load_fit(&fit_path_file(output_dir)).map_err(io_error)?;
    let queries = parse_queries(&cfg.predict.queries, &data.schema)?;
    let grouped = group_by_region(&data.records);
    let level = parse_level(cfg.predict.level.as_deref())?;
    let table_cfg = TableConfig {
        level,
        is_partition: cfg.predict.partition,
        low_support_floor: cfg.predict.low_support_floor,
        region_to_state: Some(region_to_state_map(grouped.keys())),
    };
    let rows = exit_poll_table(&fit, &grouped, &artifact.maps, &queries, &table_cfg)
        .map_err(validation)?;

    let csv_path = output_dir.join("subgroup_predictions.csv");
    let csv_rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.group.clone(),
                fmt(r.share_a),
                fmt(r.share_b),
                r.fraction_of_electorate.map(fmt).unwrap_or_default(),
                fmt(r.participation_rate),
                fmt(r.other_nonvoting),
                r.level.to_string(),
                r.unit_id.clone(),
            ]
        })
        .collect();
    write_csv(
        &csv_path,
        &[
            "group",
            "share_A",
            "share_B",
            "frac_electorate",
            "participation",
            "other_nonvoting",
            "level",
            "unit_id",
        ],
        &csv_rows,
    )?;
    manifest.output(&csv_path)?;

    let sidecar = PredictSidecar {
        level: level.to_string(),
        is_partition: cfg.predict.partition,
        low_support_floor: cfg.predict.low_support_floor,
        fit_lambda: fit.lambda,
        fit_alpha: fit.alpha,
        rows: rows
            .iter()
            .map(|r| SidecarRow {
                group: r.group.clone(),
                share_a: r.share_a,
                share_b: r.share_b,
                frac_electorate: r.fraction_of_electorate,
                participation: r.participation_rate,
                other_nonvoting: r.other_nonvoting,
                level: r.level.to_string(),
                unit_id: r.unit_id.clone(),
                low_support: r.low_support,
            })
            .collect(),
    };
    let sidecar_path = output_dir.join("subgroup_predictions.json");
    let mut text = serde_json::to_string_pretty(&sidecar).map_err(internal)?;
    text.push('\n');
    std::fs::write(&sidecar_path, text).map_err(internal)?;
    manifest.output(&sidecar_path)?;

    if let Some(gap) = &cfg.gap {
        let first = SubgroupQuery::parse("first", &gap.first).map_err(validation)?;
        let second = SubgroupQuery::parse("second", &gap.second).map_err(validation)?;
        first.validate(&data.schema).map_err(validation)?;
        second.validate(&data.schema).map_err(validation)?;
        let report = gender_gap(&fit, &grouped, &artifact.maps, &first, &second)
            .map_err(validation)?;
        let gap_path = output_dir.join("gap.csv");
        let mut gap_rows: Vec<Vec<String>> = report
            .per_region
            .iter()
            .map(|(region, g)| vec![region.clone(), fmt(*g)])
            .collect();
        gap_rows.push(vec!["national".to_string(), fmt(report.national_gap)]);
        write_csv(&gap_path, &["unit_id", "gap_pp"], &gap_rows)?;
        manifest.output(&gap_path)?;
        eprintln!(
            "predict: national gap {:.2} pp, {} regions omitted",
            report.national_gap,
            report.omitted.len()
        );
    }
    eprintln!("predict: {} table rows", rows.len());
    Ok(())
}

fn cmd_explore(
    cfg: &RunConfig,
    seed: u64,
    output_dir: &Path,
    manifest: &mut ManifestBuilder,
) -> Result<(), CliError> {
    manifest.input(&cfg.data.schema)?;
    manifest.input(&cfg.data.records)?;
    manifest.input(&embeddings_path(output_dir))?;
    if let Some(p) = &cfg.data.outcomes {
        manifest.input(p)?;
    }

    let data = load_data(cfg)?;
    let artifact = load_artifact(output_dir)?;
    let problem = assemble_problem(cfg, &artifact, &data.records)?;
    let fconfig = featurizer_config(cfg, seed)?;
    let sets = enumerate_feature_sets(&data.schema, &fconfig);
    let exploration = ExplorationConfig {
        alpha_grid: cfg.solver.alpha_grid.clone(),
        path: cfg.solver.path(),
        n_folds: cfg.solver.n_folds,
        fold_seed: seed,
    };
    let runs = run_exploration(&problem, &sets, &exploration).map_err(validation)?;

    let null_dev = crate::solver::null_deviance(problem.y.view());
    let ranking_path = output_dir.join("exploration_ranking.csv");
    let rows: Vec<Vec<String>> = runs
        .iter()
        .enumerate()
        .map(|(i, r)| {
            vec![
                (i + 1).to_string(),
                r.label(),
                fmt(r.cv_deviance),
                fmt(r.frac_deviance),
                r.n_active.to_string(),
            ]
        })
        .collect();
    write_csv(
        &ranking_path,
        &["rank", "feature", "deviance", "frac_deviance", "n_active"],
        &rows,
    )?;
    manifest.output(&ranking_path)?;
    eprintln!(
        "explore: {} feature sets ranked, null deviance {:.4}",
        runs.len(),
        null_dev
    );

    let grouped = group_by_region(&data.records);
    for target in &cfg.explore.targets {
        if problem.layout.group(target).is_none() {
            return Err(CliError::Validation(format!(
                "explore target `{target}` is not a feature group"
            )));
        }
        let restricted = problem.restrict_to_groups(std::slice::from_ref(target));
        let selection = cross_validate(
            &restricted,
            &cfg.solver.alpha_grid,
            &cfg.solver.path(),
            cfg.solver.n_folds,
            seed,
        )
        .map_err(solver_error)?;
        let fit = match fit_at(
            &restricted,
            selection.best_alpha,
            selection.best_lambda,
            &cfg.solver.path(),
        ) {
            Ok(fit) => fit,
            Err(SolverError::NotConverged { fit, .. }) => *fit,
            Err(e) => return Err(solver_error(e)),
        };
        let points = square_plot_data(&fit, &grouped, &artifact.maps, target, cfg.explore.top_k)
            .map_err(validation)?;
        let rows: Vec<Vec<String>> = points
            .iter()
            .map(|p| {
                vec![
                    p.category_level.clone(),
                    fmt(p.share_b_two_party),
                    fmt(p.participation_rate),
                    fmt(p.bubble_size),
                ]
            })
            .collect();
        let safe = target.replace('*', "_x_");
        let path = output_dir.join(format!("square_{safe}.csv"));
        write_csv(&path, &["level", "share_B", "participation", "weight"], &rows)?;
        manifest.output(&path)?;
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct SynthTruth {
    intercepts: [f64; 3],
    /// Group name -> per-column [class A, class B] coefficients.
    effects: BTreeMap<String, Vec<[f64; 2]>>,
    n_regions: usize,
    n_states: usize,
}

fn cmd_synth(
    cfg: &RunConfig,
    seed: u64,
    output_dir: &Path,
    manifest: &mut ManifestBuilder,
) -> Result<(), CliError> {
    manifest.input(&cfg.data.schema)?;
    let section = cfg.synth.as_ref().ok_or_else(|| {
        CliError::Validation("config is missing the [synth] section".into())
    })?;
    let schema = load_schema(&cfg.data.schema)?;
    let fconfig = featurizer_config(cfg, seed)?;
    let mut spec = SyntheticSpec::new(schema.clone(), fconfig, section.n_regions, seed);
    spec.n_states = section.n_states;
    spec.samples_per_region = section.samples_per_region;
    spec.intercepts = section.intercepts;
    spec.count_scale = section.count_scale;
    for (group, scale) in &section.effects {
        spec.effects.insert(
            group.clone(),
            io::EffectSpec::Random { scale: *scale },
        );
    }
    let data = generate_synthetic(&spec).map_err(io_error)?;

    let records_path = output_dir.join("records.csv");
    let f = std::fs::File::create(&records_path).map_err(internal)?;
    io::write_records_csv(f, &data.records, &schema).map_err(io_error)?;
    manifest.output(&records_path)?;

    let outcomes_path = output_dir.join("outcomes.csv");
    let outcomes: Vec<(String, crate::data_model::OutcomeCounts)> = data
        .table
        .rows
        .iter()
        .map(|r| (r.region_id.clone(), r.outcome))
        .collect();
    let f = std::fs::File::create(&outcomes_path).map_err(internal)?;
    io::write_outcomes_csv(f, &outcomes).map_err(io_error)?;
    manifest.output(&outcomes_path)?;

    let mut effects = BTreeMap::new();
    for g in &data.problem.layout.groups {
        let block: Vec<[f64; 2]> = g
            .span()
            .map(|j| [data.true_beta[[j, 0]], data.true_beta[[j, 1]]])
            .collect();
        if block.iter().any(|c| c[0] != 0.0 || c[1] != 0.0) {
            effects.insert(g.name.clone(), block);
        }
    }
    let truth = SynthTruth {
        intercepts: data.true_intercepts,
        effects,
        n_regions: section.n_regions,
        n_states: section.n_states,
    };
    let truth_path = output_dir.join("truth.json");
    let mut text = serde_json::to_string_pretty(&truth).map_err(internal)?;
    text.push('\n');
    std::fs::write(&truth_path, text).map_err(internal)?;
    manifest.output(&truth_path)?;
    eprintln!(
        "synth: {} regions, {} records",
        data.table.len(),
        data.records.len()
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct Report {
    alpha: f64,
    lambda: f64,
    nonzero_groups: usize,
    active_groups: Vec<String>,
    frac_deviance_explained: f64,
    converged: bool,
    n_rows: usize,
    national_gap_pp: Option<f64>,
}

fn cmd_report(
    cfg: &RunConfig,
    _seed: u64,
    output_dir: &Path,
    manifest: &mut ManifestBuilder,
) -> Result<(), CliError> {
    manifest.input(&cfg.data.schema)?;
    manifest.input(&cfg.data.records)?;
    manifest.input(&embeddings_path(output_dir))?;
    manifest.input(&fit_path_file(output_dir))?;

    let data = load_data(cfg)?;
    let artifact = load_artifact(output_dir)?;
    let fit = io::load_fit(&fit_path_file(output_dir)).map_err(io_error)?;
    let problem = assemble_problem(cfg, &artifact, &data.records)?;

    let scatter = fit_scatter(&fit, &problem);
    let scatter_path = output_dir.join("scatter.csv");
    let rows: Vec<Vec<String>> = scatter
        .iter()
        .map(|r| {
            vec![
                r.row_id.clone(),
                r.kind.to_string(),
                fmt(r.observed[0]),
                fmt(r.observed[1]),
                fmt(r.observed[2]),
                fmt(r.predicted[0]),
                fmt(r.predicted[1]),
                fmt(r.predicted[2]),
            ]
        })
        .collect();
    write_csv(
        &scatter_path,
        &[
            "row_id",
            "kind",
            "obs_A",
            "obs_B",
            "obs_other",
            "pred_A",
            "pred_B",
            "pred_other",
        ],
        &rows,
    )?;
    manifest.output(&scatter_path)?;

    let national_gap = match &cfg.gap {
        Some(gap) => {
            let grouped = group_by_region(&data.records);
            let first = SubgroupQuery::parse("first", &gap.first).map_err(validation)?;
            let second = SubgroupQuery::parse("second", &gap.second).map_err(validation)?;
            Some(
                gender_gap(&fit, &grouped, &artifact.maps, &first, &second)
                    .map_err(validation)?
                    .national_gap,
            )
        }
        None => None,
    };

    let report = Report {
        alpha: fit.alpha,
        lambda: fit.lambda,
        nonzero_groups: fit.nonzero_groups,
        active_groups: fit.active_groups().iter().map(|s| s.to_string()).collect(),
        frac_deviance_explained: fraction_deviance_explained(&fit, &problem),
        converged: fit.converged,
        n_rows: problem.n_rows(),
        national_gap_pp: national_gap,
    };
    let report_path = output_dir.join("report.json");
    let mut text = serde_json::to_string_pretty(&report).map_err(internal)?;
    text.push('\n');
    std::fs::write(&report_path, text).map_err(internal)?;
    manifest.output(&report_path)?;
    eprintln!(
        "report: {} active groups, frac deviance {:.4}",
        report.nonzero_groups, report.frac_deviance_explained
    );
    Ok(())
}
