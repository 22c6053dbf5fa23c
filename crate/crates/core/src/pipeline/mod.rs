//! Config-driven runs: load or generate a store, cluster it, compute and
//! smooth metric series, test prototype shifts, tabulate dependencies, and
//! write every result plus a manifest under one output directory.

mod config;
mod manifest;

pub use config::{
    derive_seed, ApStageConfig, DependencyConfig, MetricRequest, PipelineConfig, SynthStageConfig,
};
pub use manifest::{read_manifest, Artifact, Manifest, RunStatus, MANIFEST_FILE};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::{
    ap_fit, fit_per_year, kmeans_fit, stratified_sample, write_model, ClusterError, ClusterMethod,
    ClusterModel, ClusterScope,
};
use crate::depfreq::{read_dependencies, tabulate_top_dependencies, DepTable};
use crate::embedstore::{read_store, write_store, EmbeddingStore};
use crate::metrics::{compute_series, per_year_entropy_series, Metric, MetricName, MetricSeries};
use crate::stats::{
    pearson, permutation_series, rolling_mean, write_permutation_csv, PermutationParams,
    PermutationResult,
};
use crate::synth::generate_synthetic;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Config,
    Load,
    Synth,
    Cluster,
    Metrics,
    Smoothing,
    Permtest,
    Correlation,
    Deps,
    Report,
    Output,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Config => "config",
            Stage::Load => "load",
            Stage::Synth => "synth",
            Stage::Cluster => "cluster",
            Stage::Metrics => "metrics",
            Stage::Smoothing => "smoothing",
            Stage::Permtest => "permtest",
            Stage::Correlation => "correlation",
            Stage::Deps => "deps",
            Stage::Report => "report",
            Stage::Output => "output",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A failure tagged with the stage it happened in.
#[derive(Debug, Clone, Error, PartialEq)]
#[error("[{stage}] {message}")]
pub struct PipelineError {
    pub stage: Stage,
    pub message: String,
}

impl PipelineError {
    pub fn new(stage: Stage, message: impl Into<String>) -> Self {
        PipelineError {
            stage,
            message: message.into(),
        }
    }
}

fn at<E: fmt::Display>(stage: Stage) -> impl Fn(E) -> PipelineError {
    move |e| PipelineError::new(stage, e.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Command {
    /// Validate a store, apply the filters and write the result.
    Ingest,
    /// Write the configured synthetic corpus and its ground truth.
    Synth,
    /// Fit and save every configured clustering.
    Cluster,
    /// Metric series and their smoothed versions.
    Metrics,
    /// Permutation tests of the prototype shift between consecutive years.
    Permtest,
    /// Top dependency heads per group.
    Deps,
    /// Every stage, plus a bundled plot-data file and metric correlations.
    Report,
}

impl Command {
    pub fn as_str(self) -> &'static str {
        match self {
            Command::Ingest => "ingest",
            Command::Synth => "synth",
            Command::Cluster => "cluster",
            Command::Metrics => "metrics",
            Command::Permtest => "permtest",
            Command::Deps => "deps",
            Command::Report => "report",
        }
    }
}

/// Pearson correlation between two series over their shared points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub x: String,
    pub y: String,
    pub pearson: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

/// In-memory results of a run, alongside the files it wrote.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub manifest: Manifest,
    pub store: Option<EmbeddingStore>,
    pub models: Vec<ClusterModel>,
    /// Per configured method, the per-year models of a `per_year` run.
    pub per_year_models: Vec<Vec<(i32, ClusterModel)>>,
    pub series: Vec<MetricSeries>,
    pub smoothed: Vec<MetricSeries>,
    pub permutation: Vec<PermutationResult>,
    pub correlations: Vec<Correlation>,
    pub dependencies: Option<DepTable>,
}

#[derive(Debug, Default)]
struct Results {
    store: Option<EmbeddingStore>,
    models: Vec<ClusterModel>,
    per_year_models: Vec<Vec<(i32, ClusterModel)>>,
    series: Vec<MetricSeries>,
    smoothed: Vec<MetricSeries>,
    permutation: Vec<PermutationResult>,
    correlations: Vec<Correlation>,
    dependencies: Option<DepTable>,
}

/// The full pipeline: equivalent to [`Command::Report`].
pub fn run_pipeline(config: &PipelineConfig) -> Result<RunOutput, PipelineError> {
    run_command(Command::Report, config)
}

/// Runs one subcommand. Configuration and input paths are checked before the
/// output directory is touched. When a later stage fails, the manifest is
/// still written, marked partial.
pub fn run_command(command: Command, config: &PipelineConfig) -> Result<RunOutput, PipelineError> {
    config.check_common()?;
    match command {
        Command::Deps => {
            config.check_dependencies()?;
        }
        Command::Synth => {
            if config.synth.is_none() {
                return Err(PipelineError::new(Stage::Config, "`synth` section missing"));
            }
            config.check_source()?;
        }
        Command::Cluster => {
            config.check_source()?;
            if config.cluster_methods().is_empty() {
                return Err(PipelineError::new(Stage::Config, "no clustering configured"));
            }
        }
        Command::Metrics => {
            config.check_source()?;
            config.check_metrics()?;
        }
        Command::Report => {
            config.check_source()?;
            config.check_metrics()?;
            if config.dependencies.is_some() {
                config.check_dependencies()?;
            }
        }
        Command::Ingest | Command::Permtest => config.check_source()?,
    }
    let resolved = config.resolved();
    let run = || execute(command, &resolved, config.seed);
    match config.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(at(Stage::Config))?
            .install(run),
        None => run(),
    }
}

fn execute(
    command: Command,
    config: &PipelineConfig,
    root_seed: Option<u64>,
) -> Result<RunOutput, PipelineError> {
    let mut out = Output::create(&config.out_dir)?;
    let mut results = Results::default();
    let outcome = stages(command, config, &mut out, &mut results);
    let (status, failed_stage, error) = match &outcome {
        Ok(()) => (RunStatus::Complete, None, None),
        Err(e) => (
            RunStatus::Partial,
            Some(e.stage.to_string()),
            Some(e.message.clone()),
        ),
    };
    let manifest = Manifest {
        manifest_version: manifest::MANIFEST_VERSION,
        command: command.as_str().to_string(),
        status,
        failed_stage,
        error,
        config_digest: manifest::config_digest(config),
        config: config.clone(),
        root_seed,
        seeds: manifest::stage_seeds(config),
        versions: manifest::versions(),
        artifacts: out.artifacts.values().cloned().collect(),
    };
    let written = out.write_json(MANIFEST_FILE, &manifest, Stage::Output, false);
    outcome?;
    written?;
    Ok(RunOutput {
        manifest,
        store: results.store,
        models: results.models,
        per_year_models: results.per_year_models,
        series: results.series,
        smoothed: results.smoothed,
        permutation: results.permutation,
        correlations: results.correlations,
        dependencies: results.dependencies,
    })
}

fn stages(
    command: Command,
    config: &PipelineConfig,
    out: &mut Output,
    results: &mut Results,
) -> Result<(), PipelineError> {
    if command == Command::Deps {
        return deps_stage(config, out, results);
    }
    let store = load_stage(command, config, out)?;
    match command {
        Command::Ingest | Command::Synth | Command::Deps => {}
        Command::Cluster => {
            cluster_stage(config, &store, &config.cluster_methods(), out, results)?;
        }
        Command::Metrics => {
            cluster_stage(config, &store, &config.methods_for_metrics(), out, results)?;
            results.series = metrics_stage(config, &store, results, out)?;
            results.smoothed = smoothing_stage(config, &results.series, out)?;
        }
        Command::Permtest => {
            let params = config.permutation.unwrap_or_default();
            results.permutation = permtest_stage(config, &store, &params, out)?;
        }
        Command::Report => {
            cluster_stage(config, &store, &config.cluster_methods(), out, results)?;
            results.series = metrics_stage(config, &store, results, out)?;
            results.smoothed = smoothing_stage(config, &results.series, out)?;
            if let Some(params) = &config.permutation {
                results.permutation = permtest_stage(config, &store, params, out)?;
            }
            results.correlations = correlation_stage(&results.series, out)?;
            if config.dependencies.is_some() {
                deps_stage(config, out, results)?;
            }
            report_stage(results, out)?;
        }
    }
    results.store = Some(store);
    Ok(())
}

#[derive(Serialize)]
struct StoreSummary<'a> {
    count: usize,
    dim: usize,
    token: &'a str,
    year_counts: BTreeMap<i32, usize>,
}

fn load_stage(
    command: Command,
    config: &PipelineConfig,
    out: &mut Output,
) -> Result<EmbeddingStore, PipelineError> {
    let raw = match (&config.store, &config.synth) {
        (Some(stem), _) if command != Command::Synth => read_store(stem).map_err(at(Stage::Load))?,
        (_, Some(synth)) => {
            let corpus = generate_synthetic(&synth.spec, synth.seed).map_err(at(Stage::Synth))?;
            out.write_store("store/synthetic", &corpus.store, Stage::Synth)?;
            out.write_json("store/ground_truth.json", &corpus.truth, Stage::Synth, true)?;
            corpus.store
        }
        _ => return Err(PipelineError::new(Stage::Config, "no store source configured")),
    };
    let store = raw
        .filter(config.journals.as_ref(), config.year_range)
        .map_err(at(Stage::Load))?
        .filter_token(&config.target_token);
    if matches!(command, Command::Ingest | Command::Synth) {
        let stem = if command == Command::Ingest { "store/corpus" } else { "store/filtered" };
        if command == Command::Ingest || store != raw {
            out.write_store(stem, &store, Stage::Load)?;
        }
        let summary = StoreSummary {
            count: store.count(),
            dim: store.dim(),
            token: &config.target_token,
            year_counts: store.year_counts(),
        };
        out.write_json("store/summary.json", &summary, Stage::Load, true)?;
    } else if store.is_empty() {
        return Err(PipelineError::new(
            Stage::Load,
            format!("no `{}` embeddings left after filtering", config.target_token),
        ));
    }
    Ok(store)
}

fn fit_method(config: &PipelineConfig, store: &EmbeddingStore, method: ClusterMethod) -> Result<ClusterModel, ClusterError> {
    match method {
        ClusterMethod::KMeans => {
            let params = config.kmeans.as_ref().expect("checked by caller");
            kmeans_fit(store, params)
        }
        ClusterMethod::AffinityPropagation => {
            let ap = config.affinity_propagation.as_ref().expect("checked by caller");
            let sample = stratified_sample(store, &ap.sampling)?;
            ap_fit(&sample, &ap.params).and_then(|m| m.extend_to(&sample, store))
        }
    }
}

fn cluster_stage(
    config: &PipelineConfig,
    store: &EmbeddingStore,
    methods: &[ClusterMethod],
    out: &mut Output,
    results: &mut Results,
) -> Result<(), PipelineError> {
    for &method in methods {
        match config.clustering_scope {
            ClusterScope::Corpus => {
                let model = fit_method(config, store, method).map_err(at(Stage::Cluster))?;
                out.write_model(&format!("models/{}", method.tag()), &model)?;
                results.models.push(model);
            }
            ClusterScope::PerYear => {
                let models = fit_per_year(store, |s| fit_method(config, s, method)).map_err(at(Stage::Cluster))?;
                for (year, model) in &models {
                    out.write_model(&format!("models/{}_per_year/{year}", method.tag()), model)?;
                }
                results.per_year_models.push(models);
            }
        }
    }
    Ok(())
}

fn series_name(s: &MetricSeries) -> String {
    format!("{}_{}", s.metric, s.variant)
}

fn write_series(out: &mut Output, stem: &str, series: &MetricSeries, stage: Stage) -> Result<(), PipelineError> {
    out.write_bytes(&format!("{stem}.csv"), series.to_csv_string().as_bytes(), stage)?;
    out.write_json(&format!("{stem}.json"), series, stage, true)
}

fn metrics_stage(
    config: &PipelineConfig,
    store: &EmbeddingStore,
    results: &Results,
    out: &mut Output,
) -> Result<Vec<MetricSeries>, PipelineError> {
    let models = &results.models;
    let mut jobs: Vec<(Metric, Option<&ClusterModel>)> = Vec::new();
    let mut per_year_jobs: Vec<&[(i32, ClusterModel)]> = Vec::new();
    for request in &config.metrics {
        match request.metric {
            MetricName::Prt => jobs.push((Metric::Prt, None)),
            MetricName::Aid => jobs.push((Metric::Aid(request.aid_mode), None)),
            MetricName::Entropy if config.clustering_scope == ClusterScope::PerYear => {
                for models in &results.per_year_models {
                    let method = models.first().map(|(_, m)| m.method());
                    if method.is_some() && request.clustering.is_none_or(|m| Some(m) == method) {
                        per_year_jobs.push(models);
                    }
                }
            }
            MetricName::Jsd | MetricName::Entropy => {
                let metric = if request.metric == MetricName::Jsd { Metric::Jsd } else { Metric::Entropy };
                for model in models {
                    if request.clustering.is_none_or(|m| m == model.method()) {
                        jobs.push((metric, Some(model)));
                    }
                }
            }
        }
    }
    let mut seen = BTreeSet::new();
    let mut all = Vec::new();
    for (metric, model) in jobs {
        let series = compute_series(store, model, metric, config.year_range).map_err(at(Stage::Metrics))?;
        let name = series_name(&series);
        if seen.insert(name.clone()) {
            write_series(out, &format!("series/{name}"), &series, Stage::Metrics)?;
            all.push(series);
        }
    }
    for models in per_year_jobs {
        let series = per_year_entropy_series(models, config.year_range).map_err(at(Stage::Metrics))?;
        let name = series_name(&series);
        if seen.insert(name.clone()) {
            write_series(out, &format!("series/{name}"), &series, Stage::Metrics)?;
            all.push(series);
        }
    }
    Ok(all)
}

fn smoothing_stage(
    config: &PipelineConfig,
    series: &[MetricSeries],
    out: &mut Output,
) -> Result<Vec<MetricSeries>, PipelineError> {
    let window = config.smoothing_window;
    if window <= 1 {
        return Ok(Vec::new());
    }
    let mut smoothed = Vec::with_capacity(series.len());
    for s in series {
        let rolled = rolling_mean(s, window).map_err(at(Stage::Smoothing))?;
        let stem = format!("series/{}_rolling{window}", series_name(s));
        write_series(out, &stem, &rolled, Stage::Smoothing)?;
        smoothed.push(rolled);
    }
    Ok(smoothed)
}

fn permtest_stage(
    config: &PipelineConfig,
    store: &EmbeddingStore,
    params: &PermutationParams,
    out: &mut Output,
) -> Result<Vec<PermutationResult>, PipelineError> {
    let results = permutation_series(store, params, config.year_range).map_err(at(Stage::Permtest))?;
    let mut csv = Vec::new();
    write_permutation_csv(&results, &mut csv).map_err(at(Stage::Permtest))?;
    out.write_bytes("permutation/prt.csv", &csv, Stage::Permtest)?;
    out.write_json("permutation/prt.json", &results, Stage::Permtest, true)?;
    Ok(results)
}

fn correlation_stage(series: &[MetricSeries], out: &mut Output) -> Result<Vec<Correlation>, PipelineError> {
    let mut correlations = Vec::new();
    for (i, x) in series.iter().enumerate() {
        for y in &series[i + 1..] {
            if x.metric.is_pairwise() != y.metric.is_pairwise() {
                continue;
            }
            let (pearson, note) = match pearson(x, y) {
                Ok(r) => (Some(r), None),
                Err(e) => (None, Some(e.to_string())),
            };
            correlations.push(Correlation {
                x: series_name(x),
                y: series_name(y),
                pearson,
                note,
            });
        }
    }
    out.write_json("report/correlations.json", &correlations, Stage::Correlation, true)?;
    Ok(correlations)
}

fn deps_stage(config: &PipelineConfig, out: &mut Output, results: &mut Results) -> Result<(), PipelineError> {
    let deps = config.check_dependencies()?;
    let adjective = deps.adjective.as_deref().unwrap_or(&config.target_token);
    let records = read_dependencies(&deps.input, Some(adjective)).map_err(at(Stage::Deps))?;
    let table = tabulate_top_dependencies(&records, deps.group_by, deps.k).map_err(at(Stage::Deps))?;
    let mut csv = Vec::new();
    table.write_csv(&mut csv).map_err(at(Stage::Deps))?;
    out.write_bytes("deps/top_dependencies.csv", &csv, Stage::Deps)?;
    out.write_json("deps/top_dependencies.json", &table, Stage::Deps, true)?;
    results.dependencies = Some(table);
    Ok(())
}

#[derive(Serialize)]
struct PlotData<'a> {
    series: &'a [MetricSeries],
    smoothed: &'a [MetricSeries],
    permutation: &'a [PermutationResult],
    correlations: &'a [Correlation],
    #[serde(skip_serializing_if = "Option::is_none")]
    dependencies: Option<&'a DepTable>,
}

fn report_stage(results: &Results, out: &mut Output) -> Result<(), PipelineError> {
    let bundle = PlotData {
        series: &results.series,
        smoothed: &results.smoothed,
        permutation: &results.permutation,
        correlations: &results.correlations,
        dependencies: results.dependencies.as_ref(),
    };
    out.write_json("report/plot_data.json", &bundle, Stage::Report, true)
}

/// The output directory and the artifacts written into it so far.
struct Output {
    dir: PathBuf,
    artifacts: BTreeMap<String, Artifact>,
}

impl Output {
    fn create(dir: &Path) -> Result<Self, PipelineError> {
        std::fs::create_dir_all(dir)
            .map_err(|e| PipelineError::new(Stage::Output, format!("{}: {e}", dir.display())))?;
        Ok(Output {
            dir: dir.to_path_buf(),
            artifacts: BTreeMap::new(),
        })
    }

    fn path(&self, rel: &str, stage: Stage) -> Result<PathBuf, PipelineError> {
        let path = self.dir.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)
                .map_err(|e| PipelineError::new(stage, format!("{}: {e}", parent.display())))?;
        }
        Ok(path)
    }

    fn write_bytes(&mut self, rel: &str, bytes: &[u8], stage: Stage) -> Result<(), PipelineError> {
        self.write_inner(rel, bytes, stage, true)
    }

    fn write_inner(&mut self, rel: &str, bytes: &[u8], stage: Stage, record: bool) -> Result<(), PipelineError> {
        let path = self.path(rel, stage)?;
        std::fs::write(&path, bytes)
            .map_err(|e| PipelineError::new(stage, format!("{}: {e}", path.display())))?;
        if record {
            self.record(rel, bytes);
        }
        Ok(())
    }

    fn write_json<T: Serialize + ?Sized>(
        &mut self,
        rel: &str,
        value: &T,
        stage: Stage,
        record: bool,
    ) -> Result<(), PipelineError> {
        let mut text = serde_json::to_string_pretty(value).map_err(at(stage))?;
        text.push('\n');
        self.write_inner(rel, text.as_bytes(), stage, record)
    }

    fn record(&mut self, rel: &str, bytes: &[u8]) {
        self.artifacts.insert(
            rel.to_string(),
            Artifact {
                path: rel.to_string(),
                sha256: manifest::sha256_hex(bytes),
                bytes: bytes.len() as u64,
            },
        );
    }

    fn record_file(&mut self, rel: &str, stage: Stage) -> Result<(), PipelineError> {
        let path = self.dir.join(rel);
        let bytes = std::fs::read(&path)
            .map_err(|e| PipelineError::new(stage, format!("{}: {e}", path.display())))?;
        self.record(rel, &bytes);
        Ok(())
    }

    fn write_store(&mut self, stem: &str, store: &EmbeddingStore, stage: Stage) -> Result<(), PipelineError> {
        let path = self.path(stem, stage)?;
        write_store(store, &path).map_err(at(stage))?;
        self.record_file(&format!("{stem}.vec"), stage)?;
        self.record_file(&format!("{stem}.meta.jsonl"), stage)
    }

    fn write_model(&mut self, stem: &str, model: &ClusterModel) -> Result<(), PipelineError> {
        let path = self.path(stem, Stage::Cluster)?;
        write_model(model, &path).map_err(at(Stage::Cluster))?;
        for suffix in [".json", ".labels.bin", ".centers.vec"] {
            self.record_file(&format!("{stem}{suffix}"), Stage::Cluster)?;
        }
        Ok(())
    }
}
