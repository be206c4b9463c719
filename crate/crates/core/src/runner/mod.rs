//! End-to-end experiments: retrieval, prompting, completion, parsing and
//! evaluation over a whole dataset.
//!
//! Predictions are appended to `predictions.jsonl` as they complete. A rerun
//! with the same output directory skips every sample already recorded there,
//! so an interrupted run resumes where it stopped. The final report is
//! computed from the records in manifest order and contains no timing data,
//! so it is identical regardless of concurrency or resumption.

mod oracle;
mod records;
mod synth;

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;
use std::thread;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{self, CorpusError, DatasetManifest, FilterOptions, FilterReport, Sample};
use crate::embedstore::{self, CoverageReport, LoadMode, StoreError};
use crate::evalkit::{self, EvalError, MacroOver};
use crate::labelmap::{AliasError, Aliases, LabelParser, Outcome, ParsedLabel};
use crate::modelgw::{
    cache_key, sha256_hex, ChatModel, GenerationParams, HttpChatClient, MockModel, MockPolicy,
    ModelEndpoint, ModelError, ModelReply, ReplyCache,
};
use crate::promptkit::{build_transcript, DemoOrder, PromptError, PromptTemplate};
use crate::retriever::{self, RetrievalError, SimilarityMetric};
use crate::{EvalReport, Store};

pub use oracle::oracle_1nn;
pub use records::{read_predictions, PredictionRecord, RetrievalLine};
pub use synth::{
    class_label, generate_synthetic, write_synthetic, SynthPaths, PLACEHOLDER_PNG, SYNTH_ENCODER,
};

pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TXT: &str = "report.txt";
pub const RUN_META: &str = "run_meta.json";
/// Overrides the reply cache location.
pub const CACHE_DIR_ENV: &str = "RAICL_CACHE_DIR";
/// Share of failed samples above which a run is flagged degraded.
pub const DEGRADED_ERROR_RATE: f64 = 0.10;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Alias(#[from] AliasError),
    #[error("invalid run configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

fn default_metric() -> SimilarityMetric {
    SimilarityMetric::Cosine
}
fn default_k() -> usize {
    1
}
fn default_concurrency() -> usize {
    4
}
fn default_true() -> bool {
    true
}

/// Experiment configuration. Relative paths in a config file are resolved
/// against the file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub manifest_path: PathBuf,
    pub embeddings_path: PathBuf,
    pub output_dir: PathBuf,
    #[serde(default = "default_metric")]
    pub metric: SimilarityMetric,
    #[serde(default = "default_k")]
    pub k_shot: usize,
    #[serde(default)]
    pub demo_order: DemoOrder,
    #[serde(default)]
    pub template: PromptTemplate,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<ModelEndpoint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mock: Option<MockPolicy>,
    #[serde(default)]
    pub params: GenerationParams,
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    #[serde(default = "default_true")]
    pub cache_enabled: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub macro_over: MacroOver,
    #[serde(default)]
    pub strict_exact: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aliases_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected_encoder: Option<String>,
    /// Keep stored vectors as-is instead of normalizing them.
    #[serde(default)]
    pub raw_embeddings: bool,
    /// Skip samples without an embedding instead of failing.
    #[serde(default)]
    pub allow_missing: bool,
    /// Drop samples whose image files do not exist before running.
    #[serde(default)]
    pub check_files: bool,
    /// Stop after this many new predictions (the run can be resumed later).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limit: Option<usize>,
}

impl RunConfig {
    /// A mock-free config with defaults; set `endpoint` or `mock` before use.
    pub fn new(
        manifest_path: impl Into<PathBuf>,
        embeddings_path: impl Into<PathBuf>,
        output_dir: impl Into<PathBuf>,
    ) -> Self {
        Self {
            manifest_path: manifest_path.into(),
            embeddings_path: embeddings_path.into(),
            output_dir: output_dir.into(),
            metric: default_metric(),
            k_shot: default_k(),
            demo_order: DemoOrder::default(),
            template: PromptTemplate::default(),
            endpoint: None,
            mock: None,
            params: GenerationParams::default(),
            concurrency: default_concurrency(),
            cache_enabled: true,
            cache_dir: None,
            seed: 0,
            macro_over: MacroOver::default(),
            strict_exact: false,
            aliases_path: None,
            expected_encoder: None,
            raw_embeddings: false,
            allow_missing: false,
            check_files: false,
            limit: None,
        }
    }

    pub fn from_json(json: &str, base_dir: &Path) -> Result<Self, RunError> {
        let mut cfg: RunConfig = serde_json::from_str(json).map_err(|e| RunError::Format {
            path: base_dir.to_path_buf(),
            message: format!("line {}: {e}", e.line()),
        })?;
        for p in [
            &mut cfg.manifest_path,
            &mut cfg.embeddings_path,
            &mut cfg.output_dir,
        ] {
            *p = base_dir.join(&*p);
        }
        for p in [cfg.cache_dir.as_mut(), cfg.aliases_path.as_mut()]
            .into_iter()
            .flatten()
        {
            *p = base_dir.join(&*p);
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, RunError> {
        let path = path.as_ref();
        let json = fs::read_to_string(path).map_err(|source| RunError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::from_json(&json, base).map_err(|e| match e {
            RunError::Format { message, .. } => RunError::Format {
                path: path.to_path_buf(),
                message,
            },
            other => other,
        })
    }

    /// Checks everything that can be checked without touching data files.
    pub fn validate(&self) -> Result<(), RunError> {
        match (&self.endpoint, &self.mock) {
            (Some(_), Some(_)) => {
                return Err(RunError::Config(
                    "configure either endpoint or mock, not both".into(),
                ))
            }
            (None, None) => {
                return Err(RunError::Config(
                    "configure an endpoint or a mock policy".into(),
                ))
            }
            (Some(endpoint), None) => endpoint.validate()?,
            (None, Some(policy)) => {
                if self.k_shot == 0 && !matches!(policy, MockPolicy::FixedReply(_)) {
                    return Err(RunError::Config(format!(
                        "mock policy {policy:?} needs k_shot >= 1"
                    )));
                }
            }
        }
        if self.concurrency == 0 {
            return Err(RunError::Config("concurrency must be positive".into()));
        }
        self.template.validate()?;
        self.params.validate()?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        sha256_hex(
            serde_json::to_string(self)
                .expect("config serializes")
                .as_bytes(),
        )
    }

    fn cache_location(&self) -> PathBuf {
        std::env::var_os(CACHE_DIR_ENV)
            .map(PathBuf::from)
            .or_else(|| self.cache_dir.clone())
            .unwrap_or_else(|| self.output_dir.join("cache"))
    }
}

/// Loaded, filtered and cross-validated inputs of a run.
#[derive(Debug, Clone)]
pub struct Prepared {
    /// Filtered manifest restricted to samples that have an embedding.
    pub manifest: DatasetManifest,
    pub filter: FilterReport,
    pub coverage: CoverageReport,
    /// Store restricted to the manifest's samples.
    pub store: Store,
    pub parser: LabelParser,
}

impl Prepared {
    pub fn sample(&self, id: &str) -> Option<&Sample> {
        self.manifest.get(id)
    }
}

/// Loads and validates the data a config points at. No model is contacted.
pub fn prepare(config: &RunConfig) -> Result<Prepared, RunError> {
    config.validate()?;
    let raw = corpus::load_manifest(&config.manifest_path)?;
    raw.validate_labels()?;
    let (filtered, filter) = corpus::filter_complete_with(
        &raw,
        FilterOptions {
            check_files: config.check_files,
        },
    );
    let mode = if config.raw_embeddings {
        LoadMode::Raw
    } else {
        LoadMode::Normalize
    };
    let store: Store = embedstore::load_store(
        &config.embeddings_path,
        config.expected_encoder.as_deref(),
        mode,
    )?;
    let coverage = embedstore::validate_against(&store, &filtered);
    if !coverage.is_complete() {
        if !config.allow_missing {
            let shown: Vec<&str> = coverage
                .missing_from_store
                .iter()
                .take(5)
                .map(String::as_str)
                .collect();
            return Err(RunError::Config(format!(
                "{} of {} samples have no embedding (e.g. {}); pass allow_missing to skip them",
                coverage.missing_from_store.len(),
                coverage.manifest_size,
                shown.join(", ")
            )));
        }
        tracing::warn!(
            "skipping {} samples without embeddings",
            coverage.missing_from_store.len()
        );
    }
    let manifest = DatasetManifest {
        samples: filtered
            .samples
            .into_iter()
            .filter(|s| store.contains(&s.id))
            .collect(),
        ..filtered
    };
    let store = store.subset(manifest.samples.iter().map(|s| s.id.as_str()));
    if manifest.is_empty() {
        return Err(RunError::Config("no samples left after filtering".into()));
    }
    if config.k_shot + 1 > manifest.len() {
        return Err(RunError::Config(format!(
            "k_shot {} needs at least {} samples, dataset has {}",
            config.k_shot,
            config.k_shot + 1,
            manifest.len()
        )));
    }
    let aliases = config
        .aliases_path
        .as_ref()
        .map(|p| Aliases::load(p, &manifest.label_set))
        .transpose()?;
    let parser =
        LabelParser::new(&manifest.label_set, aliases.as_ref()).strict(config.strict_exact);
    Ok(Prepared {
        manifest,
        filter,
        coverage,
        store,
        parser,
    })
}

/// Final report of a run: the evaluation plus run-level bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub dataset: String,
    pub metric: SimilarityMetric,
    pub k_shot: usize,
    #[serde(flatten)]
    pub eval: EvalReport,
    pub n_errors: usize,
    pub degraded: bool,
    pub n_skipped_uncovered: usize,
}

impl RunReport {
    pub fn to_table(&self) -> String {
        let mut out = self
            .eval
            .to_table(&format!("{} k={}", self.metric, self.k_shot));
        if self.n_errors > 0 {
            out.push_str(&format!(
                "errors = {}{}\n",
                self.n_errors,
                if self.degraded { " (DEGRADED)" } else { "" }
            ));
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: RunReport,
    /// The evaluation before rounding.
    pub eval: EvalReport,
    pub new_records: usize,
    pub reused_records: usize,
    /// True when `limit` stopped the run before every sample had a record.
    pub incomplete: bool,
}

#[derive(Serialize)]
struct RunMeta<'a> {
    config_digest: String,
    engine_version: &'static str,
    started_unix: u64,
    finished_unix: u64,
    model: String,
    concurrency: usize,
    cache: Option<String>,
    new_records: usize,
    reused_records: usize,
    config: &'a RunConfig,
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Builds the model a config asks for.
pub fn build_model(config: &RunConfig) -> Result<Box<dyn ChatModel>, RunError> {
    match (&config.endpoint, &config.mock) {
        (Some(endpoint), None) => Ok(Box::new(HttpChatClient::new(
            endpoint.clone(),
            config.params.clone(),
        )?)),
        (None, Some(policy)) => Ok(Box::new(MockModel::new(policy.clone()))),
        _ => Err(RunError::Config(
            "configure exactly one of endpoint or mock".into(),
        )),
    }
}

pub fn run_experiment(config: &RunConfig) -> Result<RunOutcome, RunError> {
    config.validate()?;
    let model = build_model(config)?;
    run_with_model(config, model.as_ref())
}

struct Worker<'a> {
    config: &'a RunConfig,
    prepared: &'a Prepared,
    model: &'a dyn ChatModel,
    cache: Option<ReplyCache>,
    model_name: String,
}

impl Worker<'_> {
    fn reply(&self, transcript: &crate::ChatTranscript) -> Result<ModelReply, ModelError> {
        let Some(cache) = &self.cache else {
            return self.model.complete(transcript);
        };
        let key = cache_key(&self.model_name, &self.config.params, transcript)?;
        if let Some(hit) = cache.lookup(&key) {
            return Ok(hit);
        }
        let reply = self.model.complete(transcript)?;
        cache.store(&key, &reply);
        Ok(reply)
    }

    fn process(&self, query: &Sample) -> Result<PredictionRecord, RunError> {
        let gold = query
            .label()
            .expect("filtered samples carry one label")
            .to_owned();
        let retrieval = retriever::retrieve(
            &self.prepared.store,
            &query.id,
            self.config.k_shot,
            self.config.metric,
        )?;
        let neighbors = retrieval.neighbors.clone();
        let demos: Vec<&Sample> = self
            .config
            .demo_order
            .arrange(retrieval.neighbors)
            .iter()
            .map(|n| {
                self.prepared
                    .sample(&n.sample_id)
                    .expect("store is a subset of the manifest")
            })
            .collect();
        let mut record = PredictionRecord {
            sample_id: query.id.clone(),
            gold,
            neighbors,
            raw_reply: String::new(),
            parsed: ParsedLabel::unparsed(),
            correct: false,
            latency_ms: 0,
            from_cache: false,
            error: None,
        };
        let outcome = build_transcript(
            query,
            &demos,
            &self.config.template,
            &self.prepared.manifest.label_set,
        )
        .map_err(|e| format!("prompt: {e}"))
        .and_then(|t| {
            self.reply(&t).map_err(|e| {
                let e = e.for_sample(&query.id);
                format!("{}: {e}", e.tag())
            })
        });
        match outcome {
            Ok(reply) => {
                record.parsed = self.prepared.parser.parse(&reply.raw_text);
                record.correct = record.parsed.outcome == Outcome::Canonical(record.gold.clone());
                record.raw_reply = reply.raw_text;
                record.latency_ms = reply.latency_ms;
                record.from_cache = reply.from_cache;
            }
            Err(message) => {
                tracing::warn!("sample {}: {message}", query.id);
                record.error = Some(message);
            }
        }
        Ok(record)
    }
}

/// Runs an experiment against an already constructed model.
pub fn run_with_model(config: &RunConfig, model: &dyn ChatModel) -> Result<RunOutcome, RunError> {
    let started = unix_now();
    let prepared = prepare(config)?;
    let out_dir = &config.output_dir;
    fs::create_dir_all(out_dir).map_err(|source| RunError::Io {
        path: out_dir.clone(),
        source,
    })?;
    let pred_path = out_dir.join(PREDICTIONS_FILE);

    let existing: HashMap<String, PredictionRecord> = read_predictions(&pred_path)?
        .into_iter()
        .filter(|r| prepared.manifest.get(&r.sample_id).is_some())
        .fold(HashMap::new(), |mut acc, r| {
            acc.entry(r.sample_id.clone()).or_insert(r);
            acc
        });
    let mut pending: Vec<&Sample> = prepared
        .manifest
        .samples
        .iter()
        .filter(|s| !existing.contains_key(&s.id))
        .collect();
    if let Some(limit) = config.limit {
        pending.truncate(limit);
    }

    let cache = (config.cache_enabled && model.cacheable())
        .then(|| ReplyCache::open(config.cache_location()));
    let model_name = match (&config.endpoint, &config.mock) {
        (Some(e), _) => e.model_name.clone(),
        (_, Some(p)) => format!("mock:{p:?}"),
        _ => "unknown".into(),
    };
    let worker = Worker {
        config,
        prepared: &prepared,
        model,
        cache: cache.filter(ReplyCache::is_enabled),
        model_name: model_name.clone(),
    };

    let mut writer = records::Appender::open(&pred_path)?;
    let next = AtomicUsize::new(0);
    let mut fresh: Vec<PredictionRecord> = Vec::with_capacity(pending.len());
    let n_workers = config.concurrency.min(pending.len()).max(1);
    thread::scope(|scope| -> Result<(), RunError> {
        let (tx, rx) = mpsc::channel::<Result<PredictionRecord, RunError>>();
        for _ in 0..n_workers {
            let tx = tx.clone();
            let (worker, pending, next) = (&worker, &pending, &next);
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(sample) = pending.get(i) else { break };
                if tx.send(worker.process(sample)).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        for result in rx {
            let record = match result {
                Ok(r) => r,
                Err(e) => {
                    // stop handing out work, then report the first failure
                    next.store(usize::MAX / 2, Ordering::Relaxed);
                    return Err(e);
                }
            };
            writer.append(&record)?;
            fresh.push(record);
        }
        Ok(())
    })?;

    let new_records = fresh.len();
    let reused_records = existing.len();
    let mut by_id = existing;
    for r in fresh {
        by_id.entry(r.sample_id.clone()).or_insert(r);
    }
    let ordered: Vec<&PredictionRecord> = prepared
        .manifest
        .samples
        .iter()
        .filter_map(|s| by_id.get(&s.id))
        .collect();
    let incomplete = ordered.len() < prepared.manifest.len();
    let (report, eval) = build_report(config, &prepared, &ordered)?;

    write_file(
        &out_dir.join(REPORT_JSON),
        &(serde_json::to_string_pretty(&report).expect("report serializes") + "\n"),
    )?;
    write_file(&out_dir.join(REPORT_TXT), &report.to_table())?;
    let meta = RunMeta {
        config_digest: config.digest(),
        engine_version: env!("CARGO_PKG_VERSION"),
        started_unix: started,
        finished_unix: unix_now(),
        model: model_name,
        concurrency: config.concurrency,
        cache: worker
            .cache
            .as_ref()
            .map(|_| config.cache_location().display().to_string()),
        new_records,
        reused_records,
        config,
    };
    write_file(
        &out_dir.join(RUN_META),
        &serde_json::to_string_pretty(&meta).expect("meta serializes"),
    )?;

    Ok(RunOutcome {
        report,
        eval,
        new_records,
        reused_records,
        incomplete,
    })
}

fn build_report(
    config: &RunConfig,
    prepared: &Prepared,
    records: &[&PredictionRecord],
) -> Result<(RunReport, EvalReport), RunError> {
    let pairs: Vec<(&str, ParsedLabel)> = records
        .iter()
        .map(|r| (r.gold.as_str(), r.parsed.clone()))
        .collect();
    let eval: evalkit::EvalReport<f64> =
        evalkit::evaluate(&pairs, &prepared.manifest.label_set, config.macro_over)?;
    let n_errors = records.iter().filter(|r| r.error.is_some()).count();
    let report = RunReport {
        dataset: prepared.manifest.name.clone(),
        metric: config.metric,
        k_shot: config.k_shot,
        eval: eval.rounded(4),
        n_errors,
        degraded: n_errors as f64 > DEGRADED_ERROR_RATE * records.len() as f64,
        n_skipped_uncovered: prepared.coverage.missing_from_store.len(),
    };
    Ok((report, eval))
}

fn write_file(path: &Path, contents: &str) -> Result<(), RunError> {
    fs::write(path, contents).map_err(|source| RunError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Leave-one-out retrieval for one sample (or all), as emitted by the
/// `retrieve` command.
pub fn retrieval_lines(
    config: &RunConfig,
    query_id: Option<&str>,
) -> Result<Vec<RetrievalLine>, RunError> {
    let prepared = prepare(config)?;
    let ids: Vec<&str> = match query_id {
        Some(id) => vec![id],
        None => prepared
            .manifest
            .samples
            .iter()
            .map(|s| s.id.as_str())
            .collect(),
    };
    ids.into_iter()
        .map(|id| {
            let r = retriever::retrieve(&prepared.store, id, config.k_shot, config.metric)?;
            Ok(RetrievalLine {
                query_id: id.to_owned(),
                metric: config.metric,
                k: config.k_shot,
                warning: r.warning(),
                neighbors: r.neighbors,
            })
        })
        .collect()
}

/// Scores a predictions file against a manifest. Gold labels come from the
/// manifest; records for unknown sample ids are an error.
pub fn evaluate_predictions(
    predictions: &Path,
    manifest_path: &Path,
    macro_over: MacroOver,
) -> Result<EvalReport, RunError> {
    let manifest = corpus::load_manifest(manifest_path)?;
    let records = read_predictions(predictions)?;
    let mut pairs = Vec::with_capacity(records.len());
    for r in records {
        let sample = manifest.get(&r.sample_id).ok_or_else(|| RunError::Format {
            path: predictions.to_path_buf(),
            message: format!("sample {:?} is not in the manifest", r.sample_id),
        })?;
        let gold = sample.label().ok_or_else(|| RunError::Format {
            path: manifest_path.to_path_buf(),
            message: format!("sample {:?} does not have exactly one label", r.sample_id),
        })?;
        pairs.push((gold.to_owned(), r.parsed));
    }
    Ok(evalkit::evaluate::<f64, _>(&pairs, &manifest.label_set, macro_over)?.rounded(4))
}

pub fn read_report(run_dir: &Path) -> Result<RunReport, RunError> {
    let path = run_dir.join(REPORT_JSON);
    let text = fs::read_to_string(&path).map_err(|source| RunError::Io {
        path: path.clone(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| RunError::Format {
        path,
        message: e.to_string(),
    })
}
