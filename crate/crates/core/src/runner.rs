//! Experiments over a corpus: detection scores, episodes under each policy,
//! persisted artifacts, metrics, sweeps and reports.
//!
//! A run directory holds
//!
//! | file | contents |
//! |---|---|
//! | `config.json` | configuration snapshot, sampler name, prompt hash |
//! | `detection.jsonl` | one ambiguity score per detection item |
//! | `transcripts.jsonl` | one dialogue per successful episode |
//! | `records.jsonl` | one [`EvalRecord`] plus usage per successful episode |
//! | `failures.jsonl` | failed detections and episodes, with partial transcripts |
//! | `metrics.json` | aggregated [`RunMetrics`] |
//!
//! Lines are appended as work completes, so an interrupted run resumes where
//! it stopped. Once every job is done the files are rewritten in a canonical
//! order, which makes runs with a scripted backend byte-identical.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::fs::{self, File, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{mpsc, Arc};
use std::time::{Duration, Instant};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tracing::{info, warn};

use crate::classifier::{ambiguity_score, decide, AmbiguityScore, ClassifierConfig, Decision};
use crate::corpus::{
    capabilities, items_from_labeled, items_from_pairs, load_claqua, load_clariq, load_pairs, subsample, Capability,
    ClaquaVariant, CorpusError, EvalItem, SAMPLER,
};
use crate::lm::{
    CompletionRequest, LanguageModel, LmError, Metered, OpenAiCompletions, ScriptedBackend, Usage, DEFAULT_API_BASE,
};
use crate::metrics::{
    aggregate, auroc, contains_accuracy, lambda_sweep_csv, EvalRecord, LambdaRow, MetricsConfig, MetricsError,
    MetricsReport, RoutingCounts,
};
use crate::oracle::{ClarificationSource, Oracle};
use crate::pipeline::{run_episode, DialogueTranscript, EpisodeInput, PipelineConfig, Policy};
use crate::prompts::{prompt_version, DatasetKind};

pub const DEFAULT_DETECT_SAMPLE: usize = 400;
pub const DEFAULT_QA_SAMPLE: usize = 100;
pub const DEFAULT_LAMBDAS: [f64; 6] = [0.5, 0.6, 0.7, 0.8, 0.9, 1.0];
/// Environment variable naming the remote model when none is given.
pub const MODEL_ENV: &str = "CLAM_MODEL";
pub const DEFAULT_MODEL: &str = "gpt-3.5-turbo-instruct";

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("invalid run configuration: {0}")]
    Config(String),
    #[error("{dataset} data cannot be used for the {capability:?} step")]
    Unsupported {
        dataset: DatasetKind,
        capability: Capability,
    },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Backend(#[from] LmError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}, line {line}: {message}")]
    Artifact {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackendSpec {
    /// Rule table in the scripted-backend JSON format.
    Scripted { path: PathBuf },
    /// OpenAI-compatible completions endpoint. The key always comes from
    /// `CLAM_API_KEY`; the endpoint from `base_url`, then `CLAM_API_BASE`.
    Openai {
        #[serde(default)]
        model: Option<String>,
        #[serde(default)]
        base_url: Option<String>,
    },
}

impl BackendSpec {
    pub fn build(&self) -> Result<Arc<dyn LanguageModel>, LmError> {
        match self {
            BackendSpec::Scripted { path } => Ok(Arc::new(ScriptedBackend::from_json_file(path)?)),
            BackendSpec::Openai { model, base_url } => {
                let model = model
                    .clone()
                    .or_else(|| std::env::var(MODEL_ENV).ok())
                    .unwrap_or_else(|| DEFAULT_MODEL.to_string());
                let backend = match base_url {
                    Some(base) => {
                        let key = std::env::var(crate::lm::API_KEY_ENV).unwrap_or_default();
                        OpenAiCompletions::new(base.clone(), key, model)?
                    }
                    None => OpenAiCompletions::from_env(model)?,
                };
                Ok(Arc::new(backend))
            }
        }
    }

    fn resolve(&mut self, base: &Path) {
        if let BackendSpec::Scripted { path } = self {
            *path = base.join(&*path);
        }
    }
}

/// `scripted:<path>`, `openai` or `openai:<model>`.
impl FromStr for BackendSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.split_once(':') {
            Some(("scripted", path)) if !path.is_empty() => Ok(BackendSpec::Scripted { path: path.into() }),
            Some(("openai", model)) if !model.is_empty() => Ok(BackendSpec::Openai {
                model: Some(model.into()),
                base_url: None,
            }),
            None if s == "openai" => Ok(BackendSpec::Openai {
                model: None,
                base_url: None,
            }),
            _ => Err(format!(
                "unrecognised backend {s:?}; expected scripted:<path>, openai or openai:<model>"
            )),
        }
    }
}

impl std::fmt::Display for BackendSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BackendSpec::Scripted { path } => write!(f, "scripted:{}", path.display()),
            BackendSpec::Openai { model, base_url } => {
                write!(f, "openai:{}", model.as_deref().unwrap_or(DEFAULT_MODEL))?;
                write!(f, "@{}", base_url.as_deref().unwrap_or(DEFAULT_API_BASE))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub path: PathBuf,
    pub kind: DatasetKind,
}

impl DatasetSpec {
    pub fn load_items(&self) -> Result<Vec<EvalItem>, CorpusError> {
        Ok(match self.kind {
            DatasetKind::AmbigTrivia => items_from_pairs(&load_pairs(&self.path)?),
            DatasetKind::ClariQ => items_from_labeled(&load_clariq(&self.path)?),
            DatasetKind::ClaquaSingle => items_from_labeled(&load_claqua(&self.path, ClaquaVariant::Single)?),
            DatasetKind::ClaquaMulti => items_from_labeled(&load_claqua(&self.path, ClaquaVariant::Multi)?),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Step {
    /// Score every sampled question for ambiguity.
    Detect,
    /// Run question-answering episodes under each policy.
    Qa,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationConfig {
    pub max_tokens: u32,
    pub temperature: f64,
    pub stop: Vec<String>,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        let p = PipelineConfig::default();
        Self {
            max_tokens: p.max_tokens,
            temperature: p.temperature,
            stop: p.stop,
        }
    }
}

fn default_policies() -> Vec<Policy> {
    Policy::ALL.to_vec()
}

fn default_steps() -> Vec<Step> {
    vec![Step::Detect, Step::Qa]
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs/latest")
}

fn default_workers() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    pub backend: BackendSpec,
    #[serde(default = "default_policies")]
    pub policies: Vec<Policy>,
    #[serde(default = "default_steps")]
    pub steps: Vec<Step>,
    #[serde(default)]
    pub classifier: ClassifierConfig,
    #[serde(default)]
    pub generation: GenerationConfig,
    #[serde(default)]
    pub metrics: MetricsConfig,
    /// Questions scored in the detection step; all of them, up to 400, if unset.
    #[serde(default)]
    pub detect_sample: Option<usize>,
    /// Questions used for episodes; all of them, up to 100, if unset.
    #[serde(default)]
    pub qa_sample: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default)]
    pub record_timestamps: bool,
}

impl RunConfig {
    pub fn new(dataset: DatasetSpec, backend: BackendSpec, out_dir: impl Into<PathBuf>) -> Self {
        Self {
            dataset,
            backend,
            policies: default_policies(),
            steps: default_steps(),
            classifier: ClassifierConfig::default(),
            generation: GenerationConfig::default(),
            metrics: MetricsConfig::default(),
            detect_sample: None,
            qa_sample: None,
            seed: 0,
            out_dir: out_dir.into(),
            workers: default_workers(),
            record_timestamps: false,
        }
    }

    /// Reads a JSON or TOML config (by extension, JSON otherwise). Relative
    /// dataset, backend and output paths are taken relative to the file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, RunError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let mut config: RunConfig = if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).map_err(|e| RunError::Config(e.to_string()))?
        } else {
            serde_json::from_str(&text).map_err(|e| RunError::Config(e.to_string()))?
        };
        let base = path.parent().unwrap_or(Path::new(""));
        config.dataset.path = base.join(&config.dataset.path);
        config.backend.resolve(base);
        config.out_dir = base.join(&config.out_dir);
        Ok(config)
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            classifier: self.classifier.clone(),
            max_tokens: self.generation.max_tokens,
            temperature: self.generation.temperature,
            stop: self.generation.stop.clone(),
            record_timestamps: self.record_timestamps,
        }
    }

    pub fn validate(&self) -> Result<(), RunError> {
        let bad = |m: &str| Err(RunError::Config(m.to_string()));
        if self.policies.is_empty() && self.steps.contains(&Step::Qa) {
            return bad("policies is empty");
        }
        if self.policies.iter().collect::<HashSet<_>>().len() != self.policies.len() {
            return bad("policies contains duplicates");
        }
        if self.steps.is_empty() {
            return bad("steps is empty");
        }
        if self.workers == 0 {
            return bad("workers must be at least 1");
        }
        self.classifier
            .validate()
            .map_err(|e| RunError::Config(e.to_string()))?;
        self.metrics.validate()?;
        CompletionRequest::new("x")
            .max_tokens(self.generation.max_tokens)
            .temperature(self.generation.temperature)
            .stop(self.generation.stop.iter().cloned())
            .validate()
            .map_err(|e| RunError::Config(e.to_string()))?;
        Ok(())
    }

    fn needed_capabilities(&self) -> Vec<Capability> {
        let mut caps = Vec::new();
        if self.steps.contains(&Step::Detect) {
            caps.push(Capability::Detect);
        }
        if self.steps.contains(&Step::Qa) {
            caps.push(Capability::FinalAccuracyAmbiguous);
            if self.policies.iter().any(|p| *p != Policy::DefaultGpt) {
                caps.push(Capability::Clarify);
            }
        }
        caps
    }

    /// Everything that defines the results, without machine-local settings.
    fn snapshot(&self) -> serde_json::Value {
        let mut config = serde_json::to_value(self).expect("config serializes");
        if let Some(map) = config.as_object_mut() {
            map.remove("out_dir");
            map.remove("workers");
            if let Some(ds) = map.get_mut("dataset").and_then(|d| d.as_object_mut()) {
                let name = self.dataset.path.file_name().map(|n| n.to_string_lossy().into_owned());
                ds.insert("path".into(), name.into());
            }
            if let BackendSpec::Scripted { path } = &self.backend {
                let name = path.file_name().map(|n| n.to_string_lossy().into_owned());
                map.insert("backend".into(), serde_json::json!({"type": "scripted", "path": name}));
            }
        }
        serde_json::json!({
            "config": config,
            "sampler": SAMPLER,
            "prompt_version": prompt_version(),
        })
    }
}

/// The questions a configuration will touch, decided before any model call.
#[derive(Debug, Clone)]
pub struct Plan {
    pub detect_items: Vec<EvalItem>,
    pub qa_items: Vec<EvalItem>,
}

fn sample_size(requested: Option<usize>, default: usize, available: usize, what: &str) -> Result<usize, RunError> {
    match requested {
        None => Ok(default.min(available)),
        Some(n) if n <= available => Ok(n),
        Some(n) => Err(RunError::Config(format!(
            "{what} sample of {n} exceeds the {available} available questions"
        ))),
    }
}

pub fn plan(config: &RunConfig) -> Result<Plan, RunError> {
    config.validate()?;
    let caps = capabilities(config.dataset.kind);
    if let Some(&capability) = config.needed_capabilities().iter().find(|c| !caps.supports(**c)) {
        return Err(RunError::Unsupported {
            dataset: config.dataset.kind,
            capability,
        });
    }
    let items = config.dataset.load_items()?;

    let detect_items = if config.steps.contains(&Step::Detect) {
        let n = sample_size(config.detect_sample, DEFAULT_DETECT_SAMPLE, items.len(), "detection")?;
        subsample(&items, n, config.seed)?
    } else {
        Vec::new()
    };

    let qa_items = if config.steps.contains(&Step::Qa) {
        let pool: Vec<EvalItem> = items
            .iter()
            .filter(|i| i.true_ambiguous || caps.final_accuracy_unambiguous)
            .cloned()
            .collect();
        let n = sample_size(config.qa_sample, DEFAULT_QA_SAMPLE, pool.len(), "question-answering")?;
        let chosen = subsample(&pool, n, config.seed)?;
        let clarifies = config.policies.iter().any(|p| *p != Policy::DefaultGpt);
        if let Some(item) = chosen.iter().find(|i| i.answers.is_empty()) {
            return Err(RunError::Config(format!(
                "question {} has no reference answers",
                item.id
            )));
        }
        if let Some(item) = chosen.iter().find(|i| clarifies && i.intended.is_none()) {
            return Err(RunError::Config(format!(
                "question {} has no privileged text for the oracle",
                item.id
            )));
        }
        chosen
    } else {
        Vec::new()
    };
    Ok(Plan { detect_items, qa_items })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub question_id: String,
    pub true_ambiguous: bool,
    pub logprob_true: f64,
    pub matched_variant: String,
    pub usage: Usage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordLine {
    #[serde(flatten)]
    pub record: EvalRecord,
    pub usage: Usage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Detect,
    Episode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub stage: Stage,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy: Option<Policy>,
    pub question_id: String,
    pub error: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partial: Option<Box<DialogueTranscript>>,
    pub usage: Usage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub dataset: DatasetKind,
    pub scored: u64,
    pub excluded: u64,
    pub tau: f64,
    pub auroc: Option<f64>,
    /// `asked` means the score exceeded τ.
    pub routing: RoutingCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyMetrics {
    pub policy: Policy,
    pub report: Option<MetricsReport>,
    pub excluded: u64,
    pub usage: Usage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub dataset: DatasetKind,
    pub detection: Option<DetectionReport>,
    pub policies: Vec<PolicyMetrics>,
    pub usage: Usage,
}

impl RunMetrics {
    pub fn policy(&self, policy: Policy) -> Option<&PolicyMetrics> {
        self.policies.iter().find(|p| p.policy == policy)
    }
}

#[derive(Debug, Clone)]
pub struct EvalRun {
    pub snapshot: serde_json::Value,
    pub detection: Vec<DetectionRecord>,
    pub transcripts: Vec<DialogueTranscript>,
    pub records: Vec<EvalRecord>,
    pub failures: Vec<FailureRecord>,
    pub metrics: RunMetrics,
    pub wall_clock: Duration,
}

impl EvalRun {
    pub fn records_for(&self, policy: Policy) -> Vec<EvalRecord> {
        self.records.iter().filter(|r| r.policy == policy).cloned().collect()
    }
}

pub const CONFIG_FILE: &str = "config.json";
pub const DETECTION_FILE: &str = "detection.jsonl";
pub const TRANSCRIPTS_FILE: &str = "transcripts.jsonl";
pub const RECORDS_FILE: &str = "records.jsonl";
pub const FAILURES_FILE: &str = "failures.jsonl";
pub const METRICS_FILE: &str = "metrics.json";

/// Parses JSONL. A final line without its newline is treated as an
/// interrupted write and ignored; any other bad line is an error.
fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, RunError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let complete = text.ends_with('\n');
    let lines: Vec<&str> = text.lines().collect();
    let mut out = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(v) => out.push(v),
            Err(_) if i + 1 == lines.len() && !complete => {
                warn!(path = %path.display(), "ignoring truncated final line");
            }
            Err(e) => {
                return Err(RunError::Artifact {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: e.to_string(),
                })
            }
        }
    }
    Ok(out)
}

fn jsonl<T: Serialize>(items: &[T]) -> String {
    items
        .iter()
        .map(|i| serde_json::to_string(i).expect("artifact serializes") + "\n")
        .collect()
}

fn write_atomic(path: &Path, contents: &str) -> Result<(), RunError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

struct Appender {
    path: PathBuf,
    file: File,
}

impl Appender {
    fn open(path: PathBuf) -> Result<Self, RunError> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(io_err(&path))?;
        Ok(Self { path, file })
    }

    fn append<T: Serialize>(&mut self, item: &T) -> Result<(), RunError> {
        let line = serde_json::to_string(item).expect("artifact serializes") + "\n";
        self.file.write_all(line.as_bytes()).map_err(io_err(&self.path))
    }
}

/// Runs `work` over `jobs` on a bounded pool; results reach `sink` on the
/// calling thread one at a time. The first sink error stops the pool.
fn execute<J, O, W, S>(jobs: &[J], workers: usize, work: W, mut sink: S) -> Result<(), RunError>
where
    J: Sync,
    O: Send,
    W: Fn(&J) -> O + Sync,
    S: FnMut(O) -> Result<(), RunError>,
{
    if jobs.is_empty() {
        return Ok(());
    }
    let next = AtomicUsize::new(0);
    let stop = AtomicBool::new(false);
    let (tx, rx) = mpsc::channel();
    std::thread::scope(|scope| {
        for _ in 0..workers.clamp(1, jobs.len()) {
            let tx = tx.clone();
            let (next, stop, work) = (&next, &stop, &work);
            scope.spawn(move || {
                while !stop.load(Ordering::Relaxed) {
                    let Some(job) = jobs.get(next.fetch_add(1, Ordering::Relaxed)) else {
                        break;
                    };
                    if tx.send(work(job)).is_err() {
                        break;
                    }
                }
            });
        }
        drop(tx);
        let mut result = Ok(());
        for out in rx {
            if result.is_ok() {
                if let Err(e) = sink(out) {
                    stop.store(true, Ordering::Relaxed);
                    result = Err(e);
                }
            }
        }
        result
    })
}

fn detect_one(
    item: &EvalItem,
    backend: &dyn LanguageModel,
    classifier: &ClassifierConfig,
) -> Result<DetectionRecord, FailureRecord> {
    let metered = Metered::new(backend);
    let result = ambiguity_score(
        &item.id,
        &item.question,
        item.context.as_ref(),
        item.dataset,
        &metered,
        classifier,
    );
    match result {
        Ok(score) => Ok(DetectionRecord {
            question_id: item.id.clone(),
            true_ambiguous: item.true_ambiguous,
            logprob_true: score.logprob_true,
            matched_variant: score.matched_variant,
            usage: metered.usage(),
        }),
        Err(e) => Err(FailureRecord {
            stage: Stage::Detect,
            policy: None,
            question_id: item.id.clone(),
            error: e.to_string(),
            partial: None,
            usage: metered.usage(),
        }),
    }
}

type EpisodeOutcome = Result<(DialogueTranscript, RecordLine), FailureRecord>;

fn episode_one(
    item: &EvalItem,
    policy: Policy,
    backend: &dyn LanguageModel,
    pipeline: &PipelineConfig,
    metrics: &MetricsConfig,
    cached: Option<&AmbiguityScore>,
) -> EpisodeOutcome {
    let metered = Metered::new(backend);
    let fail = |error: String, partial, usage| FailureRecord {
        stage: Stage::Episode,
        policy: Some(policy),
        question_id: item.id.clone(),
        error,
        partial,
        usage,
    };
    let oracle = match (&item.intended, policy) {
        (_, Policy::DefaultGpt) | (None, _) => None,
        (Some(intended), _) => match Oracle::new(&metered, intended.clone(), item.answers.clone()) {
            Ok(o) => Some(o),
            Err(e) => return Err(fail(e.to_string(), None, metered.usage())),
        },
    };
    let mut input = EpisodeInput::new(&item.id, &item.question, item.dataset);
    input.context = item.context.clone();
    input.score = cached.cloned();
    let clarifier = oracle.as_ref().map(|o| o as &dyn ClarificationSource);
    match run_episode(&input, policy, &metered, clarifier, pipeline) {
        Ok(transcript) => {
            let record = EvalRecord {
                question_id: item.id.clone(),
                policy,
                true_ambiguous: item.true_ambiguous,
                score: transcript.ambiguity_score.as_ref().map(|s| s.logprob_true),
                asked_clarification: transcript.asked_clarification,
                correct: contains_accuracy(&transcript.final_answer, &item.answers, &metrics.normalization),
            };
            Ok((
                transcript,
                RecordLine {
                    record,
                    usage: metered.usage(),
                },
            ))
        }
        Err(e) => Err(fail(e.failure.to_string(), Some(e.partial), metered.usage())),
    }
}

fn score_cache(detection: &[DetectionRecord]) -> HashMap<String, AmbiguityScore> {
    detection
        .iter()
        .map(|d| {
            (
                d.question_id.clone(),
                AmbiguityScore {
                    logprob_true: d.logprob_true,
                    matched_variant: d.matched_variant.clone(),
                    question_id: d.question_id.clone(),
                },
            )
        })
        .collect()
}

pub fn run_experiment(config: &RunConfig) -> Result<EvalRun, RunError> {
    let backend = {
        // Plan first so unsupported configurations fail before a backend exists.
        let _ = plan(config)?;
        config.backend.build()?
    };
    run_experiment_with(config, backend.as_ref())
}

/// Like [`run_experiment`] with an explicit backend; `config.backend` is
/// only recorded.
pub fn run_experiment_with(config: &RunConfig, backend: &dyn LanguageModel) -> Result<EvalRun, RunError> {
    let started = Instant::now();
    let Plan { detect_items, qa_items } = plan(config)?;
    let dir = &config.out_dir;
    fs::create_dir_all(dir).map_err(io_err(dir))?;

    let snapshot = config.snapshot();
    let config_path = dir.join(CONFIG_FILE);
    if config_path.exists() {
        let text = fs::read_to_string(&config_path).map_err(io_err(&config_path))?;
        let existing: serde_json::Value = serde_json::from_str(&text).map_err(|e| RunError::Artifact {
            path: config_path.clone(),
            line: 1,
            message: e.to_string(),
        })?;
        if existing != snapshot {
            return Err(RunError::Config(format!(
                "{} holds a run with a different configuration",
                dir.display()
            )));
        }
    } else {
        write_atomic(
            &config_path,
            &(serde_json::to_string_pretty(&snapshot).expect("json") + "\n"),
        )?;
    }

    let paths = |name: &str| dir.join(name);
    let mut detection: Vec<DetectionRecord> = read_jsonl(&paths(DETECTION_FILE))?;
    let mut records: Vec<RecordLine> = read_jsonl(&paths(RECORDS_FILE))?;
    let mut transcripts: Vec<DialogueTranscript> = read_jsonl(&paths(TRANSCRIPTS_FILE))?;
    let mut failures: Vec<FailureRecord> = read_jsonl(&paths(FAILURES_FILE))?;

    // Only work whose record line made it to disk counts as done.
    let detect_ids: HashSet<&str> = detect_items.iter().map(|i| i.id.as_str()).collect();
    let qa_ids: HashSet<&str> = qa_items.iter().map(|i| i.id.as_str()).collect();
    detection.retain(|d| detect_ids.contains(d.question_id.as_str()));
    dedup_by_key(&mut detection, |d| d.question_id.clone());
    records.retain(|r| qa_ids.contains(r.record.question_id.as_str()) && config.policies.contains(&r.record.policy));
    dedup_by_key(&mut records, |r| (r.record.policy, r.record.question_id.clone()));
    let done: HashSet<(Policy, String)> = records
        .iter()
        .map(|r| (r.record.policy, r.record.question_id.clone()))
        .collect();
    transcripts.retain(|t| done.contains(&(t.policy, t.question_id.clone())));
    dedup_by_key(&mut transcripts, |t| (t.policy, t.question_id.clone()));
    if transcripts.len() != records.len() {
        let have: HashSet<(Policy, String)> = transcripts.iter().map(|t| (t.policy, t.question_id.clone())).collect();
        records.retain(|r| have.contains(&(r.record.policy, r.record.question_id.clone())));
    }
    failures.clear();
    write_atomic(&paths(DETECTION_FILE), &jsonl(&detection))?;
    write_atomic(&paths(RECORDS_FILE), &jsonl(&records))?;
    write_atomic(&paths(TRANSCRIPTS_FILE), &jsonl(&transcripts))?;
    write_atomic(&paths(FAILURES_FILE), "")?;

    let resumed = records.len() + detection.len();
    let mut failure_log = Appender::open(paths(FAILURES_FILE))?;

    let scored: HashSet<String> = detection.iter().map(|d| d.question_id.clone()).collect();
    let pending: Vec<&EvalItem> = detect_items.iter().filter(|i| !scored.contains(&i.id)).collect();
    info!(pending = pending.len(), resumed, "detection");
    {
        let mut log = Appender::open(paths(DETECTION_FILE))?;
        execute(
            &pending,
            config.workers,
            |item| detect_one(item, backend, &config.classifier),
            |outcome| match outcome {
                Ok(rec) => {
                    log.append(&rec)?;
                    detection.push(rec);
                    Ok(())
                }
                Err(fail) => {
                    failure_log.append(&fail)?;
                    failures.push(fail);
                    Ok(())
                }
            },
        )?;
    }

    let cache = score_cache(&detection);
    let jobs: Vec<(Policy, &EvalItem)> = config
        .policies
        .iter()
        .flat_map(|&p| qa_items.iter().map(move |i| (p, i)))
        .filter(|(p, i)| !done.contains(&(*p, i.id.clone())))
        .collect();
    info!(pending = jobs.len(), "episodes");
    let pipeline = config.pipeline();
    {
        let mut transcript_log = Appender::open(paths(TRANSCRIPTS_FILE))?;
        let mut record_log = Appender::open(paths(RECORDS_FILE))?;
        execute(
            &jobs,
            config.workers,
            |(policy, item)| {
                let cached = (*policy == Policy::Clam).then(|| cache.get(&item.id)).flatten();
                episode_one(item, *policy, backend, &pipeline, &config.metrics, cached)
            },
            |outcome| match outcome {
                Ok((transcript, record)) => {
                    transcript_log.append(&transcript)?;
                    record_log.append(&record)?;
                    transcripts.push(transcript);
                    records.push(record);
                    Ok(())
                }
                Err(fail) => {
                    failure_log.append(&fail)?;
                    failures.push(fail);
                    Ok(())
                }
            },
        )?;
    }

    // Canonical order: policies as configured, questions in corpus order.
    let detect_pos: HashMap<&str, usize> = detect_items
        .iter()
        .enumerate()
        .map(|(i, it)| (it.id.as_str(), i))
        .collect();
    let qa_pos: HashMap<&str, usize> = qa_items.iter().enumerate().map(|(i, it)| (it.id.as_str(), i)).collect();
    let policy_pos = |p: Policy| config.policies.iter().position(|x| *x == p).unwrap_or(usize::MAX);
    detection.sort_by_key(|d| detect_pos[d.question_id.as_str()]);
    records.sort_by_key(|r| (policy_pos(r.record.policy), qa_pos[r.record.question_id.as_str()]));
    transcripts.sort_by_key(|t| (policy_pos(t.policy), qa_pos[t.question_id.as_str()]));
    failures.sort_by_key(|f| {
        let pos = match f.stage {
            Stage::Detect => detect_pos.get(f.question_id.as_str()),
            Stage::Episode => qa_pos.get(f.question_id.as_str()),
        };
        (f.stage == Stage::Episode, f.policy.map(policy_pos), pos.copied())
    });
    write_atomic(&paths(DETECTION_FILE), &jsonl(&detection))?;
    write_atomic(&paths(TRANSCRIPTS_FILE), &jsonl(&transcripts))?;
    write_atomic(&paths(RECORDS_FILE), &jsonl(&records))?;
    write_atomic(&paths(FAILURES_FILE), &jsonl(&failures))?;

    let metrics = compute_metrics(config, &detection, &records, &failures)?;
    write_atomic(
        &paths(METRICS_FILE),
        &(serde_json::to_string_pretty(&metrics).expect("json") + "\n"),
    )?;

    let wall_clock = started.elapsed();
    info!(?wall_clock, requests = metrics.usage.requests, "run complete");
    Ok(EvalRun {
        snapshot,
        detection,
        transcripts,
        records: records.into_iter().map(|r| r.record).collect(),
        failures,
        metrics,
        wall_clock,
    })
}

fn dedup_by_key<T, K: Eq + std::hash::Hash>(items: &mut Vec<T>, key: impl Fn(&T) -> K) {
    let mut seen = HashSet::new();
    items.retain(|i| seen.insert(key(i)));
}

fn compute_metrics(
    config: &RunConfig,
    detection: &[DetectionRecord],
    records: &[RecordLine],
    failures: &[FailureRecord],
) -> Result<RunMetrics, RunError> {
    let detection_report = config.steps.contains(&Step::Detect).then(|| {
        let tau = config.classifier.tau;
        let mut routing = RoutingCounts::default();
        for d in detection {
            let asked = decide(d.logprob_true, tau) == Decision::Ambiguous;
            match (d.true_ambiguous, asked) {
                (true, true) => routing.ambiguous_asked += 1,
                (true, false) => routing.ambiguous_direct += 1,
                (false, true) => routing.unambiguous_asked += 1,
                (false, false) => routing.unambiguous_direct += 1,
            }
        }
        let items: Vec<(f64, bool)> = detection.iter().map(|d| (d.logprob_true, d.true_ambiguous)).collect();
        let auroc = auroc(&items).ok();
        DetectionReport {
            dataset: config.dataset.kind,
            scored: detection.len() as u64,
            excluded: failures.iter().filter(|f| f.stage == Stage::Detect).count() as u64,
            tau,
            auroc,
            routing,
        }
    });

    let mut policies = Vec::new();
    if config.steps.contains(&Step::Qa) {
        for &policy in &config.policies {
            let lines: Vec<&RecordLine> = records.iter().filter(|r| r.record.policy == policy).collect();
            let recs: Vec<EvalRecord> = lines.iter().map(|r| r.record.clone()).collect();
            let report = if recs.is_empty() {
                None
            } else {
                Some(aggregate(&recs, &config.metrics)?)
            };
            let policy_failures = failures.iter().filter(|f| f.policy == Some(policy));
            let usage = lines.iter().map(|r| r.usage).sum::<Usage>() + policy_failures.clone().map(|f| f.usage).sum();
            policies.push(PolicyMetrics {
                policy,
                report,
                excluded: policy_failures.count() as u64,
                usage,
            });
        }
    }
    let detect_usage: Usage = detection.iter().map(|d| d.usage).sum::<Usage>()
        + failures
            .iter()
            .filter(|f| f.stage == Stage::Detect)
            .map(|f| f.usage)
            .sum();
    let usage = policies.iter().map(|p| p.usage).sum::<Usage>() + detect_usage;
    Ok(RunMetrics {
        dataset: config.dataset.kind,
        detection: detection_report,
        policies,
        usage,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Lambda,
    Tau,
}

impl FromStr for SweepParam {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "lambda" => Ok(SweepParam::Lambda),
            "tau" => Ok(SweepParam::Tau),
            other => Err(format!("unknown sweep parameter {other:?}; expected lambda or tau")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub policy: Policy,
    pub report: Option<MetricsReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub param: SweepParam,
    pub values: Vec<f64>,
    pub rows: Vec<SweepRow>,
}

/// Runs (or resumes) the experiment, then varies one parameter.
///
/// λ only changes arithmetic on recorded outcomes. τ re-routes Clam
/// episodes using the recorded ambiguity scores; questions without a
/// recorded score are scored again. Results go to `<out>/sweep/`.
pub fn sweep(config: &RunConfig, param: SweepParam, values: &[f64]) -> Result<SweepTable, RunError> {
    let backend = {
        let _ = plan(config)?;
        config.backend.build()?
    };
    sweep_with(config, backend.as_ref(), param, values)
}

pub fn sweep_with(
    config: &RunConfig,
    backend: &dyn LanguageModel,
    param: SweepParam,
    values: &[f64],
) -> Result<SweepTable, RunError> {
    if values.is_empty() {
        return Err(RunError::Config("sweep values are empty".into()));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(RunError::Config("sweep values contain NaN".into()));
    }
    if !config.steps.contains(&Step::Qa) {
        return Err(RunError::Config("sweeps need the qa step".into()));
    }
    let run = run_experiment_with(config, backend)?;
    let sweep_dir = config.out_dir.join("sweep");
    fs::create_dir_all(&sweep_dir).map_err(io_err(&sweep_dir))?;

    let mut rows = Vec::new();
    match param {
        SweepParam::Lambda => {
            for &lambda in values {
                let metrics = MetricsConfig {
                    lambda,
                    normalization: config.metrics.normalization,
                };
                for &policy in &config.policies {
                    let recs = run.records_for(policy);
                    let report = if recs.is_empty() {
                        None
                    } else {
                        Some(aggregate(&recs, &metrics)?)
                    };
                    rows.push(SweepRow {
                        value: lambda,
                        policy,
                        report,
                    });
                }
            }
            let lambda_rows = lambda_rows(&rows, values, &config.policies);
            write_atomic(&sweep_dir.join("lambda.csv"), &lambda_sweep_csv(values, &lambda_rows))?;
        }
        SweepParam::Tau => {
            let plan = plan(config)?;
            let mut cache = score_cache(&run.detection);
            for t in run.transcripts.iter().filter(|t| t.policy == Policy::Clam) {
                if let Some(s) = &t.ambiguity_score {
                    cache.entry(t.question_id.clone()).or_insert_with(|| s.clone());
                }
            }
            for &tau in values {
                let mut pipeline = config.pipeline();
                pipeline.classifier.tau = tau;
                pipeline.record_timestamps = false;
                let mut outcomes: Vec<(usize, RecordLine)> = Vec::new();
                let indexed: Vec<(usize, &EvalItem)> = plan.qa_items.iter().enumerate().collect();
                execute(
                    &indexed,
                    config.workers,
                    |(i, item)| {
                        (
                            *i,
                            episode_one(
                                item,
                                Policy::Clam,
                                backend,
                                &pipeline,
                                &config.metrics,
                                cache.get(&item.id),
                            ),
                        )
                    },
                    |(i, outcome)| {
                        if let Ok((_, record)) = outcome {
                            outcomes.push((i, record));
                        }
                        Ok(())
                    },
                )?;
                outcomes.sort_by_key(|(i, _)| *i);
                let recs: Vec<EvalRecord> = outcomes.into_iter().map(|(_, r)| r.record).collect();
                let report = if recs.is_empty() {
                    None
                } else {
                    Some(aggregate(&recs, &config.metrics)?)
                };
                rows.push(SweepRow {
                    value: tau,
                    policy: Policy::Clam,
                    report,
                });
            }
            write_atomic(&sweep_dir.join("tau.csv"), &tau_csv(&rows))?;
        }
    }
    let table = SweepTable {
        param,
        values: values.to_vec(),
        rows,
    };
    let name = match param {
        SweepParam::Lambda => "lambda.json",
        SweepParam::Tau => "tau.json",
    };
    write_atomic(
        &sweep_dir.join(name),
        &(serde_json::to_string_pretty(&table).expect("json") + "\n"),
    )?;
    Ok(table)
}

fn lambda_rows(rows: &[SweepRow], values: &[f64], policies: &[Policy]) -> Vec<LambdaRow> {
    policies
        .iter()
        .filter_map(|&policy| {
            let adjusted: Option<Vec<f64>> = values
                .iter()
                .map(|v| {
                    rows.iter()
                        .find(|r| r.policy == policy && r.value.to_bits() == v.to_bits())
                        .and_then(|r| r.report.as_ref())
                        .map(|r| r.adjusted_accuracy)
                })
                .collect();
            adjusted.map(|adjusted| LambdaRow { policy, adjusted })
        })
        .collect()
}

fn tau_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(
        "tau,n,accuracy,adjusted_accuracy,auroc,ambiguous_asked,ambiguous_direct,unambiguous_asked,unambiguous_direct\n",
    );
    for row in rows {
        let _ = write!(out, "{}", row.value);
        match &row.report {
            Some(r) => {
                let _ = writeln!(
                    out,
                    ",{},{:.4},{:.4},{},{},{},{},{}",
                    r.n,
                    r.accuracy,
                    r.adjusted_accuracy,
                    fmt_auroc(r.auroc),
                    r.routing.ambiguous_asked,
                    r.routing.ambiguous_direct,
                    r.routing.unambiguous_asked,
                    r.routing.unambiguous_direct
                );
            }
            None => out.push_str(",0,,,,,,,\n"),
        }
    }
    out
}

fn fmt_auroc(a: Option<f64>) -> String {
    a.map(|v| format!("{v:.4}")).unwrap_or_else(|| "undefined".into())
}

fn pct(v: Option<f64>) -> String {
    v.map(|x| format!("{:.2}", x * 100.0)).unwrap_or_else(|| "n/a".into())
}

/// Tables rendered from a finished run, as `(file name, contents)`.
pub fn render_report(
    metrics: &RunMetrics,
    records: &[EvalRecord],
    lambdas: &[f64],
) -> Result<Vec<(String, String)>, RunError> {
    let mut accuracy = String::from("policy,n,excluded,accuracy,adjusted_accuracy,lambda\n");
    let mut auroc_csv = String::from("dataset,source,predictor,auroc\n");
    let mut subsets = String::from("policy,ambiguous_n,ambiguous_accuracy,unambiguous_n,unambiguous_accuracy\n");
    let mut routing = String::from("source,ambiguous_asked,ambiguous_direct,unambiguous_asked,unambiguous_direct\n");
    let ds = metrics.dataset.as_str();

    if let Some(d) = &metrics.detection {
        let _ = writeln!(auroc_csv, "{ds},detection,score,{}", fmt_auroc(d.auroc));
        let r = d.routing;
        let _ = writeln!(
            routing,
            "detection@{},{},{},{},{}",
            d.tau, r.ambiguous_asked, r.ambiguous_direct, r.unambiguous_asked, r.unambiguous_direct
        );
    }
    for p in &metrics.policies {
        let name = p.policy.as_str();
        let Some(r) = &p.report else {
            let _ = writeln!(accuracy, "{name},0,{},n/a,n/a,", p.excluded);
            continue;
        };
        let _ = writeln!(
            accuracy,
            "{name},{},{},{},{},{}",
            r.n,
            p.excluded,
            pct(Some(r.accuracy)),
            pct(Some(r.adjusted_accuracy)),
            r.lambda
        );
        let predictor = match r.auroc_predictor {
            crate::metrics::Predictor::Score => "score",
            crate::metrics::Predictor::AskedClarification => "asked_clarification",
        };
        let _ = writeln!(auroc_csv, "{ds},{name},{predictor},{}", fmt_auroc(r.auroc));
        let _ = writeln!(
            subsets,
            "{name},{},{},{},{}",
            r.ambiguous_n,
            pct(r.ambiguous_accuracy),
            r.unambiguous_n,
            pct(r.unambiguous_accuracy)
        );
        let c = r.routing;
        let _ = writeln!(
            routing,
            "{name},{},{},{},{}",
            c.ambiguous_asked, c.ambiguous_direct, c.unambiguous_asked, c.unambiguous_direct
        );
    }

    let by_policy: Vec<(Policy, Vec<EvalRecord>)> = metrics
        .policies
        .iter()
        .map(|p| {
            (
                p.policy,
                records
                    .iter()
                    .filter(|r| r.policy == p.policy)
                    .cloned()
                    .collect::<Vec<_>>(),
            )
        })
        .filter(|(_, recs)| !recs.is_empty())
        .collect();
    let normalization = Default::default();
    let rows = crate::metrics::lambda_sweep(&by_policy, lambdas, normalization)?;
    let lambda_csv = lambda_sweep_csv(lambdas, &rows);

    let mut md = format!("# Run report: {ds}\n\n");
    let _ = writeln!(md, "Requests: {}\n", metrics.usage.requests);
    for (title, csv) in [
        ("Accuracy", &accuracy),
        ("AUROC", &auroc_csv),
        ("Accuracy by true label", &subsets),
        ("Routing counts", &routing),
        ("Adjusted accuracy by lambda", &lambda_csv),
    ] {
        let _ = writeln!(md, "## {title}\n\n{}", csv_to_markdown(csv));
    }

    Ok(vec![
        ("accuracy.csv".into(), accuracy),
        ("auroc.csv".into(), auroc_csv),
        ("subsets.csv".into(), subsets),
        ("routing.csv".into(), routing),
        ("lambda_sweep.csv".into(), lambda_csv),
        ("report.md".into(), md),
    ])
}

fn csv_to_markdown(csv: &str) -> String {
    let mut lines = csv.lines();
    let Some(header) = lines.next() else {
        return String::new();
    };
    let cols = header.split(',').count();
    let row = |l: &str| format!("| {} |\n", l.split(',').collect::<Vec<_>>().join(" | "));
    let mut out = row(header);
    out.push_str(&format!("|{}\n", "---|".repeat(cols)));
    for l in lines {
        out.push_str(&row(l));
    }
    out
}

/// Writes `report/*.csv` and `report/report.md` for a finished run directory.
pub fn report(run_dir: impl AsRef<Path>) -> Result<Vec<PathBuf>, RunError> {
    let dir = run_dir.as_ref();
    let metrics_path = dir.join(METRICS_FILE);
    let text = fs::read_to_string(&metrics_path).map_err(io_err(&metrics_path))?;
    let metrics: RunMetrics = serde_json::from_str(&text).map_err(|e| RunError::Artifact {
        path: metrics_path.clone(),
        line: e.line(),
        message: e.to_string(),
    })?;
    let records: Vec<RecordLine> = read_jsonl(&dir.join(RECORDS_FILE))?;
    let records: Vec<EvalRecord> = records.into_iter().map(|r| r.record).collect();
    let out = dir.join("report");
    fs::create_dir_all(&out).map_err(io_err(&out))?;
    let mut written = Vec::new();
    for (name, contents) in render_report(&metrics, &records, &DEFAULT_LAMBDAS)? {
        let path = out.join(name);
        write_atomic(&path, &contents)?;
        written.push(path);
    }
    Ok(written)
}
