//! Epoch loop over a task suite, held-out evaluation, run configuration and
//! the per-epoch metrics table.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::experience::{Clock, EntryId, ExperienceLibrary};
use crate::explorer::{CandidateExperience, ExploreConfig, Explorer};
use crate::gateway::{BackendConfig, Gateway, GatewayError, Role, DEFAULT_MAX_IN_FLIGHT};
use crate::records::{self, FormatError};
use crate::retrieval::{LibraryMode, DEFAULT_K};
use crate::task::{TaskInstance, TaskSuite};
use crate::templates::Templates;
use crate::updater::{self, ApplyError, FileSink, NullSink, StepContext, StepSink, Updater, LEXICAL_MERGE_THRESHOLD};

pub const CURRENT_LIBRARY: &str = "current.library";
pub const AUDIT_LOG: &str = "audit.log";
pub const METRICS_FILE: &str = "metrics.csv";
pub const REPORT_FILE: &str = "report.json";

pub fn checkpoint_name(epoch: usize) -> String {
    format!("epoch_{epoch}.library")
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading config {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("config syntax: {0}")]
    Syntax(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Run settings, read from TOML. Relative paths resolve against the
/// directory of the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub epochs: usize,
    pub n_parallel: usize,
    pub max_rounds: usize,
    pub success_threshold: f64,
    pub k: usize,
    pub explore_temperature: f64,
    pub seed: Option<u64>,
    pub max_tool_calls: usize,
    pub max_in_flight: usize,
    /// Shuffle the training order each epoch (seeded).
    pub shuffle: bool,
    pub test_each_epoch: bool,
    /// Stamp library entries from a deterministic counter instead of the
    /// wall clock, so identical runs produce identical files.
    pub logical_clock: bool,
    /// Overrides the suite's mode when set.
    pub library_mode: Option<LibraryMode>,
    pub merge_threshold: f64,
    pub templates: Option<PathBuf>,
    /// Role name to backend spec (`scripted:<file>` or `http:<model>[@url]`).
    pub backends: BTreeMap<String, String>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let e = ExploreConfig::default();
        Self {
            epochs: 5,
            n_parallel: e.n_parallel,
            max_rounds: e.max_rounds,
            success_threshold: e.success_threshold,
            k: DEFAULT_K,
            explore_temperature: e.explore_temperature,
            seed: None,
            max_tool_calls: e.max_tool_calls,
            max_in_flight: DEFAULT_MAX_IN_FLIGHT,
            shuffle: false,
            test_each_epoch: false,
            logical_clock: true,
            library_mode: None,
            merge_threshold: LEXICAL_MERGE_THRESHOLD,
            templates: None,
            backends: BTreeMap::new(),
            base_dir: PathBuf::new(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        let mut cfg: RunConfig = toml::from_str(text)?;
        cfg.base_dir = base_dir.to_path_buf();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text, path.parent().unwrap_or(Path::new("")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.n_parallel == 0 {
            return bad("n_parallel must be at least 1".into());
        }
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        if self.max_in_flight == 0 {
            return bad("max_in_flight must be at least 1".into());
        }
        if !self.success_threshold.is_finite() {
            return bad("success_threshold must be finite".into());
        }
        if !(0.0..=1.0).contains(&self.merge_threshold) {
            return bad("merge_threshold must lie in [0, 1]".into());
        }
        for (role, spec) in &self.backends {
            if Role::parse(role).is_none() {
                return bad(format!("unknown role {role:?} in [backends]"));
            }
            if let Err(e) = BackendConfig::parse(spec) {
                return bad(e.to_string());
            }
        }
        Ok(())
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    /// Binds every configured role.
    pub fn build_gateway(&self) -> Result<Gateway, GatewayError> {
        let gateway = Gateway::with_max_in_flight(self.max_in_flight);
        for (role, spec) in &self.backends {
            let role = Role::parse(role).ok_or_else(|| GatewayError::UnknownBackend(format!("role {role}")))?;
            let backend = match BackendConfig::parse(spec)? {
                BackendConfig::Scripted(p) => BackendConfig::Scripted(self.resolve(&p)),
                other => other,
            };
            gateway.bind(role, &backend)?;
        }
        Ok(gateway)
    }

    pub fn load_templates(&self) -> io::Result<Templates> {
        match &self.templates {
            Some(dir) => Templates::load_dir(&self.resolve(dir)),
            None => Ok(Templates::default()),
        }
    }

    pub fn explore_config(&self, mode: LibraryMode, epoch: u64, seed: Option<u64>) -> ExploreConfig {
        ExploreConfig {
            n_parallel: self.n_parallel,
            max_rounds: self.max_rounds,
            success_threshold: self.success_threshold,
            k: self.k,
            explore_temperature: self.explore_temperature,
            seed,
            mode,
            max_tool_calls: self.max_tool_calls,
            epoch,
        }
    }

    /// Flat key/value view for reports.
    pub fn snapshot(&self) -> BTreeMap<String, String> {
        let mut out = BTreeMap::new();
        if let Ok(serde_json::Value::Object(map)) = serde_json::to_value(self) {
            for (k, v) in map {
                match v {
                    serde_json::Value::Object(inner) => {
                        for (ik, iv) in inner {
                            out.insert(format!("{k}.{ik}"), plain(&iv));
                        }
                    }
                    serde_json::Value::Null => {}
                    other => {
                        out.insert(k, plain(&other));
                    }
                }
            }
        }
        out
    }
}

fn plain(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
    pub library_size: usize,
    pub new_entries: usize,
    pub merges: usize,
    pub discards: usize,
    pub candidates: usize,
    /// Samples whose exploration or reward pass hit a backend failure.
    pub errors: usize,
    pub wall_clock_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleLog {
    pub epoch: usize,
    pub task_id: String,
    pub solved_in_exploration: bool,
    pub rounds: usize,
    pub candidates: usize,
    pub reward: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub suite: String,
    pub config: BTreeMap<String, String>,
    pub epochs: Vec<EpochRecord>,
    pub samples: Vec<SampleLog>,
}

impl TrainReport {
    pub fn total_errors(&self) -> usize {
        self.epochs.iter().map(|e| e.errors).sum()
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let text = fs::read_to_string(path).map_err(|e| TrainError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| TrainError::Report(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let text = serde_json::to_string_pretty(self).expect("report serializes") + "\n";
        records::write_atomic(path, &text).map_err(|e| TrainError::io(path, e))
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub report: TrainReport,
    pub library: ExperienceLibrary,
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid suite: {0}")]
    InvalidSuite(String),
    #[error("output directory {0} already holds a run")]
    OutputExists(PathBuf),
    #[error("committing a step failed: {0}")]
    Apply(#[from] ApplyError),
    #[error("I/O on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("metrics: {0}")]
    Metrics(#[from] MetricsError),
    #[error("report: {0}")]
    Report(String),
}

impl TrainError {
    fn io(path: &Path, source: io::Error) -> Self {
        TrainError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleResult {
    pub task_id: String,
    pub answer: String,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    /// Mean per-sample score.
    pub aggregate: f64,
    pub per_sample: Vec<SampleResult>,
}

impl EvalReport {
    pub fn errors(&self) -> usize {
        self.per_sample.iter().filter(|s| s.error.is_some()).count()
    }

    pub fn write_per_sample(&self, path: &Path) -> io::Result<()> {
        let mut text = String::new();
        for s in &self.per_sample {
            text.push_str(&serde_json::to_string(s).expect("result serializes"));
            text.push('\n');
        }
        records::write_atomic(path, &text)
    }
}

pub struct Trainer<'a> {
    pub gateway: &'a Gateway,
    pub templates: &'a Templates,
    pub config: RunConfig,
}

impl<'a> Trainer<'a> {
    pub fn new(gateway: &'a Gateway, templates: &'a Templates, config: RunConfig) -> Self {
        Self {
            gateway,
            templates,
            config,
        }
    }

    fn sample_seed(&self, epoch: usize, index: usize) -> Option<u64> {
        self.config
            .seed
            .map(|s| s.wrapping_add((epoch as u64) << 32).wrapping_add((index as u64) << 8))
    }

    /// Trains from `initial`, writing artifacts under `out_dir` when given.
    pub fn train(&self, suite: &TaskSuite, initial: ExperienceLibrary, out_dir: Option<&Path>) -> Result<TrainOutcome, TrainError> {
        match out_dir {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(|e| TrainError::io(dir, e))?;
                if dir.join(AUDIT_LOG).exists() || dir.join(CURRENT_LIBRARY).exists() {
                    return Err(TrainError::OutputExists(dir.to_path_buf()));
                }
                let mut sink = FileSink::new(dir.join(CURRENT_LIBRARY), dir.join(AUDIT_LOG));
                self.train_with_sink(suite, initial, Some(dir), &mut sink)
            }
            None => self.train_with_sink(suite, initial, None, &mut NullSink::default()),
        }
    }

    pub fn train_with_sink(
        &self,
        suite: &TaskSuite,
        initial: ExperienceLibrary,
        out_dir: Option<&Path>,
        sink: &mut dyn StepSink,
    ) -> Result<TrainOutcome, TrainError> {
        suite.validate().map_err(TrainError::InvalidSuite)?;
        if suite.train.is_empty() {
            return Err(TrainError::InvalidSuite("no training tasks".into()));
        }
        let mode = self.config.library_mode.unwrap_or(suite.library_mode);
        let mut library = initial;
        if self.config.logical_clock {
            library.set_clock(Clock::logical());
        }
        let updater = Updater {
            merge_threshold: self.config.merge_threshold,
            ..Updater::new(Some(self.gateway), self.templates)
        };
        let mut report = TrainReport {
            suite: suite.name.clone(),
            config: self.config.snapshot(),
            epochs: Vec::new(),
            samples: Vec::new(),
        };
        sink.commit(&library, &[]).map_err(ApplyError::from)?;

        let mut queued: Vec<CandidateExperience> = Vec::new();
        let mut pending_usage: Vec<EntryId> = Vec::new();
        for epoch in 1..=self.config.epochs {
            let started = Instant::now();
            let mut order: Vec<usize> = (0..suite.train.len()).collect();
            if self.config.shuffle {
                let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed.unwrap_or(0) ^ epoch as u64);
                order.shuffle(&mut rng);
            }
            let mut rec = EpochRecord {
                epoch,
                train_accuracy: 0.0,
                test_accuracy: None,
                library_size: 0,
                new_entries: 0,
                merges: 0,
                discards: 0,
                candidates: 0,
                errors: 0,
                wall_clock_ms: 0,
            };
            let mut rewards = Vec::with_capacity(order.len());
            for idx in order {
                let sample = &suite.train[idx];
                let cfg = self.config.explore_config(mode, epoch as u64, self.sample_seed(epoch, idx));
                let explorer = Explorer::new(self.gateway, self.templates, cfg.clone());
                let mut log = SampleLog {
                    epoch,
                    task_id: sample.task_id.clone(),
                    solved_in_exploration: false,
                    rounds: 0,
                    candidates: 0,
                    reward: 0.0,
                    error: None,
                };
                let mut candidates = std::mem::take(&mut queued);
                let mut usage = std::mem::take(&mut pending_usage);
                match explorer.explore(sample, &library) {
                    Ok(r) => {
                        log.solved_in_exploration = r.solved;
                        log.rounds = r.rounds;
                        log.candidates = r.candidates.len();
                        candidates.extend(r.candidates);
                        usage.extend(r.retrieval_hits);
                    }
                    Err(f) => log.error = Some(f.error.to_string()),
                }
                let ctx = StepContext {
                    sample_id: sample.task_id.clone(),
                    epoch: epoch as u64,
                    usage,
                };
                let step = updater.apply(&mut library, &candidates, &ctx, sink)?;
                rec.candidates += candidates.len() - step.queued.len();
                rec.new_entries += step.inserts();
                rec.merges += step.merges();
                rec.discards += step.discards();
                queued = step.queued;
                if log.error.is_none() {
                    match updater::solve_once(self.gateway, self.templates, &cfg, sample, &library) {
                        Ok(o) => {
                            log.reward = o.score;
                            pending_usage.extend(o.hits);
                        }
                        Err(e) => log.error = Some(e.to_string()),
                    }
                }
                if log.error.is_some() {
                    rec.errors += 1;
                }
                rewards.push(log.reward);
                report.samples.push(log);
            }
            // Settle usage and anything still queued before checkpointing.
            let ctx = StepContext {
                sample_id: format!("epoch-{epoch}-close"),
                epoch: epoch as u64,
                usage: std::mem::take(&mut pending_usage),
            };
            let leftover = std::mem::take(&mut queued);
            let step = updater.apply(&mut library, &leftover, &ctx, sink)?;
            rec.candidates += leftover.len() - step.queued.len();
            rec.new_entries += step.inserts();
            rec.merges += step.merges();
            rec.discards += step.discards();
            queued = step.queued;

            rec.train_accuracy = updater::episode_return(&rewards).accuracy;
            rec.library_size = library.len();
            if let Some(dir) = out_dir {
                library.save(&dir.join(checkpoint_name(epoch)))?;
            }
            if self.config.test_each_epoch && !suite.test.is_empty() {
                rec.test_accuracy = Some(self.evaluate(&suite.test, &library, mode).aggregate);
            }
            rec.wall_clock_ms = started.elapsed().as_millis() as u64;
            report.epochs.push(rec);
            if let Some(dir) = out_dir {
                emit_metrics(&report, &dir.join(METRICS_FILE))?;
                report.save(&dir.join(REPORT_FILE))?;
            }
        }
        Ok(TrainOutcome { report, library })
    }

    /// Scores each sample with one greedy pass against a fixed library.
    /// Usage counters are not touched.
    pub fn evaluate(&self, samples: &[TaskInstance], library: &ExperienceLibrary, mode: LibraryMode) -> EvalReport {
        let cfg = self.config.explore_config(mode, 0, self.config.seed);
        let per_sample: Vec<SampleResult> = samples
            .iter()
            .map(|s| match updater::solve_once(self.gateway, self.templates, &cfg, s, library) {
                Ok(o) => SampleResult {
                    task_id: s.task_id.clone(),
                    answer: o.answer,
                    score: o.score,
                    error: None,
                },
                Err(e) => SampleResult {
                    task_id: s.task_id.clone(),
                    answer: String::new(),
                    score: 0.0,
                    error: Some(e.to_string()),
                },
            })
            .collect();
        let scores: Vec<f64> = per_sample.iter().map(|s| s.score).collect();
        EvalReport {
            n: samples.len(),
            aggregate: updater::episode_return(&scores).accuracy,
            per_sample,
        }
    }
}

/// One row of `metrics.csv`. An empty `test_accuracy` cell means no test
/// pass ran that epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
    pub library_size: usize,
    pub new_entries: usize,
    pub merges: usize,
    pub discards: usize,
}

pub const METRICS_HEADER: &str = "epoch,train_accuracy,test_accuracy,library_size,new_entries,merges,discards";

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("metrics I/O on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("metrics CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("metrics header is {found:?}, expected {METRICS_HEADER:?}")]
    Header { found: String },
}

pub fn metrics_rows(report: &TrainReport) -> Vec<MetricsRow> {
    report
        .epochs
        .iter()
        .map(|e| MetricsRow {
            epoch: e.epoch,
            train_accuracy: e.train_accuracy,
            test_accuracy: e.test_accuracy,
            library_size: e.library_size,
            new_entries: e.new_entries,
            merges: e.merges,
            discards: e.discards,
        })
        .collect()
}

pub fn metrics_to_csv(rows: &[MetricsRow]) -> Result<String, MetricsError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if rows.is_empty() {
        w.write_record(METRICS_HEADER.split(','))?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| MetricsError::Csv(e.into_error().into()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn metrics_from_csv(text: &str) -> Result<Vec<MetricsRow>, MetricsError> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header = r.headers()?.iter().collect::<Vec<_>>().join(",");
    if header != METRICS_HEADER {
        return Err(MetricsError::Header { found: header });
    }
    r.deserialize().map(|row| row.map_err(MetricsError::from)).collect()
}

/// Writes the metrics table for `report`.
pub fn emit_metrics(report: &TrainReport, path: &Path) -> Result<(), MetricsError> {
    write_metrics(&metrics_rows(report), path)
}

pub fn write_metrics(rows: &[MetricsRow], path: &Path) -> Result<(), MetricsError> {
    let text = metrics_to_csv(rows)?;
    records::write_atomic(path, &text).map_err(|source| MetricsError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>, MetricsError> {
    let text = fs::read_to_string(path).map_err(|source| MetricsError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    metrics_from_csv(&text)
}
