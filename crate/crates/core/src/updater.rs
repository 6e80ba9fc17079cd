//! Library maintenance: deciding how each candidate enters the library,
//! committing a step atomically with its audit records, and scoring the
//! updated library on the sample that produced it.

use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::{self, Write as _};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::experience::{content_hash, EntryId, ExperienceLibrary, LibraryError, Level, Zone};
use crate::explorer::{CandidateExperience, ExploreConfig, Explorer};
use crate::gateway::{Gateway, GatewayError, ModelRequest, Role};
use crate::lexical::{jaccard_sets, token_set};
use crate::records::{self, temp_sibling, FormatError};
use crate::task::TaskInstance;
use crate::templates::Templates;

pub const AUDIT_FORMAT: &str = "flex-audit";
pub const AUDIT_VERSION: u32 = 1;
pub const SHORTLIST_SIZE: usize = 5;
/// Token overlap at which the lexical decider treats a candidate as a
/// restatement of an existing entry.
pub const LEXICAL_MERGE_THRESHOLD: f64 = 0.7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "decision", rename_all = "snake_case")]
pub enum UpdateDecision {
    /// Exact duplicate of a live entry.
    Discard { duplicate_of: EntryId },
    /// Fold into `target_id`, which takes `merged_content`.
    Merge { target_id: EntryId, merged_content: String },
    Insert { zone: Zone, level: Level },
}

impl UpdateDecision {
    pub fn label(&self) -> &'static str {
        match self {
            UpdateDecision::Discard { .. } => "discard",
            UpdateDecision::Merge { .. } => "merge",
            UpdateDecision::Insert { .. } => "insert",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub sample_id: String,
    pub epoch: u64,
    pub candidate_hash: String,
    pub decision: String,
    /// Duplicate for discards, survivor for merges, new id for inserts.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_id: Option<EntryId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub merged_content: Option<String>,
    pub size_before: usize,
    pub size_after: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaStep {
    pub sample_id: String,
    pub decisions: Vec<(CandidateExperience, UpdateDecision)>,
    /// Candidates whose decision could not be made; retried next step.
    pub queued: Vec<CandidateExperience>,
    pub library_size_before: usize,
    pub library_size_after: usize,
    pub audit: Vec<AuditRecord>,
}

impl MetaStep {
    fn count(&self, label: &str) -> usize {
        self.decisions.iter().filter(|(_, d)| d.label() == label).count()
    }
    pub fn inserts(&self) -> usize {
        self.count("insert")
    }
    pub fn merges(&self) -> usize {
        self.count("merge")
    }
    pub fn discards(&self) -> usize {
        self.count("discard")
    }
}

#[derive(Debug, Error)]
pub enum StorageError {
    #[error("storage I/O on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("injected storage fault at {0:?}")]
    Injected(FaultPoint),
}

impl StorageError {
    fn io(path: &Path, source: io::Error) -> Self {
        StorageError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Debug, Error)]
pub enum ApplyError {
    #[error(transparent)]
    Storage(#[from] StorageError),
    #[error("library rejected a decision: {0}")]
    Library(#[from] LibraryError),
}

/// Where a committed step goes. A failed commit must leave durable state as
/// it was before the call.
pub trait StepSink {
    fn commit(&mut self, library: &ExperienceLibrary, audit: &[AuditRecord]) -> Result<(), StorageError>;
}

/// Keeps everything in memory.
#[derive(Debug, Default)]
pub struct NullSink {
    pub audit: Vec<AuditRecord>,
}

impl StepSink for NullSink {
    fn commit(&mut self, _library: &ExperienceLibrary, audit: &[AuditRecord]) -> Result<(), StorageError> {
        self.audit.extend_from_slice(audit);
        Ok(())
    }
}

/// Test hook for simulating a crash at a given point of a file commit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultPoint {
    BeforeLibraryWrite,
    AfterAuditAppend,
    BeforeRename,
}

/// Writes the library file and appends to an audit log. The library is
/// staged to a temporary sibling and renamed into place last; on any
/// failure the audit log is truncated back and the staged file removed.
#[derive(Debug)]
pub struct FileSink {
    pub library_path: PathBuf,
    pub audit_path: PathBuf,
    pub fault: Option<FaultPoint>,
}

impl FileSink {
    pub fn new(library_path: impl Into<PathBuf>, audit_path: impl Into<PathBuf>) -> Self {
        Self {
            library_path: library_path.into(),
            audit_path: audit_path.into(),
            fault: None,
        }
    }

    fn fault(&self, at: FaultPoint) -> Result<(), StorageError> {
        if self.fault == Some(at) {
            Err(StorageError::Injected(at))
        } else {
            Ok(())
        }
    }

    fn append_audit(&self, audit: &[AuditRecord]) -> Result<(), StorageError> {
        let path = &self.audit_path;
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| StorageError::io(path, e))?;
        let empty = file.metadata().map_err(|e| StorageError::io(path, e))?.len() == 0;
        let mut text = if empty {
            audit_header()
        } else {
            String::new()
        };
        for rec in audit {
            text.push_str(&serde_json::to_string(rec).expect("audit record serializes"));
            text.push('\n');
        }
        file.write_all(text.as_bytes()).map_err(|e| StorageError::io(path, e))?;
        file.sync_data().map_err(|e| StorageError::io(path, e))
    }

    fn rollback(&self, audit_len: Option<u64>, staged: &Path) {
        let _ = fs::remove_file(staged);
        match audit_len {
            Some(len) => {
                if let Ok(f) = OpenOptions::new().write(true).open(&self.audit_path) {
                    let _ = f.set_len(len);
                }
            }
            None => {
                let _ = fs::remove_file(&self.audit_path);
            }
        }
    }
}

impl StepSink for FileSink {
    fn commit(&mut self, library: &ExperienceLibrary, audit: &[AuditRecord]) -> Result<(), StorageError> {
        self.fault(FaultPoint::BeforeLibraryWrite)?;
        let staged = temp_sibling(&self.library_path);
        fs::write(&staged, library.to_text()).map_err(|e| StorageError::io(&staged, e))?;
        let audit_len = fs::metadata(&self.audit_path).ok().map(|m| m.len());
        let result = self
            .append_audit(audit)
            .and_then(|_| self.fault(FaultPoint::AfterAuditAppend))
            .and_then(|_| self.fault(FaultPoint::BeforeRename))
            .and_then(|_| fs::rename(&staged, &self.library_path).map_err(|e| StorageError::io(&self.library_path, e)));
        if result.is_err() {
            self.rollback(audit_len, &staged);
        }
        result
    }
}

fn audit_header() -> String {
    format!("{{\"format\":\"{AUDIT_FORMAT}\",\"version\":{AUDIT_VERSION}}}\n")
}

pub fn audit_to_text(audit: &[AuditRecord]) -> String {
    records::render(AUDIT_FORMAT, AUDIT_VERSION, serde_json::Map::new(), audit)
}

pub fn read_audit(path: &Path) -> Result<Vec<AuditRecord>, FormatError> {
    let text = records::read_file(path)?;
    let parsed = records::parse::<serde_json::Map<String, serde_json::Value>, AuditRecord>(&text, AUDIT_FORMAT, AUDIT_VERSION)?;
    Ok(parsed.records.into_iter().map(|(_, r)| r).collect())
}

/// Identifies the step being applied.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StepContext {
    pub sample_id: String,
    pub epoch: u64,
    /// Retrieval hits to credit in the same commit.
    pub usage: Vec<EntryId>,
}

pub struct Updater<'a> {
    /// Consulted when it has the Updater role bound; otherwise decisions
    /// are lexical.
    pub gateway: Option<&'a Gateway>,
    pub templates: &'a Templates,
    pub shortlist_size: usize,
    pub merge_threshold: f64,
}

impl<'a> Updater<'a> {
    pub fn new(gateway: Option<&'a Gateway>, templates: &'a Templates) -> Self {
        Self {
            gateway,
            templates,
            shortlist_size: SHORTLIST_SIZE,
            merge_threshold: LEXICAL_MERGE_THRESHOLD,
        }
    }

    /// Most similar live entries in the candidate's zone, best first.
    pub fn shortlist<'l>(&self, candidate: &CandidateExperience, library: &'l ExperienceLibrary) -> Vec<(f64, &'l crate::experience::ExperienceEntry)> {
        let tokens = token_set(&candidate.content);
        let mut scored: Vec<_> = library
            .entries()
            .filter(|e| e.zone == candidate.zone)
            .map(|e| (jaccard_sets(&tokens, &token_set(&e.content)), e))
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.id.cmp(&b.1.id)));
        scored.truncate(self.shortlist_size);
        scored
    }

    /// Decides without mutating. Every returned decision is applicable to
    /// `library` as given.
    pub fn decide(&self, candidate: &CandidateExperience, library: &ExperienceLibrary) -> Result<UpdateDecision, GatewayError> {
        let insert = UpdateDecision::Insert {
            zone: candidate.zone,
            level: candidate.level,
        };
        if let Some(existing) = library.find_exact(&candidate.content) {
            return Ok(UpdateDecision::Discard { duplicate_of: existing });
        }
        let shortlist = self.shortlist(candidate, library);
        if shortlist.is_empty() {
            return Ok(insert);
        }
        let proposal = match self.gateway.filter(|g| g.is_bound(Role::Updater)) {
            Some(g) => self.ask_role(g, candidate, &shortlist)?,
            None => {
                let (score, best) = shortlist[0];
                (score >= self.merge_threshold).then(|| {
                    let keep_candidate = candidate.quality > best.quality
                        || (candidate.quality == best.quality && candidate.content.len() > best.content.len());
                    let text = if keep_candidate { &candidate.content } else { &best.content };
                    (best.id, text.clone())
                })
            }
        };
        let Some((target, merged)) = proposal else {
            return Ok(insert);
        };
        match library.get(target) {
            Some(e) if e.zone == candidate.zone => {}
            _ => return Ok(insert),
        }
        let Ok(hash) = content_hash(&merged) else {
            return Ok(insert);
        };
        match library.find_hash(&hash) {
            Some(holder) if holder != target => Ok(UpdateDecision::Discard { duplicate_of: holder }),
            _ => Ok(UpdateDecision::Merge {
                target_id: target,
                merged_content: merged,
            }),
        }
    }

    fn ask_role(
        &self,
        gateway: &Gateway,
        candidate: &CandidateExperience,
        shortlist: &[(f64, &crate::experience::ExperienceEntry)],
    ) -> Result<Option<(EntryId, String)>, GatewayError> {
        let mut listing = String::new();
        for (_, e) in shortlist {
            let _ = writeln!(listing, "[{}] ({}/{}) {}", e.id, e.zone, e.level, e.content);
        }
        let user = self.templates.render(
            &self.templates.updater_user,
            &[
                ("zone", &candidate.zone.to_string()),
                ("level", &candidate.level.to_string()),
                ("candidate", &candidate.content),
                ("shortlist", &listing),
            ],
        );
        let req = ModelRequest::new(Role::Updater, self.templates.updater_system.clone(), user);
        match gateway.complete(&req) {
            Ok(resp) => Ok(parse_updater_reply(&resp.content)),
            Err(e) if e.is_unavailable() => Err(e),
            // A reply that cannot be used counts as "distinct".
            Err(_) => Ok(None),
        }
    }

    /// Decides and applies every candidate in order on a staged copy, then
    /// commits through `sink`. On error `library` is left untouched.
    pub fn apply(
        &self,
        library: &mut ExperienceLibrary,
        candidates: &[CandidateExperience],
        ctx: &StepContext,
        sink: &mut dyn StepSink,
    ) -> Result<MetaStep, ApplyError> {
        let mut staged = library.clone();
        staged.record_usage(&ctx.usage);
        let size_before = staged.len();
        let mut step = MetaStep {
            sample_id: ctx.sample_id.clone(),
            decisions: Vec::new(),
            queued: Vec::new(),
            library_size_before: size_before,
            library_size_after: size_before,
            audit: Vec::new(),
        };
        for cand in candidates {
            let decision = match self.decide(cand, &staged) {
                Ok(d) => d,
                Err(_) => {
                    step.queued.push(cand.clone());
                    continue;
                }
            };
            let before = staged.len();
            let target = match &decision {
                UpdateDecision::Discard { duplicate_of } => *duplicate_of,
                UpdateDecision::Insert { zone, level } => {
                    staged.insert(*zone, *level, &cand.content, cand.source.clone(), cand.quality)?
                }
                UpdateDecision::Merge {
                    target_id,
                    merged_content,
                } => {
                    let new_id = staged.insert(cand.zone, cand.level, &cand.content, cand.source.clone(), cand.quality)?;
                    staged.merge_into(*target_id, new_id, merged_content)?
                }
            };
            step.audit.push(AuditRecord {
                sample_id: ctx.sample_id.clone(),
                epoch: ctx.epoch,
                candidate_hash: content_hash(&cand.content).unwrap_or_default(),
                decision: decision.label().to_string(),
                target_id: Some(target),
                merged_content: match &decision {
                    UpdateDecision::Merge { merged_content, .. } => Some(merged_content.clone()),
                    _ => None,
                },
                size_before: before,
                size_after: staged.len(),
            });
            step.decisions.push((cand.clone(), decision));
        }
        step.library_size_after = staged.len();
        sink.commit(&staged, &step.audit)?;
        *library = staged;
        Ok(step)
    }
}

/// Parses `MERGE:<id>|<text>`; anything else is "distinct".
pub fn parse_updater_reply(reply: &str) -> Option<(EntryId, String)> {
    let line = reply
        .lines()
        .map(str::trim)
        .find(|l| l.to_ascii_uppercase().starts_with("MERGE:"))?;
    let (id, text) = line["MERGE:".len()..].split_once('|')?;
    let id = id.trim().trim_start_matches('[').trim_end_matches(']');
    let id = id.trim_start_matches("G#").trim_start_matches("W#");
    let id: u64 = id.parse().ok()?;
    let text = text.trim();
    (!text.is_empty()).then(|| (EntryId(id), text.to_string()))
}

/// Single greedy solve of `sample` against `library`.
#[derive(Debug, Clone, PartialEq)]
pub struct SolveOutcome {
    pub answer: String,
    pub score: f64,
    pub hits: Vec<EntryId>,
}

/// One retrieval plus one temperature-0 actor call, scored against gold.
pub fn solve_once(
    gateway: &Gateway,
    templates: &Templates,
    config: &ExploreConfig,
    sample: &TaskInstance,
    library: &ExperienceLibrary,
) -> Result<SolveOutcome, GatewayError> {
    let explorer = Explorer::new(gateway, templates, config.clone());
    let retrieved = explorer.retrieve_for(sample, library);
    let user = templates.render(
        &templates.actor_user,
        &[
            ("retrieved_experiences", &retrieved.flattened_context),
            ("question", &sample.input_x),
        ],
    );
    let out = explorer.run_actor(user, library, 0.0, config.seed)?;
    let mut hits = retrieved.hits();
    hits.extend(out.tool_hits);
    Ok(SolveOutcome {
        score: sample.score(&out.answer),
        answer: out.answer,
        hits,
    })
}

/// Reward of the updated library on the sample that produced the update.
pub fn meta_reward(
    gateway: &Gateway,
    templates: &Templates,
    config: &ExploreConfig,
    sample: &TaskInstance,
    library: &ExperienceLibrary,
) -> Result<f64, GatewayError> {
    solve_once(gateway, templates, config, sample, library).map(|o| o.score)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeReturn {
    pub total: f64,
    /// Mean reward; 0 for an empty episode.
    pub accuracy: f64,
}

pub fn episode_return(rewards: &[f64]) -> EpisodeReturn {
    let total: f64 = rewards.iter().sum();
    let accuracy = if rewards.is_empty() {
        0.0
    } else {
        total / rewards.len() as f64
    };
    EpisodeReturn { total, accuracy }
}
