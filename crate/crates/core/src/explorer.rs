//! Forward exploration of a single sample: parallel attempts, critique,
//! iterative refinement and distillation of candidate experiences.

use serde::{Deserialize, Serialize};

use crate::experience::{ExperienceLibrary, Level, Provenance, Zone, DEFAULT_QUALITY};
use crate::gateway::{FinishReason, Gateway, GatewayError, Message, ModelRequest, ModelResponse, Role};
use crate::retrieval::{self, LibraryMode, RetrievalQuery, RetrievalResult};
use crate::task::{extract_answer, TaskInstance};
use crate::templates::Templates;

use crate::experience::EntryId;

#[derive(Debug, Clone, PartialEq)]
pub struct ExploreConfig {
    pub n_parallel: usize,
    pub max_rounds: usize,
    /// A trajectory is accepted when its score reaches this value.
    pub success_threshold: f64,
    pub k: usize,
    pub explore_temperature: f64,
    /// Base seed; attempt `i` uses `seed + i`.
    pub seed: Option<u64>,
    pub mode: LibraryMode,
    /// Tool round-trips allowed per actor conversation.
    pub max_tool_calls: usize,
    pub epoch: u64,
}

impl Default for ExploreConfig {
    fn default() -> Self {
        Self {
            n_parallel: 4,
            max_rounds: 3,
            success_threshold: 1.0,
            k: retrieval::DEFAULT_K,
            explore_temperature: 0.8,
            seed: None,
            mode: LibraryMode::Hierarchical,
            max_tool_calls: 4,
            epoch: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub attempt_index: usize,
    /// 0 for parallel attempts, r for the r-th refinement.
    pub refinement_round: usize,
    pub prompt_context: String,
    pub reasoning: String,
    pub answer: String,
    pub score: f64,
    pub accepted: bool,
    /// Set once the critic has reviewed this trajectory.
    pub feedback: Option<String>,
    pub finish_reason: FinishReason,
    pub retrieval_hits: Vec<EntryId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateExperience {
    pub zone: Zone,
    pub level: Level,
    pub content: String,
    pub quality: f64,
    pub source: Provenance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExplorationResult {
    pub trajectories: Vec<Trajectory>,
    pub candidates: Vec<CandidateExperience>,
    pub solved: bool,
    pub rounds: usize,
    pub accumulated_feedback: Vec<String>,
    /// Entries surfaced by retrieval or tool calls, in order, with repeats.
    pub retrieval_hits: Vec<EntryId>,
}

/// Exploration aborted by a backend failure; keeps whatever was produced.
#[derive(Debug, thiserror::Error)]
#[error("exploration of {task_id} failed: {error}")]
pub struct ExploreFailure {
    pub task_id: String,
    pub error: GatewayError,
    pub partial: Vec<Trajectory>,
}

#[derive(Debug, thiserror::Error)]
pub enum RefineError {
    #[error("refinement needs non-empty feedback")]
    EmptyFeedback,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// Outcome of one actor conversation, tool calls included.
#[derive(Debug, Clone, PartialEq)]
pub struct ActorOutcome {
    pub response: ModelResponse,
    pub reasoning: String,
    pub answer: String,
    pub tool_hits: Vec<EntryId>,
}

pub struct Explorer<'a> {
    pub gateway: &'a Gateway,
    pub templates: &'a Templates,
    pub config: ExploreConfig,
}

impl<'a> Explorer<'a> {
    pub fn new(gateway: &'a Gateway, templates: &'a Templates, config: ExploreConfig) -> Self {
        Self {
            gateway,
            templates,
            config,
        }
    }

    pub fn retrieve_for(&self, sample: &TaskInstance, library: &ExperienceLibrary) -> RetrievalResult {
        let query = RetrievalQuery::new(sample.input_x.clone())
            .k(self.config.k)
            .mode(self.config.mode);
        retrieval::retrieve(&query, library, Some(self.gateway), self.templates)
    }

    /// Runs one actor conversation, serving `experience_lookup` calls from
    /// `library` until the model stops calling tools or the budget runs out.
    pub fn run_actor(
        &self,
        user: String,
        library: &ExperienceLibrary,
        temperature: f64,
        seed: Option<u64>,
    ) -> Result<ActorOutcome, GatewayError> {
        let mut request = ModelRequest::new(Role::Actor, self.templates.actor_system.clone(), user)
            .temperature(temperature)
            .seed(seed);
        request.tools.push(retrieval::as_tool());
        let mut tool_hits = Vec::new();
        let mut tool_rounds = 0;
        loop {
            let response = self.gateway.complete(&request)?;
            if response.tool_calls.is_empty() || tool_rounds >= self.config.max_tool_calls {
                let reasoning = response.content.trim().to_string();
                let answer = if response.tool_calls.is_empty() {
                    extract_answer(&response.content)
                } else {
                    String::new()
                };
                return Ok(ActorOutcome {
                    response,
                    reasoning,
                    answer,
                    tool_hits,
                });
            }
            tool_rounds += 1;
            let calls: Vec<String> = response
                .tool_calls
                .iter()
                .map(|c| format!("{}({})", c.tool_name, c.arguments))
                .collect();
            request
                .messages
                .push(Message::assistant(format!("{}\n[tool calls] {}", response.content, calls.join("; ")).trim().to_string()));
            for call in &response.tool_calls {
                let message = if call.tool_name == retrieval::TOOL_NAME {
                    let out = retrieval::run_tool(&call.arguments, library, self.config.mode, Some(self.gateway), self.templates);
                    tool_hits.extend(out.hits);
                    out.message
                } else {
                    format!("error: unknown tool {}", call.tool_name)
                };
                request.messages.push(Message::tool(message));
            }
        }
    }

    fn attempt(
        &self,
        sample: &TaskInstance,
        user: String,
        context: &str,
        library: &ExperienceLibrary,
        attempt_index: usize,
        refinement_round: usize,
    ) -> Result<Trajectory, GatewayError> {
        let seed = self.config.seed.map(|s| s.wrapping_add(attempt_index as u64));
        let mut t = Trajectory {
            attempt_index,
            refinement_round,
            prompt_context: context.to_string(),
            reasoning: String::new(),
            answer: String::new(),
            score: 0.0,
            accepted: false,
            feedback: None,
            finish_reason: FinishReason::Error,
            retrieval_hits: Vec::new(),
        };
        match self.run_actor(user, library, self.config.explore_temperature, seed) {
            Ok(out) => {
                t.score = sample.score(&out.answer);
                t.accepted = t.score >= self.config.success_threshold;
                t.reasoning = out.reasoning;
                t.answer = out.answer;
                t.finish_reason = out.response.finish_reason;
                t.retrieval_hits = out.tool_hits;
            }
            Err(e) if e.is_unavailable() => return Err(e),
            Err(e) => t.reasoning = format!("error: {e}"),
        }
        Ok(t)
    }

    /// `n` independent actor attempts, issued concurrently.
    pub fn parallel_sample(
        &self,
        sample: &TaskInstance,
        retrieved: &RetrievalResult,
        library: &ExperienceLibrary,
        n: usize,
    ) -> Result<Vec<Trajectory>, GatewayError> {
        let user = self.templates.render(
            &self.templates.actor_user,
            &[
                ("retrieved_experiences", &retrieved.flattened_context),
                ("question", &sample.input_x),
            ],
        );
        let results: Vec<Result<Trajectory, GatewayError>> = std::thread::scope(|scope| {
            let handles: Vec<_> = (0..n)
                .map(|i| {
                    let user = user.clone();
                    scope.spawn(move || self.attempt(sample, user, &retrieved.flattened_context, library, i, 0))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("actor attempt panicked"))
                .collect()
        });
        results.into_iter().collect()
    }

    pub fn critique(&self, trajectory: &Trajectory, sample: &TaskInstance) -> Result<String, GatewayError> {
        let system = if trajectory.accepted {
            &self.templates.critique_success_system
        } else {
            &self.templates.critique_failure_system
        };
        let user = self.templates.render(
            &self.templates.critique_user,
            &[
                ("question", &sample.input_x),
                ("reference", &sample.reference_text()),
                ("context", &trajectory.prompt_context),
                ("previous_reasoning", &trajectory.reasoning),
                ("answer", &trajectory.answer),
            ],
        );
        let resp = self.gateway.complete(&ModelRequest::new(Role::Critic, system.clone(), user))?;
        Ok(resp.content.trim().to_string())
    }

    pub fn refine(
        &self,
        sample: &TaskInstance,
        previous: &Trajectory,
        feedback: &str,
        retrieved: &RetrievalResult,
        library: &ExperienceLibrary,
        attempt_index: usize,
    ) -> Result<Trajectory, RefineError> {
        if feedback.trim().is_empty() {
            return Err(RefineError::EmptyFeedback);
        }
        let user = self.templates.render(
            &self.templates.refine_user,
            &[
                ("retrieved_experiences", &retrieved.flattened_context),
                ("question", &sample.input_x),
                ("previous_reasoning", &previous.reasoning),
                ("feedback", feedback),
            ],
        );
        let context = format!("{}\n\n{}", retrieved.flattened_context, feedback).trim().to_string();
        Ok(self.attempt(sample, user, &context, library, attempt_index, previous.refinement_round + 1)?)
    }

    /// Full exploration of one sample. The library is only read.
    pub fn explore(&self, sample: &TaskInstance, library: &ExperienceLibrary) -> Result<ExplorationResult, ExploreFailure> {
        let fail = |error: GatewayError, partial: Vec<Trajectory>| ExploreFailure {
            task_id: sample.task_id.clone(),
            error,
            partial,
        };
        let retrieved = self.retrieve_for(sample, library);
        let mut hits = retrieved.hits();
        let mut trajectories = self
            .parallel_sample(sample, &retrieved, library, self.config.n_parallel)
            .map_err(|e| fail(e, Vec::new()))?;
        let mut solved = trajectories.iter().any(|t| t.accepted);
        let mut feedback: Vec<String> = Vec::new();
        let mut rounds = 0;
        let mut current = best_failure(&trajectories);
        while !solved && rounds < self.config.max_rounds {
            let Some(idx) = current else { break };
            let fb = match self.critique(&trajectories[idx], sample) {
                Ok(fb) => fb,
                Err(e) => return Err(fail(e, trajectories)),
            };
            trajectories[idx].feedback = Some(fb.clone());
            feedback.push(fb);
            let joined = feedback.join("\n");
            let next_index = trajectories.len();
            let refined = match self.refine(sample, &trajectories[idx], &joined, &retrieved, library, next_index) {
                Ok(t) => t,
                // Feedback may legitimately be blank; retry the critique next round.
                Err(RefineError::EmptyFeedback) => {
                    rounds += 1;
                    continue;
                }
                Err(RefineError::Gateway(e)) => return Err(fail(e, trajectories)),
            };
            rounds += 1;
            solved = refined.accepted;
            trajectories.push(refined);
            current = Some(trajectories.len() - 1);
        }
        for t in &trajectories {
            hits.extend(&t.retrieval_hits);
        }
        let candidates = match self.distill(&trajectories, sample) {
            Ok(c) => c,
            Err(e) => return Err(fail(e, trajectories)),
        };
        Ok(ExplorationResult {
            trajectories,
            candidates,
            solved,
            rounds,
            accumulated_feedback: feedback,
            retrieval_hits: hits,
        })
    }

    /// One critic call per trajectory: accepted ones yield golden candidates,
    /// the rest warnings.
    pub fn distill(&self, trajectories: &[Trajectory], sample: &TaskInstance) -> Result<Vec<CandidateExperience>, GatewayError> {
        let producer = self.gateway.model_id(Role::Critic).unwrap_or_default();
        let mut out = Vec::new();
        for (i, t) in trajectories.iter().enumerate() {
            let (system, zone) = if t.accepted {
                (&self.templates.distill_success_system, Zone::Golden)
            } else {
                (&self.templates.distill_failure_system, Zone::Warning)
            };
            let user = self.templates.render(
                &self.templates.distill_user,
                &[
                    ("question", &sample.input_x),
                    ("reference", &sample.reference_text()),
                    ("previous_reasoning", &t.reasoning),
                    ("answer", &t.answer),
                    ("feedback", t.feedback.as_deref().unwrap_or("")),
                ],
            );
            let resp = self.gateway.complete(&ModelRequest::new(Role::Critic, system.clone(), user))?;
            let Some((level, content)) = parse_distilled(&resp.content) else {
                continue;
            };
            let level = match self.config.mode {
                LibraryMode::Flat => Level::Pattern,
                LibraryMode::Hierarchical => level,
            };
            out.push(CandidateExperience {
                zone,
                level,
                content,
                quality: DEFAULT_QUALITY,
                source: Provenance::new(sample.task_id.clone(), i as u64, producer.clone(), self.config.epoch),
            });
        }
        Ok(out)
    }
}

/// Highest-scoring rejected trajectory; ties go to the earliest attempt.
fn best_failure(trajectories: &[Trajectory]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, t) in trajectories.iter().enumerate() {
        if t.accepted {
            continue;
        }
        if best.is_none_or(|b| t.score > trajectories[b].score) {
            best = Some(i);
        }
    }
    best
}

/// Parses `LEVEL:<level>|<text>`. A missing or unknown level falls back to
/// Pattern; blank text yields nothing.
pub fn parse_distilled(reply: &str) -> Option<(Level, String)> {
    let reply = reply.trim();
    let line = reply
        .lines()
        .map(str::trim)
        .find(|l| l.to_ascii_uppercase().starts_with("LEVEL:"));
    let (level, text) = match line {
        Some(l) => match l["LEVEL:".len()..].split_once('|') {
            Some((lvl, text)) => (Level::parse(lvl.trim()).unwrap_or(Level::Pattern), text.trim().to_string()),
            None => (Level::Pattern, l["LEVEL:".len()..].trim().to_string()),
        },
        None => (Level::Pattern, reply.to_string()),
    };
    if crate::experience::normalize_content(&text).is_err() {
        None
    } else {
        Some((level, text))
    }
}
