//! Hierarchical retrieval over the experience library.
//!
//! Retrieval runs in three stages (strategies, then patterns, then
//! instances). Each stage scores the entries of its level and keeps the
//! top `k`. Later stages present entries that share vocabulary with the
//! previous stage's picks first, which matters for the model-backed scorer
//! whose pool is capped. Without a bound Retriever role the deterministic
//! token-Jaccard scorer is used.
//!
//! The same machinery is exposed to the actor as the `experience_lookup`
//! tool.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::experience::{EntryId, ExperienceEntry, ExperienceLibrary, Level, Zone};
use crate::gateway::{Gateway, ModelRequest, Role, ToolDescriptor};
use crate::lexical::{jaccard_sets, token_set};
use crate::templates::Templates;

pub const DEFAULT_K: usize = 5;
pub const TOOL_NAME: &str = "experience_lookup";
/// Most entries shown to a model-backed scorer per stage.
pub const ROLE_POOL_CAP: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LibraryMode {
    #[default]
    Hierarchical,
    /// All levels collapsed; retrieval runs a single stage.
    Flat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalQuery {
    pub query_text: String,
    pub reasoning_state: Option<String>,
    pub k: usize,
    pub zones: BTreeSet<Zone>,
    pub mode: LibraryMode,
}

impl RetrievalQuery {
    pub fn new(query_text: impl Into<String>) -> Self {
        Self {
            query_text: query_text.into(),
            reasoning_state: None,
            k: DEFAULT_K,
            zones: Zone::ALL.into_iter().collect(),
            mode: LibraryMode::Hierarchical,
        }
    }

    pub fn k(mut self, k: usize) -> Self {
        self.k = k;
        self
    }

    pub fn reasoning_state(mut self, state: impl Into<String>) -> Self {
        self.reasoning_state = Some(state.into());
        self
    }

    pub fn zones(mut self, zones: &[Zone]) -> Self {
        self.zones = zones.iter().copied().collect();
        self
    }

    pub fn mode(mut self, mode: LibraryMode) -> Self {
        self.mode = mode;
        self
    }

    /// Text the lexical scorer compares entries against.
    pub fn context_text(&self) -> String {
        match &self.reasoning_state {
            Some(s) => format!("{} {}", self.query_text, s),
            None => self.query_text.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoredEntry {
    pub entry_id: EntryId,
    pub score: f64,
    pub content: String,
    pub zone: Zone,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct RetrievalResult {
    pub strategies: Vec<ScoredEntry>,
    pub patterns: Vec<ScoredEntry>,
    pub instances: Vec<ScoredEntry>,
    pub flattened_context: String,
}

impl RetrievalResult {
    /// Every returned id, stage by stage.
    pub fn hits(&self) -> Vec<EntryId> {
        self.stages().flat_map(|s| s.iter().map(|e| e.entry_id)).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.stages().all(|s| s.is_empty())
    }

    fn stages(&self) -> impl Iterator<Item = &Vec<ScoredEntry>> {
        [&self.strategies, &self.patterns, &self.instances].into_iter()
    }
}

/// Sorts by score descending, ties by ascending id, and keeps `k`.
pub fn rank_top_k(mut scored: Vec<ScoredEntry>, k: usize) -> Vec<ScoredEntry> {
    scored.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.entry_id.cmp(&b.entry_id)));
    scored.truncate(k);
    scored
}

/// Runs hierarchical retrieval. Uses the Retriever role when `gateway` has
/// one bound, falling back to lexical scoring for any stage whose model call
/// fails. Never mutates the library; callers record usage from
/// [`RetrievalResult::hits`].
pub fn retrieve(
    query: &RetrievalQuery,
    library: &ExperienceLibrary,
    gateway: Option<&Gateway>,
    templates: &Templates,
) -> RetrievalResult {
    let role_scorer = gateway.filter(|g| g.is_bound(Role::Retriever));
    let k = query.k.max(1);
    let query_tokens = token_set(&query.context_text());
    let score_stage = |pool: Vec<&ExperienceEntry>| -> Vec<ScoredEntry> {
        if pool.is_empty() {
            return Vec::new();
        }
        let scores = role_scorer
            .and_then(|g| role_scores(g, templates, query, &pool).ok())
            .unwrap_or_else(|| {
                pool.iter()
                    .map(|e| jaccard_sets(&query_tokens, &token_set(&e.content)))
                    .collect()
            });
        let scored = pool
            .iter()
            .zip(scores)
            .map(|(e, score)| ScoredEntry {
                entry_id: e.id,
                score,
                content: e.content.clone(),
                zone: e.zone,
            })
            .collect();
        rank_top_k(scored, k)
    };
    let capped = role_scorer.is_some();
    let cap = |pool| cap_pool(pool, capped);

    let mut result = RetrievalResult::default();
    match query.mode {
        LibraryMode::Flat => {
            let pool: Vec<_> = library.entries().filter(|e| query.zones.contains(&e.zone)).collect();
            result.patterns = score_stage(cap(pool));
        }
        LibraryMode::Hierarchical => {
            let level_pool = |level: Level| -> Vec<&ExperienceEntry> {
                library
                    .entries()
                    .filter(|e| e.level == level && query.zones.contains(&e.zone))
                    .collect()
            };
            result.strategies = score_stage(cap(level_pool(Level::Strategy)));
            let patterns_pool = bias_pool(level_pool(Level::Pattern), &result.strategies);
            result.patterns = score_stage(cap(patterns_pool));
            let instances_pool = bias_pool(level_pool(Level::Instance), &result.patterns);
            result.instances = score_stage(cap(instances_pool));
        }
    }
    result.flattened_context = flatten(&result);
    result
}

fn cap_pool(pool: Vec<&ExperienceEntry>, capped: bool) -> Vec<&ExperienceEntry> {
    if capped {
        pool.into_iter().take(ROLE_POOL_CAP).collect()
    } else {
        pool
    }
}

/// Stable reorder: entries sharing a token with any selected parent first.
fn bias_pool<'a>(pool: Vec<&'a ExperienceEntry>, parents: &[ScoredEntry]) -> Vec<&'a ExperienceEntry> {
    if parents.is_empty() {
        return pool;
    }
    let parent_tokens: BTreeSet<String> = parents.iter().flat_map(|p| token_set(&p.content)).collect();
    let (linked, rest): (Vec<_>, Vec<_>) = pool
        .into_iter()
        .partition(|e| token_set(&e.content).iter().any(|t| parent_tokens.contains(t)));
    linked.into_iter().chain(rest).collect()
}

fn role_scores(
    gateway: &Gateway,
    templates: &Templates,
    query: &RetrievalQuery,
    pool: &[&ExperienceEntry],
) -> Result<Vec<f64>, crate::gateway::GatewayError> {
    let mut listing = String::new();
    for e in pool {
        let _ = writeln!(listing, "[{}] {}", e.id, e.content);
    }
    let user = templates.render(
        &templates.retriever_user,
        &[
            ("question", &query.query_text),
            ("reasoning_state", query.reasoning_state.as_deref().unwrap_or("")),
            ("candidates", &listing),
        ],
    );
    let req = ModelRequest::new(Role::Retriever, templates.retriever_system.clone(), user);
    let resp = gateway.complete(&req)?;
    Ok(parse_relevance(&resp.content, pool))
}

/// Parses `<id>: <score>` lines; ids not mentioned score 0.
pub fn parse_relevance(text: &str, pool: &[&ExperienceEntry]) -> Vec<f64> {
    let mut scores = vec![0.0; pool.len()];
    for line in text.lines() {
        let Some((id, score)) = line.split_once([':', '=']) else {
            continue;
        };
        let id = id.trim().trim_start_matches('[').trim_end_matches(']');
        let (Ok(id), Ok(score)) = (id.parse::<u64>(), score.trim().parse::<f64>()) else {
            continue;
        };
        if let Some(pos) = pool.iter().position(|e| e.id == EntryId(id)) {
            if score.is_finite() {
                scores[pos] = score;
            }
        }
    }
    scores
}

/// Prompt block: golden entries under their level heading, warning entries
/// collected under WARNINGS.
pub fn flatten(result: &RetrievalResult) -> String {
    let mut sections = Vec::new();
    let mut warnings = Vec::new();
    for (title, stage) in [
        ("STRATEGIES", &result.strategies),
        ("PATTERNS", &result.patterns),
        ("INSTANCES", &result.instances),
    ] {
        let golden: Vec<String> = stage
            .iter()
            .filter(|e| e.zone == Zone::Golden)
            .map(|e| format!("[G#{}] {}", e.entry_id, e.content))
            .collect();
        warnings.extend(
            stage
                .iter()
                .filter(|e| e.zone == Zone::Warning)
                .map(|e| format!("[W#{}] {}", e.entry_id, e.content)),
        );
        if !golden.is_empty() {
            sections.push(format!("{title}\n{}", golden.join("\n")));
        }
    }
    if !warnings.is_empty() {
        sections.push(format!("WARNINGS\n{}", warnings.join("\n")));
    }
    sections.join("\n\n")
}

pub fn as_tool() -> ToolDescriptor {
    ToolDescriptor {
        name: TOOL_NAME.to_string(),
        description: "Look up distilled experiences (strategies, patterns, instances and warnings) relevant to a query."
            .to_string(),
        parameters: json!({
            "type": "object",
            "properties": {
                "query": { "type": "string", "description": "What to look up" },
                "k": { "type": "integer", "minimum": 1, "description": "Entries per level (default 5)" }
            },
            "required": ["query"]
        }),
    }
}

#[derive(Debug, Deserialize)]
struct ToolArgs {
    query: String,
    #[serde(default)]
    k: Option<usize>,
}

/// Output of one tool invocation.
#[derive(Debug, Clone, PartialEq)]
pub struct ToolOutcome {
    /// Text spliced into the conversation as a Tool message.
    pub message: String,
    pub hits: Vec<EntryId>,
}

/// Executes an `experience_lookup` call. Malformed arguments produce an
/// error string for the model instead of failing the conversation.
pub fn run_tool(
    arguments: &str,
    library: &ExperienceLibrary,
    mode: LibraryMode,
    gateway: Option<&Gateway>,
    templates: &Templates,
) -> ToolOutcome {
    let args: ToolArgs = match serde_json::from_str(arguments) {
        Ok(a) => a,
        Err(e) => {
            return ToolOutcome {
                message: format!("error: malformed {TOOL_NAME} arguments: {e}"),
                hits: Vec::new(),
            }
        }
    };
    if args.k == Some(0) {
        return ToolOutcome {
            message: format!("error: malformed {TOOL_NAME} arguments: k must be at least 1"),
            hits: Vec::new(),
        };
    }
    let query = RetrievalQuery::new(args.query).k(args.k.unwrap_or(DEFAULT_K)).mode(mode);
    let result = retrieve(&query, library, gateway, templates);
    let message = if result.flattened_context.is_empty() {
        "(no matching experiences)".to_string()
    } else {
        result.flattened_context.clone()
    };
    ToolOutcome {
        message,
        hits: result.hits(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experience::{Clock, Provenance};
    use crate::gateway::{Matcher, ModelResponse, ScriptedScenario};

    fn src() -> Provenance {
        Provenance::new("t", 0, "p", 0)
    }

    fn tpl() -> Templates {
        Templates::default()
    }

    #[test]
    fn empty_library() {
        let lib = ExperienceLibrary::new();
        let r = retrieve(&RetrievalQuery::new("anything"), &lib, None, &tpl());
        assert!(r.is_empty());
        assert_eq!(r.flattened_context, "");
    }

    #[test]
    fn seven_strategies_k5() {
        let mut lib = ExperienceLibrary::new().with_clock(Clock::logical());
        let texts = [
            "check parity of the sum",
            "draw the triangle first",
            "sum digits then check parity",
            "use modular arithmetic on the sum",
            "parity sum check modular",
            "unrelated advice entirely",
            "think about the sum",
        ];
        for t in texts {
            lib.insert(Zone::Golden, Level::Strategy, t, src(), 0.5).unwrap();
        }
        let q = RetrievalQuery::new("check the parity of the sum");
        let r = retrieve(&q, &lib, None, &tpl());
        assert_eq!(r.strategies.len(), 5);
        assert!(r.strategies.windows(2).all(|w| w[0].score >= w[1].score));
        // Hand-computed: query tokens {check,the,parity,of,sum}.
        // id1 {check,parity,of,the,sum}=5/5; id3 {sum,digits,then,check,parity}=3/7;
        // id5 {parity,sum,check,modular}=3/6; id7 {think,about,the,sum}=2/7;
        // id4 {use,modular,arithmetic,on,the,sum}=2/9; id2 1/8; id6 0.
        let ids: Vec<u64> = r.strategies.iter().map(|e| e.entry_id.0).collect();
        assert_eq!(ids, vec![1, 5, 3, 7, 4]);
        assert_eq!(r.strategies[0].score, 1.0);
    }

    #[test]
    fn ties_break_on_lower_id() {
        let mut lib = ExperienceLibrary::new();
        lib.insert(Zone::Golden, Level::Pattern, "alpha one", src(), 0.5).unwrap();
        lib.insert(Zone::Golden, Level::Pattern, "alpha two", src(), 0.5).unwrap();
        let r = retrieve(&RetrievalQuery::new("alpha"), &lib, None, &tpl());
        assert_eq!(r.patterns[0].score, r.patterns[1].score);
        assert_eq!(r.patterns[0].entry_id, EntryId(1));
    }

    #[test]
    fn flattened_context_layout() {
        let mut lib = ExperienceLibrary::new();
        lib.insert(Zone::Golden, Level::Strategy, "plan globally", src(), 0.5).unwrap();
        lib.insert(Zone::Warning, Level::Pattern, "do not forget units", src(), 0.5).unwrap();
        lib.insert(Zone::Golden, Level::Instance, "2+2 is 4", src(), 0.5).unwrap();
        let r = retrieve(&RetrievalQuery::new("x"), &lib, None, &tpl());
        assert_eq!(
            r.flattened_context,
            "STRATEGIES\n[G#1] plan globally\n\nINSTANCES\n[G#3] 2+2 is 4\n\nWARNINGS\n[W#2] do not forget units"
        );
    }

    #[test]
    fn zone_filter_and_flat_mode() {
        let mut lib = ExperienceLibrary::new();
        lib.insert(Zone::Golden, Level::Strategy, "a", src(), 0.5).unwrap();
        lib.insert(Zone::Warning, Level::Instance, "b", src(), 0.5).unwrap();
        let golden = retrieve(&RetrievalQuery::new("a").zones(&[Zone::Golden]), &lib, None, &tpl());
        assert_eq!(golden.hits(), vec![EntryId(1)]);
        let flat = retrieve(&RetrievalQuery::new("a").mode(LibraryMode::Flat), &lib, None, &tpl());
        assert!(flat.strategies.is_empty() && flat.instances.is_empty());
        assert_eq!(flat.patterns.len(), 2);
    }

    #[test]
    fn pool_bias_puts_linked_entries_first() {
        let mut lib = ExperienceLibrary::new();
        let a = lib.insert(Zone::Golden, Level::Pattern, "zeta pattern", src(), 0.5).unwrap();
        let b = lib.insert(Zone::Golden, Level::Pattern, "omega pattern about graphs", src(), 0.5).unwrap();
        let entries: Vec<&ExperienceEntry> = lib.entries().collect();
        let parents = vec![ScoredEntry {
            entry_id: EntryId(99),
            score: 1.0,
            content: "graphs strategy".into(),
            zone: Zone::Golden,
        }];
        let biased = bias_pool(entries, &parents);
        assert_eq!(biased.iter().map(|e| e.id).collect::<Vec<_>>(), vec![b, a]);
    }

    #[test]
    fn retriever_role_scores_are_used() {
        let mut lib = ExperienceLibrary::new();
        lib.insert(Zone::Golden, Level::Pattern, "lexically perfect match", src(), 0.5).unwrap();
        lib.insert(Zone::Golden, Level::Pattern, "contextually better", src(), 0.5).unwrap();
        let g = Gateway::new();
        let mut s = ScriptedScenario::new("r");
        s.set_default(Role::Retriever, ModelResponse::text("1: 0.1\n2: 0.9"));
        g.bind_scenario(Role::Retriever, s);
        let r = retrieve(&RetrievalQuery::new("lexically perfect match"), &lib, Some(&g), &tpl());
        assert_eq!(r.patterns[0].entry_id, EntryId(2));
        assert_eq!(g.call_count(Role::Retriever), 1);
    }

    #[test]
    fn retriever_failure_falls_back_to_lexical() {
        let mut lib = ExperienceLibrary::new();
        lib.insert(Zone::Golden, Level::Pattern, "foo bar", src(), 0.5).unwrap();
        lib.insert(Zone::Golden, Level::Pattern, "baz", src(), 0.5).unwrap();
        let g = Gateway::new();
        let mut s = ScriptedScenario::new("r");
        s.push_rule(Role::Retriever, Matcher::contains("never"), ModelResponse::text(""));
        g.bind_scenario(Role::Retriever, s);
        let r = retrieve(&RetrievalQuery::new("foo"), &lib, Some(&g), &tpl());
        assert_eq!(r.patterns[0].entry_id, EntryId(1));
    }

    #[test]
    fn tool_calls() {
        let mut lib = ExperienceLibrary::new();
        lib.insert(Zone::Golden, Level::Pattern, "mesylate disconnection precedes substitution", src(), 0.5).unwrap();
        lib.insert(Zone::Golden, Level::Pattern, "another pattern", src(), 0.5).unwrap();
        let out = run_tool(r#"{"query":"mesylate disconnection"}"#, &lib, LibraryMode::Hierarchical, None, &tpl());
        assert!(out.message.contains("mesylate disconnection precedes substitution"));
        let one = run_tool(r#"{"query":"pattern","k":1}"#, &lib, LibraryMode::Hierarchical, None, &tpl());
        assert_eq!(one.hits.len(), 1);
        let bad = run_tool(r#"{"k":2}"#, &lib, LibraryMode::Hierarchical, None, &tpl());
        assert!(bad.message.starts_with("error:"));
        assert!(bad.hits.is_empty());
        let garbage = run_tool("not json", &lib, LibraryMode::Hierarchical, None, &tpl());
        assert!(garbage.message.starts_with("error:"));
    }

    #[test]
    fn descriptor_shape() {
        let d = as_tool();
        assert_eq!(d.name, "experience_lookup");
        assert_eq!(d.parameters["required"][0], "query");
    }
}
