//! Deterministic rule-matching backend.
//!
//! A scenario is an ordered list of rules per role. A rule matches when every
//! `contains` substring occurs in the concatenated request text and, if set,
//! its regex matches too. The first matching rule answers; otherwise the
//! role's default does.

use std::collections::BTreeMap;
use std::path::Path;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{Backend, FinishReason, GatewayError, ModelRequest, ModelResponse, Role, ToolCall};
use crate::records::{self, FormatError};

pub const SCENARIO_FORMAT: &str = "flex-scenario";
pub const SCENARIO_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Matcher {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub contains: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regex: Option<String>,
}

impl Matcher {
    pub fn contains(s: impl Into<String>) -> Self {
        Self {
            contains: vec![s.into()],
            regex: None,
        }
    }

    pub fn all_of<I, S>(parts: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            contains: parts.into_iter().map(Into::into).collect(),
            regex: None,
        }
    }

    pub fn regex(pattern: impl Into<String>) -> Self {
        Self {
            contains: Vec::new(),
            regex: Some(pattern.into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioRule {
    pub role: Role,
    pub matcher: Matcher,
    pub response: ModelResponse,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScriptedScenario {
    pub name: String,
    pub rules: Vec<ScenarioRule>,
    pub defaults: BTreeMap<Role, ModelResponse>,
}

impl ScriptedScenario {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            ..Self::default()
        }
    }

    pub fn push_rule(&mut self, role: Role, matcher: Matcher, response: ModelResponse) -> &mut Self {
        self.rules.push(ScenarioRule { role, matcher, response });
        self
    }

    pub fn set_default(&mut self, role: Role, response: ModelResponse) -> &mut Self {
        self.defaults.insert(role, response);
        self
    }

    /// Appends another scenario's rules after this one's; defaults already
    /// present here are kept.
    pub fn extend(&mut self, other: ScriptedScenario) {
        self.rules.extend(other.rules);
        for (role, resp) in other.defaults {
            self.defaults.entry(role).or_insert(resp);
        }
    }

    pub fn to_text(&self) -> String {
        let mut recs: Vec<ScenarioRecord> = self
            .rules
            .iter()
            .map(|r| ScenarioRecord::Rule {
                role: r.role,
                matcher: r.matcher.clone(),
                response: (&r.response).into(),
            })
            .collect();
        recs.extend(self.defaults.iter().map(|(role, resp)| ScenarioRecord::Default {
            role: *role,
            response: resp.into(),
        }));
        records::render(SCENARIO_FORMAT, SCENARIO_VERSION, ScenarioHeader { name: self.name.clone() }, &recs)
    }

    pub fn from_text(text: &str) -> Result<Self, FormatError> {
        let parsed = records::parse::<ScenarioHeader, ScenarioRecord>(text, SCENARIO_FORMAT, SCENARIO_VERSION)?;
        let mut s = ScriptedScenario::new(parsed.header.name);
        for (line, rec) in parsed.records {
            match rec {
                ScenarioRecord::Rule { role, matcher, response } => {
                    if let Some(p) = &matcher.regex {
                        Regex::new(p).map_err(|e| FormatError::corrupt(line, format!("bad regex: {e}")))?;
                    }
                    let response = response.into_response().map_err(|e| FormatError::corrupt(line, e))?;
                    s.push_rule(role, matcher, response);
                }
                ScenarioRecord::Default { role, response } => {
                    let response = response.into_response().map_err(|e| FormatError::corrupt(line, e))?;
                    if s.defaults.insert(role, response).is_some() {
                        return Err(FormatError::corrupt(line, format!("second default for {role}")));
                    }
                }
            }
        }
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<(), FormatError> {
        records::write_atomic(path, &self.to_text()).map_err(|e| FormatError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, FormatError> {
        Self::from_text(&records::read_file(path)?)
    }
}

#[derive(Serialize, Deserialize)]
struct ScenarioHeader {
    #[serde(default)]
    name: String,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum ScenarioRecord {
    Rule {
        role: Role,
        #[serde(flatten)]
        matcher: Matcher,
        response: ResponseTemplate,
    },
    Default {
        role: Role,
        response: ResponseTemplate,
    },
}

/// Response as written in scenario files; finish_reason may be omitted and is
/// then derived from the presence of tool calls.
#[derive(Serialize, Deserialize)]
struct ResponseTemplate {
    #[serde(default)]
    content: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    tool_calls: Vec<ToolCall>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    finish_reason: Option<FinishReason>,
}

impl From<&ModelResponse> for ResponseTemplate {
    fn from(r: &ModelResponse) -> Self {
        let derived = if r.tool_calls.is_empty() { FinishReason::Stop } else { FinishReason::ToolCall };
        Self {
            content: r.content.clone(),
            tool_calls: r.tool_calls.clone(),
            finish_reason: (r.finish_reason != derived).then_some(r.finish_reason),
        }
    }
}

impl ResponseTemplate {
    fn into_response(self) -> Result<ModelResponse, String> {
        let finish_reason = self.finish_reason.unwrap_or(if self.tool_calls.is_empty() {
            FinishReason::Stop
        } else {
            FinishReason::ToolCall
        });
        let r = ModelResponse {
            content: self.content,
            tool_calls: self.tool_calls,
            finish_reason,
        };
        if r.is_consistent() {
            Ok(r)
        } else {
            Err("finish_reason ToolCall requires tool_calls and vice versa".into())
        }
    }
}

struct CompiledRule {
    role: Role,
    contains: Vec<String>,
    regex: Option<Regex>,
    response: ModelResponse,
}

pub struct ScriptedBackend {
    name: String,
    rules: Vec<CompiledRule>,
    defaults: BTreeMap<Role, ModelResponse>,
}

impl ScriptedBackend {
    /// Compiles the scenario. Rules with invalid regexes never match.
    pub fn new(scenario: ScriptedScenario) -> Self {
        let rules = scenario
            .rules
            .into_iter()
            .map(|r| CompiledRule {
                role: r.role,
                contains: r.matcher.contains,
                regex: r.matcher.regex.as_deref().map(|p| Regex::new(p).unwrap_or_else(|_| Regex::new("$^").unwrap())),
                response: r.response,
            })
            .collect();
        Self {
            name: scenario.name,
            rules,
            defaults: scenario.defaults,
        }
    }
}

impl Backend for ScriptedBackend {
    fn model_id(&self) -> String {
        format!("scripted:{}", self.name)
    }

    fn complete(&self, request: &ModelRequest) -> Result<ModelResponse, GatewayError> {
        let text = request.concatenated_text();
        self.rules
            .iter()
            .filter(|r| r.role == request.role)
            .find(|r| {
                r.contains.iter().all(|c| text.contains(c.as_str()))
                    && r.regex.as_ref().is_none_or(|re| re.is_match(&text))
            })
            .map(|r| r.response.clone())
            .or_else(|| self.defaults.get(&request.role).cloned())
            .ok_or(GatewayError::NoScenarioRule(request.role))
    }
}
