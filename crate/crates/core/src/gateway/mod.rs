//! Role-based model gateway.
//!
//! Every model invocation goes through [`Gateway::complete`] tagged with the
//! [`Role`] it plays. Each role is bound to its own backend, so the actor,
//! critic, updater and retriever can be served by different models (or by
//! different scripted scenarios in tests).

mod http;
mod scripted;

pub use http::{HttpBackend, HttpConfig};
pub use scripted::{Matcher, ScenarioRule, ScriptedBackend, ScriptedScenario, SCENARIO_FORMAT, SCENARIO_VERSION};

use std::collections::HashMap;
use std::fmt;
use std::path::PathBuf;
use std::sync::{Arc, Condvar, Mutex, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::records::FormatError;

pub const DEFAULT_MAX_IN_FLIGHT: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Role {
    Actor,
    Critic,
    Updater,
    Retriever,
}

impl Role {
    pub const ALL: [Role; 4] = [Role::Actor, Role::Critic, Role::Updater, Role::Retriever];

    pub fn parse(s: &str) -> Option<Role> {
        match s.trim().to_ascii_lowercase().as_str() {
            "actor" => Some(Role::Actor),
            "critic" => Some(Role::Critic),
            "updater" => Some(Role::Updater),
            "retriever" => Some(Role::Retriever),
            _ => None,
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Speaker {
    System,
    User,
    Assistant,
    Tool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub speaker: Speaker,
    pub content: String,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Self { speaker: Speaker::System, content: content.into() }
    }
    pub fn user(content: impl Into<String>) -> Self {
        Self { speaker: Speaker::User, content: content.into() }
    }
    pub fn assistant(content: impl Into<String>) -> Self {
        Self { speaker: Speaker::Assistant, content: content.into() }
    }
    pub fn tool(content: impl Into<String>) -> Self {
        Self { speaker: Speaker::Tool, content: content.into() }
    }
}

/// Declaration of a tool the model may call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolDescriptor {
    pub name: String,
    pub description: String,
    pub parameters: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRequest {
    pub role: Role,
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub max_output: u32,
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tools: Vec<ToolDescriptor>,
}

impl ModelRequest {
    pub fn new(role: Role, system: impl Into<String>, user: impl Into<String>) -> Self {
        Self {
            role,
            messages: vec![Message::system(system), Message::user(user)],
            temperature: 0.0,
            max_output: 2048,
            seed: None,
            tools: Vec::new(),
        }
    }

    pub fn temperature(mut self, t: f64) -> Self {
        self.temperature = t;
        self
    }

    pub fn seed(mut self, seed: Option<u64>) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        match self.messages.first() {
            None => return Err(GatewayError::InvalidRequest("messages are empty".into())),
            Some(m) if m.speaker != Speaker::System => {
                return Err(GatewayError::InvalidRequest("first message must be System".into()))
            }
            _ => {}
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(GatewayError::InvalidRequest(format!("temperature {} < 0", self.temperature)));
        }
        if self.max_output == 0 {
            return Err(GatewayError::InvalidRequest("max_output must be positive".into()));
        }
        Ok(())
    }

    /// All message contents joined by newlines; what scripted rules match on.
    pub fn concatenated_text(&self) -> String {
        self.messages.iter().map(|m| m.content.as_str()).collect::<Vec<_>>().join("\n")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolCall {
    pub tool_name: String,
    pub arguments: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FinishReason {
    Stop,
    Length,
    ToolCall,
    Error,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelResponse {
    pub content: String,
    #[serde(default)]
    pub tool_calls: Vec<ToolCall>,
    pub finish_reason: FinishReason,
}

impl ModelResponse {
    pub fn text(content: impl Into<String>) -> Self {
        Self {
            content: content.into(),
            tool_calls: Vec::new(),
            finish_reason: FinishReason::Stop,
        }
    }

    pub fn tool_call(name: impl Into<String>, arguments: impl Into<String>) -> Self {
        Self {
            content: String::new(),
            tool_calls: vec![ToolCall {
                tool_name: name.into(),
                arguments: arguments.into(),
            }],
            finish_reason: FinishReason::ToolCall,
        }
    }

    /// finish_reason is ToolCall exactly when tool_calls is non-empty.
    pub fn is_consistent(&self) -> bool {
        (self.finish_reason == FinishReason::ToolCall) == !self.tool_calls.is_empty()
    }
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("backend unavailable after {attempts} attempt(s): {detail}")]
    BackendUnavailable { attempts: u32, detail: String },
    #[error("malformed model response: {0}")]
    MalformedResponse(String),
    #[error("no scenario rule or default for role {0}")]
    NoScenarioRule(Role),
    #[error("unknown backend: {0}")]
    UnknownBackend(String),
    #[error("role {0} is not bound to a backend")]
    RoleNotBound(Role),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

impl GatewayError {
    /// Transport or environment failure, as opposed to a bad reply.
    pub fn is_unavailable(&self) -> bool {
        matches!(self, GatewayError::BackendUnavailable { .. } | GatewayError::RoleNotBound(_))
    }
}

pub trait Backend: Send + Sync {
    /// Identifier recorded as the producer of generated text.
    fn model_id(&self) -> String;
    fn complete(&self, request: &ModelRequest) -> Result<ModelResponse, GatewayError>;
}

/// How to construct a backend for a role.
#[derive(Debug, Clone, PartialEq)]
pub enum BackendConfig {
    Scripted(PathBuf),
    Http(HttpConfig),
}

impl BackendConfig {
    /// Parses `scripted:<scenario file>` or `http:<model>[@<base url>]`.
    pub fn parse(spec: &str) -> Result<Self, GatewayError> {
        let (kind, rest) = spec
            .split_once(':')
            .ok_or_else(|| GatewayError::UnknownBackend(format!("{spec:?} (expected scripted:<file> or http:<model>)")))?;
        match kind.trim() {
            "scripted" if !rest.trim().is_empty() => Ok(BackendConfig::Scripted(PathBuf::from(rest.trim()))),
            "http" if !rest.trim().is_empty() => {
                let (model, base) = match rest.split_once('@') {
                    Some((m, b)) => (m.trim(), Some(b.trim().to_string())),
                    None => (rest.trim(), None),
                };
                let mut cfg = HttpConfig::from_env(model);
                if let Some(b) = base {
                    cfg.base_url = b;
                }
                Ok(BackendConfig::Http(cfg))
            }
            _ => Err(GatewayError::UnknownBackend(spec.to_string())),
        }
    }

    pub fn build(&self) -> Result<Arc<dyn Backend>, GatewayError> {
        match self {
            BackendConfig::Scripted(path) => {
                let scenario = ScriptedScenario::load(path).map_err(|e: FormatError| {
                    GatewayError::UnknownBackend(format!("scenario {}: {e}", path.display()))
                })?;
                Ok(Arc::new(ScriptedBackend::new(scenario)))
            }
            BackendConfig::Http(cfg) => {
                if cfg.base_url.trim().is_empty() {
                    return Err(GatewayError::UnknownBackend(
                        "http backend has no endpoint (set FLEX_API_BASE)".into(),
                    ));
                }
                Ok(Arc::new(HttpBackend::new(cfg.clone())))
            }
        }
    }
}

/// Counting semaphore capping concurrent calls into one backend.
struct Limiter {
    cap: usize,
    in_flight: Mutex<usize>,
    freed: Condvar,
}

impl Limiter {
    fn new(cap: usize) -> Self {
        Self {
            cap: cap.max(1),
            in_flight: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut n = self.in_flight.lock().unwrap();
        while *n >= self.cap {
            n = self.freed.wait(n).unwrap();
        }
        *n += 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a Limiter);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.in_flight.lock().unwrap() -= 1;
        self.0.freed.notify_one();
    }
}

struct Binding {
    backend: Arc<dyn Backend>,
    limiter: Limiter,
}

/// One logged invocation.
#[derive(Debug, Clone)]
pub struct CallRecord {
    pub role: Role,
    pub model_id: String,
    pub request_text: String,
    pub outcome: Result<String, String>,
}

pub struct Gateway {
    bindings: RwLock<HashMap<Role, Binding>>,
    log: Mutex<Vec<CallRecord>>,
    max_in_flight: usize,
}

impl Default for Gateway {
    fn default() -> Self {
        Self::new()
    }
}

impl Gateway {
    pub fn new() -> Self {
        Self::with_max_in_flight(DEFAULT_MAX_IN_FLIGHT)
    }

    pub fn with_max_in_flight(max_in_flight: usize) -> Self {
        Self {
            bindings: RwLock::new(HashMap::new()),
            log: Mutex::new(Vec::new()),
            max_in_flight,
        }
    }

    /// Binds `role` to a freshly built backend. Blocks until no call is in
    /// flight.
    pub fn bind(&self, role: Role, config: &BackendConfig) -> Result<(), GatewayError> {
        let backend = config.build()?;
        self.bind_backend(role, backend);
        Ok(())
    }

    pub fn bind_backend(&self, role: Role, backend: Arc<dyn Backend>) {
        let binding = Binding {
            backend,
            limiter: Limiter::new(self.max_in_flight),
        };
        self.bindings.write().unwrap().insert(role, binding);
    }

    /// Convenience: bind an in-memory scenario.
    pub fn bind_scenario(&self, role: Role, scenario: ScriptedScenario) {
        self.bind_backend(role, Arc::new(ScriptedBackend::new(scenario)));
    }

    pub fn unbind(&self, role: Role) {
        self.bindings.write().unwrap().remove(&role);
    }

    pub fn is_bound(&self, role: Role) -> bool {
        self.bindings.read().unwrap().contains_key(&role)
    }

    pub fn model_id(&self, role: Role) -> Option<String> {
        self.bindings.read().unwrap().get(&role).map(|b| b.backend.model_id())
    }

    pub fn complete(&self, request: &ModelRequest) -> Result<ModelResponse, GatewayError> {
        request.validate()?;
        let bindings = self.bindings.read().unwrap();
        let binding = bindings.get(&request.role).ok_or(GatewayError::RoleNotBound(request.role))?;
        let result = {
            let _permit = binding.limiter.acquire();
            binding.backend.complete(request)
        };
        let result = result.and_then(|r| {
            if r.is_consistent() {
                Ok(r)
            } else {
                Err(GatewayError::MalformedResponse("finish_reason disagrees with tool_calls".into()))
            }
        });
        self.log.lock().unwrap().push(CallRecord {
            role: request.role,
            model_id: binding.backend.model_id(),
            request_text: request.concatenated_text(),
            outcome: match &result {
                Ok(r) => Ok(r.content.clone()),
                Err(e) => Err(e.to_string()),
            },
        });
        result
    }

    pub fn calls(&self) -> Vec<CallRecord> {
        self.log.lock().unwrap().clone()
    }

    pub fn call_count(&self, role: Role) -> usize {
        self.log.lock().unwrap().iter().filter(|c| c.role == role).count()
    }

    pub fn clear_log(&self) {
        self.log.lock().unwrap().clear();
    }
}
