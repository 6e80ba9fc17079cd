//! Chat-completion HTTP backend with bounded exponential-backoff retries.

use std::time::Duration;

use serde_json::{json, Value};

use super::{Backend, FinishReason, GatewayError, ModelRequest, ModelResponse, Speaker, ToolCall};

pub const API_KEY_ENV: &str = "FLEX_API_KEY";
pub const API_BASE_ENV: &str = "FLEX_API_BASE";

#[derive(Debug, Clone, PartialEq)]
pub struct HttpConfig {
    pub model: String,
    /// Base URL; requests go to `<base_url>/chat/completions`.
    pub base_url: String,
    pub api_key: Option<String>,
    pub max_attempts: u32,
    pub backoff_base: Duration,
    pub backoff_factor: u32,
    pub timeout: Duration,
}

impl HttpConfig {
    pub fn new(model: impl Into<String>, base_url: impl Into<String>) -> Self {
        Self {
            model: model.into(),
            base_url: base_url.into(),
            api_key: None,
            max_attempts: 3,
            backoff_base: Duration::from_millis(500),
            backoff_factor: 2,
            timeout: Duration::from_secs(120),
        }
    }

    /// Endpoint from `FLEX_API_BASE`, bearer token from `FLEX_API_KEY`.
    pub fn from_env(model: impl Into<String>) -> Self {
        let mut cfg = Self::new(model, std::env::var(API_BASE_ENV).unwrap_or_default());
        cfg.api_key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        cfg
    }

    fn delay_before(&self, attempt: u32) -> Duration {
        // attempt is 1-based; no delay before the first.
        self.backoff_base * self.backoff_factor.saturating_pow(attempt.saturating_sub(2))
    }
}

pub struct HttpBackend {
    config: HttpConfig,
    agent: ureq::Agent,
}

enum AttemptError {
    Retryable(String),
    Fatal(GatewayError),
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self { config, agent }
    }

    pub fn config(&self) -> &HttpConfig {
        &self.config
    }

    fn url(&self) -> String {
        format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'))
    }

    fn attempt(&self, body: &Value) -> Result<ModelResponse, AttemptError> {
        let mut req = self.agent.post(&self.url()).header("Content-Type", "application/json");
        if let Some(key) = &self.config.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req
            .send(body.to_string().as_bytes())
            .map_err(|e| AttemptError::Retryable(format!("transport: {e}")))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| AttemptError::Retryable(format!("reading body: {e}")))?;
        if status == 429 || (500..600).contains(&status) {
            return Err(AttemptError::Retryable(format!("HTTP {status}")));
        }
        if !(200..300).contains(&status) {
            return Err(AttemptError::Fatal(GatewayError::BackendUnavailable {
                attempts: 1,
                detail: format!("HTTP {status}: {}", truncate(&text, 200)),
            }));
        }
        parse_response(&text).map_err(AttemptError::Fatal)
    }
}

impl Backend for HttpBackend {
    fn model_id(&self) -> String {
        self.config.model.clone()
    }

    fn complete(&self, request: &ModelRequest) -> Result<ModelResponse, GatewayError> {
        let body = request_body(&self.config.model, request);
        let attempts = self.config.max_attempts.max(1);
        let mut last = String::new();
        for attempt in 1..=attempts {
            if attempt > 1 {
                std::thread::sleep(self.config.delay_before(attempt));
            }
            match self.attempt(&body) {
                Ok(r) => return Ok(r),
                Err(AttemptError::Fatal(e)) => return Err(e),
                Err(AttemptError::Retryable(msg)) => last = msg,
            }
        }
        Err(GatewayError::BackendUnavailable { attempts, detail: last })
    }
}

fn truncate(s: &str, n: usize) -> &str {
    match s.char_indices().nth(n) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

/// Wire body: `{model, messages:[{role,content}], temperature, max_tokens, seed?, tools?}`.
pub fn request_body(model: &str, request: &ModelRequest) -> Value {
    let messages: Vec<Value> = request
        .messages
        .iter()
        .map(|m| {
            let role = match m.speaker {
                Speaker::System => "system",
                Speaker::User => "user",
                Speaker::Assistant => "assistant",
                Speaker::Tool => "tool",
            };
            json!({ "role": role, "content": m.content })
        })
        .collect();
    let mut body = json!({
        "model": model,
        "messages": messages,
        "temperature": request.temperature,
        "max_tokens": request.max_output,
    });
    if let Some(seed) = request.seed {
        body["seed"] = json!(seed);
    }
    if !request.tools.is_empty() {
        body["tools"] = request
            .tools
            .iter()
            .map(|t| json!({ "type": "function", "function": t }))
            .collect();
    }
    body
}

/// Parses `{choices:[{message:{content, tool_calls?}, finish_reason}]}`.
pub fn parse_response(text: &str) -> Result<ModelResponse, GatewayError> {
    let malformed = |m: &str| GatewayError::MalformedResponse(m.to_string());
    let v: Value = serde_json::from_str(text).map_err(|e| GatewayError::MalformedResponse(e.to_string()))?;
    let choice = v
        .get("choices")
        .and_then(|c| c.as_array())
        .and_then(|c| c.first())
        .ok_or_else(|| malformed("missing choices[0]"))?;
    let message = choice.get("message").ok_or_else(|| malformed("missing message"))?;
    let content = match message.get("content") {
        None | Some(Value::Null) => String::new(),
        Some(Value::String(s)) => s.clone(),
        Some(_) => return Err(malformed("content is not a string")),
    };
    let mut tool_calls = Vec::new();
    if let Some(calls) = message.get("tool_calls").and_then(|c| c.as_array()) {
        for call in calls {
            let f = call.get("function").unwrap_or(call);
            let name = f
                .get("name")
                .or_else(|| f.get("tool_name"))
                .and_then(|n| n.as_str())
                .ok_or_else(|| malformed("tool call without a name"))?;
            let arguments = match f.get("arguments") {
                Some(Value::String(s)) => s.clone(),
                Some(other) => other.to_string(),
                None => String::new(),
            };
            tool_calls.push(ToolCall {
                tool_name: name.to_string(),
                arguments,
            });
        }
    }
    let finish_reason = if !tool_calls.is_empty() {
        FinishReason::ToolCall
    } else {
        match choice.get("finish_reason").and_then(|f| f.as_str()) {
            Some("length") => FinishReason::Length,
            Some("error") => FinishReason::Error,
            _ => FinishReason::Stop,
        }
    };
    Ok(ModelResponse {
        content,
        tool_calls,
        finish_reason,
    })
}
