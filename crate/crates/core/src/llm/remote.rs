//! Chat-completions backend over HTTP.
//!
//! Speaks the common `POST {base}/chat/completions` JSON shape (`messages`,
//! `tools`, `tool_calls`), so any compatible endpoint works given a base URL
//! and key. Transport failures, HTTP 429 and 5xx are retried with exponential
//! backoff.

use std::time::Duration;

use serde_json::{json, Value};

use super::{
    ChatBackend, ChatMessage, CompletionRequest, CompletionResponse, FinishReason, LlmError, Role,
    ToolCall, Usage,
};

pub const ENV_API_KEY: &str = "FL_API_KEY";
pub const ENV_BASE_URL: &str = "FL_API_BASE_URL";
pub const ENV_MODEL: &str = "FL_MODEL";
pub const DEFAULT_MODEL: &str = "gpt-4o-mini-2024-07-18";
pub const DEFAULT_BASE_URL: &str = "https://api.openai.com/v1";

#[derive(Debug, Clone)]
pub struct RemoteConfig {
    pub base_url: String,
    pub api_key: Option<String>,
    pub model: String,
    pub max_retries: u32,
    pub initial_backoff: Duration,
    pub timeout: Duration,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            base_url: DEFAULT_BASE_URL.to_string(),
            api_key: None,
            model: DEFAULT_MODEL.to_string(),
            max_retries: 3,
            initial_backoff: Duration::from_millis(500),
            timeout: Duration::from_secs(120),
        }
    }
}

impl RemoteConfig {
    /// Reads `FL_API_KEY`, `FL_API_BASE_URL` and `FL_MODEL`.
    pub fn from_env() -> Self {
        let mut config = Self::default();
        if let Ok(url) = std::env::var(ENV_BASE_URL) {
            if !url.trim().is_empty() {
                config.base_url = url.trim().to_string();
            }
        }
        if let Ok(model) = std::env::var(ENV_MODEL) {
            if !model.trim().is_empty() {
                config.model = model.trim().to_string();
            }
        }
        config.api_key = std::env::var(ENV_API_KEY).ok().filter(|k| !k.is_empty());
        config
    }
}

pub struct RemoteBackend {
    config: RemoteConfig,
    agent: ureq::Agent,
}

impl RemoteBackend {
    pub fn new(config: RemoteConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(config.timeout))
            .build()
            .into();
        Self { config, agent }
    }

    pub fn from_env() -> Self {
        Self::new(RemoteConfig::from_env())
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.config
    }

    fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'))
    }

    fn send_once(&self, body: &Value) -> Result<(u16, String), String> {
        let mut request = self
            .agent
            .post(&self.endpoint())
            .header("Content-Type", "application/json");
        if let Some(key) = &self.config.api_key {
            request = request.header("Authorization", &format!("Bearer {key}"));
        }
        let mut response = request.send_json(body).map_err(|e| e.to_string())?;
        let status = response.status().as_u16();
        let text = response.body_mut().read_to_string().map_err(|e| e.to_string())?;
        Ok((status, text))
    }
}

/// Request body in chat-completions wire form.
pub fn encode_request(request: &CompletionRequest, model: &str) -> Value {
    let messages: Vec<Value> = request
        .messages
        .iter()
        .map(|m| {
            let mut obj = json!({
                "role": match m.role {
                    Role::System => "system",
                    Role::User => "user",
                    Role::Assistant => "assistant",
                    Role::Tool => "tool",
                },
                "content": m.content,
            });
            if !m.tool_calls.is_empty() {
                obj["tool_calls"] = m
                    .tool_calls
                    .iter()
                    .map(|c| {
                        json!({
                            "id": c.id,
                            "type": "function",
                            "function": {"name": c.tool_name, "arguments": c.arguments},
                        })
                    })
                    .collect();
            }
            if let Some(id) = &m.tool_call_id {
                obj["tool_call_id"] = json!(id);
            }
            obj
        })
        .collect();
    let mut body = json!({
        "model": model,
        "messages": messages,
        "temperature": request.temperature,
        "max_tokens": request.max_tokens,
    });
    if !request.tools.is_empty() {
        body["tools"] = request
            .tools
            .iter()
            .map(|t| {
                json!({
                    "type": "function",
                    "function": {
                        "name": t.name,
                        "description": t.description,
                        "parameters": t.parameters,
                    },
                })
            })
            .collect();
    }
    body
}

/// Parses a successful chat-completions response body.
pub fn decode_response(body: &Value) -> Result<CompletionResponse, LlmError> {
    let malformed = |what: &str| LlmError::MalformedResponse(what.to_string());
    let choice = body
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| malformed("no choices"))?;
    let message = choice.get("message").ok_or_else(|| malformed("choice has no message"))?;
    let finish_reason = FinishReason::from_wire(
        choice.get("finish_reason").and_then(Value::as_str).unwrap_or("stop"),
    );
    if let Some(refusal) = message.get("refusal").and_then(Value::as_str) {
        return Err(LlmError::BackendRefusal(refusal.to_string()));
    }
    if finish_reason == FinishReason::ContentFilter {
        return Err(LlmError::BackendRefusal("content filter".into()));
    }
    let content = message.get("content").and_then(Value::as_str).unwrap_or("").to_string();
    let tool_calls = message
        .get("tool_calls")
        .and_then(Value::as_array)
        .map(|calls| {
            calls
                .iter()
                .map(|c| {
                    let function = c.get("function").ok_or_else(|| malformed("tool call without function"))?;
                    let arguments = match function.get("arguments") {
                        Some(Value::String(s)) => s.clone(),
                        Some(other) => other.to_string(),
                        None => "{}".to_string(),
                    };
                    Ok(ToolCall {
                        id: c.get("id").and_then(Value::as_str).unwrap_or_default().to_string(),
                        tool_name: function
                            .get("name")
                            .and_then(Value::as_str)
                            .ok_or_else(|| malformed("tool call without name"))?
                            .to_string(),
                        arguments,
                    })
                })
                .collect::<Result<Vec<_>, LlmError>>()
        })
        .transpose()?
        .unwrap_or_default();
    let usage = body.get("usage");
    let read = |key: &str| usage.and_then(|u| u.get(key)).and_then(Value::as_u64).unwrap_or(0);
    Ok(CompletionResponse {
        message: ChatMessage {
            role: Role::Assistant,
            content,
            tool_calls,
            tool_call_id: None,
        },
        finish_reason,
        usage: Usage {
            prompt_tokens: read("prompt_tokens"),
            completion_tokens: read("completion_tokens"),
        },
    })
}

fn classify_error(status: u16, text: &str) -> LlmError {
    let parsed: Option<Value> = serde_json::from_str(text).ok();
    let error = parsed.as_ref().and_then(|v| v.get("error"));
    let code = error.and_then(|e| e.get("code")).and_then(Value::as_str).unwrap_or("");
    let message = error
        .and_then(|e| e.get("message"))
        .and_then(Value::as_str)
        .unwrap_or(text);
    if code == "context_length_exceeded" || message.contains("maximum context length") {
        return LlmError::ContextOverflow { tokens: 0, limit: 0 };
    }
    LlmError::BackendRefusal(format!("HTTP {status}: {message}"))
}

impl ChatBackend for RemoteBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, LlmError> {
        let body = encode_request(request, &self.config.model);
        let mut backoff = self.config.initial_backoff;
        let attempts = self.config.max_retries + 1;
        let mut last_error = String::new();
        for attempt in 1..=attempts {
            match self.send_once(&body) {
                Ok((200..=299, text)) => {
                    let value: Value = serde_json::from_str(&text)
                        .map_err(|e| LlmError::MalformedResponse(e.to_string()))?;
                    return decode_response(&value);
                }
                Ok((status, text)) if status == 429 || status >= 500 => {
                    last_error = format!("HTTP {status}: {}", text.chars().take(200).collect::<String>());
                }
                Ok((status, text)) => return Err(classify_error(status, &text)),
                Err(e) => last_error = e,
            }
            if attempt < attempts {
                log::warn!("completion attempt {attempt} failed ({last_error}); retrying in {backoff:?}");
                std::thread::sleep(backoff);
                backoff *= 2;
            }
        }
        Err(LlmError::TransportError {
            attempts,
            message: last_error,
        })
    }

    fn name(&self) -> &str {
        "remote"
    }
}
