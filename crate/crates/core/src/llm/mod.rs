//! Chat/tool-call client contract shared by every agent.
//!
//! Agents speak only [`ChatBackend`]. Two backends ship with the crate: a
//! scripted [`mock::MockBackend`] for deterministic offline runs and a
//! [`remote::RemoteBackend`] for any chat-completions compatible endpoint.
//! Every exchange goes through a [`Session`], which records it into an
//! [`AgentTranscript`].

use std::sync::{Condvar, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub mod mock;
pub mod remote;
pub mod structured;
pub mod tools;

pub use mock::{MockBackend, MockScript};
pub use remote::RemoteBackend;
pub use structured::{parse_structured_ranking, ParsedRanking};
pub use tools::{run_tool_loop, ToolExecution, ToolLoopOutcome, ToolRegistry};

/// Schema version written into every transcript file.
pub const TRANSCRIPT_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LlmError {
    #[error("transport error after {attempts} attempt(s): {message}")]
    TransportError { attempts: u32, message: String },
    #[error("backend refused the request: {0}")]
    BackendRefusal(String),
    #[error("request needs {tokens} prompt tokens, context limit is {limit}")]
    ContextOverflow { tokens: usize, limit: usize },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("malformed backend response: {0}")]
    MalformedResponse(String),
    #[error("mock script: {0}")]
    ScriptMismatch(String),
    #[error("tool loop exhausted after {0} tool calls: the forced answer still requested tools")]
    ToolLoopExhausted(usize),
    #[error("could not parse a ranking from the reply: {0}")]
    UnparsableRanking(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
    Tool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolCall {
    pub id: String,
    pub tool_name: String,
    /// JSON object text.
    pub arguments: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tool_calls: Vec<ToolCall>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_call_id: Option<String>,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self::plain(Role::System, content)
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self::plain(Role::User, content)
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self::plain(Role::Assistant, content)
    }

    pub fn tool(call_id: impl Into<String>, content: impl Into<String>) -> Self {
        Self {
            role: Role::Tool,
            content: content.into(),
            tool_calls: Vec::new(),
            tool_call_id: Some(call_id.into()),
        }
    }

    fn plain(role: Role, content: impl Into<String>) -> Self {
        Self {
            role,
            content: content.into(),
            tool_calls: Vec::new(),
            tool_call_id: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolSpec {
    pub name: String,
    pub description: String,
    /// JSON schema of the arguments object.
    pub parameters: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub messages: Vec<ChatMessage>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tools: Vec<ToolSpec>,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl CompletionRequest {
    /// A temperature-0 request.
    pub fn new(messages: Vec<ChatMessage>, max_tokens: u32) -> Self {
        Self {
            messages,
            tools: Vec::new(),
            temperature: 0.0,
            max_tokens,
        }
    }

    pub fn with_tools(mut self, tools: Vec<ToolSpec>) -> Self {
        self.tools = tools;
        self
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        if self.messages.is_empty() {
            return Err(LlmError::InvalidRequest("no messages".into()));
        }
        for (i, message) in self.messages.iter().enumerate() {
            if message.role == Role::Tool && message.tool_call_id.is_none() {
                return Err(LlmError::InvalidRequest(format!(
                    "tool message {i} lacks a tool_call_id"
                )));
            }
            if message.role != Role::Assistant && !message.tool_calls.is_empty() {
                return Err(LlmError::InvalidRequest(format!(
                    "message {i} carries tool calls but is not from the assistant"
                )));
            }
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(LlmError::InvalidRequest("temperature must be >= 0".into()));
        }
        Ok(())
    }

    /// Content of the latest user or tool message.
    pub fn latest_input(&self) -> &str {
        self.messages
            .iter()
            .rev()
            .find(|m| matches!(m.role, Role::User | Role::Tool))
            .map_or("", |m| m.content.as_str())
    }

    /// All message text concatenated, used for token estimates.
    pub fn prompt_text(&self) -> String {
        let mut text = String::new();
        for message in &self.messages {
            text.push_str(&message.content);
            for call in &message.tool_calls {
                text.push_str(&call.tool_name);
                text.push_str(&call.arguments);
            }
            text.push('\n');
        }
        text
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl std::ops::AddAssign for Usage {
    fn add_assign(&mut self, rhs: Self) {
        self.prompt_tokens += rhs.prompt_tokens;
        self.completion_tokens += rhs.completion_tokens;
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Stop,
    ToolCalls,
    Length,
    ContentFilter,
    Other(String),
}

impl FinishReason {
    pub fn from_wire(text: &str) -> Self {
        match text {
            "stop" => Self::Stop,
            "tool_calls" | "function_call" => Self::ToolCalls,
            "length" => Self::Length,
            "content_filter" => Self::ContentFilter,
            other => Self::Other(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResponse {
    pub message: ChatMessage,
    pub finish_reason: FinishReason,
    pub usage: Usage,
}

/// A chat completion provider. Implementations must be shareable across threads.
pub trait ChatBackend: Send + Sync {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, LlmError>;

    fn name(&self) -> &str {
        "backend"
    }
}

impl<B: ChatBackend + ?Sized> ChatBackend for Box<B> {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, LlmError> {
        (**self).complete(request)
    }

    fn name(&self) -> &str {
        (**self).name()
    }
}

impl<B: ChatBackend + ?Sized> ChatBackend for std::sync::Arc<B> {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, LlmError> {
        (**self).complete(request)
    }

    fn name(&self) -> &str {
        (**self).name()
    }
}

/// Caps the number of concurrent completions on a shared backend.
pub struct Throttled<B> {
    inner: B,
    max_inflight: usize,
    inflight: Mutex<usize>,
    released: Condvar,
}

impl<B: ChatBackend> Throttled<B> {
    pub fn new(inner: B, max_inflight: usize) -> Self {
        Self {
            inner,
            max_inflight: max_inflight.max(1),
            inflight: Mutex::new(0),
            released: Condvar::new(),
        }
    }
}

impl<B: ChatBackend> ChatBackend for Throttled<B> {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, LlmError> {
        {
            let mut inflight = self.inflight.lock().expect("throttle lock");
            while *inflight >= self.max_inflight {
                inflight = self.released.wait(inflight).expect("throttle lock");
            }
            *inflight += 1;
        }
        let result = self.inner.complete(request);
        *self.inflight.lock().expect("throttle lock") -= 1;
        self.released.notify_one();
        result
    }

    fn name(&self) -> &str {
        self.inner.name()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exchange {
    pub request: CompletionRequest,
    pub response: CompletionResponse,
}

/// Every request/response pair and tool execution of one agent run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentTranscript {
    pub transcript_version: u32,
    pub agent: String,
    pub fault_id: String,
    pub backend: String,
    pub started_at_ms: u64,
    pub finished_at_ms: u64,
    pub exchanges: Vec<Exchange>,
    pub tool_executions: Vec<ToolExecution>,
    pub usage: Usage,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

impl AgentTranscript {
    pub fn new(agent: impl Into<String>, fault_id: impl Into<String>, backend: &str) -> Self {
        let now = now_ms();
        Self {
            transcript_version: TRANSCRIPT_VERSION,
            agent: agent.into(),
            fault_id: fault_id.into(),
            backend: backend.to_string(),
            started_at_ms: now,
            finished_at_ms: now,
            exchanges: Vec::new(),
            tool_executions: Vec::new(),
            usage: Usage::default(),
        }
    }

    pub fn backend_calls(&self) -> usize {
        self.exchanges.len()
    }

    /// Tool calls requested by the model across all responses.
    pub fn tool_call_records(&self) -> usize {
        self.exchanges
            .iter()
            .map(|e| e.response.message.tool_calls.len())
            .sum()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("transcript serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, LlmError> {
        let transcript: Self = serde_json::from_str(text)
            .map_err(|e| LlmError::MalformedResponse(format!("transcript: {e}")))?;
        if transcript.transcript_version != TRANSCRIPT_VERSION {
            return Err(LlmError::MalformedResponse(format!(
                "unsupported transcript_version {}",
                transcript.transcript_version
            )));
        }
        Ok(transcript)
    }
}

/// One agent's conversation with a backend, recorded as it happens.
pub struct Session<'b> {
    backend: &'b dyn ChatBackend,
    transcript: AgentTranscript,
}

impl<'b> Session<'b> {
    pub fn new(backend: &'b dyn ChatBackend, agent: &str, fault_id: &str) -> Self {
        Self {
            transcript: AgentTranscript::new(agent, fault_id, backend.name()),
            backend,
        }
    }

    pub fn transcript(&self) -> &AgentTranscript {
        &self.transcript
    }

    pub fn finish(mut self) -> AgentTranscript {
        self.transcript.finished_at_ms = now_ms();
        self.transcript
    }

    pub(crate) fn record_tool(&mut self, execution: ToolExecution) {
        self.transcript.tool_executions.push(execution);
    }
}

/// Sends one request and records the exchange in the session transcript.
pub fn complete(
    session: &mut Session<'_>,
    request: CompletionRequest,
) -> Result<CompletionResponse, LlmError> {
    request.validate()?;
    let response = session.backend.complete(&request)?;
    if response.message.role != Role::Assistant {
        return Err(LlmError::MalformedResponse(format!(
            "expected an assistant message, got {:?}",
            response.message.role
        )));
    }
    session.transcript.usage += response.usage;
    session.transcript.exchanges.push(Exchange {
        request,
        response: response.clone(),
    });
    Ok(response)
}
