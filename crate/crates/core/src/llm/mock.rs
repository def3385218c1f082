//! Deterministic scripted backend.
//!
//! A [`MockScript`] is an ordered list of steps. Each step has an optional
//! matcher, checked against the latest user/tool message (or the system
//! prompt, or the whole conversation), and a canned assistant reply made of
//! content and/or tool calls. Two modes exist:
//!
//! - `sequential`: steps are consumed in order; a step whose matcher does not
//!   match the incoming request is an error.
//! - `rules`: every request is answered by the first matching step that still
//!   has uses left; no match is an error.
//!
//! Unmatched requests fail loudly so tests never pass on an unintended path.
//! A recorded [`AgentTranscript`] can also be replayed, which checks each
//! incoming request against the recorded one.

use std::sync::Mutex;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{
    AgentTranscript, ChatBackend, ChatMessage, CompletionRequest, CompletionResponse, FinishReason,
    LlmError, Role, ToolCall, Usage,
};
use crate::division::{CharsPerFour, TokenCounter};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchScope {
    /// Latest user or tool message.
    #[default]
    Latest,
    /// First system message.
    System,
    /// Every message concatenated.
    All,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StepMatcher {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contains: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regex: Option<String>,
    #[serde(default)]
    pub scope: MatchScope,
    /// Restricts the step to requests that declare (`true`) or omit (`false`) tools.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub with_tools: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedToolCall {
    pub name: String,
    #[serde(default = "empty_object")]
    pub arguments: serde_json::Value,
}

fn empty_object() -> serde_json::Value {
    serde_json::Value::Object(Default::default())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScriptedReply {
    #[serde(default)]
    pub content: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tool_calls: Vec<ScriptedToolCall>,
}

impl ScriptedReply {
    pub fn text(content: impl Into<String>) -> Self {
        Self {
            content: content.into(),
            tool_calls: Vec::new(),
        }
    }

    pub fn tool(name: &str, arguments: serde_json::Value) -> Self {
        Self {
            content: String::new(),
            tool_calls: vec![ScriptedToolCall {
                name: name.to_string(),
                arguments,
            }],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptStep {
    #[serde(default, rename = "match", skip_serializing_if = "Option::is_none")]
    pub matcher: Option<StepMatcher>,
    pub reply: ScriptedReply,
    /// Maximum uses in `rules` mode; unlimited when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub times: Option<usize>,
}

impl ScriptStep {
    pub fn reply(reply: ScriptedReply) -> Self {
        Self {
            matcher: None,
            reply,
            times: None,
        }
    }

    pub fn when(contains: &str, reply: ScriptedReply) -> Self {
        Self {
            matcher: Some(StepMatcher {
                contains: Some(contains.to_string()),
                ..StepMatcher::default()
            }),
            reply,
            times: None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScriptMode {
    #[default]
    Sequential,
    Rules,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MockScript {
    #[serde(default)]
    pub mode: ScriptMode,
    /// Prompt-token limit; larger requests fail with `ContextOverflow`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context_limit: Option<usize>,
    pub steps: Vec<ScriptStep>,
}

impl MockScript {
    pub fn sequential(steps: Vec<ScriptStep>) -> Self {
        Self {
            mode: ScriptMode::Sequential,
            context_limit: None,
            steps,
        }
    }

    pub fn rules(steps: Vec<ScriptStep>) -> Self {
        Self {
            mode: ScriptMode::Rules,
            context_limit: None,
            steps,
        }
    }

    pub fn from_json(text: &str) -> Result<Self, LlmError> {
        serde_json::from_str(text).map_err(|e| LlmError::ScriptMismatch(format!("invalid script: {e}")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("script serializes")
    }
}

struct CompiledStep {
    step: ScriptStep,
    regex: Option<Regex>,
}

impl CompiledStep {
    fn matches(&self, request: &CompletionRequest) -> bool {
        let Some(matcher) = &self.step.matcher else {
            return true;
        };
        if let Some(with_tools) = matcher.with_tools {
            if with_tools == request.tools.is_empty() {
                return false;
            }
        }
        let haystack: std::borrow::Cow<'_, str> = match matcher.scope {
            MatchScope::Latest => request.latest_input().into(),
            MatchScope::System => request
                .messages
                .iter()
                .find(|m| m.role == Role::System)
                .map_or("", |m| m.content.as_str())
                .into(),
            MatchScope::All => request.prompt_text().into(),
        };
        matcher
            .contains
            .as_ref()
            .is_none_or(|needle| haystack.contains(needle.as_str()))
            && self.regex.as_ref().is_none_or(|re| re.is_match(&haystack))
    }
}

type Responder = dyn Fn(&CompletionRequest) -> Result<ScriptedReply, LlmError> + Send + Sync;

enum Source {
    Script {
        mode: ScriptMode,
        steps: Vec<CompiledStep>,
    },
    Replay(Vec<super::Exchange>),
    Responder(Box<Responder>),
}

#[derive(Default)]
struct State {
    cursor: usize,
    uses: Vec<usize>,
    calls: usize,
}

pub struct MockBackend {
    source: Source,
    context_limit: Option<usize>,
    state: Mutex<State>,
}

impl MockBackend {
    pub fn new(script: MockScript) -> Result<Self, LlmError> {
        let steps = script
            .steps
            .into_iter()
            .map(|step| {
                let regex = step
                    .matcher
                    .as_ref()
                    .and_then(|m| m.regex.as_deref())
                    .map(Regex::new)
                    .transpose()
                    .map_err(|e| LlmError::ScriptMismatch(format!("bad matcher regex: {e}")))?;
                Ok(CompiledStep { step, regex })
            })
            .collect::<Result<Vec<_>, LlmError>>()?;
        let uses = vec![0; steps.len()];
        Ok(Self {
            source: Source::Script {
                mode: script.mode,
                steps,
            },
            context_limit: script.context_limit,
            state: Mutex::new(State {
                uses,
                ..State::default()
            }),
        })
    }

    /// Replays the responses of a recorded transcript, requiring each
    /// incoming request to equal the recorded one.
    pub fn replay(transcript: &AgentTranscript) -> Self {
        Self::replay_exchanges(transcript.exchanges.clone())
    }

    pub fn replay_exchanges(exchanges: Vec<super::Exchange>) -> Self {
        Self {
            source: Source::Replay(exchanges),
            context_limit: None,
            state: Mutex::new(State::default()),
        }
    }

    /// A backend answered by an arbitrary function of the request.
    pub fn from_fn(
        responder: impl Fn(&CompletionRequest) -> Result<ScriptedReply, LlmError> + Send + Sync + 'static,
    ) -> Self {
        Self {
            source: Source::Responder(Box::new(responder)),
            context_limit: None,
            state: Mutex::new(State::default()),
        }
    }

    pub fn with_context_limit(mut self, limit: usize) -> Self {
        self.context_limit = Some(limit);
        self
    }

    /// Requests answered so far.
    pub fn calls(&self) -> usize {
        self.state.lock().expect("mock state").calls
    }

    fn next_reply(&self, request: &CompletionRequest, state: &mut State) -> Result<ScriptedReply, LlmError> {
        match &self.source {
            Source::Script { mode: ScriptMode::Sequential, steps } => {
                let Some(step) = steps.get(state.cursor) else {
                    return Err(LlmError::ScriptMismatch(format!(
                        "script exhausted after {} steps; unexpected request: {}",
                        steps.len(),
                        preview(request.latest_input())
                    )));
                };
                if !step.matches(request) {
                    return Err(LlmError::ScriptMismatch(format!(
                        "step {} does not match request: {}",
                        state.cursor,
                        preview(request.latest_input())
                    )));
                }
                state.cursor += 1;
                Ok(step.step.reply.clone())
            }
            Source::Script { mode: ScriptMode::Rules, steps } => {
                let hit = steps.iter().enumerate().find(|(i, step)| {
                    step.step.times.is_none_or(|t| state.uses[*i] < t) && step.matches(request)
                });
                match hit {
                    Some((i, step)) => {
                        state.uses[i] += 1;
                        Ok(step.step.reply.clone())
                    }
                    None => Err(LlmError::ScriptMismatch(format!(
                        "no rule matches request: {}",
                        preview(request.latest_input())
                    ))),
                }
            }
            Source::Replay(exchanges) => {
                let Some(exchange) = exchanges.get(state.cursor) else {
                    return Err(LlmError::ScriptMismatch(format!(
                        "replay exhausted after {} exchanges",
                        exchanges.len()
                    )));
                };
                if exchange.request != *request {
                    return Err(LlmError::ScriptMismatch(format!(
                        "request {} differs from the recorded one",
                        state.cursor
                    )));
                }
                state.cursor += 1;
                let message = &exchange.response.message;
                Ok(ScriptedReply {
                    content: message.content.clone(),
                    tool_calls: message
                        .tool_calls
                        .iter()
                        .map(|c| ScriptedToolCall {
                            name: c.tool_name.clone(),
                            arguments: serde_json::from_str(&c.arguments).unwrap_or_else(|_| empty_object()),
                        })
                        .collect(),
                })
            }
            Source::Responder(responder) => responder(request),
        }
    }
}

fn preview(text: &str) -> String {
    let flat: String = text.chars().take(160).map(|c| if c == '\n' { ' ' } else { c }).collect();
    if text.chars().count() > 160 {
        format!("{flat}…")
    } else {
        flat
    }
}

impl ChatBackend for MockBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, LlmError> {
        let prompt_tokens = CharsPerFour.count(&request.prompt_text());
        if let Some(limit) = self.context_limit {
            if prompt_tokens > limit {
                return Err(LlmError::ContextOverflow {
                    tokens: prompt_tokens,
                    limit,
                });
            }
        }
        let mut state = self.state.lock().expect("mock state");
        let reply = self.next_reply(request, &mut state)?;
        state.calls += 1;
        drop(state);

        // Ids depend only on the conversation length, so reruns are identical.
        let turn = request.messages.len();
        let tool_calls: Vec<ToolCall> = reply
            .tool_calls
            .iter()
            .enumerate()
            .map(|(j, call)| ToolCall {
                id: format!("call_{turn}_{j}"),
                tool_name: call.name.clone(),
                arguments: call.arguments.to_string(),
            })
            .collect();
        let completion_tokens = CharsPerFour.count(&reply.content)
            + tool_calls
                .iter()
                .map(|c| CharsPerFour.count(&c.arguments) + CharsPerFour.count(&c.tool_name))
                .sum::<usize>();
        let finish_reason = if tool_calls.is_empty() {
            FinishReason::Stop
        } else {
            FinishReason::ToolCalls
        };
        Ok(CompletionResponse {
            message: ChatMessage {
                role: Role::Assistant,
                content: reply.content,
                tool_calls,
                tool_call_id: None,
            },
            finish_reason,
            usage: Usage {
                prompt_tokens: prompt_tokens as u64,
                completion_tokens: completion_tokens as u64,
            },
        })
    }

    fn name(&self) -> &str {
        "mock"
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{complete, Session};
    use serde_json::json;

    fn ask(text: &str) -> CompletionRequest {
        CompletionRequest::new(vec![ChatMessage::system("sys"), ChatMessage::user(text)], 64)
    }

    #[test]
    fn scripted_reply_is_returned() {
        let backend = MockBackend::new(MockScript::sequential(vec![ScriptStep::reply(
            ScriptedReply::text("X"),
        )]))
        .unwrap();
        let reply = backend.complete(&ask("anything")).unwrap();
        assert_eq!(reply.message.content, "X");
        assert_eq!(reply.finish_reason, FinishReason::Stop);
        assert!(matches!(
            backend.complete(&ask("again")),
            Err(LlmError::ScriptMismatch(_))
        ));
    }

    #[test]
    fn sequential_matcher_mismatch_fails_loudly() {
        let backend = MockBackend::new(MockScript::sequential(vec![ScriptStep::when(
            "expected words",
            ScriptedReply::text("ok"),
        )]))
        .unwrap();
        assert!(matches!(backend.complete(&ask("other")), Err(LlmError::ScriptMismatch(_))));
    }

    #[test]
    fn rules_pick_first_match_and_respect_times() {
        let mut once = ScriptStep::when("ping", ScriptedReply::text("first"));
        once.times = Some(1);
        let backend = MockBackend::new(MockScript::rules(vec![
            once,
            ScriptStep::when("ping", ScriptedReply::text("later")),
            ScriptStep {
                matcher: Some(StepMatcher {
                    regex: Some(r"^sys$".into()),
                    scope: MatchScope::System,
                    ..StepMatcher::default()
                }),
                reply: ScriptedReply::text("system rule"),
                times: None,
            },
        ]))
        .unwrap();
        assert_eq!(backend.complete(&ask("ping")).unwrap().message.content, "first");
        assert_eq!(backend.complete(&ask("ping")).unwrap().message.content, "later");
        assert_eq!(backend.complete(&ask("zzz")).unwrap().message.content, "system rule");
        assert_eq!(backend.calls(), 3);
    }

    #[test]
    fn context_limit_is_enforced() {
        let backend = MockBackend::new(MockScript {
            mode: ScriptMode::Rules,
            context_limit: Some(5),
            steps: vec![ScriptStep::reply(ScriptedReply::text("ok"))],
        })
        .unwrap();
        let long = "word ".repeat(40);
        assert!(matches!(
            backend.complete(&ask(&long)),
            Err(LlmError::ContextOverflow { limit: 5, .. })
        ));
    }

    #[test]
    fn tool_call_ids_are_deterministic() {
        let script = MockScript::sequential(vec![ScriptStep::reply(ScriptedReply::tool(
            "get_MethodBody",
            json!({"method": "p$A#a()"}),
        ))]);
        let a = MockBackend::new(script.clone()).unwrap().complete(&ask("q")).unwrap();
        let b = MockBackend::new(script).unwrap().complete(&ask("q")).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.message.tool_calls[0].id, "call_2_0");
        assert_eq!(a.finish_reason, FinishReason::ToolCalls);
    }

    #[test]
    fn recorded_exchange_replays_identically() {
        let script = MockScript::sequential(vec![
            ScriptStep::reply(ScriptedReply::text("one")),
            ScriptStep::reply(ScriptedReply::tool("get_CallGraph", json!({"method": "p$A#a()"}))),
            ScriptStep::reply(ScriptedReply::text("three")),
        ]);
        let backend = MockBackend::new(script).unwrap();
        let mut session = Session::new(&backend, "test", "F");
        for q in ["a", "b", "c"] {
            complete(&mut session, ask(q)).unwrap();
        }
        let recorded = session.finish();

        let replay = MockBackend::replay(&recorded);
        let mut again = Session::new(&replay, "test", "F");
        for q in ["a", "b", "c"] {
            complete(&mut again, ask(q)).unwrap();
        }
        assert_eq!(again.finish().exchanges, recorded.exchanges);

        let replay = MockBackend::replay(&recorded);
        assert!(matches!(replay.complete(&ask("different")), Err(LlmError::ScriptMismatch(_))));
    }

    #[test]
    fn script_json_round_trip() {
        let text = r#"{"mode":"rules","steps":[
            {"match":{"contains":"Failure Reason","scope":"all"},"reply":{"content":"hi"},"times":2},
            {"reply":{"tool_calls":[{"name":"get_MethodBody","arguments":{"method":"p$A#a()"}}]}}]}"#;
        let script = MockScript::from_json(text).unwrap();
        assert_eq!(script.mode, ScriptMode::Rules);
        assert_eq!(script.steps[0].times, Some(2));
        assert_eq!(MockScript::from_json(&script.to_json()).unwrap(), script);
    }
}
