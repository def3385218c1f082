//! Tool registry and the bounded tool-calling loop.

use serde::{Deserialize, Serialize};

use super::{complete, ChatMessage, CompletionRequest, LlmError, Session, ToolSpec};

/// Sent once the tool budget is spent.
pub const FORCED_ANSWER_PROMPT: &str =
    "The tool-call budget is exhausted. Do not call any more tools. Produce your final answer now, in the requested format.";

type Handler<'a> = Box<dyn Fn(&serde_json::Value) -> Result<String, String> + Send + Sync + 'a>;

/// Named tools with their handlers. Handler errors are reported back to the
/// model as tool messages, not raised.
#[derive(Default)]
pub struct ToolRegistry<'a> {
    tools: Vec<(ToolSpec, Handler<'a>)>,
}

impl<'a> ToolRegistry<'a> {
    pub fn new() -> Self {
        Self { tools: Vec::new() }
    }

    pub fn register(
        &mut self,
        spec: ToolSpec,
        handler: impl Fn(&serde_json::Value) -> Result<String, String> + Send + Sync + 'a,
    ) {
        self.tools.retain(|(s, _)| s.name != spec.name);
        self.tools.push((spec, Box::new(handler)));
    }

    pub fn specs(&self) -> Vec<ToolSpec> {
        self.tools.iter().map(|(s, _)| s.clone()).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.tools.is_empty()
    }

    fn handler(&self, name: &str) -> Option<&Handler<'a>> {
        self.tools.iter().find(|(s, _)| s.name == name).map(|(_, h)| h)
    }

    /// Runs one call; unknown tools and bad arguments become error output.
    pub fn execute(&self, name: &str, arguments: &str) -> (String, bool) {
        let Some(handler) = self.handler(name) else {
            let known: Vec<&str> = self.tools.iter().map(|(s, _)| s.name.as_str()).collect();
            return (
                format!("error: unknown tool `{name}`; available tools: {}", known.join(", ")),
                true,
            );
        };
        let args: serde_json::Value = match serde_json::from_str(if arguments.trim().is_empty() {
            "{}"
        } else {
            arguments
        }) {
            Ok(v) => v,
            Err(e) => return (format!("error: arguments are not valid JSON: {e}"), true),
        };
        match handler(&args) {
            Ok(output) => (output, false),
            Err(message) => (format!("error: {message}"), true),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolExecution {
    pub call_id: String,
    pub tool_name: String,
    pub arguments: String,
    pub output: String,
    pub is_error: bool,
    /// Index of the exchange whose response requested this call.
    pub exchange: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToolLoopOutcome {
    pub final_message: ChatMessage,
    pub executions: Vec<ToolExecution>,
    /// Conversation including the final assistant message.
    pub messages: Vec<ChatMessage>,
    pub forced: bool,
}

/// Drives the model through tool calls until it answers without tools.
///
/// After `max_tool_calls` executions one forced-answer prompt is sent; a reply
/// that still requests tools fails with [`LlmError::ToolLoopExhausted`].
/// Backend calls never exceed `max_tool_calls + 1`.
pub fn run_tool_loop(
    session: &mut Session<'_>,
    mut request: CompletionRequest,
    registry: &ToolRegistry<'_>,
    max_tool_calls: usize,
) -> Result<ToolLoopOutcome, LlmError> {
    for spec in &request.tools {
        if registry.handler(&spec.name).is_none() {
            return Err(LlmError::InvalidRequest(format!(
                "tool `{}` is declared without a handler",
                spec.name
            )));
        }
    }
    let mut executions = Vec::new();
    loop {
        let response = complete(session, request.clone())?;
        let exchange = session.transcript().exchanges.len() - 1;
        let mut message = response.message;
        if message.tool_calls.is_empty() {
            request.messages.push(message.clone());
            return Ok(ToolLoopOutcome {
                final_message: message,
                executions,
                messages: request.messages,
                forced: false,
            });
        }
        // Calls beyond the budget are dropped unexecuted.
        message.tool_calls.truncate(max_tool_calls - executions.len());
        let calls = message.tool_calls.clone();
        request.messages.push(message);
        for call in calls {
            let (output, is_error) = registry.execute(&call.tool_name, &call.arguments);
            if is_error {
                log::debug!("tool {} failed: {output}", call.tool_name);
            }
            request.messages.push(ChatMessage::tool(&call.id, &output));
            let execution = ToolExecution {
                call_id: call.id,
                tool_name: call.tool_name,
                arguments: call.arguments,
                output,
                is_error,
                exchange,
            };
            session.record_tool(execution.clone());
            executions.push(execution);
        }
        if executions.len() >= max_tool_calls {
            request.messages.push(ChatMessage::user(FORCED_ANSWER_PROMPT));
            let forced = complete(session, request.clone())?;
            if !forced.message.tool_calls.is_empty() {
                return Err(LlmError::ToolLoopExhausted(executions.len()));
            }
            request.messages.push(forced.message.clone());
            return Ok(ToolLoopOutcome {
                final_message: forced.message,
                executions,
                messages: request.messages,
                forced: true,
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::mock::{MockBackend, MockScript, ScriptStep, ScriptedReply};
    use crate::llm::Role;
    use serde_json::json;

    fn registry() -> ToolRegistry<'static> {
        let mut registry = ToolRegistry::new();
        registry.register(
            ToolSpec {
                name: "get_MethodBody".into(),
                description: "body".into(),
                parameters: json!({"type":"object"}),
            },
            |args| {
                let method = args["method"].as_str().ok_or("missing `method`")?;
                Ok(format!("body of {method}"))
            },
        );
        registry
    }

    fn request(registry: &ToolRegistry<'_>) -> CompletionRequest {
        CompletionRequest::new(vec![ChatMessage::system("s"), ChatMessage::user("go")], 64)
            .with_tools(registry.specs())
    }

    #[test]
    fn one_tool_then_answer() {
        let backend = MockBackend::new(MockScript::sequential(vec![
            ScriptStep::reply(ScriptedReply::tool("get_MethodBody", json!({"method": "p$A#a()"}))),
            ScriptStep::when("body of p$A#a()", ScriptedReply::text("final")),
        ]))
        .unwrap();
        let registry = registry();
        let mut session = Session::new(&backend, "t", "F");
        let outcome = run_tool_loop(&mut session, request(&registry), &registry, 25).unwrap();
        assert_eq!(outcome.final_message.content, "final");
        assert_eq!(outcome.executions.len(), 1);
        assert!(!outcome.forced);
        let transcript = session.finish();
        assert_eq!(transcript.backend_calls(), 2);
        assert_eq!(transcript.tool_executions.len(), 1);
    }

    #[test]
    fn unknown_tool_is_reported_and_loop_continues() {
        let backend = MockBackend::new(MockScript::sequential(vec![
            ScriptStep::reply(ScriptedReply::tool("rm_rf", json!({}))),
            ScriptStep::when("unknown tool `rm_rf`", ScriptedReply::text("ok then")),
        ]))
        .unwrap();
        let registry = registry();
        let mut session = Session::new(&backend, "t", "F");
        let outcome = run_tool_loop(&mut session, request(&registry), &registry, 25).unwrap();
        assert_eq!(outcome.final_message.content, "ok then");
        assert!(outcome.executions[0].is_error);
    }

    #[test]
    fn budget_forces_an_answer_on_the_next_call() {
        let always = ScriptedReply::tool("get_MethodBody", json!({"method": "p$A#a()"}));
        let mut steps = vec![ScriptStep::reply(always.clone()); 3];
        steps.push(ScriptStep::when("budget is exhausted", ScriptedReply::text("forced")));
        let backend = MockBackend::new(MockScript::sequential(steps)).unwrap();
        let registry = registry();
        let mut session = Session::new(&backend, "t", "F");
        let outcome = run_tool_loop(&mut session, request(&registry), &registry, 3).unwrap();
        assert!(outcome.forced);
        assert_eq!(outcome.final_message.content, "forced");
        let transcript = session.finish();
        assert_eq!(transcript.backend_calls(), 4);
        let fourth = &transcript.exchanges[3].request;
        assert_eq!(fourth.messages.last().unwrap().role, Role::User);
        assert_eq!(fourth.messages.last().unwrap().content, FORCED_ANSWER_PROMPT);
    }

    #[test]
    fn forced_answer_with_tools_is_exhaustion() {
        let always = ScriptedReply::tool("get_MethodBody", json!({"method": "p$A#a()"}));
        let backend = MockBackend::new(MockScript::rules(vec![ScriptStep::reply(always)])).unwrap();
        let registry = registry();
        let mut session = Session::new(&backend, "t", "F");
        let err = run_tool_loop(&mut session, request(&registry), &registry, 2).unwrap_err();
        assert_eq!(err, LlmError::ToolLoopExhausted(2));
        assert_eq!(session.transcript().backend_calls(), 3);
    }

    #[test]
    fn surplus_calls_in_one_reply_are_not_executed() {
        let many = ScriptedReply {
            content: String::new(),
            tool_calls: (0..4)
                .map(|i| crate::llm::mock::ScriptedToolCall {
                    name: "get_MethodBody".into(),
                    arguments: json!({"method": format!("p$A#m{i}()")}),
                })
                .collect(),
        };
        let backend = MockBackend::new(MockScript::sequential(vec![
            ScriptStep::reply(many),
            ScriptStep::reply(ScriptedReply::text("done")),
        ]))
        .unwrap();
        let registry = registry();
        let mut session = Session::new(&backend, "t", "F");
        let outcome = run_tool_loop(&mut session, request(&registry), &registry, 2).unwrap();
        assert_eq!(outcome.executions.len(), 2);
        let tool_messages = outcome.messages.iter().filter(|m| m.role == Role::Tool).count();
        assert_eq!(tool_messages, 2);
    }
}
