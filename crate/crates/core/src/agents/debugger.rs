//! Debugger agent: call-graph navigation, reasoning set `R` and ranking `R*`.

use std::collections::BTreeSet;

use serde::Serialize;
use serde_json::{json, Value};

use super::context::FailureReason;
use super::prompts::{DEBUGGER_SYSTEM, NAVIGATION_INSTRUCTIONS};
use super::{render_methods, AgentEnv, AgentError};
use crate::codegraph::{get_call_graph, get_method_body, CodeGraph};
use crate::llm::structured::{parse_structured_ranking, ParsedRanking, REPAIR_RANKING_PROMPT};
use crate::llm::tools::{run_tool_loop, ToolExecution, ToolRegistry};
use crate::llm::{complete, ChatMessage, CompletionRequest, LlmError, Session, ToolSpec};
use crate::preprocess::FailureContext;
use crate::ranking::{RankedItem, RankedList, Stage};
use crate::spectra::MethodId;

pub const TOOL_METHOD_BODY: &str = "get_MethodBody";
pub const TOOL_CALL_GRAPH: &str = "get_CallGraph";

/// Placeholder reasoning for a retrieved method the model never discussed.
const UNDISCUSSED: &str = "Implementation retrieved; no specific reasoning was reported.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum VisitedVia {
    Prioritized,
    Navigation,
}

/// One `(mᵢ, rᵢ)` pair of the reasoning set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ReasonedMethod {
    pub method: MethodId,
    pub reasoning: String,
    pub visited_via: VisitedVia,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DebugOutcome {
    pub reasoning: Vec<ReasonedMethod>,
    pub ranking: RankedList,
    /// Methods whose bodies were retrieved, in first-retrieval order.
    pub retrieved: Vec<MethodId>,
    pub enhanced_failure_reason: Option<String>,
    pub warnings: Vec<String>,
}

fn method_arg(args: &Value) -> Result<MethodId, String> {
    let name = args
        .get("method")
        .and_then(Value::as_str)
        .ok_or("missing string argument `method`")?;
    MethodId::parse(name).map_err(|e| format!("`{name}`: {e}"))
}

/// The two navigation tools bound to `graph`. Outputs only ever name
/// methods that exist in the graph.
pub fn graph_tools(graph: &CodeGraph) -> ToolRegistry<'_> {
    let param = json!({
        "type": "object",
        "properties": {"method": {"type": "string", "description": "Method id, e.g. pkg$Class#name(Type)"}},
        "required": ["method"]
    });
    let mut registry = ToolRegistry::new();
    registry.register(
        ToolSpec {
            name: TOOL_METHOD_BODY.into(),
            description: "Return the source code of a method.".into(),
            parameters: param.clone(),
        },
        move |args| {
            let id = method_arg(args)?;
            let body = get_method_body(graph, &id).map_err(|e| e.to_string())?;
            let span = match (body.start_line, body.end_line) {
                (Some(s), Some(e)) => format!(" (lines {s}-{e})"),
                _ => String::new(),
            };
            Ok(format!("{}\n{}{}\n```java\n{}\n```", body.id, body.file, span, body.body.trim_end()))
        },
    );
    registry.register(
        ToolSpec {
            name: TOOL_CALL_GRAPH.into(),
            description: "Return the callers and callees of a method.".into(),
            parameters: param,
        },
        move |args| {
            let id = method_arg(args)?;
            let report = get_call_graph(graph, &id).map_err(|e| e.to_string())?;
            Ok(serde_json::to_string(&report).expect("neighbor report serializes"))
        },
    );
    registry
}

/// Methods whose body lookups succeeded, in order, without repeats.
pub(crate) fn retrieved_methods(executions: &[ToolExecution]) -> Vec<MethodId> {
    let mut out: Vec<MethodId> = Vec::new();
    for exec in executions.iter().filter(|e| e.tool_name == TOOL_METHOD_BODY && !e.is_error) {
        let parsed = serde_json::from_str::<Value>(&exec.arguments)
            .ok()
            .and_then(|v| method_arg(&v).ok());
        if let Some(m) = parsed {
            if !out.contains(&m) {
                out.push(m);
            }
        }
    }
    out
}

/// Parses a ranking reply; on failure sends one repair prompt in the same
/// conversation and parses again.
pub(crate) fn parse_with_repair(
    session: &mut Session<'_>,
    env: &AgentEnv<'_>,
    mut messages: Vec<ChatMessage>,
    tools: Vec<ToolSpec>,
    repair_prompt: &str,
    in_scope: &dyn Fn(&MethodId) -> bool,
) -> Result<(ParsedRanking, String), AgentError> {
    let content = messages.last().map(|m| m.content.clone()).unwrap_or_default();
    match parse_structured_ranking(&content, in_scope) {
        Ok(parsed) => Ok((parsed, content)),
        Err(first) => {
            log::debug!("ranking reply unparsable ({first}); sending repair prompt");
            messages.push(ChatMessage::user(repair_prompt));
            let request = CompletionRequest::new(messages, env.config.max_tokens).with_tools(tools);
            let reply = complete(session, request)?;
            if !reply.message.tool_calls.is_empty() {
                return Err(LlmError::UnparsableRanking("repair reply requested tools".into()).into());
            }
            let parsed = parse_structured_ranking(&reply.message.content, in_scope)?;
            Ok((parsed, reply.message.content))
        }
    }
}

fn enhanced_reason(text: &str) -> Option<String> {
    crate::llm::structured::json_candidates(text).find_map(|v| {
        v.get("enhanced_failure_reason")
            .and_then(Value::as_str)
            .map(str::to_string)
    })
}

/// Runs the debugger over the prioritized methods.
///
/// With navigation, `R` is every method whose body the model retrieved and
/// only those may be ranked. Without it, the prioritized methods and their
/// bodies are given in a single prompt and form the scope.
pub fn debug_and_rank(
    session: &mut Session<'_>,
    env: &AgentEnv<'_>,
    prioritized: &[MethodId],
    reason: &FailureReason,
    ctx: &FailureContext,
    graph: &CodeGraph,
) -> Result<DebugOutcome, AgentError> {
    if prioritized.is_empty() {
        return Err(AgentError::Precondition("prioritized set is empty".into()));
    }
    let navigate = env.config.enable_navigation;
    let template = if navigate {
        &env.config.prompts.debugger
    } else {
        &env.config.prompts.debugger_single
    };
    let prompt = env.prompts.render(
        template,
        &[
            ("failure_reason", &reason.summary()),
            ("stack_trace", &ctx.trace_text()),
            ("test_code", &ctx.test_text()),
            ("methods", &render_methods(prioritized, graph, !navigate)),
            ("tool_instructions", if navigate { NAVIGATION_INSTRUCTIONS } else { "" }),
        ],
    )?;
    let messages = vec![ChatMessage::system(DEBUGGER_SYSTEM), ChatMessage::user(prompt)];

    let (messages, tools, scope) = if navigate {
        let registry = graph_tools(graph);
        let request = CompletionRequest::new(messages, env.config.max_tokens).with_tools(registry.specs());
        let outcome = run_tool_loop(session, request, &registry, env.config.max_tool_calls)?;
        (outcome.messages, registry.specs(), retrieved_methods(&outcome.executions))
    } else {
        let reply = complete(session, CompletionRequest::new(messages.clone(), env.config.max_tokens))?;
        let mut messages = messages;
        messages.push(reply.message);
        (messages, Vec::new(), prioritized.to_vec())
    };

    let in_scope: BTreeSet<&MethodId> = scope.iter().collect();
    let (parsed, content) = parse_with_repair(
        session,
        env,
        messages,
        tools,
        REPAIR_RANKING_PROMPT,
        &|m| in_scope.contains(m),
    )?;
    let mut warnings: Vec<String> = parsed
        .dropped
        .iter()
        .map(|name| format!("debugger ranked `{name}`, which it did not analyze; dropped"))
        .collect();
    if parsed.items.is_empty() {
        return Err(AgentError::EmptyRanking("debugger ranking".into()));
    }

    let prioritized_set: BTreeSet<&MethodId> = prioritized.iter().collect();
    let reasoning_for = |m: &MethodId| -> Option<String> {
        parsed
            .analyzed
            .iter()
            .find(|(a, _)| a == m)
            .map(|(_, r)| r.clone())
            .or_else(|| parsed.items.iter().find(|i| &i.method == m).map(|i| i.reasoning.clone()))
            .filter(|r| !r.trim().is_empty())
    };
    let reasoning: Vec<ReasonedMethod> = scope
        .iter()
        .filter(|m| navigate || reasoning_for(m).is_some() || parsed.items.iter().any(|i| &i.method == *m))
        .map(|m| ReasonedMethod {
            method: m.clone(),
            reasoning: reasoning_for(m).unwrap_or_else(|| UNDISCUSSED.to_string()),
            visited_via: if prioritized_set.contains(m) {
                VisitedVia::Prioritized
            } else {
                VisitedVia::Navigation
            },
        })
        .collect();

    let items = parsed.items.iter().map(|item| RankedItem {
        method: item.method.clone(),
        reasoning: if item.reasoning.trim().is_empty() {
            reasoning_for(&item.method).unwrap_or_else(|| UNDISCUSSED.to_string())
        } else {
            item.reasoning.clone()
        },
        fix: None,
    });
    let ranking = RankedList::from_ordered(Stage::Debugger, items);
    if navigate && scope.is_empty() {
        warnings.push("debugger retrieved no method bodies".into());
    }
    Ok(DebugOutcome {
        reasoning,
        ranking,
        retrieved: if navigate { scope } else { Vec::new() },
        enhanced_failure_reason: enhanced_reason(&content),
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codegraph::load_graph;

    fn graph() -> CodeGraph {
        load_graph(
            r#"{"methods":[
                {"id":"p$A#a()","file":"A.java","body":"void a() { b(); }"},
                {"id":"p$B#b()","file":"B.java","body":"void b() {}"}],
              "edges":[[0,1]]}"#,
        )
        .unwrap()
    }

    #[test]
    fn tools_answer_from_the_graph_only() {
        let g = graph();
        let tools = graph_tools(&g);
        let (out, err) = tools.execute(TOOL_CALL_GRAPH, r#"{"method":"p$A#a()"}"#);
        assert!(!err);
        assert_eq!(out, r#"{"method":"p$A#a()","callers":[],"callees":["p$B#b()"]}"#);
        let (out, err) = tools.execute(TOOL_METHOD_BODY, r#"{"method":"p$Z#z()"}"#);
        assert!(err, "{out}");
        let (_, err) = tools.execute(TOOL_METHOD_BODY, r#"{"nope":1}"#);
        assert!(err);
    }

    #[test]
    fn retrieved_methods_skip_failed_lookups() {
        let exec = |args: &str, is_error| ToolExecution {
            call_id: "c".into(),
            tool_name: TOOL_METHOD_BODY.into(),
            arguments: args.into(),
            output: String::new(),
            is_error,
            exchange: 0,
        };
        let got = retrieved_methods(&[
            exec(r#"{"method":"p$B#b()"}"#, false),
            exec(r#"{"method":"p$Z#z()"}"#, true),
            exec(r#"{"method":"p$B#b()"}"#, false),
        ]);
        assert_eq!(got, [MethodId::parse("p$B#b()").unwrap()]);
    }
}
