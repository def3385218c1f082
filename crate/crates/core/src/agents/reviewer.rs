//! Reviewer agent: self-critique iterations over `R*`, then finalization
//! with a fix per ranked method.

use std::collections::BTreeSet;

use serde_json::Value;

use super::context::FailureReason;
use super::debugger::{graph_tools, parse_with_repair, retrieved_methods, ReasonedMethod};
use super::prompts::{NAVIGATION_INSTRUCTIONS, REPAIR_FIXES, REVIEWER_SYSTEM};
use super::{AgentEnv, AgentError};
use crate::codegraph::CodeGraph;
use crate::llm::structured::{json_candidates, parse_structured_ranking, ParsedRanking, REPAIR_RANKING_PROMPT};
use crate::llm::tools::run_tool_loop;
use crate::llm::{complete, ChatMessage, CompletionRequest, Session};
use crate::preprocess::FailureContext;
use crate::ranking::{RankedItem, RankedList, Stage};
use crate::spectra::MethodId;

#[derive(Debug, Clone, PartialEq)]
pub struct ReviewOutcome {
    /// Stage `final`, every entry with a fix.
    pub ranking: RankedList,
    /// Critique iterations actually run.
    pub iterations: u32,
    /// Ranking after each iteration.
    pub history: Vec<RankedList>,
    pub critiques: Vec<String>,
    /// Methods first retrieved during review.
    pub retrieved: Vec<MethodId>,
    pub warnings: Vec<String>,
}

fn critique_text(content: &str) -> String {
    let from_json = json_candidates(content).find_map(|v| v.get("critique").and_then(Value::as_str).map(str::to_string));
    from_json
        .or_else(|| {
            let prose = content[..content.find(['{', '[']).unwrap_or(content.len())].trim();
            (!prose.is_empty()).then(|| prose.to_string())
        })
        .unwrap_or_else(|| "(no critique text)".into())
}

/// Keeps the model's reasoning when given, else the previous one.
fn carry_reasoning(parsed: &ParsedRanking, previous: &RankedList, reasoning: &[ReasonedMethod]) -> Vec<RankedItem> {
    parsed
        .items
        .iter()
        .map(|item| {
            let mut item = item.clone();
            if item.reasoning.trim().is_empty() {
                item.reasoning = previous
                    .entries()
                    .iter()
                    .find(|e| e.method == item.method)
                    .map(|e| e.reasoning.clone())
                    .or_else(|| parsed.analyzed.iter().find(|(m, _)| *m == item.method).map(|(_, r)| r.clone()))
                    .or_else(|| reasoning.iter().find(|r| r.method == item.method).map(|r| r.reasoning.clone()))
                    .unwrap_or_else(|| "Ranked during review.".into());
            }
            item
        })
        .collect()
}

/// Critiques and revises `ranking` until two consecutive rankings have the
/// same method order or `reflexion_max_iters` is reached, then finalizes.
pub fn review_and_rerank(
    session: &mut Session<'_>,
    env: &AgentEnv<'_>,
    ranking: &RankedList,
    reasoning: &[ReasonedMethod],
    reason: &FailureReason,
    ctx: &FailureContext,
    graph: &CodeGraph,
) -> Result<ReviewOutcome, AgentError> {
    if ranking.is_empty() {
        return Err(AgentError::Precondition("ranking to review is empty".into()));
    }
    let config = env.config;
    let navigate = config.enable_navigation;
    let registry = graph_tools(graph);
    let summary = reason.summary();
    let trace = ctx.trace_text();
    let test = ctx.test_text();

    let mut scope: BTreeSet<MethodId> = reasoning.iter().map(|r| r.method.clone()).collect();
    scope.extend(ranking.methods().cloned());
    let mut retrieved_in_review = Vec::new();
    let mut current = ranking.clone();
    let mut history = Vec::new();
    let mut critiques: Vec<String> = Vec::new();
    let mut warnings = Vec::new();
    let mut iterations = 0;

    for iteration in 1..=config.reflexion_max_iters {
        iterations = iteration;
        let reflections = if critiques.is_empty() {
            "(none yet)".to_string()
        } else {
            critiques
                .iter()
                .enumerate()
                .map(|(i, c)| format!("Iteration {}: {c}", i + 1))
                .collect::<Vec<_>>()
                .join("\n")
        };
        let prompt = env.prompts.render(
            &config.prompts.reviewer_critique,
            &[
                ("iteration", &iteration.to_string()),
                ("max_iterations", &config.reflexion_max_iters.to_string()),
                ("tool_instructions", if navigate { NAVIGATION_INSTRUCTIONS } else { "" }),
                ("failure_reason", &summary),
                ("stack_trace", &trace),
                ("test_code", &test),
                ("ranking", current.render().trim_end()),
                ("reflections", &reflections),
            ],
        )?;
        let messages = vec![ChatMessage::system(REVIEWER_SYSTEM), ChatMessage::user(prompt)];
        let (messages, tools) = if navigate {
            let request = CompletionRequest::new(messages, config.max_tokens).with_tools(registry.specs());
            let outcome = run_tool_loop(session, request, &registry, config.max_tool_calls)?;
            for m in retrieved_methods(&outcome.executions) {
                if scope.insert(m.clone()) {
                    retrieved_in_review.push(m);
                }
            }
            (outcome.messages, registry.specs())
        } else {
            let reply = complete(session, CompletionRequest::new(messages.clone(), config.max_tokens))?;
            let mut messages = messages;
            messages.push(reply.message);
            (messages, Vec::new())
        };
        let (parsed, content) =
            parse_with_repair(session, env, messages, tools, REPAIR_RANKING_PROMPT, &|m| scope.contains(m))?;
        warnings.extend(
            parsed
                .dropped
                .iter()
                .map(|name| format!("reviewer iteration {iteration} ranked unknown `{name}`; dropped")),
        );
        critiques.push(critique_text(&content));
        let revised = if parsed.items.is_empty() {
            warnings.push(format!("reviewer iteration {iteration} produced no usable ranking; keeping the previous one"));
            current.clone().with_stage(Stage::ReviewerIteration(iteration))
        } else {
            RankedList::from_ordered(
                Stage::ReviewerIteration(iteration),
                carry_reasoning(&parsed, &current, reasoning),
            )
        };
        let stable = revised.method_order() == current.method_order();
        history.push(revised.clone());
        current = revised;
        if stable {
            break;
        }
    }

    let ranking = finalize(session, env, &current, reasoning, &summary, &trace, &test)?;
    Ok(ReviewOutcome {
        ranking,
        iterations,
        history,
        critiques,
        retrieved: retrieved_in_review,
        warnings,
    })
}

fn missing_fixes(parsed: &ParsedRanking) -> Vec<String> {
    parsed
        .items
        .iter()
        .filter(|i| i.fix.is_none())
        .map(|i| i.method.to_string())
        .collect()
}

/// Chain-of-thought pass that writes a fix for every entry and re-ranks.
/// One repair prompt covers an unparsable reply or missing fixes.
fn finalize(
    session: &mut Session<'_>,
    env: &AgentEnv<'_>,
    current: &RankedList,
    reasoning: &[ReasonedMethod],
    summary: &str,
    trace: &str,
    test: &str,
) -> Result<RankedList, AgentError> {
    let prompt = env.prompts.render(
        &env.config.prompts.reviewer_finalize,
        &[
            ("failure_reason", summary),
            ("stack_trace", trace),
            ("test_code", test),
            ("ranking", current.render().trim_end()),
        ],
    )?;
    let in_scope: BTreeSet<&MethodId> = current.methods().collect();
    let scope = |m: &MethodId| in_scope.contains(m);
    let mut messages = vec![ChatMessage::system(REVIEWER_SYSTEM), ChatMessage::user(prompt)];
    let reply = complete(session, CompletionRequest::new(messages.clone(), env.config.max_tokens))?;
    let usable = |parsed: &ParsedRanking| !parsed.items.is_empty() && missing_fixes(parsed).is_empty();
    let parsed = match parse_structured_ranking(&reply.message.content, scope) {
        Ok(parsed) if usable(&parsed) => parsed,
        _ => {
            messages.push(reply.message);
            messages.push(ChatMessage::user(REPAIR_FIXES));
            let retry = complete(session, CompletionRequest::new(messages, env.config.max_tokens))?;
            let parsed = parse_structured_ranking(&retry.message.content, scope)?;
            if parsed.items.is_empty() {
                return Err(AgentError::EmptyRanking("final ranking".into()));
            }
            let missing = missing_fixes(&parsed);
            if !missing.is_empty() {
                return Err(AgentError::MissingFix(missing));
            }
            parsed
        }
    };
    Ok(RankedList::from_ordered(Stage::Final, carry_reasoning(&parsed, current, reasoning)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn critique_prefers_json_field_then_prose() {
        assert_eq!(critique_text(r#"x {"critique":"too high","ranking":[]}"#), "too high");
        assert_eq!(critique_text("B looks wrong.\n[\"p$A#a()\"]"), "B looks wrong.");
        assert_eq!(critique_text("[]"), "(no critique text)");
    }
}
