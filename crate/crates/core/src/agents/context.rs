//! Context extraction: failure reason and per-group prioritization.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::prompts::{CONTEXT_SYSTEM, REPAIR_METHOD_LIST, REPAIR_SECTIONS};
use super::{render_method, AgentEnv, AgentError};
use crate::codegraph::CodeGraph;
use crate::division::{counter, divide, DivisionPlan};
use crate::llm::structured::parse_method_list;
use crate::llm::{complete, ChatMessage, CompletionRequest, Session};
use crate::preprocess::FailureContext;
use crate::spectra::MethodId;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureReason {
    pub test_purpose: String,
    pub expected_output: String,
    pub failure_reason: String,
    pub raw: String,
}

impl FailureReason {
    /// Parses the three headed sections; on failure returns the missing names.
    pub fn parse(text: &str) -> Result<Self, Vec<String>> {
        let mut sections: [Option<String>; 3] = [None, None, None];
        let mut current: Option<usize> = None;
        for line in text.lines() {
            if let Some(which) = heading(line) {
                current = Some(which);
                sections[which].get_or_insert_with(String::new);
                continue;
            }
            if let Some(i) = current {
                let body = sections[i].get_or_insert_with(String::new);
                body.push_str(line);
                body.push('\n');
            }
        }
        let [purpose, expected, reason] = sections.map(|s| s.map(|s| s.trim().to_string()).filter(|s| !s.is_empty()));
        match (purpose, expected, reason) {
            (Some(test_purpose), Some(expected_output), Some(failure_reason)) => Ok(Self {
                test_purpose,
                expected_output,
                failure_reason,
                raw: text.to_string(),
            }),
            (p, e, r) => Err([(p, "Test Purpose"), (e, "Expected Output"), (r, "Failure Reason")]
                .into_iter()
                .filter(|(s, _)| s.is_none())
                .map(|(_, name)| name.to_string())
                .collect()),
        }
    }

    /// Compact form embedded in later prompts.
    pub fn summary(&self) -> String {
        format!(
            "Test purpose: {}\nExpected output: {}\nFailure reason: {}",
            self.test_purpose, self.expected_output, self.failure_reason
        )
    }
}

/// Section index of a heading line such as `## Expected Output` or
/// `**Failure Reason:**`.
fn heading(line: &str) -> Option<usize> {
    let trimmed = line.trim();
    let marked = trimmed.starts_with('#') || trimmed.starts_with("**");
    if !marked {
        return None;
    }
    let name = trimmed
        .trim_start_matches(['#', '*', ' '])
        .trim_end_matches(['*', ':', ' '])
        .to_ascii_lowercase();
    match name.as_str() {
        "test purpose" | "purpose" => Some(0),
        "expected output" | "expected behavior" | "expected behaviour" | "expected" => Some(1),
        "failure reason" | "reason for failure" => Some(2),
        _ => None,
    }
}

/// Asks for the failure summary and stores it into `ctx.failure_reason`.
/// One repair prompt is sent when a section is missing.
pub fn extract_failure_reason(
    session: &mut Session<'_>,
    env: &AgentEnv<'_>,
    ctx: &mut FailureContext,
) -> Result<FailureReason, AgentError> {
    if ctx.pruned_test_code.trim().is_empty() {
        return Err(AgentError::Precondition("test code is empty".into()));
    }
    let prompt = env.prompts.render(
        &env.config.prompts.failure_reason,
        &[("test_code", &ctx.test_text()), ("stack_trace", &ctx.trace_text())],
    )?;
    let mut messages = vec![ChatMessage::system(CONTEXT_SYSTEM), ChatMessage::user(prompt)];
    let first = complete(session, CompletionRequest::new(messages.clone(), env.config.max_tokens))?;
    let reason = match FailureReason::parse(&first.message.content) {
        Ok(reason) => reason,
        Err(missing) => {
            log::debug!("failure reason lacks {missing:?}; sending repair prompt");
            messages.push(first.message);
            messages.push(ChatMessage::user(REPAIR_SECTIONS));
            let second = complete(session, CompletionRequest::new(messages, env.config.max_tokens))?;
            FailureReason::parse(&second.message.content).map_err(AgentError::MissingSection)?
        }
    };
    ctx.failure_reason = Some(reason.summary());
    Ok(reason)
}

/// Prioritized subsets `C′ᵢ` and their union `C′`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PrioritizedSet {
    pub per_group: Vec<Vec<MethodId>>,
    pub union: Vec<MethodId>,
}

impl PrioritizedSet {
    /// Union by concatenation in group order, keeping first occurrences.
    pub fn from_groups(per_group: Vec<Vec<MethodId>>) -> Self {
        let mut seen = BTreeSet::new();
        let union = per_group
            .iter()
            .flatten()
            .filter(|m| seen.insert(*m))
            .cloned()
            .collect();
        Self { per_group, union }
    }
}

fn prioritize_prompt(
    env: &AgentEnv<'_>,
    index: usize,
    count: usize,
    methods: &str,
    reason: &FailureReason,
    ctx: &FailureContext,
) -> Result<String, AgentError> {
    env.prompts.render(
        &env.config.prompts.prioritize,
        &[
            ("group_index", &index.to_string()),
            ("group_count", &count.to_string()),
            ("failure_reason", &reason.summary()),
            ("stack_trace", &ctx.trace_text()),
            ("methods", methods),
        ],
    )
}

fn entry_texts(env: &AgentEnv<'_>, order: &[MethodId], graph: &CodeGraph) -> Vec<(MethodId, String)> {
    order
        .iter()
        .enumerate()
        .map(|(i, m)| (m.clone(), render_method(i + 1, m, graph, env.config.include_method_bodies)))
        .collect()
}

/// Splits the ordered methods into prioritization groups. Without division
/// the whole list is one group.
pub fn plan_groups(
    env: &AgentEnv<'_>,
    order: &[MethodId],
    graph: &CodeGraph,
    reason: &FailureReason,
    ctx: &FailureContext,
) -> Result<DivisionPlan, AgentError> {
    if order.is_empty() {
        return Err(AgentError::Precondition("no covered methods to prioritize".into()));
    }
    let entries = entry_texts(env, order, graph);
    let budget = env.config.effective_budget();
    let count = counter(&budget.counter_id)?;
    if !env.config.enable_division {
        let total = entries.iter().map(|(_, t)| count.count(t)).sum();
        return Ok(DivisionPlan::single(order.to_vec(), total));
    }
    // Group indices never exceed the method count, so this bounds the header.
    let overhead = count.count(CONTEXT_SYSTEM)
        + count.count(&prioritize_prompt(env, order.len(), order.len(), "", reason, ctx)?);
    Ok(divide(&entries, &budget, overhead)?)
}

/// Asks which methods of one group relate to the failure. Methods outside the
/// group are dropped; an empty answer is legal.
#[allow(clippy::too_many_arguments)]
pub fn prioritize_group(
    session: &mut Session<'_>,
    env: &AgentEnv<'_>,
    group: &[MethodId],
    group_text: &str,
    index: usize,
    count: usize,
    reason: &FailureReason,
    ctx: &FailureContext,
) -> Result<Vec<MethodId>, AgentError> {
    if group.is_empty() {
        return Err(AgentError::Precondition("prioritization group is empty".into()));
    }
    let prompt = prioritize_prompt(env, index, count, group_text, reason, ctx)?;
    let mut messages = vec![ChatMessage::system(CONTEXT_SYSTEM), ChatMessage::user(prompt)];
    let reply = complete(session, CompletionRequest::new(messages.clone(), env.config.max_tokens))?;
    let names = match parse_method_list(&reply.message.content) {
        Some(names) => names,
        None => {
            messages.push(reply.message);
            messages.push(ChatMessage::user(REPAIR_METHOD_LIST));
            let retry = complete(session, CompletionRequest::new(messages, env.config.max_tokens))?;
            parse_method_list(&retry.message.content).ok_or_else(|| {
                AgentError::UnparsableReply(format!("group {index}: no JSON method list in the reply"))
            })?
        }
    };
    let members: BTreeSet<&MethodId> = group.iter().collect();
    let mut picked = Vec::new();
    for name in names {
        match MethodId::parse(&name) {
            Ok(m) if members.contains(&m) => {
                if !picked.contains(&m) {
                    picked.push(m);
                }
            }
            _ => log::warn!("group {index}: dropping `{name}`, not a member of the group"),
        }
    }
    Ok(picked)
}

/// Prioritizes every group of `plan` and forms the union. If every group is
/// judged irrelevant the first group is kept so the debugger has input.
pub fn prioritize_all(
    session: &mut Session<'_>,
    env: &AgentEnv<'_>,
    plan: &DivisionPlan,
    reason: &FailureReason,
    ctx: &FailureContext,
    graph: &CodeGraph,
    warnings: &mut Vec<String>,
) -> Result<PrioritizedSet, AgentError> {
    let order: Vec<MethodId> = plan.flattened().cloned().collect();
    let texts: HashMap<MethodId, String> = entry_texts(env, &order, graph).into_iter().collect();
    let mut per_group = Vec::with_capacity(plan.k);
    for (i, group) in plan.groups.iter().enumerate() {
        let group_text: String = group.iter().map(|m| texts[m].as_str()).collect();
        per_group.push(prioritize_group(
            session,
            env,
            group,
            group_text.trim_end(),
            i + 1,
            plan.k,
            reason,
            ctx,
        )?);
    }
    let mut set = PrioritizedSet::from_groups(per_group);
    if set.union.is_empty() {
        let msg = "no group yielded prioritized methods; falling back to the first group".to_string();
        log::warn!("{msg}");
        warnings.push(msg);
        set.union = plan.groups[0].clone();
    }
    Ok(set)
}
