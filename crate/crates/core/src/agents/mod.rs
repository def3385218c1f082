//! The three agents and the pipeline that chains them.
//!
//! - [`context`]: failure reason, then per-group prioritization of the
//!   sorted, divided coverage; the union of the groups' picks is `C′`.
//! - [`debugger`]: tool-driven navigation over the call graph, producing the
//!   reasoning set `R` and the ordinal ranking `R*`.
//! - [`reviewer`]: critique iterations until the ranking stabilizes, then a
//!   finalization pass that attaches a fix to every entry.

pub mod context;
pub mod debugger;
pub mod prompts;
pub mod reviewer;

use std::collections::BTreeSet;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bundle::{BundleError, FaultBundle};
use crate::codegraph::GraphError;
use crate::division::{DivisionError, DivisionPlan, TokenBudget};
use crate::llm::{AgentTranscript, ChatBackend, LlmError, Session};
use crate::preprocess::{preprocess_test, preprocess_trace, FailureContext, PreprocessError};
use crate::ranking::{RankEntry, RankedList, Stage};
use crate::spectra::{rank_by, MethodId, OrderStrategy, SpectraError};

pub use context::{extract_failure_reason, prioritize_group, FailureReason, PrioritizedSet};
pub use debugger::{debug_and_rank, DebugOutcome, ReasonedMethod, VisitedVia};
pub use prompts::{PromptLibrary, PromptSet};
pub use reviewer::{review_and_rerank, ReviewOutcome};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AgentError {
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Division(#[from] DivisionError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Spectra(#[from] SpectraError),
    #[error(transparent)]
    Bundle(#[from] BundleError),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("failure reason is missing section(s): {}", .0.join(", "))]
    MissingSection(Vec<String>),
    #[error("unparsable reply: {0}")]
    UnparsableReply(String),
    #[error("no ranked method survived scope filtering: {0}")]
    EmptyRanking(String),
    #[error("final ranking lacks a fix for: {}", .0.join(", "))]
    MissingFix(Vec<String>),
    #[error("unknown prompt template `{0}`")]
    UnknownPrompt(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("fault {fault_id}: {source}")]
    InFault {
        fault_id: String,
        #[source]
        source: Box<AgentError>,
    },
}

impl AgentError {
    /// The underlying error without fault context.
    pub fn root(&self) -> &AgentError {
        match self {
            Self::InFault { source, .. } => source.root(),
            other => other,
        }
    }

    /// True for errors caused by bad input files rather than the pipeline.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self.root(),
            Self::Bundle(_) | Self::Spectra(_) | Self::Preprocess(_) | Self::Graph(GraphError::MalformedGraph(_))
        )
    }
}

fn default_true() -> bool {
    true
}

/// Pipeline switches, bounds and prompt selection. Missing fields take the
/// defaults, so a partial document is a valid configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Register the graph tools for the debugger and reviewer.
    #[serde(default = "default_true")]
    pub enable_navigation: bool,
    /// Split the ordered coverage into token-budgeted groups.
    #[serde(default = "default_true")]
    pub enable_division: bool,
    /// Run the reviewer's critique loop and finalization.
    #[serde(default = "default_true")]
    pub enable_reflexion: bool,
    pub order_strategy: OrderStrategy,
    pub reflexion_max_iters: u32,
    pub max_tool_calls: usize,
    pub max_tokens: u32,
    pub budget: TokenBudget,
    /// Fraction of `budget.limit` actually packed, leaving room for the reply.
    pub budget_safety_factor: f64,
    /// Include method bodies in prioritization groups.
    pub include_method_bodies: bool,
    pub prompts: PromptSet,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            enable_navigation: true,
            enable_division: true,
            enable_reflexion: true,
            order_strategy: OrderStrategy::Ochiai,
            reflexion_max_iters: 3,
            max_tool_calls: 25,
            max_tokens: 4096,
            budget: TokenBudget::default(),
            budget_safety_factor: 0.9,
            include_method_bodies: true,
            prompts: PromptSet::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), AgentError> {
        let bad = |msg: &str| Err(AgentError::InvalidConfig(msg.to_string()));
        if self.enable_reflexion && self.reflexion_max_iters == 0 {
            return bad("reflexion_max_iters must be at least 1 when reflexion is enabled");
        }
        if self.max_tool_calls == 0 {
            return bad("max_tool_calls must be at least 1");
        }
        if self.max_tokens == 0 {
            return bad("max_tokens must be at least 1");
        }
        if self.budget.limit == 0 {
            return bad("token limit must be at least 1");
        }
        if !(self.budget_safety_factor > 0.0 && self.budget_safety_factor <= 1.0) {
            return bad("budget_safety_factor must be in (0, 1]");
        }
        crate::division::counter(&self.budget.counter_id)?;
        Ok(())
    }

    /// Budget each prioritization request is packed against.
    pub fn effective_budget(&self) -> TokenBudget {
        self.budget.scaled(self.budget_safety_factor)
    }

    /// Short label such as `full` or `w/o-navigation+division`.
    pub fn label(&self) -> String {
        let off: Vec<&str> = [
            (!self.enable_navigation, "navigation"),
            (!self.enable_division, "division"),
            (!self.enable_reflexion, "reflexion"),
        ]
        .into_iter()
        .filter_map(|(off, name)| off.then_some(name))
        .collect();
        let base = if off.is_empty() {
            "full".to_string()
        } else {
            format!("w/o-{}", off.join("+"))
        };
        if self.order_strategy == OrderStrategy::Ochiai {
            base
        } else {
            format!("{base}@{}", self.order_strategy)
        }
    }
}

/// Prompts, configuration and backend shared by the agent steps of one run.
pub struct AgentEnv<'a> {
    pub config: &'a PipelineConfig,
    pub prompts: &'a PromptLibrary,
    pub backend: &'a dyn ChatBackend,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunStats {
    pub backend_calls: usize,
    pub tool_calls: usize,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl RunStats {
    pub fn of(transcripts: &[AgentTranscript]) -> Self {
        transcripts.iter().fold(Self::default(), |acc, t| Self {
            backend_calls: acc.backend_calls + t.backend_calls(),
            tool_calls: acc.tool_calls + t.tool_executions.len(),
            prompt_tokens: acc.prompt_tokens + t.usage.prompt_tokens,
            completion_tokens: acc.completion_tokens + t.usage.completion_tokens,
        })
    }
}

/// On-disk form of a final ranking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingFile {
    pub fault_id: String,
    pub stage: Stage,
    pub ranking: Vec<RankEntry>,
    pub config: PipelineConfig,
    pub stats: RunStats,
}

impl RankingFile {
    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("ranking file serializes");
        text.push('\n');
        text
    }

    pub fn from_json(text: &str) -> Result<Self, String> {
        let file: Self = serde_json::from_str(text).map_err(|e| e.to_string())?;
        file.ranked_list()?;
        Ok(file)
    }

    /// The ranking as a validated list.
    pub fn ranked_list(&self) -> Result<RankedList, String> {
        let value = serde_json::json!({"stage": self.stage, "entries": self.ranking});
        serde_json::from_value(value).map_err(|e| e.to_string())
    }
}

/// Everything a pipeline run produced for one fault.
#[derive(Debug, Clone)]
pub struct LocalizationResult {
    pub fault_id: String,
    pub context: FailureContext,
    pub failure_reason: FailureReason,
    pub plan: DivisionPlan,
    pub prioritized: PrioritizedSet,
    pub reasoning: Vec<ReasonedMethod>,
    pub debugger_ranking: RankedList,
    pub review_iterations: u32,
    pub final_ranking: RankedList,
    /// `context`, `debugger` and, with reflexion, `reviewer`.
    pub transcripts: Vec<AgentTranscript>,
    pub warnings: Vec<String>,
    pub elapsed_ms: u128,
}

impl LocalizationResult {
    pub fn stats(&self) -> RunStats {
        RunStats::of(&self.transcripts)
    }

    pub fn ranking_file(&self, config: &PipelineConfig) -> RankingFile {
        RankingFile {
            fault_id: self.fault_id.clone(),
            stage: self.final_ranking.stage,
            ranking: self.final_ranking.entries().to_vec(),
            config: config.clone(),
            stats: self.stats(),
        }
    }

    pub fn transcript(&self, agent: &str) -> Option<&AgentTranscript> {
        self.transcripts.iter().find(|t| t.agent == agent)
    }
}

/// Builds the failure context from the bundle's trace and test source.
pub fn build_failure_context(
    bundle: &FaultBundle,
    warnings: &mut Vec<String>,
) -> Result<FailureContext, AgentError> {
    let trace = preprocess_trace(&bundle.trace, &bundle.project_prefixes)?;
    let failing_line = match trace.failing_line_for(&bundle.test_id) {
        Some(line) if line >= bundle.test_source.start_line && line <= bundle.test_source.end_line() => line,
        other => {
            let msg = match other {
                Some(line) => format!("failing line {line} lies outside the test source; keeping the whole test"),
                None => format!("no trace frame locates {}; keeping the whole test", bundle.test_id),
            };
            log::warn!("{msg}");
            warnings.push(msg);
            bundle.test_source.end_line()
        }
    };
    let test = preprocess_test(&bundle.test_source, failing_line, &bundle.test_id, &bundle.graph)?;
    warnings.extend(test.warnings.iter().map(ToString::to_string));
    Ok(FailureContext {
        test_id: bundle.test_id.clone(),
        exception_header: trace.exception_header,
        pruned_trace: trace.frames,
        pruned_test_code: test.code,
        helper_bodies: test.helper_bodies,
        failure_reason: None,
    })
}

/// Method order and division plan for `bundle` without calling any backend.
///
/// The failure reason is not known yet, so the prompt overhead is estimated
/// without it; the real run may split slightly earlier.
pub fn preview_plan(
    bundle: &FaultBundle,
    config: &PipelineConfig,
    prompts: &PromptLibrary,
) -> Result<(Vec<MethodId>, DivisionPlan), AgentError> {
    config.validate()?;
    prompts.check(&config.prompts)?;
    let offline = crate::llm::MockBackend::from_fn(|_| {
        Err(LlmError::BackendRefusal("preview does not call a backend".into()))
    });
    let env = AgentEnv {
        config,
        prompts,
        backend: &offline,
    };
    let ctx = build_failure_context(bundle, &mut Vec::new())?;
    let order = rank_by(&bundle.coverage, config.order_strategy, bundle.external_scores.as_ref())?;
    let reason = FailureReason {
        test_purpose: String::new(),
        expected_output: String::new(),
        failure_reason: String::new(),
        raw: String::new(),
    };
    let plan = context::plan_groups(&env, &order, &bundle.graph, &reason, &ctx)?;
    Ok((order, plan))
}

/// Runs the whole pipeline on one fault.
pub fn localize(
    bundle: &FaultBundle,
    config: &PipelineConfig,
    prompts: &PromptLibrary,
    backend: &dyn ChatBackend,
) -> Result<LocalizationResult, AgentError> {
    localize_inner(bundle, config, prompts, backend).map_err(|source| AgentError::InFault {
        fault_id: bundle.fault_id.clone(),
        source: Box::new(source),
    })
}

fn localize_inner(
    bundle: &FaultBundle,
    config: &PipelineConfig,
    prompts: &PromptLibrary,
    backend: &dyn ChatBackend,
) -> Result<LocalizationResult, AgentError> {
    let started = Instant::now();
    config.validate()?;
    prompts.check(&config.prompts)?;
    let env = AgentEnv {
        config,
        prompts,
        backend,
    };
    let mut warnings = Vec::new();

    for missing in bundle.graph.missing_from(&bundle.coverage) {
        warnings.push(format!("covered method {missing} is not in the call graph"));
    }
    let mut ctx = build_failure_context(bundle, &mut warnings)?;
    let order = rank_by(&bundle.coverage, config.order_strategy, bundle.external_scores.as_ref())?;

    let mut session = Session::new(backend, "context", &bundle.fault_id);
    let reason = extract_failure_reason(&mut session, &env, &mut ctx)?;
    let plan = context::plan_groups(&env, &order, &bundle.graph, &reason, &ctx)?;
    let prioritized = context::prioritize_all(&mut session, &env, &plan, &reason, &ctx, &bundle.graph, &mut warnings)?;
    let mut transcripts = vec![session.finish()];

    let mut session = Session::new(backend, "debugger", &bundle.fault_id);
    let debug = debug_and_rank(&mut session, &env, &prioritized.union, &reason, &ctx, &bundle.graph)?;
    transcripts.push(session.finish());
    warnings.extend(debug.warnings.iter().cloned());

    let (final_ranking, review_iterations) = if config.enable_reflexion {
        let mut session = Session::new(backend, "reviewer", &bundle.fault_id);
        let review = review_and_rerank(&mut session, &env, &debug.ranking, &debug.reasoning, &reason, &ctx, &bundle.graph)?;
        transcripts.push(session.finish());
        warnings.extend(review.warnings);
        (review.ranking, review.iterations)
    } else {
        (debug.ranking.clone().with_stage(Stage::Final), 0)
    };

    check_closure(&prioritized, &debug, &final_ranking, &bundle.graph)?;
    Ok(LocalizationResult {
        fault_id: bundle.fault_id.clone(),
        context: ctx,
        failure_reason: reason,
        plan,
        prioritized,
        reasoning: debug.reasoning,
        debugger_ranking: debug.ranking,
        review_iterations,
        final_ranking,
        transcripts,
        warnings,
        elapsed_ms: started.elapsed().as_millis(),
    })
}

/// Internal consistency between the stages; a failure here is a bug.
fn check_closure(
    prioritized: &PrioritizedSet,
    debug: &DebugOutcome,
    final_ranking: &RankedList,
    graph: &crate::codegraph::CodeGraph,
) -> Result<(), AgentError> {
    let reasoned: BTreeSet<&MethodId> = debug.reasoning.iter().map(|r| &r.method).collect();
    if let Some(m) = debug.ranking.methods().find(|m| !reasoned.contains(m)) {
        return Err(AgentError::Precondition(format!("debugger ranked {m} without reasoning")));
    }
    if let Some(m) = debug
        .reasoning
        .iter()
        .map(|r| &r.method)
        .find(|m| !graph.contains(m) && !prioritized.union.contains(m))
    {
        return Err(AgentError::Precondition(format!("{m} is neither prioritized nor in the graph")));
    }
    final_ranking
        .validate()
        .map_err(|e| AgentError::Precondition(format!("final ranking: {e}")))
}

/// Plain-text block of methods for prompts: id, then optionally the body.
pub(crate) fn render_methods<'a>(
    methods: impl IntoIterator<Item = &'a MethodId>,
    graph: &crate::codegraph::CodeGraph,
    with_bodies: bool,
) -> String {
    let mut out = String::new();
    for (i, method) in methods.into_iter().enumerate() {
        out.push_str(&render_method(i + 1, method, graph, with_bodies));
    }
    out.trim_end().to_string()
}

pub(crate) fn render_method(
    index: usize,
    method: &MethodId,
    graph: &crate::codegraph::CodeGraph,
    with_body: bool,
) -> String {
    match graph.node(method).filter(|_| with_body) {
        Some(node) => format!("{index}. {method}\n```java\n{}\n```\n", node.body.trim_end()),
        None => format!("{index}. {method}\n"),
    }
}
