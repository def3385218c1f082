//! Fault localization from failing-test evidence with cooperating LLM agents.
//!
//! The pipeline ingests coverage spectra, a stack trace, test source and a
//! call graph, then runs three agents over a [`llm::ChatBackend`]:
//!
//! 1. a context agent that summarizes the failure and prioritizes covered
//!    methods group by group, after sorting and token-budgeted division;
//! 2. a debugger agent that navigates the call graph through tools and ranks
//!    the methods it examined;
//! 3. a reviewer agent that critiques and revises that ranking until it
//!    stabilizes, then proposes a fix for every ranked method.
//!
//! [`evalbench`] scores rankings with Top-N recall and runs ablation and
//! ordering experiments.

pub mod agents;
pub mod bundle;
pub mod codegraph;
pub mod division;
pub mod evalbench;
pub mod llm;
pub mod preprocess;
pub mod ranking;
pub mod spectra;
pub mod synthetic;

pub use agents::{
    localize, preview_plan, AgentError, FailureReason, LocalizationResult, PipelineConfig, PrioritizedSet, PromptLibrary,
    RankingFile, ReasonedMethod,
};
pub use bundle::{BundleError, FaultBundle};
pub use codegraph::{get_call_graph, get_method_body, load_graph, CodeGraph, GraphError, NeighborReport};
pub use division::{count_tokens, divide, DivisionError, DivisionPlan, TokenBudget};
pub use evalbench::{run_experiment, top_n, ExperimentTable, GroundTruth, TopNReport};
pub use llm::{AgentTranscript, ChatBackend, LlmError, MockBackend, MockScript, RemoteBackend};
pub use preprocess::{preprocess_test, preprocess_trace, FailureContext, PreprocessError, StackFrame};
pub use ranking::{RankEntry, RankedItem, RankedList, Stage};
pub use spectra::{
    ochiai, parse_spectra, rank_by, CoverageMatrix, MethodId, OrderStrategy, SpectraError,
    SuspiciousnessScore,
};
