mod common;

use common::*;
use faultloc_core::agents::context::{plan_groups, prioritize_all};
use faultloc_core::agents::{
    build_failure_context, debug_and_rank, extract_failure_reason, localize, prioritize_group, review_and_rerank,
    AgentEnv, AgentError, FailureReason, PipelineConfig, PromptLibrary, ReasonedMethod, VisitedVia,
};
use faultloc_core::codegraph::load_graph;
use faultloc_core::llm::mock::{MockScript, ScriptStep, ScriptedReply};
use faultloc_core::llm::{MockBackend, Session};
use faultloc_core::ranking::{RankedItem, RankedList, Stage};
use faultloc_core::{FailureContext, MethodId};
use serde_json::json;

fn env<'a>(config: &'a PipelineConfig, prompts: &'a PromptLibrary, backend: &'a MockBackend) -> AgentEnv<'a> {
    AgentEnv {
        config,
        prompts,
        backend,
    }
}

fn lang5_ctx() -> FailureContext {
    build_failure_context(&lang5_bundle(), &mut Vec::new()).unwrap()
}

fn reason() -> FailureReason {
    FailureReason::parse(LANG5_REASON).unwrap()
}

fn text(s: &str) -> ScriptStep {
    ScriptStep::reply(ScriptedReply::text(s))
}

#[test]
fn lang5_failure_reason() {
    let backend = MockBackend::new(MockScript::sequential(vec![text(LANG5_REASON)])).unwrap();
    let (config, prompts) = (PipelineConfig::default(), PromptLibrary::default());
    let mut ctx = lang5_ctx();
    let mut session = Session::new(&backend, "context", "Lang-5");
    let reason = extract_failure_reason(&mut session, &env(&config, &prompts, &backend), &mut ctx).unwrap();
    assert!(reason
        .failure_reason
        .contains("IllegalArgumentException due to an invalid locale format"));
    assert_eq!(ctx.failure_reason.as_deref(), Some(reason.summary().as_str()));
    let prompt = &session.transcript().exchanges[0].request.messages[1].content;
    assert!(prompt.contains("testLang865") && prompt.contains("LocaleUtils.toLocale(LocaleUtils.java:99)"));
    assert!(!prompt.contains("junit.framework"));
}

#[test]
fn missing_section_triggers_one_repair() {
    let partial = "## Test Purpose\nParses locales.\n## Failure Reason\nIt throws.";
    let backend = MockBackend::new(MockScript::sequential(vec![
        text(partial),
        ScriptStep::when("## Expected Output", ScriptedReply::text(LANG5_REASON)),
    ]))
    .unwrap();
    let (config, prompts) = (PipelineConfig::default(), PromptLibrary::default());
    let mut session = Session::new(&backend, "context", "Lang-5");
    extract_failure_reason(&mut session, &env(&config, &prompts, &backend), &mut lang5_ctx()).unwrap();
    assert_eq!(backend.calls(), 2);

    let backend = MockBackend::new(MockScript::sequential(vec![text(partial), text(partial)])).unwrap();
    let mut session = Session::new(&backend, "context", "Lang-5");
    let err = extract_failure_reason(&mut session, &env(&config, &prompts, &backend), &mut lang5_ctx()).unwrap_err();
    assert_eq!(err, AgentError::MissingSection(vec!["Expected Output".into()]));
}

#[test]
fn empty_test_code_fails_before_any_call() {
    let backend = MockBackend::new(MockScript::sequential(vec![])).unwrap();
    let (config, prompts) = (PipelineConfig::default(), PromptLibrary::default());
    let mut ctx = lang5_ctx();
    ctx.pruned_test_code = "  \n".into();
    let mut session = Session::new(&backend, "context", "Lang-5");
    let err = extract_failure_reason(&mut session, &env(&config, &prompts, &backend), &mut ctx).unwrap_err();
    assert!(matches!(err, AgentError::Precondition(_)));
    assert_eq!(backend.calls(), 0);
}

fn group_of_five() -> Vec<MethodId> {
    (0..5).map(|i| id(&format!("p$G#m{i}()"))).collect()
}

#[test]
fn prioritization_reply_order_wins_and_strangers_drop() {
    let group = group_of_five();
    let backend = MockBackend::new(MockScript::sequential(vec![text(r#"["p$G#m3()", "p$Other#x()", "p$G#m1()"]"#)])).unwrap();
    let (config, prompts) = (PipelineConfig::default(), PromptLibrary::default());
    let mut session = Session::new(&backend, "context", "F");
    let picked = prioritize_group(
        &mut session,
        &env(&config, &prompts, &backend),
        &group,
        "1. p$G#m0()",
        1,
        1,
        &reason(),
        &lang5_ctx(),
    )
    .unwrap();
    assert_eq!(picked, [group[3].clone(), group[1].clone()]);
}

#[test]
fn unparsable_prioritization_is_repaired_once() {
    let group = group_of_five();
    let backend = MockBackend::new(MockScript::sequential(vec![text("m2 looks related"), text("[\"p$G#m2()\"]")])).unwrap();
    let (config, prompts) = (PipelineConfig::default(), PromptLibrary::default());
    let mut session = Session::new(&backend, "context", "F");
    let e = env(&config, &prompts, &backend);
    let picked = prioritize_group(&mut session, &e, &group, "", 1, 1, &reason(), &lang5_ctx()).unwrap();
    assert_eq!(picked, [group[2].clone()]);

    let backend = MockBackend::new(MockScript::sequential(vec![text("no"), text("still no")])).unwrap();
    let mut session = Session::new(&backend, "context", "F");
    let e = env(&config, &prompts, &backend);
    let err = prioritize_group(&mut session, &e, &group, "", 1, 1, &reason(), &lang5_ctx()).unwrap_err();
    assert!(matches!(err, AgentError::UnparsableReply(_)));
}

#[test]
fn without_division_one_prioritization_call() {
    let bundle = lang5_bundle();
    let order: Vec<MethodId> = bundle.coverage.methods().cloned().collect();
    let prompts = PromptLibrary::default();
    for (enable_division, limit) in [(false, 600), (true, 600)] {
        let config = PipelineConfig {
            enable_division,
            budget: faultloc_core::TokenBudget::new(limit, "chars4").unwrap(),
            ..Default::default()
        };
        let backend = MockBackend::new(MockScript::rules(vec![text("[]")])).unwrap();
        let e = env(&config, &prompts, &backend);
        let ctx = lang5_ctx();
        let plan = plan_groups(&e, &order, &bundle.graph, &reason(), &ctx).unwrap();
        let mut session = Session::new(&backend, "context", "Lang-5");
        prioritize_all(&mut session, &e, &plan, &reason(), &ctx, &bundle.graph, &mut Vec::new()).unwrap();
        if enable_division {
            assert!(plan.k > 1, "the small limit should split the fixture");
        } else {
            assert_eq!(plan.k, 1);
            assert_eq!(plan.groups[0], order);
        }
        assert_eq!(backend.calls(), plan.k);
    }
}

fn nav_graph() -> faultloc_core::CodeGraph {
    load_graph(
        r#"{"methods":[
            {"id":"p$A#m1()","file":"A.java","body":"void m1() { m2(); }"},
            {"id":"p$B#m2()","file":"B.java","body":"void m2() { int x = 1 / 0; }"},
            {"id":"p$C#m9()","file":"C.java","body":"void m9() {}"}],
          "edges":[[0,1]]}"#,
    )
    .unwrap()
}

fn nav_script(final_ranking: serde_json::Value) -> MockScript {
    let tool = |name: &str, m: &str| ScriptStep::reply(ScriptedReply::tool(name, json!({"method": m})));
    MockScript::sequential(vec![
        tool("get_MethodBody", "p$A#m1()"),
        tool("get_CallGraph", "p$A#m1()"),
        ScriptStep::when("\"callees\":[\"p$B#m2()\"]", ScriptedReply::tool("get_MethodBody", json!({"method": "p$B#m2()"}))),
        ScriptStep::reply(ScriptedReply::text(final_ranking.to_string())),
    ])
}

#[test]
fn debugger_navigates_and_ranks_retrieved_methods() {
    let graph = nav_graph();
    let backend = MockBackend::new(nav_script(json!({
        "analyzed_methods": [{"method": "p$A#m1()", "reasoning": "delegates"}, {"method": "p$B#m2()", "reasoning": "divides by zero"}],
        "ranking": [
            {"rank": 1, "method": "p$B#m2()", "reasoning": "divides by zero"},
            {"rank": 2, "method": "p$A#m1()", "reasoning": "caller"},
            {"rank": 3, "method": "p$C#m9()", "reasoning": "never read"}]
    })))
    .unwrap();
    let (config, prompts) = (PipelineConfig::default(), PromptLibrary::default());
    let mut session = Session::new(&backend, "debugger", "F");
    let out = debug_and_rank(
        &mut session,
        &env(&config, &prompts, &backend),
        &[id("p$A#m1()"), id("p$C#m9()")],
        &reason(),
        &lang5_ctx(),
        &graph,
    )
    .unwrap();
    let r: Vec<_> = out.reasoning.iter().map(|r| (r.method.to_string(), r.visited_via)).collect();
    assert_eq!(
        r,
        [("p$A#m1()".to_string(), VisitedVia::Prioritized), ("p$B#m2()".to_string(), VisitedVia::Navigation)]
    );
    assert_eq!(out.ranking.method_order(), [id("p$B#m2()"), id("p$A#m1()")]);
    assert_eq!(out.ranking.stage, Stage::Debugger);
    assert_eq!(out.warnings.len(), 1, "m9 was ranked without being read");
    assert_eq!(session.transcript().tool_executions.len(), 3);
}

#[test]
fn debugger_without_navigation_uses_a_single_prompt() {
    let graph = nav_graph();
    let reply = json!({"ranking": [{"rank": 1, "method": "p$A#m1()", "reasoning": "calls m2"}]}).to_string();
    let backend = MockBackend::new(MockScript::sequential(vec![ScriptStep::when("void m1() { m2(); }", ScriptedReply::text(reply))])).unwrap();
    let config = PipelineConfig {
        enable_navigation: false,
        ..Default::default()
    };
    let prompts = PromptLibrary::default();
    let mut session = Session::new(&backend, "debugger", "F");
    let out = debug_and_rank(&mut session, &env(&config, &prompts, &backend), &[id("p$A#m1()")], &reason(), &lang5_ctx(), &graph)
        .unwrap();
    let transcript = session.finish();
    assert_eq!(transcript.backend_calls(), 1);
    assert!(transcript.exchanges[0].request.tools.is_empty());
    assert_eq!(transcript.tool_call_records(), 0);
    assert_eq!(out.ranking.len(), 1);
}

#[test]
fn unparsable_debugger_ranking_gets_one_repair() {
    let graph = nav_graph();
    let backend = MockBackend::new(MockScript::sequential(vec![
        ScriptStep::reply(ScriptedReply::tool("get_MethodBody", json!({"method": "p$A#m1()"}))),
        text("m1 is the culprit"),
        ScriptStep::when("Return only the JSON ranking", ScriptedReply::text(r#"["p$A#m1()"]"#)),
    ]))
    .unwrap();
    let (config, prompts) = (PipelineConfig::default(), PromptLibrary::default());
    let mut session = Session::new(&backend, "debugger", "F");
    let out = debug_and_rank(&mut session, &env(&config, &prompts, &backend), &[id("p$A#m1()")], &reason(), &lang5_ctx(), &graph)
        .unwrap();
    assert_eq!(out.ranking.method_order(), [id("p$A#m1()")]);
    assert!(!out.reasoning[0].reasoning.is_empty());
}

fn initial() -> (RankedList, Vec<ReasonedMethod>) {
    let items = ["p$A#m1()", "p$B#m2()"].map(|m| RankedItem {
        method: id(m),
        reasoning: format!("reason for {m}"),
        fix: None,
    });
    let reasoning = items
        .iter()
        .map(|i| ReasonedMethod {
            method: i.method.clone(),
            reasoning: i.reasoning.clone(),
            visited_via: VisitedVia::Prioritized,
        })
        .collect();
    (RankedList::from_ordered(Stage::Debugger, items), reasoning)
}

fn order_reply(order: &[&str], fixes: bool) -> String {
    let ranking: Vec<_> = order
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let mut e = json!({"rank": i + 1, "method": m, "reasoning": "r"});
            if fixes {
                e["fix"] = json!(format!("fix {m}"));
            }
            e
        })
        .collect();
    json!({"critique": "c", "ranking": ranking}).to_string()
}

fn review(script: Vec<ScriptStep>, config: &PipelineConfig) -> (Result<faultloc_core::agents::ReviewOutcome, AgentError>, usize) {
    let backend = MockBackend::new(MockScript::sequential(script)).unwrap();
    let prompts = PromptLibrary::default();
    let (ranking, reasoning) = initial();
    let mut session = Session::new(&backend, "reviewer", "F");
    let out = review_and_rerank(&mut session, &env(config, &prompts, &backend), &ranking, &reasoning, &reason(), &lang5_ctx(), &nav_graph());
    (out, backend.calls())
}

#[test]
fn reviewer_stops_when_the_ranking_stabilizes() {
    let config = PipelineConfig::default();
    let swapped = order_reply(&["p$B#m2()", "p$A#m1()"], false);
    let (out, calls) = review(
        vec![
            ScriptStep::when("(iteration 1 of 3)", ScriptedReply::text(swapped.clone())),
            ScriptStep::when("Iteration 1: c", ScriptedReply::text(swapped)),
            ScriptStep::when("## Task: finalize ranking", ScriptedReply::text(order_reply(&["p$B#m2()", "p$A#m1()"], true))),
        ],
        &config,
    );
    let out = out.unwrap();
    assert_eq!(calls, 3);
    assert_eq!(out.iterations, 2);
    assert_eq!(out.history[0].stage, Stage::ReviewerIteration(1));
    assert_eq!(out.ranking.stage, Stage::Final);
    assert!(out.ranking.has_all_fixes());
    assert_eq!(out.ranking.entries()[0].fix.as_deref(), Some("fix p$B#m2()"));
}

#[test]
fn reviewer_halts_at_the_iteration_bound() {
    let a = order_reply(&["p$B#m2()", "p$A#m1()"], false);
    let b = order_reply(&["p$A#m1()", "p$B#m2()"], false);
    let fin = order_reply(&["p$A#m1()", "p$B#m2()"], true);
    let config = PipelineConfig::default();
    let (out, calls) = review(vec![text(&a), text(&b), text(&a), text(&fin)], &config);
    assert_eq!(out.unwrap().iterations, 3);
    assert_eq!(calls, 4);

    let once = PipelineConfig {
        reflexion_max_iters: 1,
        ..Default::default()
    };
    let (out, calls) = review(vec![text(&a), text(&fin)], &once);
    assert_eq!(out.unwrap().iterations, 1);
    assert_eq!(calls, 2);
}

#[test]
fn final_pass_without_fixes_is_repaired_then_rejected() {
    let config = PipelineConfig {
        reflexion_max_iters: 1,
        ..Default::default()
    };
    let same = order_reply(&["p$A#m1()", "p$B#m2()"], false);
    let (out, calls) = review(
        vec![
            text(&same),
            text(&same),
            ScriptStep::when("non-empty fix", ScriptedReply::text(order_reply(&["p$A#m1()"], true))),
        ],
        &config,
    );
    assert_eq!(calls, 3);
    assert_eq!(out.unwrap().ranking.method_order(), [id("p$A#m1()")]);

    let (out, _) = review(vec![text(&same), text(&same), text(&same)], &config);
    assert!(matches!(out.unwrap_err(), AgentError::MissingFix(_)));
}

#[test]
fn lang5_end_to_end_is_byte_identical() {
    let bundle = lang5_bundle();
    let config = PipelineConfig::default();
    let prompts = PromptLibrary::default();
    let run = || {
        let backend = MockBackend::new(lang5_script()).unwrap();
        localize(&bundle, &config, &prompts, &backend).unwrap()
    };
    let first = run();
    assert_eq!(first.final_ranking.entries()[0].method, to_locale());
    assert_eq!(first.review_iterations, 1);
    assert_eq!(first.context.helper_bodies.len(), 1, "assertValidToLocale is collected");
    let text = first.ranking_file(&config).to_json();
    for _ in 0..2 {
        assert_eq!(run().ranking_file(&config).to_json(), text);
    }
    let reviewer = first.transcript("reviewer").unwrap();
    assert_eq!(reviewer.backend_calls(), 2);
}

#[test]
fn pipeline_errors_carry_the_fault_id() {
    let bundle = lang5_bundle();
    let backend = MockBackend::new(MockScript::sequential(vec![])).unwrap();
    let err = localize(&bundle, &PipelineConfig::default(), &PromptLibrary::default(), &backend).unwrap_err();
    assert!(err.to_string().starts_with("fault Lang-5:"), "{err}");
    assert!(!err.is_input_error());
}
