//! Seeded synthetic fault corpora with matching mock scripts.
//!
//! Every fault has one faulty method, an entry method that calls it, and a
//! decoy that only the failing test covers (so spectrum scores put the decoy
//! above the fault). The mock script answers each agent step:
//!
//! - prioritization names the fault and the entry;
//! - with tools, the debugger reads the entry, its call graph, then the
//!   fault, and ranks `[entry, fault]`; without tools it ranks
//!   `[fault, entry, decoy]` directly;
//! - the reviewer moves the fault to the top and keeps it there, so the
//!   critique loop stabilizes after two iterations;
//! - finalization attaches a fix to each entry.
//!
//! A debugger whose prioritized set lacks the fault reads the decoy instead
//! and ranks only the decoy. With [`SyntheticOptions::degrade_undivided`],
//! a single-group prioritization ("group 1 of 1") picks only the decoy,
//! modelling a long-context request that loses the relevant method.

use std::collections::{BTreeSet, HashMap};

use bitvec::prelude::*;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde_json::json;

use crate::bundle::FaultBundle;
use crate::codegraph::{CodeGraph, MethodNode};
use crate::evalbench::GroundTruth;
use crate::llm::mock::{MockScript, ScriptStep, ScriptedReply, StepMatcher};
use crate::preprocess::TestSource;
use crate::spectra::{CoverageEntry, CoverageMatrix, MethodId, Outcome, TestRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyntheticOptions {
    pub faults: usize,
    /// Production methods per fault, at least 4.
    pub methods: usize,
    pub passing_tests: usize,
    pub seed: u64,
    pub degrade_undivided: bool,
}

impl Default for SyntheticOptions {
    fn default() -> Self {
        Self {
            faults: 5,
            methods: 12,
            passing_tests: 4,
            seed: 7,
            degrade_undivided: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticFault {
    pub bundle: FaultBundle,
    pub truth: GroundTruth,
    pub faulty: MethodId,
    pub entry: MethodId,
    pub decoy: MethodId,
}

/// Token limit that splits a default-sized synthetic fault into several
/// prioritization groups.
pub const DIVIDING_TOKEN_LIMIT: usize = 500;

const CLASSES: [&str; 3] = ["Engine", "Parser", "Util"];
const TEST_START_LINE: u32 = 10;

fn marker(k: usize, roles: (usize, usize, usize)) -> String {
    let (entry, faulty, decoy) = roles;
    match k {
        _ if k == entry => "synth:entry".into(),
        _ if k == faulty => "synth:faulty".into(),
        _ if k == decoy => "synth:decoy".into(),
        _ => format!("synth:m{k}"),
    }
}

fn body(k: usize, tag: &str, calls: &[usize]) -> String {
    let mut lines = vec![format!("int op{k}(int x) {{"), format!("    // {tag}")];
    for c in calls {
        lines.push(format!("    x = op{c}(x);"));
    }
    lines.push(format!("    return x + {k};"));
    lines.push("}".into());
    lines.join("\n")
}

fn ranking_json(methods: &[&MethodId], with_fixes: bool) -> String {
    let entries: Vec<_> = methods
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let mut entry = json!({
                "rank": i + 1,
                "method": m.to_string(),
                "reasoning": format!("{} handles the value the assertion checks.", m.method_name()),
            });
            if with_fixes {
                entry["fix"] = json!(format!("Correct the arithmetic in {}.", m.method_name()));
            }
            entry
        })
        .collect();
    let analyzed: Vec<_> = methods
        .iter()
        .map(|m| json!({"method": m.to_string(), "reasoning": format!("Read {}.", m.method_name())}))
        .collect();
    json!({"critique": "The method computing the asserted value belongs first.", "analyzed_methods": analyzed, "ranking": entries}).to_string()
}

fn rule(contains: &str, with_tools: Option<bool>, reply: ScriptedReply) -> ScriptStep {
    ScriptStep {
        matcher: Some(StepMatcher {
            contains: Some(contains.into()),
            with_tools,
            ..StepMatcher::default()
        }),
        reply,
        times: None,
    }
}

fn regex_rule(regex: String, with_tools: Option<bool>, reply: ScriptedReply) -> ScriptStep {
    ScriptStep {
        matcher: Some(StepMatcher {
            regex: Some(regex),
            with_tools,
            ..StepMatcher::default()
        }),
        reply,
        times: None,
    }
}

/// Rules-mode script driving the pipeline on one synthetic fault.
pub fn script_for(entry: &MethodId, faulty: &MethodId, decoy: &MethodId, degrade_undivided: bool) -> MockScript {
    let failure_reason = format!(
        "## Test Purpose\nChecks the value computed through {e}.\n\n## Expected Output\nThe asserted sum.\n\n## Failure Reason\nAn AssertionError due to a wrong sum returned by {f}.",
        e = entry.method_name(),
        f = faulty.method_name()
    );
    let body_of = |m: &MethodId| ScriptedReply::tool("get_MethodBody", json!({"method": m.to_string()}));
    let esc = |m: &MethodId| regex::escape(m.as_str());

    let mut steps = vec![rule("## Task: failure reason", None, ScriptedReply::text(failure_reason))];
    if degrade_undivided {
        steps.push(rule(
            "(group 1 of 1)",
            None,
            ScriptedReply::text(json!([decoy.to_string()]).to_string()),
        ));
    }
    steps.extend([
        rule(
            "## Task: prioritize covered methods",
            None,
            ScriptedReply::text(format!("Most related:\n{}", json!([faulty.to_string(), entry.to_string()]))),
        ),
        rule(
            "## Task: debug and rank",
            Some(false),
            ScriptedReply::text(ranking_json(&[faulty, entry, decoy], false)),
        ),
        // With tools: the fault must be in the prioritized section to be found.
        regex_rule(
            format!(r"## Task: debug and rank(?s:.*)### Prioritized methods(?s:.*){}", esc(faulty)),
            Some(true),
            body_of(entry),
        ),
        rule("## Task: debug and rank", Some(true), body_of(decoy)),
        rule(
            "## Task: review ranking",
            None,
            ScriptedReply::text(ranking_json(&[faulty, entry, decoy], false)),
        ),
        rule(
            "## Task: finalize ranking",
            None,
            ScriptedReply::text(format!(
                "Step by step, each fix follows.\n```json\n{}\n```",
                ranking_json(&[faulty, entry, decoy], true)
            )),
        ),
        rule(
            "// synth:entry",
            Some(true),
            ScriptedReply::tool("get_CallGraph", json!({"method": entry.to_string()})),
        ),
        rule(&format!("{{\"method\":\"{entry}\""), Some(true), body_of(faulty)),
        rule(
            "// synth:faulty",
            Some(true),
            ScriptedReply::text(ranking_json(&[entry, faulty], false)),
        ),
        rule(
            "// synth:decoy",
            Some(true),
            ScriptedReply::text(ranking_json(&[decoy], false)),
        ),
    ]);
    MockScript::rules(steps)
}

fn fault(index: usize, options: &SyntheticOptions, rng: &mut StdRng) -> SyntheticFault {
    let n = options.methods.max(4);
    let package = format!("org.synth.f{index}");
    let ids: Vec<MethodId> = (0..n)
        .map(|k| MethodId::new(&package, CLASSES[k % CLASSES.len()], &format!("op{k}"), "int"))
        .collect();

    let mut picks: Vec<usize> = (0..n).collect();
    let (entry, faulty, decoy) = {
        let mut take = || picks.swap_remove(rng.random_range(0..picks.len()));
        (take(), take(), take())
    };
    let roles = (entry, faulty, decoy);

    // Call edges: entry -> faulty, plus a sparse random forward sprinkle.
    let mut calls: Vec<Vec<usize>> = vec![Vec::new(); n];
    calls[entry].push(faulty);
    for (k, out) in calls.iter_mut().enumerate() {
        let target = rng.random_range(0..n);
        if target != k && target != faulty && target != decoy && rng.random_bool(0.4) && !out.contains(&target) {
            out.push(target);
        }
    }

    let test_class = "EngineTest";
    let test_name = format!("testOp{faulty}");
    let test_id = MethodId::new(&package, test_class, &test_name, "");
    let expected = 1 + faulty + entry;
    let test_text = [
        format!("public void {test_name}() {{"),
        format!("    {} engine = new {}();", CLASSES[entry % 3], CLASSES[entry % 3]),
        format!("    assertEquals({expected}, engine.op{entry}(1));"),
        "    assertTrue(engine != null);".to_string(),
        "}".to_string(),
    ]
    .join("\n");
    let failing_line = TEST_START_LINE + 2;

    let mut nodes: Vec<MethodNode> = ids
        .iter()
        .enumerate()
        .map(|(k, id)| MethodNode {
            id: id.clone(),
            file: format!("{}.java", CLASSES[k % 3]),
            start_line: None,
            end_line: None,
            body: body(k, &marker(k, roles), &calls[k]),
        })
        .collect();
    nodes.push(MethodNode {
        id: test_id.clone(),
        file: format!("{test_class}.java"),
        start_line: Some(TEST_START_LINE),
        end_line: Some(TEST_START_LINE + 4),
        body: test_text.clone(),
    });
    let test_node = n;
    let mut edges: Vec<(usize, usize)> = vec![(test_node, entry)];
    for (k, out) in calls.iter().enumerate() {
        edges.extend(out.iter().map(|&c| (k, c)));
    }
    let graph = CodeGraph::from_parts(nodes, edges).expect("synthetic graph is well formed");

    let trace = format!(
        "java.lang.AssertionError: expected:<{expected}> but was:<{}>\n\
         \tat org.junit.Assert.fail(Assert.java:88)\n\
         \tat org.junit.Assert.failNotEquals(Assert.java:834)\n\
         \tat org.junit.Assert.assertEquals(Assert.java:645)\n\
         \tat {package}.{test_class}.{test_name}({test_class}.java:{failing_line})\n\
         \tat sun.reflect.NativeMethodAccessorImpl.invoke0(Native Method)\n\
         \tat java.lang.reflect.Method.invoke(Method.java:498)",
        expected + 1
    );

    // Test 0 fails; it covers entry, fault, decoy and roughly half the rest.
    let tests_total = options.passing_tests + 1;
    let mut tests = vec![TestRecord {
        name: format!("{package}.{test_class}#{test_name}"),
        outcome: Outcome::Fail,
        runtime: Some("12".into()),
        stack_trace: Some(trace.clone()),
    }];
    tests.extend((0..options.passing_tests).map(|j| TestRecord {
        name: format!("{package}.{test_class}#testPass{j}"),
        outcome: Outcome::Pass,
        runtime: Some("3".into()),
        stack_trace: None,
    }));
    let entries: Vec<CoverageEntry> = ids
        .iter()
        .enumerate()
        .map(|(k, id)| {
            let mut bits = bitvec![0; tests_total];
            let in_failing = k == entry || k == faulty || k == decoy || rng.random_bool(0.5);
            bits.set(0, in_failing);
            for t in 1..tests_total {
                let p = if k == decoy {
                    0.0
                } else if k == faulty {
                    0.5
                } else {
                    0.4
                };
                bits.set(t, rng.random_bool(p));
            }
            if k == faulty && options.passing_tests > 0 {
                bits.set(1, true);
            }
            if !bits.any() {
                bits.set(1.min(tests_total - 1), true);
            }
            CoverageEntry {
                method: id.clone(),
                statements: BTreeSet::from([3 + k as u32 * 10, 4 + k as u32 * 10]),
                covered_by: bits,
            }
        })
        .collect();
    let coverage = CoverageMatrix::new(tests, entries).expect("synthetic coverage is well formed");

    // External scores favour the fault but keep two methods above it.
    let mut external: HashMap<MethodId, f64> = ids.iter().map(|m| (m.clone(), rng.random_range(0.0..0.5))).collect();
    external.insert(ids[faulty].clone(), 0.8);
    external.insert(ids[decoy].clone(), 0.9);
    external.insert(ids[entry].clone(), 0.85);

    let fault_id = format!("Synth-{}", index + 1);
    let script = script_for(&ids[entry], &ids[faulty], &ids[decoy], options.degrade_undivided);
    SyntheticFault {
        truth: GroundTruth {
            fault_id: fault_id.clone(),
            faulty_methods: BTreeSet::from([ids[faulty].clone()]),
        },
        bundle: FaultBundle {
            fault_id,
            coverage,
            graph,
            trace,
            test_id,
            test_source: TestSource {
                text: test_text,
                start_line: TEST_START_LINE,
            },
            project_prefixes: vec![format!("{package}.")],
            external_scores: Some(external),
            mock_script: Some(script),
        },
        faulty: ids[faulty].clone(),
        entry: ids[entry].clone(),
        decoy: ids[decoy].clone(),
    }
}

/// Generates `options.faults` faults; the same options give the same corpus.
pub fn generate(options: &SyntheticOptions) -> Vec<SyntheticFault> {
    let mut rng = StdRng::seed_from_u64(options.seed);
    (0..options.faults).map(|i| fault(i, options, &mut rng)).collect()
}

/// Writes each bundle to `dir/<fault id>/` and the ground truth to
/// `dir/truth.json`.
pub fn write_corpus(faults: &[SyntheticFault], dir: &std::path::Path) -> Result<(), crate::bundle::BundleError> {
    for f in faults {
        f.bundle.write(&dir.join(&f.bundle.fault_id))?;
    }
    let truth: Vec<GroundTruth> = faults.iter().map(|f| f.truth.clone()).collect();
    let path = dir.join(crate::evalbench::TRUTH_FILE);
    std::fs::write(&path, crate::evalbench::ground_truth_to_json(&truth)).map_err(|e| crate::bundle::BundleError::Io {
        path,
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectra::ochiai;

    #[test]
    fn decoy_outscores_fault() {
        for f in generate(&SyntheticOptions::default()) {
            let scores = ochiai(&f.bundle.coverage);
            let pos = |m: &MethodId| scores.iter().position(|s| &s.method == m).unwrap();
            assert!(pos(&f.decoy) < pos(&f.faulty), "{}", f.bundle.fault_id);
            assert!(f.bundle.graph.callees_of(&f.entry).unwrap().any(|c| c == &f.faulty));
        }
    }

    #[test]
    fn generation_is_seeded() {
        let a = generate(&SyntheticOptions::default());
        let b = generate(&SyntheticOptions::default());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.bundle.coverage, y.bundle.coverage);
            assert_eq!(x.bundle.graph, y.bundle.graph);
            assert_eq!(x.truth, y.truth);
        }
    }
}
