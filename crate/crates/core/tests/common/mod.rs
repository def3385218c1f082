//! Shared fixtures: a Lang-5-shaped fault and its scripted replies.
#![allow(dead_code)]

use std::collections::BTreeSet;

use bitvec::prelude::*;
use faultloc_core::codegraph::{CodeGraph, MethodNode};
use faultloc_core::llm::mock::{MockScript, ScriptStep, ScriptedReply};
use faultloc_core::preprocess::TestSource;
use faultloc_core::spectra::{CoverageEntry, CoverageMatrix, Outcome, TestRecord};
use faultloc_core::{FaultBundle, MethodId};
use serde_json::json;

pub const PKG: &str = "org.apache.commons.lang3";

pub fn id(s: &str) -> MethodId {
    MethodId::parse(s).unwrap()
}

pub fn to_locale() -> MethodId {
    id("org.apache.commons.lang3$LocaleUtils#toLocale(String)")
}

pub fn is_available() -> MethodId {
    id("org.apache.commons.lang3$LocaleUtils#isAvailableLocale(Locale)")
}

pub fn test_id() -> MethodId {
    id("org.apache.commons.lang3$LocaleUtilsTest#testLang865()")
}

pub const LANG5_TRACE: &str = "java.lang.IllegalArgumentException: Invalid locale format: _GB\n\
\tat org.apache.commons.lang3.LocaleUtils.toLocale(LocaleUtils.java:99)\n\
\tat org.apache.commons.lang3.LocaleUtilsTest.assertValidToLocale(LocaleUtilsTest.java:140)\n\
\tat org.apache.commons.lang3.LocaleUtilsTest.testLang865(LocaleUtilsTest.java:503)\n\
\tat sun.reflect.NativeMethodAccessorImpl.invoke0(Native Method)\n\
\tat sun.reflect.NativeMethodAccessorImpl.invoke(NativeMethodAccessorImpl.java:62)\n\
\tat java.lang.reflect.Method.invoke(Method.java:498)\n\
\tat junit.framework.TestCase.runTest(TestCase.java:176)\n\
\tat junit.framework.TestCase.runBare(TestCase.java:141)";

pub const LANG5_TEST: &str = "public void testLang865() {
    assertValidToLocale(\"_GB\", \"\", \"GB\", \"\");
    assertValidToLocale(\"_GB_P\", \"\", \"GB\", \"P\");
    assertValidToLocale(\"_GB_POSIX\", \"\", \"GB\", \"POSIX\");
    try {
        LocaleUtils.toLocale(\"_G\");
        fail(\"Must be at least 3 chars if starts with underscore\");
    } catch (final IllegalArgumentException iae) {
    }
}";

pub const LANG5_TEST_START: u32 = 502;

const TO_LOCALE: &str = "public static Locale toLocale(final String str) {
    if (str == null) {
        return null;
    }
    final int len = str.length();
    if (len < 2) {
        throw new IllegalArgumentException(\"Invalid locale format: \" + str);
    }
    final char ch0 = str.charAt(0);
    final char ch1 = str.charAt(1);
    if (!Character.isLowerCase(ch0) || !Character.isLowerCase(ch1)) {
        throw new IllegalArgumentException(\"Invalid locale format: \" + str);
    }
    return new Locale(str.substring(0, 2));
}";

fn node(id: MethodId, file: &str, body: &str) -> MethodNode {
    MethodNode {
        id,
        file: file.into(),
        start_line: None,
        end_line: None,
        body: body.into(),
    }
}

pub fn lang5_graph() -> CodeGraph {
    let helper = id("org.apache.commons.lang3$LocaleUtilsTest#assertValidToLocale(String,String,String,String)");
    let methods = vec![
        node(to_locale(), "LocaleUtils.java", TO_LOCALE),
        node(
            is_available(),
            "LocaleUtils.java",
            "public static boolean isAvailableLocale(final Locale locale) {\n    return availableLocaleList().contains(locale);\n}",
        ),
        node(
            id("org.apache.commons.lang3$LocaleUtils#availableLocaleList()"),
            "LocaleUtils.java",
            "public static List<Locale> availableLocaleList() {\n    return SyncAvoid.AVAILABLE_LOCALE_LIST;\n}",
        ),
        node(
            id("org.apache.commons.lang3$StringUtils#isBlank(CharSequence)"),
            "StringUtils.java",
            "public static boolean isBlank(final CharSequence cs) {\n    return cs == null || cs.length() == 0;\n}",
        ),
        node(
            helper.clone(),
            "LocaleUtilsTest.java",
            "private static void assertValidToLocale(final String localeString, final String language, final String country, final String variant) {\n    final Locale locale = LocaleUtils.toLocale(localeString);\n    assertNotNull(\"valid locale\", locale);\n    assertEquals(language, locale.getLanguage());\n}",
        ),
        node(test_id(), "LocaleUtilsTest.java", LANG5_TEST),
    ];
    // test -> helper -> toLocale; isAvailableLocale -> availableLocaleList
    CodeGraph::from_parts(methods, [(5, 4), (4, 0), (1, 2)]).unwrap()
}

pub fn lang5_coverage() -> CoverageMatrix {
    let test = |name: &str, outcome, trace: Option<&str>| TestRecord {
        name: format!("{PKG}.LocaleUtilsTest#{name}"),
        outcome,
        runtime: Some("4".into()),
        stack_trace: trace.map(str::to_string),
    };
    let tests = vec![
        test("testToLocale_1Part", Outcome::Pass, None),
        test("testLang865", Outcome::Fail, Some(LANG5_TRACE)),
        test("testToLocale_2Part", Outcome::Pass, None),
        test("testAvailableLocaleList", Outcome::Pass, None),
    ];
    let entry = |m: MethodId, lines: &[u32], bits: [u8; 4]| CoverageEntry {
        method: m,
        statements: lines.iter().copied().collect::<BTreeSet<u32>>(),
        covered_by: bits.iter().map(|&b| b == 1).collect::<BitVec>(),
    };
    CoverageMatrix::new(
        tests,
        vec![
            entry(id("org.apache.commons.lang3$StringUtils#isBlank(CharSequence)"), &[210], [1, 1, 1, 0]),
            entry(to_locale(), &[92, 95, 99], [1, 1, 1, 0]),
            entry(is_available(), &[231], [0, 1, 0, 1]),
            entry(id("org.apache.commons.lang3$LocaleUtils#availableLocaleList()"), &[220], [0, 1, 0, 1]),
        ],
    )
    .unwrap()
}

pub const LANG5_REASON: &str = "## Test Purpose\nThe test checks that LocaleUtils.toLocale parses locale strings that start with an underscore, such as \"_GB\".\n\n## Expected Output\nA Locale with an empty language and country \"GB\".\n\n## Failure Reason\nThe test fails with an IllegalArgumentException due to an invalid locale format: toLocale rejects strings whose first two characters are not lowercase letters, so the leading underscore is never accepted.";

fn ranking(methods: &[&MethodId], fixes: bool) -> String {
    let ranking: Vec<_> = methods
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let mut e = json!({"rank": i + 1, "method": m.to_string(), "reasoning": format!("{} is on the failing path.", m.method_name())});
            if fixes {
                e["fix"] = json!("Accept a leading underscore followed by a country code.");
            }
            e
        })
        .collect();
    json!({"critique": "The ranking is consistent with the trace.", "ranking": ranking}).to_string()
}

/// Sequential script for the full configuration on the Lang-5 fixture.
pub fn lang5_script() -> MockScript {
    let tl = to_locale();
    let ia = is_available();
    MockScript::sequential(vec![
        ScriptStep::when("## Task: failure reason", ScriptedReply::text(LANG5_REASON)),
        ScriptStep::when(
            "(group 1 of 1)",
            ScriptedReply::text(json!([tl.to_string(), ia.to_string()]).to_string()),
        ),
        ScriptStep::when("## Task: debug and rank", ScriptedReply::tool("get_MethodBody", json!({"method": tl.to_string()}))),
        ScriptStep::when("Invalid locale format", ScriptedReply::tool("get_CallGraph", json!({"method": tl.to_string()}))),
        ScriptStep::reply(ScriptedReply::tool("get_MethodBody", json!({"method": ia.to_string()}))),
        ScriptStep::when("availableLocaleList", ScriptedReply::text(format!("```json\n{}\n```", ranking(&[&tl, &ia], false)))),
        ScriptStep::when("## Task: review ranking (iteration 1 of 3)", ScriptedReply::text(ranking(&[&tl, &ia], false))),
        ScriptStep::when("## Task: finalize ranking", ScriptedReply::text(ranking(&[&tl, &ia], true))),
    ])
}

pub fn lang5_bundle() -> FaultBundle {
    FaultBundle {
        fault_id: "Lang-5".into(),
        coverage: lang5_coverage(),
        graph: lang5_graph(),
        trace: LANG5_TRACE.into(),
        test_id: test_id(),
        test_source: TestSource {
            text: LANG5_TEST.into(),
            start_line: LANG5_TEST_START,
        },
        project_prefixes: vec![format!("{PKG}.")],
        external_scores: None,
        mock_script: Some(lang5_script()),
    }
}
