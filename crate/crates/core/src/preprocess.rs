//! Failure-context tool-chains: stack-trace pruning and test-code pruning.
//!
//! Traces are accepted in JVM text form, an `Exception: message` header
//! followed by `\tat pkg.Class.method(File.java:NN)` frames. Frames outside the
//! configured project prefixes are dropped. Test code is cut after the failing
//! line and helper test methods reachable from the test are collected from the
//! call graph.

use std::collections::{BTreeSet, VecDeque};
use std::fmt;

use serde::Serialize;
use thiserror::Error;

use crate::codegraph::CodeGraph;
use crate::spectra::MethodId;

/// Maximum call depth followed when collecting helper test methods.
pub const HELPER_DEPTH: usize = 3;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PreprocessError {
    #[error("stack trace has no `at` frames")]
    UnparsableTrace,
    #[error("failing line {line} lies outside the test body span {start}..={end}")]
    FailingLineOutOfRange { line: u32, start: u32, end: u32 },
    #[error("test code is empty")]
    EmptyTest,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StackFrame {
    pub class_fqn: String,
    pub method_name: String,
    pub file: Option<String>,
    pub line: Option<u32>,
}

impl StackFrame {
    /// Parses the text after `at `, e.g. `org.x.Foo.bar(Foo.java:12)`.
    fn parse(text: &str) -> Option<Self> {
        let text = text.trim();
        let open = text.find('(')?;
        let location = text[open + 1..].strip_suffix(')')?;
        let mut qualified = &text[..open];
        // Java 9+ frames may carry a `module@version/` prefix.
        if let Some(slash) = qualified.rfind('/') {
            qualified = &qualified[slash + 1..];
        }
        let dot = qualified.rfind('.')?;
        let class_fqn = &qualified[..dot];
        let method_name = &qualified[dot + 1..];
        if class_fqn.is_empty() || method_name.is_empty() {
            return None;
        }
        let (file, line) = match location.rsplit_once(':') {
            Some((file, line)) if line.parse::<u32>().is_ok() => {
                (Some(file.to_string()), line.parse().ok())
            }
            // `Native Method` and `Unknown Source` are kept as-is so frames re-render verbatim.
            _ if location.is_empty() => (None, None),
            _ => (Some(location.to_string()), None),
        };
        Some(Self {
            class_fqn: class_fqn.to_string(),
            method_name: method_name.to_string(),
            file,
            line,
        })
    }

    /// Whether this frame belongs to `id`'s class (nested classes included).
    pub fn in_class_of(&self, id: &MethodId) -> bool {
        let class = id.class_fqn();
        self.class_fqn == class || self.class_fqn.starts_with(&format!("{class}$"))
    }
}

impl fmt::Display for StackFrame {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "at {}.{}(", self.class_fqn, self.method_name)?;
        match (&self.file, self.line) {
            (Some(file), Some(line)) => write!(f, "{file}:{line})"),
            (Some(file), None) => write!(f, "{file})"),
            (None, _) => f.write_str("Unknown Source)"),
        }
    }
}

/// A pruned trace: the verbatim header plus the retained frames.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PrunedTrace {
    pub exception_header: String,
    pub frames: Vec<StackFrame>,
}

impl PrunedTrace {
    /// Renders back into JVM text form.
    pub fn render(&self) -> String {
        let mut out = self.exception_header.clone();
        for frame in &self.frames {
            out.push_str("\n\t");
            out.push_str(&frame.to_string());
        }
        out
    }

    /// Line number of the frame that best locates the failure inside `test_id`:
    /// the frame of the test method itself, else the deepest frame of its class.
    pub fn failing_line_for(&self, test_id: &MethodId) -> Option<u32> {
        self.frames
            .iter()
            .find(|f| f.in_class_of(test_id) && f.method_name == test_id.method_name())
            .or_else(|| self.frames.iter().find(|f| f.in_class_of(test_id)))
            .and_then(|f| f.line)
    }
}

/// Keeps header lines verbatim and only frames whose class starts with one of
/// `project_prefixes`, in their original order.
pub fn preprocess_trace(
    raw_trace: &str,
    project_prefixes: &[String],
) -> Result<PrunedTrace, PreprocessError> {
    let mut header: Vec<&str> = Vec::new();
    let mut frames = Vec::new();
    let mut saw_frame = false;
    for line in raw_trace.lines() {
        let trimmed = line.trim_start();
        if let Some(rest) = trimmed.strip_prefix("at ") {
            if let Some(frame) = StackFrame::parse(rest) {
                saw_frame = true;
                if project_prefixes
                    .iter()
                    .any(|p| frame.class_fqn.starts_with(p.as_str()))
                {
                    frames.push(frame);
                }
                continue;
            }
        }
        if !saw_frame {
            header.push(line.trim_end_matches('\r'));
        }
    }
    if !saw_frame {
        return Err(PreprocessError::UnparsableTrace);
    }
    while header.last().is_some_and(|l| l.trim().is_empty()) {
        header.pop();
    }
    Ok(PrunedTrace {
        exception_header: header.join("\n"),
        frames,
    })
}

/// Test source text with the file line of its first line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TestSource {
    pub text: String,
    pub start_line: u32,
}

impl TestSource {
    pub fn end_line(&self) -> u32 {
        let lines = self.text.lines().count().max(1) as u32;
        self.start_line + lines - 1
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PreprocessWarning {
    /// The test is absent from the call graph; helpers were not collected.
    TestNotInGraph(MethodId),
}

impl fmt::Display for PreprocessWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::TestNotInGraph(id) => {
                write!(f, "test {id} is not in the call graph; helper methods skipped")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrunedTest {
    pub code: String,
    pub helper_bodies: Vec<(MethodId, String)>,
    pub warnings: Vec<PreprocessWarning>,
}

/// Net `{` minus `}` in Java-like source, ignoring strings, chars and comments.
fn open_braces(code: &str) -> i64 {
    #[derive(PartialEq)]
    enum State {
        Code,
        Str,
        Char,
        LineComment,
        BlockComment,
    }
    let mut state = State::Code;
    let mut depth = 0i64;
    let mut chars = code.chars().peekable();
    while let Some(c) = chars.next() {
        match state {
            State::Code => match c {
                '{' => depth += 1,
                '}' => depth -= 1,
                '"' => state = State::Str,
                '\'' => state = State::Char,
                '/' if chars.peek() == Some(&'/') => {
                    chars.next();
                    state = State::LineComment;
                }
                '/' if chars.peek() == Some(&'*') => {
                    chars.next();
                    state = State::BlockComment;
                }
                _ => {}
            },
            State::Str | State::Char => {
                let close = if state == State::Str { '"' } else { '\'' };
                if c == '\\' {
                    chars.next();
                } else if c == close || c == '\n' {
                    state = State::Code;
                }
            }
            State::LineComment => {
                if c == '\n' {
                    state = State::Code;
                }
            }
            State::BlockComment => {
                if c == '*' && chars.peek() == Some(&'/') {
                    chars.next();
                    state = State::Code;
                }
            }
        }
    }
    depth
}

fn is_test_class(id: &MethodId) -> bool {
    let simple = id.class_name().rsplit('$').next().unwrap_or_default();
    let outer = id.class_name().split('$').next().unwrap_or_default();
    [simple, outer].iter().any(|name| {
        name.starts_with("Test") || name.ends_with("Test") || name.ends_with("Tests") || name.ends_with("TestCase")
    })
}

/// Helper test methods reachable from `test_id` within [`HELPER_DEPTH`] calls,
/// in breadth-first order.
fn collect_helpers(test_id: &MethodId, graph: &CodeGraph) -> Vec<(MethodId, String)> {
    let mut seen = BTreeSet::from([test_id.clone()]);
    let mut queue = VecDeque::from([(test_id.clone(), 0usize)]);
    let mut helpers = Vec::new();
    while let Some((current, depth)) = queue.pop_front() {
        if depth == HELPER_DEPTH {
            continue;
        }
        let Ok(callees) = graph.callees_of(&current) else {
            continue;
        };
        for callee in callees {
            let is_helper = callee.class_fqn() == test_id.class_fqn() || is_test_class(callee);
            if !is_helper || !seen.insert(callee.clone()) {
                continue;
            }
            let body = graph.node(callee).map(|n| n.body.clone()).unwrap_or_default();
            helpers.push((callee.clone(), body));
            queue.push_back((callee.clone(), depth + 1));
        }
    }
    helpers
}

/// Drops test lines after `failing_line` (a file line number), repairs brace
/// balance by appending closers, and collects helper test methods.
pub fn preprocess_test(
    test: &TestSource,
    failing_line: u32,
    test_id: &MethodId,
    graph: &CodeGraph,
) -> Result<PrunedTest, PreprocessError> {
    let text = test.text.replace("\r\n", "\n");
    if text.trim().is_empty() {
        return Err(PreprocessError::EmptyTest);
    }
    let lines: Vec<&str> = text.lines().collect();
    let end = test.start_line + lines.len() as u32 - 1;
    if failing_line < test.start_line || failing_line > end {
        return Err(PreprocessError::FailingLineOutOfRange {
            line: failing_line,
            start: test.start_line,
            end,
        });
    }
    let keep = (failing_line - test.start_line + 1) as usize;
    let mut code = lines[..keep]
        .iter()
        .map(|l| l.trim_end())
        .collect::<Vec<_>>()
        .join("\n");
    let missing = open_braces(&code);
    for _ in 0..missing.max(0) {
        code.push_str("\n}");
    }

    let mut warnings = Vec::new();
    let helper_bodies = if graph.contains(test_id) {
        collect_helpers(test_id, graph)
    } else {
        log::warn!("{}", PreprocessWarning::TestNotInGraph(test_id.clone()));
        warnings.push(PreprocessWarning::TestNotInGraph(test_id.clone()));
        Vec::new()
    };
    Ok(PrunedTest {
        code,
        helper_bodies,
        warnings,
    })
}

/// Everything the agents know about one failure.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FailureContext {
    pub test_id: MethodId,
    pub exception_header: String,
    pub pruned_trace: Vec<StackFrame>,
    pub pruned_test_code: String,
    pub helper_bodies: Vec<(MethodId, String)>,
    pub failure_reason: Option<String>,
}

impl FailureContext {
    pub fn trace_text(&self) -> String {
        PrunedTrace {
            exception_header: self.exception_header.clone(),
            frames: self.pruned_trace.clone(),
        }
        .render()
    }

    /// Test code followed by the bodies of its helper methods.
    pub fn test_text(&self) -> String {
        let mut out = self.pruned_test_code.clone();
        for (id, body) in &self.helper_bodies {
            out.push_str(&format!("\n\n// helper {id}\n{body}"));
        }
        out
    }
}
