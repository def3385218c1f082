//! Coverage spectra ingestion and spectrum-based suspiciousness.
//!
//! Three GZoltar-style text files describe one run of a test suite:
//!
//! - **spectra**: one instrumented element per line, a canonical [`MethodId`]
//!   optionally suffixed with `:lineno` for statement granularity;
//! - **matrix**: one row per test, a `0`/`1` token per element and a final
//!   `+` (pass) or `-` (fail) verdict;
//! - **tests**: one CSV record per test, `name,outcome[,runtime[,stacktrace]]`.
//!
//! Statement rows are folded into method-level [`CoverageEntry`] values at
//! ingestion. A method is covered by a test iff any of its statements is.

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use bitvec::vec::BitVec;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SpectraError {
    #[error("malformed line {line} in {file}: {reason}")]
    MalformedLine {
        file: &'static str,
        line: usize,
        reason: String,
    },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("coverage contains no failing test")]
    NoFailingTest,
    #[error("invalid method id `{0}`")]
    InvalidMethodId(String),
    #[error("external ordering requested but no supplied score names a covered method")]
    EmptyExternalScores,
}

/// Fully qualified method name in the canonical `package$Class#method(Params)` form.
///
/// Ordering and equality follow the canonical text.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct MethodId {
    canonical: String,
    package_end: usize,
    class_end: usize,
    method_end: usize,
}

impl MethodId {
    pub fn new(package: &str, class_name: &str, method_name: &str, param_signature: &str) -> Self {
        let params: String = param_signature.chars().filter(|c| !c.is_whitespace()).collect();
        let canonical = format!("{package}${class_name}#{method_name}({params})");
        let package_end = package.len();
        let class_end = package_end + 1 + class_name.len();
        let method_end = class_end + 1 + method_name.len();
        Self {
            canonical,
            package_end,
            class_end,
            method_end,
        }
    }

    pub fn parse(text: &str) -> Result<Self, SpectraError> {
        let invalid = || SpectraError::InvalidMethodId(text.to_string());
        let text = text.trim();
        let dollar = text.find('$').ok_or_else(invalid)?;
        let hash = text[dollar + 1..].find('#').ok_or_else(invalid)? + dollar + 1;
        let open = text[hash + 1..].find('(').ok_or_else(invalid)? + hash + 1;
        if !text.ends_with(')') || open + 1 > text.len() - 1 {
            return Err(invalid());
        }
        let package = &text[..dollar];
        let class_name = &text[dollar + 1..hash];
        let method_name = &text[hash + 1..open];
        let params = &text[open + 1..text.len() - 1];
        if class_name.is_empty() || method_name.is_empty() || params.contains(['(', ')']) {
            return Err(invalid());
        }
        Ok(Self::new(package, class_name, method_name, params))
    }

    pub fn package(&self) -> &str {
        &self.canonical[..self.package_end]
    }

    pub fn class_name(&self) -> &str {
        &self.canonical[self.package_end + 1..self.class_end]
    }

    pub fn method_name(&self) -> &str {
        &self.canonical[self.class_end + 1..self.method_end]
    }

    pub fn param_signature(&self) -> &str {
        &self.canonical[self.method_end + 1..self.canonical.len() - 1]
    }

    /// `package.Class` with nested classes kept in their `Outer$Inner` form.
    pub fn class_fqn(&self) -> String {
        if self.package().is_empty() {
            self.class_name().to_string()
        } else {
            format!("{}.{}", self.package(), self.class_name())
        }
    }

    pub fn as_str(&self) -> &str {
        &self.canonical
    }
}

impl fmt::Display for MethodId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.canonical)
    }
}

impl fmt::Debug for MethodId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "MethodId({})", self.canonical)
    }
}

impl FromStr for MethodId {
    type Err = SpectraError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse(s)
    }
}

impl Ord for MethodId {
    fn cmp(&self, other: &Self) -> Ordering {
        self.canonical.cmp(&other.canonical)
    }
}

impl PartialOrd for MethodId {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Serialize for MethodId {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.canonical)
    }
}

impl<'de> Deserialize<'de> for MethodId {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        MethodId::parse(&text).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Pass,
    Fail,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestRecord {
    pub name: String,
    pub outcome: Outcome,
    pub runtime: Option<String>,
    pub stack_trace: Option<String>,
}

/// One method's coverage: its statements and the tests that executed any of them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoverageEntry {
    pub method: MethodId,
    /// Source lines seen for this method. Line `0` stands for a method-level
    /// spectra element without a line suffix.
    pub statements: BTreeSet<u32>,
    pub covered_by: BitVec,
}

/// Method-level coverage over an ordered list of tests, in execution order.
#[derive(Debug, Clone, PartialEq)]
pub struct CoverageMatrix {
    tests: Vec<TestRecord>,
    entries: Vec<CoverageEntry>,
}

impl CoverageMatrix {
    /// Builds a matrix from already-aggregated parts, checking the invariants
    /// that ingestion establishes. Uncovered entries are dropped.
    pub fn new(tests: Vec<TestRecord>, entries: Vec<CoverageEntry>) -> Result<Self, SpectraError> {
        if !tests.iter().any(|t| t.outcome == Outcome::Fail) {
            return Err(SpectraError::NoFailingTest);
        }
        let mut seen = BTreeSet::new();
        let mut kept = Vec::with_capacity(entries.len());
        for entry in entries {
            if entry.covered_by.len() != tests.len() {
                return Err(SpectraError::DimensionMismatch(format!(
                    "entry {} covers {} tests, matrix has {}",
                    entry.method,
                    entry.covered_by.len(),
                    tests.len()
                )));
            }
            if entry.statements.is_empty() {
                return Err(SpectraError::DimensionMismatch(format!(
                    "entry {} has no statements",
                    entry.method
                )));
            }
            if !seen.insert(entry.method.clone()) {
                return Err(SpectraError::DimensionMismatch(format!(
                    "method {} appears twice",
                    entry.method
                )));
            }
            if entry.covered_by.any() {
                kept.push(entry);
            }
        }
        Ok(Self {
            tests,
            entries: kept,
        })
    }

    pub fn tests(&self) -> &[TestRecord] {
        &self.tests
    }

    pub fn entries(&self) -> &[CoverageEntry] {
        &self.entries
    }

    pub fn methods(&self) -> impl Iterator<Item = &MethodId> {
        self.entries.iter().map(|e| &e.method)
    }

    pub fn failing_tests(&self) -> impl Iterator<Item = (usize, &TestRecord)> {
        self.tests
            .iter()
            .enumerate()
            .filter(|(_, t)| t.outcome == Outcome::Fail)
    }

    pub fn fail_count(&self) -> usize {
        self.failing_tests().count()
    }

    pub fn pass_count(&self) -> usize {
        self.tests.len() - self.fail_count()
    }

    /// Renders the three ingestion files `(spectra, matrix, tests)`.
    ///
    /// Each statement becomes one spectra element carrying its method's
    /// aggregated bits, so re-parsing yields an equal matrix.
    pub fn to_files(&self) -> (String, String, String) {
        let mut spectra = String::new();
        let mut columns: Vec<&BitVec> = Vec::new();
        for entry in &self.entries {
            for &line in &entry.statements {
                if line == 0 {
                    spectra.push_str(entry.method.as_str());
                } else {
                    spectra.push_str(&format!("{}:{}", entry.method, line));
                }
                spectra.push('\n');
                columns.push(&entry.covered_by);
            }
        }
        let mut matrix = String::new();
        for (t, test) in self.tests.iter().enumerate() {
            for column in &columns {
                matrix.push_str(if column[t] { "1 " } else { "0 " });
            }
            matrix.push(match test.outcome {
                Outcome::Pass => '+',
                Outcome::Fail => '-',
            });
            matrix.push('\n');
        }
        (spectra, matrix, write_tests(&self.tests))
    }
}

fn write_tests(tests: &[TestRecord]) -> String {
    let mut writer = csv::WriterBuilder::new()
        .flexible(true)
        .from_writer(Vec::new());
    writer
        .write_record(["name", "outcome", "runtime", "stacktrace"])
        .expect("in-memory write");
    for test in tests {
        let outcome = match test.outcome {
            Outcome::Pass => "PASS",
            Outcome::Fail => "FAIL",
        };
        let mut record = vec![test.name.as_str(), outcome];
        match (&test.runtime, &test.stack_trace) {
            (None, None) => {}
            (runtime, trace) => {
                record.push(runtime.as_deref().unwrap_or(""));
                if let Some(trace) = trace {
                    record.push(trace);
                }
            }
        }
        writer.write_record(&record).expect("in-memory write");
    }
    String::from_utf8(writer.into_inner().expect("in-memory flush")).expect("utf-8 input")
}

fn malformed(file: &'static str, line: usize, reason: impl Into<String>) -> SpectraError {
    SpectraError::MalformedLine {
        file,
        line,
        reason: reason.into(),
    }
}

/// Splits a spectra element into its method and optional line number.
fn parse_element(text: &str) -> Result<(MethodId, u32), SpectraError> {
    let close = text.rfind(')');
    let (id_text, line) = match close {
        Some(close) if text[close + 1..].starts_with(':') => {
            let digits = &text[close + 2..];
            let line = digits
                .parse::<u32>()
                .map_err(|_| SpectraError::InvalidMethodId(text.to_string()))?;
            (&text[..=close], line)
        }
        _ => (text, 0),
    };
    Ok((MethodId::parse(id_text)?, line))
}

fn parse_tests(tests_text: &str) -> Result<Vec<TestRecord>, SpectraError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(tests_text.as_bytes());
    let mut tests = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| malformed("tests", i + 1, e.to_string()))?;
        let name = record.get(0).unwrap_or("").trim();
        if i == 0 && name == "name" {
            continue;
        }
        if record.len() == 1 && name.is_empty() {
            continue;
        }
        if name.is_empty() {
            return Err(malformed("tests", i + 1, "empty test name"));
        }
        let outcome = match record.get(1).map(str::trim) {
            Some(o) if o.eq_ignore_ascii_case("pass") || o == "+" => Outcome::Pass,
            Some(o) if o.eq_ignore_ascii_case("fail") || o == "-" => Outcome::Fail,
            other => {
                return Err(malformed(
                    "tests",
                    i + 1,
                    format!("unknown outcome {:?}", other.unwrap_or("")),
                ))
            }
        };
        let runtime = record
            .get(2)
            .map(str::trim)
            .filter(|r| !r.is_empty())
            .map(str::to_string);
        let stack_trace = record
            .get(3)
            .filter(|t| !t.is_empty())
            .map(unescape_trace);
        tests.push(TestRecord {
            name: name.to_string(),
            outcome,
            runtime,
            stack_trace,
        });
    }
    Ok(tests)
}

/// Expands `\n`, `\t` and `\\` escapes found in single-line trace fields.
fn unescape_trace(field: &str) -> String {
    if !field.contains('\\') {
        return field.to_string();
    }
    let mut out = String::with_capacity(field.len());
    let mut chars = field.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('n') => out.push('\n'),
            Some('t') => out.push('\t'),
            Some('r') => {}
            Some('\\') => out.push('\\'),
            Some(other) => {
                out.push('\\');
                out.push(other);
            }
            None => out.push('\\'),
        }
    }
    out
}

/// Parses GZoltar-compatible spectra, matrix and tests files into a
/// method-level [`CoverageMatrix`].
pub fn parse_spectra(
    spectra_text: &str,
    matrix_text: &str,
    tests_text: &str,
) -> Result<CoverageMatrix, SpectraError> {
    let mut elements = Vec::new();
    for (i, line) in spectra_text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (i == 0 && line == "name") {
            continue;
        }
        let element = parse_element(line).map_err(|_| {
            malformed("spectra", i + 1, format!("`{line}` is not a method element"))
        })?;
        elements.push(element);
    }

    let mut rows: Vec<(Vec<bool>, Outcome)> = Vec::new();
    for (i, line) in matrix_text.lines().enumerate() {
        let tokens: Vec<&str> = line.split_whitespace().collect();
        let Some((verdict, bits)) = tokens.split_last() else {
            continue;
        };
        let outcome = match *verdict {
            "+" => Outcome::Pass,
            "-" => Outcome::Fail,
            other => {
                return Err(malformed(
                    "matrix",
                    i + 1,
                    format!("row must end with `+` or `-`, found `{other}`"),
                ))
            }
        };
        let bits = bits
            .iter()
            .map(|tok| match *tok {
                "1" => Ok(true),
                "0" => Ok(false),
                other => Err(malformed("matrix", i + 1, format!("invalid token `{other}`"))),
            })
            .collect::<Result<Vec<_>, _>>()?;
        if bits.len() != elements.len() {
            return Err(SpectraError::DimensionMismatch(format!(
                "matrix row {} has {} element columns, spectra lists {}",
                i + 1,
                bits.len(),
                elements.len()
            )));
        }
        rows.push((bits, outcome));
    }

    let mut tests = parse_tests(tests_text)?;
    if tests.len() != rows.len() {
        return Err(SpectraError::DimensionMismatch(format!(
            "tests file lists {} tests, matrix has {} rows",
            tests.len(),
            rows.len()
        )));
    }
    for (t, (test, (_, verdict))) in tests.iter_mut().zip(&rows).enumerate() {
        if test.outcome != *verdict {
            return Err(malformed(
                "tests",
                t + 1,
                format!(
                    "outcome of `{}` disagrees with matrix verdict {:?}",
                    test.name, verdict
                ),
            ));
        }
    }

    let mut index: HashMap<MethodId, usize> = HashMap::new();
    let mut entries: Vec<CoverageEntry> = Vec::new();
    for (col, (method, line)) in elements.into_iter().enumerate() {
        let slot = *index.entry(method.clone()).or_insert_with(|| {
            entries.push(CoverageEntry {
                method,
                statements: BTreeSet::new(),
                covered_by: BitVec::repeat(false, rows.len()),
            });
            entries.len() - 1
        });
        let entry = &mut entries[slot];
        entry.statements.insert(line);
        for (t, (bits, _)) in rows.iter().enumerate() {
            if bits[col] {
                entry.covered_by.set(t, true);
            }
        }
    }

    CoverageMatrix::new(tests, entries)
}

/// Ochiai suspiciousness together with the spectrum counts it was computed from.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuspiciousnessScore {
    pub method: MethodId,
    pub score: f64,
    pub e_f: u32,
    pub e_p: u32,
    pub n_f: u32,
    pub n_p: u32,
}

/// Ochiai formula over raw counts. A zero denominator yields 0.
pub fn ochiai_score(e_f: u32, n_f: u32, e_p: u32) -> f64 {
    let denominator = (f64::from(e_f + n_f) * f64::from(e_f + e_p)).sqrt();
    if e_f == 0 || denominator == 0.0 {
        0.0
    } else {
        f64::from(e_f) / denominator
    }
}

/// Scores every entry and sorts descending, ties broken by [`MethodId`] order.
pub fn ochiai(matrix: &CoverageMatrix) -> Vec<SuspiciousnessScore> {
    let mut failing: BitVec = BitVec::repeat(false, matrix.tests.len());
    for (t, _) in matrix.failing_tests() {
        failing.set(t, true);
    }
    let total_fail = failing.count_ones() as u32;
    let total_pass = matrix.tests.len() as u32 - total_fail;

    let mut scores: Vec<SuspiciousnessScore> = matrix
        .entries
        .iter()
        .map(|entry| {
            let mut e_f = 0u32;
            let mut e_p = 0u32;
            for t in entry.covered_by.iter_ones() {
                if failing[t] {
                    e_f += 1;
                } else {
                    e_p += 1;
                }
            }
            let n_f = total_fail - e_f;
            let n_p = total_pass - e_p;
            SuspiciousnessScore {
                method: entry.method.clone(),
                score: ochiai_score(e_f, n_f, e_p),
                e_f,
                e_p,
                n_f,
                n_p,
            }
        })
        .collect();
    scores.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.method.cmp(&b.method))
    });
    scores
}

/// How covered methods are ordered before division.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OrderStrategy {
    /// Ingestion (execution) order.
    Execution,
    #[default]
    Ochiai,
    /// Descending externally supplied scores.
    External,
}

impl FromStr for OrderStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "execution" => Ok(Self::Execution),
            "ochiai" => Ok(Self::Ochiai),
            "external" => Ok(Self::External),
            other => Err(format!(
                "unknown order strategy `{other}` (expected execution, ochiai or external)"
            )),
        }
    }
}

impl fmt::Display for OrderStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Execution => "execution",
            Self::Ochiai => "ochiai",
            Self::External => "external",
        })
    }
}

/// Orders the covered methods of `matrix` by `strategy`.
///
/// For [`OrderStrategy::External`], methods without a supplied score follow the
/// scored ones in execution order.
pub fn rank_by(
    matrix: &CoverageMatrix,
    strategy: OrderStrategy,
    external_scores: Option<&HashMap<MethodId, f64>>,
) -> Result<Vec<MethodId>, SpectraError> {
    match strategy {
        OrderStrategy::Execution => Ok(matrix.methods().cloned().collect()),
        OrderStrategy::Ochiai => Ok(ochiai(matrix).into_iter().map(|s| s.method).collect()),
        OrderStrategy::External => {
            let scores = external_scores.ok_or(SpectraError::EmptyExternalScores)?;
            let mut scored: Vec<(&MethodId, f64)> = Vec::new();
            let mut unscored: Vec<&MethodId> = Vec::new();
            for method in matrix.methods() {
                match scores.get(method) {
                    Some(&score) => scored.push((method, score)),
                    None => unscored.push(method),
                }
            }
            if scored.is_empty() {
                return Err(SpectraError::EmptyExternalScores);
            }
            scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
            Ok(scored
                .into_iter()
                .map(|(m, _)| m)
                .chain(unscored)
                .cloned()
                .collect())
        }
    }
}
