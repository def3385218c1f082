//! On-disk inputs for one fault.
//!
//! A bundle is a directory with a `bundle.json` manifest:
//!
//! ```json
//! {
//!   "fault_id": "Lang-5",
//!   "spectra": "spectra", "matrix": "matrix", "tests": "tests.csv",
//!   "graph": "graph.json",
//!   "test": {"id": "pkg$FooTest#testBar()", "source_file": "FooTest.java", "start_line": 10},
//!   "trace": "trace.txt",
//!   "project_prefixes": ["pkg."],
//!   "external_scores": "scores.json",
//!   "mock_script": "mock.json"
//! }
//! ```
//!
//! File names default to the values shown. `trace`, `external_scores` and
//! `mock_script` are optional; without `trace` the stack trace recorded for
//! the failing test in the tests file is used.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codegraph::{load_graph, CodeGraph};
use crate::llm::MockScript;
use crate::preprocess::TestSource;
use crate::spectra::{parse_spectra, CoverageMatrix, MethodId, Outcome};

pub const MANIFEST: &str = "bundle.json";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BundleError {
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("{path}: {message}")]
    Invalid { path: PathBuf, message: String },
}

impl BundleError {
    fn invalid(path: &Path, message: impl ToString) -> Self {
        Self::Invalid {
            path: path.to_path_buf(),
            message: message.to_string(),
        }
    }

    pub fn path(&self) -> &Path {
        match self {
            Self::Io { path, .. } | Self::Invalid { path, .. } => path,
        }
    }
}

fn read(path: &Path) -> Result<String, BundleError> {
    std::fs::read_to_string(path).map_err(|e| BundleError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn default_spectra() -> String {
    "spectra".into()
}
fn default_matrix() -> String {
    "matrix".into()
}
fn default_tests() -> String {
    "tests.csv".into()
}
fn default_graph() -> String {
    "graph.json".into()
}
fn default_start_line() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestEntry {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_file: Option<String>,
    /// Inline source, used when `source_file` is absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
    #[serde(default = "default_start_line")]
    pub start_line: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub fault_id: String,
    #[serde(default = "default_spectra")]
    pub spectra: String,
    #[serde(default = "default_matrix")]
    pub matrix: String,
    #[serde(default = "default_tests")]
    pub tests: String,
    #[serde(default = "default_graph")]
    pub graph: String,
    pub test: TestEntry,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<String>,
    pub project_prefixes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub external_scores: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mock_script: Option<String>,
}

/// A fully parsed fault bundle.
#[derive(Debug, Clone)]
pub struct FaultBundle {
    pub fault_id: String,
    pub coverage: CoverageMatrix,
    pub graph: CodeGraph,
    pub trace: String,
    pub test_id: MethodId,
    pub test_source: TestSource,
    pub project_prefixes: Vec<String>,
    pub external_scores: Option<HashMap<MethodId, f64>>,
    pub mock_script: Option<MockScript>,
}

/// Parses `{"method id": score, ...}`.
pub fn parse_external_scores(text: &str) -> Result<HashMap<MethodId, f64>, String> {
    let raw: HashMap<String, f64> = serde_json::from_str(text).map_err(|e| e.to_string())?;
    raw.into_iter()
        .map(|(k, v)| {
            let id = MethodId::parse(&k).map_err(|e| format!("`{k}`: {e}"))?;
            if !v.is_finite() {
                return Err(format!("`{k}`: score is not finite"));
            }
            Ok((id, v))
        })
        .collect()
}

impl FaultBundle {
    /// Loads and parses the bundle in `dir`. Errors name the offending file.
    pub fn load(dir: &Path) -> Result<Self, BundleError> {
        let manifest_path = dir.join(MANIFEST);
        let manifest: Manifest =
            serde_json::from_str(&read(&manifest_path)?).map_err(|e| BundleError::invalid(&manifest_path, e))?;
        let path = |name: &str| dir.join(name);

        let spectra_path = path(&manifest.spectra);
        let matrix_path = path(&manifest.matrix);
        let tests_path = path(&manifest.tests);
        let (spectra, matrix, tests) = (read(&spectra_path)?, read(&matrix_path)?, read(&tests_path)?);
        let coverage = parse_spectra(&spectra, &matrix, &tests).map_err(|e| {
            // Attribute the error to the file it names when possible.
            let message = e.to_string();
            let blamed = [&spectra_path, &matrix_path, &tests_path]
                .into_iter()
                .find(|p| p.file_name().is_some_and(|n| message.contains(&*n.to_string_lossy())))
                .unwrap_or(&matrix_path);
            BundleError::invalid(blamed, message)
        })?;

        let graph_path = path(&manifest.graph);
        let graph = load_graph(&read(&graph_path)?).map_err(|e| BundleError::invalid(&graph_path, e))?;

        let test_id = MethodId::parse(&manifest.test.id).map_err(|e| BundleError::invalid(&manifest_path, e))?;
        let text = match (&manifest.test.source_file, &manifest.test.source) {
            (Some(file), _) => read(&path(file))?,
            (None, Some(inline)) => inline.clone(),
            (None, None) => {
                return Err(BundleError::invalid(&manifest_path, "test needs `source_file` or `source`"));
            }
        };
        let test_source = TestSource {
            text,
            start_line: manifest.test.start_line,
        };

        let trace = match &manifest.trace {
            Some(file) => read(&path(file))?,
            None => recorded_trace(&coverage, &test_id).ok_or_else(|| {
                BundleError::invalid(&tests_path, format!("no stack trace recorded for failing test {test_id}"))
            })?,
        };

        let external_scores = match &manifest.external_scores {
            Some(file) => {
                let p = path(file);
                Some(parse_external_scores(&read(&p)?).map_err(|e| BundleError::invalid(&p, e))?)
            }
            None => None,
        };
        let mock_script = match &manifest.mock_script {
            Some(file) => {
                let p = path(file);
                Some(MockScript::from_json(&read(&p)?).map_err(|e| BundleError::invalid(&p, e))?)
            }
            None => None,
        };

        Ok(Self {
            fault_id: manifest.fault_id,
            coverage,
            graph,
            trace,
            test_id,
            test_source,
            project_prefixes: manifest.project_prefixes,
            external_scores,
            mock_script,
        })
    }

    /// Writes the bundle into `dir` with default file names.
    pub fn write(&self, dir: &Path) -> Result<(), BundleError> {
        let write = |name: &str, text: &str| {
            let p = dir.join(name);
            std::fs::write(&p, text).map_err(|e| BundleError::Io {
                path: p,
                message: e.to_string(),
            })
        };
        std::fs::create_dir_all(dir).map_err(|e| BundleError::Io {
            path: dir.to_path_buf(),
            message: e.to_string(),
        })?;
        let (spectra, matrix, tests) = self.coverage.to_files();
        write("spectra", &spectra)?;
        write("matrix", &matrix)?;
        write("tests.csv", &tests)?;
        write("graph.json", &self.graph.to_json())?;
        write("Test.java", &self.test_source.text)?;
        write("trace.txt", &self.trace)?;
        let mut manifest = Manifest {
            fault_id: self.fault_id.clone(),
            spectra: default_spectra(),
            matrix: default_matrix(),
            tests: default_tests(),
            graph: default_graph(),
            test: TestEntry {
                id: self.test_id.to_string(),
                source_file: Some("Test.java".into()),
                source: None,
                start_line: self.test_source.start_line,
            },
            trace: Some("trace.txt".into()),
            project_prefixes: self.project_prefixes.clone(),
            external_scores: None,
            mock_script: None,
        };
        if let Some(scores) = &self.external_scores {
            let sorted: std::collections::BTreeMap<String, f64> =
                scores.iter().map(|(k, v)| (k.to_string(), *v)).collect();
            write("scores.json", &serde_json::to_string_pretty(&sorted).expect("scores serialize"))?;
            manifest.external_scores = Some("scores.json".into());
        }
        if let Some(script) = &self.mock_script {
            write("mock.json", &script.to_json())?;
            manifest.mock_script = Some("mock.json".into());
        }
        write(MANIFEST, &serde_json::to_string_pretty(&manifest).expect("manifest serializes"))
    }
}

/// Stack trace of the failing test matching `test_id`, else of the first
/// failing test that has one.
fn recorded_trace(coverage: &CoverageMatrix, test_id: &MethodId) -> Option<String> {
    let failing = || {
        coverage
            .tests()
            .iter()
            .filter(|t| t.outcome == Outcome::Fail)
            .filter_map(|t| t.stack_trace.as_ref().map(|s| (t, s)))
    };
    let method = test_id.method_name();
    failing()
        .find(|(t, _)| t.name == test_id.as_str() || t.name.ends_with(&format!("#{method}")))
        .or_else(|| failing().next())
        .map(|(_, s)| s.clone())
}
