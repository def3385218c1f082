//! Top-N recall, ground truth, and batch experiments over fault corpora.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize};

use crate::agents::{localize, PipelineConfig, PromptLibrary};
use crate::bundle::{BundleError, FaultBundle, MANIFEST};
use crate::llm::ChatBackend;
use crate::ranking::RankedList;
use crate::spectra::MethodId;

/// Cut-offs reported for every run.
pub const TOP_N: [usize; 4] = [1, 3, 5, 10];

pub const TRUTH_FILE: &str = "truth.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct GroundTruth {
    pub fault_id: String,
    pub faulty_methods: BTreeSet<MethodId>,
}

impl<'de> Deserialize<'de> for GroundTruth {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            fault_id: String,
            faulty_methods: BTreeSet<MethodId>,
        }
        let raw = Raw::deserialize(deserializer)?;
        if raw.faulty_methods.is_empty() {
            return Err(serde::de::Error::custom(format!(
                "{}: faulty_methods must not be empty",
                raw.fault_id
            )));
        }
        Ok(Self {
            fault_id: raw.fault_id,
            faulty_methods: raw.faulty_methods,
        })
    }
}

pub fn parse_ground_truth(text: &str) -> Result<Vec<GroundTruth>, String> {
    let truth: Vec<GroundTruth> = serde_json::from_str(text).map_err(|e| e.to_string())?;
    let mut ids = BTreeSet::new();
    for t in &truth {
        if !ids.insert(&t.fault_id) {
            return Err(format!("fault {} listed twice", t.fault_id));
        }
    }
    Ok(truth)
}

pub fn ground_truth_to_json(truth: &[GroundTruth]) -> String {
    let mut text = serde_json::to_string_pretty(truth).expect("ground truth serializes");
    text.push('\n');
    text
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopNReport {
    /// Best rank of any faulty method, `None` when none was ranked.
    pub per_fault: BTreeMap<String, Option<usize>>,
    pub top_n_counts: BTreeMap<usize, usize>,
    /// Truth faults that had no ranking.
    pub missing: Vec<String>,
}

impl TopNReport {
    pub fn fault_count(&self) -> usize {
        self.per_fault.len()
    }

    pub fn count(&self, n: usize) -> usize {
        self.top_n_counts.get(&n).copied().unwrap_or(0)
    }
}

/// A fault counts for Top-N when any of its faulty methods has rank ≤ N.
/// Faults without a ranking count as misses.
pub fn top_n(rankings: &HashMap<String, RankedList>, truth: &[GroundTruth]) -> TopNReport {
    let mut per_fault = BTreeMap::new();
    let mut missing = Vec::new();
    for t in truth {
        let best = match rankings.get(&t.fault_id) {
            Some(list) => t.faulty_methods.iter().filter_map(|m| list.rank_of(m)).min(),
            None => {
                log::warn!("no ranking for fault {}; counted as a miss", t.fault_id);
                missing.push(t.fault_id.clone());
                None
            }
        };
        per_fault.insert(t.fault_id.clone(), best);
    }
    let top_n_counts = TOP_N
        .iter()
        .map(|&n| (n, per_fault.values().filter(|r| r.is_some_and(|r| r <= n)).count()))
        .collect();
    TopNReport {
        per_fault,
        top_n_counts,
        missing,
    }
}

/// Percentage change of `other` relative to `baseline`, negative when
/// `other` finds fewer faults. Undefined for a zero baseline.
pub fn delta_percent(other: usize, baseline: usize) -> Option<f64> {
    (baseline != 0).then(|| (other as f64 - baseline as f64) / baseline as f64 * 100.0)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentRow {
    pub label: String,
    pub config: PipelineConfig,
    pub report: TopNReport,
    /// Change against the first row, per N.
    pub delta_percent: BTreeMap<usize, Option<f64>>,
    /// `(fault id, error)` for faults whose pipeline failed.
    pub failures: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentTable {
    pub rows: Vec<ExperimentRow>,
}

impl ExperimentTable {
    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("table serializes");
        text.push('\n');
        text
    }

    /// Aligned text table; deltas follow counts in parentheses.
    pub fn render(&self) -> String {
        let mut cells: Vec<Vec<String>> = vec![std::iter::once("config".to_string())
            .chain(TOP_N.iter().map(|n| format!("Top-{n}")))
            .chain(std::iter::once("failed".to_string()))
            .collect()];
        for (i, row) in self.rows.iter().enumerate() {
            let mut line = vec![row.label.clone()];
            for n in TOP_N {
                let count = row.report.count(n);
                line.push(match row.delta_percent.get(&n).copied().flatten() {
                    Some(d) if i > 0 => format!("{count} ({d:+.2}%)"),
                    _ => count.to_string(),
                });
            }
            line.push(row.failures.len().to_string());
            cells.push(line);
        }
        render_cells(&cells)
    }
}

/// Left-aligned first column, right-aligned others.
pub fn render_cells(cells: &[Vec<String>]) -> String {
    let columns = cells.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..columns)
        .map(|c| cells.iter().filter_map(|r| r.get(c)).map(|s| s.chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in cells {
        for (c, cell) in row.iter().enumerate() {
            if c == 0 {
                let _ = write!(out, "{cell:<w$}", w = widths[c]);
            } else {
                let _ = write!(out, "  {cell:>w$}", w = widths[c]);
            }
        }
        out.push('\n');
    }
    out
}

/// Builds the backend a fault runs against.
pub type BackendFactory<'a> = dyn Fn(&FaultBundle) -> Result<Box<dyn ChatBackend>, String> + Sync + 'a;

/// Backend factory that uses each bundle's own mock script.
pub fn bundle_mock_backend(bundle: &FaultBundle) -> Result<Box<dyn ChatBackend>, String> {
    let script = bundle
        .mock_script
        .clone()
        .ok_or_else(|| format!("bundle {} has no mock script", bundle.fault_id))?;
    Ok(Box::new(crate::llm::MockBackend::new(script).map_err(|e| e.to_string())?))
}

/// Per-fault outcome of one configuration.
pub struct ConfigRun {
    pub rankings: HashMap<String, RankedList>,
    pub failures: Vec<(String, String)>,
}

/// Runs every bundle under `config`, in parallel on the current rayon pool.
pub fn run_config(
    bundles: &[FaultBundle],
    config: &PipelineConfig,
    prompts: &PromptLibrary,
    backend_for: &BackendFactory<'_>,
) -> ConfigRun {
    let outcomes: Vec<(String, Result<RankedList, String>)> = bundles
        .par_iter()
        .map(|bundle| {
            let result = backend_for(bundle).and_then(|backend| {
                localize(bundle, config, prompts, backend.as_ref())
                    .map(|r| r.final_ranking)
                    .map_err(|e| e.to_string())
            });
            (bundle.fault_id.clone(), result)
        })
        .collect();
    let mut run = ConfigRun {
        rankings: HashMap::new(),
        failures: Vec::new(),
    };
    for (fault_id, result) in outcomes {
        match result {
            Ok(list) => {
                run.rankings.insert(fault_id, list);
            }
            Err(e) => {
                log::warn!("[{}] {fault_id}: {e}", config.label());
                run.failures.push((fault_id, e));
            }
        }
    }
    run
}

/// One Top-N row per configuration; the first configuration is the
/// baseline for deltas. Pipeline failures are recorded, not fatal.
pub fn run_experiment(
    bundles: &[FaultBundle],
    truth: &[GroundTruth],
    configs: &[PipelineConfig],
    prompts: &PromptLibrary,
    backend_for: &BackendFactory<'_>,
) -> ExperimentTable {
    let mut rows: Vec<ExperimentRow> = Vec::with_capacity(configs.len());
    for config in configs {
        let run = run_config(bundles, config, prompts, backend_for);
        let report = top_n(&run.rankings, truth);
        let delta_percent = TOP_N
            .iter()
            .map(|&n| {
                let base = rows.first().map_or(report.count(n), |r| r.report.count(n));
                (n, delta_percent(report.count(n), base))
            })
            .collect();
        rows.push(ExperimentRow {
            label: config.label(),
            config: config.clone(),
            report,
            delta_percent,
            failures: run.failures,
        });
    }
    ExperimentTable { rows }
}

/// Loads every bundle directory under `dir` (sorted by name) and the
/// corpus ground truth from `dir/truth.json`.
pub fn load_corpus(dir: &Path) -> Result<(Vec<FaultBundle>, Vec<GroundTruth>), BundleError> {
    let io = |e: std::io::Error| BundleError::Io {
        path: dir.to_path_buf(),
        message: e.to_string(),
    };
    let mut subdirs: Vec<_> = std::fs::read_dir(dir)
        .map_err(io)?
        .filter_map(Result::ok)
        .map(|e| e.path())
        .filter(|p| p.join(MANIFEST).is_file())
        .collect();
    subdirs.sort();
    let bundles = subdirs.iter().map(|p| FaultBundle::load(p)).collect::<Result<Vec<_>, _>>()?;
    let truth_path = dir.join(TRUTH_FILE);
    let text = std::fs::read_to_string(&truth_path).map_err(|e| BundleError::Io {
        path: truth_path.clone(),
        message: e.to_string(),
    })?;
    let truth = parse_ground_truth(&text).map_err(|message| BundleError::Invalid {
        path: truth_path,
        message,
    })?;
    Ok((bundles, truth))
}
