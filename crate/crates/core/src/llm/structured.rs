//! Extraction of JSON rankings from free-form model replies.
//!
//! Replies may wrap the JSON in code fences or prose. The first JSON value in
//! the text that fits one of the accepted shapes wins:
//!
//! - an array of entries `[{"method": "...", "rank": 1, "reasoning": "...", "fix": "..."}]`
//! - an array of method-id strings
//! - an object with a `ranking` (or `fault_ranking` / `final_ranking`) array
//!   and optionally `analyzed_methods: [{"method", "reasoning"}]`
//!
//! Entries naming methods outside the analyzed scope are dropped and the
//! remaining ranks compacted.

use serde_json::Value;

use super::LlmError;
use crate::ranking::RankedItem;
use crate::spectra::MethodId;

/// Reply text sent when a ranking cannot be parsed.
pub const REPAIR_RANKING_PROMPT: &str = "Return only the JSON ranking, with no prose: an object {\"analyzed_methods\": [{\"method\": \"<method id>\", \"reasoning\": \"...\"}], \"ranking\": [{\"rank\": 1, \"method\": \"<method id>\", \"reasoning\": \"...\"}]}. Use method ids exactly as given.";

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ParsedRanking {
    /// In rank order.
    pub items: Vec<RankedItem>,
    /// Methods reported as analyzed, with their reasoning.
    pub analyzed: Vec<(MethodId, String)>,
    /// Names that were dropped (outside scope, malformed or repeated).
    pub dropped: Vec<String>,
}

const RANKING_KEYS: [&str; 4] = ["ranking", "fault_ranking", "final_ranking", "rankings"];
const METHOD_KEYS: [&str; 4] = ["method", "method_id", "id", "name"];
const REASON_KEYS: [&str; 4] = ["reasoning", "reason", "failure_reasoning", "explanation"];

fn first_str<'v>(obj: &'v serde_json::Map<String, Value>, keys: &[&str]) -> Option<&'v str> {
    keys.iter().find_map(|k| obj.get(*k).and_then(Value::as_str))
}

struct RawEntry {
    method: String,
    rank: Option<f64>,
    reasoning: String,
    fix: Option<String>,
}

fn raw_entry(value: &Value) -> Option<RawEntry> {
    match value {
        Value::String(s) => Some(RawEntry {
            method: s.clone(),
            rank: None,
            reasoning: String::new(),
            fix: None,
        }),
        Value::Object(obj) => Some(RawEntry {
            method: first_str(obj, &METHOD_KEYS)?.to_string(),
            rank: obj.get("rank").and_then(Value::as_f64),
            reasoning: first_str(obj, &REASON_KEYS).unwrap_or_default().to_string(),
            fix: obj
                .get("fix")
                .and_then(Value::as_str)
                .map(str::to_string),
        }),
        _ => None,
    }
}

fn entries_of(array: &[Value]) -> Option<Vec<RawEntry>> {
    array.iter().map(raw_entry).collect()
}

/// Ranking-shaped content of `value`, if it has the ranking shape.
fn ranking_shape(value: &Value) -> Option<(Vec<RawEntry>, Vec<RawEntry>)> {
    match value {
        Value::Array(items) if !items.is_empty() => Some((entries_of(items)?, Vec::new())),
        Value::Object(obj) => {
            let ranking = RANKING_KEYS
                .iter()
                .find_map(|k| obj.get(*k).and_then(Value::as_array))?;
            let analyzed = obj
                .get("analyzed_methods")
                .and_then(Value::as_array)
                .and_then(|a| entries_of(a))
                .unwrap_or_default();
            Some((entries_of(ranking)?, analyzed))
        }
        _ => None,
    }
}

/// Yields every JSON value that starts at a `{` or `[` in `text`, in order.
pub(crate) fn json_candidates(text: &str) -> impl Iterator<Item = Value> + '_ {
    text.char_indices()
        .filter(|(_, c)| *c == '{' || *c == '[')
        .filter_map(move |(i, _)| {
            serde_json::Deserializer::from_str(&text[i..])
                .into_iter::<Value>()
                .next()
                .and_then(Result::ok)
        })
}

/// Parses the first ranking-shaped JSON value in `text`, keeping only methods
/// for which `in_scope` holds.
pub fn parse_structured_ranking(
    text: &str,
    in_scope: impl Fn(&MethodId) -> bool,
) -> Result<ParsedRanking, LlmError> {
    let (mut entries, analyzed) = json_candidates(text)
        .find_map(|v| ranking_shape(&v))
        .ok_or_else(|| LlmError::UnparsableRanking("no JSON ranking found in the reply".into()))?;

    if entries.iter().all(|e| e.rank.is_some()) {
        entries.sort_by(|a, b| a.rank.unwrap_or(0.0).total_cmp(&b.rank.unwrap_or(0.0)));
    }

    let mut parsed = ParsedRanking::default();
    let mut seen = std::collections::BTreeSet::new();
    for entry in entries {
        match MethodId::parse(&entry.method) {
            Ok(method) if in_scope(&method) && seen.insert(method.clone()) => {
                parsed.items.push(RankedItem {
                    method,
                    reasoning: entry.reasoning,
                    fix: entry.fix.filter(|f| !f.trim().is_empty()),
                });
            }
            _ => {
                log::warn!("dropping ranking entry `{}`: not an analyzed method", entry.method);
                parsed.dropped.push(entry.method);
            }
        }
    }
    for entry in analyzed {
        if let Ok(method) = MethodId::parse(&entry.method) {
            if in_scope(&method) {
                parsed.analyzed.push((method, entry.reasoning));
            }
        }
    }
    Ok(parsed)
}

/// First JSON array of method ids (strings or `{"method": ...}` objects) in
/// `text`, also accepting an object wrapping one under any key.
pub(crate) fn parse_method_list(text: &str) -> Option<Vec<String>> {
    fn list(value: &Value) -> Option<Vec<String>> {
        match value {
            Value::Array(items) => items
                .iter()
                .map(|v| raw_entry(v).map(|e| e.method))
                .collect(),
            Value::Object(obj) => obj.values().find_map(|v| match v {
                Value::Array(_) => list(v),
                _ => None,
            }),
            _ => None,
        }
    }
    json_candidates(text).find_map(|v| list(&v))
}
