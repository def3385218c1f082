//! Versioned prompt templates with `{{name}}` placeholders.
//!
//! Built-in templates are compiled in from `prompts/`. Additional templates
//! can be loaded from a directory, one `<id>.txt` file each, and selected by
//! id through [`PromptSet`].

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::AgentError;

const BUILTIN: [(&str, &str); 6] = [
    ("failure_reason.v1", include_str!("../../prompts/failure_reason.v1.txt")),
    ("prioritize.v1", include_str!("../../prompts/prioritize.v1.txt")),
    ("debugger.v1", include_str!("../../prompts/debugger.v1.txt")),
    ("debugger_single.v1", include_str!("../../prompts/debugger_single.v1.txt")),
    ("reviewer_critique.v1", include_str!("../../prompts/reviewer_critique.v1.txt")),
    ("reviewer_finalize.v1", include_str!("../../prompts/reviewer_finalize.v1.txt")),
];

pub const CONTEXT_SYSTEM: &str = "You are a context extraction agent for fault localization. You summarize why a test fails and pick the covered methods most related to the failure.";
pub const DEBUGGER_SYSTEM: &str = "You are a debugger agent for fault localization. You examine suspicious methods, navigate the call graph when more implementation detail is needed, and rank methods by how likely they are to contain the fault.";
pub const REVIEWER_SYSTEM: &str = "You are a reviewer agent for fault localization. You critique a ranking of suspicious methods, reflect on the quality of its reasoning, and revise it.";

pub const REPAIR_SECTIONS: &str = "Your answer must contain all three headings: `## Test Purpose`, `## Expected Output` and `## Failure Reason`, each followed by non-empty text. Rewrite your answer in that format.";
pub const REPAIR_METHOD_LIST: &str = "Reply with only a JSON array of method ids copied exactly from the list, for example [\"pkg$Class#method(int)\"], or [] if none is relevant.";
pub const REPAIR_FIXES: &str = "Return only the JSON ranking. Every entry must carry the keys rank, method, reasoning and a non-empty fix.";
pub const NAVIGATION_INSTRUCTIONS: &str = "If additional detail is needed, call get_MethodBody to read an implementation and get_CallGraph to inspect callers and callees.";

/// Template ids used by each agent step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptSet {
    pub failure_reason: String,
    pub prioritize: String,
    pub debugger: String,
    pub debugger_single: String,
    pub reviewer_critique: String,
    pub reviewer_finalize: String,
}

impl Default for PromptSet {
    fn default() -> Self {
        Self {
            failure_reason: "failure_reason.v1".into(),
            prioritize: "prioritize.v1".into(),
            debugger: "debugger.v1".into(),
            debugger_single: "debugger_single.v1".into(),
            reviewer_critique: "reviewer_critique.v1".into(),
            reviewer_finalize: "reviewer_finalize.v1".into(),
        }
    }
}

impl PromptSet {
    fn ids(&self) -> [&str; 6] {
        [
            &self.failure_reason,
            &self.prioritize,
            &self.debugger,
            &self.debugger_single,
            &self.reviewer_critique,
            &self.reviewer_finalize,
        ]
    }
}

#[derive(Debug, Clone)]
pub struct PromptLibrary {
    templates: BTreeMap<String, String>,
}

impl Default for PromptLibrary {
    fn default() -> Self {
        Self {
            templates: BUILTIN
                .iter()
                .map(|(id, text)| (id.to_string(), text.to_string()))
                .collect(),
        }
    }
}

impl PromptLibrary {
    /// Adds every `*.txt` file in `dir`, keyed by file stem.
    pub fn load_dir(mut self, dir: &Path) -> std::io::Result<Self> {
        for entry in std::fs::read_dir(dir)? {
            let path = entry?.path();
            if path.extension().is_some_and(|e| e == "txt") {
                if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                    self.templates.insert(stem.to_string(), std::fs::read_to_string(&path)?);
                }
            }
        }
        Ok(self)
    }

    pub fn insert(&mut self, id: impl Into<String>, text: impl Into<String>) {
        self.templates.insert(id.into(), text.into());
    }

    pub fn check(&self, set: &PromptSet) -> Result<(), AgentError> {
        for id in set.ids() {
            if !self.templates.contains_key(id) {
                return Err(AgentError::UnknownPrompt(id.to_string()));
            }
        }
        Ok(())
    }

    /// Substitutes `{{key}}` placeholders. Unknown placeholders are left as-is.
    pub fn render(&self, id: &str, values: &[(&str, &str)]) -> Result<String, AgentError> {
        let template = self
            .templates
            .get(id)
            .ok_or_else(|| AgentError::UnknownPrompt(id.to_string()))?;
        let mut out = String::with_capacity(template.len());
        let mut rest = template.as_str();
        while let Some(start) = rest.find("{{") {
            out.push_str(&rest[..start]);
            let after = &rest[start + 2..];
            match after.find("}}") {
                Some(end) => {
                    let key = after[..end].trim();
                    match values.iter().find(|(k, _)| *k == key) {
                        Some((_, value)) => out.push_str(value),
                        None => out.push_str(&rest[start..start + 2 + end + 2]),
                    }
                    rest = &after[end + 2..];
                }
                None => {
                    out.push_str(&rest[start..]);
                    rest = "";
                }
            }
        }
        out.push_str(rest);
        Ok(out.trim_end().to_string())
    }
}
