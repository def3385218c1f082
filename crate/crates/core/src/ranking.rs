//! Ordinal rankings of suspicious methods, as produced by the debugger and
//! reviewer agents.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::spectra::MethodId;

/// Which agent step produced a ranking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    Debugger,
    ReviewerIteration(u32),
    Final,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Debugger => f.write_str("debugger"),
            Self::ReviewerIteration(n) => write!(f, "reviewer_iter_{n}"),
            Self::Final => f.write_str("final"),
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "debugger" => Ok(Self::Debugger),
            "final" => Ok(Self::Final),
            other => other
                .strip_prefix("reviewer_iter_")
                .and_then(|n| n.parse().ok())
                .map(Self::ReviewerIteration)
                .ok_or_else(|| format!("unknown stage `{other}`")),
        }
    }
}

impl Serialize for Stage {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Stage {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        String::deserialize(deserializer)?
            .parse()
            .map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankEntry {
    pub rank: usize,
    pub method: MethodId,
    pub reasoning: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fix: Option<String>,
}

/// Entries with ordinal ranks `1..=n`, most suspicious first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RankedList {
    pub stage: Stage,
    entries: Vec<RankEntry>,
}

/// A ranking entry before ranks are assigned.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankedItem {
    pub method: MethodId,
    pub reasoning: String,
    pub fix: Option<String>,
}

impl RankedList {
    /// Assigns ranks by position, dropping repeated methods.
    pub fn from_ordered(stage: Stage, items: impl IntoIterator<Item = RankedItem>) -> Self {
        let mut seen = BTreeSet::new();
        let entries = items
            .into_iter()
            .filter(|item| seen.insert(item.method.clone()))
            .enumerate()
            .map(|(i, item)| RankEntry {
                rank: i + 1,
                method: item.method,
                reasoning: item.reasoning,
                fix: item.fix,
            })
            .collect();
        Self { stage, entries }
    }

    pub fn entries(&self) -> &[RankEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn methods(&self) -> impl Iterator<Item = &MethodId> {
        self.entries.iter().map(|e| &e.method)
    }

    /// Ranked methods in order, the basis of convergence checks.
    pub fn method_order(&self) -> Vec<MethodId> {
        self.methods().cloned().collect()
    }

    /// 1-based rank of `method`, if present.
    pub fn rank_of(&self, method: &MethodId) -> Option<usize> {
        self.entries.iter().find(|e| &e.method == method).map(|e| e.rank)
    }

    pub fn with_stage(mut self, stage: Stage) -> Self {
        self.stage = stage;
        self
    }

    pub fn has_all_fixes(&self) -> bool {
        self.entries
            .iter()
            .all(|e| e.fix.as_deref().is_some_and(|f| !f.trim().is_empty()))
    }

    /// Checks ranks run `1..=n` and methods are unique.
    pub fn validate(&self) -> Result<(), String> {
        let mut seen = BTreeSet::new();
        for (i, entry) in self.entries.iter().enumerate() {
            if entry.rank != i + 1 {
                return Err(format!("entry {i} has rank {}, expected {}", entry.rank, i + 1));
            }
            if !seen.insert(&entry.method) {
                return Err(format!("{} ranked twice", entry.method));
            }
        }
        Ok(())
    }

    /// Human-readable listing used inside prompts.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for entry in &self.entries {
            out.push_str(&format!("{}. {}\n   reasoning: {}\n", entry.rank, entry.method, entry.reasoning));
            if let Some(fix) = &entry.fix {
                out.push_str(&format!("   fix: {fix}\n"));
            }
        }
        out
    }
}

impl<'de> Deserialize<'de> for RankedList {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            stage: Stage,
            entries: Vec<RankEntry>,
        }
        let raw = Raw::deserialize(deserializer)?;
        let list = RankedList {
            stage: raw.stage,
            entries: raw.entries,
        };
        list.validate().map_err(serde::de::Error::custom)?;
        Ok(list)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn item(m: &str) -> RankedItem {
        RankedItem {
            method: MethodId::parse(m).unwrap(),
            reasoning: "r".into(),
            fix: None,
        }
    }

    #[test]
    fn ranks_are_positional_and_unique() {
        let list = RankedList::from_ordered(
            Stage::Debugger,
            [item("p$B#b()"), item("p$A#a()"), item("p$B#b()")],
        );
        assert_eq!(list.len(), 2);
        assert_eq!(list.rank_of(&MethodId::parse("p$A#a()").unwrap()), Some(2));
        list.validate().unwrap();
    }

    #[test]
    fn stage_text_forms() {
        for stage in [Stage::Debugger, Stage::ReviewerIteration(3), Stage::Final] {
            assert_eq!(stage.to_string().parse::<Stage>().unwrap(), stage);
        }
        assert_eq!(Stage::ReviewerIteration(2).to_string(), "reviewer_iter_2");
        assert!("reviewer".parse::<Stage>().is_err());
    }

    #[test]
    fn deserialization_checks_ranks() {
        let bad = r#"{"stage":"final","entries":[{"rank":2,"method":"p$A#a()","reasoning":"x"}]}"#;
        assert!(serde_json::from_str::<RankedList>(bad).is_err());
    }
}
