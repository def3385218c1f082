//! Order-aware division of the sorted covered-method list into token-budgeted
//! groups.
//!
//! Entries are packed greedily left to right: a new group starts whenever the
//! next entry would push the running total past `limit - overhead`. Order is
//! preserved within and across groups, so a list sorted by suspiciousness
//! yields groups whose scores never increase from one group to the next.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::spectra::MethodId;

/// Id of the built-in `ceil(chars / 4)` counter.
pub const DEFAULT_COUNTER: &str = "chars4";
/// Id of a whitespace-token counter, handy for exact arithmetic in tests.
pub const WORD_COUNTER: &str = "words";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DivisionError {
    #[error("unknown token counter `{0}`")]
    UnknownCounter(String),
    #[error("entry for {method} needs {tokens} tokens but only {available} fit beside the prompt")]
    EntryExceedsBudget {
        method: MethodId,
        tokens: usize,
        available: usize,
    },
    #[error("token limit must be positive")]
    ZeroLimit,
}

/// Counts tokens in text. Implementations must be deterministic.
pub trait TokenCounter: Send + Sync {
    fn count(&self, text: &str) -> usize;
}

/// `ceil(chars / 4)`, a vendor-neutral approximation of BPE tokenizers.
#[derive(Debug, Clone, Copy, Default)]
pub struct CharsPerFour;

impl TokenCounter for CharsPerFour {
    fn count(&self, text: &str) -> usize {
        text.chars().count().div_ceil(4)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceWords;

impl TokenCounter for WhitespaceWords {
    fn count(&self, text: &str) -> usize {
        text.split_whitespace().count()
    }
}

/// Resolves a counter id to an implementation.
pub fn counter(counter_id: &str) -> Result<Arc<dyn TokenCounter>, DivisionError> {
    match counter_id {
        DEFAULT_COUNTER => Ok(Arc::new(CharsPerFour)),
        WORD_COUNTER => Ok(Arc::new(WhitespaceWords)),
        other => Err(DivisionError::UnknownCounter(other.to_string())),
    }
}

pub fn count_tokens(text: &str, counter_id: &str) -> Result<usize, DivisionError> {
    Ok(counter(counter_id)?.count(text))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenBudget {
    pub limit: usize,
    pub counter_id: String,
}

impl TokenBudget {
    pub fn new(limit: usize, counter_id: impl Into<String>) -> Result<Self, DivisionError> {
        if limit == 0 {
            return Err(DivisionError::ZeroLimit);
        }
        Ok(Self {
            limit,
            counter_id: counter_id.into(),
        })
    }

    /// The limit scaled by a safety factor, floored, never below 1.
    pub fn scaled(&self, factor: f64) -> Self {
        let limit = ((self.limit as f64) * factor).floor().max(1.0) as usize;
        Self {
            limit,
            counter_id: self.counter_id.clone(),
        }
    }
}

impl Default for TokenBudget {
    fn default() -> Self {
        Self {
            limit: 128_000,
            counter_id: DEFAULT_COUNTER.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DivisionPlan {
    pub groups: Vec<Vec<MethodId>>,
    pub k: usize,
    pub per_group_tokens: Vec<usize>,
}

impl DivisionPlan {
    /// A single group holding everything, used when division is disabled.
    pub fn single(methods: Vec<MethodId>, tokens: usize) -> Self {
        if methods.is_empty() {
            return Self {
                groups: Vec::new(),
                k: 0,
                per_group_tokens: Vec::new(),
            };
        }
        Self {
            groups: vec![methods],
            k: 1,
            per_group_tokens: vec![tokens],
        }
    }

    pub fn flattened(&self) -> impl Iterator<Item = &MethodId> {
        self.groups.iter().flatten()
    }
}

impl fmt::Display for DivisionPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{} group(s)", self.k)?;
        for (i, (group, tokens)) in self.groups.iter().zip(&self.per_group_tokens).enumerate() {
            writeln!(f, "  group {}: {} methods, {} tokens", i + 1, group.len(), tokens)?;
        }
        Ok(())
    }
}

/// Ideal group count for uniformly sized input: `ceil(total / limit)`.
pub fn ideal_group_count(total_tokens: usize, limit: usize) -> usize {
    total_tokens.div_ceil(limit)
}

/// Greedy order-preserving packing of rendered entries under `budget`.
///
/// `fixed_overhead_tokens` is the cost of the prompt that accompanies every
/// group; each group's entries must fit in what remains.
pub fn divide(
    sorted_methods: &[(MethodId, String)],
    budget: &TokenBudget,
    fixed_overhead_tokens: usize,
) -> Result<DivisionPlan, DivisionError> {
    let counter = counter(&budget.counter_id)?;
    let costs: Vec<usize> = sorted_methods.iter().map(|(_, text)| counter.count(text)).collect();
    divide_costs(sorted_methods.iter().map(|(m, _)| m), &costs, budget.limit, fixed_overhead_tokens)
}

/// [`divide`] over precomputed entry costs.
pub fn divide_costs<'a>(
    methods: impl IntoIterator<Item = &'a MethodId>,
    costs: &[usize],
    limit: usize,
    fixed_overhead_tokens: usize,
) -> Result<DivisionPlan, DivisionError> {
    if limit == 0 {
        return Err(DivisionError::ZeroLimit);
    }
    let available = limit.saturating_sub(fixed_overhead_tokens);
    let mut groups: Vec<Vec<MethodId>> = Vec::new();
    let mut per_group_tokens: Vec<usize> = Vec::new();
    for (method, &cost) in methods.into_iter().zip(costs) {
        if cost > available {
            return Err(DivisionError::EntryExceedsBudget {
                method: method.clone(),
                tokens: cost,
                available,
            });
        }
        match (groups.last_mut(), per_group_tokens.last_mut()) {
            (Some(group), Some(used)) if *used + cost <= available => {
                group.push(method.clone());
                *used += cost;
            }
            _ => {
                groups.push(vec![method.clone()]);
                per_group_tokens.push(cost);
            }
        }
    }
    Ok(DivisionPlan {
        k: groups.len(),
        groups,
        per_group_tokens,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<MethodId> {
        (0..n)
            .map(|i| MethodId::new("p", "C", &format!("m{i}"), ""))
            .collect()
    }

    #[test]
    fn default_counter_values() {
        assert_eq!(count_tokens("", DEFAULT_COUNTER).unwrap(), 0);
        assert_eq!(count_tokens("abcd efgh", DEFAULT_COUNTER).unwrap(), 3);
        assert_eq!(count_tokens("abcd", DEFAULT_COUNTER).unwrap(), 1);
        assert_eq!(count_tokens("naïve", DEFAULT_COUNTER).unwrap(), 2);
        assert_eq!(count_tokens("a b  c", WORD_COUNTER).unwrap(), 3);
        assert_eq!(
            count_tokens("x", "tiktoken"),
            Err(DivisionError::UnknownCounter("tiktoken".into()))
        );
    }

    #[test]
    fn greedy_packing_by_hand() {
        let methods = ids(5);
        let plan = divide_costs(&methods, &[60; 5], 128, 0).unwrap();
        let sizes: Vec<_> = plan.groups.iter().map(Vec::len).collect();
        assert_eq!(sizes, [2, 2, 1]);
        assert_eq!(plan.per_group_tokens, [120, 120, 60]);
        assert_eq!(plan.k, 3);
    }

    #[test]
    fn everything_fits_in_one_group() {
        let methods = ids(10);
        let plan = divide_costs(&methods, &[100; 10], 128_000, 0).unwrap();
        assert_eq!(plan.k, 1);
    }

    #[test]
    fn overhead_shrinks_capacity() {
        let methods = ids(4);
        let plan = divide_costs(&methods, &[10; 4], 50, 30).unwrap();
        assert_eq!(plan.k, 2);
        let err = divide_costs(&methods, &[10, 25, 10, 10], 50, 30).unwrap_err();
        assert!(matches!(err, DivisionError::EntryExceedsBudget { tokens: 25, available: 20, .. }));
    }

    #[test]
    fn empty_input_gives_empty_plan() {
        let plan = divide(&[], &TokenBudget::default(), 0).unwrap();
        assert_eq!(plan.k, 0);
        assert!(plan.groups.is_empty());
    }

    #[test]
    fn budget_scaling_floors() {
        let budget = TokenBudget::new(128_000, DEFAULT_COUNTER).unwrap();
        assert_eq!(budget.scaled(0.9).limit, 115_200);
        assert_eq!(budget.scaled(0.0).limit, 1);
        assert_eq!(TokenBudget::new(0, DEFAULT_COUNTER), Err(DivisionError::ZeroLimit));
    }
}
