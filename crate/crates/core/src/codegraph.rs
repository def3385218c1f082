//! Inter-procedural call graph with method bodies, and the two navigation
//! tools the agents query: method-body retrieval and caller/callee lookup.
//!
//! Graphs are produced offline by external tooling and loaded from JSON:
//!
//! ```json
//! {"methods":[{"id":"p$C#m()","file":"src/p/C.java","start_line":3,"end_line":5,"body":"..."}],
//!  "edges":[[0,1]]}
//! ```
//!
//! Lookups are exact on the canonical [`MethodId`]; there is no fuzzy matching,
//! so a tool answer can never name a method that is not stored here.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::spectra::{CoverageMatrix, MethodId};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GraphError {
    #[error("malformed graph: {0}")]
    MalformedGraph(String),
    #[error("edge [{caller}, {callee}] references a method index outside 0..{len}")]
    DanglingEdge {
        caller: usize,
        callee: usize,
        len: usize,
    },
    #[error("method `{0}` appears more than once")]
    DuplicateMethod(MethodId),
    #[error("method `{0}` is not in the call graph")]
    MethodNotFound(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MethodNode {
    pub id: MethodId,
    #[serde(default)]
    pub file: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start_line: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub end_line: Option<u32>,
    #[serde(default)]
    pub body: String,
}

#[derive(Deserialize)]
struct RawNode {
    id: String,
    #[serde(default)]
    file: String,
    #[serde(default)]
    start_line: Option<u32>,
    #[serde(default)]
    end_line: Option<u32>,
    #[serde(default)]
    body: String,
}

#[derive(Deserialize)]
struct RawGraph {
    #[serde(default)]
    methods: Vec<RawNode>,
    #[serde(default)]
    edges: Vec<(usize, usize)>,
}

#[derive(Serialize)]
struct GraphDocument<'a> {
    methods: &'a [MethodNode],
    edges: Vec<(usize, usize)>,
}

/// Result of a method-body lookup.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MethodBody<'a> {
    pub id: &'a MethodId,
    pub file: &'a str,
    pub start_line: Option<u32>,
    pub end_line: Option<u32>,
    pub body: &'a str,
}

/// Callers and callees of one method, each sorted and duplicate-free.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct NeighborReport {
    pub method: MethodId,
    pub callers: Vec<MethodId>,
    pub callees: Vec<MethodId>,
}

#[derive(Debug, Clone, Default)]
pub struct CodeGraph {
    methods: Vec<MethodNode>,
    index: HashMap<MethodId, usize>,
    edges: BTreeSet<(usize, usize)>,
    callers: Vec<Vec<usize>>,
    callees: Vec<Vec<usize>>,
}

impl PartialEq for CodeGraph {
    fn eq(&self, other: &Self) -> bool {
        self.methods == other.methods && self.edges == other.edges
    }
}

fn normalize_newlines(text: &str) -> String {
    text.replace("\r\n", "\n").replace('\r', "\n")
}

impl CodeGraph {
    pub fn from_parts(
        methods: Vec<MethodNode>,
        edges: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self, GraphError> {
        let len = methods.len();
        let mut index = HashMap::with_capacity(len);
        for (i, node) in methods.iter().enumerate() {
            if let (Some(start), Some(end)) = (node.start_line, node.end_line) {
                if start > end {
                    return Err(GraphError::MalformedGraph(format!(
                        "{}: start_line {start} > end_line {end}",
                        node.id
                    )));
                }
                let lines = node.body.lines().count() as u32;
                if !node.body.is_empty() && lines != end - start + 1 {
                    return Err(GraphError::MalformedGraph(format!(
                        "{}: body has {lines} lines but span {start}..={end} covers {}",
                        node.id,
                        end - start + 1
                    )));
                }
            }
            if index.insert(node.id.clone(), i).is_some() {
                return Err(GraphError::DuplicateMethod(node.id.clone()));
            }
        }
        let mut edge_set = BTreeSet::new();
        for (caller, callee) in edges {
            if caller >= len || callee >= len {
                return Err(GraphError::DanglingEdge {
                    caller,
                    callee,
                    len,
                });
            }
            edge_set.insert((caller, callee));
        }
        let mut callers = vec![Vec::new(); len];
        let mut callees = vec![Vec::new(); len];
        for &(caller, callee) in &edge_set {
            callees[caller].push(callee);
            callers[callee].push(caller);
        }
        let by_id = |list: &mut Vec<usize>| list.sort_by(|&a, &b| methods[a].id.cmp(&methods[b].id));
        callers.iter_mut().for_each(by_id);
        callees.iter_mut().for_each(by_id);
        Ok(Self {
            methods,
            index,
            edges: edge_set,
            callers,
            callees,
        })
    }

    pub fn methods(&self) -> &[MethodNode] {
        &self.methods
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn len(&self) -> usize {
        self.methods.len()
    }

    pub fn is_empty(&self) -> bool {
        self.methods.is_empty()
    }

    pub fn contains(&self, id: &MethodId) -> bool {
        self.index.contains_key(id)
    }

    pub fn node(&self, id: &MethodId) -> Option<&MethodNode> {
        self.index.get(id).map(|&i| &self.methods[i])
    }

    fn position(&self, id: &MethodId) -> Result<usize, GraphError> {
        self.index
            .get(id)
            .copied()
            .ok_or_else(|| GraphError::MethodNotFound(id.to_string()))
    }

    /// Callees of `id` in sorted order.
    pub fn callees_of(&self, id: &MethodId) -> Result<impl Iterator<Item = &MethodId>, GraphError> {
        let i = self.position(id)?;
        Ok(self.callees[i].iter().map(|&j| &self.methods[j].id))
    }

    /// Covered methods that the graph does not know about.
    pub fn missing_from(&self, coverage: &CoverageMatrix) -> Vec<MethodId> {
        coverage
            .methods()
            .filter(|m| !self.contains(m))
            .cloned()
            .collect()
    }

    /// Renders the canonical JSON form (edges sorted, multi-edges collapsed).
    pub fn to_json(&self) -> String {
        let doc = GraphDocument {
            methods: &self.methods,
            edges: self.edges.iter().copied().collect(),
        };
        serde_json::to_string_pretty(&doc).expect("graph serializes")
    }
}

/// Parses a graph document and establishes the [`CodeGraph`] invariants.
pub fn load_graph(graph_text: &str) -> Result<CodeGraph, GraphError> {
    let raw: RawGraph =
        serde_json::from_str(graph_text).map_err(|e| GraphError::MalformedGraph(e.to_string()))?;
    let methods = raw
        .methods
        .into_iter()
        .map(|node| {
            let id = MethodId::parse(&node.id).map_err(|e| GraphError::MalformedGraph(e.to_string()))?;
            Ok(MethodNode {
                id,
                file: node.file,
                start_line: node.start_line,
                end_line: node.end_line,
                body: normalize_newlines(&node.body),
            })
        })
        .collect::<Result<Vec<_>, GraphError>>()?;
    CodeGraph::from_parts(methods, raw.edges)
}

/// Exact-match body lookup. Unknown ids are an error, never a guess.
pub fn get_method_body<'g>(graph: &'g CodeGraph, id: &MethodId) -> Result<MethodBody<'g>, GraphError> {
    let node = &graph.methods[graph.position(id)?];
    Ok(MethodBody {
        id: &node.id,
        file: &node.file,
        start_line: node.start_line,
        end_line: node.end_line,
        body: &node.body,
    })
}

pub fn get_call_graph(graph: &CodeGraph, id: &MethodId) -> Result<NeighborReport, GraphError> {
    let i = graph.position(id)?;
    let ids = |list: &[usize]| list.iter().map(|&j| graph.methods[j].id.clone()).collect();
    Ok(NeighborReport {
        method: graph.methods[i].id.clone(),
        callers: ids(&graph.callers[i]),
        callees: ids(&graph.callees[i]),
    })
}
