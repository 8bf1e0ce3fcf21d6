//! Conjunctive queries with per-edge view constraints.
//!
//! A query is a small DAG. Nodes `0..anchors.len()` are anchors bound to
//! known entities, the remaining nodes are existential variables, and the
//! unique sink is the answer node.

mod sample;

use std::collections::BTreeSet;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::{EntityId, MultiViewKg, RelationId, ViewId};

pub use sample::{
    draw_sample, holdout_split, instantiate_in_view, instantiate_template, sample_queries,
    sample_training_set, ConstraintPolicy, TrainingSample, MAX_ATTEMPTS,
};

/// The seven query shapes: n-hop chains, n-way intersections, and the two
/// mixed forms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum StructureTag {
    #[serde(rename = "1p")]
    P1,
    #[serde(rename = "2p")]
    P2,
    #[serde(rename = "3p")]
    P3,
    #[serde(rename = "2i")]
    I2,
    #[serde(rename = "3i")]
    I3,
    #[serde(rename = "2ip")]
    Ip,
    #[serde(rename = "2pi")]
    Pi,
}

impl StructureTag {
    pub const ALL: [StructureTag; 7] = [
        StructureTag::P1,
        StructureTag::P2,
        StructureTag::P3,
        StructureTag::I2,
        StructureTag::I3,
        StructureTag::Ip,
        StructureTag::Pi,
    ];

    /// Structures used to build training sets.
    pub const TRAINING: [StructureTag; 4] = [
        StructureTag::P1,
        StructureTag::P2,
        StructureTag::I2,
        StructureTag::I3,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StructureTag::P1 => "1p",
            StructureTag::P2 => "2p",
            StructureTag::P3 => "3p",
            StructureTag::I2 => "2i",
            StructureTag::I3 => "3i",
            StructureTag::Ip => "2ip",
            StructureTag::Pi => "2pi",
        }
    }

    /// `(number of anchors, edges as (src, dst))`. The answer node is the
    /// highest index.
    pub fn template(self) -> (usize, &'static [(usize, usize)]) {
        match self {
            StructureTag::P1 => (1, &[(0, 1)]),
            StructureTag::P2 => (1, &[(0, 1), (1, 2)]),
            StructureTag::P3 => (1, &[(0, 1), (1, 2), (2, 3)]),
            StructureTag::I2 => (2, &[(0, 2), (1, 2)]),
            StructureTag::I3 => (3, &[(0, 3), (1, 3), (2, 3)]),
            StructureTag::Ip => (2, &[(0, 2), (1, 2), (2, 3)]),
            StructureTag::Pi => (2, &[(0, 2), (2, 3), (1, 3)]),
        }
    }

    /// Whether all edges form a single projection chain.
    pub fn is_chain(self) -> bool {
        matches!(self, StructureTag::P1 | StructureTag::P2 | StructureTag::P3)
    }
}

impl fmt::Display for StructureTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.as_str())
    }
}

impl FromStr for StructureTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StructureTag::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown query structure `{s}`")))
    }
}

/// Tag shared by edges that must be witnessed in one common view.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GroupId(pub usize);

/// Which view(s) may witness a query edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ViewConstraint {
    Exact { view: ViewId },
    Wildcard,
    Equal { group: GroupId },
}

/// The three constraint families, without their payloads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConstraintKind {
    Exact,
    Wildcard,
    Equal,
}

impl ViewConstraint {
    pub fn kind(&self) -> ConstraintKind {
        match self {
            ViewConstraint::Exact { .. } => ConstraintKind::Exact,
            ViewConstraint::Wildcard => ConstraintKind::Wildcard,
            ViewConstraint::Equal { .. } => ConstraintKind::Equal,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QueryEdge {
    #[serde(rename = "src")]
    pub source: usize,
    #[serde(rename = "dst")]
    pub target: usize,
    pub relation: RelationId,
    pub constraint: ViewConstraint,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub structure: StructureTag,
    pub anchors: Vec<EntityId>,
    pub edges: Vec<QueryEdge>,
    /// Ground truth, filled by the oracle.
    pub answers: Option<BTreeSet<EntityId>>,
}

impl Query {
    pub fn num_nodes(&self) -> usize {
        self.edges
            .iter()
            .map(|e| e.source.max(e.target) + 1)
            .max()
            .unwrap_or(self.anchors.len())
            .max(self.anchors.len())
    }

    pub fn is_anchor(&self, node: usize) -> bool {
        node < self.anchors.len()
    }

    /// Indices of edges entering `node`, in edge order.
    pub fn incoming(&self, node: usize) -> Vec<usize> {
        self.edges
            .iter()
            .enumerate()
            .filter(|(_, e)| e.target == node)
            .map(|(i, _)| i)
            .collect()
    }

    /// Topological order of all nodes; errors on cycles.
    pub fn topo_order(&self) -> Result<Vec<usize>> {
        let n = self.num_nodes();
        let mut indegree = vec![0usize; n];
        for e in &self.edges {
            indegree[e.target] += 1;
        }
        let mut ready: Vec<usize> = (0..n).filter(|&v| indegree[v] == 0).rev().collect();
        let mut order = Vec::with_capacity(n);
        while let Some(v) = ready.pop() {
            order.push(v);
            for e in self.edges.iter().filter(|e| e.source == v) {
                indegree[e.target] -= 1;
                if indegree[e.target] == 0 {
                    ready.push(e.target);
                }
            }
        }
        if order.len() != n {
            return Err(Error::InvalidQuery("query graph has a cycle".into()));
        }
        Ok(order)
    }

    /// The unique sink.
    pub fn answer_node(&self) -> Result<usize> {
        let n = self.num_nodes();
        let mut has_out = vec![false; n];
        for e in &self.edges {
            has_out[e.source] = true;
        }
        let sinks: Vec<usize> = (0..n).filter(|&v| !has_out[v]).collect();
        match sinks.as_slice() {
            [sink] => Ok(*sink),
            _ => Err(Error::InvalidQuery(format!(
                "expected exactly one sink, found {}",
                sinks.len()
            ))),
        }
    }

    /// Number of edges tagged with `group`.
    pub fn group_arity(&self, group: GroupId) -> usize {
        self.edges
            .iter()
            .filter(|e| e.constraint == ViewConstraint::Equal { group })
            .count()
    }

    /// Checks DAG shape and, when given, vocabulary bounds.
    pub fn validate(&self, kg: Option<&MultiViewKg>) -> Result<()> {
        if self.anchors.is_empty() || self.edges.is_empty() {
            return Err(Error::InvalidQuery("query needs anchors and edges".into()));
        }
        for e in &self.edges {
            if e.source == e.target {
                return Err(Error::InvalidQuery(format!("self edge on node {}", e.source)));
            }
            if self.is_anchor(e.target) {
                return Err(Error::InvalidQuery(format!(
                    "anchor node {} has an incoming edge",
                    e.target
                )));
            }
        }
        self.topo_order()?;
        let sink = self.answer_node()?;
        if self.is_anchor(sink) {
            return Err(Error::InvalidQuery("answer node cannot be an anchor".into()));
        }
        for v in self.anchors.len()..self.num_nodes() {
            if self.incoming(v).is_empty() {
                return Err(Error::InvalidQuery(format!("variable {v} is unreachable")));
            }
        }
        if let Some(kg) = kg {
            for a in &self.anchors {
                if a.0 >= kg.num_entities() {
                    return Err(Error::UnknownId { kind: "entity", id: a.0 });
                }
            }
            for e in &self.edges {
                if e.relation.0 >= kg.num_relations() {
                    return Err(Error::UnknownId {
                        kind: "relation",
                        id: e.relation.0,
                    });
                }
                if let ViewConstraint::Exact { view } = e.constraint {
                    if view.0 >= kg.num_views() {
                        return Err(Error::UnknownId { kind: "view", id: view.0 });
                    }
                }
            }
        }
        Ok(())
    }

    /// Whether the DAG has exactly the shape of `self.structure`.
    pub fn matches_template(&self) -> bool {
        let (anchors, edges) = self.structure.template();
        self.anchors.len() == anchors
            && self.edges.len() == edges.len()
            && self
                .edges
                .iter()
                .zip(edges)
                .all(|(e, &(s, t))| e.source == s && e.target == t)
    }

    /// Shape key: queries with equal keys can be decoded as one batch.
    pub fn shape_key(&self) -> (usize, Vec<(usize, usize)>) {
        (
            self.anchors.len(),
            self.edges.iter().map(|e| (e.source, e.target)).collect(),
        )
    }

    /// Copy with every constraint relaxed to wildcard.
    pub fn with_wildcards(&self) -> Query {
        let mut q = self.clone();
        for e in &mut q.edges {
            e.constraint = ViewConstraint::Wildcard;
        }
        q
    }

    pub fn answers(&self) -> Option<&BTreeSet<EntityId>> {
        self.answers.as_ref()
    }
}

/// Reads one JSON query per non-empty line.
pub fn read_queries<R: BufRead>(source: R) -> Result<Vec<Query>> {
    let mut out = Vec::new();
    for (i, line) in source.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let q: Query = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        q.validate(None).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(q);
    }
    Ok(out)
}

pub fn write_queries<W: Write>(mut out: W, queries: &[Query]) -> Result<()> {
    for q in queries {
        serde_json::to_writer(&mut out, q)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain(tag: StructureTag) -> Query {
        let (anchors, edges) = tag.template();
        Query {
            structure: tag,
            anchors: (0..anchors).map(EntityId).collect(),
            edges: edges
                .iter()
                .map(|&(s, t)| QueryEdge {
                    source: s,
                    target: t,
                    relation: RelationId(0),
                    constraint: ViewConstraint::Wildcard,
                })
                .collect(),
            answers: None,
        }
    }

    #[test]
    fn templates_are_valid_dags() {
        for tag in StructureTag::ALL {
            let q = chain(tag);
            q.validate(None).unwrap();
            assert!(q.matches_template());
            assert_eq!(q.answer_node().unwrap(), q.num_nodes() - 1);
        }
    }

    #[test]
    fn template_edge_counts() {
        let count = |t: StructureTag| t.template().1.len();
        assert_eq!(count(StructureTag::P1), 1);
        assert_eq!(count(StructureTag::P2), 2);
        assert_eq!(count(StructureTag::P3), 3);
        assert_eq!(chain(StructureTag::I2).incoming(2).len(), 2);
        assert_eq!(chain(StructureTag::I3).incoming(3).len(), 3);
        // 2ip intersects first, 2pi projects first
        assert_eq!(chain(StructureTag::Ip).incoming(2).len(), 2);
        assert_eq!(chain(StructureTag::Pi).incoming(3).len(), 2);
    }

    #[test]
    fn cycle_is_rejected() {
        let mut q = chain(StructureTag::P3);
        q.edges.push(QueryEdge {
            source: 3,
            target: 1,
            relation: RelationId(0),
            constraint: ViewConstraint::Wildcard,
        });
        assert!(q.topo_order().is_err());
    }

    #[test]
    fn constraint_json_encoding() {
        let exact = serde_json::to_string(&ViewConstraint::Exact { view: ViewId(3) }).unwrap();
        assert_eq!(exact, r#"{"kind":"exact","view":3}"#);
        let wild = serde_json::to_string(&ViewConstraint::Wildcard).unwrap();
        assert_eq!(wild, r#"{"kind":"wildcard"}"#);
        let eq = serde_json::to_string(&ViewConstraint::Equal { group: GroupId(1) }).unwrap();
        assert_eq!(eq, r#"{"kind":"equal","group":1}"#);
    }

    #[test]
    fn query_json_fields() {
        let mut q = chain(StructureTag::P1);
        q.answers = Some(BTreeSet::from([EntityId(1)]));
        let line = serde_json::to_string(&q).unwrap();
        assert_eq!(
            line,
            r#"{"structure":"1p","anchors":[0],"edges":[{"src":0,"dst":1,"relation":0,"constraint":{"kind":"wildcard"}}],"answers":[1]}"#
        );
        let back = read_queries(line.as_bytes()).unwrap();
        assert_eq!(back, vec![q]);
    }
}
