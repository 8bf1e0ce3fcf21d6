//! Exact query answering by KG traversal.
//!
//! Each intermediate node carries a [`ViewTaggedSet`]: the reachable
//! entities together with the view assignments of the equal-match groups
//! used to reach them. Two derivations of the same entity that bind a
//! group to different views are kept apart, so an equal-match group is
//! honored across the whole derivation.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::kg::{EntityId, MultiViewKg, ViewId};
use crate::query::{GroupId, Query, QueryEdge, ViewConstraint};

pub const DEFAULT_FRONTIER_LIMIT: usize = 1_000_000;

/// One derivation's view bindings.
#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ViewRecord {
    /// Sorted by group.
    groups: Vec<(GroupId, ViewId)>,
    /// Views of the facts on the final hop. Only tracked into the answer node.
    witness: Vec<ViewId>,
}

impl ViewRecord {
    pub fn group_view(&self, group: GroupId) -> Option<ViewId> {
        self.groups
            .binary_search_by_key(&group, |&(g, _)| g)
            .ok()
            .map(|i| self.groups[i].1)
    }

    pub fn groups(&self) -> &[(GroupId, ViewId)] {
        &self.groups
    }

    pub fn witness(&self) -> &[ViewId] {
        &self.witness
    }

    fn bind(&self, group: GroupId, view: ViewId) -> Self {
        let mut groups = self.groups.clone();
        if let Err(pos) = groups.binary_search_by_key(&group, |&(g, _)| g) {
            groups.insert(pos, (group, view));
        }
        Self {
            groups,
            witness: Vec::new(),
        }
    }

    /// Union of two records, or `None` when they bind a group differently.
    fn merge(&self, other: &Self) -> Option<Self> {
        let mut groups = self.groups.clone();
        for &(g, v) in &other.groups {
            match groups.binary_search_by_key(&g, |&(h, _)| h) {
                Ok(i) if groups[i].1 != v => return None,
                Ok(_) => {}
                Err(pos) => groups.insert(pos, (g, v)),
            }
        }
        let mut witness = self.witness.clone();
        witness.extend_from_slice(&other.witness);
        witness.sort_unstable();
        witness.dedup();
        Some(Self { groups, witness })
    }
}

/// Entities with the view records of their derivations. Entities without
/// any consistent record are absent.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ViewTaggedSet {
    entries: BTreeMap<EntityId, BTreeSet<ViewRecord>>,
}

impl ViewTaggedSet {
    pub fn singleton(entity: EntityId) -> Self {
        Self {
            entries: BTreeMap::from([(entity, BTreeSet::from([ViewRecord::default()]))]),
        }
    }

    pub fn entities(&self) -> BTreeSet<EntityId> {
        self.entries.keys().copied().collect()
    }

    pub fn records(&self, entity: EntityId) -> Option<&BTreeSet<ViewRecord>> {
        self.entries.get(&entity)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn binding_count(&self) -> usize {
        self.entries.values().map(BTreeSet::len).sum()
    }
}

/// Symbolic traversal with a bound on intermediate bindings.
#[derive(Debug, Clone, Copy)]
pub struct Oracle<'a> {
    kg: &'a MultiViewKg,
    frontier_limit: usize,
}

impl<'a> Oracle<'a> {
    pub fn new(kg: &'a MultiViewKg) -> Self {
        Self {
            kg,
            frontier_limit: DEFAULT_FRONTIER_LIMIT,
        }
    }

    pub fn with_frontier_limit(mut self, limit: usize) -> Self {
        self.frontier_limit = limit;
        self
    }

    /// Tagged set reached at the answer node.
    pub fn evaluate(&self, q: &Query) -> Result<ViewTaggedSet> {
        q.validate(Some(self.kg))?;
        let sink = q.answer_node()?;
        let mut sets: Vec<Option<ViewTaggedSet>> = vec![None; q.num_nodes()];
        for node in q.topo_order()? {
            let set = if q.is_anchor(node) {
                ViewTaggedSet::singleton(q.anchors[node])
            } else {
                let mut branches = Vec::new();
                for ei in q.incoming(node) {
                    let edge = &q.edges[ei];
                    let source = sets[edge.source]
                        .as_ref()
                        .expect("topological order visits sources first");
                    branches.push(self.project(source, edge, node == sink)?);
                }
                self.intersect(branches)?
            };
            sets[node] = Some(set);
        }
        Ok(sets[sink].take().expect("sink visited"))
    }

    fn project(
        &self,
        source: &ViewTaggedSet,
        edge: &QueryEdge,
        into_sink: bool,
    ) -> Result<ViewTaggedSet> {
        let all_views: Vec<ViewId> = (0..self.kg.num_views()).map(ViewId).collect();
        let mut out: BTreeMap<EntityId, BTreeSet<ViewRecord>> = BTreeMap::new();
        let mut count = 0usize;
        for (&entity, records) in &source.entries {
            for record in records {
                let (views, group): (&[ViewId], Option<GroupId>) = match edge.constraint {
                    ViewConstraint::Exact { view } => {
                        (std::slice::from_ref(&all_views[view.0]), None)
                    }
                    ViewConstraint::Wildcard => (&all_views, None),
                    ViewConstraint::Equal { group } => match record.group_view(group) {
                        Some(bound) => (
                            std::slice::from_ref(
                                all_views.get(bound.0).expect("bound view is valid"),
                            ),
                            Some(group),
                        ),
                        None => (&all_views, Some(group)),
                    },
                };
                for &view in views {
                    let tails = self.kg.tails_in_view(entity, edge.relation, view);
                    if tails.is_empty() {
                        continue;
                    }
                    let mut next = match group {
                        Some(g) => record.bind(g, view),
                        None => ViewRecord {
                            groups: record.groups.clone(),
                            witness: Vec::new(),
                        },
                    };
                    if into_sink {
                        next.witness = vec![view];
                    }
                    for &tail in tails {
                        if out.entry(tail).or_default().insert(next.clone()) {
                            count += 1;
                            if count > self.frontier_limit {
                                return Err(Error::FrontierLimit {
                                    limit: self.frontier_limit,
                                });
                            }
                        }
                    }
                }
            }
        }
        Ok(ViewTaggedSet { entries: out })
    }

    fn intersect(&self, mut branches: Vec<ViewTaggedSet>) -> Result<ViewTaggedSet> {
        let mut acc = branches.remove(0);
        for other in branches {
            let mut entries = BTreeMap::new();
            for (entity, left) in acc.entries {
                let Some(right) = other.entries.get(&entity) else {
                    continue;
                };
                let merged: BTreeSet<ViewRecord> = left
                    .iter()
                    .flat_map(|a| right.iter().filter_map(move |b| a.merge(b)))
                    .collect();
                if !merged.is_empty() {
                    entries.insert(entity, merged);
                }
            }
            acc = ViewTaggedSet { entries };
            if acc.binding_count() > self.frontier_limit {
                return Err(Error::FrontierLimit {
                    limit: self.frontier_limit,
                });
            }
        }
        Ok(acc)
    }

    pub fn answer_query(&self, q: &Query) -> Result<BTreeSet<EntityId>> {
        Ok(self.evaluate(q)?.entities())
    }

    pub fn answer_views(&self, q: &Query) -> Result<BTreeMap<EntityId, BTreeSet<ViewId>>> {
        let set = self.evaluate(q)?;
        Ok(set
            .entries
            .iter()
            .map(|(&e, records)| {
                let views = records
                    .iter()
                    .flat_map(|r| r.witness.iter().copied())
                    .collect();
                (e, views)
            })
            .collect())
    }
}

/// Entities reachable at the answer node under all relation and view
/// constraints.
pub fn answer_query(kg: &MultiViewKg, q: &Query) -> Result<BTreeSet<EntityId>> {
    Oracle::new(kg).answer_query(q)
}

/// For each answer, the views of the facts on its final hop.
pub fn answer_views(kg: &MultiViewKg, q: &Query) -> Result<BTreeMap<EntityId, BTreeSet<ViewId>>> {
    Oracle::new(kg).answer_views(q)
}

/// Fills `q.answers` from the oracle.
pub fn attach_answers(kg: &MultiViewKg, q: &mut Query) -> Result<()> {
    q.answers = Some(answer_query(kg, q)?);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::{Fact, RelationId, Vocab};
    use crate::query::StructureTag;

    fn edge(s: usize, t: usize, r: usize, c: ViewConstraint) -> QueryEdge {
        QueryEdge {
            source: s,
            target: t,
            relation: RelationId(r),
            constraint: c,
        }
    }

    fn kg() -> MultiViewKg {
        // 0 -r0-> 1 in views 0 and 2; 1 -r1-> 2 in view 0; 1 -r1-> 3 in view 1
        MultiViewKg::from_parts(
            Vocab::numbered("e", 4),
            Vocab::numbered("r", 2),
            Vocab::numbered("", 3),
            [
                Fact::new(0, 0, 1, 0),
                Fact::new(0, 0, 1, 2),
                Fact::new(1, 1, 2, 0),
                Fact::new(1, 1, 3, 1),
            ],
        )
        .unwrap()
    }

    fn two_hop(c: ViewConstraint) -> Query {
        Query {
            structure: StructureTag::P2,
            anchors: vec![EntityId(0)],
            edges: vec![edge(0, 1, 0, c), edge(1, 2, 1, c)],
            answers: None,
        }
    }

    #[test]
    fn equal_match_restricts_to_common_view() {
        let kg = kg();
        let eq = ViewConstraint::Equal { group: GroupId(0) };
        assert_eq!(
            answer_query(&kg, &two_hop(eq)).unwrap(),
            BTreeSet::from([EntityId(2)])
        );
        assert_eq!(
            answer_query(&kg, &two_hop(ViewConstraint::Wildcard)).unwrap(),
            BTreeSet::from([EntityId(2), EntityId(3)])
        );
        let exact = ViewConstraint::Exact { view: ViewId(2) };
        assert!(answer_query(&kg, &two_hop(exact)).unwrap().is_empty());
    }

    #[test]
    fn answer_views_collects_final_hop() {
        let kg = kg();
        let q = Query {
            structure: StructureTag::P1,
            anchors: vec![EntityId(0)],
            edges: vec![edge(0, 1, 0, ViewConstraint::Wildcard)],
            answers: None,
        };
        let views = answer_views(&kg, &q).unwrap();
        assert_eq!(views[&EntityId(1)], BTreeSet::from([ViewId(0), ViewId(2)]));
    }

    #[test]
    fn frontier_limit_aborts() {
        let kg = kg();
        let q = two_hop(ViewConstraint::Wildcard);
        let err = Oracle::new(&kg).with_frontier_limit(1).evaluate(&q);
        assert!(matches!(err, Err(Error::FrontierLimit { limit: 1 })));
    }

    #[test]
    fn incompatible_records_are_dropped_at_intersection() {
        // 2i over groups shared across branches: both edges must share a view.
        let kg = MultiViewKg::from_parts(
            Vocab::numbered("e", 3),
            Vocab::numbered("r", 1),
            Vocab::numbered("", 2),
            [Fact::new(0, 0, 2, 0), Fact::new(1, 0, 2, 1)],
        )
        .unwrap();
        let eq = ViewConstraint::Equal { group: GroupId(0) };
        let q = Query {
            structure: StructureTag::I2,
            anchors: vec![EntityId(0), EntityId(1)],
            edges: vec![edge(0, 2, 0, eq), edge(1, 2, 0, eq)],
            answers: None,
        };
        assert!(answer_query(&kg, &q).unwrap().is_empty());
        assert_eq!(
            answer_query(&kg, &q.with_wildcards()).unwrap(),
            BTreeSet::from([EntityId(2)])
        );
    }
}
