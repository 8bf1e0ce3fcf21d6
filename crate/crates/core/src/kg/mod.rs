//! Multi-view knowledge graph store.
//!
//! A multi-view KG is a set of overlaying sub-graphs that share one entity
//! set. Every fact is a `(head, relation, tail, view)` quadruple; the view
//! says which sub-graph holds the edge.

mod io;
mod toy;

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::ingest_quadruples;
pub use toy::generate_toy_kg;

macro_rules! id_type {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(
            Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
        )]
        #[serde(transparent)]
        pub struct $name(pub usize);

        impl $name {
            #[inline]
            pub fn index(self) -> usize {
                self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                self.0.fmt(f)
            }
        }
    };
}

id_type!(
    /// Dense entity index in `0..num_entities`.
    EntityId
);
id_type!(
    /// Dense relation-type index in `0..num_relations`.
    RelationId
);
id_type!(
    /// Position of a view. Ordering is meaningful: it feeds the positional
    /// view encoding.
    ViewId
);

/// A directed edge `head --relation--> tail` observed in `view`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Fact {
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
    pub view: ViewId,
}

impl Fact {
    pub fn new(head: usize, relation: usize, tail: usize, view: usize) -> Self {
        Self {
            head: EntityId(head),
            relation: RelationId(relation),
            tail: EntityId(tail),
            view: ViewId(view),
        }
    }
}

/// View selector for traversal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViewSelector {
    View(ViewId),
    Any,
}

/// Label table with reverse lookup.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Vocab {
    labels: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_labels(labels: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(labels.len());
        for (i, label) in labels.iter().enumerate() {
            if index.insert(label.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate label `{label}`")));
            }
        }
        Ok(Self { labels, index })
    }

    pub fn numbered(prefix: &str, n: usize) -> Self {
        Self::from_labels((0..n).map(|i| format!("{prefix}{i}")).collect())
            .expect("numbered labels are unique")
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label(&self, id: usize) -> Option<&str> {
        self.labels.get(id).map(String::as_str)
    }

    pub fn get(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }
}

/// Summary counts, in the column order `#entities, #relation types,
/// #facts, #views`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KgStats {
    pub entities: usize,
    pub relations: usize,
    pub facts: usize,
    pub views: usize,
}

impl fmt::Display for KgStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{}\t{}\t{}",
            self.entities, self.relations, self.facts, self.views
        )
    }
}

/// Immutable in-memory multi-view KG.
#[derive(Debug, Clone)]
pub struct MultiViewKg {
    entities: Vocab,
    relations: Vocab,
    views: Vocab,
    facts: Vec<Fact>,
    /// (view, relation, head) -> sorted tails.
    out_index: HashMap<(ViewId, RelationId, EntityId), Vec<EntityId>>,
    /// tail -> sorted incoming (head, relation, view).
    in_index: Vec<Vec<(EntityId, RelationId, ViewId)>>,
    view_sets: Vec<Vec<ViewId>>,
    /// Undirected neighbor lists including the entity itself.
    mask_neighbors: Vec<Vec<EntityId>>,
}

impl MultiViewKg {
    /// Builds a KG from vocabularies and a fact list. Facts are validated
    /// and deduplicated.
    pub fn from_parts(
        entities: Vocab,
        relations: Vocab,
        views: Vocab,
        facts: impl IntoIterator<Item = Fact>,
    ) -> Result<Self> {
        let facts: BTreeSet<Fact> = facts.into_iter().collect();
        for f in &facts {
            if f.head.0 >= entities.len() || f.tail.0 >= entities.len() {
                return Err(Error::UnknownId {
                    kind: "entity",
                    id: f.head.0.max(f.tail.0),
                });
            }
            if f.relation.0 >= relations.len() {
                return Err(Error::UnknownId {
                    kind: "relation",
                    id: f.relation.0,
                });
            }
            if f.view.0 >= views.len() {
                return Err(Error::UnknownId {
                    kind: "view",
                    id: f.view.0,
                });
            }
        }
        let facts: Vec<Fact> = facts.into_iter().collect();
        let n = entities.len();

        let mut out_index: HashMap<_, Vec<EntityId>> = HashMap::new();
        let mut in_index = vec![Vec::new(); n];
        let mut view_sets = vec![BTreeSet::new(); n];
        let mut mask_neighbors: Vec<BTreeSet<EntityId>> =
            (0..n).map(|i| BTreeSet::from([EntityId(i)])).collect();
        for f in &facts {
            out_index
                .entry((f.view, f.relation, f.head))
                .or_default()
                .push(f.tail);
            in_index[f.tail.0].push((f.head, f.relation, f.view));
            view_sets[f.head.0].insert(f.view);
            view_sets[f.tail.0].insert(f.view);
            mask_neighbors[f.head.0].insert(f.tail);
            mask_neighbors[f.tail.0].insert(f.head);
        }
        for tails in out_index.values_mut() {
            tails.sort_unstable();
            tails.dedup();
        }
        for incoming in &mut in_index {
            incoming.sort_unstable();
        }

        Ok(Self {
            entities,
            relations,
            views,
            facts,
            out_index,
            in_index,
            view_sets: view_sets
                .into_iter()
                .map(|s| s.into_iter().collect())
                .collect(),
            mask_neighbors: mask_neighbors
                .into_iter()
                .map(|s| s.into_iter().collect())
                .collect(),
        })
    }

    /// Same vocabulary, different facts.
    pub fn with_facts(&self, facts: impl IntoIterator<Item = Fact>) -> Result<Self> {
        Self::from_parts(
            self.entities.clone(),
            self.relations.clone(),
            self.views.clone(),
            facts,
        )
    }

    /// Merges every view into a single one, discarding view information.
    pub fn collapse_views(&self) -> Self {
        let views = Vocab::from_labels(vec!["*".to_owned()]).expect("single label");
        Self::from_parts(
            self.entities.clone(),
            self.relations.clone(),
            views,
            self.facts.iter().map(|f| Fact {
                view: ViewId(0),
                ..*f
            }),
        )
        .expect("collapsed facts stay within vocabulary")
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn num_views(&self) -> usize {
        self.views.len()
    }

    pub fn num_facts(&self) -> usize {
        self.facts.len()
    }

    pub fn stats(&self) -> KgStats {
        KgStats {
            entities: self.num_entities(),
            relations: self.num_relations(),
            facts: self.num_facts(),
            views: self.num_views(),
        }
    }

    pub fn entities(&self) -> &Vocab {
        &self.entities
    }

    pub fn relations(&self) -> &Vocab {
        &self.relations
    }

    pub fn views(&self) -> &Vocab {
        &self.views
    }

    /// Facts sorted by `(head, relation, tail, view)`.
    pub fn facts(&self) -> &[Fact] {
        &self.facts
    }

    pub fn contains(&self, fact: &Fact) -> bool {
        self.facts.binary_search(fact).is_ok()
    }

    pub fn entity(&self, label: &str) -> Option<EntityId> {
        self.entities.get(label).map(EntityId)
    }

    pub fn relation(&self, label: &str) -> Option<RelationId> {
        self.relations.get(label).map(RelationId)
    }

    pub fn view(&self, label: &str) -> Option<ViewId> {
        self.views.get(label).map(ViewId)
    }

    /// Tails reachable from `head` over `relation` in the selected view(s).
    pub fn neighbors(
        &self,
        head: EntityId,
        relation: RelationId,
        view: ViewSelector,
    ) -> BTreeSet<EntityId> {
        match view {
            ViewSelector::View(v) => self.tails_in_view(head, relation, v).iter().copied().collect(),
            ViewSelector::Any => (0..self.num_views())
                .flat_map(|v| self.tails_in_view(head, relation, ViewId(v)).iter().copied())
                .collect(),
        }
    }

    /// Sorted tails of `head --relation-->` in one view.
    pub fn tails_in_view(&self, head: EntityId, relation: RelationId, view: ViewId) -> &[EntityId] {
        self.out_index
            .get(&(view, relation, head))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    /// Incoming edges of `tail` as sorted `(head, relation, view)` triples.
    pub fn incoming(&self, tail: EntityId) -> &[(EntityId, RelationId, ViewId)] {
        &self.in_index[tail.0]
    }

    /// The set of views in which `entity` has an incident fact.
    pub fn view_set(&self, entity: EntityId) -> &[ViewId] {
        &self.view_sets[entity.0]
    }

    /// Undirected neighbors of `entity` across all views, including itself.
    pub fn mask_neighbors(&self, entity: EntityId) -> &[EntityId] {
        &self.mask_neighbors[entity.0]
    }

    /// Dense attention mask: `A[u][u']` iff a fact links the pair in any
    /// view and either direction, or `u == u'`.
    pub fn attention_mask(&self) -> Array2<bool> {
        let n = self.num_entities();
        let mut mask = Array2::from_elem((n, n), false);
        for (i, row) in self.mask_neighbors.iter().enumerate() {
            for j in row {
                mask[[i, j.0]] = true;
            }
        }
        mask
    }

    /// Fact set keyed by labels; equal for two KGs holding the same
    /// content regardless of id assignment.
    pub fn labeled_facts(&self) -> BTreeSet<(String, String, String, String)> {
        self.facts
            .iter()
            .map(|f| {
                (
                    self.entities.labels[f.head.0].clone(),
                    self.relations.labels[f.relation.0].clone(),
                    self.entities.labels[f.tail.0].clone(),
                    self.views.labels[f.view.0].clone(),
                )
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> MultiViewKg {
        MultiViewKg::from_parts(
            Vocab::numbered("e", 4),
            Vocab::numbered("r", 2),
            Vocab::numbered("", 3),
            [
                Fact::new(0, 0, 1, 0),
                Fact::new(0, 0, 2, 2),
                Fact::new(1, 1, 3, 1),
                Fact::new(0, 0, 1, 0),
            ],
        )
        .unwrap()
    }

    #[test]
    fn dedups_and_indexes() {
        let kg = small();
        assert_eq!(kg.num_facts(), 3);
        assert_eq!(kg.view_set(EntityId(0)), &[ViewId(0), ViewId(2)]);
        assert_eq!(kg.view_set(EntityId(1)), &[ViewId(0), ViewId(1)]);
        assert_eq!(
            kg.neighbors(EntityId(0), RelationId(0), ViewSelector::Any),
            BTreeSet::from([EntityId(1), EntityId(2)])
        );
        assert_eq!(
            kg.neighbors(EntityId(0), RelationId(0), ViewSelector::View(ViewId(2))),
            BTreeSet::from([EntityId(2)])
        );
        assert!(kg
            .neighbors(EntityId(0), RelationId(1), ViewSelector::Any)
            .is_empty());
    }

    #[test]
    fn mask_is_symmetric_with_self_loops() {
        let kg = small();
        let a = kg.attention_mask();
        for i in 0..4 {
            assert!(a[[i, i]]);
            for j in 0..4 {
                assert_eq!(a[[i, j]], a[[j, i]]);
            }
        }
        assert!(a[[3, 1]]);
        assert!(!a[[3, 0]]);
    }

    #[test]
    fn rejects_out_of_vocab_ids() {
        let err = MultiViewKg::from_parts(
            Vocab::numbered("e", 2),
            Vocab::numbered("r", 1),
            Vocab::numbered("", 1),
            [Fact::new(0, 0, 5, 0)],
        );
        assert!(matches!(err, Err(Error::UnknownId { kind: "entity", .. })));
    }

    #[test]
    fn collapse_keeps_entities() {
        let kg = small().collapse_views();
        assert_eq!(kg.num_views(), 1);
        assert_eq!(kg.num_entities(), 4);
        assert_eq!(kg.num_facts(), 3);
    }
}
