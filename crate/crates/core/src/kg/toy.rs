//! Synthetic multi-view KG generator.
//!
//! Entities sit on a line. Each relation translates a head by a fixed
//! stride plus a view-dependent drift and a little noise, so facts are
//! predictable from the rest of the graph and the same `(head, relation)`
//! pair reaches different tails in different views.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Fact, MultiViewKg, Vocab};
use crate::error::{Error, Result};

const NOISE_WIDTH: i64 = 3;

struct RelationShape {
    stride: i64,
    drift: i64,
}

/// Deterministic toy KG with `facts_per_view` distinct facts in every view
/// and every entity incident to at least one fact.
pub fn generate_toy_kg(
    num_entities: usize,
    num_relations: usize,
    num_views: usize,
    facts_per_view: usize,
    seed: u64,
) -> Result<MultiViewKg> {
    if num_entities < 2 || num_relations < 1 || num_views < 1 || facts_per_view < 1 {
        return Err(Error::InvalidArgument(format!(
            "toy KG needs >= 2 entities and >= 1 relation, view and fact per view \
             (got {num_entities}, {num_relations}, {num_views}, {facts_per_view})"
        )));
    }
    let n = num_entities as i64;
    let capacity = num_entities * (num_entities - 1) * num_relations;
    if facts_per_view > capacity {
        return Err(Error::InvalidArgument(format!(
            "{facts_per_view} facts per view exceed the {capacity} distinct edges available"
        )));
    }
    let total = facts_per_view * num_views;
    if 2 * total < num_entities {
        return Err(Error::InvalidArgument(format!(
            "{total} facts cannot touch all {num_entities} entities"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max_stride = (n / 5).max(1);
    let view_step = (n / (10 * num_views as i64)).max(1);
    let shapes: Vec<RelationShape> = (0..num_relations)
        .map(|r| {
            let sign = if r % 2 == 0 { 1 } else { -1 };
            let drift_sign = if rng.gen_bool(0.5) { 1 } else { -1 };
            RelationShape {
                stride: sign * rng.gen_range(1..=max_stride),
                drift: drift_sign * rng.gen_range(1..=3) * view_step,
            }
        })
        .collect();

    let mut order: Vec<usize> = (0..num_entities).collect();
    order.shuffle(&mut rng);

    let mut facts: BTreeSet<Fact> = BTreeSet::new();
    let mut slot = 0usize;
    for view in 0..num_views {
        let mut made = 0;
        let mut attempts = 0usize;
        let budget = 50 * facts_per_view + 1000;
        while made < facts_per_view {
            attempts += 1;
            if attempts > budget {
                return Err(Error::InvalidArgument(format!(
                    "could not place {facts_per_view} distinct facts in view {view}"
                )));
            }
            let head = order[slot % num_entities];
            let forced_tail = (total < num_entities && slot + total < num_entities)
                .then(|| order[slot + total]);
            slot += 1;

            let fact = match forced_tail {
                Some(tail) => Some(Fact::new(head, rng.gen_range(0..num_relations), tail, view)),
                None => structured_fact(&shapes, head, view, n, &facts, &mut rng),
            }
            .or_else(|| random_fact(num_entities, num_relations, head, view, &facts, &mut rng));
            if let Some(f) = fact {
                if facts.insert(f) {
                    made += 1;
                }
            }
        }
    }

    cover_isolated(&mut facts, num_entities);

    MultiViewKg::from_parts(
        Vocab::numbered("e", num_entities),
        Vocab::numbered("r", num_relations),
        Vocab::numbered("", num_views),
        facts,
    )
}

fn structured_fact(
    shapes: &[RelationShape],
    head: usize,
    view: usize,
    n: i64,
    existing: &BTreeSet<Fact>,
    rng: &mut ChaCha8Rng,
) -> Option<Fact> {
    let mut relations: Vec<usize> = (0..shapes.len()).collect();
    relations.shuffle(rng);
    for r in relations {
        let shape = &shapes[r];
        let base = head as i64 + shape.stride + shape.drift * view as i64;
        let start = rng.gen_range(0..NOISE_WIDTH);
        for k in 0..NOISE_WIDTH {
            let tail = base + (start + k) % NOISE_WIDTH;
            if tail < 0 || tail >= n || tail == head as i64 {
                continue;
            }
            let f = Fact::new(head, r, tail as usize, view);
            if !existing.contains(&f) {
                return Some(f);
            }
        }
    }
    None
}

fn random_fact(
    num_entities: usize,
    num_relations: usize,
    head: usize,
    view: usize,
    existing: &BTreeSet<Fact>,
    rng: &mut ChaCha8Rng,
) -> Option<Fact> {
    let mut tail = rng.gen_range(0..num_entities - 1);
    if tail >= head {
        tail += 1;
    }
    let f = Fact::new(head, rng.gen_range(0..num_relations), tail, view);
    (!existing.contains(&f)).then_some(f)
}

/// Rewires facts whose endpoints are otherwise covered so that every
/// entity ends up incident to some fact. Counts per view are preserved.
fn cover_isolated(facts: &mut BTreeSet<Fact>, num_entities: usize) {
    let mut degree = vec![0usize; num_entities];
    for f in facts.iter() {
        degree[f.head.0] += 1;
        degree[f.tail.0] += 1;
    }
    for u in 0..num_entities {
        if degree[u] > 0 {
            continue;
        }
        let donor = facts
            .iter()
            .find(|f| degree[f.head.0] > 1 && f.tail.0 != u && {
                let moved = Fact { head: super::EntityId(u), ..**f };
                !facts.contains(&moved)
            })
            .copied();
        if let Some(f) = donor {
            facts.remove(&f);
            degree[f.head.0] -= 1;
            facts.insert(Fact {
                head: super::EntityId(u),
                ..f
            });
            degree[u] += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::EntityId;

    #[test]
    fn deterministic_for_seed() {
        let a = generate_toy_kg(10, 2, 3, 20, 0).unwrap();
        let b = generate_toy_kg(10, 2, 3, 20, 0).unwrap();
        assert_eq!(a.facts(), b.facts());
        let c = generate_toy_kg(10, 2, 3, 20, 1).unwrap();
        assert_ne!(a.facts(), c.facts());
    }

    #[test]
    fn smallest_kg_has_one_fact() {
        let kg = generate_toy_kg(2, 1, 1, 1, 0).unwrap();
        assert_eq!(kg.num_facts(), 1);
        assert!(!kg.view_set(EntityId(0)).is_empty());
        assert!(!kg.view_set(EntityId(1)).is_empty());
    }

    #[test]
    fn every_view_and_entity_is_covered() {
        for seed in 0..5 {
            let kg = generate_toy_kg(100, 5, 3, 667, seed).unwrap();
            assert_eq!(kg.num_facts(), 3 * 667);
            for v in 0..100 {
                assert!(!kg.view_set(EntityId(v)).is_empty(), "entity {v} isolated");
            }
            for view in 0..3 {
                let count = kg.facts().iter().filter(|f| f.view.0 == view).count();
                assert_eq!(count, 667);
            }
        }
    }

    #[test]
    fn sparse_parameters_still_cover_entities() {
        let kg = generate_toy_kg(30, 2, 3, 6, 9).unwrap();
        for v in 0..30 {
            assert!(!kg.view_set(EntityId(v)).is_empty());
        }
    }

    #[test]
    fn infeasible_parameters_error() {
        assert!(generate_toy_kg(10, 1, 1, 0, 0).is_err());
        assert!(generate_toy_kg(3, 1, 1, 7, 0).is_err());
        assert!(generate_toy_kg(100, 1, 1, 10, 0).is_err());
    }
}
