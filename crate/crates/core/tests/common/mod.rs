#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

pub mod checks;

use mvkg::decoder::Geometry;
use mvkg::kg::{EntityId, MultiViewKg, ViewId};
use mvkg::model::{Model, ModelConfig};
use mvkg::nn::{ParamStore, Tape};
use mvkg::query::{
    draw_sample, sample_queries, ConstraintPolicy, GroupId, Query, QueryEdge, StructureTag,
    TrainingSample, ViewConstraint,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

pub fn fig1() -> MultiViewKg {
    MultiViewKg::load(fixture("fig1.tsv")).expect("fixture parses")
}

/// `F.C. Barcelona -captain-> v -win-> ?` under one constraint on both edges.
pub fn captain_win(kg: &MultiViewKg, constraint: ViewConstraint) -> Query {
    let rel = |name: &str| kg.relation(name).expect("relation in fixture");
    Query {
        structure: StructureTag::P2,
        anchors: vec![kg.entity("F.C. Barcelona").expect("anchor in fixture")],
        edges: vec![
            QueryEdge {
                source: 0,
                target: 1,
                relation: rel("captain"),
                constraint,
            },
            QueryEdge {
                source: 1,
                target: 2,
                relation: rel("win"),
                constraint,
            },
        ],
        answers: None,
    }
}

pub fn labels(kg: &MultiViewKg, ids: &BTreeSet<EntityId>) -> BTreeSet<String> {
    ids.iter()
        .map(|e| kg.entities().label(e.0).unwrap().to_owned())
        .collect()
}

/// Answers by enumerating every binding of the non-anchor nodes and every
/// view for every equal-match group.
pub fn brute_force_answers(kg: &MultiViewKg, q: &Query) -> BTreeSet<EntityId> {
    let n_nodes = q.num_nodes();
    let n_anchor = q.anchors.len();
    let n_vars = n_nodes - n_anchor;
    let answer_node = n_nodes - 1;
    let groups: Vec<GroupId> = q
        .edges
        .iter()
        .filter_map(|e| match e.constraint {
            ViewConstraint::Equal { group } => Some(group),
            _ => None,
        })
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let fact_views = |h: usize, r: usize, t: usize| -> Vec<usize> {
        (0..kg.num_views())
            .filter(|&v| {
                kg.facts().iter().any(|f| {
                    f.head.0 == h && f.relation.0 == r && f.tail.0 == t && f.view.0 == v
                })
            })
            .collect()
    };

    let ne = kg.num_entities();
    let mut answers = BTreeSet::new();
    let total = ne.pow(n_vars as u32);
    let mut binding = vec![0usize; n_nodes];
    for (i, a) in q.anchors.iter().enumerate() {
        binding[i] = a.0;
    }
    for code in 0..total {
        let mut c = code;
        for node in n_anchor..n_nodes {
            binding[node] = c % ne;
            c /= ne;
        }
        let witnessed: Vec<Vec<usize>> = q
            .edges
            .iter()
            .map(|e| fact_views(binding[e.source], e.relation.0, binding[e.target]))
            .collect();
        let mut assignment = vec![0usize; groups.len()];
        let n_assign = kg.num_views().pow(groups.len() as u32);
        let ok = (0..n_assign).any(|code| {
            let mut c = code;
            for slot in assignment.iter_mut() {
                *slot = c % kg.num_views();
                c /= kg.num_views();
            }
            q.edges.iter().zip(&witnessed).all(|(e, views)| match e.constraint {
                ViewConstraint::Wildcard => !views.is_empty(),
                ViewConstraint::Exact { view } => views.contains(&view.0),
                ViewConstraint::Equal { group } => {
                    let g = groups.iter().position(|&x| x == group).unwrap();
                    views.contains(&assignment[g])
                }
            })
        });
        if ok {
            answers.insert(EntityId(binding[answer_node]));
        }
    }
    answers
}

/// Sampled queries of every shape and constraint kind; every other query
/// gets random anchors so empty answer sets are covered too.
pub fn mixed_queries(kg: &MultiViewKg, count: usize, seed: u64) -> Vec<Query> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let policies = [
        ConstraintPolicy::Exact,
        ConstraintPolicy::Wildcard,
        ConstraintPolicy::Equal,
    ];
    let mut out = Vec::new();
    let mut i = 0usize;
    while out.len() < count {
        let tag = StructureTag::ALL[i % StructureTag::ALL.len()];
        let policy = policies[(i / StructureTag::ALL.len()) % policies.len()];
        i += 1;
        let mut q = sample_queries(kg, tag, policy, 1, &mut rng)
            .expect("toy KG supports every template")
            .remove(0);
        if i % 2 == 0 {
            for a in &mut q.anchors {
                *a = EntityId(rng.gen_range(0..kg.num_entities()));
            }
            q.answers = None;
        }
        out.push(q);
    }
    out
}

pub fn small_config(geometry: Geometry) -> ModelConfig {
    ModelConfig {
        d: 8,
        geometry,
        ..ModelConfig::default()
    }
}

/// Training samples covering exact, wildcard and equal constraints.
pub fn samples(kg: &MultiViewKg, k: usize, seed: u64) -> Vec<TrainingSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for tag in StructureTag::TRAINING {
        for policy in [
            ConstraintPolicy::Exact,
            ConstraintPolicy::Wildcard,
            ConstraintPolicy::Equal,
        ] {
            let q = sample_queries(kg, tag, policy, 1, &mut rng).unwrap().remove(0);
            out.push(draw_sample(&q, kg.num_entities(), k, &mut rng).unwrap());
        }
    }
    out
}

pub fn batch_loss(model: &Model, kg: &MultiViewKg, samples: &[TrainingSample]) -> f64 {
    let ctx = model.context(kg).unwrap();
    let mut tape = Tape::new();
    let fv = model.forward(&mut tape, &ctx);
    let loss = model.batch_loss(&mut tape, &fv, samples).unwrap();
    tape.scalar(loss)
}

/// Relative error `|a - n| / (|a| + |n|)` over `entries` sampled from every
/// parameter whose name starts with one of `prefixes`, analytic gradient
/// against central differences of `f`.
pub fn gradient_error(
    store: &mut ParamStore,
    prefixes: &[&str],
    entries: usize,
    seed: u64,
    f: &dyn Fn(&ParamStore) -> f64,
    analytic: &BTreeMap<String, ndarray::Array2<f64>>,
) -> (f64, usize) {
    let eps = 1e-6;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut diff = 0.0;
    let mut norm = 0.0;
    let mut checked = 0;
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.name(id).to_owned();
        if !prefixes.iter().any(|p| name.starts_with(p)) {
            continue;
        }
        let (rows, cols) = store.get(id).dim();
        let zero = ndarray::Array2::zeros((rows, cols));
        let grad = analytic.get(&name).unwrap_or(&zero);
        for _ in 0..entries.min(rows * cols) {
            let idx = (rng.gen_range(0..rows), rng.gen_range(0..cols));
            let orig = store.get(id)[idx];
            store.get_mut(id)[idx] = orig + eps;
            let up = f(store);
            store.get_mut(id)[idx] = orig - eps;
            let down = f(store);
            store.get_mut(id)[idx] = orig;
            let numeric = (up - down) / (2.0 * eps);
            diff += (grad[idx] - numeric).powi(2);
            norm += grad[idx].powi(2) + numeric.powi(2);
            checked += 1;
        }
    }
    let err = if norm == 0.0 { 0.0 } else { diff.sqrt() / norm.sqrt() };
    (err, checked)
}

/// Analytic gradients of the batch loss, keyed by parameter name.
pub fn analytic_gradients(
    model: &Model,
    kg: &MultiViewKg,
    samples: &[TrainingSample],
) -> BTreeMap<String, ndarray::Array2<f64>> {
    let ctx = model.context(kg).unwrap();
    let mut tape = Tape::new();
    let fv = model.forward(&mut tape, &ctx);
    let loss = model.batch_loss(&mut tape, &fv, samples).unwrap();
    let grads = tape.backward(loss);
    grads
        .iter()
        .map(|(id, g)| (model.store.name(id).to_owned(), g.clone()))
        .collect()
}

pub fn view(i: usize) -> ViewId {
    ViewId(i)
}
