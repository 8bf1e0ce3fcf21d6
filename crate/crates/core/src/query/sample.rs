//! Query instantiation and training-set sampling.
//!
//! Queries are built by walking the KG backward from a sampled answer, so
//! every instantiated query is satisfiable by construction.

use std::fmt;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ConstraintKind, GroupId, Query, QueryEdge, StructureTag, ViewConstraint};
use crate::error::{Error, Result};
use crate::kg::{EntityId, Fact, MultiViewKg, RelationId, ViewId};
use crate::oracle;

/// Retry bound for backward walks.
pub const MAX_ATTEMPTS: usize = 200;

/// How view constraints are attached to an instantiated query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConstraintPolicy {
    /// Every edge pinned to the view of its witnessing fact.
    Exact,
    Wildcard,
    /// All edges in one equal-match group.
    Equal,
    /// Exact constraints whose witnessing facts span at least two views.
    CrossView,
}

impl ConstraintPolicy {
    /// Equal match for projection chains, wildcard otherwise.
    pub fn default_for(tag: StructureTag) -> Self {
        if tag.is_chain() {
            ConstraintPolicy::Equal
        } else {
            ConstraintPolicy::Wildcard
        }
    }

    pub fn from_kind(kind: ConstraintKind) -> Self {
        match kind {
            ConstraintKind::Exact => ConstraintPolicy::Exact,
            ConstraintKind::Wildcard => ConstraintPolicy::Wildcard,
            ConstraintKind::Equal => ConstraintPolicy::Equal,
        }
    }
}

impl fmt::Display for ConstraintPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            ConstraintPolicy::Exact => "exact",
            ConstraintPolicy::Wildcard => "wildcard",
            ConstraintPolicy::Equal => "equal",
            ConstraintPolicy::CrossView => "cross-view",
        })
    }
}

impl FromStr for ConstraintPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "exact" => Ok(ConstraintPolicy::Exact),
            "wildcard" => Ok(ConstraintPolicy::Wildcard),
            "equal" => Ok(ConstraintPolicy::Equal),
            "cross-view" | "cross_view" | "crossview" => Ok(ConstraintPolicy::CrossView),
            other => Err(Error::InvalidArgument(format!(
                "unknown constraint policy `{other}`"
            ))),
        }
    }
}

/// A query paired with one answer and `k` non-answers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingSample {
    pub query: Query,
    pub positive: EntityId,
    pub negatives: Vec<EntityId>,
}

#[derive(Clone, Copy)]
enum ViewRule {
    Any,
    Fixed(ViewId),
}

impl ViewRule {
    fn admits(self, view: ViewId) -> bool {
        match self {
            ViewRule::Any => true,
            ViewRule::Fixed(v) => v == view,
        }
    }
}

struct Walk {
    anchors: Vec<EntityId>,
    /// Per template edge: relation and witnessing view.
    hops: Vec<(RelationId, ViewId)>,
}

/// Binds template nodes by walking incoming facts backward from `answer`.
fn backward_walk<R: Rng + ?Sized>(
    kg: &MultiViewKg,
    tag: StructureTag,
    answer: EntityId,
    rule: ViewRule,
    rng: &mut R,
) -> Option<Walk> {
    let (num_anchors, edges) = tag.template();
    let num_nodes = edges.iter().map(|&(s, t)| s.max(t) + 1).max()?;
    let mut binding: Vec<Option<EntityId>> = vec![None; num_nodes];
    binding[num_nodes - 1] = Some(answer);
    let mut hops: Vec<Option<(RelationId, ViewId)>> = vec![None; edges.len()];

    // Template edges always point from lower to higher node index.
    for node in (num_anchors..num_nodes).rev() {
        let entity = binding[node]?;
        let incoming: Vec<usize> = edges
            .iter()
            .enumerate()
            .filter(|(_, &(_, t))| t == node)
            .map(|(i, _)| i)
            .collect();
        let mut candidates: Vec<(EntityId, RelationId, ViewId)> = kg
            .incoming(entity)
            .iter()
            .copied()
            .filter(|&(_, _, v)| rule.admits(v))
            .collect();
        candidates.shuffle(rng);
        let mut used: Vec<(EntityId, RelationId)> = Vec::new();
        for ei in incoming {
            let pick = candidates
                .iter()
                .find(|(h, r, _)| !used.contains(&(*h, *r)))
                .copied()?;
            used.push((pick.0, pick.1));
            binding[edges[ei].0] = Some(pick.0);
            hops[ei] = Some((pick.1, pick.2));
        }
    }
    Some(Walk {
        anchors: binding[..num_anchors].iter().map(|b| b.expect("bound")).collect(),
        hops: hops.into_iter().map(|h| h.expect("every edge walked")).collect(),
    })
}

fn build_query(
    tag: StructureTag,
    walk: &Walk,
    constraint: impl Fn(ViewId) -> ViewConstraint,
) -> Query {
    let (_, edges) = tag.template();
    Query {
        structure: tag,
        anchors: walk.anchors.clone(),
        edges: edges
            .iter()
            .zip(&walk.hops)
            .map(|(&(s, t), &(relation, view))| QueryEdge {
                source: s,
                target: t,
                relation,
                constraint: constraint(view),
            })
            .collect(),
        answers: None,
    }
}

fn random_fact<'a, R: Rng + ?Sized>(kg: &'a MultiViewKg, rng: &mut R) -> Option<&'a Fact> {
    kg.facts().choose(rng)
}

/// Samples a satisfiable query of shape `tag` with oracle answers
/// attached.
pub fn instantiate_template<R: Rng + ?Sized>(
    kg: &MultiViewKg,
    tag: StructureTag,
    policy: ConstraintPolicy,
    rng: &mut R,
) -> Result<Query> {
    for _ in 0..MAX_ATTEMPTS {
        let Some(seed_fact) = random_fact(kg, rng) else {
            break;
        };
        let answer = seed_fact.tail;
        let rule = match policy {
            ConstraintPolicy::Equal => ViewRule::Fixed(seed_fact.view),
            _ => ViewRule::Any,
        };
        let Some(walk) = backward_walk(kg, tag, answer, rule, rng) else {
            continue;
        };
        let mut query = match policy {
            ConstraintPolicy::Exact => build_query(tag, &walk, |view| ViewConstraint::Exact { view }),
            ConstraintPolicy::Wildcard => build_query(tag, &walk, |_| ViewConstraint::Wildcard),
            ConstraintPolicy::Equal => build_query(tag, &walk, |_| ViewConstraint::Equal {
                group: GroupId(0),
            }),
            ConstraintPolicy::CrossView => {
                let first = walk.hops[0].1;
                if walk.hops.iter().all(|&(_, v)| v == first) {
                    continue;
                }
                build_query(tag, &walk, |view| ViewConstraint::Exact { view })
            }
        };
        oracle::attach_answers(kg, &mut query)?;
        debug_assert!(query.answers.as_ref().is_some_and(|a| a.contains(&answer)));
        return Ok(query);
    }
    Err(Error::SamplingFailed {
        template: format!("{tag}/{policy}"),
        attempts: MAX_ATTEMPTS,
    })
}

/// Samples a query whose edges are all witnessed in `view`, with exact
/// constraints naming that view.
pub fn instantiate_in_view<R: Rng + ?Sized>(
    kg: &MultiViewKg,
    tag: StructureTag,
    view: ViewId,
    rng: &mut R,
) -> Result<Query> {
    let in_view: Vec<&Fact> = kg.facts().iter().filter(|f| f.view == view).collect();
    for _ in 0..MAX_ATTEMPTS {
        let Some(seed_fact) = in_view.choose(rng) else {
            break;
        };
        let Some(walk) = backward_walk(kg, tag, seed_fact.tail, ViewRule::Fixed(view), rng) else {
            continue;
        };
        let mut query = build_query(tag, &walk, |v| ViewConstraint::Exact { view: v });
        oracle::attach_answers(kg, &mut query)?;
        return Ok(query);
    }
    Err(Error::SamplingFailed {
        template: format!("{tag}/view {view}"),
        attempts: MAX_ATTEMPTS,
    })
}

/// `count` queries of one shape and policy.
pub fn sample_queries<R: Rng + ?Sized>(
    kg: &MultiViewKg,
    tag: StructureTag,
    policy: ConstraintPolicy,
    count: usize,
    rng: &mut R,
) -> Result<Vec<Query>> {
    (0..count)
        .map(|_| instantiate_template(kg, tag, policy, rng))
        .collect()
}

/// Pairs `query` with a uniformly drawn answer and `k` distinct non-answers.
pub fn draw_sample<R: Rng + ?Sized>(
    query: &Query,
    num_entities: usize,
    k: usize,
    rng: &mut R,
) -> Result<TrainingSample> {
    let answers = query
        .answers
        .as_ref()
        .ok_or_else(|| Error::InvalidQuery("query has no ground-truth answers".into()))?;
    if answers.is_empty() {
        return Err(Error::InvalidQuery("query has an empty answer set".into()));
    }
    if k == 0 || k >= num_entities.saturating_sub(answers.len()) {
        return Err(Error::InvalidArgument(format!(
            "k = {k} negatives needs fewer than {} non-answers",
            num_entities.saturating_sub(answers.len())
        )));
    }
    let positive = *answers
        .iter()
        .nth(rng.gen_range(0..answers.len()))
        .expect("index in range");
    let pool: Vec<EntityId> = (0..num_entities)
        .map(EntityId)
        .filter(|e| !answers.contains(e))
        .collect();
    let negatives = index::sample(rng, pool.len(), k)
        .into_iter()
        .map(|i| pool[i])
        .collect();
    Ok(TrainingSample {
        query: query.clone(),
        positive,
        negatives,
    })
}

/// Training samples: for each sample a constraint kind is drawn uniformly,
/// a query is instantiated under it, then one answer and `k` negatives are
/// attached. Only training shapes (1p, 2p, 2i, 3i) are accepted.
pub fn sample_training_set<R: Rng + ?Sized>(
    kg: &MultiViewKg,
    counts: &[(StructureTag, usize)],
    k: usize,
    rng: &mut R,
) -> Result<Vec<TrainingSample>> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if k + 1 >= kg.num_entities() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} leaves no room for answers among {} entities",
            kg.num_entities()
        )));
    }
    let kinds = [
        ConstraintKind::Exact,
        ConstraintKind::Wildcard,
        ConstraintKind::Equal,
    ];
    let mut out = Vec::new();
    for &(tag, count) in counts {
        if !StructureTag::TRAINING.contains(&tag) {
            return Err(Error::InvalidArgument(format!(
                "`{tag}` is not a training structure"
            )));
        }
        for _ in 0..count {
            let kind = kinds[rng.gen_range(0..kinds.len())];
            let policy = ConstraintPolicy::from_kind(kind);
            let mut sample = None;
            for _ in 0..MAX_ATTEMPTS {
                let q = instantiate_template(kg, tag, policy, rng)?;
                let n_answers = q.answers.as_ref().map_or(0, |a| a.len());
                if k < kg.num_entities() - n_answers {
                    sample = Some(draw_sample(&q, kg.num_entities(), k, rng)?);
                    break;
                }
            }
            out.push(sample.ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "k = {k} too large: `{tag}` queries keep covering most entities"
                ))
            })?);
        }
    }
    Ok(out)
}

/// Drops `removal_fraction` of the facts uniformly at random. Returns
/// `(train_kg, full_kg)` over the same vocabulary.
pub fn holdout_split<R: Rng + ?Sized>(
    kg: &MultiViewKg,
    removal_fraction: f64,
    rng: &mut R,
) -> Result<(MultiViewKg, MultiViewKg)> {
    if !(removal_fraction > 0.0 && removal_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "removal fraction {removal_fraction} outside (0, 1)"
        )));
    }
    let n = kg.num_facts();
    let remove = ((removal_fraction * n as f64).round() as usize).max(1);
    if remove >= n {
        return Err(Error::InvalidArgument(format!(
            "removing {remove} of {n} facts leaves nothing to train on"
        )));
    }
    let dropped: std::collections::HashSet<usize> =
        index::sample(rng, n, remove).into_iter().collect();
    let kept = kg
        .facts()
        .iter()
        .enumerate()
        .filter(|(i, _)| !dropped.contains(i))
        .map(|(_, f)| *f);
    let train = kg.with_facts(kept)?;
    for v in 0..kg.num_views() {
        let before = kg.facts().iter().any(|f| f.view.0 == v);
        let after = train.facts().iter().any(|f| f.view.0 == v);
        if before && !after {
            return Err(Error::InvalidArgument(format!(
                "removal empties view {}",
                kg.views().label(v).unwrap_or("?")
            )));
        }
    }
    Ok((train, kg.clone()))
}
