//! Evaluation protocols built on top of training: held-out answers,
//! unobserved views and the view-agnostic baseline.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::TraceEvent;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalOptions, EvalQuery, MetricsReport};
use crate::kg::{MultiViewKg, ViewId};
use crate::oracle::answer_query;
use crate::query::{instantiate_in_view, sample_queries, ConstraintPolicy, Query, StructureTag};
use crate::train::{train, TrainOutcome, TrainingConfig};

/// Queries sampled on `full` whose targets are the answers `train` cannot
/// reach by traversal. Queries without such answers are dropped.
pub fn held_out_queries<R: Rng + ?Sized>(
    train: &MultiViewKg,
    full: &MultiViewKg,
    tags: &[StructureTag],
    policies: &[ConstraintPolicy],
    per_combination: usize,
    rng: &mut R,
) -> Result<Vec<EvalQuery>> {
    let mut out = Vec::new();
    for &tag in tags {
        for &policy in policies {
            for query in sample_queries(full, tag, policy, per_combination, rng)? {
                let reachable = answer_query(train, &query)?;
                let hard: BTreeSet<_> = query
                    .answers
                    .as_ref()
                    .map(|a| a.difference(&reachable).copied().collect())
                    .unwrap_or_default();
                if !hard.is_empty() {
                    out.push(EvalQuery {
                        query,
                        targets: Some(hard),
                    });
                }
            }
        }
    }
    Ok(out)
}

/// Facts of views before `pivot`, over the full vocabulary.
pub fn pivot_split(kg: &MultiViewKg, pivot: ViewId) -> Result<MultiViewKg> {
    if pivot.0 == 0 {
        return Err(Error::InvalidArgument(
            "pivot is the first view, leaving no training facts".into(),
        ));
    }
    if pivot.0 >= kg.num_views() {
        return Err(Error::UnknownId {
            kind: "view",
            id: pivot.0,
        });
    }
    kg.with_facts(kg.facts().iter().filter(|f| f.view < pivot).copied())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewReport {
    pub view: ViewId,
    pub label: String,
    /// Views between this one and the pivot.
    pub distance: usize,
    pub report: MetricsReport,
}

/// Trains on the views before `pivot`, then scores exact-view queries
/// sampled in every later view separately. The model sees the full KG's
/// view sets at evaluation, so unseen view indexes reach the positional
/// encodings.
pub fn unobserved_view_protocol(
    kg: &MultiViewKg,
    pivot: ViewId,
    config: &TrainingConfig,
    queries_per_view: usize,
    mut trace: Option<&mut Vec<TraceEvent>>,
) -> Result<(TrainOutcome, Vec<ViewReport>)> {
    let train_kg = pivot_split(kg, pivot)?;
    let outcome = train(&train_kg, config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x0b5e);
    let per_tag = queries_per_view.div_ceil(StructureTag::TRAINING.len()).max(1);
    let mut reports = Vec::new();
    for v in pivot.0..kg.num_views() {
        let view = ViewId(v);
        let mut queries = Vec::new();
        for tag in StructureTag::TRAINING {
            for _ in 0..per_tag {
                match instantiate_in_view(kg, tag, view, &mut rng) {
                    Ok(q) => queries.push(EvalQuery::all(q)),
                    Err(Error::SamplingFailed { .. }) => break,
                    Err(e) => return Err(e),
                }
            }
        }
        if queries.is_empty() {
            return Err(Error::SamplingFailed {
                template: format!("any/view {view}"),
                attempts: crate::query::MAX_ATTEMPTS,
            });
        }
        let report = evaluate(
            &outcome.model,
            kg,
            &queries,
            &EvalOptions::default(),
            trace.as_deref_mut(),
        )?;
        reports.push(ViewReport {
            view,
            label: kg.views().label(v).unwrap_or_default().to_owned(),
            distance: v - pivot.0,
            report,
        });
    }
    Ok((outcome, reports))
}

/// The KG a view-agnostic model trains on: all views merged into one.
pub fn view_agnostic_kg(kg: &MultiViewKg) -> MultiViewKg {
    kg.collapse_views()
}

/// Evaluation queries for a view-agnostic model: constraints dropped,
/// answers and targets kept from the multi-view ground truth.
pub fn view_agnostic_queries(queries: &[EvalQuery]) -> Vec<EvalQuery> {
    queries
        .iter()
        .map(|q| EvalQuery {
            query: q.query.with_wildcards(),
            targets: q.targets.clone().or_else(|| q.query.answers.clone()),
        })
        .collect()
}

/// Trains a view-agnostic model on `kg` and scores `queries`, whose answers
/// come from the multi-view KG.
pub fn evaluate_view_agnostic(
    kg: &MultiViewKg,
    config: &TrainingConfig,
    queries: &[EvalQuery],
    options: &EvalOptions,
) -> Result<(TrainOutcome, MetricsReport)> {
    let flat = view_agnostic_kg(kg);
    let outcome = train(&flat, config)?;
    let report = evaluate(&outcome.model, &flat, &view_agnostic_queries(queries), options, None)?;
    Ok((outcome, report))
}

/// Queries of `tags` under one policy, answers from `kg`.
pub fn eval_queries<R: Rng + ?Sized>(
    kg: &MultiViewKg,
    tags: &[StructureTag],
    policy: ConstraintPolicy,
    per_tag: usize,
    rng: &mut R,
) -> Result<Vec<EvalQuery>> {
    let mut out = Vec::new();
    for &tag in tags {
        out.extend(
            sample_queries(kg, tag, policy, per_tag, rng)?
                .into_iter()
                .map(EvalQuery::all),
        );
    }
    Ok(out)
}

/// Queries only, for callers that keep the answers elsewhere.
pub fn plain(queries: &[EvalQuery]) -> Vec<Query> {
    queries.iter().map(|q| q.query.clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::generate_toy_kg;
    use crate::model::ModelConfig;

    fn tiny() -> TrainingConfig {
        TrainingConfig {
            model: ModelConfig {
                d: 8,
                ..ModelConfig::default()
            },
            steps: 10,
            batch_size: 8,
            k: 4,
            eval_interval: 10,
            pool_per_structure: 10,
            monitor_per_structure: 2,
            ..TrainingConfig::default()
        }
    }

    #[test]
    fn pivot_split_keeps_earlier_views() {
        let kg = generate_toy_kg(30, 2, 4, 25, 0).unwrap();
        let split = pivot_split(&kg, ViewId(2)).unwrap();
        assert_eq!(split.num_views(), 4);
        assert_eq!(split.num_entities(), 30);
        assert!(split.facts().iter().all(|f| f.view.0 < 2));
        assert_eq!(split.num_facts(), 50);
        assert!(pivot_split(&kg, ViewId(0)).is_err());
        assert!(pivot_split(&kg, ViewId(4)).is_err());
    }

    #[test]
    fn last_pivot_gives_one_report_and_reads_unseen_encodings() {
        let kg = generate_toy_kg(30, 2, 4, 25, 0).unwrap();
        let mut trace = Vec::new();
        let (_, reports) =
            unobserved_view_protocol(&kg, ViewId(3), &tiny(), 8, Some(&mut trace)).unwrap();
        assert_eq!(reports.len(), 1);
        assert_eq!(reports[0].distance, 0);
        assert!(trace.iter().any(|t| t.pos_enc_views.contains(&ViewId(3))));
    }

    #[test]
    fn view_agnostic_queries_keep_ground_truth() {
        let kg = generate_toy_kg(30, 2, 3, 25, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let qs = eval_queries(&kg, &[StructureTag::P2], ConstraintPolicy::Equal, 5, &mut rng)
            .unwrap();
        for (a, b) in qs.iter().zip(view_agnostic_queries(&qs)) {
            assert_eq!(b.targets.as_ref(), a.query.answers.as_ref());
            assert!(b.query.edges.iter().all(|e| e.constraint == crate::query::ViewConstraint::Wildcard));
        }
    }

    #[test]
    fn held_out_targets_are_unreachable_in_training_kg() {
        let kg = generate_toy_kg(40, 3, 3, 60, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (train_kg, full) = crate::query::holdout_split(&kg, 0.5, &mut rng).unwrap();
        let qs = held_out_queries(
            &train_kg,
            &full,
            &[StructureTag::P1, StructureTag::I2],
            &[ConstraintPolicy::Wildcard],
            20,
            &mut rng,
        )
        .unwrap();
        assert!(!qs.is_empty());
        for q in qs {
            let reachable = answer_query(&train_kg, &q.query).unwrap();
            assert!(q.targets.unwrap().is_disjoint(&reachable));
        }
    }
}
