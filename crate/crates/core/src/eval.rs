//! Ranking metrics over filtered ranks.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::decoder::TraceEvent;
use crate::error::{Error, Result};
use crate::kg::{EntityId, MultiViewKg, ViewId};
use crate::model::{view_scores, Model};
use crate::oracle::Oracle;
use crate::query::Query;

pub const DEFAULT_KS: [usize; 4] = [1, 3, 5, 10];

pub fn mrr(ranks: &[usize]) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::InvalidArgument("MRR of an empty rank list".into()));
    }
    if ranks.contains(&0) {
        return Err(Error::InvalidArgument("ranks start at 1".into()));
    }
    Ok(ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / ranks.len() as f64)
}

pub fn hit_at_k(ranks: &[usize], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidArgument("HIT@K needs K >= 1".into()));
    }
    if ranks.is_empty() {
        return Err(Error::InvalidArgument("HIT@K of an empty rank list".into()));
    }
    Ok(ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64)
}

/// Rank of `answer` among all entities after removing the other
/// ground-truth answers. Non-answers tied with the answer rank above it.
pub fn filtered_rank(scores: &[f64], answer: EntityId, answers: &BTreeSet<EntityId>) -> usize {
    let s = scores[answer.0];
    let competitors = scores
        .iter()
        .enumerate()
        .filter(|&(e, _)| e != answer.0 && !answers.contains(&EntityId(e)));
    if s.is_nan() {
        return 1 + competitors.count();
    }
    1 + competitors.filter(|&(_, &x)| x >= s).count()
}

/// A query to rank, with the answers whose ranks are measured. Filtering
/// always uses every answer in `query.answers`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalQuery {
    pub query: Query,
    /// Defaults to all answers.
    pub targets: Option<BTreeSet<EntityId>>,
}

impl EvalQuery {
    pub fn all(query: Query) -> Self {
        Self {
            query,
            targets: None,
        }
    }

    fn targets(&self) -> Result<&BTreeSet<EntityId>> {
        match &self.targets {
            Some(t) => Ok(t),
            None => self
                .query
                .answers
                .as_ref()
                .ok_or_else(|| Error::InvalidQuery("evaluation query without answers".into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct StructureMetrics {
    pub queries: usize,
    pub mrr: f64,
    pub hit_at_k: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct MetricsReport {
    pub step: usize,
    pub queries: usize,
    pub mrr: f64,
    pub hit_at_k: BTreeMap<usize, f64>,
    pub view_k: usize,
    /// Absent without a view decoder.
    pub view_hit_at_k: Option<f64>,
    pub per_structure: BTreeMap<String, StructureMetrics>,
    /// Mean training loss over the window ending at `step`.
    pub loss: Option<f64>,
}

impl MetricsReport {
    pub fn hit(&self, k: usize) -> f64 {
        self.hit_at_k.get(&k).copied().unwrap_or(f64::NAN)
    }

    /// `{tag: {"mrr": .., "hit@5": ..}, .., "avg": {..}}`.
    pub fn table(&self) -> serde_json::Value {
        let mut out = serde_json::Map::new();
        for (tag, m) in &self.per_structure {
            out.insert(
                tag.clone(),
                serde_json::json!({"mrr": m.mrr, "hit@5": m.hit_at_k.get(&5)}),
            );
        }
        out.insert(
            "avg".into(),
            serde_json::json!({"mrr": self.mrr, "hit@5": self.hit_at_k.get(&5), "queries": self.queries}),
        );
        serde_json::Value::Object(out)
    }
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub ks: Vec<usize>,
    pub view_k: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            ks: DEFAULT_KS.to_vec(),
            view_k: 5,
        }
    }
}

#[derive(Default)]
struct Accumulator {
    queries: usize,
    rr: f64,
    hits: BTreeMap<usize, f64>,
}

impl Accumulator {
    fn add(&mut self, ranks: &[usize], ks: &[usize]) -> Result<()> {
        self.queries += 1;
        self.rr += mrr(ranks)?;
        for &k in ks {
            *self.hits.entry(k).or_default() += hit_at_k(ranks, k)?;
        }
        Ok(())
    }

    fn finish(&self) -> StructureMetrics {
        let n = self.queries.max(1) as f64;
        StructureMetrics {
            queries: self.queries,
            mrr: self.rr / n,
            hit_at_k: self.hits.iter().map(|(&k, &h)| (k, h / n)).collect(),
        }
    }
}

/// Ranks every target answer against all entities of `kg_full` and
/// averages per query, then over queries.
pub fn evaluate(
    model: &Model,
    kg_full: &MultiViewKg,
    queries: &[EvalQuery],
    options: &EvalOptions,
    trace: Option<&mut Vec<TraceEvent>>,
) -> Result<MetricsReport> {
    let queries: Vec<&EvalQuery> = queries
        .iter()
        .filter(|q| q.targets().map_or(true, |t| !t.is_empty()))
        .collect();
    if queries.is_empty() {
        return Err(Error::InvalidArgument("no evaluation queries with targets".into()));
    }
    let ctx = model.context(kg_full)?;
    let emb = model.embeddings(&ctx);
    let plain: Vec<Query> = queries.iter().map(|q| q.query.clone()).collect();
    let decoded = model.decode_queries(&emb, &plain, trace)?;
    let oracle = Oracle::new(kg_full);

    let mut overall = Accumulator::default();
    let mut by_tag: BTreeMap<String, Accumulator> = BTreeMap::new();
    let mut view_hits = 0.0;
    for (eq, dec) in queries.iter().zip(&decoded) {
        let answers = eq
            .query
            .answers
            .as_ref()
            .ok_or_else(|| Error::InvalidQuery("evaluation query without answers".into()))?;
        let scores = model.score_candidates(&emb, dec);
        let ranks: Vec<usize> = eq
            .targets()?
            .iter()
            .map(|&a| filtered_rank(&scores.sim, a, answers))
            .collect();
        overall.add(&ranks, &options.ks)?;
        by_tag
            .entry(eq.query.structure.to_string())
            .or_default()
            .add(&ranks, &options.ks)?;

        if let Some(view) = &dec.view {
            let per_view = view_scores(model, &emb, &view.w);
            let top = top_views(&per_view, options.view_k);
            let truth = oracle.answer_views(&eq.query)?;
            let targets = eq.targets()?;
            let hits = targets
                .iter()
                .filter(|a| {
                    truth
                        .get(a)
                        .is_some_and(|vs| top.iter().any(|v| vs.contains(v)))
                })
                .count();
            view_hits += hits as f64 / targets.len() as f64;
        }
    }
    let summary = overall.finish();
    Ok(MetricsReport {
        step: 0,
        queries: summary.queries,
        mrr: summary.mrr,
        hit_at_k: summary.hit_at_k,
        view_k: options.view_k,
        view_hit_at_k: model
            .decoder
            .config
            .view_decoder
            .then(|| view_hits / summary.queries as f64),
        per_structure: by_tag.iter().map(|(t, a)| (t.clone(), a.finish())).collect(),
        loss: None,
    })
}

fn top_views(scores: &[f64], k: usize) -> Vec<ViewId> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.into_iter().take(k).map(ViewId).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mrr_examples() {
        assert_eq!(mrr(&[1]).unwrap(), 1.0);
        assert!((mrr(&[1, 2, 4]).unwrap() - 7.0 / 12.0).abs() < 1e-15);
        assert!(mrr(&[]).is_err());
        assert!(mrr(&[0, 1]).is_err());
    }

    #[test]
    fn hit_examples() {
        assert_eq!(hit_at_k(&[6], 5).unwrap(), 0.0);
        assert_eq!(hit_at_k(&[1, 1, 1], 3).unwrap(), 1.0);
        assert!(hit_at_k(&[1], 0).is_err());
    }

    #[test]
    fn filtered_rank_skips_other_answers_and_is_pessimistic() {
        let scores = [0.9, 0.8, 0.5, 0.5, 0.1];
        let answers = BTreeSet::from([EntityId(0), EntityId(2)]);
        assert_eq!(filtered_rank(&scores, EntityId(2), &answers), 3);
        assert_eq!(filtered_rank(&scores, EntityId(0), &answers), 1);
        let nan = [f64::NAN, 0.0, 0.0];
        assert_eq!(filtered_rank(&nan, EntityId(0), &BTreeSet::from([EntityId(0)])), 3);
    }
}
