//! The full model: initial encodings, attention encoder and dual decoder
//! over one KG vocabulary.

use std::collections::BTreeMap;
use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use ndarray::Array1;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{
    batch_key, score_all, CandidateScores, Decoder, DecoderConfig, DecoderInputs, Geometry,
    RelationState, StateVars, TraceEvent, ViewState,
};
use crate::embedding::{EmbeddingParams, EncodingVars, ViewInputs};
use crate::encoder::{AttentionGraph, AttentionMode, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::kg::{EntityId, MultiViewKg};
use crate::nn::{softplus, Mat, ParamStore, Tape, Var};
use crate::query::{Query, TrainingSample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    #[default]
    None,
    /// Zero encoder layers: `H = Z`.
    NoEncoder,
    /// Decoders start from `H` rows alone.
    NoResidual,
    /// Relation decoder only; `Sim = Sim_R`.
    NoViewDecoder,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::None,
        Ablation::NoEncoder,
        Ablation::NoResidual,
        Ablation::NoViewDecoder,
    ];
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            Ablation::None => "none",
            Ablation::NoEncoder => "no-encoder",
            Ablation::NoResidual => "no-residual",
            Ablation::NoViewDecoder => "no-view-decoder",
        })
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub geometry: Geometry,
    pub gamma: f64,
    pub alpha: f64,
    pub ablation: Ablation,
    pub post_hoc_mask: bool,
    pub attention: AttentionMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 64,
            layers: 2,
            heads: 2,
            geometry: Geometry::Vector,
            gamma: 12.0,
            alpha: 0.2,
            ablation: Ablation::None,
            post_hoc_mask: false,
            attention: AttentionMode::Auto,
        }
    }
}

impl ModelConfig {
    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            layers: if self.ablation == Ablation::NoEncoder {
                0
            } else {
                self.layers
            },
            heads: self.heads,
            post_hoc_mask: self.post_hoc_mask,
            layer_residual: true,
            attention: self.attention,
        }
    }

    pub fn decoder_config(&self) -> DecoderConfig {
        DecoderConfig {
            geometry: self.geometry,
            gamma: self.gamma,
            alpha: self.alpha,
            residual: self.ablation != Ablation::NoResidual,
            view_decoder: self.ablation != Ablation::NoViewDecoder,
        }
    }
}

/// Vocabulary sizes a model is built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KgSizes {
    pub entities: usize,
    pub relations: usize,
    pub views: usize,
}

impl KgSizes {
    pub fn of(kg: &MultiViewKg) -> Self {
        Self {
            entities: kg.num_entities(),
            relations: kg.num_relations(),
            views: kg.num_views(),
        }
    }
}

/// Graph-dependent inputs: view sets and the attention mask.
#[derive(Debug, Clone)]
pub struct KgContext {
    pub views: ViewInputs,
    pub graph: AttentionGraph,
}

/// Tape handles of one model forward pass up to the decoder.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub encoding: EncodingVars,
    pub inputs: DecoderInputs,
    pub points: Var,
}

/// Plain-matrix entity embeddings for inference.
#[derive(Debug, Clone)]
pub struct Embeddings {
    pub h: Mat,
    pub semantic: Mat,
    pub theta: Mat,
    pub pe_table: Mat,
    /// Relation-side candidate embeddings.
    pub points: Mat,
}

/// Decoded answer-node state of one query.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedQuery {
    pub relation: RelationState,
    /// Absent when the view decoder is disabled.
    pub view: Option<ViewState>,
}

/// One ranked candidate with its score breakdown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedAnswer {
    pub entity: EntityId,
    pub sim_r: f64,
    pub sim_theta: f64,
    pub sim: f64,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub sizes: KgSizes,
    pub seed: u64,
    pub store: ParamStore,
    pub embedding: EmbeddingParams,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl Model {
    pub fn new(config: ModelConfig, sizes: KgSizes, seed: u64) -> Result<Self> {
        if config.d == 0 || config.d % 2 != 0 {
            return Err(Error::Config(format!("d must be positive and even, got {}", config.d)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let embedding = EmbeddingParams::new(&mut store, sizes.entities, config.d, &mut rng);
        let encoder = Encoder::new(&mut store, config.d, config.encoder_config(), &mut rng)?;
        let decoder = Decoder::new(
            &mut store,
            config.d,
            sizes.relations,
            sizes.views,
            config.decoder_config(),
            &mut rng,
        )?;
        Ok(Self {
            config,
            sizes,
            seed,
            store,
            embedding,
            encoder,
            decoder,
        })
    }

    pub fn for_kg(config: ModelConfig, kg: &MultiViewKg, seed: u64) -> Result<Self> {
        Self::new(config, KgSizes::of(kg), seed)
    }

    /// Inputs derived from `kg`, which must share the model's vocabulary.
    pub fn context(&self, kg: &MultiViewKg) -> Result<KgContext> {
        let sizes = KgSizes::of(kg);
        if sizes != self.sizes {
            return Err(Error::Checkpoint(format!(
                "model was built for {} entities, {} relations, {} views; KG has {}, {}, {}",
                self.sizes.entities,
                self.sizes.relations,
                self.sizes.views,
                sizes.entities,
                sizes.relations,
                sizes.views
            )));
        }
        Ok(KgContext {
            views: ViewInputs::new(kg, self.config.d)?,
            graph: AttentionGraph::from_kg(kg),
        })
    }

    pub fn forward(&self, tape: &mut Tape, ctx: &KgContext) -> ForwardVars {
        let encoding = self.embedding.forward(tape, &self.store, &ctx.views);
        let h = self.encoder.forward(tape, &self.store, encoding.z, &ctx.graph);
        let inputs = DecoderInputs {
            h,
            semantic: encoding.semantic,
            theta: encoding.theta,
            pe_table: encoding.pe_table,
        };
        let points = self.decoder.candidate_points(tape, &inputs);
        ForwardVars {
            encoding,
            inputs,
            points,
        }
    }

    pub fn embeddings(&self, ctx: &KgContext) -> Embeddings {
        let mut tape = Tape::new();
        let fv = self.forward(&mut tape, ctx);
        Embeddings {
            h: tape.value(fv.inputs.h).clone(),
            semantic: tape.value(fv.inputs.semantic).clone(),
            theta: tape.value(fv.inputs.theta).clone(),
            pe_table: tape.value(fv.inputs.pe_table).clone(),
            points: tape.value(fv.points).clone(),
        }
    }

    /// Decodes queries in batches of equal [`batch_key`]; results follow
    /// input order.
    pub fn decode_queries(
        &self,
        emb: &Embeddings,
        queries: &[Query],
        mut trace: Option<&mut Vec<TraceEvent>>,
    ) -> Result<Vec<DecodedQuery>> {
        for q in queries {
            self.check_query(q)?;
        }
        let mut tape = Tape::new();
        let inputs = DecoderInputs {
            h: tape.constant(emb.h.clone()),
            semantic: tape.constant(emb.semantic.clone()),
            theta: tape.constant(emb.theta.clone()),
            pe_table: tape.constant(emb.pe_table.clone()),
        };
        let mut out: Vec<Option<DecodedQuery>> = vec![None; queries.len()];
        for members in group_by_key(queries.iter()) {
            let batch: Vec<&Query> = members.iter().map(|&i| &queries[i]).collect();
            let state =
                self.decoder
                    .decode_batch(&mut tape, &self.store, &inputs, &batch, trace.as_deref_mut())?;
            for (row, &i) in members.iter().enumerate() {
                let take = |v: Var| tape.value(v).row(row).to_owned();
                out[i] = Some(DecodedQuery {
                    relation: RelationState {
                        center: take(state.center),
                        offset: state.offset.map(take),
                    },
                    view: state.view.map(|w| ViewState { w: take(w) }),
                });
            }
        }
        Ok(out.into_iter().map(|d| d.expect("every query decoded")).collect())
    }

    fn check_query(&self, q: &Query) -> Result<()> {
        let bad_entity = q.anchors.iter().find(|a| a.0 >= self.sizes.entities);
        if let Some(a) = bad_entity {
            return Err(Error::UnknownId { kind: "entity", id: a.0 });
        }
        for e in &q.edges {
            if e.relation.0 >= self.sizes.relations {
                return Err(Error::UnknownId {
                    kind: "relation",
                    id: e.relation.0,
                });
            }
            if let crate::query::ViewConstraint::Exact { view } = e.constraint {
                if view.0 >= self.sizes.views {
                    return Err(Error::UnknownId { kind: "view", id: view.0 });
                }
            }
        }
        q.topo_order()?;
        q.answer_node()?;
        Ok(())
    }

    /// Final relation and view states of `q`.
    pub fn decode_query(&self, ctx: &KgContext, q: &Query) -> Result<DecodedQuery> {
        let emb = self.embeddings(ctx);
        Ok(self
            .decode_queries(&emb, std::slice::from_ref(q), None)?
            .remove(0))
    }

    /// Relation, view and joint scores of every entity.
    pub fn score_candidates(&self, emb: &Embeddings, decoded: &DecodedQuery) -> CandidateScores {
        score_all(
            &self.decoder,
            decoded.relation.center.view(),
            decoded.relation.offset.as_ref().map(|o| o.view()),
            decoded.view.as_ref().map(|v| v.w.view()),
            &emb.points,
            &emb.theta,
        )
    }

    /// Top `n` entities by joint score; `n` is clamped to `|V|`.
    pub fn rank_answers(&self, ctx: &KgContext, q: &Query, n: usize) -> Result<Vec<RankedAnswer>> {
        if n == 0 {
            return Err(Error::InvalidArgument("n must be at least 1".into()));
        }
        let emb = self.embeddings(ctx);
        let decoded = self.decode_queries(&emb, std::slice::from_ref(q), None)?.remove(0);
        Ok(rank_scores(&self.score_candidates(&emb, &decoded), n))
    }

    /// Mean loss over `samples`, each scored on its positive followed by
    /// its negatives.
    pub fn batch_loss(&self, tape: &mut Tape, fv: &ForwardVars, samples: &[TrainingSample]) -> Result<Var> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument("empty training batch".into()));
        }
        let mut parts = Vec::new();
        for members in group_by_key(samples.iter().map(|s| &s.query)) {
            let batch: Vec<&Query> = members.iter().map(|&i| &samples[i].query).collect();
            for q in &batch {
                self.check_query(q)?;
            }
            let state = self
                .decoder
                .decode_batch(tape, &self.store, &fv.inputs, &batch, None)?;
            let candidates: Vec<Vec<usize>> = members
                .iter()
                .map(|&i| {
                    let s = &samples[i];
                    std::iter::once(s.positive.0)
                        .chain(s.negatives.iter().map(|n| n.0))
                        .collect()
                })
                .collect();
            let scores = self
                .decoder
                .score_batch(tape, fv.points, fv.inputs.theta, state, &candidates);
            parts.push(loss_vars(tape, scores.sim, &candidates)?);
        }
        let mut total = parts[0];
        for &p in &parts[1..] {
            total = tape.add(total, p);
        }
        Ok(tape.scale(total, 1.0 / samples.len() as f64))
    }

    /// Decoder state of a single query on a caller-owned tape.
    pub fn decode_vars(&self, tape: &mut Tape, fv: &ForwardVars, q: &Query) -> Result<StateVars> {
        self.check_query(q)?;
        self.decoder.decode_batch(tape, &self.store, &fv.inputs, &[q], None)
    }
}

/// Indexes of `queries` grouped by batch key, groups in first-seen order.
fn group_by_key<'a>(queries: impl Iterator<Item = &'a Query>) -> Vec<Vec<usize>> {
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut index = BTreeMap::new();
    for (i, q) in queries.enumerate() {
        let slot = *index.entry(batch_key(q)).or_insert_with(|| {
            groups.push(Vec::new());
            groups.len() - 1
        });
        groups[slot].push(i);
    }
    groups
}

/// Sorted by joint score, ties broken by entity id.
pub fn rank_scores(scores: &CandidateScores, n: usize) -> Vec<RankedAnswer> {
    let mut order: Vec<usize> = (0..scores.sim.len()).collect();
    order.sort_by(|&a, &b| scores.sim[b].total_cmp(&scores.sim[a]).then(a.cmp(&b)));
    order
        .into_iter()
        .take(n)
        .map(|i| RankedAnswer {
            entity: EntityId(i),
            sim_r: scores.sim_r[i],
            sim_theta: scores.sim_theta[i],
            sim: scores.sim[i],
        })
        .collect()
}

/// `softplus(-Sim(a)) + (1/k) sum_i softplus(Sim(ā_i))`, i.e.
/// `-log σ(Sim(a)) - (1/k) sum_i log σ(-Sim(ā_i))`.
pub fn loss(positive: f64, negatives: &[f64]) -> Result<f64> {
    if negatives.is_empty() {
        return Err(Error::InvalidArgument("loss needs at least one negative".into()));
    }
    let neg: f64 = negatives.iter().map(|&s| softplus(s)).sum::<f64>() / negatives.len() as f64;
    Ok(softplus(-positive) + neg)
}

/// Summed per-sample loss for `sim` laid out as `[pos, neg_1..neg_k]` per
/// sample.
pub fn loss_vars(tape: &mut Tape, sim: Var, candidates: &[Vec<usize>]) -> Result<Var> {
    let mut signs = Vec::new();
    let mut weights = Vec::new();
    for c in candidates {
        let k = c.len().checked_sub(1).filter(|&k| k > 0).ok_or_else(|| {
            Error::InvalidArgument("each sample needs a positive and a negative".into())
        })?;
        signs.push(-1.0);
        weights.push(1.0);
        signs.extend(std::iter::repeat(1.0).take(k));
        weights.extend(std::iter::repeat(1.0 / k as f64).take(k));
    }
    let signed = tape.scale_rows(sim, Rc::new(signs));
    let sp = tape.softplus(signed);
    let weighted = tape.scale_rows(sp, Rc::new(weights));
    Ok(tape.sum_all(weighted))
}

/// Mean of `h_Θ ⊙ θ` for a single view, one score per view.
pub fn view_scores(model: &Model, emb: &Embeddings, view_state: &Array1<f64>) -> Vec<f64> {
    let mut tape = Tape::new();
    let pe = tape.constant(emb.pe_table.clone());
    let eye = tape.constant(Mat::eye(emb.pe_table.nrows()));
    let theta = model
        .embedding
        .set_encoder
        .encode_counts(&mut tape, &model.store, pe, eye);
    let d = view_state.len() as f64;
    tape.value(theta)
        .rows()
        .into_iter()
        .map(|t| t.dot(view_state) / d)
        .collect()
}
