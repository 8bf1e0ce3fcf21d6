//! Parallel relation and view decoders joined by a merger.
//!
//! The relation side carries a point (vector geometry) or a box with a
//! non-negative offset; the view side carries one vector. Queries with the
//! same shape and constraint kinds are decoded together, one row per query.

pub mod score;

use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use ndarray::Array1;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::pos_enc;
use crate::error::{Error, Result};
use crate::kg::{RelationId, ViewId};
use crate::nn::{uniform, xavier, Mat, ParamId, ParamStore, Tape, Var};
use crate::query::{Query, QueryEdge, ViewConstraint};

pub use score::{
    relation_distance, score_all, score_relation, score_view, CandidateScores, ScoreVars,
};

/// Largest equal-match group size with its own parameters.
pub const MAX_EQUAL_ARITY: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Geometry {
    #[default]
    Vector,
    Box,
}

impl fmt::Display for Geometry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            Geometry::Vector => "vector",
            Geometry::Box => "box",
        })
    }
}

impl FromStr for Geometry {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vector" => Ok(Geometry::Vector),
            "box" => Ok(Geometry::Box),
            other => Err(Error::Config(format!("unknown geometry {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub geometry: Geometry,
    /// Margin in `Sim_R = gamma - Dist`.
    pub gamma: f64,
    /// Weight of the inside-box distance.
    pub alpha: f64,
    /// Add the semantic and view-set encodings to the encoder output for
    /// anchors and candidates.
    pub residual: bool,
    /// Run the view decoder and multiply its score in.
    pub view_decoder: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            geometry: Geometry::Vector,
            gamma: 12.0,
            alpha: 0.2,
            residual: true,
            view_decoder: true,
        }
    }
}

/// `relu(x W1 + b1) W2 + b2`.
#[derive(Debug, Clone, Copy)]
pub struct Mlp {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl Mlp {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, input: usize, d: usize, rng: &mut R) -> Self {
        Self {
            w1: store.add(format!("{name}.w1"), xavier(input, d, rng)),
            b1: store.add(format!("{name}.b1"), Mat::zeros((1, d))),
            w2: store.add(format!("{name}.w2"), xavier(d, d, rng)),
            b2: store.add(format!("{name}.b2"), Mat::zeros((1, d))),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let (w1, b1) = (tape.param(store, self.w1), tape.param(store, self.b1));
        let (w2, b2) = (tape.param(store, self.w2), tape.param(store, self.b2));
        let h = tape.matmul(x, w1);
        let h = tape.add_row(h, b1);
        let h = tape.relu(h);
        let y = tape.matmul(h, w2);
        tape.add_row(y, b2)
    }

    pub fn params(&self) -> [ParamId; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }
}

/// `w' = w W + PosEnc(view) U + b`.
#[derive(Debug, Clone, Copy)]
pub struct ExactViewParams {
    pub w: ParamId,
    pub u: ParamId,
    pub b: ParamId,
}

/// `w' = w W + b`, shared by every equal-match group of one size.
#[derive(Debug, Clone, Copy)]
pub struct EqualViewParams {
    pub w: ParamId,
    pub b: ParamId,
}

/// The view operator applied on one query edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ViewOp {
    Exact(ViewId),
    Wildcard,
    Equal { arity: usize },
}

impl ViewOp {
    pub fn of(q: &Query, edge: &QueryEdge) -> Self {
        match edge.constraint {
            ViewConstraint::Exact { view } => ViewOp::Exact(view),
            ViewConstraint::Wildcard => ViewOp::Wildcard,
            ViewConstraint::Equal { group } => ViewOp::Equal {
                arity: q.group_arity(group),
            },
        }
    }

    /// Operator identity with the concrete view erased.
    fn dispatch_key(self) -> (u8, usize) {
        match self {
            ViewOp::Exact(_) => (0, 0),
            ViewOp::Wildcard => (1, 0),
            ViewOp::Equal { arity } => (2, arity),
        }
    }
}

impl fmt::Display for ViewOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ViewOp::Exact(_) => f.pad("exact"),
            ViewOp::Wildcard => f.pad("wildcard"),
            ViewOp::Equal { arity } => write!(f, "equal[arity={arity}]"),
        }
    }
}

/// Queries decode together iff their keys match.
pub type BatchKey = ((usize, Vec<(usize, usize)>), Vec<(u8, usize)>);

pub fn batch_key(q: &Query) -> BatchKey {
    let ops = q
        .edges
        .iter()
        .map(|e| ViewOp::of(q, e).dispatch_key())
        .collect();
    (q.shape_key(), ops)
}

/// One dispatched edge of a decoded batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceEvent {
    pub edge: usize,
    pub view_op: String,
    pub view_params: Vec<ParamId>,
    /// Views whose positional encodings the operator read, one per query.
    pub pos_enc_views: Vec<ViewId>,
}

/// Per-query decoder state on a tape, one row per query.
#[derive(Debug, Clone, Copy)]
pub struct StateVars {
    pub center: Var,
    pub offset: Option<Var>,
    pub view: Option<Var>,
}

/// Entity-level inputs to the decoder.
#[derive(Debug, Clone, Copy)]
pub struct DecoderInputs {
    /// Encoder output `H`.
    pub h: Var,
    pub semantic: Var,
    pub theta: Var,
    /// Positional encodings of all views.
    pub pe_table: Var,
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub config: DecoderConfig,
    pub d: usize,
    pub num_relations: usize,
    pub num_views: usize,
    pub translation: ParamId,
    pub offset_delta: Option<ParamId>,
    pub relation_attention: Mlp,
    pub offset_gate: Option<Mlp>,
    pub view_exact: ExactViewParams,
    pub view_equal: Vec<EqualViewParams>,
    pub view_attention: Mlp,
    pub merger_w: ParamId,
    pub merger_b: ParamId,
}

impl Decoder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        d: usize,
        num_relations: usize,
        num_views: usize,
        config: DecoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if !(config.gamma > 0.0) || !(0.0..=1.0).contains(&config.alpha) {
            return Err(Error::Config(format!(
                "need gamma > 0 and 0 <= alpha <= 1, got {} and {}",
                config.gamma, config.alpha
            )));
        }
        let bound = (6.0 / d as f64).sqrt();
        let is_box = config.geometry == Geometry::Box;
        let translation = store.add(
            "decoder.relation.translation",
            uniform(num_relations, d, bound, rng),
        );
        let offset_delta = is_box.then(|| {
            store.add(
                "decoder.relation.offset",
                uniform(num_relations, d, bound, rng).mapv(f64::abs),
            )
        });
        let attention_input = if is_box { 2 * d } else { d };
        let relation_attention =
            Mlp::new(store, "decoder.relation.attention", attention_input, d, rng);
        let offset_gate = is_box.then(|| Mlp::new(store, "decoder.relation.gate", d, d, rng));
        let view_exact = ExactViewParams {
            w: store.add("decoder.view.exact.w", xavier(d, d, rng)),
            u: store.add("decoder.view.exact.u", xavier(d, d, rng)),
            b: store.add("decoder.view.exact.b", Mat::zeros((1, d))),
        };
        let view_equal = (1..=MAX_EQUAL_ARITY)
            .map(|a| EqualViewParams {
                w: store.add(format!("decoder.view.equal{a}.w"), xavier(d, d, rng)),
                b: store.add(format!("decoder.view.equal{a}.b"), Mat::zeros((1, d))),
            })
            .collect();
        let view_attention = Mlp::new(store, "decoder.view.attention", d, d, rng);
        let merger_w = store.add("decoder.merger.w", xavier(2 * d, d, rng) * 0.1);
        let merger_b = store.add("decoder.merger.b", Mat::zeros((1, d)));
        Ok(Self {
            config,
            d,
            num_relations,
            num_views,
            translation,
            offset_delta,
            relation_attention,
            offset_gate,
            view_exact,
            view_equal,
            view_attention,
            merger_w,
            merger_b,
        })
    }

    fn is_box(&self) -> bool {
        self.config.geometry == Geometry::Box
    }

    /// Relation-side embeddings of all entities.
    pub fn candidate_points(&self, tape: &mut Tape, inputs: &DecoderInputs) -> Var {
        if self.config.residual {
            tape.add(inputs.h, inputs.semantic)
        } else {
            inputs.h
        }
    }

    pub fn anchor_states(&self, tape: &mut Tape, inputs: &DecoderInputs, anchors: Rc<Vec<usize>>) -> StateVars {
        let h = tape.gather(inputs.h, anchors.clone());
        let center = if self.config.residual {
            let e = tape.gather(inputs.semantic, anchors.clone());
            tape.add(h, e)
        } else {
            h
        };
        let offset = self
            .is_box()
            .then(|| tape.constant(Mat::zeros((anchors.len(), self.d))));
        let view = self.config.view_decoder.then(|| {
            if self.config.residual {
                let theta = tape.gather(inputs.theta, anchors.clone());
                tape.add(h, theta)
            } else {
                h
            }
        });
        StateVars {
            center,
            offset,
            view,
        }
    }

    /// `c' = c + t_r`; boxes also get `o' = relu(o + delta_r)`.
    pub fn project_relation(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        center: Var,
        offset: Option<Var>,
        relations: Rc<Vec<usize>>,
    ) -> (Var, Option<Var>) {
        let table = tape.param(store, self.translation);
        let t = tape.gather(table, relations.clone());
        let center = tape.add(center, t);
        let offset = match (offset, self.offset_delta) {
            (Some(o), Some(delta)) => {
                let table = tape.param(store, delta);
                let dl = tape.gather(table, relations);
                let sum = tape.add(o, dl);
                Some(tape.relu(sum))
            }
            _ => None,
        };
        (center, offset)
    }

    /// Parameters used by a view operator.
    pub fn view_params(&self, op: ViewOp) -> Result<Vec<ParamId>> {
        Ok(match op {
            ViewOp::Exact(_) => vec![self.view_exact.w, self.view_exact.u, self.view_exact.b],
            ViewOp::Wildcard => Vec::new(),
            ViewOp::Equal { arity } => {
                let p = self.equal_params(arity)?;
                vec![p.w, p.b]
            }
        })
    }

    fn equal_params(&self, arity: usize) -> Result<EqualViewParams> {
        arity
            .checked_sub(1)
            .and_then(|i| self.view_equal.get(i))
            .copied()
            .ok_or_else(|| {
                Error::InvalidQuery(format!(
                    "equal-match groups of size {arity} are unsupported (max {MAX_EQUAL_ARITY})"
                ))
            })
    }

    /// Applies one view operator kind to every row; `views` lists the
    /// per-row view of exact-match edges.
    pub fn project_view(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        w: Var,
        op: ViewOp,
        views: &[ViewId],
        pe_table: Var,
    ) -> Result<Var> {
        match op {
            ViewOp::Wildcard => Ok(w),
            ViewOp::Exact(_) => {
                let p = self.view_exact;
                let rows = Rc::new(views.iter().map(|v| v.0).collect::<Vec<_>>());
                let pe = tape.gather(pe_table, rows);
                let (wm, um, b) = (
                    tape.param(store, p.w),
                    tape.param(store, p.u),
                    tape.param(store, p.b),
                );
                let x = tape.matmul(w, wm);
                let y = tape.matmul(pe, um);
                let s = tape.add(x, y);
                Ok(tape.add_row(s, b))
            }
            ViewOp::Equal { arity } => {
                let p = self.equal_params(arity)?;
                let (wm, b) = (tape.param(store, p.w), tape.param(store, p.b));
                let x = tape.matmul(w, wm);
                Ok(tape.add_row(x, b))
            }
        }
    }

    /// Attention-weighted centers; boxes shrink the smallest offset by a
    /// learned gate in `(0, 1)`.
    pub fn intersect_relation(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        centers: &[Var],
        offsets: &[Var],
    ) -> (Var, Option<Var>) {
        let logits: Vec<Var> = if self.is_box() {
            centers
                .iter()
                .zip(offsets)
                .map(|(&c, &o)| {
                    let x = tape.concat_cols(&[c, o]);
                    self.relation_attention.forward(tape, store, x)
                })
                .collect()
        } else {
            centers
                .iter()
                .map(|&c| self.relation_attention.forward(tape, store, c))
                .collect()
        };
        let center = tape.weighted_combine(&logits, centers);
        let offset = self.offset_gate.map(|gate| {
            let g = &gate;
            let (w1, b1) = (tape.param(store, g.w1), tape.param(store, g.b1));
            let hidden: Vec<Var> = offsets
                .iter()
                .map(|&o| {
                    let x = tape.matmul(o, w1);
                    let x = tape.add_row(x, b1);
                    tape.relu(x)
                })
                .collect();
            let pooled = tape.sum_across(&hidden);
            let pooled = tape.scale(pooled, 1.0 / offsets.len() as f64);
            let (w2, b2) = (tape.param(store, g.w2), tape.param(store, g.b2));
            let logit = tape.matmul(pooled, w2);
            let logit = tape.add_row(logit, b2);
            let gate = tape.sigmoid(logit);
            let smallest = tape.min_across(offsets);
            tape.mul(smallest, gate)
        });
        (center, offset)
    }

    pub fn intersect_view(&self, tape: &mut Tape, store: &ParamStore, views: &[Var]) -> Var {
        let logits: Vec<Var> = views
            .iter()
            .map(|&w| self.view_attention.forward(tape, store, w))
            .collect();
        tape.weighted_combine(&logits, views)
    }

    /// `m = [c ; w] M + b`, then `c += m` and `w += m`. Offsets pass through.
    /// Without a view decoder the view half of the input is zero.
    pub fn merge_vars(&self, tape: &mut Tape, store: &ParamStore, state: StateVars) -> StateVars {
        let w_in = match state.view {
            Some(w) => w,
            None => {
                let rows = tape.shape(state.center).0;
                tape.constant(Mat::zeros((rows, self.d)))
            }
        };
        let cat = tape.concat_cols(&[state.center, w_in]);
        let (mw, mb) = (tape.param(store, self.merger_w), tape.param(store, self.merger_b));
        let m = tape.matmul(cat, mw);
        let m = tape.add_row(m, mb);
        StateVars {
            center: tape.add(state.center, m),
            offset: state.offset,
            view: state.view.map(|w| tape.add(w, m)),
        }
    }

    /// Decodes queries sharing one [`batch_key`]; returns the answer-node
    /// state with one row per query.
    pub fn decode_batch(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        inputs: &DecoderInputs,
        queries: &[&Query],
        mut trace: Option<&mut Vec<TraceEvent>>,
    ) -> Result<StateVars> {
        let first = *queries
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty query batch".into()))?;
        let key = batch_key(first);
        if let Some(q) = queries.iter().find(|q| batch_key(q) != key) {
            return Err(Error::InvalidQuery(format!(
                "{} query cannot share a batch with {}",
                q.structure, first.structure
            )));
        }
        let order = first.topo_order()?;
        let sink = first.answer_node()?;
        let mut states: Vec<Option<StateVars>> = vec![None; first.num_nodes()];
        for node in order {
            if first.is_anchor(node) {
                let anchors = Rc::new(queries.iter().map(|q| q.anchors[node].0).collect());
                states[node] = Some(self.anchor_states(tape, inputs, anchors));
                continue;
            }
            let mut branches = Vec::new();
            for ei in first.incoming(node) {
                let source = states[first.edges[ei].source].expect("sources precede targets");
                let relations = Rc::new(queries.iter().map(|q| q.edges[ei].relation.0).collect());
                let (center, offset) =
                    self.project_relation(tape, store, source.center, source.offset, relations);
                let op = ViewOp::of(first, &first.edges[ei]);
                let views: Vec<ViewId> = queries
                    .iter()
                    .map(|q| match q.edges[ei].constraint {
                        ViewConstraint::Exact { view } => view,
                        _ => ViewId(0),
                    })
                    .collect();
                let view = match source.view {
                    Some(w) => Some(self.project_view(tape, store, w, op, &views, inputs.pe_table)?),
                    None => None,
                };
                if let Some(t) = trace.as_deref_mut() {
                    t.push(TraceEvent {
                        edge: ei,
                        view_op: op.to_string(),
                        view_params: if self.config.view_decoder {
                            self.view_params(op)?
                        } else {
                            Vec::new()
                        },
                        pos_enc_views: match op {
                            ViewOp::Exact(_) if source.view.is_some() => views,
                            _ => Vec::new(),
                        },
                    });
                }
                branches.push(StateVars {
                    center,
                    offset,
                    view,
                });
            }
            let joined = if branches.len() == 1 {
                branches[0]
            } else {
                let centers: Vec<Var> = branches.iter().map(|b| b.center).collect();
                let offsets: Vec<Var> = branches.iter().filter_map(|b| b.offset).collect();
                let (center, offset) = self.intersect_relation(tape, store, &centers, &offsets);
                let views: Vec<Var> = branches.iter().filter_map(|b| b.view).collect();
                let view = (!views.is_empty()).then(|| self.intersect_view(tape, store, &views));
                StateVars {
                    center,
                    offset,
                    view,
                }
            };
            states[node] = Some(self.merge_vars(tape, store, joined));
        }
        Ok(states[sink].expect("sink decoded"))
    }
}

/// Relation-side decoder state of one query.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationState {
    pub center: Array1<f64>,
    /// Present for box geometry.
    pub offset: Option<Array1<f64>>,
}

/// View-side decoder state of one query.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewState {
    pub w: Array1<f64>,
}

fn row(tape: &mut Tape, v: &Array1<f64>) -> Var {
    tape.constant(v.clone().insert_axis(ndarray::Axis(0)))
}

fn read(tape: &Tape, v: Var) -> Array1<f64> {
    tape.value(v).row(0).to_owned()
}

impl Decoder {
    fn check_relation_state(&self, s: &RelationState) -> Result<()> {
        let ok = s.center.len() == self.d
            && s.offset.as_ref().map(Array1::len) == self.is_box().then_some(self.d);
        if !ok {
            return Err(Error::Shape(format!(
                "relation state does not fit a {} decoder at d = {}",
                self.config.geometry, self.d
            )));
        }
        Ok(())
    }

    fn check_view_state(&self, s: &ViewState) -> Result<()> {
        if s.w.len() != self.d {
            return Err(Error::Shape(format!(
                "view state has dimension {}, expected {}",
                s.w.len(),
                self.d
            )));
        }
        Ok(())
    }

    pub fn relation_project(
        &self,
        store: &ParamStore,
        state: &RelationState,
        relation: RelationId,
    ) -> Result<RelationState> {
        self.check_relation_state(state)?;
        if relation.0 >= self.num_relations {
            return Err(Error::UnknownId {
                kind: "relation",
                id: relation.0,
            });
        }
        let mut tape = Tape::new();
        let c = row(&mut tape, &state.center);
        let o = state.offset.as_ref().map(|o| row(&mut tape, o));
        let (c, o) = self.project_relation(&mut tape, store, c, o, Rc::new(vec![relation.0]));
        Ok(RelationState {
            center: read(&tape, c),
            offset: o.map(|o| read(&tape, o)),
        })
    }

    pub fn relation_intersect(
        &self,
        store: &ParamStore,
        states: &[RelationState],
    ) -> Result<RelationState> {
        if states.len() < 2 {
            return Err(Error::InvalidArgument(
                "intersection needs at least two inputs".into(),
            ));
        }
        for s in states {
            self.check_relation_state(s)?;
        }
        let mut tape = Tape::new();
        let centers: Vec<Var> = states.iter().map(|s| row(&mut tape, &s.center)).collect();
        let offsets: Vec<Var> = states
            .iter()
            .filter_map(|s| s.offset.as_ref())
            .map(|o| row(&mut tape, o))
            .collect();
        let (c, o) = self.intersect_relation(&mut tape, store, &centers, &offsets);
        Ok(RelationState {
            center: read(&tape, c),
            offset: o.map(|o| read(&tape, o)),
        })
    }

    pub fn view_project(&self, store: &ParamStore, state: &ViewState, op: ViewOp) -> Result<ViewState> {
        self.check_view_state(state)?;
        let mut tape = Tape::new();
        let (views, pe) = match op {
            ViewOp::Exact(v) => {
                if v.0 >= self.num_views {
                    return Err(Error::UnknownId { kind: "view", id: v.0 });
                }
                let pe = pos_enc(v.0, self.d)?;
                (vec![ViewId(0)], row(&mut tape, &pe))
            }
            _ => (vec![ViewId(0)], tape.constant(Mat::zeros((1, self.d)))),
        };
        let w = row(&mut tape, &state.w);
        let out = self.project_view(&mut tape, store, w, op, &views, pe)?;
        Ok(ViewState { w: read(&tape, out) })
    }

    pub fn view_intersect(&self, store: &ParamStore, states: &[ViewState]) -> Result<ViewState> {
        if states.len() < 2 {
            return Err(Error::InvalidArgument(
                "intersection needs at least two inputs".into(),
            ));
        }
        for s in states {
            self.check_view_state(s)?;
        }
        let mut tape = Tape::new();
        let ws: Vec<Var> = states.iter().map(|s| row(&mut tape, &s.w)).collect();
        let out = self.intersect_view(&mut tape, store, &ws);
        Ok(ViewState { w: read(&tape, out) })
    }

    pub fn merge(
        &self,
        store: &ParamStore,
        relation: &RelationState,
        view: &ViewState,
    ) -> Result<(RelationState, ViewState)> {
        self.check_relation_state(relation)?;
        self.check_view_state(view)?;
        let mut tape = Tape::new();
        let state = StateVars {
            center: row(&mut tape, &relation.center),
            offset: None,
            view: Some(row(&mut tape, &view.w)),
        };
        let out = self.merge_vars(&mut tape, store, state);
        Ok((
            RelationState {
                center: read(&tape, out.center),
                offset: relation.offset.clone(),
            },
            ViewState {
                w: read(&tape, out.view.expect("view kept")),
            },
        ))
    }
}
