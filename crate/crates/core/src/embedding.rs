//! Initial entity encodings: a trainable semantic table plus a view-set
//! encoding pooled from fixed sinusoidal view encodings.

use ndarray::{Array1, Array2};
use rand::Rng;

use crate::error::{Error, Result};
use crate::kg::{MultiViewKg, ViewId};
use crate::nn::{uniform, xavier, Mat, ParamId, ParamStore, Tape, Var};

/// Sinusoidal encoding of a view position. Component `2i` is
/// `sin(pos / 10000^(2i/d))` and `2i+1` the matching cosine.
pub fn pos_enc(pos: usize, d: usize) -> Result<Array1<f64>> {
    if d == 0 || d % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "positional encoding needs a positive even dimension, got {d}"
        )));
    }
    let mut out = Array1::zeros(d);
    for i in 0..d / 2 {
        let angle = pos as f64 / 10000f64.powf((2 * i) as f64 / d as f64);
        out[2 * i] = angle.sin();
        out[2 * i + 1] = angle.cos();
    }
    Ok(out)
}

/// Rows `0..n` of the positional encoding.
pub fn pos_enc_table(n: usize, d: usize) -> Result<Mat> {
    pos_enc(0, d)?;
    let mut table = Mat::zeros((n, d));
    for pos in 0..n {
        table.row_mut(pos).assign(&pos_enc(pos, d)?);
    }
    Ok(table)
}

/// Deep-sets aggregator: `post(sum_x relu(x W1 + b1))` with
/// `post(y) = y W2 + b2`. Hidden width equals `d`.
#[derive(Debug, Clone, Copy)]
pub struct SetEncoder {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub d: usize,
}

impl SetEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore, d: usize, rng: &mut R) -> Self {
        Self {
            w1: store.add("setenc.w1", xavier(d, d, rng)),
            b1: store.add("setenc.b1", Mat::zeros((1, d))),
            w2: store.add("setenc.w2", xavier(d, d, rng)),
            b2: store.add("setenc.b2", Mat::zeros((1, d))),
            d,
        }
    }

    /// Element transform of every row of `pe` (`n x d`).
    pub fn element(&self, tape: &mut Tape, store: &ParamStore, pe: Var) -> Var {
        let w1 = tape.param(store, self.w1);
        let b1 = tape.param(store, self.b1);
        let x = tape.matmul(pe, w1);
        let x = tape.add_row(x, b1);
        tape.relu(x)
    }

    pub fn post(&self, tape: &mut Tape, store: &ParamStore, pooled: Var) -> Var {
        let w2 = tape.param(store, self.w2);
        let b2 = tape.param(store, self.b2);
        let y = tape.matmul(pooled, w2);
        tape.add_row(y, b2)
    }

    /// One encoding per row of `counts` (`m x |Θ|`, multiplicity of each
    /// view in the set). Pooling is a matrix product against fixed view
    /// order, so the result does not depend on how a set was listed.
    pub fn encode_counts(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        pe_table: Var,
        counts: Var,
    ) -> Var {
        let hidden = self.element(tape, store, pe_table);
        let pooled = tape.matmul(counts, hidden);
        self.post(tape, store, pooled)
    }
}

/// View multiplicities of a multiset, one column per view index.
pub fn view_counts(views: &[ViewId], num_views: usize) -> Result<Mat> {
    let mut counts = Mat::zeros((1, num_views));
    for v in views {
        if v.0 >= num_views {
            return Err(Error::UnknownId {
                kind: "view",
                id: v.0,
            });
        }
        counts[[0, v.0]] += 1.0;
    }
    Ok(counts)
}

/// `θ = SetEnc({PosEnc(ϑ) | ϑ ∈ views})`.
pub fn view_set_encoding(
    views: &[ViewId],
    agg: &SetEncoder,
    store: &ParamStore,
) -> Result<Array1<f64>> {
    if views.is_empty() {
        return Err(Error::InvalidArgument(
            "view-set encoding of an empty set".into(),
        ));
    }
    let n = views.iter().map(|v| v.0).max().unwrap_or(0) + 1;
    let mut tape = Tape::new();
    let pe = tape.constant(pos_enc_table(n, agg.d)?);
    let counts = tape.constant(view_counts(views, n)?);
    let out = agg.encode_counts(&mut tape, store, pe, counts);
    Ok(tape.value(out).row(0).to_owned())
}

/// `z = e + θ`.
pub fn initial_encoding(semantic: &Array1<f64>, theta: &Array1<f64>) -> Result<Array1<f64>> {
    if semantic.len() != theta.len() {
        return Err(Error::Shape(format!(
            "semantic encoding has dimension {}, view-set encoding {}",
            semantic.len(),
            theta.len()
        )));
    }
    Ok(semantic + theta)
}

/// Semantic table and set encoder for one KG.
#[derive(Debug, Clone, Copy)]
pub struct EmbeddingParams {
    pub semantic: ParamId,
    pub set_encoder: SetEncoder,
}

impl EmbeddingParams {
    pub fn new<R: Rng>(store: &mut ParamStore, num_entities: usize, d: usize, rng: &mut R) -> Self {
        let bound = (6.0 / d as f64).sqrt();
        Self {
            semantic: store.add("semantic_table", uniform(num_entities, d, bound, rng)),
            set_encoder: SetEncoder::new(store, d, rng),
        }
    }
}

/// Fixed per-KG inputs to the embedding layer.
#[derive(Debug, Clone)]
pub struct ViewInputs {
    /// `|Θ| x d` positional encodings.
    pub pe_table: Mat,
    /// `|V| x |Θ|` indicator of `Θ_v`.
    pub membership: Mat,
}

impl ViewInputs {
    /// Entities without any incident fact get an all-zero row, so their
    /// view-set encoding reduces to the output bias.
    pub fn new(kg: &MultiViewKg, d: usize) -> Result<Self> {
        let mut membership = Array2::zeros((kg.num_entities(), kg.num_views()));
        for e in 0..kg.num_entities() {
            for v in kg.view_set(crate::kg::EntityId(e)) {
                membership[[e, v.0]] = 1.0;
            }
        }
        Ok(Self {
            pe_table: pos_enc_table(kg.num_views(), d)?,
            membership,
        })
    }
}

/// Tape handles for one forward pass of the embedding layer.
#[derive(Debug, Clone, Copy)]
pub struct EncodingVars {
    pub semantic: Var,
    pub theta: Var,
    pub z: Var,
    pub pe_table: Var,
}

impl EmbeddingParams {
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, inputs: &ViewInputs) -> EncodingVars {
        let semantic = tape.param(store, self.semantic);
        let pe_table = tape.constant(inputs.pe_table.clone());
        let membership = tape.constant(inputs.membership.clone());
        let theta = self
            .set_encoder
            .encode_counts(tape, store, pe_table, membership);
        let z = tape.add(semantic, theta);
        EncodingVars {
            semantic,
            theta,
            z,
            pe_table,
        }
    }
}
