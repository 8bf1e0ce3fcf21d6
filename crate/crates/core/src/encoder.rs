//! Masked multi-head self-attention over the entity graph.
//!
//! Each head computes `C = softmax(Q K^T / sqrt(d_head))` restricted to the
//! adjacency mask and returns `C (Z W_V)`. Heads are concatenated, merged
//! by a `d x d` matrix and added to the layer input.

use std::rc::Rc;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::{EntityId, MultiViewKg};
use crate::nn::{masked_softmax_rows, xavier, Csr, Mat, ParamId, ParamStore, Tape, Var};

/// Dense attention is used up to this many entities under
/// [`AttentionMode::Auto`].
pub const DENSE_ENTITY_LIMIT: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionMode {
    Dense,
    Sparse,
    Auto,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    /// Apply the mask after an unrestricted softmax instead of before it.
    /// Rows then no longer sum to one.
    pub post_hoc_mask: bool,
    /// Add each layer's input to its output.
    pub layer_residual: bool,
    pub attention: AttentionMode,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 2,
            post_hoc_mask: false,
            layer_residual: true,
            attention: AttentionMode::Auto,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct HeadParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
}

#[derive(Debug, Clone)]
pub struct LayerParams {
    pub heads: Vec<HeadParams>,
    pub merge: ParamId,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub layers: Vec<LayerParams>,
    pub d: usize,
}

/// The attention mask in both dense and neighbor-list form.
#[derive(Debug, Clone)]
pub struct AttentionGraph {
    pub dense: Rc<Array2<bool>>,
    pub sparse: Rc<Csr>,
}

impl AttentionGraph {
    pub fn from_kg(kg: &MultiViewKg) -> Self {
        let rows: Vec<Vec<usize>> = (0..kg.num_entities())
            .map(|e| kg.mask_neighbors(EntityId(e)).iter().map(|n| n.0).collect())
            .collect();
        Self {
            dense: Rc::new(kg.attention_mask()),
            sparse: Rc::new(Csr::from_rows(&rows)),
        }
    }

    pub fn from_dense(mask: Array2<bool>) -> Result<Self> {
        check_mask(&mask)?;
        let rows: Vec<Vec<usize>> = mask
            .rows()
            .into_iter()
            .map(|r| r.iter().enumerate().filter(|(_, &b)| b).map(|(j, _)| j).collect())
            .collect();
        Ok(Self {
            dense: Rc::new(mask),
            sparse: Rc::new(Csr::from_rows(&rows)),
        })
    }

    pub fn len(&self) -> usize {
        self.dense.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn check_mask(mask: &Array2<bool>) -> Result<()> {
    if mask.nrows() != mask.ncols() {
        return Err(Error::Shape(format!("mask is {:?}, not square", mask.dim())));
    }
    if let Some(i) = mask.rows().into_iter().position(|r| !r.iter().any(|&b| b)) {
        return Err(Error::InvalidArgument(format!(
            "attention mask row {i} has no allowed entry"
        )));
    }
    Ok(())
}

impl Encoder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        d: usize,
        config: EncoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if config.layers > 0 && (config.heads == 0 || d % config.heads != 0) {
            return Err(Error::Config(format!(
                "{} heads do not divide d = {d}",
                config.heads
            )));
        }
        let d_head = if config.heads == 0 { d } else { d / config.heads };
        let layers = (0..config.layers)
            .map(|l| LayerParams {
                heads: (0..config.heads)
                    .map(|h| HeadParams {
                        wq: store.add(format!("encoder.{l}.{h}.wq"), xavier(d, d_head, rng)),
                        wk: store.add(format!("encoder.{l}.{h}.wk"), xavier(d, d_head, rng)),
                        wv: store.add(format!("encoder.{l}.{h}.wv"), xavier(d, d_head, rng)),
                    })
                    .collect(),
                merge: store.add(format!("encoder.{l}.merge"), xavier(d, d, rng)),
            })
            .collect();
        Ok(Self { config, layers, d })
    }

    fn use_sparse(&self, n: usize) -> bool {
        match self.config.attention {
            AttentionMode::Dense => false,
            AttentionMode::Sparse => !self.config.post_hoc_mask,
            AttentionMode::Auto => n > DENSE_ENTITY_LIMIT && !self.config.post_hoc_mask,
        }
    }

    fn head(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        z: Var,
        head: &HeadParams,
        graph: &AttentionGraph,
    ) -> Var {
        let wq = tape.param(store, head.wq);
        let wk = tape.param(store, head.wk);
        let wv = tape.param(store, head.wv);
        let q = tape.matmul(z, wq);
        let k = tape.matmul(z, wk);
        let v = tape.matmul(z, wv);
        let scale = 1.0 / (store.get(head.wq).ncols() as f64).sqrt();
        if self.use_sparse(graph.len()) {
            return tape.sparse_attention(q, k, v, graph.sparse.clone(), scale);
        }
        let logits = tape.matmul_t(q, k);
        let logits = tape.scale(logits, scale);
        let c = if self.config.post_hoc_mask {
            let full = tape.masked_softmax(logits, None);
            let mask = tape.constant(graph.dense.mapv(|b| if b { 1.0 } else { 0.0 }));
            tape.mul(full, mask)
        } else {
            tape.masked_softmax(logits, Some(&graph.dense))
        };
        tape.matmul(c, v)
    }

    /// `H` for initial encodings `z` (`|V| x d`).
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, z: Var, graph: &AttentionGraph) -> Var {
        let mut x = z;
        for layer in &self.layers {
            let heads: Vec<Var> = layer
                .heads
                .iter()
                .map(|h| self.head(tape, store, x, h, graph))
                .collect();
            let cat = if heads.len() == 1 {
                heads[0]
            } else {
                tape.concat_cols(&heads)
            };
            let merge = tape.param(store, layer.merge);
            let out = tape.matmul(cat, merge);
            x = if self.config.layer_residual {
                tape.add(x, out)
            } else {
                out
            };
        }
        x
    }
}

/// Attention coefficients `softmax(Q K^T / sqrt(d_head))` masked by `mask`,
/// with the mask applied before normalization.
pub fn masked_attention(z: &Mat, mask: &Array2<bool>, wq: &Mat, wk: &Mat) -> Result<Mat> {
    check_mask(mask)?;
    if mask.nrows() != z.nrows() || wq.nrows() != z.ncols() || wk.dim() != wq.dim() {
        return Err(Error::Shape(format!(
            "Z {:?}, mask {:?}, W_Q {:?}, W_K {:?}",
            z.dim(),
            mask.dim(),
            wq.dim(),
            wk.dim()
        )));
    }
    let q = z.dot(wq);
    let k = z.dot(wk);
    let logits = q.dot(&k.t()) / (wq.ncols() as f64).sqrt();
    Ok(masked_softmax_rows(&logits, Some(mask)))
}

/// `C (Z W_V)`.
pub fn attention_update(c: &Mat, z: &Mat, wv: &Mat) -> Result<Mat> {
    if c.ncols() != z.nrows() || z.ncols() != wv.nrows() {
        return Err(Error::Shape(format!(
            "C {:?}, Z {:?}, W_V {:?}",
            c.dim(),
            z.dim(),
            wv.dim()
        )));
    }
    Ok(c.dot(&z.dot(wv)))
}

/// Runs the encoder on plain matrices.
pub fn encode(z: &Mat, graph: &AttentionGraph, encoder: &Encoder, store: &ParamStore) -> Result<Mat> {
    if z.nrows() != graph.len() || z.ncols() != encoder.d {
        return Err(Error::Shape(format!(
            "Z {:?} for {} entities at d = {}",
            z.dim(),
            graph.len(),
            encoder.d
        )));
    }
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone());
    let h = encoder.forward(&mut tape, store, zv, graph);
    Ok(tape.value(h).clone())
}
