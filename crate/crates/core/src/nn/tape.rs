//! Reverse-mode differentiation over dense `f64` matrices.
//!
//! Every operation appends a node to the tape holding its value and the
//! recipe for its vector-Jacobian product. `backward` walks the tape once
//! in reverse and returns gradients for the parameters that were bound
//! with [`Tape::param`].

use std::collections::HashMap;
use std::rc::Rc;

use ndarray::{s, Array2, Axis, Zip};

use super::params::{ParamId, ParamStore};

pub type Mat = Array2<f64>;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Row-compressed neighbor lists for sparse attention.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Csr {
    pub offsets: Vec<usize>,
    pub columns: Vec<usize>,
}

impl Csr {
    pub fn from_rows(rows: &[Vec<usize>]) -> Self {
        let mut offsets = Vec::with_capacity(rows.len() + 1);
        let mut columns = Vec::new();
        offsets.push(0);
        for row in rows {
            columns.extend_from_slice(row);
            offsets.push(columns.len());
        }
        Self { offsets, columns }
    }

    pub fn num_rows(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.columns[self.offsets[i]..self.offsets[i + 1]]
    }
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Affine(Var, f64),
    ScaleRows(Var, Rc<Vec<f64>>),
    Relu(Var),
    Sigmoid(Var),
    Abs(Var),
    Softplus(Var),
    Min(Var, Var),
    Softmax(Var),
    Gather(Var, Rc<Vec<usize>>),
    ConcatCols(Vec<Var>),
    SumRows(Var),
    RowSums(Var),
    SumAll(Var),
    WeightedCombine { logits: Vec<Var>, values: Vec<Var> },
    MinAcross(Vec<Var>),
    SumAcross(Vec<Var>),
    PairDistance {
        points: Var,
        centers: Var,
        offsets: Option<Var>,
        point_rows: Rc<Vec<usize>>,
        center_rows: Rc<Vec<usize>>,
        alpha: f64,
    },
    PairDot {
        left: Var,
        right: Var,
        left_rows: Rc<Vec<usize>>,
        right_rows: Rc<Vec<usize>>,
        scale: f64,
    },
    SparseAttention {
        query: Var,
        key: Var,
        value: Var,
        graph: Rc<Csr>,
        scale: f64,
        weights: Vec<f64>,
    },
}

struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
}

/// Parameter gradients produced by [`Tape::backward`].
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    grads: HashMap<ParamId, Mat>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Mat> {
        self.grads.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Mat)> {
        self.grads.iter().map(|(&k, v)| (k, v))
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bound: HashMap<ParamId, Var>,
}

fn relu(x: f64) -> f64 {
    x.max(0.0)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Row-wise softmax of `x`, restricted to entries where `mask` is true.
/// Masked entries are exactly zero. Rows with no allowed entry are zero.
pub fn masked_softmax_rows(x: &Mat, mask: Option<&Array2<bool>>) -> Mat {
    let mut out = Mat::zeros(x.raw_dim());
    for (i, row) in x.rows().into_iter().enumerate() {
        let allowed = |j: usize| mask.map_or(true, |m| m[[i, j]]);
        let max = row
            .iter()
            .enumerate()
            .filter(|&(j, _)| allowed(j))
            .map(|(_, &v)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            continue;
        }
        let mut total = 0.0;
        for (j, &v) in row.iter().enumerate() {
            if allowed(j) {
                let e = (v - max).exp();
                out[[i, j]] = e;
                total += e;
            }
        }
        out.row_mut(i).mapv_inplace(|e| e / total);
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Scalar value of a `1x1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    fn push(&mut self, value: Mat, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a parameter; repeated binds of the same id share one node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: store.get(id).clone(),
            op: Op::Param(id),
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.bound.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b), &[a, b])
    }

    /// `a * b^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        self.push(value, Op::MatMulT(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        self.push(value, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        self.push(value, Op::Mul(a, b), &[a, b])
    }

    /// `a` (n x d) plus the row vector `b` (1 x d) on every row.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push(value, Op::AddRow(a, b), &[a, b])
    }

    /// `scale * a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let value = self.value(a).mapv(|x| scale * x + shift);
        self.push(value, Op::Affine(a, scale), &[a])
    }

    pub fn scale(&mut self, a: Var, scale: f64) -> Var {
        self.affine(a, scale, 0.0)
    }

    /// Row `i` multiplied by `factors[i]`.
    pub fn scale_rows(&mut self, a: Var, factors: Rc<Vec<f64>>) -> Var {
        let mut value = self.value(a).clone();
        for (mut row, &f) in value.rows_mut().into_iter().zip(factors.iter()) {
            row.mapv_inplace(|x| x * f);
        }
        self.push(value, Op::ScaleRows(a, factors), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(relu);
        self.push(value, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        self.push(value, Op::Sigmoid(a), &[a])
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::abs);
        self.push(value, Op::Abs(a), &[a])
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(softplus);
        self.push(value, Op::Softplus(a), &[a])
    }

    pub fn min(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        Zip::from(&mut value)
            .and(self.value(b))
            .for_each(|x, &y| *x = x.min(y));
        self.push(value, Op::Min(a, b), &[a, b])
    }

    /// Row-wise softmax; entries where `mask` is false get exactly zero
    /// weight.
    pub fn masked_softmax(&mut self, a: Var, mask: Option<&Array2<bool>>) -> Var {
        let value = masked_softmax_rows(self.value(a), mask);
        self.push(value, Op::Softmax(a), &[a])
    }

    /// Rows of `a` selected by `rows` (repeats allowed).
    pub fn gather(&mut self, a: Var, rows: Rc<Vec<usize>>) -> Var {
        let src = self.value(a);
        let mut value = Mat::zeros((rows.len(), src.ncols()));
        for (i, &r) in rows.iter().enumerate() {
            value.row_mut(i).assign(&src.row(r));
        }
        self.push(value, Op::Gather(a, rows), &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat rows agree");
        self.push(value, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Column sums as a `1 x d` row.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(0)).insert_axis(Axis(0));
        self.push(value, Op::SumRows(a), &[a])
    }

    /// Row sums as an `n x 1` column.
    pub fn row_sums(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(value, Op::RowSums(a), &[a])
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Mat::from_elem((1, 1), self.value(a).sum());
        self.push(value, Op::SumAll(a), &[a])
    }

    /// `sum_i softmax_i(logits) * values_i`, the softmax taken across the
    /// list independently for every element. Each element is reduced in a
    /// canonical order, so permuting the list leaves the result bit-identical.
    pub fn weighted_combine(&mut self, logits: &[Var], values: &[Var]) -> Var {
        assert_eq!(logits.len(), values.len());
        let shape = self.value(values[0]).raw_dim();
        let mut out = Mat::zeros(shape);
        let mut pairs = Vec::with_capacity(logits.len());
        for (idx, slot) in out.indexed_iter_mut() {
            pairs.clear();
            pairs.extend(
                logits
                    .iter()
                    .zip(values)
                    .map(|(&l, &v)| (self.value(l)[idx], self.value(v)[idx])),
            );
            pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
            let max = pairs.last().expect("non-empty list").0;
            let mut total = 0.0;
            let mut acc = 0.0;
            for &(l, v) in &pairs {
                let e = (l - max).exp();
                total += e;
                acc += e * v;
            }
            *slot = acc / total;
        }
        let parents: Vec<Var> = logits.iter().chain(values).copied().collect();
        self.push(
            out,
            Op::WeightedCombine {
                logits: logits.to_vec(),
                values: values.to_vec(),
            },
            &parents,
        )
    }

    /// Element-wise sum across the list, reduced in sorted order so the
    /// result does not depend on list order.
    pub fn sum_across(&mut self, parts: &[Var]) -> Var {
        let mut out = Mat::zeros(self.value(parts[0]).raw_dim());
        let mut items = Vec::with_capacity(parts.len());
        for (idx, slot) in out.indexed_iter_mut() {
            items.clear();
            items.extend(parts.iter().map(|&p| self.value(p)[idx]));
            items.sort_by(f64::total_cmp);
            *slot = items.iter().sum();
        }
        self.push(out, Op::SumAcross(parts.to_vec()), parts)
    }

    fn combine_weights(&self, logits: &[Var]) -> Vec<Mat> {
        let mut max = self.value(logits[0]).clone();
        for &l in &logits[1..] {
            Zip::from(&mut max)
                .and(self.value(l))
                .for_each(|m, &x| *m = m.max(x));
        }
        let mut exps: Vec<Mat> = logits
            .iter()
            .map(|&l| {
                let mut e = self.value(l) - &max;
                e.mapv_inplace(f64::exp);
                e
            })
            .collect();
        let mut total = Mat::zeros(max.raw_dim());
        for e in &exps {
            total += e;
        }
        for e in &mut exps {
            *e /= &total;
        }
        exps
    }

    /// Element-wise minimum across the list.
    pub fn min_across(&mut self, parts: &[Var]) -> Var {
        let mut value = self.value(parts[0]).clone();
        for &p in &parts[1..] {
            Zip::from(&mut value)
                .and(self.value(p))
                .for_each(|x, &y| *x = x.min(y));
        }
        self.push(value, Op::MinAcross(parts.to_vec()), parts)
    }

    /// Column of distances between `points[point_rows[i]]` and
    /// `centers[center_rows[i]]`: L1 without offsets, otherwise
    /// `sum relu(|p - c| - o) + alpha * sum min(|p - c|, o)` with `o` taken
    /// from `offsets[center_rows[i]]`.
    pub fn pair_distance(
        &mut self,
        points: Var,
        centers: Var,
        offsets: Option<Var>,
        point_rows: Rc<Vec<usize>>,
        center_rows: Rc<Vec<usize>>,
        alpha: f64,
    ) -> Var {
        assert_eq!(point_rows.len(), center_rows.len());
        let (p, c) = (self.value(points), self.value(centers));
        let o = offsets.map(|o| self.value(o));
        let mut out = Mat::zeros((point_rows.len(), 1));
        for (i, (&pr, &cr)) in point_rows.iter().zip(center_rows.iter()).enumerate() {
            let (prow, crow) = (p.row(pr), c.row(cr));
            out[[i, 0]] = match o {
                None => prow.iter().zip(crow.iter()).map(|(a, b)| (a - b).abs()).sum(),
                Some(o) => {
                    let mut outside = 0.0;
                    let mut inside = 0.0;
                    for ((a, b), w) in prow.iter().zip(crow.iter()).zip(o.row(cr).iter()) {
                        let delta = (a - b).abs();
                        outside += (delta - w).max(0.0);
                        inside += delta.min(*w);
                    }
                    outside + alpha * inside
                }
            };
        }
        let mut parents = vec![points, centers];
        parents.extend(offsets);
        self.push(
            out,
            Op::PairDistance {
                points,
                centers,
                offsets,
                point_rows,
                center_rows,
                alpha,
            },
            &parents,
        )
    }

    /// Column of `scale * left[left_rows[i]] . right[right_rows[i]]`.
    pub fn pair_dot(
        &mut self,
        left: Var,
        right: Var,
        left_rows: Rc<Vec<usize>>,
        right_rows: Rc<Vec<usize>>,
        scale: f64,
    ) -> Var {
        assert_eq!(left_rows.len(), right_rows.len());
        let (l, r) = (self.value(left), self.value(right));
        let out = Mat::from_shape_fn((left_rows.len(), 1), |(i, _)| {
            scale * l.row(left_rows[i]).dot(&r.row(right_rows[i]))
        });
        self.push(
            out,
            Op::PairDot {
                left,
                right,
                left_rows,
                right_rows,
                scale,
            },
            &[left, right],
        )
    }

    /// `out_i = sum_{j in graph.row(i)} softmax_j(scale * q_i . k_j) v_j`.
    pub fn sparse_attention(
        &mut self,
        query: Var,
        key: Var,
        value: Var,
        graph: Rc<Csr>,
        scale: f64,
    ) -> Var {
        let (q, k, v) = (self.value(query), self.value(key), self.value(value));
        let mut weights = vec![0.0; graph.columns.len()];
        let mut out = Mat::zeros((graph.num_rows(), v.ncols()));
        for i in 0..graph.num_rows() {
            let range = graph.offsets[i]..graph.offsets[i + 1];
            let cols = graph.row(i);
            let w = &mut weights[range];
            for (slot, &j) in w.iter_mut().zip(cols) {
                *slot = scale * q.row(i).dot(&k.row(j));
            }
            let max = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for slot in w.iter_mut() {
                *slot = (*slot - max).exp();
                total += *slot;
            }
            for (slot, &j) in w.iter_mut().zip(cols) {
                *slot /= total;
                out.row_mut(i).scaled_add(*slot, &v.row(j));
            }
        }
        self.push(
            out,
            Op::SparseAttention {
                query,
                key,
                value,
                graph,
                scale,
                weights,
            },
            &[query, key, value],
        )
    }

    /// Gradients of the `1 x 1` node `root` with respect to bound
    /// parameters.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.shape(root), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Mat>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Mat::ones((1, 1)));
        let mut out = Gradients::default();

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let mut acc = |var: Var, delta: Mat| {
                if !self.nodes[var.0].requires_grad {
                    return;
                }
                match &mut grads[var.0] {
                    Some(existing) => *existing += &delta,
                    slot @ None => *slot = Some(delta),
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => {
                    out.grads
                        .entry(*id)
                        .and_modify(|m| *m += &g)
                        .or_insert(g);
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.nodes[a.0].requires_grad {
                        acc(*a, g.dot(&bv.t()));
                    }
                    if self.nodes[b.0].requires_grad {
                        acc(*b, av.t().dot(&g));
                    }
                }
                Op::MatMulT(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.nodes[a.0].requires_grad {
                        acc(*a, g.dot(bv));
                    }
                    if self.nodes[b.0].requires_grad {
                        acc(*b, g.t().dot(av));
                    }
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Sub(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, -g);
                }
                Op::Mul(a, b) => {
                    acc(*a, &g * self.value(*b));
                    acc(*b, &g * self.value(*a));
                }
                Op::AddRow(a, b) => {
                    acc(*b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(*a, g);
                }
                Op::Affine(a, scale) => acc(*a, g * *scale),
                Op::ScaleRows(a, factors) => {
                    let mut d = g;
                    for (mut row, &f) in d.rows_mut().into_iter().zip(factors.iter()) {
                        row.mapv_inplace(|x| x * f);
                    }
                    acc(*a, d);
                }
                Op::Relu(a) => {
                    let mut d = g;
                    Zip::from(&mut d)
                        .and(self.value(*a))
                        .for_each(|d, &x| {
                            if x <= 0.0 {
                                *d = 0.0
                            }
                        });
                    acc(*a, d);
                }
                Op::Sigmoid(a) => {
                    let mut d = g;
                    Zip::from(&mut d)
                        .and(&node.value)
                        .for_each(|d, &y| *d *= y * (1.0 - y));
                    acc(*a, d);
                }
                Op::Abs(a) => {
                    let mut d = g;
                    Zip::from(&mut d)
                        .and(self.value(*a))
                        .for_each(|d, &x| *d *= sign(x));
                    acc(*a, d);
                }
                Op::Softplus(a) => {
                    let mut d = g;
                    Zip::from(&mut d)
                        .and(self.value(*a))
                        .for_each(|d, &x| *d *= sigmoid(x));
                    acc(*a, d);
                }
                Op::Min(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let mut da = g.clone();
                    let mut db = g;
                    Zip::from(&mut da)
                        .and(&mut db)
                        .and(av)
                        .and(bv)
                        .for_each(|da, db, &x, &y| {
                            if x <= y {
                                *db = 0.0
                            } else {
                                *da = 0.0
                            }
                        });
                    acc(*a, da);
                    acc(*b, db);
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let mut d = &g * y;
                    for (mut row, yrow) in d.rows_mut().into_iter().zip(y.rows()) {
                        let dot = row.sum();
                        Zip::from(&mut row)
                            .and(&yrow)
                            .for_each(|r, &yv| *r -= yv * dot);
                    }
                    acc(*a, d);
                }
                Op::Gather(a, rows) => {
                    let mut d = Mat::zeros(self.value(*a).raw_dim());
                    for (i, &r) in rows.iter().enumerate() {
                        let mut target = d.row_mut(r);
                        target += &g.row(i);
                    }
                    acc(*a, d);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let width = self.value(p).ncols();
                        acc(p, g.slice(s![.., start..start + width]).to_owned());
                        start += width;
                    }
                }
                Op::SumRows(a) => {
                    let shape = self.value(*a).raw_dim();
                    acc(*a, g.broadcast(shape).expect("row broadcast").to_owned());
                }
                Op::RowSums(a) => {
                    let shape = self.value(*a).raw_dim();
                    acc(*a, g.broadcast(shape).expect("column broadcast").to_owned());
                }
                Op::SumAll(a) => {
                    let v = g[[0, 0]];
                    acc(*a, Mat::from_elem(self.value(*a).raw_dim(), v));
                }
                Op::WeightedCombine { logits, values } => {
                    let weights = self.combine_weights(logits);
                    let out_value = &node.value;
                    for ((w, &l), &v) in weights.iter().zip(logits).zip(values) {
                        acc(v, w * &g);
                        let mut dl = w * &g;
                        dl *= &(self.value(v) - out_value);
                        acc(l, dl);
                    }
                }
                Op::SumAcross(parts) => {
                    for &p in parts {
                        acc(p, g.clone());
                    }
                }
                Op::MinAcross(parts) => {
                    let value = &node.value;
                    let mut taken = Array2::from_elem(value.raw_dim(), false);
                    for &p in parts {
                        let mut d = Mat::zeros(value.raw_dim());
                        Zip::from(&mut d)
                            .and(&mut taken)
                            .and(self.value(p))
                            .and(value)
                            .and(&g)
                            .for_each(|d, t, &x, &m, &gv| {
                                if !*t && x == m {
                                    *d = gv;
                                    *t = true;
                                }
                            });
                        acc(p, d);
                    }
                }
                Op::PairDistance {
                    points,
                    centers,
                    offsets,
                    point_rows,
                    center_rows,
                    alpha,
                } => {
                    let p = self.value(*points).as_standard_layout();
                    let c = self.value(*centers).as_standard_layout();
                    let o = offsets.map(|o| self.value(o).as_standard_layout());
                    let width = p.ncols();
                    let (ps, cs) = (p.as_slice().unwrap(), c.as_slice().unwrap());
                    let os = o.as_ref().map(|o| o.as_slice().unwrap());
                    let mut dp = vec![0.0; ps.len()];
                    let mut dc = vec![0.0; cs.len()];
                    let mut d_o = os.map(|o| vec![0.0; o.len()]);
                    for (i, (&pr, &cr)) in point_rows.iter().zip(center_rows.iter()).enumerate() {
                        let gi = g[[i, 0]];
                        let (pi, ci) = (pr * width, cr * width);
                        for j in 0..width {
                            let diff = ps[pi + j] - cs[ci + j];
                            let d_delta = match (os, d_o.as_mut()) {
                                (Some(o), Some(dm)) => {
                                    if diff.abs() > o[ci + j] {
                                        dm[ci + j] += gi * (alpha - 1.0);
                                        1.0
                                    } else {
                                        *alpha
                                    }
                                }
                                _ => 1.0,
                            };
                            let v = gi * d_delta * sign(diff);
                            dp[pi + j] += v;
                            dc[ci + j] -= v;
                        }
                    }
                    let dp = Mat::from_shape_vec(p.raw_dim(), dp).expect("shape");
                    let dc = Mat::from_shape_vec(c.raw_dim(), dc).expect("shape");
                    let d_o = d_o.map(|v| Mat::from_shape_vec(c.raw_dim(), v).expect("shape"));
                    acc(*points, dp);
                    acc(*centers, dc);
                    if let (Some(ov), Some(dm)) = (offsets, d_o) {
                        acc(*ov, dm);
                    }
                }
                Op::PairDot {
                    left,
                    right,
                    left_rows,
                    right_rows,
                    scale,
                } => {
                    let (l, r) = (self.value(*left), self.value(*right));
                    let mut dl = Mat::zeros(l.raw_dim());
                    let mut dr = Mat::zeros(r.raw_dim());
                    for (i, (&lr, &rr)) in left_rows.iter().zip(right_rows.iter()).enumerate() {
                        let gi = g[[i, 0]] * scale;
                        dl.row_mut(lr).scaled_add(gi, &r.row(rr));
                        dr.row_mut(rr).scaled_add(gi, &l.row(lr));
                    }
                    acc(*left, dl);
                    acc(*right, dr);
                }
                Op::SparseAttention {
                    query,
                    key,
                    value,
                    graph,
                    scale,
                    weights,
                } => {
                    let (q, k, v) = (self.value(*query), self.value(*key), self.value(*value));
                    let mut dq = Mat::zeros(q.raw_dim());
                    let mut dk = Mat::zeros(k.raw_dim());
                    let mut dv = Mat::zeros(v.raw_dim());
                    for i in 0..graph.num_rows() {
                        let base = graph.offsets[i];
                        let cols = graph.row(i);
                        let gi = g.row(i);
                        let dalpha: Vec<f64> = cols.iter().map(|&j| gi.dot(&v.row(j))).collect();
                        let mean: f64 = cols
                            .iter()
                            .enumerate()
                            .map(|(t, _)| weights[base + t] * dalpha[t])
                            .sum();
                        for (t, &j) in cols.iter().enumerate() {
                            let alpha = weights[base + t];
                            dv.row_mut(j).scaled_add(alpha, &gi);
                            let ds = alpha * (dalpha[t] - mean) * scale;
                            dq.row_mut(i).scaled_add(ds, &k.row(j));
                            dk.row_mut(j).scaled_add(ds, &q.row(i));
                        }
                    }
                    acc(*query, dq);
                    acc(*key, dk);
                    acc(*value, dv);
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
        Mat::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
    }

    /// Central differences of `f` with respect to every entry of `store[id]`.
    fn numeric_grad(
        store: &mut ParamStore,
        id: ParamId,
        f: &dyn Fn(&ParamStore) -> f64,
    ) -> Mat {
        let eps = 1e-6;
        let shape = store.get(id).raw_dim();
        let mut out = Mat::zeros(shape);
        for idx in ndarray::indices(out.raw_dim()) {
            let orig = store.get(id)[idx];
            store.get_mut(id)[idx] = orig + eps;
            let up = f(store);
            store.get_mut(id)[idx] = orig - eps;
            let down = f(store);
            store.get_mut(id)[idx] = orig;
            out[idx] = (up - down) / (2.0 * eps);
        }
        out
    }

    fn assert_close(a: &Mat, b: &Mat, tol: f64) {
        for (x, y) in a.iter().zip(b.iter()) {
            let denom = x.abs().max(y.abs()).max(1e-3);
            assert!((x - y).abs() / denom < tol, "{x} vs {y}");
        }
    }

    #[test]
    fn softmax_respects_mask() {
        let x = array![[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]];
        let mask = array![[true, false, true], [false, true, false]];
        let y = masked_softmax_rows(&x, Some(&mask));
        assert_eq!(y[[0, 1]], 0.0);
        assert!((y.row(0).sum() - 1.0).abs() < 1e-12);
        assert_eq!(y.row(1).to_vec(), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(softplus(-1000.0), 0.0);
        assert_eq!(softplus(1000.0), 1000.0);
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let a = store.add("a", random(4, 3, &mut rng));
        let b = store.add("b", random(3, 3, &mut rng));
        let r = store.add("r", random(1, 3, &mut rng));
        let c = store.add("c", random(3, 4, &mut rng));
        let mask = Rc::new(Array2::from_shape_fn((4, 4), |(i, j)| i == j || (i + j) % 3 == 0));
        let graph = Rc::new(Csr::from_rows(
            &(0..4)
                .map(|i| (0..4).filter(|&j| mask[[i, j]]).collect())
                .collect::<Vec<_>>(),
        ));
        let rows = Rc::new(vec![3, 0, 0, 2, 1]);
        let factors = Rc::new(vec![0.5, -1.0, 2.0, 1.5]);

        let forward = |store: &ParamStore| -> (Tape, Var) {
            let mut t = Tape::new();
            let (a, b, r) = (t.param(store, a), t.param(store, b), t.param(store, r));
            let c = t.param(store, c);
            let ab = t.matmul(a, b);
            let shifted = t.add_row(ab, r);
            let s = t.sigmoid(shifted);
            let p = t.softplus(ab);
            let m = t.mul(s, p);
            let d = t.sub(m, a);
            let ab2 = t.abs(d);
            let mn = t.min(ab2, s);
            let rl = t.relu(shifted);
            let ct = t.matmul_t(a, ab);
            let sq0 = t.matmul(a, c);
            let sq = t.add(sq0, ct);
            let sm = t.masked_softmax(sq, Some(&mask));
            let sa = t.matmul(sm, a);
            let att = t.sparse_attention(a, ab, shifted, graph.clone(), 0.7);
            let g = t.gather(mn, rows.clone());
            let wc = t.weighted_combine(&[rl, sa, ab], &[att, mn, s]);
            let sacr = t.sum_across(&[wc, rl, d]);
            let mna = t.min_across(&[sacr, rl, d]);
            let sc = t.scale_rows(mna, factors.clone());
            let cat = t.concat_cols(&[sc, att]);
            let cs = t.sum_rows(cat);
            let rs = t.row_sums(g);
            let aff = t.affine(cs, 0.3, 1.0);
            let x = t.sum_all(aff);
            let y = t.sum_all(rs);
            let z = t.add(x, y);
            (t, z)
        };
        let (tape, root) = forward(&store);
        let grads = tape.backward(root);
        let f = |s: &ParamStore| {
            let (t, z) = forward(s);
            t.scalar(z)
        };
        for id in [a, b, r, c] {
            let numeric = numeric_grad(&mut store, id, &f);
            assert_close(grads.get(id).unwrap(), &numeric, 1e-5);
        }
    }

    #[test]
    fn sparse_attention_equals_dense_masked() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let store = ParamStore::new();
        let mut t = Tape::new();
        let q = t.constant(random(5, 4, &mut rng));
        let k = t.constant(random(5, 4, &mut rng));
        let v = t.constant(random(5, 4, &mut rng));
        let mask = Array2::from_shape_fn((5, 5), |(i, j)| i == j || (i * j) % 4 == 1);
        let graph = Rc::new(Csr::from_rows(
            &(0..5)
                .map(|i| (0..5).filter(|&j| mask[[i, j]]).collect())
                .collect::<Vec<_>>(),
        ));
        let sparse = t.sparse_attention(q, k, v, graph, 0.5);
        let kt = t.constant(t.value(k).t().to_owned());
        let logits = t.matmul(q, kt);
        let logits = t.scale(logits, 0.5);
        let c = t.masked_softmax(logits, Some(&mask));
        let dense = t.matmul(c, v);
        assert_close(t.value(sparse), t.value(dense), 1e-12);
        drop(store);
    }

    #[test]
    fn list_reductions_ignore_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut t = Tape::new();
        let xs: Vec<Var> = (0..4).map(|_| t.constant(random(3, 5, &mut rng) * 1e3)).collect();
        let ls: Vec<Var> = (0..4).map(|_| t.constant(random(3, 5, &mut rng))).collect();
        let a = t.weighted_combine(&ls, &xs);
        let b = t.weighted_combine(&[ls[2], ls[0], ls[3], ls[1]], &[xs[2], xs[0], xs[3], xs[1]]);
        assert_eq!(t.value(a), t.value(b));
        let c = t.sum_across(&xs);
        let d = t.sum_across(&[xs[3], xs[1], xs[0], xs[2]]);
        assert_eq!(t.value(c), t.value(d));
    }

    #[test]
    fn fused_pair_ops_match_composed_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::new();
        let p = store.add("p", random(5, 4, &mut rng));
        let c = store.add("c", random(3, 4, &mut rng));
        let o = store.add("o", random(3, 4, &mut rng).mapv(f64::abs));
        let prow = Rc::new(vec![0, 4, 2, 2, 1, 3]);
        let crow = Rc::new(vec![0, 0, 1, 2, 2, 1]);
        let fused = |store: &ParamStore, boxed: bool| -> (Tape, Var) {
            let mut t = Tape::new();
            let (pv, cv, ov) = (t.param(store, p), t.param(store, c), t.param(store, o));
            let dist = t.pair_distance(pv, cv, boxed.then_some(ov), prow.clone(), crow.clone(), 0.3);
            let dot = t.pair_dot(pv, cv, prow.clone(), crow.clone(), 0.5);
            let prod = t.mul(dist, dot);
            let y = t.sum_all(prod);
            (t, y)
        };
        let composed = |store: &ParamStore, boxed: bool| -> (Tape, Var) {
            let mut t = Tape::new();
            let (pv, cv, ov) = (t.param(store, p), t.param(store, c), t.param(store, o));
            let pg = t.gather(pv, prow.clone());
            let cg = t.gather(cv, crow.clone());
            let diff = t.sub(pg, cg);
            let a = t.abs(diff);
            let dist = if boxed {
                let og = t.gather(ov, crow.clone());
                let ex = t.sub(a, og);
                let out = t.relu(ex);
                let ins = t.min(a, og);
                let out = t.row_sums(out);
                let ins = t.row_sums(ins);
                let ins = t.scale(ins, 0.3);
                t.add(out, ins)
            } else {
                t.row_sums(a)
            };
            let m = t.mul(pg, cg);
            let dot = t.row_sums(m);
            let dot = t.scale(dot, 0.5);
            let prod = t.mul(dist, dot);
            let y = t.sum_all(prod);
            (t, y)
        };
        for boxed in [false, true] {
            let (ta, ya) = fused(&store, boxed);
            let (tb, yb) = composed(&store, boxed);
            assert!((ta.scalar(ya) - tb.scalar(yb)).abs() < 1e-12);
            let (ga, gb) = (ta.backward(ya), tb.backward(yb));
            for id in [p, c, o] {
                match (ga.get(id), gb.get(id)) {
                    (Some(x), Some(y)) => assert_close(x, y, 1e-10),
                    (None, None) => {}
                    other => panic!("gradient presence differs: {other:?}"),
                }
            }
            let f = |s: &ParamStore| {
                let (t, y) = fused(s, boxed);
                t.scalar(y)
            };
            for id in [p, c] {
                let numeric = numeric_grad(&mut store, id, &f);
                assert_close(ga.get(id).unwrap(), &numeric, 1e-5);
            }
        }
    }

    #[test]
    fn repeated_param_binding_shares_node() {
        let mut store = ParamStore::new();
        let id = store.add("w", Mat::ones((1, 1)));
        let mut t = Tape::new();
        let x = t.param(&store, id);
        let y = t.param(&store, id);
        assert_eq!(x, y);
        let z = t.mul(x, y);
        let g = t.backward(z);
        assert_eq!(g.get(id).unwrap()[[0, 0]], 2.0);
    }
}
