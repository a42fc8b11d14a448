//! Reverse-mode differentiation over a linear tape of matrix operations.
//!
//! A [`Tape`] records every operation as it executes. [`Tape::backward`]
//! walks the record once in reverse and accumulates gradients for every
//! tensor that tracks them. The operation set is exactly what the attention
//! network needs; there is no broadcasting and no lazy evaluation.
//!
//! Two properties hold for every operation:
//!
//! * outputs are checked for NaN/inf as soon as they are produced, so a
//!   numeric blow-up surfaces at the operation that caused it;
//! * parallel loops split work only across independent output rows or
//!   segments, with a fixed accumulation order inside each, so results are
//!   bitwise identical for any thread count.

// The edge kernels walk several parallel buffers with one edge cursor;
// zipping them would hide that they stay in lockstep.
#![allow(clippy::needless_range_loop)]

use std::sync::Arc;

use thiserror::Error;

use super::matrix::Matrix;
use crate::parallel::{for_each_chunk_mut, for_each_part_mut};

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: (usize, usize), rhs: (usize, usize) },
    #[error("{op}: expected {expected}, got a {got_rows}x{got_cols} matrix")]
    BadShape { op: &'static str, expected: String, got_rows: usize, got_cols: usize },
    #[error("{op}: row index {index} out of bounds for {bound} rows")]
    RowOutOfBounds { op: &'static str, index: usize, bound: usize },
    #[error("{op}: segment {segment} is empty")]
    EmptySegment { op: &'static str, segment: usize },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward root must be a 1x1 scalar, got {rows}x{cols}")]
    NonScalarRoot { rows: usize, cols: usize },
}

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

/// Consecutive index ranges: group `s` covers `offsets[s]..offsets[s + 1]`.
/// Used to describe which rows of an edge-indexed tensor belong to which
/// target node.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segments {
    offsets: Arc<Vec<usize>>,
}

impl Segments {
    /// `offsets` must start at 0 and be non-decreasing. Violations are caller
    /// bugs and panic.
    pub fn new(offsets: Vec<usize>) -> Self {
        assert!(!offsets.is_empty() && offsets[0] == 0, "offsets must start at 0");
        assert!(offsets.windows(2).all(|w| w[0] <= w[1]), "offsets must be non-decreasing");
        Self { offsets: Arc::new(offsets) }
    }

    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn total(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn bounds(&self, s: usize) -> (usize, usize) {
        (self.offsets[s], self.offsets[s + 1])
    }
}

/// Adjacency of one relation in compressed form: the neighbors of target
/// node `i` are `src[offsets[i]..offsets[i + 1]]`, and "edge `e`" means the
/// pair `(target(e), src[e])`. Neighbor order is preserved from construction;
/// nothing here re-sorts, so relabeling nodes keeps summation order and with
/// it bitwise reproducibility.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EdgeIndex {
    segments: Segments,
    src: Arc<Vec<usize>>,
}

impl EdgeIndex {
    pub fn new(offsets: Vec<usize>, src: Vec<usize>) -> Self {
        let segments = Segments::new(offsets);
        assert_eq!(segments.total(), src.len(), "offsets must cover the source list");
        Self { segments, src: Arc::new(src) }
    }

    /// Builds the compressed form from one neighbor list per target node.
    pub fn from_lists(lists: &[Vec<usize>]) -> Self {
        let mut offsets = Vec::with_capacity(lists.len() + 1);
        offsets.push(0);
        let mut src = Vec::with_capacity(lists.iter().map(Vec::len).sum());
        for list in lists {
            src.extend_from_slice(list);
            offsets.push(src.len());
        }
        Self::new(offsets, src)
    }

    pub fn to_lists(&self) -> Vec<Vec<usize>> {
        (0..self.num_targets()).map(|i| self.neighbors(i).to_vec()).collect()
    }

    pub fn num_targets(&self) -> usize {
        self.segments.len()
    }

    pub fn num_edges(&self) -> usize {
        self.src.len()
    }

    pub fn neighbors(&self, target: usize) -> &[usize] {
        let (lo, hi) = self.segments.bounds(target);
        &self.src[lo..hi]
    }

    pub fn offsets(&self) -> &[usize] {
        self.segments.offsets()
    }

    pub fn sources(&self) -> &[usize] {
        &self.src
    }

    pub fn segments(&self) -> Segments {
        self.segments.clone()
    }

    /// Target node of every edge, expanded to one entry per edge.
    pub fn targets(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.num_edges());
        for t in 0..self.num_targets() {
            let (lo, hi) = self.segments.bounds(t);
            out.extend(std::iter::repeat_n(t, hi - lo));
        }
        out
    }
}

enum Op {
    Leaf,
    Matmul(TensorId, TensorId),
    Transpose(TensorId),
    Add(TensorId, TensorId),
    AddBias(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Affine(TensorId, f64),
    ConcatRows(TensorId, TensorId),
    SliceCols(TensorId, usize),
    GatherRows(TensorId, Arc<Vec<usize>>),
    ScaleRows(TensorId, TensorId),
    LeakyRelu(TensorId, f64),
    Elu(TensorId),
    Exp(TensorId),
    Log(TensorId),
    Sigmoid(TensorId),
    Clamp(TensorId, f64, f64),
    SumAll(TensorId),
    SoftmaxRows(TensorId),
    SegmentSoftmax(TensorId, Segments),
    SegmentWeightedSum { weights: TensorId, values: TensorId, segments: Segments },
    EdgeAttentionLogits { target_feats: TensorId, source_feats: TensorId, score: TensorId, edges: EdgeIndex, slope: f64 },
    AttentionWeightedSum { coeffs: TensorId, values: TensorId, edges: EdgeIndex },
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// Records operations eagerly; `backward` fills per-tensor gradients.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Matrix>>,
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

    /// Registers an input tensor. Only tensors created with
    /// `requires_grad = true` (and everything computed from them) get
    /// gradient buffers.
    pub fn leaf(&mut self, value: Matrix, requires_grad: bool) -> TensorId {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Shorthand for a non-differentiated input.
    pub fn constant(&mut self, value: Matrix) -> TensorId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: TensorId) -> &Matrix {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: TensorId) -> (usize, usize) {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Gradient of the last `backward` root with respect to `id`. `None`
    /// before `backward` runs, and for tensors that do not track gradients.
    pub fn grad(&self, id: TensorId) -> Option<&Matrix> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> TensorId {
        self.nodes.push(Node { value, op, needs_grad });
        TensorId(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, name: &'static str, value: Matrix, op: Op, needs_grad: bool) -> Result<TensorId, DiffError> {
        if !value.all_finite() {
            return Err(DiffError::NonFinite { op: name });
        }
        Ok(self.push(value, op, needs_grad))
    }

    fn any_grad(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    // ---- operations ------------------------------------------------------

    /// `a (r x k) * b (k x c)`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, DiffError> {
        let (ar, ak) = self.shape(a);
        let (bk, bc) = self.shape(b);
        if ak != bk {
            return Err(DiffError::ShapeMismatch { op: "matmul", lhs: (ar, ak), rhs: (bk, bc) });
        }
        let mut out = Matrix::zeros(ar, bc);
        let av = self.value(a);
        let bv = self.value(b);
        for_each_chunk_mut(out.data_mut(), bc.max(1), |i, out_row| {
            let a_row = av.row(i);
            for (k, &aik) in a_row.iter().enumerate() {
                if aik == 0.0 {
                    continue;
                }
                for (o, &bkj) in out_row.iter_mut().zip(bv.row(k)) {
                    *o += aik * bkj;
                }
            }
        });
        self.push_checked("matmul", out, Op::Matmul(a, b), self.any_grad(&[a, b]))
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId, DiffError> {
        let out = self.value(a).transposed();
        self.push_checked("transpose", out, Op::Transpose(a), self.any_grad(&[a]))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, DiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(DiffError::ShapeMismatch { op: "add", lhs: sa, rhs: sb });
        }
        let mut out = self.value(a).clone();
        for (o, &x) in out.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
            *o += x;
        }
        self.push_checked("add", out, Op::Add(a, b), self.any_grad(&[a, b]))
    }

    /// Adds a `1 x c` bias row to every row of `a`.
    pub fn add_bias(&mut self, a: TensorId, bias: TensorId) -> Result<TensorId, DiffError> {
        let (_, ac) = self.shape(a);
        let (br, bc) = self.shape(bias);
        if br != 1 || bc != ac {
            return Err(DiffError::ShapeMismatch { op: "add_bias", lhs: self.shape(a), rhs: (br, bc) });
        }
        let mut out = self.value(a).clone();
        let bias_row = self.nodes[bias.0].value.row(0).to_vec();
        for_each_chunk_mut(out.data_mut(), ac.max(1), |_, row| {
            for (o, &x) in row.iter_mut().zip(&bias_row) {
                *o += x;
            }
        });
        self.push_checked("add_bias", out, Op::AddBias(a, bias), self.any_grad(&[a, bias]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, DiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(DiffError::ShapeMismatch { op: "mul", lhs: sa, rhs: sb });
        }
        let mut out = self.value(a).clone();
        for (o, &x) in out.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
            *o *= x;
        }
        self.push_checked("mul", out, Op::Mul(a, b), self.any_grad(&[a, b]))
    }

    /// `scale * a + shift`, elementwise with scalar coefficients.
    pub fn affine(&mut self, a: TensorId, scale: f64, shift: f64) -> Result<TensorId, DiffError> {
        let mut out = self.value(a).clone();
        for o in out.data_mut() {
            *o = scale * *o + shift;
        }
        self.push_checked("affine", out, Op::Affine(a, scale), self.any_grad(&[a]))
    }

    /// Row-wise concatenation: row `i` of the result is row `i` of `a`
    /// followed by row `i` of `b`.
    pub fn concat_rows(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, DiffError> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ar != br {
            return Err(DiffError::ShapeMismatch { op: "concat_rows", lhs: (ar, ac), rhs: (br, bc) });
        }
        let mut out = Matrix::zeros(ar, ac + bc);
        let av = self.value(a);
        let bv = self.value(b);
        for i in 0..ar {
            out.row_mut(i)[..ac].copy_from_slice(av.row(i));
            out.row_mut(i)[ac..].copy_from_slice(bv.row(i));
        }
        self.push_checked("concat_rows", out, Op::ConcatRows(a, b), self.any_grad(&[a, b]))
    }

    /// Copies columns `from..to` of `a`.
    pub fn slice_cols(&mut self, a: TensorId, from: usize, to: usize) -> Result<TensorId, DiffError> {
        let (ar, ac) = self.shape(a);
        if from > to || to > ac {
            return Err(DiffError::BadShape {
                op: "slice_cols",
                expected: format!("column range {from}..{to} within 0..{ac}"),
                got_rows: ar,
                got_cols: ac,
            });
        }
        let mut out = Matrix::zeros(ar, to - from);
        let av = self.value(a);
        for i in 0..ar {
            out.row_mut(i).copy_from_slice(&av.row(i)[from..to]);
        }
        self.push_checked("slice_cols", out, Op::SliceCols(a, from), self.any_grad(&[a]))
    }

    /// Row `e` of the result is row `idx[e]` of `a`.
    pub fn gather_rows(&mut self, a: TensorId, idx: Arc<Vec<usize>>) -> Result<TensorId, DiffError> {
        let (ar, ac) = self.shape(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= ar) {
            return Err(DiffError::RowOutOfBounds { op: "gather_rows", index: bad, bound: ar });
        }
        let mut out = Matrix::zeros(idx.len(), ac);
        let av = self.value(a);
        for_each_chunk_mut(out.data_mut(), ac.max(1), |e, row| {
            row.copy_from_slice(av.row(idx[e]));
        });
        self.push_checked("gather_rows", out, Op::GatherRows(a, idx), self.any_grad(&[a]))
    }

    /// Multiplies row `i` of `a` by the scalar `weights[i]` (`weights` is
    /// `r x 1`).
    pub fn scale_rows(&mut self, a: TensorId, weights: TensorId) -> Result<TensorId, DiffError> {
        let (ar, ac) = self.shape(a);
        let (wr, wc) = self.shape(weights);
        if wr != ar || wc != 1 {
            return Err(DiffError::ShapeMismatch { op: "scale_rows", lhs: (ar, ac), rhs: (wr, wc) });
        }
        let mut out = self.value(a).clone();
        let wv = self.value(weights);
        for_each_chunk_mut(out.data_mut(), ac.max(1), |i, row| {
            let w = wv.get(i, 0);
            for o in row {
                *o *= w;
            }
        });
        self.push_checked("scale_rows", out, Op::ScaleRows(a, weights), self.any_grad(&[a, weights]))
    }

    pub fn leaky_relu(&mut self, a: TensorId, slope: f64) -> Result<TensorId, DiffError> {
        let mut out = self.value(a).clone();
        for o in out.data_mut() {
            if *o < 0.0 {
                *o *= slope;
            }
        }
        self.push_checked("leaky_relu", out, Op::LeakyRelu(a, slope), self.any_grad(&[a]))
    }

    pub fn elu(&mut self, a: TensorId) -> Result<TensorId, DiffError> {
        let mut out = self.value(a).clone();
        for o in out.data_mut() {
            if *o < 0.0 {
                *o = o.exp_m1();
            }
        }
        self.push_checked("elu", out, Op::Elu(a), self.any_grad(&[a]))
    }

    pub fn exp(&mut self, a: TensorId) -> Result<TensorId, DiffError> {
        let mut out = self.value(a).clone();
        for o in out.data_mut() {
            *o = o.exp();
        }
        self.push_checked("exp", out, Op::Exp(a), self.any_grad(&[a]))
    }

    pub fn log(&mut self, a: TensorId) -> Result<TensorId, DiffError> {
        let mut out = self.value(a).clone();
        for o in out.data_mut() {
            *o = o.ln();
        }
        self.push_checked("log", out, Op::Log(a), self.any_grad(&[a]))
    }

    pub fn sigmoid(&mut self, a: TensorId) -> Result<TensorId, DiffError> {
        let mut out = self.value(a).clone();
        for o in out.data_mut() {
            *o = if *o >= 0.0 {
                1.0 / (1.0 + (-*o).exp())
            } else {
                let e = o.exp();
                e / (1.0 + e)
            };
        }
        self.push_checked("sigmoid", out, Op::Sigmoid(a), self.any_grad(&[a]))
    }

    /// Clamps into `[lo, hi]`. The gradient passes through wherever the input
    /// already lies inside the range and is zero outside.
    pub fn clamp(&mut self, a: TensorId, lo: f64, hi: f64) -> Result<TensorId, DiffError> {
        assert!(lo <= hi, "clamp bounds out of order");
        let mut out = self.value(a).clone();
        for o in out.data_mut() {
            *o = o.clamp(lo, hi);
        }
        self.push_checked("clamp", out, Op::Clamp(a, lo, hi), self.any_grad(&[a]))
    }

    /// Sum of all entries, as a `1 x 1` tensor.
    pub fn sum_all(&mut self, a: TensorId) -> Result<TensorId, DiffError> {
        let mut acc = 0.0;
        for &x in self.value(a).data() {
            acc += x;
        }
        self.push_checked("sum_all", Matrix::scalar(acc), Op::SumAll(a), self.any_grad(&[a]))
    }

    /// Softmax over each row, shifted by the row max for stability.
    pub fn softmax_rows(&mut self, a: TensorId) -> Result<TensorId, DiffError> {
        let (ar, ac) = self.shape(a);
        if ac == 0 {
            return Err(DiffError::BadShape {
                op: "softmax_rows",
                expected: "at least one column".into(),
                got_rows: ar,
                got_cols: 0,
            });
        }
        let mut out = self.value(a).clone();
        for_each_chunk_mut(out.data_mut(), ac, |_, row| softmax_in_place(row));
        self.push_checked("softmax_rows", out, Op::SoftmaxRows(a), self.any_grad(&[a]))
    }

    /// Softmax over each segment of a column of scores; the rows of segment
    /// `s` are `offsets[s]..offsets[s + 1]`. Every segment must be non-empty.
    pub fn segment_softmax(&mut self, scores: TensorId, segments: &Segments) -> Result<TensorId, DiffError> {
        let (sr, sc) = self.shape(scores);
        if sc != 1 || sr != segments.total() {
            return Err(DiffError::BadShape {
                op: "segment_softmax",
                expected: format!("a {} x 1 score column", segments.total()),
                got_rows: sr,
                got_cols: sc,
            });
        }
        if let Some(s) = (0..segments.len()).find(|&s| {
            let (lo, hi) = segments.bounds(s);
            lo == hi
        }) {
            return Err(DiffError::EmptySegment { op: "segment_softmax", segment: s });
        }
        let mut out = self.value(scores).clone();
        for_each_part_mut(out.data_mut(), 1, segments.offsets(), |_, part| softmax_in_place(part));
        self.push_checked(
            "segment_softmax",
            out,
            Op::SegmentSoftmax(scores, segments.clone()),
            self.any_grad(&[scores]),
        )
    }

    /// Per segment `s`, sums `weights[e] * values[e]` over the segment's rows
    /// `e`; the result has one row per segment.
    pub fn segment_weighted_sum(
        &mut self,
        weights: TensorId,
        values: TensorId,
        segments: &Segments,
    ) -> Result<TensorId, DiffError> {
        let (wr, wc) = self.shape(weights);
        let (vr, vc) = self.shape(values);
        if wc != 1 || wr != vr {
            return Err(DiffError::ShapeMismatch { op: "segment_weighted_sum", lhs: (wr, wc), rhs: (vr, vc) });
        }
        if vr != segments.total() {
            return Err(DiffError::BadShape {
                op: "segment_weighted_sum",
                expected: format!("{} rows grouped by the segments", segments.total()),
                got_rows: vr,
                got_cols: vc,
            });
        }
        let mut out = Matrix::zeros(segments.len(), vc);
        let wv = self.value(weights);
        let vv = self.value(values);
        let offsets = segments.offsets();
        for_each_chunk_mut(out.data_mut(), vc.max(1), |s, out_row| {
            for e in offsets[s]..offsets[s + 1] {
                let w = wv.get(e, 0);
                for (o, &x) in out_row.iter_mut().zip(vv.row(e)) {
                    *o += w * x;
                }
            }
        });
        self.push_checked(
            "segment_weighted_sum",
            out,
            Op::SegmentWeightedSum { weights, values, segments: segments.clone() },
            self.any_grad(&[weights, values]),
        )
    }

    /// Fused attention-score kernel. For edge `e` with target `t` and source
    /// `s`, computes `score . leaky_relu(target_feats[t] + source_feats[s])`
    /// without materializing the per-edge feature rows. Equivalent to
    /// gather + add + leaky_relu + matmul, but with O(edges) memory.
    pub fn edge_attention_logits(
        &mut self,
        target_feats: TensorId,
        source_feats: TensorId,
        score: TensorId,
        edges: &EdgeIndex,
        slope: f64,
    ) -> Result<TensorId, DiffError> {
        let (tr, tc) = self.shape(target_feats);
        let (sr, sc) = self.shape(source_feats);
        let (vr, vc) = self.shape(score);
        if tc != sc {
            return Err(DiffError::ShapeMismatch { op: "edge_attention_logits", lhs: (tr, tc), rhs: (sr, sc) });
        }
        if vr != tc || vc != 1 {
            return Err(DiffError::BadShape {
                op: "edge_attention_logits",
                expected: format!("a {tc} x 1 score vector"),
                got_rows: vr,
                got_cols: vc,
            });
        }
        if tr != edges.num_targets() {
            return Err(DiffError::BadShape {
                op: "edge_attention_logits",
                expected: format!("{} target rows", edges.num_targets()),
                got_rows: tr,
                got_cols: tc,
            });
        }
        if let Some(&bad) = edges.sources().iter().find(|&&s| s >= sr) {
            return Err(DiffError::RowOutOfBounds { op: "edge_attention_logits", index: bad, bound: sr });
        }
        let mut out = Matrix::zeros(edges.num_edges(), 1);
        let tv = self.value(target_feats);
        let sv = self.value(source_feats);
        let score_col: Vec<f64> = self.value(score).data().to_vec();
        let offsets = edges.offsets();
        let src = edges.sources();
        for_each_part_mut(out.data_mut(), 1, offsets, |t, part| {
            let t_row = tv.row(t);
            for (o, &s) in part.iter_mut().zip(&src[offsets[t]..offsets[t + 1]]) {
                let s_row = sv.row(s);
                let mut acc = 0.0;
                for d in 0..t_row.len() {
                    let pre = t_row[d] + s_row[d];
                    let act = if pre < 0.0 { slope * pre } else { pre };
                    acc += score_col[d] * act;
                }
                *o = acc;
            }
        });
        self.push_checked(
            "edge_attention_logits",
            out,
            Op::EdgeAttentionLogits { target_feats, source_feats, score, edges: edges.clone(), slope },
            self.any_grad(&[target_feats, source_feats, score]),
        )
    }

    /// Fused attention-combine kernel. Row `t` of the result is
    /// `sum over edges e with target t of coeffs[e] * values[src[e]]`,
    /// i.e. gather + scale + segment sum without the per-edge value rows.
    pub fn attention_weighted_sum(
        &mut self,
        coeffs: TensorId,
        values: TensorId,
        edges: &EdgeIndex,
    ) -> Result<TensorId, DiffError> {
        let (cr, cc) = self.shape(coeffs);
        let (vr, vc) = self.shape(values);
        if cc != 1 || cr != edges.num_edges() {
            return Err(DiffError::BadShape {
                op: "attention_weighted_sum",
                expected: format!("a {} x 1 coefficient column", edges.num_edges()),
                got_rows: cr,
                got_cols: cc,
            });
        }
        if let Some(&bad) = edges.sources().iter().find(|&&s| s >= vr) {
            return Err(DiffError::RowOutOfBounds { op: "attention_weighted_sum", index: bad, bound: vr });
        }
        let mut out = Matrix::zeros(edges.num_targets(), vc);
        let cv = self.value(coeffs);
        let vv = self.value(values);
        let offsets = edges.offsets();
        let src = edges.sources();
        for_each_chunk_mut(out.data_mut(), vc.max(1), |t, out_row| {
            for e in offsets[t]..offsets[t + 1] {
                let c = cv.get(e, 0);
                for (o, &x) in out_row.iter_mut().zip(vv.row(src[e])) {
                    *o += c * x;
                }
            }
        });
        self.push_checked(
            "attention_weighted_sum",
            out,
            Op::AttentionWeightedSum { coeffs, values, edges: edges.clone() },
            self.any_grad(&[coeffs, values]),
        )
    }

    // ---- backward --------------------------------------------------------

    /// Accumulates `d root / d tensor` for every recorded tensor that tracks
    /// gradients. `root` must be `1 x 1`. Calling it again resets all
    /// gradients first.
    pub fn backward(&mut self, root: TensorId) -> Result<(), DiffError> {
        let (rr, rc) = self.shape(root);
        if (rr, rc) != (1, 1) {
            return Err(DiffError::NonScalarRoot { rows: rr, cols: rc });
        }
        self.grads.clear();
        self.grads.resize_with(self.nodes.len(), || None);
        for (i, node) in self.nodes.iter().enumerate() {
            if node.needs_grad {
                self.grads[i] = Some(Matrix::zeros(node.value.rows(), node.value.cols()));
            }
        }
        if !self.nodes[root.0].needs_grad {
            // Nothing upstream tracks gradients; all buffers stay zero.
            return Ok(());
        }
        self.grads[root.0] = Some(Matrix::scalar(1.0));

        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let gout = self.grads[i].take().expect("gradient buffer missing");
            step(&self.nodes, &mut self.grads, i, &gout);
            self.grads[i] = Some(gout);
        }
        Ok(())
    }
}

/// Adds the contribution of node `i` (whose output gradient is `g`) to the
/// gradients of its inputs. Inputs always precede `i` on the tape, and a
/// `None` gradient slot means the input does not track gradients.
fn step(nodes: &[Node], grads: &mut [Option<Matrix>], i: usize, g: &Matrix) {
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Matmul(a, b) => {
            if let Some(ga) = grads[a.0].as_mut() {
                let bv = &nodes[b.0].value;
                let cols = ga.cols();
                for_each_chunk_mut(ga.data_mut(), cols.max(1), |r, ga_row| {
                    let g_row = g.row(r);
                    for (t, o) in ga_row.iter_mut().enumerate() {
                        let mut acc = 0.0;
                        for (&gj, &btj) in g_row.iter().zip(bv.row(t)) {
                            acc += gj * btj;
                        }
                        *o += acc;
                    }
                });
            }
            if let Some(gb) = grads[b.0].as_mut() {
                let av = &nodes[a.0].value;
                let cols = gb.cols();
                for_each_chunk_mut(gb.data_mut(), cols.max(1), |t, gb_row| {
                    for r in 0..av.rows() {
                        let art = av.get(r, t);
                        if art == 0.0 {
                            continue;
                        }
                        for (o, &gj) in gb_row.iter_mut().zip(g.row(r)) {
                            *o += art * gj;
                        }
                    }
                });
            }
        }
        Op::Transpose(a) => {
            if let Some(ga) = grads[a.0].as_mut() {
                for r in 0..g.rows() {
                    for c in 0..g.cols() {
                        let cur = ga.get(c, r);
                        ga.set(c, r, cur + g.get(r, c));
                    }
                }
            }
        }
        Op::Add(a, b) => {
            for id in [a, b] {
                if let Some(gi) = grads[id.0].as_mut() {
                    for (o, &x) in gi.data_mut().iter_mut().zip(g.data()) {
                        *o += x;
                    }
                }
            }
        }
        Op::AddBias(a, bias) => {
            if let Some(ga) = grads[a.0].as_mut() {
                for (o, &x) in ga.data_mut().iter_mut().zip(g.data()) {
                    *o += x;
                }
            }
            if let Some(gb) = grads[bias.0].as_mut() {
                let row = gb.row_mut(0);
                for r in 0..g.rows() {
                    for (o, &x) in row.iter_mut().zip(g.row(r)) {
                        *o += x;
                    }
                }
            }
        }
        Op::Mul(a, b) => {
            if let Some(ga) = grads[a.0].as_mut() {
                for ((o, &gx), &bx) in ga.data_mut().iter_mut().zip(g.data()).zip(nodes[b.0].value.data()) {
                    *o += gx * bx;
                }
            }
            if let Some(gb) = grads[b.0].as_mut() {
                for ((o, &gx), &ax) in gb.data_mut().iter_mut().zip(g.data()).zip(nodes[a.0].value.data()) {
                    *o += gx * ax;
                }
            }
        }
        Op::Affine(a, scale) => {
            if let Some(ga) = grads[a.0].as_mut() {
                for (o, &x) in ga.data_mut().iter_mut().zip(g.data()) {
                    *o += scale * x;
                }
            }
        }
        Op::ConcatRows(a, b) => {
            let ac = nodes[a.0].value.cols();
            if let Some(ga) = grads[a.0].as_mut() {
                for r in 0..g.rows() {
                    for (o, &x) in ga.row_mut(r).iter_mut().zip(&g.row(r)[..ac]) {
                        *o += x;
                    }
                }
            }
            if let Some(gb) = grads[b.0].as_mut() {
                for r in 0..g.rows() {
                    for (o, &x) in gb.row_mut(r).iter_mut().zip(&g.row(r)[ac..]) {
                        *o += x;
                    }
                }
            }
        }
        Op::SliceCols(a, from) => {
            if let Some(ga) = grads[a.0].as_mut() {
                for r in 0..g.rows() {
                    for (o, &x) in ga.row_mut(r)[*from..*from + g.cols()].iter_mut().zip(g.row(r)) {
                        *o += x;
                    }
                }
            }
        }
        Op::GatherRows(a, idx) => {
            // Scatter-add with arbitrary destinations; sequential to keep the
            // accumulation order fixed.
            if let Some(ga) = grads[a.0].as_mut() {
                for (e, &row) in idx.iter().enumerate() {
                    for (o, &x) in ga.row_mut(row).iter_mut().zip(g.row(e)) {
                        *o += x;
                    }
                }
            }
        }
        Op::ScaleRows(a, w) => {
            if let Some(ga) = grads[a.0].as_mut() {
                let wv = &nodes[w.0].value;
                let cols = ga.cols();
                for_each_chunk_mut(ga.data_mut(), cols.max(1), |r, ga_row| {
                    let wr = wv.get(r, 0);
                    for (o, &x) in ga_row.iter_mut().zip(g.row(r)) {
                        *o += wr * x;
                    }
                });
            }
            if let Some(gw) = grads[w.0].as_mut() {
                let av = &nodes[a.0].value;
                for_each_chunk_mut(gw.data_mut(), 1, |r, gw_row| {
                    let mut acc = 0.0;
                    for (&gx, &ax) in g.row(r).iter().zip(av.row(r)) {
                        acc += gx * ax;
                    }
                    gw_row[0] += acc;
                });
            }
        }
        Op::LeakyRelu(a, slope) => {
            if let Some(ga) = grads[a.0].as_mut() {
                for ((o, &gx), &x) in ga.data_mut().iter_mut().zip(g.data()).zip(nodes[a.0].value.data()) {
                    *o += gx * if x < 0.0 { *slope } else { 1.0 };
                }
            }
        }
        Op::Elu(a) => {
            if let Some(ga) = grads[a.0].as_mut() {
                let y = &nodes[i].value;
                for (((o, &gx), &x), &yx) in ga
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .zip(nodes[a.0].value.data())
                    .zip(y.data())
                {
                    *o += gx * if x < 0.0 { yx + 1.0 } else { 1.0 };
                }
            }
        }
        Op::Exp(a) => {
            if let Some(ga) = grads[a.0].as_mut() {
                for ((o, &gx), &yx) in ga.data_mut().iter_mut().zip(g.data()).zip(nodes[i].value.data()) {
                    *o += gx * yx;
                }
            }
        }
        Op::Log(a) => {
            if let Some(ga) = grads[a.0].as_mut() {
                for ((o, &gx), &x) in ga.data_mut().iter_mut().zip(g.data()).zip(nodes[a.0].value.data()) {
                    *o += gx / x;
                }
            }
        }
        Op::Sigmoid(a) => {
            if let Some(ga) = grads[a.0].as_mut() {
                for ((o, &gx), &yx) in ga.data_mut().iter_mut().zip(g.data()).zip(nodes[i].value.data()) {
                    *o += gx * yx * (1.0 - yx);
                }
            }
        }
        Op::Clamp(a, lo, hi) => {
            if let Some(ga) = grads[a.0].as_mut() {
                for ((o, &gx), &x) in ga.data_mut().iter_mut().zip(g.data()).zip(nodes[a.0].value.data()) {
                    if (*lo..=*hi).contains(&x) {
                        *o += gx;
                    }
                }
            }
        }
        Op::SumAll(a) => {
            if let Some(ga) = grads[a.0].as_mut() {
                let gs = g.scalar_value();
                for o in ga.data_mut() {
                    *o += gs;
                }
            }
        }
        Op::SoftmaxRows(a) => {
            if let Some(ga) = grads[a.0].as_mut() {
                let y = &nodes[i].value;
                let cols = ga.cols();
                for_each_chunk_mut(ga.data_mut(), cols, |r, ga_row| {
                    let y_row = y.row(r);
                    let g_row = g.row(r);
                    let mut dot = 0.0;
                    for (&gx, &yx) in g_row.iter().zip(y_row) {
                        dot += gx * yx;
                    }
                    for ((o, &gx), &yx) in ga_row.iter_mut().zip(g_row).zip(y_row) {
                        *o += yx * (gx - dot);
                    }
                });
            }
        }
        Op::SegmentSoftmax(a, segments) => {
            if let Some(ga) = grads[a.0].as_mut() {
                let y = &nodes[i].value;
                for_each_part_mut(ga.data_mut(), 1, segments.offsets(), |s, part| {
                    let (lo, hi) = segments.bounds(s);
                    let mut dot = 0.0;
                    for e in lo..hi {
                        dot += g.get(e, 0) * y.get(e, 0);
                    }
                    for (o, e) in part.iter_mut().zip(lo..hi) {
                        *o += y.get(e, 0) * (g.get(e, 0) - dot);
                    }
                });
            }
        }
        Op::SegmentWeightedSum { weights, values, segments } => {
            if let Some(gw) = grads[weights.0].as_mut() {
                let vv = &nodes[values.0].value;
                for_each_part_mut(gw.data_mut(), 1, segments.offsets(), |s, part| {
                    let (lo, _) = segments.bounds(s);
                    let g_row = g.row(s);
                    for (k, o) in part.iter_mut().enumerate() {
                        let mut acc = 0.0;
                        for (&gx, &x) in g_row.iter().zip(vv.row(lo + k)) {
                            acc += gx * x;
                        }
                        *o += acc;
                    }
                });
            }
            if let Some(gv) = grads[values.0].as_mut() {
                let wv = &nodes[weights.0].value;
                let cols = gv.cols().max(1);
                for_each_part_mut(gv.data_mut(), cols, segments.offsets(), |s, part| {
                    let (lo, hi) = segments.bounds(s);
                    let g_row = g.row(s);
                    for (k, e) in (lo..hi).enumerate() {
                        let w = wv.get(e, 0);
                        for (o, &gx) in part[k * cols..(k + 1) * cols].iter_mut().zip(g_row) {
                            *o += w * gx;
                        }
                    }
                });
            }
        }
        Op::EdgeAttentionLogits { target_feats, source_feats, score, edges, slope } => {
            let tv = &nodes[target_feats.0].value;
            let sv = &nodes[source_feats.0].value;
            let a = &nodes[score.0].value;
            let dim = tv.cols();
            let offsets = edges.offsets();
            let src = edges.sources();
            let slope = *slope;
            if let Some(gt) = grads[target_feats.0].as_mut() {
                for_each_chunk_mut(gt.data_mut(), dim.max(1), |t, gt_row| {
                    let t_row = tv.row(t);
                    for e in offsets[t]..offsets[t + 1] {
                        let ge = g.get(e, 0);
                        let s_row = sv.row(src[e]);
                        for d in 0..dim {
                            let pre = t_row[d] + s_row[d];
                            let deriv = if pre < 0.0 { slope } else { 1.0 };
                            gt_row[d] += ge * a.get(d, 0) * deriv;
                        }
                    }
                });
            }
            if let Some(gs) = grads[source_feats.0].as_mut() {
                // Source rows repeat arbitrarily; scatter sequentially.
                for t in 0..edges.num_targets() {
                    let t_row = tv.row(t);
                    for e in offsets[t]..offsets[t + 1] {
                        let ge = g.get(e, 0);
                        let s = src[e];
                        for d in 0..dim {
                            let pre = t_row[d] + sv.get(s, d);
                            let deriv = if pre < 0.0 { slope } else { 1.0 };
                            let cur = gs.get(s, d);
                            gs.set(s, d, cur + ge * a.get(d, 0) * deriv);
                        }
                    }
                }
            }
            if let Some(gv) = grads[score.0].as_mut() {
                for t in 0..edges.num_targets() {
                    let t_row = tv.row(t);
                    for e in offsets[t]..offsets[t + 1] {
                        let ge = g.get(e, 0);
                        let s_row = sv.row(src[e]);
                        for d in 0..dim {
                            let pre = t_row[d] + s_row[d];
                            let act = if pre < 0.0 { slope * pre } else { pre };
                            let cur = gv.get(d, 0);
                            gv.set(d, 0, cur + ge * act);
                        }
                    }
                }
            }
        }
        Op::AttentionWeightedSum { coeffs, values, edges } => {
            let offsets = edges.offsets();
            let src = edges.sources();
            if let Some(gc) = grads[coeffs.0].as_mut() {
                let vv = &nodes[values.0].value;
                for_each_part_mut(gc.data_mut(), 1, offsets, |t, part| {
                    let g_row = g.row(t);
                    for (k, o) in part.iter_mut().enumerate() {
                        let mut acc = 0.0;
                        for (&gx, &x) in g_row.iter().zip(vv.row(src[offsets[t] + k])) {
                            acc += gx * x;
                        }
                        *o += acc;
                    }
                });
            }
            if let Some(gv) = grads[values.0].as_mut() {
                let cv = &nodes[coeffs.0].value;
                for t in 0..edges.num_targets() {
                    for e in offsets[t]..offsets[t + 1] {
                        let c = cv.get(e, 0);
                        for (o, &gx) in gv.row_mut(src[e]).iter_mut().zip(g.row(t)) {
                            *o += c * gx;
                        }
                    }
                }
            }
        }
    }
}

/// Max-shifted softmax over one contiguous slice.
fn softmax_in_place(part: &mut [f64]) {
    let mut max = f64::NEG_INFINITY;
    for &x in part.iter() {
        if x > max {
            max = x;
        }
    }
    let mut denom = 0.0;
    for x in part.iter_mut() {
        *x = (*x - max).exp();
        denom += *x;
    }
    for x in part.iter_mut() {
        *x /= denom;
    }
}
