//! Parameter storage, initialization and checkpoints.
//!
//! All tensors live in one nested structure with a single canonical
//! traversal order. Initialization draws, optimizer state, gradient
//! collection and checkpoint files all walk that same order, so a seed or
//! a file pins every weight unambiguously.
//!
//! Weight matrices are stored output-major (`out_dim x in_dim`) and applied
//! to row-major activations through a transpose on the tape.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{AblationMode, HyperParams, ModelError};
use crate::diff::{Matrix, Tape, TensorId};

/// Shape bookkeeping shared by the parameter set, its tape binding and the
/// forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    pub relations: usize,
    /// Relation-refinement blocks allocated; one more than the effective
    /// depth, since the final representation also attends over the input
    /// embedding.
    pub blocks: usize,
}

impl ModelDims {
    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.heads
    }
}

/// Two affine maps with one ELU between them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

impl Mlp {
    fn build(d_in: usize, hidden: usize, d_out: usize, fill: &mut impl FnMut(usize, usize, usize, usize) -> Matrix) -> Self {
        Self {
            w1: fill(hidden, d_in, d_in, hidden),
            b1: Matrix::zeros(1, hidden),
            w2: fill(d_out, hidden, hidden, d_out),
            b2: Matrix::zeros(1, d_out),
        }
    }

    fn visit(&self, prefix: &str, f: &mut impl FnMut(String, &Matrix)) {
        f(format!("{prefix}.w1"), &self.w1);
        f(format!("{prefix}.b1"), &self.b1);
        f(format!("{prefix}.w2"), &self.w2);
        f(format!("{prefix}.b2"), &self.b2);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut Matrix)) {
        f(format!("{prefix}.w1"), &mut self.w1);
        f(format!("{prefix}.b1"), &mut self.b1);
        f(format!("{prefix}.w2"), &mut self.w2);
        f(format!("{prefix}.b2"), &mut self.b2);
    }

    fn bind(&self, tape: &mut Tape, requires_grad: bool) -> MlpIds {
        MlpIds {
            w1: tape.leaf(self.w1.clone(), requires_grad),
            b1: tape.leaf(self.b1.clone(), requires_grad),
            w2: tape.leaf(self.w2.clone(), requires_grad),
            b2: tape.leaf(self.b2.clone(), requires_grad),
        }
    }
}

/// One attention head: a pairwise transform feeding a scoring vector, plus
/// a value projection onto this head's slice of the hidden width.
///
/// `transform` is `hidden x (query_width + hidden)`; its left columns act on
/// the query row, the right columns on the candidate row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionHead {
    pub transform: Matrix,
    pub score: Matrix,
    pub project: Matrix,
}

impl AttentionHead {
    fn build(query_width: usize, hidden: usize, head_dim: usize, fill: &mut impl FnMut(usize, usize, usize, usize) -> Matrix) -> Self {
        let pair = query_width + hidden;
        Self {
            transform: fill(hidden, pair, pair, hidden),
            score: fill(hidden, 1, hidden, 1),
            project: fill(head_dim, hidden, hidden, head_dim),
        }
    }

    fn visit(&self, prefix: &str, f: &mut impl FnMut(String, &Matrix)) {
        f(format!("{prefix}.transform"), &self.transform);
        f(format!("{prefix}.score"), &self.score);
        f(format!("{prefix}.project"), &self.project);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut Matrix)) {
        f(format!("{prefix}.transform"), &mut self.transform);
        f(format!("{prefix}.score"), &mut self.score);
        f(format!("{prefix}.project"), &mut self.project);
    }

    fn bind(&self, tape: &mut Tape, requires_grad: bool) -> HeadIds {
        HeadIds {
            transform: tape.leaf(self.transform.clone(), requires_grad),
            score: tape.leaf(self.score.clone(), requires_grad),
            project: tape.leaf(self.project.clone(), requires_grad),
        }
    }
}

/// One refinement block: neighbor attention per relation, a self transform,
/// and the attention that mixes those channels back together.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelationBlock {
    /// `relations[k][h]` is head `h` for relation `k`.
    pub relations: Vec<Vec<AttentionHead>>,
    pub self_transform: Mlp,
    pub aggregation: Vec<AttentionHead>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DragParams {
    pub dims: ModelDims,
    pub input: Mlp,
    pub blocks: Vec<RelationBlock>,
    pub layer_agg: Vec<AttentionHead>,
    pub output: Mlp,
}

impl DragParams {
    /// Glorot-uniform weights, zero biases. Draws happen in canonical
    /// traversal order, so one seed fixes the whole model.
    pub fn init<R: Rng>(
        input_dim: usize,
        num_relations: usize,
        hyper: &HyperParams,
        mode: AblationMode,
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        Self::check_dims(input_dim, num_relations, hyper)?;
        let mut fill = |rows: usize, cols: usize, fan_in: usize, fan_out: usize| {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            Matrix::uniform(rows, cols, -bound, bound, rng)
        };
        Ok(Self::build(input_dim, num_relations, hyper, mode, &mut fill))
    }

    /// Same structure as [`init`](Self::init) with every weight zero; the
    /// checkpoint loader fills it in.
    pub fn allocate(
        input_dim: usize,
        num_relations: usize,
        hyper: &HyperParams,
        mode: AblationMode,
    ) -> Result<Self, ModelError> {
        Self::check_dims(input_dim, num_relations, hyper)?;
        let mut fill = |rows: usize, cols: usize, _: usize, _: usize| Matrix::zeros(rows, cols);
        Ok(Self::build(input_dim, num_relations, hyper, mode, &mut fill))
    }

    fn check_dims(input_dim: usize, num_relations: usize, hyper: &HyperParams) -> Result<(), ModelError> {
        hyper.validate()?;
        if input_dim == 0 {
            return Err(ModelError::BadConfig { what: "input dimension is zero".into() });
        }
        if num_relations == 0 {
            return Err(ModelError::BadConfig { what: "graph has no relations".into() });
        }
        Ok(())
    }

    fn build(
        input_dim: usize,
        num_relations: usize,
        hyper: &HyperParams,
        mode: AblationMode,
        fill: &mut impl FnMut(usize, usize, usize, usize) -> Matrix,
    ) -> Self {
        let hidden = hyper.hidden_dim;
        let head_dim = hidden / hyper.heads;
        let blocks_count = mode.effective_layers(hyper.layers) + 1;
        let dims = ModelDims {
            input_dim,
            hidden_dim: hidden,
            heads: hyper.heads,
            relations: num_relations,
            blocks: blocks_count,
        };
        let input = Mlp::build(input_dim, hidden, hidden, fill);
        let blocks = (0..blocks_count)
            .map(|_| RelationBlock {
                relations: (0..num_relations)
                    .map(|_| (0..hyper.heads).map(|_| AttentionHead::build(hidden, hidden, head_dim, fill)).collect())
                    .collect(),
                self_transform: Mlp::build(hidden, hidden, hidden, fill),
                aggregation: (0..hyper.heads).map(|_| AttentionHead::build(hidden, hidden, head_dim, fill)).collect(),
            })
            .collect();
        let layer_agg = (0..hyper.heads).map(|_| AttentionHead::build(input_dim, hidden, head_dim, fill)).collect();
        let output = Mlp::build(hidden, hidden, 1, fill);
        Self { dims, input, blocks, layer_agg, output }
    }

    /// Canonical traversal: input transform, blocks in order (relations,
    /// then self, then aggregation), layer attention, output transform.
    pub fn visit(&self, f: &mut impl FnMut(String, &Matrix)) {
        self.input.visit("input", f);
        for (l, block) in self.blocks.iter().enumerate() {
            for (k, heads) in block.relations.iter().enumerate() {
                for (h, head) in heads.iter().enumerate() {
                    head.visit(&format!("block{l}.rel{k}.head{h}"), f);
                }
            }
            block.self_transform.visit(&format!("block{l}.self"), f);
            for (h, head) in block.aggregation.iter().enumerate() {
                head.visit(&format!("block{l}.agg.head{h}"), f);
            }
        }
        for (h, head) in self.layer_agg.iter().enumerate() {
            head.visit(&format!("layer_agg.head{h}"), f);
        }
        self.output.visit("output", f);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(String, &mut Matrix)) {
        self.input.visit_mut("input", f);
        for (l, block) in self.blocks.iter_mut().enumerate() {
            for (k, heads) in block.relations.iter_mut().enumerate() {
                for (h, head) in heads.iter_mut().enumerate() {
                    head.visit_mut(&format!("block{l}.rel{k}.head{h}"), f);
                }
            }
            block.self_transform.visit_mut(&format!("block{l}.self"), f);
            for (h, head) in block.aggregation.iter_mut().enumerate() {
                head.visit_mut(&format!("block{l}.agg.head{h}"), f);
            }
        }
        for (h, head) in self.layer_agg.iter_mut().enumerate() {
            head.visit_mut(&format!("layer_agg.head{h}"), f);
        }
        self.output.visit_mut("output", f);
    }

    pub fn num_tensors(&self) -> usize {
        let mut count = 0;
        self.visit(&mut |_, _| count += 1);
        count
    }

    pub fn num_values(&self) -> usize {
        let mut count = 0;
        self.visit(&mut |_, m| count += m.len());
        count
    }

    /// Registers every tensor on the tape, in canonical order.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> ParamIds {
        ParamIds {
            dims: self.dims,
            input: self.input.bind(tape, requires_grad),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockIds {
                    relations: b.relations.iter().map(|heads| heads.iter().map(|h| h.bind(tape, requires_grad)).collect()).collect(),
                    self_transform: b.self_transform.bind(tape, requires_grad),
                    aggregation: b.aggregation.iter().map(|h| h.bind(tape, requires_grad)).collect(),
                })
                .collect(),
            layer_agg: self.layer_agg.iter().map(|h| h.bind(tape, requires_grad)).collect(),
            output: self.output.bind(tape, requires_grad),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MlpIds {
    pub w1: TensorId,
    pub b1: TensorId,
    pub w2: TensorId,
    pub b2: TensorId,
}

#[derive(Clone, Copy, Debug)]
pub struct HeadIds {
    pub transform: TensorId,
    pub score: TensorId,
    pub project: TensorId,
}

#[derive(Clone, Debug)]
pub struct BlockIds {
    pub relations: Vec<Vec<HeadIds>>,
    pub self_transform: MlpIds,
    pub aggregation: Vec<HeadIds>,
}

/// Tape-side mirror of [`DragParams`]; traversals match its canonical order
/// element for element.
#[derive(Clone, Debug)]
pub struct ParamIds {
    pub dims: ModelDims,
    pub input: MlpIds,
    pub blocks: Vec<BlockIds>,
    pub layer_agg: Vec<HeadIds>,
    pub output: MlpIds,
}

impl MlpIds {
    fn visit(&self, f: &mut impl FnMut(TensorId)) {
        f(self.w1);
        f(self.b1);
        f(self.w2);
        f(self.b2);
    }

    fn visit_weights(&self, f: &mut impl FnMut(TensorId)) {
        f(self.w1);
        f(self.w2);
    }
}

impl HeadIds {
    fn visit(&self, f: &mut impl FnMut(TensorId)) {
        f(self.transform);
        f(self.score);
        f(self.project);
    }
}

impl ParamIds {
    pub fn visit(&self, f: &mut impl FnMut(TensorId)) {
        self.input.visit(f);
        for block in &self.blocks {
            for heads in &block.relations {
                for head in heads {
                    head.visit(f);
                }
            }
            block.self_transform.visit(f);
            for head in &block.aggregation {
                head.visit(f);
            }
        }
        for head in &self.layer_agg {
            head.visit(f);
        }
        self.output.visit(f);
    }

    /// Only the tensors subject to weight decay: transforms, scoring
    /// vectors, projections and affine weights. Biases are exempt.
    pub fn visit_weights(&self, f: &mut impl FnMut(TensorId)) {
        self.input.visit_weights(f);
        for block in &self.blocks {
            for heads in &block.relations {
                for head in heads {
                    head.visit(f);
                }
            }
            block.self_transform.visit_weights(f);
            for head in &block.aggregation {
                head.visit(f);
            }
        }
        for head in &self.layer_agg {
            head.visit(f);
        }
        self.output.visit_weights(f);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub input_dim: usize,
    pub num_relations: usize,
    pub mode: AblationMode,
    pub hyper: HyperParams,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    shape: [usize; 2],
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    meta: CheckpointMeta,
    tensors: BTreeMap<String, TensorEntry>,
}

fn checkpoint_err(path: &Path, message: impl std::fmt::Display) -> ModelError {
    ModelError::BadCheckpoint { path: path.display().to_string(), message: message.to_string() }
}

/// JSON with shortest-round-trip number formatting: reloading restores the
/// exact f64 bit patterns that were saved.
pub fn save_checkpoint(path: &Path, params: &DragParams, meta: &CheckpointMeta) -> Result<(), ModelError> {
    let mut tensors = BTreeMap::new();
    params.visit(&mut |name, m| {
        tensors.insert(name, TensorEntry { shape: [m.rows(), m.cols()], values: m.data().to_vec() });
    });
    let file = CheckpointFile { meta: meta.clone(), tensors };
    let text = serde_json::to_string(&file).map_err(|e| checkpoint_err(path, e))?;
    std::fs::write(path, text).map_err(|source| ModelError::Io { path: path.display().to_string(), source })
}

pub fn load_checkpoint(path: &Path) -> Result<(DragParams, CheckpointMeta), ModelError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| ModelError::Io { path: path.display().to_string(), source })?;
    let mut file: CheckpointFile = serde_json::from_str(&text).map_err(|e| checkpoint_err(path, e))?;
    let meta = file.meta.clone();
    let mut params = DragParams::allocate(meta.input_dim, meta.num_relations, &meta.hyper, meta.mode)?;
    let mut problem: Option<String> = None;
    params.visit_mut(&mut |name, m| {
        if problem.is_some() {
            return;
        }
        match file.tensors.remove(&name) {
            None => problem = Some(format!("missing tensor {name:?}")),
            Some(entry) => {
                if entry.shape != [m.rows(), m.cols()] {
                    problem = Some(format!(
                        "tensor {name:?} has shape {:?}, expected {:?}",
                        entry.shape,
                        [m.rows(), m.cols()]
                    ));
                } else {
                    *m = Matrix::new(entry.shape[0], entry.shape[1], entry.values);
                }
            }
        }
    });
    if let Some(message) = problem {
        return Err(checkpoint_err(path, message));
    }
    if let Some(name) = file.tensors.keys().next() {
        return Err(checkpoint_err(path, format!("unknown tensor {name:?}")));
    }
    Ok((params, meta))
}
