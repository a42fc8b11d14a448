//! The fraud-detection model: stacked relation-aware attention blocks over
//! a multi-relation graph, with a final attention over layer depths.
//!
//! Each block refines node states in three moves:
//!
//! 1. per relation, attend over neighbors (scores depend on both
//!    endpoints, so neighbor rankings can differ per target node);
//! 2. run every node through a self transform as an extra channel;
//! 3. attend over the per-relation channels to mix them into the next
//!    state.
//!
//! After the blocks, a third attention combines the states from all depths
//! (including the input embedding) into the representation the output MLP
//! scores. Multi-head throughout: each head works on an independent slice
//! of the hidden width and the slices are concatenated.

mod export;
mod forward;
mod params;

pub use export::{attention_csv, AttentionKind};
pub use forward::{
    check_model_gradients, forward, predict, predict_with_cache, training_loss, AttentionCache,
    ForwardState, PROB_CLAMP,
};
pub use params::{
    load_checkpoint, save_checkpoint, AttentionHead, BlockIds, CheckpointMeta, DragParams, HeadIds, Mlp, MlpIds,
    ModelDims, ParamIds, RelationBlock,
};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diff::DiffError;
use crate::graph::MultiRelationGraph;

/// Slope of the LeakyReLU inside every attention scoring function.
pub const SCORE_SLOPE: f64 = 0.2;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("relation {relation} leaves node {node} without neighbors; add self-loops before the forward pass")]
    EmptyNeighborhood { relation: usize, node: usize },
    #[error("invalid configuration: {what}")]
    BadConfig { what: String },
    #[error("checkpoint {path}: {message}")]
    BadCheckpoint { path: String, message: String },
    #[error("could not access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Nonlinearity applied to aggregated node states. Attention scoring always
/// uses LeakyReLU and MLP interiors always use ELU, independent of this.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    #[default]
    Elu,
    LeakyRelu,
    Relu,
}

impl FromStr for Activation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "elu" => Ok(Self::Elu),
            "leaky-relu" => Ok(Self::LeakyRelu),
            "relu" => Ok(Self::Relu),
            other => Err(format!("unknown activation {other:?}; expected elu, leaky-relu or relu")),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Elu => "elu",
            Self::LeakyRelu => "leaky-relu",
            Self::Relu => "relu",
        })
    }
}

/// Which terms of the batch objective to keep. `PositiveTermOnly` drops the
/// normal-class log term entirely; it exists for comparison runs and is
/// deliberately not reachable from the command line.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossVariant {
    #[default]
    BinaryCrossEntropy,
    PositiveTermOnly,
}

/// Structural variants used in the comparison protocol.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationMode {
    #[default]
    Full,
    /// Collapse all relations into one merged adjacency before training.
    NoRelationTypes,
    /// Score nodes from the deepest state alone instead of attending over
    /// all depths.
    NoLayerAggregation,
    /// Force a stack depth of one.
    SingleLayer,
}

impl AblationMode {
    pub fn effective_layers(self, layers: usize) -> usize {
        match self {
            Self::SingleLayer => 1,
            _ => layers,
        }
    }

    pub fn all() -> [Self; 4] {
        [Self::Full, Self::NoRelationTypes, Self::NoLayerAggregation, Self::SingleLayer]
    }
}

impl FromStr for AblationMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "full" => Ok(Self::Full),
            "no-relation-types" => Ok(Self::NoRelationTypes),
            "no-layer-aggregation" => Ok(Self::NoLayerAggregation),
            "single-layer" => Ok(Self::SingleLayer),
            other => Err(format!(
                "unknown variant {other:?}; expected full, no-relation-types, no-layer-aggregation or single-layer"
            )),
        }
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Full => "full",
            Self::NoRelationTypes => "no-relation-types",
            Self::NoLayerAggregation => "no-layer-aggregation",
            Self::SingleLayer => "single-layer",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub hidden_dim: usize,
    /// Stack depth L; the model allocates L + 1 blocks and attends over the
    /// L + 1 states preceding the last block's output.
    pub layers: usize,
    /// Head count shared by all three attention stages.
    pub heads: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub activation: Activation,
    pub loss: LossVariant,
    /// Decision cut for the positive class; scores strictly above it count
    /// as fraud.
    pub threshold: f64,
    /// Nodes per objective batch; the forward pass always covers the whole
    /// graph, only the loss is restricted.
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a validation improvement before stopping.
    pub patience: usize,
    /// Run the last allocated block even though the depth attention ignores
    /// its output. Off, the block is skipped; predictions are identical
    /// either way because that output feeds nothing.
    pub final_relation_block: bool,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            hidden_dim: 64,
            layers: 2,
            heads: 2,
            learning_rate: 0.01,
            weight_decay: 0.001,
            activation: Activation::Elu,
            loss: LossVariant::BinaryCrossEntropy,
            threshold: 0.5,
            batch_size: 1024,
            max_epochs: 1000,
            patience: 100,
            final_relation_block: true,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |what: String| Err(ModelError::BadConfig { what });
        if self.hidden_dim == 0 {
            return bad("hidden_dim is zero".into());
        }
        if self.heads == 0 {
            return bad("heads is zero".into());
        }
        if !self.hidden_dim.is_multiple_of(self.heads) {
            return bad(format!(
                "hidden_dim {} is not divisible by heads {}; every attention stage splits the hidden width across heads",
                self.hidden_dim, self.heads
            ));
        }
        if self.layers == 0 {
            return bad("layers is zero".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be positive and finite", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay {} must be non-negative and finite", self.weight_decay));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad(format!("threshold {} outside (0, 1)", self.threshold));
        }
        if self.batch_size == 0 {
            return bad("batch_size is zero".into());
        }
        if self.max_epochs == 0 {
            return bad("max_epochs is zero".into());
        }
        if self.patience == 0 {
            return bad("patience is zero".into());
        }
        Ok(())
    }
}

/// Applies the structural part of a variant that changes the input rather
/// than the network: merging relations. Other variants return the graph
/// unchanged.
pub fn prepare_graph(graph: &MultiRelationGraph, mode: AblationMode) -> MultiRelationGraph {
    match mode {
        AblationMode::NoRelationTypes => graph.merge_relations(),
        _ => graph.clone(),
    }
}
