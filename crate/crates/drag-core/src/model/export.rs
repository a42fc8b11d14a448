//! Flat CSV dumps of cached attention coefficients.
//!
//! All three stages share one schema:
//! `node_id,layer,relation_or_layer_index,head,coefficient`.
//!
//! * neighbor stage: one row per directed edge, repeated `node_id` rows in
//!   neighbor-list order identify the edges of that node (the schema has no
//!   neighbor column, so order is the only edge identity);
//! * channel stage: `relation_or_layer_index` counts the relation channels
//!   followed by the self channel;
//! * depth stage: rows carry the source depth in `relation_or_layer_index`
//!   and the aggregation stage (one past the last block) in `layer`.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::graph::MultiRelationGraph;

use super::forward::AttentionCache;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionKind {
    /// Neighbor coefficients within each relation.
    Alpha,
    /// Channel-mixing coefficients across relations and the self channel.
    Beta,
    /// Depth-mixing coefficients across layer states.
    Gamma,
}

impl FromStr for AttentionKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "alpha" => Ok(Self::Alpha),
            "beta" => Ok(Self::Beta),
            "gamma" => Ok(Self::Gamma),
            other => Err(format!("unknown attention stage {other:?}; expected alpha, beta or gamma")),
        }
    }
}

impl std::fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Alpha => "alpha",
            Self::Beta => "beta",
            Self::Gamma => "gamma",
        })
    }
}

pub const ATTENTION_CSV_HEADER: &str = "node_id,layer,relation_or_layer_index,head,coefficient";

pub fn attention_csv(cache: &AttentionCache, graph: &MultiRelationGraph, kind: AttentionKind) -> String {
    let mut out = String::from(ATTENTION_CSV_HEADER);
    out.push('\n');
    match kind {
        AttentionKind::Alpha => {
            for (layer, block) in cache.alpha.iter().enumerate() {
                for (k, heads) in block.iter().enumerate() {
                    let edges = graph.relation(k);
                    for (head, coeffs) in heads.iter().enumerate() {
                        for node in 0..edges.num_targets() {
                            let (lo, hi) = (edges.offsets()[node], edges.offsets()[node + 1]);
                            for e in lo..hi {
                                let c = coeffs.get(e, 0);
                                let _ = writeln!(out, "{node},{layer},{k},{head},{c:?}");
                            }
                        }
                    }
                }
            }
        }
        AttentionKind::Beta => {
            for (layer, heads) in cache.beta.iter().enumerate() {
                for (head, beta) in heads.iter().enumerate() {
                    for node in 0..beta.rows() {
                        for channel in 0..beta.cols() {
                            let c = beta.get(node, channel);
                            let _ = writeln!(out, "{node},{layer},{channel},{head},{c:?}");
                        }
                    }
                }
            }
        }
        AttentionKind::Gamma => {
            for (head, gamma) in cache.gamma.iter().enumerate() {
                let stage = gamma.cols();
                for node in 0..gamma.rows() {
                    for depth in 0..gamma.cols() {
                        let c = gamma.get(node, depth);
                        let _ = writeln!(out, "{node},{stage},{depth},{head},{c:?}");
                    }
                }
            }
        }
    }
    out
}
