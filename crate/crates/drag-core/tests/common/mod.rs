//! Helpers shared by the integration suites.
//!
//! The centerpiece is [`oracle_probabilities`]: a scalar re-implementation
//! of the whole network as plain nested loops over `Vec<f64>`. It shares no
//! code with the tape or its fused kernels (not even the softmax), so
//! agreement between the two is evidence about the kernels rather than
//! about a shared bug. Keep it boring: no batching, no reuse, no shifts.

#![allow(dead_code)]

use drag_core::diff::Matrix;
use drag_core::graph::MultiRelationGraph;
use drag_core::model::{
    AblationMode, Activation, AttentionHead, DragParams, HyperParams, Mlp, SCORE_SLOPE,
};
use rand::Rng;

fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp() - 1.0
    }
}

fn leaky(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

fn stage(act: Activation, x: f64) -> f64 {
    match act {
        Activation::Elu => elu(x),
        Activation::LeakyRelu => leaky(x, SCORE_SLOPE),
        Activation::Relu => leaky(x, 0.0),
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `w x + b` with `w` in row-major output-by-input orientation.
fn affine(w: &Matrix, b: &Matrix, x: &[f64]) -> Vec<f64> {
    (0..w.rows()).map(|r| dot(w.row(r), x) + b.row(0)[r]).collect()
}

fn mlp(m: &Mlp, x: &[f64]) -> Vec<f64> {
    let mut h = affine(&m.w1, &m.b1, x);
    for v in &mut h {
        *v = elu(*v);
    }
    affine(&m.w2, &m.b2, &h)
}

/// Applies the columns `offset..offset + x.len()` of a pairwise transform.
fn half_transform(w: &Matrix, offset: usize, x: &[f64]) -> Vec<f64> {
    (0..w.rows()).map(|r| dot(&w.row(r)[offset..offset + x.len()], x)).collect()
}

fn project(head: &AttentionHead, x: &[f64]) -> Vec<f64> {
    (0..head.project.rows()).map(|r| dot(head.project.row(r), x)).collect()
}

/// Unnormalized attention score for one (query, candidate) pair.
fn pair_score(head: &AttentionHead, u: &[f64], v: &[f64]) -> f64 {
    let score = head.score.data();
    u.iter().zip(v).zip(score).map(|((a, b), s)| leaky(a + b, SCORE_SLOPE) * s).sum()
}

/// Textbook softmax, deliberately without the max-shift the tape uses; the
/// two agree to far better than the comparison tolerance on sane logits.
fn softmax(logits: &[f64]) -> Vec<f64> {
    let exps: Vec<f64> = logits.iter().map(|&x| x.exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| e / total).collect()
}

/// One attention stage over per-node candidate lists: `candidates[c][i]` is
/// candidate `c` seen from node `i`. Query width is inferred from the query
/// rows, so the same code serves the channel mix and the depth mix.
fn mixture(
    heads: &[AttentionHead],
    query: &[Vec<f64>],
    candidates: &[Vec<Vec<f64>>],
    act: Activation,
) -> Vec<Vec<f64>> {
    let n = query.len();
    let mut out: Vec<Vec<f64>> = vec![Vec::new(); n];
    for head in heads {
        for (i, row) in out.iter_mut().enumerate() {
            let qw = query[i].len();
            let u = half_transform(&head.transform, 0, &query[i]);
            let logits: Vec<f64> = candidates
                .iter()
                .map(|c| pair_score(head, &u, &half_transform(&head.transform, qw, &c[i])))
                .collect();
            let weights = softmax(&logits);
            let mut acc = vec![0.0; head.project.rows()];
            for (w, c) in weights.iter().zip(candidates) {
                for (a, p) in acc.iter_mut().zip(project(head, &c[i])) {
                    *a += w * p;
                }
            }
            row.extend_from_slice(&acc);
        }
    }
    for row in &mut out {
        for v in row.iter_mut() {
            *v = stage(act, *v);
        }
    }
    out
}

/// Full forward pass, one scalar at a time. The graph must already carry
/// self-loops on every relation (empty neighbor lists have no softmax).
pub fn oracle_probabilities(
    params: &DragParams,
    graph: &MultiRelationGraph,
    hyper: &HyperParams,
    mode: AblationMode,
) -> Vec<f64> {
    let n = graph.num_nodes();
    let hidden = params.dims.hidden_dim;
    let act = hyper.activation;
    // The last allocated block feeds nothing the output can see, so the
    // oracle never runs it; predictions match whether the model does or not.
    let depth = params.dims.blocks - 1;

    let x: Vec<Vec<f64>> = (0..n).map(|i| graph.features().row(i).to_vec()).collect();
    let mut reps: Vec<Vec<Vec<f64>>> = vec![x.iter().map(|xi| mlp(&params.input, xi)).collect()];

    for block in &params.blocks[..depth] {
        let state = reps.last().unwrap().clone();
        let mut channels: Vec<Vec<Vec<f64>>> = Vec::new();
        for (k, heads) in block.relations.iter().enumerate() {
            let rel = graph.relation(k);
            let mut chan: Vec<Vec<f64>> = vec![Vec::new(); n];
            for head in heads {
                let u: Vec<Vec<f64>> =
                    state.iter().map(|s| half_transform(&head.transform, 0, s)).collect();
                let v: Vec<Vec<f64>> =
                    state.iter().map(|s| half_transform(&head.transform, hidden, s)).collect();
                let projected: Vec<Vec<f64>> = state.iter().map(|s| project(head, s)).collect();
                for (t, row) in chan.iter_mut().enumerate() {
                    let nbrs = rel.neighbors(t);
                    let logits: Vec<f64> =
                        nbrs.iter().map(|&s| pair_score(head, &u[t], &v[s])).collect();
                    let alpha = softmax(&logits);
                    let mut acc = vec![0.0; head.project.rows()];
                    for (a, &s) in alpha.iter().zip(nbrs) {
                        for (o, p) in acc.iter_mut().zip(&projected[s]) {
                            *o += a * p;
                        }
                    }
                    row.extend_from_slice(&acc);
                }
            }
            for row in &mut chan {
                for v in row.iter_mut() {
                    *v = stage(act, *v);
                }
            }
            channels.push(chan);
        }
        channels.push(state.iter().map(|s| mlp(&block.self_transform, s)).collect());
        reps.push(mixture(&block.aggregation, &state, &channels, act));
    }

    let final_rep: Vec<Vec<f64>> = match mode {
        AblationMode::NoLayerAggregation => {
            let deepest = &reps[depth];
            deepest
                .iter()
                .map(|s| {
                    let mut row = Vec::new();
                    for head in &params.layer_agg {
                        row.extend(project(head, s));
                    }
                    for v in row.iter_mut() {
                        *v = stage(act, *v);
                    }
                    row
                })
                .collect()
        }
        _ => mixture(&params.layer_agg, &x, &reps, act),
    };

    final_rep.iter().map(|r| sigmoid(mlp(&params.output, r)[0])).collect()
}

/// Random symmetric multi-relation graph, possibly with isolated nodes and
/// empty neighbor lists; not ready for a forward pass until self-loops are
/// added.
pub fn random_bare_graph(
    rng: &mut impl Rng,
    max_nodes: usize,
    max_relations: usize,
) -> MultiRelationGraph {
    let n = rng.gen_range(2..=max_nodes);
    let m = rng.gen_range(1..=max_relations);
    let d = rng.gen_range(1..=4);
    let features = Matrix::from_fn(n, d, |_, _| rng.gen_range(-1.5..1.5));
    let labels: Vec<u8> = (0..n).map(|_| u8::from(rng.gen_bool(0.4))).collect();
    let mut lists: Vec<Vec<Vec<usize>>> = vec![vec![Vec::new(); n]; m];
    for rel in &mut lists {
        for i in 0..n {
            for j in i + 1..n {
                if rng.gen_bool(0.4) {
                    rel[i].push(j);
                    rel[j].push(i);
                }
            }
        }
    }
    let names = (0..m).map(|k| format!("rel{k}")).collect();
    MultiRelationGraph::from_lists(features, labels, &lists, names).unwrap()
}

/// Like [`random_bare_graph`] but with self-loops everywhere, so every
/// neighborhood is non-empty and the model can run on it.
pub fn random_graph(
    rng: &mut impl Rng,
    max_nodes: usize,
    max_relations: usize,
) -> MultiRelationGraph {
    let mut graph = random_bare_graph(rng, max_nodes, max_relations);
    graph.add_self_loops();
    graph
}

/// Hyperparameters drawn small: every width legal, every activation seen.
pub fn random_small_hyper(rng: &mut impl Rng) -> HyperParams {
    let heads = rng.gen_range(1..=2);
    let hidden_dim = heads * rng.gen_range(1..=3);
    HyperParams {
        hidden_dim,
        layers: rng.gen_range(1..=2),
        heads,
        activation: match rng.gen_range(0..3) {
            0 => Activation::Elu,
            1 => Activation::LeakyRelu,
            _ => Activation::Relu,
        },
        final_relation_block: rng.gen_bool(0.5),
        ..HyperParams::default()
    }
}
