//! Multi-relation graphs with binary node labels.
//!
//! A [`MultiRelationGraph`] couples a feature table with one undirected
//! adjacency per relation. Invariants enforced at construction:
//!
//! * every neighbor entry is symmetric (`j` lists `i` whenever `i` lists `j`);
//! * no relation lists the same neighbor twice for one node;
//! * labels are 0 (normal) or 1 (fraud), features are finite.
//!
//! Neighbor lists keep their construction order instead of being sorted.
//! Relabeling nodes therefore relabels each list in place, which keeps
//! per-node summation order stable and makes the forward pass bitwise
//! equivariant under node permutations.

mod load;
mod split;
mod synthetic;

pub use load::{load_container_json, load_graph, load_triples_dir, save_container_json, save_graph, save_triples_dir, FileFormat};
pub use split::{split_labels, SplitMasks};
pub use synthetic::{gen_synthetic, SyntheticSpec};

use std::collections::HashMap;

use thiserror::Error;

use crate::diff::{EdgeIndex, Matrix};

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("could not read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("node count mismatch: {what}")]
    Inconsistent { what: String },
    #[error("relation {relation}: edge ({a}, {b}) has no mirror entry")]
    Asymmetric { relation: usize, a: usize, b: usize },
    #[error("relation {relation}: node {a} lists neighbor {b} more than once")]
    DuplicateEdge { relation: usize, a: usize, b: usize },
    #[error("node {id} out of range for {n} nodes")]
    NodeOutOfRange { id: usize, n: usize },
    #[error("label {value} is not binary; expected 0 or 1")]
    BadLabel { value: u64 },
    #[error("non-finite feature value for node {id}")]
    BadFeature { id: usize },
    #[error("invalid parameter: {what}")]
    BadParam { what: String },
    #[error("split with p = {p}% leaves the training set without fraud nodes")]
    NoFraudInTrain { p: f64 },
    #[error("split with p = {p}% leaves the {which} set empty")]
    EmptySplit { p: f64, which: &'static str },
}

pub const LABEL_NORMAL: u8 = 0;
pub const LABEL_FRAUD: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct MultiRelationGraph {
    features: Matrix,
    labels: Vec<u8>,
    relations: Vec<EdgeIndex>,
    relation_names: Vec<String>,
}

impl MultiRelationGraph {
    /// Validates and assembles a graph. `relations` must already be
    /// symmetric and duplicate-free; this checks rather than repairs.
    pub fn new(
        features: Matrix,
        labels: Vec<u8>,
        relations: Vec<EdgeIndex>,
        relation_names: Vec<String>,
    ) -> Result<Self, GraphError> {
        let n = features.rows();
        if labels.len() != n {
            return Err(GraphError::Inconsistent {
                what: format!("{} labels for {} feature rows", labels.len(), n),
            });
        }
        if features.cols() == 0 {
            return Err(GraphError::Inconsistent { what: "nodes need at least one feature".into() });
        }
        if relation_names.len() != relations.len() {
            return Err(GraphError::Inconsistent {
                what: format!("{} names for {} relations", relation_names.len(), relations.len()),
            });
        }
        for (id, &l) in labels.iter().enumerate() {
            if l > 1 {
                return Err(GraphError::BadLabel { value: l as u64 });
            }
            if !features.row(id).iter().all(|v| v.is_finite()) {
                return Err(GraphError::BadFeature { id });
            }
        }
        let g = Self { features, labels, relations, relation_names };
        g.validate_adjacency()?;
        Ok(g)
    }

    /// Builder from plain neighbor lists; mainly for tests and the
    /// synthetic generator.
    pub fn from_lists(
        features: Matrix,
        labels: Vec<u8>,
        lists: &[Vec<Vec<usize>>],
        relation_names: Vec<String>,
    ) -> Result<Self, GraphError> {
        let relations = lists.iter().map(|l| EdgeIndex::from_lists(l)).collect();
        Self::new(features, labels, relations, relation_names)
    }

    fn validate_adjacency(&self) -> Result<(), GraphError> {
        let n = self.num_nodes();
        for (k, rel) in self.relations.iter().enumerate() {
            if rel.num_targets() != n {
                return Err(GraphError::Inconsistent {
                    what: format!("relation {k} covers {} nodes, graph has {n}", rel.num_targets()),
                });
            }
            if let Some(&bad) = rel.sources().iter().find(|&&s| s >= n) {
                return Err(GraphError::NodeOutOfRange { id: bad, n });
            }
            // Sorted copies make the symmetry and duplicate checks O(E log E).
            let sorted: Vec<Vec<usize>> = (0..n)
                .map(|i| {
                    let mut v = rel.neighbors(i).to_vec();
                    v.sort_unstable();
                    v
                })
                .collect();
            for (i, neigh) in sorted.iter().enumerate() {
                if let Some(w) = neigh.windows(2).find(|w| w[0] == w[1]) {
                    return Err(GraphError::DuplicateEdge { relation: k, a: i, b: w[0] });
                }
                for &j in neigh {
                    if sorted[j].binary_search(&i).is_err() {
                        return Err(GraphError::Asymmetric { relation: k, a: i, b: j });
                    }
                }
            }
        }
        Ok(())
    }

    pub fn num_nodes(&self) -> usize {
        self.features.rows()
    }

    pub fn num_features(&self) -> usize {
        self.features.cols()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn relation(&self, k: usize) -> &EdgeIndex {
        &self.relations[k]
    }

    pub fn relations(&self) -> &[EdgeIndex] {
        &self.relations
    }

    pub fn relation_names(&self) -> &[String] {
        &self.relation_names
    }

    pub fn fraud_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l == LABEL_FRAUD).count()
    }

    /// Total directed neighbor entries across relations (each undirected
    /// edge counts twice, self-loops once).
    pub fn num_neighbor_entries(&self) -> usize {
        self.relations.iter().map(EdgeIndex::num_edges).sum()
    }

    pub fn has_all_self_loops(&self) -> bool {
        self.relations
            .iter()
            .all(|rel| (0..self.num_nodes()).all(|i| rel.neighbors(i).contains(&i)))
    }

    /// Appends a self-loop to every neighbor list that lacks one. Running it
    /// twice changes nothing.
    pub fn add_self_loops(&mut self) {
        let n = self.num_nodes();
        for rel in &mut self.relations {
            let mut lists = rel.to_lists();
            let mut changed = false;
            for (i, list) in lists.iter_mut().enumerate().take(n) {
                if !list.contains(&i) {
                    list.push(i);
                    changed = true;
                }
            }
            if changed {
                *rel = EdgeIndex::from_lists(&lists);
            }
        }
    }

    /// Removes every node that shares its exact feature row (bit for bit)
    /// with another node, along with all incident edges, then compacts ids.
    /// Returns the removed nodes' original ids in ascending order.
    ///
    /// Identical rows are indistinguishable to the model, and when they
    /// land on different sides of a split they leak evaluation information,
    /// so the whole group goes, not just the copies.
    pub fn deduplicate_nodes(&mut self) -> Vec<usize> {
        let n = self.num_nodes();
        let mut counts: HashMap<Vec<u64>, usize> = HashMap::new();
        for i in 0..n {
            let key: Vec<u64> = self.features.row(i).iter().map(|v| v.to_bits()).collect();
            *counts.entry(key).or_insert(0) += 1;
        }
        let mut keep = Vec::with_capacity(n);
        let mut removed = Vec::new();
        let mut remap = vec![usize::MAX; n];
        for (i, slot) in remap.iter_mut().enumerate() {
            let key: Vec<u64> = self.features.row(i).iter().map(|v| v.to_bits()).collect();
            if counts[&key] > 1 {
                removed.push(i);
            } else {
                *slot = keep.len();
                keep.push(i);
            }
        }
        if removed.is_empty() {
            return removed;
        }
        let d = self.num_features();
        let mut features = Matrix::zeros(keep.len(), d);
        let mut labels = Vec::with_capacity(keep.len());
        for (new, &old) in keep.iter().enumerate() {
            features.row_mut(new).copy_from_slice(self.features.row(old));
            labels.push(self.labels[old]);
        }
        let relations = self
            .relations
            .iter()
            .map(|rel| {
                let lists: Vec<Vec<usize>> = keep
                    .iter()
                    .map(|&old| {
                        rel.neighbors(old)
                            .iter()
                            .filter(|&&j| remap[j] != usize::MAX)
                            .map(|&j| remap[j])
                            .collect()
                    })
                    .collect();
                EdgeIndex::from_lists(&lists)
            })
            .collect();
        self.features = features;
        self.labels = labels;
        self.relations = relations;
        removed
    }

    /// Collapses all relations into a single one holding the union of their
    /// edges. A neighbor keeps the position of its first appearance across
    /// relations in declaration order.
    pub fn merge_relations(&self) -> Self {
        let n = self.num_nodes();
        let mut stamp = vec![usize::MAX; n];
        let lists: Vec<Vec<usize>> = (0..n)
            .map(|i| {
                let mut merged = Vec::new();
                for rel in &self.relations {
                    for &j in rel.neighbors(i) {
                        if stamp[j] != i {
                            stamp[j] = i;
                            merged.push(j);
                        }
                    }
                }
                merged
            })
            .collect();
        Self {
            features: self.features.clone(),
            labels: self.labels.clone(),
            relations: vec![EdgeIndex::from_lists(&lists)],
            relation_names: vec![self.relation_names.join("+")],
        }
    }

    /// Renames node `i` to `perm[i]`; `perm` must be a bijection on
    /// `0..num_nodes()`. Neighbor lists are relabeled entry by entry without
    /// reordering.
    pub fn relabel(&self, perm: &[usize]) -> Result<Self, GraphError> {
        let n = self.num_nodes();
        if perm.len() != n {
            return Err(GraphError::BadParam { what: format!("permutation of length {} for {n} nodes", perm.len()) });
        }
        let mut seen = vec![false; n];
        for &p in perm {
            if p >= n || seen[p] {
                return Err(GraphError::BadParam { what: "not a bijection".into() });
            }
            seen[p] = true;
        }
        let d = self.num_features();
        let mut features = Matrix::zeros(n, d);
        let mut labels = vec![0u8; n];
        for i in 0..n {
            features.row_mut(perm[i]).copy_from_slice(self.features.row(i));
            labels[perm[i]] = self.labels[i];
        }
        let relations = self
            .relations
            .iter()
            .map(|rel| {
                let mut lists = vec![Vec::new(); n];
                for i in 0..n {
                    lists[perm[i]] = rel.neighbors(i).iter().map(|&j| perm[j]).collect();
                }
                EdgeIndex::from_lists(&lists)
            })
            .collect();
        Self::new(features, labels, relations, self.relation_names.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_graph() -> MultiRelationGraph {
        // 4 nodes, 2 relations. Relation 0: path 0-1-2-3; relation 1: star at 0.
        let features = Matrix::from_fn(4, 2, |r, c| (r * 2 + c) as f64);
        let labels = vec![0, 1, 0, 1];
        let lists = vec![
            vec![vec![1], vec![0, 2], vec![1, 3], vec![2]],
            vec![vec![1, 2, 3], vec![0], vec![0], vec![0]],
        ];
        MultiRelationGraph::from_lists(features, labels, &lists, vec!["a".into(), "b".into()]).unwrap()
    }

    #[test]
    fn asymmetric_adjacency_is_rejected() {
        let features = Matrix::zeros(2, 1);
        let err = MultiRelationGraph::from_lists(
            Matrix::from_fn(2, 1, |r, _| r as f64),
            vec![0, 0],
            &[vec![vec![1], vec![]]],
            vec!["a".into()],
        )
        .unwrap_err();
        assert!(matches!(err, GraphError::Asymmetric { relation: 0, a: 0, b: 1 }));
        drop(features);
    }

    #[test]
    fn duplicate_neighbor_is_rejected() {
        let err = MultiRelationGraph::from_lists(
            Matrix::from_fn(2, 1, |r, _| r as f64),
            vec![0, 0],
            &[vec![vec![1, 1], vec![0, 0]]],
            vec!["a".into()],
        )
        .unwrap_err();
        assert!(matches!(err, GraphError::DuplicateEdge { .. }));
    }

    #[test]
    fn non_binary_label_is_rejected() {
        let err = MultiRelationGraph::from_lists(
            Matrix::from_fn(2, 1, |r, _| r as f64),
            vec![0, 7],
            &[vec![vec![], vec![]]],
            vec!["a".into()],
        )
        .unwrap_err();
        assert!(matches!(err, GraphError::BadLabel { value: 7 }));
    }

    #[test]
    fn self_loops_are_added_once() {
        let mut g = toy_graph();
        assert!(!g.has_all_self_loops());
        g.add_self_loops();
        assert!(g.has_all_self_loops());
        let entries = g.num_neighbor_entries();
        g.add_self_loops();
        assert_eq!(g.num_neighbor_entries(), entries, "second pass must not grow lists");
        // 3 isolated nodes, 2 relations: exactly one loop entry per node per relation.
        let mut iso = MultiRelationGraph::from_lists(
            Matrix::from_fn(3, 1, |r, _| r as f64),
            vec![0, 0, 1],
            &[vec![vec![], vec![], vec![]], vec![vec![], vec![], vec![]]],
            vec!["a".into(), "b".into()],
        )
        .unwrap();
        iso.add_self_loops();
        assert_eq!(iso.num_neighbor_entries(), 6);
    }

    #[test]
    fn dedup_removes_whole_duplicate_groups() {
        // Rows: a, a, b, c -> nodes 0 and 1 both go.
        let features = Matrix::from_rows(&[
            vec![1.0, 2.0],
            vec![1.0, 2.0],
            vec![3.0, 4.0],
            vec![5.0, 6.0],
        ]);
        let lists = vec![vec![vec![1, 2], vec![0], vec![0, 3], vec![2]]];
        let mut g = MultiRelationGraph::from_lists(features, vec![0, 1, 0, 1], &lists, vec!["a".into()]).unwrap();
        let removed = g.deduplicate_nodes();
        assert_eq!(removed, vec![0, 1]);
        assert_eq!(g.num_nodes(), 2);
        assert_eq!(g.labels(), &[0, 1]);
        // Old node 2 kept its edge to old node 3 and lost the one to node 0.
        assert_eq!(g.relation(0).neighbors(0), &[1]);
        assert_eq!(g.relation(0).neighbors(1), &[0]);
        // A second pass removes nothing.
        assert!(g.deduplicate_nodes().is_empty());
    }

    #[test]
    fn dedup_on_distinct_rows_is_identity() {
        let mut g = toy_graph();
        let before = g.clone();
        assert!(g.deduplicate_nodes().is_empty());
        assert_eq!(g, before);
    }

    #[test]
    fn merge_relations_unions_edges_in_first_seen_order() {
        let g = toy_graph();
        let merged = g.merge_relations();
        assert_eq!(merged.num_relations(), 1);
        // Node 0: relation 0 contributes [1], relation 1 adds 2 and 3.
        assert_eq!(merged.relation(0).neighbors(0), &[1, 2, 3]);
        // Node 2: [1, 3] from relation 0, then 0 from relation 1.
        assert_eq!(merged.relation(0).neighbors(2), &[1, 3, 0]);
        assert_eq!(merged.relation_names(), &["a+b".to_string()]);
    }

    #[test]
    fn relabel_round_trip_is_identity() {
        let g = toy_graph();
        let perm = vec![2, 0, 3, 1];
        let mut inverse = vec![0; 4];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        let there = g.relabel(&perm).unwrap();
        let back = there.relabel(&inverse).unwrap();
        assert_eq!(back, g);
        assert_eq!(there.labels()[perm[1]], g.labels()[1]);
    }

    #[test]
    fn relabel_rejects_non_bijections() {
        let g = toy_graph();
        assert!(g.relabel(&[0, 0, 1, 2]).is_err());
        assert!(g.relabel(&[0, 1]).is_err());
    }
}
