//! Synthetic multi-relation graphs with a planted fraud signal.
//!
//! One relation (the "signal") connects nodes of the same class with high
//! probability; the rest mix classes at whatever rate their homophily says.
//! Features are class-conditional Gaussians, so feature-only classifiers
//! work only as well as `feature_separation` allows, and telling relations
//! apart is what recovers the rest.

use std::collections::HashSet;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{GraphError, MultiRelationGraph};
use crate::diff::Matrix;

/// Generator parameters, loadable from TOML:
///
/// ```toml
/// nodes = 2000
/// features = 16
/// fraud_ratio = 0.1
/// homophily = [0.9, 0.5, 0.5]   # one entry per relation
/// informative_relation = 0
/// seed = 7
/// # avg_degree = 10.0           # undirected edges per node, per relation
/// # feature_separation = 1.0    # distance between the class means
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub nodes: usize,
    pub features: usize,
    pub fraud_ratio: f64,
    /// Probability that a sampled edge joins two nodes of the same class;
    /// its length sets the number of relations.
    pub homophily: Vec<f64>,
    /// Index of the relation named "signal" in the output; the rest become
    /// "noise-1", "noise-2", ...
    pub informative_relation: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_avg_degree")]
    pub avg_degree: f64,
    #[serde(default = "default_feature_separation")]
    pub feature_separation: f64,
}

fn default_avg_degree() -> f64 {
    10.0
}

fn default_feature_separation() -> f64 {
    1.0
}

impl SyntheticSpec {
    pub fn num_relations(&self) -> usize {
        self.homophily.len()
    }

    pub fn from_toml_path(path: &Path) -> Result<Self, GraphError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| GraphError::Io { path: path.display().to_string(), source })?;
        let spec: Self = toml::from_str(&text)
            .map_err(|e| GraphError::Parse { path: path.display().to_string(), message: e.to_string() })?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), GraphError> {
        let bad = |what: String| Err(GraphError::BadParam { what });
        if self.nodes < 2 {
            return bad(format!("need at least 2 nodes, got {}", self.nodes));
        }
        if self.features == 0 {
            return bad("need at least one feature".into());
        }
        if self.homophily.is_empty() {
            return bad("homophily list is empty; need at least one relation".into());
        }
        for (k, &h) in self.homophily.iter().enumerate() {
            if !(0.0..=1.0).contains(&h) {
                return bad(format!("homophily[{k}] = {h} outside [0, 1]"));
            }
        }
        if self.informative_relation >= self.homophily.len() {
            return bad(format!(
                "informative_relation = {} but there are only {} relations",
                self.informative_relation,
                self.homophily.len()
            ));
        }
        if !(self.fraud_ratio > 0.0 && self.fraud_ratio < 1.0) {
            return bad(format!("fraud_ratio = {} outside (0, 1)", self.fraud_ratio));
        }
        if self.avg_degree.is_nan() || self.avg_degree <= 0.0 {
            return bad(format!("avg_degree = {} must be positive", self.avg_degree));
        }
        if self.feature_separation.is_nan() || self.feature_separation < 0.0 {
            return bad(format!("feature_separation = {} must be non-negative", self.feature_separation));
        }
        let noise_max = self
            .homophily
            .iter()
            .enumerate()
            .filter(|&(k, _)| k != self.informative_relation)
            .map(|(_, &h)| h)
            .fold(f64::NEG_INFINITY, f64::max);
        if self.homophily[self.informative_relation] <= noise_max {
            log::warn!(
                "relation {} is designated informative but its homophily {} does not exceed the others' maximum {}",
                self.informative_relation,
                self.homophily[self.informative_relation],
                noise_max
            );
        }
        Ok(())
    }
}

/// Draws a graph from `spec`. Everything downstream of the seed is fixed:
/// labels, then features node by node, then relations in order, edges in
/// order, with neighbor lists growing in generation order.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<MultiRelationGraph, GraphError> {
    spec.validate()?;
    let n = spec.nodes;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let num_fraud = ((spec.fraud_ratio * n as f64).round() as usize).clamp(1, n - 1);
    let mut ids: Vec<usize> = (0..n).collect();
    ids.shuffle(&mut rng);
    let mut labels = vec![0u8; n];
    for &i in &ids[..num_fraud] {
        labels[i] = 1;
    }
    let fraud_ids: Vec<usize> = (0..n).filter(|&i| labels[i] == 1).collect();
    let normal_ids: Vec<usize> = (0..n).filter(|&i| labels[i] == 0).collect();

    let half = spec.feature_separation / 2.0;
    let features = {
        let mut m = Matrix::zeros(n, spec.features);
        for (i, &label) in labels.iter().enumerate() {
            let mean = if label == 1 { half } else { -half };
            for v in m.row_mut(i) {
                let z: f64 = rng.sample(StandardNormal);
                *v = mean + z;
            }
        }
        m
    };

    let target = ((spec.avg_degree * n as f64 / 2.0).round() as usize).max(1);
    let mut lists: Vec<Vec<Vec<usize>>> = Vec::with_capacity(spec.num_relations());
    for (k, &h) in spec.homophily.iter().enumerate() {
        let mut rel = vec![Vec::new(); n];
        let mut seen: HashSet<(usize, usize)> = HashSet::with_capacity(target * 2);
        let mut added = 0usize;
        let cap = target.saturating_mul(100);
        let mut attempts = 0usize;
        while added < target && attempts < cap {
            attempts += 1;
            let u = rng.gen_range(0..n);
            let same = rng.gen::<f64>() < h;
            let u_is_fraud = labels[u] == 1;
            let pool = if u_is_fraud == same { &fraud_ids } else { &normal_ids };
            let v = pool[rng.gen_range(0..pool.len())];
            if u == v {
                continue;
            }
            let key = (u.min(v), u.max(v));
            if seen.insert(key) {
                rel[u].push(v);
                rel[v].push(u);
                added += 1;
            }
        }
        if added < target {
            log::warn!("relation {k}: placed {added} of {target} edges before hitting the attempt cap");
        }
        lists.push(rel);
    }

    let names = (0..spec.num_relations())
        .map(|k| {
            if k == spec.informative_relation {
                "signal".to_string()
            } else {
                let noise_index = k + usize::from(k < spec.informative_relation);
                format!("noise-{noise_index}")
            }
        })
        .collect();

    MultiRelationGraph::from_lists(features, labels, &lists, names)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> SyntheticSpec {
        SyntheticSpec {
            nodes: 60,
            features: 4,
            fraud_ratio: 0.25,
            homophily: vec![0.95, 0.5],
            informative_relation: 0,
            seed: 5,
            avg_degree: 4.0,
            feature_separation: 2.0,
        }
    }

    #[test]
    fn fraud_count_is_exact_and_no_self_loops() {
        let g = gen_synthetic(&spec()).unwrap();
        assert_eq!(g.fraud_count(), 15);
        assert_eq!(g.num_nodes(), 60);
        assert_eq!(g.num_features(), 4);
        for rel in g.relations() {
            for i in 0..g.num_nodes() {
                assert!(!rel.neighbors(i).contains(&i));
            }
        }
        assert_eq!(g.relation_names(), &["signal".to_string(), "noise-1".to_string()]);
    }

    #[test]
    fn same_seed_reproduces_the_graph_exactly() {
        let a = gen_synthetic(&spec()).unwrap();
        let b = gen_synthetic(&spec()).unwrap();
        assert_eq!(a, b);
        let mut other = spec();
        other.seed = 6;
        assert_ne!(gen_synthetic(&other).unwrap(), a);
    }

    #[test]
    fn extreme_homophily_pins_edge_classes() {
        let mut s = spec();
        s.homophily = vec![1.0, 0.0];
        let g = gen_synthetic(&s).unwrap();
        for i in 0..g.num_nodes() {
            for &j in g.relation(0).neighbors(i) {
                assert_eq!(g.labels()[i], g.labels()[j], "pure-homophily edges stay within class");
            }
            for &j in g.relation(1).neighbors(i) {
                assert_ne!(g.labels()[i], g.labels()[j], "zero-homophily edges cross classes");
            }
        }
    }

    #[test]
    fn separation_moves_class_means_apart() {
        let mut s = spec();
        s.nodes = 400;
        s.feature_separation = 6.0;
        let g = gen_synthetic(&s).unwrap();
        let mean = |class: u8| {
            let sel: Vec<usize> = (0..g.num_nodes()).filter(|&i| g.labels()[i] == class).collect();
            sel.iter().map(|&i| g.features().row(i)[0]).sum::<f64>() / sel.len() as f64
        };
        assert!(mean(1) - mean(0) > 4.0, "means {} vs {}", mean(1), mean(0));
    }

    #[test]
    fn toml_defaults_fill_in() {
        let s: SyntheticSpec = toml::from_str(
            "nodes = 30\nfeatures = 3\nfraud_ratio = 0.2\nhomophily = [0.8]\ninformative_relation = 0\n",
        )
        .unwrap();
        assert_eq!(s.seed, 0);
        assert_eq!(s.avg_degree, 10.0);
        assert_eq!(s.feature_separation, 1.0);
        assert!(s.validate().is_ok());
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut s = spec();
        s.informative_relation = 5;
        assert!(s.validate().is_err());
        let mut s = spec();
        s.fraud_ratio = 0.0;
        assert!(s.validate().is_err());
        let mut s = spec();
        s.homophily = vec![1.2, 0.5];
        assert!(s.validate().is_err());
        let mut s = spec();
        s.avg_degree = 0.0;
        assert!(s.validate().is_err());
    }
}
