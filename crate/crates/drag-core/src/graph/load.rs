//! Reading and writing graphs.
//!
//! Two on-disk layouts are supported:
//!
//! * **triples directory** -- `nodes.csv` (`id,label,f1,...,fd`, ids dense
//!   and ascending from 0) plus `edges.csv` (`src,relation,dst` with
//!   free-form relation names). Edges may be listed in either direction;
//!   loading mirrors them and drops repeats, keeping first-encounter order.
//! * **container JSON** -- one self-describing file with features, labels
//!   and per-relation edge lists.
//!
//! Both savers emit each undirected edge once with `src <= dst`, so a
//! round trip canonicalizes neighbor order (ascending by source line) even
//! when the in-memory graph was built in a different order.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{GraphError, MultiRelationGraph};
use crate::diff::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FileFormat {
    TriplesDir,
    ContainerJson,
}

impl FromStr for FileFormat {
    type Err = GraphError;

    fn from_str(s: &str) -> Result<Self, GraphError> {
        match s {
            "triples" => Ok(Self::TriplesDir),
            "json" => Ok(Self::ContainerJson),
            other => Err(GraphError::BadParam {
                what: format!("unknown format {other:?}; expected \"triples\" or \"json\""),
            }),
        }
    }
}

impl fmt::Display for FileFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::TriplesDir => "triples",
            Self::ContainerJson => "json",
        })
    }
}

impl FileFormat {
    /// Directory -> triples, anything else -> container JSON.
    pub fn detect(path: &Path) -> Self {
        if path.is_dir() {
            Self::TriplesDir
        } else {
            Self::ContainerJson
        }
    }
}

pub fn load_graph(path: &Path, format: Option<FileFormat>) -> Result<MultiRelationGraph, GraphError> {
    match format.unwrap_or_else(|| FileFormat::detect(path)) {
        FileFormat::TriplesDir => load_triples_dir(path),
        FileFormat::ContainerJson => load_container_json(path),
    }
}

pub fn save_graph(graph: &MultiRelationGraph, path: &Path, format: FileFormat) -> Result<(), GraphError> {
    match format {
        FileFormat::TriplesDir => save_triples_dir(graph, path),
        FileFormat::ContainerJson => save_container_json(graph, path),
    }
}

fn read_to_string(path: &Path) -> Result<String, GraphError> {
    fs::read_to_string(path).map_err(|source| GraphError::Io { path: path.display().to_string(), source })
}

fn parse_err(path: &Path, line: usize, message: impl fmt::Display) -> GraphError {
    GraphError::Parse { path: path.display().to_string(), message: format!("line {line}: {message}") }
}

pub fn load_triples_dir(dir: &Path) -> Result<MultiRelationGraph, GraphError> {
    let nodes_path = dir.join("nodes.csv");
    let edges_path = dir.join("edges.csv");

    let nodes_text = read_to_string(&nodes_path)?;
    let mut lines = nodes_text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_err(&nodes_path, 1, "empty file; expected an id,label,f1,... header"))?;
    let header_fields: Vec<&str> = header.split(',').map(str::trim).collect();
    if header_fields.len() < 3 || header_fields[0] != "id" || header_fields[1] != "label" {
        return Err(parse_err(&nodes_path, 1, "header must be id,label followed by at least one feature column"));
    }
    let d = header_fields.len() - 2;

    let mut labels = Vec::new();
    let mut feature_rows: Vec<f64> = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != d + 2 {
            return Err(parse_err(&nodes_path, lineno, format!("expected {} fields, found {}", d + 2, fields.len())));
        }
        let id: usize = fields[0]
            .parse()
            .map_err(|_| parse_err(&nodes_path, lineno, format!("bad node id {:?}", fields[0])))?;
        if id != labels.len() {
            return Err(parse_err(&nodes_path, lineno, format!("node ids must be dense and ascending; expected {}, found {id}", labels.len())));
        }
        let label: u8 = fields[1]
            .parse::<u8>()
            .ok()
            .filter(|&l| l <= 1)
            .ok_or_else(|| parse_err(&nodes_path, lineno, format!("label must be 0 or 1, found {:?}", fields[1])))?;
        labels.push(label);
        for f in &fields[2..] {
            let v: f64 = f
                .parse()
                .map_err(|_| parse_err(&nodes_path, lineno, format!("bad feature value {f:?}")))?;
            feature_rows.push(v);
        }
    }
    let n = labels.len();
    if n == 0 {
        return Err(parse_err(&nodes_path, 1, "no node rows"));
    }
    let features = Matrix::new(n, d, feature_rows);

    let edges_text = read_to_string(&edges_path)?;
    let mut lines = edges_text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_err(&edges_path, 1, "empty file; expected a src,relation,dst header"))?;
    let header_fields: Vec<&str> = header.split(',').map(str::trim).collect();
    if header_fields != ["src", "relation", "dst"] {
        return Err(parse_err(&edges_path, 1, "header must be src,relation,dst"));
    }

    let mut relation_names: Vec<String> = Vec::new();
    let mut lists: Vec<Vec<Vec<usize>>> = Vec::new();
    let mut seen: Vec<HashSet<(usize, usize)>> = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(parse_err(&edges_path, lineno, format!("expected 3 fields, found {}", fields.len())));
        }
        let src: usize = fields[0]
            .parse()
            .map_err(|_| parse_err(&edges_path, lineno, format!("bad node id {:?}", fields[0])))?;
        let dst: usize = fields[2]
            .parse()
            .map_err(|_| parse_err(&edges_path, lineno, format!("bad node id {:?}", fields[2])))?;
        if src >= n || dst >= n {
            return Err(parse_err(&edges_path, lineno, format!("edge ({src}, {dst}) references a node outside 0..{n}")));
        }
        let name = fields[1];
        if name.is_empty() {
            return Err(parse_err(&edges_path, lineno, "empty relation name"));
        }
        // Relations are indexed in order of first appearance.
        let k = match relation_names.iter().position(|r| r == name) {
            Some(k) => k,
            None => {
                relation_names.push(name.to_string());
                lists.push(vec![Vec::new(); n]);
                seen.push(HashSet::new());
                relation_names.len() - 1
            }
        };
        if seen[k].insert((src, dst)) {
            lists[k][src].push(dst);
        }
        if src != dst && seen[k].insert((dst, src)) {
            lists[k][dst].push(src);
        }
    }

    MultiRelationGraph::from_lists(features, labels, &lists, relation_names)
}

pub fn save_triples_dir(graph: &MultiRelationGraph, dir: &Path) -> Result<(), GraphError> {
    fs::create_dir_all(dir).map_err(|source| GraphError::Io { path: dir.display().to_string(), source })?;
    let nodes_path = dir.join("nodes.csv");
    let edges_path = dir.join("edges.csv");

    let mut nodes = String::from("id,label");
    for c in 0..graph.num_features() {
        nodes.push_str(&format!(",f{}", c + 1));
    }
    nodes.push('\n');
    for i in 0..graph.num_nodes() {
        nodes.push_str(&format!("{i},{}", graph.labels()[i]));
        for v in graph.features().row(i) {
            // ryu-backed formatting keeps the bit pattern through a reload.
            let mut buf = ryu_format(*v);
            buf.insert(0, ',');
            nodes.push_str(&buf);
        }
        nodes.push('\n');
    }
    write_file(&nodes_path, nodes.as_bytes())?;

    let mut edges = String::from("src,relation,dst\n");
    for (k, rel) in graph.relations().iter().enumerate() {
        let name = &graph.relation_names()[k];
        for i in 0..graph.num_nodes() {
            for &j in rel.neighbors(i) {
                if j >= i {
                    edges.push_str(&format!("{i},{name},{j}\n"));
                }
            }
        }
    }
    write_file(&edges_path, edges.as_bytes())
}

fn ryu_format(v: f64) -> String {
    // serde_json's f64 formatting is shortest-round-trip; reuse it rather
    // than pulling in another dependency.
    serde_json::to_string(&v).expect("finite f64 serializes")
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), GraphError> {
    let mut f = fs::File::create(path).map_err(|source| GraphError::Io { path: path.display().to_string(), source })?;
    f.write_all(bytes).map_err(|source| GraphError::Io { path: path.display().to_string(), source })
}

#[derive(Serialize, Deserialize)]
struct ContainerFile {
    num_nodes: usize,
    num_features: usize,
    labels: Vec<u8>,
    /// Row per node, `num_features` values each.
    features: Vec<Vec<f64>>,
    relations: Vec<RelationFile>,
}

#[derive(Serialize, Deserialize)]
struct RelationFile {
    name: String,
    /// Undirected edges, one entry per pair; `[i, i]` is a self-loop.
    edges: Vec<[usize; 2]>,
}

pub fn load_container_json(path: &Path) -> Result<MultiRelationGraph, GraphError> {
    let text = read_to_string(path)?;
    let file: ContainerFile = serde_json::from_str(&text)
        .map_err(|e| GraphError::Parse { path: path.display().to_string(), message: e.to_string() })?;
    let n = file.num_nodes;
    let d = file.num_features;
    if file.labels.len() != n || file.features.len() != n {
        return Err(GraphError::Inconsistent {
            what: format!("num_nodes = {n} but {} labels and {} feature rows", file.labels.len(), file.features.len()),
        });
    }
    let mut data = Vec::with_capacity(n * d);
    for (i, row) in file.features.iter().enumerate() {
        if row.len() != d {
            return Err(GraphError::Inconsistent { what: format!("feature row {i} has {} values, expected {d}", row.len()) });
        }
        data.extend_from_slice(row);
    }
    let features = Matrix::new(n, d, data);

    let mut names = Vec::with_capacity(file.relations.len());
    let mut lists = Vec::with_capacity(file.relations.len());
    for rel in &file.relations {
        let mut seen: HashSet<(usize, usize)> = HashSet::new();
        let mut rel_lists = vec![Vec::new(); n];
        for &[a, b] in &rel.edges {
            if a >= n || b >= n {
                return Err(GraphError::NodeOutOfRange { id: a.max(b), n });
            }
            if seen.insert((a, b)) {
                rel_lists[a].push(b);
            }
            if a != b && seen.insert((b, a)) {
                rel_lists[b].push(a);
            }
        }
        names.push(rel.name.clone());
        lists.push(rel_lists);
    }
    MultiRelationGraph::from_lists(features, file.labels, &lists, names)
}

pub fn save_container_json(graph: &MultiRelationGraph, path: &Path) -> Result<(), GraphError> {
    let relations = graph
        .relations()
        .iter()
        .zip(graph.relation_names())
        .map(|(rel, name)| {
            let mut edges = Vec::new();
            for i in 0..graph.num_nodes() {
                for &j in rel.neighbors(i) {
                    if j >= i {
                        edges.push([i, j]);
                    }
                }
            }
            RelationFile { name: name.clone(), edges }
        })
        .collect();
    let file = ContainerFile {
        num_nodes: graph.num_nodes(),
        num_features: graph.num_features(),
        labels: graph.labels().to_vec(),
        features: (0..graph.num_nodes()).map(|i| graph.features().row(i).to_vec()).collect(),
        relations,
    };
    let text = serde_json::to_string_pretty(&file)
        .map_err(|e| GraphError::Parse { path: path.display().to_string(), message: e.to_string() })?;
    write_file(path, text.as_bytes())
}
