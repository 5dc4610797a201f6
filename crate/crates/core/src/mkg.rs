//! Prescription-based medical knowledge graph.
//!
//! Pill-pill edges are weighted through diagnosis-pill impact factors, a
//! tf-idf style score: the fraction of a diagnosis' prescriptions that contain
//! the pill, times the (natural) log inverse prescription frequency of the pill.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rx::Corpus;

/// Which diagnoses contribute to an edge weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EdgeWeighting {
    /// Only diagnoses for which both pills have a positive impact factor.
    #[default]
    SharedOnly,
    /// Every diagnosis in the corpus (edges still require a shared diagnosis).
    AllDiagnoses,
}

/// Prescription counts needed by the impact factor.
struct Counts {
    total: usize,
    per_diag: Vec<usize>,
    per_pill: Vec<usize>,
    /// `joint[d][p]`: prescriptions containing both diagnosis d and pill p.
    joint: Vec<Vec<usize>>,
}

impl Counts {
    fn new(corpus: &Corpus) -> Self {
        let n = corpus.num_classes();
        let nd = corpus.diagnoses().len();
        let mut per_diag = vec![0; nd];
        let mut per_pill = vec![0; n];
        let mut joint = vec![vec![0; n]; nd];
        for rec in corpus.records() {
            let pills = corpus.pill_indices(rec);
            for &p in &pills {
                per_pill[p] += 1;
            }
            for d in corpus.diagnosis_indices(rec) {
                per_diag[d] += 1;
                for &p in &pills {
                    joint[d][p] += 1;
                }
            }
        }
        Self {
            total: corpus.records().len(),
            per_diag,
            per_pill,
            joint,
        }
    }

    fn impact(&self, pill: usize, diag: usize) -> f64 {
        let both = self.joint[diag][pill];
        if both == 0 {
            return 0.0;
        }
        let tf = both as f64 / self.per_diag[diag] as f64;
        let idf = (self.total as f64 / self.per_pill[pill] as f64).ln();
        tf * idf
    }
}

/// Impact factor of `pill` for diagnosis `diag`.
pub fn impact_factor(corpus: &Corpus, pill: usize, diag: usize) -> Result<f64> {
    if pill >= corpus.num_classes() {
        return Err(Error::Domain(format!("pill index {pill} out of range")));
    }
    if diag >= corpus.diagnoses().len() {
        return Err(Error::Domain(format!(
            "diagnosis index {diag} does not occur in the corpus"
        )));
    }
    Ok(Counts::new(corpus).impact(pill, diag))
}

/// `values[d][p]` is the impact factor of pill p for diagnosis d.
#[derive(Debug, Clone, PartialEq)]
pub struct ImpactTable {
    pub values: Vec<Vec<f64>>,
}

impl ImpactTable {
    pub fn compute(corpus: &Corpus) -> Self {
        let counts = Counts::new(corpus);
        let values = (0..corpus.diagnoses().len())
            .map(|d| {
                (0..corpus.num_classes())
                    .map(|p| counts.impact(p, d))
                    .collect()
            })
            .collect();
        Self { values }
    }

    pub fn get(&self, pill: usize, diag: usize) -> f64 {
        self.values[diag][pill]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub i: usize,
    pub j: usize,
    pub weight: f64,
}

/// Weighted undirected graph over pill classes. Each edge is stored once with
/// `i < j`, sorted by `(i, j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MedicalKnowledgeGraph {
    num_nodes: usize,
    edges: Vec<Edge>,
}

impl MedicalKnowledgeGraph {
    /// Builds a graph from explicit edges. Pairs may be given in either order.
    pub fn from_edges(num_nodes: usize, edges: impl IntoIterator<Item = Edge>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for e in edges {
            let (i, j) = if e.i < e.j { (e.i, e.j) } else { (e.j, e.i) };
            if i == j {
                return Err(Error::Validation(format!("self-loop on node {i}")));
            }
            if j >= num_nodes {
                return Err(Error::Validation(format!(
                    "edge ({i}, {j}) references a node outside 0..{num_nodes}"
                )));
            }
            if !(e.weight > 0.0 && e.weight.is_finite()) {
                return Err(Error::Validation(format!(
                    "edge ({i}, {j}) has non-positive weight {}",
                    e.weight
                )));
            }
            if map.insert((i, j), e.weight).is_some() {
                return Err(Error::Validation(format!("duplicate edge ({i}, {j})")));
            }
        }
        Ok(Self {
            num_nodes,
            edges: map
                .into_iter()
                .map(|((i, j), weight)| Edge { i, j, weight })
                .collect(),
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    /// Symmetric weight lookup; `None` when there is no edge.
    pub fn weight(&self, a: usize, b: usize) -> Option<f64> {
        let key = if a < b { (a, b) } else { (b, a) };
        self.edges
            .binary_search_by(|e| (e.i, e.j).cmp(&key))
            .ok()
            .map(|k| self.edges[k].weight)
    }

    /// Neighbor lists `(node, weight)` ordered by node index.
    pub fn adjacency(&self) -> Vec<Vec<(usize, f64)>> {
        let mut adj = vec![Vec::new(); self.num_nodes];
        for e in &self.edges {
            adj[e.i].push((e.j, e.weight));
            adj[e.j].push((e.i, e.weight));
        }
        for list in &mut adj {
            list.sort_by_key(|&(n, _)| n);
        }
        adj
    }

    pub fn degree(&self, node: usize) -> usize {
        self.edges
            .iter()
            .filter(|e| e.i == node || e.j == node)
            .count()
    }

    /// Graph JSON: `{"num_nodes": N, "edges": [[i, j, w], ...]}` with weights
    /// written to 15 significant digits.
    pub fn to_json(&self) -> String {
        let mut out = String::new();
        let _ = write!(out, "{{\n  \"num_nodes\": {},\n  \"edges\": [", self.num_nodes);
        for (k, e) in self.edges.iter().enumerate() {
            if k > 0 {
                out.push(',');
            }
            let _ = write!(out, "\n    [{}, {}, {}]", e.i, e.j, fmt_weight(e.weight));
        }
        if !self.edges.is_empty() {
            out.push_str("\n  ");
        }
        out.push_str("]\n}\n");
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn from_json(text: &str) -> std::result::Result<Self, GraphJsonError> {
        let raw: GraphFile = serde_json::from_str(text).map_err(GraphJsonError::Json)?;
        let mut edges = Vec::with_capacity(raw.edges.len());
        for (i, j, weight) in raw.edges {
            if i >= j {
                return Err(GraphJsonError::Invalid(Error::Validation(format!(
                    "edge ({i}, {j}) must be written with i < j"
                ))));
            }
            edges.push(Edge { i, j, weight });
        }
        Self::from_edges(raw.num_nodes, edges).map_err(GraphJsonError::Invalid)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            GraphJsonError::Json(err) => Error::parse(path, &err),
            GraphJsonError::Invalid(err) => err,
        })
    }
}

#[derive(Debug)]
pub enum GraphJsonError {
    Json(serde_json::Error),
    Invalid(Error),
}

#[derive(Deserialize)]
struct GraphFile {
    num_nodes: usize,
    edges: Vec<(usize, usize, f64)>,
}

fn fmt_weight(w: f64) -> String {
    // Fixed-point with enough decimals for 15 significant digits.
    let magnitude = if w == 0.0 { 0 } else { w.abs().log10().floor() as i32 };
    let decimals = (14 - magnitude).clamp(1, 40) as usize;
    format!("{w:.decimals$}")
}

/// Builds the co-prescription graph. An edge joins two classes iff some
/// diagnosis gives both a positive impact factor.
pub fn build_graph(corpus: &Corpus, weighting: EdgeWeighting) -> MedicalKnowledgeGraph {
    let table = ImpactTable::compute(corpus);
    let n = corpus.num_classes();
    let mut edges = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            let mut shared = false;
            let mut weight = 0.0;
            for row in &table.values {
                let (a, b) = (row[i], row[j]);
                let both = a > 0.0 && b > 0.0;
                shared |= both;
                if both || weighting == EdgeWeighting::AllDiagnoses {
                    weight += a + b;
                }
            }
            if shared && weight > 0.0 {
                edges.push(Edge { i, j, weight });
            }
        }
    }
    MedicalKnowledgeGraph {
        num_nodes: n,
        edges,
    }
}

/// Removes the `floor(cut_ratio * |E|)` lightest edges, ties broken by `(i, j)`.
pub fn prune_edges(graph: &MedicalKnowledgeGraph, cut_ratio: f64) -> Result<MedicalKnowledgeGraph> {
    if !(0.0..=1.0).contains(&cut_ratio) {
        return Err(Error::Domain(format!(
            "cut ratio {cut_ratio} outside [0, 1]"
        )));
    }
    // The epsilon keeps e.g. 0.3 * 10 from flooring to 2.
    let remove = ((cut_ratio * graph.edges.len() as f64) + 1e-9).floor() as usize;
    let mut order: Vec<usize> = (0..graph.edges.len()).collect();
    order.sort_by(|&a, &b| {
        let (ea, eb) = (&graph.edges[a], &graph.edges[b]);
        ea.weight
            .total_cmp(&eb.weight)
            .then((ea.i, ea.j).cmp(&(eb.i, eb.j)))
    });
    let mut keep = vec![true; graph.edges.len()];
    for &k in order.iter().take(remove) {
        keep[k] = false;
    }
    Ok(MedicalKnowledgeGraph {
        num_nodes: graph.num_nodes,
        edges: graph
            .edges
            .iter()
            .zip(keep)
            .filter_map(|(e, k)| k.then_some(*e))
            .collect(),
    })
}
