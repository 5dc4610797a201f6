//! Node embeddings for the knowledge graph: weighted random walks feeding a
//! skip-gram model with negative sampling.
//!
//! Every node has a single vector used both as center and as context.
//! Negatives for a center node are drawn uniformly from the nodes that are not
//! its 1-hop neighbors.

use std::fs;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mkg::MedicalKnowledgeGraph;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbeddingObjective {
    /// log-sigmoid on positive pairs, log-sigmoid of the negated score on
    /// sampled negatives.
    #[default]
    Sgns,
    /// Raw sigmoid on positives minus the raw dot product on negatives. It is
    /// unbounded below, so updates are norm-clipped.
    AsPrinted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WalkConfig {
    pub walks_per_node: usize,
    pub walk_length: usize,
    pub window: usize,
    pub negatives_per_positive: usize,
    pub embedding_dim: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub objective: EmbeddingObjective,
    pub seed: u64,
}

impl Default for WalkConfig {
    fn default() -> Self {
        Self {
            walks_per_node: 20,
            walk_length: 10,
            window: 3,
            negatives_per_positive: 5,
            embedding_dim: 64,
            epochs: 50,
            learning_rate: 0.025,
            objective: EmbeddingObjective::Sgns,
            seed: 0,
        }
    }
}

impl WalkConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("walks_per_node", self.walks_per_node),
            ("walk_length", self.walk_length),
            ("window", self.window),
            ("negatives_per_positive", self.negatives_per_positive),
            ("epochs", self.epochs),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.window >= self.walk_length {
            return Err(Error::Config(format!(
                "window ({}) must be smaller than walk_length ({})",
                self.window, self.walk_length
            )));
        }
        if self.embedding_dim < 2 {
            return Err(Error::Config("embedding_dim must be at least 2".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// Deterministic per-stream seed derivation (splitmix64 finalizer).
pub(crate) fn derive_seed(base: u64, a: u64, b: u64) -> u64 {
    let mut z = base
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Transition sampler: each step moves to a neighbor with probability
/// proportional to the edge weight.
pub struct WalkSampler {
    adjacency: Vec<Vec<(usize, f64)>>,
    tables: Vec<Option<WeightedIndex<f64>>>,
}

impl WalkSampler {
    pub fn new(graph: &MedicalKnowledgeGraph) -> Self {
        let adjacency = graph.adjacency();
        let tables = adjacency
            .iter()
            .map(|nbrs| {
                if nbrs.is_empty() {
                    None
                } else {
                    Some(WeightedIndex::new(nbrs.iter().map(|&(_, w)| w)).expect("positive weights"))
                }
            })
            .collect();
        Self { adjacency, tables }
    }

    /// Next node, or `None` for an isolated node.
    pub fn step<R: Rng + ?Sized>(&self, node: usize, rng: &mut R) -> Option<usize> {
        let table = self.tables[node].as_ref()?;
        Some(self.adjacency[node][table.sample(rng)].0)
    }
}

/// `walks_per_node` walks from every node, in node order. Isolated nodes yield
/// singleton walks.
pub fn random_walks(graph: &MedicalKnowledgeGraph, cfg: &WalkConfig) -> Result<Vec<Vec<usize>>> {
    cfg.validate()?;
    let sampler = WalkSampler::new(graph);
    let mut walks = Vec::with_capacity(graph.num_nodes() * cfg.walks_per_node);
    for start in 0..graph.num_nodes() {
        for w in 0..cfg.walks_per_node {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, start as u64, w as u64));
            let mut walk = vec![start];
            let mut cur = start;
            while walk.len() < cfg.walk_length {
                match sampler.step(cur, &mut rng) {
                    Some(next) => {
                        walk.push(next);
                        cur = next;
                    }
                    None => break,
                }
            }
            walks.push(walk);
        }
    }
    Ok(walks)
}

/// Row-major `N x H` matrix of node embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeEmbeddingMatrix {
    n: usize,
    h: usize,
    data: Vec<f64>,
}

impl NodeEmbeddingMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        let h = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != h) {
            return Err(Error::Shape("embedding rows have unequal lengths".into()));
        }
        let data: Vec<f64> = rows.into_iter().flatten().collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("embedding contains non-finite values".into()));
        }
        Ok(Self { n, h, data })
    }

    pub fn num_nodes(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.h
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.h..(i + 1) * self.h]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn cosine(&self, i: usize, j: usize) -> f64 {
        cosine(self.row(i), self.row(j))
    }

    /// SHA-256 over the little-endian bytes of the matrix and its shape.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update((self.n as u64).to_le_bytes());
        hasher.update((self.h as u64).to_le_bytes());
        for v in &self.data {
            hasher.update(v.to_le_bytes());
        }
        hex::encode(hasher.finalize())
    }

    pub fn to_tensor(
        &self,
        dtype: candle_core::DType,
        device: &candle_core::Device,
    ) -> Result<candle_core::Tensor> {
        Ok(candle_core::Tensor::from_slice(&self.data, (self.n, self.h), device)?.to_dtype(dtype)?)
    }

    pub fn save(&self, path: impl AsRef<Path>, seed: u64, corpus_hash: &str) -> Result<()> {
        let path = path.as_ref();
        let file = EmbeddingFile {
            n: self.n,
            h: self.h,
            seed,
            corpus_hash: corpus_hash.to_string(),
            rows: (0..self.n).map(|i| self.row(i).to_vec()).collect(),
        };
        let text = serde_json::to_string(&file)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Loads an embedding file, refusing it when its row count differs from
    /// the dictionary size.
    pub fn load(path: impl AsRef<Path>, expected_nodes: usize) -> Result<(Self, EmbeddingHeader)> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: EmbeddingFile = serde_json::from_str(&text).map_err(|e| Error::parse(path, &e))?;
        if file.n != expected_nodes {
            return Err(Error::Shape(format!(
                "embedding has {} rows but the dictionary has {expected_nodes} classes",
                file.n
            )));
        }
        if file.rows.len() != file.n || file.rows.iter().any(|r| r.len() != file.h) {
            return Err(Error::Shape("embedding header disagrees with its rows".into()));
        }
        let header = EmbeddingHeader {
            n: file.n,
            h: file.h,
            seed: file.seed,
            corpus_hash: file.corpus_hash,
        };
        Ok((Self::from_rows(file.rows)?, header))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingHeader {
    pub n: usize,
    pub h: usize,
    pub seed: u64,
    pub corpus_hash: String,
}

#[derive(Serialize, Deserialize)]
struct EmbeddingFile {
    n: usize,
    h: usize,
    seed: u64,
    corpus_hash: String,
    rows: Vec<Vec<f64>>,
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[derive(Debug, Clone)]
pub struct EmbeddingRun {
    pub embeddings: NodeEmbeddingMatrix,
    /// Mean per-pair loss of each epoch; empty when there were no positive pairs.
    pub epoch_losses: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(sigmoid(x))` without overflow.
fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

const CLIP_NORM: f64 = 1.0;

fn clip(v: &mut [f64], max_norm: f64) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        v.iter_mut().for_each(|x| *x *= s);
    }
}

/// Trains node embeddings on `(center, context)` pairs taken from the walks
/// within `cfg.window`.
pub fn train_embeddings(
    graph: &MedicalKnowledgeGraph,
    walks: &[Vec<usize>],
    cfg: &WalkConfig,
) -> Result<EmbeddingRun> {
    cfg.validate()?;
    if walks.is_empty() {
        return Err(Error::Domain("no walks to train on".into()));
    }
    let n = graph.num_nodes();
    let h = cfg.embedding_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x5eed, 1));
    let scale = 0.5 / (h as f64).sqrt();
    let mut emb: Vec<f64> = (0..n * h).map(|_| rng.random_range(-scale..scale)).collect();

    let mut pairs = Vec::new();
    for walk in walks {
        for (p, &center) in walk.iter().enumerate() {
            let lo = p.saturating_sub(cfg.window);
            let hi = (p + cfg.window).min(walk.len() - 1);
            for (q, &ctx) in walk.iter().enumerate().take(hi + 1).skip(lo) {
                if q != p && ctx != center {
                    pairs.push((center, ctx));
                }
            }
        }
    }
    if pairs.is_empty() {
        log::warn!("graph has no edges; returning a seeded random embedding");
        let rows = (0..n).map(|i| emb[i * h..(i + 1) * h].to_vec()).collect();
        return Ok(EmbeddingRun {
            embeddings: NodeEmbeddingMatrix::from_rows(rows)?,
            epoch_losses: Vec::new(),
        });
    }

    let adjacency = graph.adjacency();
    let non_neighbors: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            let mut is_nbr = vec![false; n];
            is_nbr[i] = true;
            for &(j, _) in &adjacency[i] {
                is_nbr[j] = true;
            }
            (0..n).filter(|&j| !is_nbr[j]).collect()
        })
        .collect();

    let total_updates = (cfg.epochs * pairs.len()) as f64;
    let mut done = 0usize;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut center_grad = vec![0.0; h];
    let mut other_grad = vec![0.0; h];
    let mut negatives = Vec::with_capacity(cfg.negatives_per_positive);

    for _ in 0..cfg.epochs {
        pairs.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for &(c, ctx) in &pairs {
            let lr = cfg.learning_rate * (1.0 - done as f64 / total_updates).max(1e-4);
            done += 1;
            negatives.clear();
            let pool = &non_neighbors[c];
            if !pool.is_empty() {
                for _ in 0..cfg.negatives_per_positive {
                    negatives.push(pool[rng.random_range(0..pool.len())]);
                }
            }

            center_grad.iter_mut().for_each(|g| *g = 0.0);
            let targets = std::iter::once((ctx, true)).chain(negatives.iter().map(|&k| (k, false)));
            for (other, positive) in targets {
                let (uc, uo) = rows_pair(&emb, c, other, h);
                let score: f64 = uc.iter().zip(uo).map(|(a, b)| a * b).sum();
                // d(loss)/d(score)
                let coeff = match (cfg.objective, positive) {
                    (EmbeddingObjective::Sgns, true) => {
                        loss_sum -= log_sigmoid(score);
                        sigmoid(score) - 1.0
                    }
                    (EmbeddingObjective::Sgns, false) => {
                        loss_sum -= log_sigmoid(-score);
                        sigmoid(score)
                    }
                    (EmbeddingObjective::AsPrinted, true) => {
                        let s = sigmoid(score);
                        loss_sum -= s;
                        -s * (1.0 - s)
                    }
                    (EmbeddingObjective::AsPrinted, false) => {
                        loss_sum += score;
                        1.0
                    }
                };
                for k in 0..h {
                    center_grad[k] += coeff * uo[k];
                    other_grad[k] = coeff * uc[k];
                }
                if cfg.objective == EmbeddingObjective::AsPrinted {
                    clip(&mut other_grad, CLIP_NORM);
                }
                let row = &mut emb[other * h..(other + 1) * h];
                for k in 0..h {
                    row[k] -= lr * other_grad[k];
                }
            }
            if cfg.objective == EmbeddingObjective::AsPrinted {
                clip(&mut center_grad, CLIP_NORM);
            }
            let row = &mut emb[c * h..(c + 1) * h];
            for k in 0..h {
                row[k] -= lr * center_grad[k];
            }
        }
        epoch_losses.push(loss_sum / pairs.len() as f64);
    }

    let rows = (0..n).map(|i| emb[i * h..(i + 1) * h].to_vec()).collect();
    Ok(EmbeddingRun {
        embeddings: NodeEmbeddingMatrix::from_rows(rows)?,
        epoch_losses,
    })
}

fn rows_pair(emb: &[f64], a: usize, b: usize, h: usize) -> (&[f64], &[f64]) {
    (&emb[a * h..(a + 1) * h], &emb[b * h..(b + 1) * h])
}

/// Mean cosine over neighbor pairs and over non-neighbor pairs (unordered,
/// distinct nodes). Either mean is `None` when its pair set is empty.
pub fn neighbor_cosine_gap(
    graph: &MedicalKnowledgeGraph,
    emb: &NodeEmbeddingMatrix,
) -> (Option<f64>, Option<f64>) {
    let (mut nb, mut nb_count, mut non, mut non_count) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..graph.num_nodes() {
        for j in (i + 1)..graph.num_nodes() {
            let c = emb.cosine(i, j);
            if graph.weight(i, j).is_some() {
                nb += c;
                nb_count += 1;
            } else {
                non += c;
                non_count += 1;
            }
        }
    }
    (
        (nb_count > 0).then(|| nb / nb_count as f64),
        (non_count > 0).then(|| non / non_count as f64),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mkg::Edge;

    fn graph(n: usize, edges: &[(usize, usize, f64)]) -> MedicalKnowledgeGraph {
        MedicalKnowledgeGraph::from_edges(n, edges.iter().map(|&(i, j, weight)| Edge { i, j, weight })).unwrap()
    }

    fn train(g: &MedicalKnowledgeGraph, cfg: &WalkConfig) -> EmbeddingRun {
        let walks = random_walks(g, cfg).unwrap();
        train_embeddings(g, &walks, cfg).unwrap()
    }

    #[test]
    fn transition_frequencies_follow_weights() {
        // X=0, Y=1 (w=1), Z=2 (w=3)
        let g = graph(3, &[(0, 1, 1.0), (0, 2, 3.0)]);
        let sampler = WalkSampler::new(&g);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let trials = 10_000;
        let to_z = (0..trials).filter(|_| sampler.step(0, &mut rng) == Some(2)).count();
        let freq = to_z as f64 / trials as f64;
        assert!((freq - 0.75).abs() < 0.02, "{freq}");
    }

    #[test]
    fn single_neighbor_and_isolated_walks() {
        let g = graph(3, &[(0, 1, 2.0)]);
        let cfg = WalkConfig { walks_per_node: 3, walk_length: 5, window: 2, ..Default::default() };
        let walks = random_walks(&g, &cfg).unwrap();
        assert_eq!(walks.len(), 9);
        for w in &walks[..3] {
            assert_eq!(w, &[0, 1, 0, 1, 0]);
        }
        for w in &walks[6..] {
            assert_eq!(w, &[2]);
        }
    }

    #[test]
    fn config_validation() {
        let bad = WalkConfig { window: 10, walk_length: 10, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = WalkConfig { embedding_dim: 1, ..Default::default() };
        assert!(bad.validate().is_err());
        assert!(WalkConfig::default().validate().is_ok());
    }

    #[test]
    fn triangle_beats_isolated_node() {
        let g = graph(4, &[(0, 1, 1.0), (0, 2, 1.0), (1, 2, 1.0)]);
        let run = train(&g, &WalkConfig { seed: 3, ..Default::default() });
        let e = &run.embeddings;
        let min_edge = [(0, 1), (0, 2), (1, 2)]
            .iter()
            .map(|&(a, b)| e.cosine(a, b))
            .fold(f64::INFINITY, f64::min);
        assert!(min_edge > e.cosine(0, 3), "{min_edge} vs {}", e.cosine(0, 3));
    }

    #[test]
    fn cliques_separate() {
        let mut edges = Vec::new();
        for block in [0usize, 4] {
            for a in 0..4 {
                for b in (a + 1)..4 {
                    edges.push((block + a, block + b, 1.0 + (a + b) as f64 * 0.1));
                }
            }
        }
        let g = graph(8, &edges);
        let run = train(&g, &WalkConfig { seed: 5, ..Default::default() });
        let (within, across) = neighbor_cosine_gap(&g, &run.embeddings);
        assert!(within.unwrap() > across.unwrap());
    }

    #[test]
    fn single_edge_converges() {
        let g = graph(2, &[(0, 1, 1.0)]);
        let run = train(&g, &WalkConfig { seed: 1, ..Default::default() });
        assert!(run.embeddings.cosine(0, 1) > 0.9);
    }

    #[test]
    fn deterministic_and_loss_decreases() {
        let g = graph(5, &[(0, 1, 1.0), (1, 2, 2.0), (3, 4, 0.5), (2, 0, 1.5)]);
        let cfg = WalkConfig { seed: 9, epochs: 20, ..Default::default() };
        let a = train(&g, &cfg);
        let b = train(&g, &cfg);
        assert_eq!(a.embeddings, b.embeddings);
        assert_eq!(a.embeddings.content_hash(), b.embeddings.content_hash());
        assert!(a.epoch_losses.last().unwrap() < a.epoch_losses.first().unwrap());
    }

    #[test]
    fn edgeless_graph_gives_random_matrix() {
        let g = graph(3, &[]);
        let cfg = WalkConfig::default();
        let run = train(&g, &cfg);
        assert!(run.epoch_losses.is_empty());
        assert_eq!(run.embeddings.num_nodes(), 3);
        assert!(run.embeddings.as_slice().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn as_printed_objective_stays_finite() {
        let g = graph(4, &[(0, 1, 1.0), (2, 3, 1.0)]);
        let cfg = WalkConfig { objective: EmbeddingObjective::AsPrinted, epochs: 10, ..Default::default() };
        let run = train(&g, &cfg);
        assert!(run.embeddings.as_slice().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn file_roundtrip_checks_rows() {
        let g = graph(3, &[(0, 1, 1.0)]);
        let run = train(&g, &WalkConfig { epochs: 2, embedding_dim: 4, ..Default::default() });
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("u.json");
        run.embeddings.save(&path, 0, "abc").unwrap();
        let (back, header) = NodeEmbeddingMatrix::load(&path, 3).unwrap();
        assert_eq!(back, run.embeddings);
        assert_eq!(header.corpus_hash, "abc");
        assert!(matches!(NodeEmbeddingMatrix::load(&path, 4), Err(Error::Shape(_))));
    }
}
