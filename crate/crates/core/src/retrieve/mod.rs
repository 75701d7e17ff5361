//! Query-to-node retrieval over the ontology by exact cosine scan.

mod encoder;

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};
use std::io::Read;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use encoder::{Encoder, MockEncoder, Serialized, MOCK_DIM};

use crate::ontology::{Expansion, Ontology, OntologyError};

#[derive(Debug, Error)]
pub enum RetrieveError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("zero vector has no direction")]
    ZeroVector,
    #[error("embedding contains non-finite values")]
    NonFinite,
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("encoder failure: {0}")]
    Encoder(String),
    #[error("retrieval index is empty")]
    EmptyIndex,
    #[error("invalid retrieval config: {0}")]
    Config(String),
    #[error("embedding sidecar: {0}")]
    Sidecar(String),
    #[error(transparent)]
    Ontology(#[from] OntologyError),
}

pub type Result<T, E = RetrieveError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    values: Vec<f64>,
    norm: f64,
}

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|x| !x.is_finite()) {
            return Err(RetrieveError::NonFinite);
        }
        let norm = values.iter().map(|x| x * x).sum::<f64>().sqrt();
        Ok(Embedding { values, norm })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn norm(&self) -> f64 {
        self.norm
    }

    pub fn dimension(&self) -> usize {
        self.values.len()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn cosine(u: &Embedding, v: &Embedding) -> Result<f64> {
    if u.dimension() != v.dimension() {
        return Err(RetrieveError::DimensionMismatch { expected: u.dimension(), found: v.dimension() });
    }
    if u.norm == 0.0 || v.norm == 0.0 {
        return Err(RetrieveError::ZeroVector);
    }
    Ok(dot(&u.values, &v.values) / (u.norm * v.norm))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    pub k: usize,
    pub theta: f64,
    pub expansion: Expansion,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig { k: 5, theta: 0.65, expansion: Expansion::None }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(RetrieveError::Config("k must be at least 1".into()));
        }
        if !self.theta.is_finite() {
            return Err(RetrieveError::Config("theta must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RetrievalResult {
    /// Sorted by descending similarity, ties by id ascending.
    pub scored: Vec<(String, f64)>,
    /// Scored ids after expansion, sorted by (depth, id).
    pub subgraph: Vec<String>,
}

/// Node text fed to the encoder.
pub fn node_text(label: &str, description: &str) -> String {
    format!("{label}: {description}")
}

/// Embeddings for every non-root node, in ontology order.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeIndex {
    dim: usize,
    ids: Vec<String>,
    vectors: Vec<f64>,
    norms: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SidecarFile {
    dimension: usize,
    embeddings: BTreeMap<String, Vec<f64>>,
}

impl NodeIndex {
    pub fn build(o: &Ontology, enc: &dyn Encoder) -> Result<Self> {
        let dim = enc.dimension();
        let mut index = NodeIndex { dim, ids: Vec::new(), vectors: Vec::new(), norms: Vec::new() };
        for n in o.intent_nodes() {
            let e = enc
                .encode(&node_text(&n.label, &n.description))
                .map_err(|e| RetrieveError::Encoder(format!("node `{}`: {e}", n.id)))?;
            index.push(n.id.clone(), e)?;
        }
        Ok(index)
    }

    fn push(&mut self, id: String, e: Embedding) -> Result<()> {
        if e.dimension() != self.dim {
            return Err(RetrieveError::DimensionMismatch { expected: self.dim, found: e.dimension() });
        }
        self.ids.push(id);
        self.norms.push(e.norm);
        self.vectors.extend_from_slice(&e.values);
        Ok(())
    }

    /// Loads a sidecar file, checking dimension and coverage of every non-root node.
    pub fn from_sidecar<R: Read>(o: &Ontology, mut source: R) -> Result<Self> {
        let mut text = String::new();
        source.read_to_string(&mut text).map_err(|e| RetrieveError::Sidecar(e.to_string()))?;
        let mut file: SidecarFile =
            serde_json::from_str(&text).map_err(|e| RetrieveError::Sidecar(e.to_string()))?;
        if let Some(stray) = file.embeddings.keys().find(|id| !o.contains(id) || o.is_root(id)) {
            return Err(RetrieveError::Sidecar(format!("embedding for unknown or root node `{stray}`")));
        }
        let mut index =
            NodeIndex { dim: file.dimension, ids: Vec::new(), vectors: Vec::new(), norms: Vec::new() };
        for n in o.intent_nodes() {
            let values = file
                .embeddings
                .remove(&n.id)
                .ok_or_else(|| RetrieveError::Sidecar(format!("missing embedding for node `{}`", n.id)))?;
            index.push(n.id.clone(), Embedding::new(values)?)?;
        }
        Ok(index)
    }

    pub fn to_sidecar(&self) -> String {
        let file = SidecarFile {
            dimension: self.dim,
            embeddings: self
                .ids
                .iter()
                .enumerate()
                .map(|(i, id)| (id.clone(), self.vector(i).to_vec()))
                .collect(),
        };
        serde_json::to_string(&file).expect("sidecar serializes")
    }

    pub fn dimension(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn embedding(&self, i: usize) -> Embedding {
        Embedding { values: self.vector(i).to_vec(), norm: self.norms[i] }
    }

    /// Similarity of `query` to node `i`; same expression as [`cosine`].
    pub fn similarity(&self, i: usize, query: &Embedding) -> f64 {
        dot(query.values(), self.vector(i)) / (query.norm() * self.norms[i])
    }

    /// Exact top-k by cosine, keeping only similarities `>= theta`.
    pub fn top_k(&self, query: &Embedding, k: usize, theta: f64) -> Result<Vec<(String, f64)>> {
        if self.is_empty() {
            return Err(RetrieveError::EmptyIndex);
        }
        if query.dimension() != self.dim {
            return Err(RetrieveError::DimensionMismatch { expected: self.dim, found: query.dimension() });
        }
        if query.norm() == 0.0 {
            return Err(RetrieveError::ZeroVector);
        }
        if k == 0 {
            return Ok(Vec::new());
        }
        // max-heap whose top is the worst kept candidate
        let mut heap: BinaryHeap<Ranked<'_>> = BinaryHeap::with_capacity(k + 1);
        for (i, id) in self.ids.iter().enumerate() {
            let sim = self.similarity(i, query);
            if sim < theta {
                continue;
            }
            let cand = Ranked { sim, id };
            if heap.len() < k {
                heap.push(cand);
            } else if cand < *heap.peek().expect("heap holds k items") {
                heap.pop();
                heap.push(cand);
            }
        }
        Ok(heap.into_sorted_vec().into_iter().map(|r| (r.id.clone(), r.sim)).collect())
    }
}

/// Orders better candidates first: higher similarity, then smaller id.
#[derive(Debug)]
struct Ranked<'a> {
    sim: f64,
    id: &'a String,
}

impl Ord for Ranked<'_> {
    fn cmp(&self, other: &Self) -> Ordering {
        other.sim.total_cmp(&self.sim).then_with(|| self.id.cmp(other.id))
    }
}

impl PartialOrd for Ranked<'_> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl PartialEq for Ranked<'_> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Ranked<'_> {}

/// Scores a pre-embedded query and expands the hits.
pub fn retrieve_embedded(
    o: &Ontology,
    index: &NodeIndex,
    query: &Embedding,
    cfg: &RetrievalConfig,
) -> Result<RetrievalResult> {
    cfg.validate()?;
    let scored = index.top_k(query, cfg.k, cfg.theta)?;
    let seeds: Vec<&str> = scored.iter().map(|(id, _)| id.as_str()).collect();
    let subgraph = o.expand_subgraph(&seeds, cfg.expansion)?;
    Ok(RetrievalResult { scored, subgraph })
}

pub fn retrieve(
    o: &Ontology,
    index: &NodeIndex,
    query: &str,
    enc: &dyn Encoder,
    cfg: &RetrievalConfig,
) -> Result<RetrievalResult> {
    let e = enc.encode(query)?;
    retrieve_embedded(o, index, &e, cfg)
}
