//! Embedding index, k-NN proximity graph, community detection and
//! cluster-level deduplication.

mod leiden;

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::record_store::{DataRecord, Modality};

pub use leiden::{detect_communities, detect_communities_with, LeidenConfig};

/// Exact cosine index. Vectors are unit-normalized on insert and stored
/// contiguously.
#[derive(Debug, Clone)]
pub struct EmbeddingIndex {
    dim: usize,
    ids: Vec<String>,
    data: Vec<f64>,
}

pub fn normalize(v: &[f64]) -> Result<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::ZeroVector);
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine similarity of two raw vectors.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    Ok(dot(&normalize(a)?, &normalize(b)?))
}

/// Orders by similarity descending, then id ascending.
fn rank_order(a: &(usize, f64), b: &(usize, f64), ids: &[String]) -> std::cmp::Ordering {
    b.1.total_cmp(&a.1).then_with(|| ids[a.0].cmp(&ids[b.0]))
}

impl EmbeddingIndex {
    pub fn new(dim: usize) -> Self {
        EmbeddingIndex {
            dim,
            ids: Vec::new(),
            data: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
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
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn insert(&mut self, id: impl Into<String>, v: &[f64]) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                got: v.len(),
            });
        }
        let unit = normalize(v)?;
        self.ids.push(id.into());
        self.data.extend_from_slice(&unit);
        Ok(())
    }

    /// Top `k` by cosine, ties broken by ascending id. Entries whose
    /// position is in `exclude` are skipped before truncation.
    fn top_k(&self, query: &[f64], k: usize, exclude: impl Fn(usize) -> bool) -> Result<Vec<(usize, f64)>> {
        if query.len() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                got: query.len(),
            });
        }
        if self.is_empty() || k == 0 {
            return Ok(Vec::new());
        }
        let q = normalize(query)?;
        let mut scored: Vec<(usize, f64)> = (0..self.len())
            .filter(|&i| !exclude(i))
            .map(|i| (i, dot(&q, self.vector(i))))
            .collect();
        let cmp = |a: &(usize, f64), b: &(usize, f64)| rank_order(a, b, &self.ids);
        if scored.len() > k {
            scored.select_nth_unstable_by(k - 1, cmp);
            scored.truncate(k);
        }
        scored.sort_unstable_by(cmp);
        Ok(scored)
    }

    pub fn knn(&self, query: &[f64], k: usize) -> Result<Vec<(String, f64)>> {
        Ok(self
            .top_k(query, k, |_| false)?
            .into_iter()
            .map(|(i, s)| (self.ids[i].clone(), s))
            .collect())
    }

    /// Like [`knn`](Self::knn) with an exclusion set applied first.
    pub fn search(&self, query: &[f64], top_m: usize, exclude: &BTreeSet<String>) -> Result<Vec<(String, f64)>> {
        Ok(self
            .top_k(query, top_m, |i| exclude.contains(&self.ids[i]))?
            .into_iter()
            .map(|(i, s)| (self.ids[i].clone(), s))
            .collect())
    }
}

/// Builds an index over one modality. Every record must carry it.
pub fn build_index<'a>(
    records: impl IntoIterator<Item = &'a DataRecord>,
    modality: Modality,
) -> Result<EmbeddingIndex> {
    let mut index: Option<EmbeddingIndex> = None;
    for record in records {
        let v = record
            .embedding(modality)
            .ok_or_else(|| Error::InvalidArgument(format!("record {} has no {modality:?} embedding", record.id)))?;
        index
            .get_or_insert_with(|| EmbeddingIndex::new(v.len()))
            .insert(record.id.clone(), v)?;
    }
    Ok(index.unwrap_or_else(|| EmbeddingIndex::new(0)))
}

/// Undirected similarity graph over index positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProximityGraph {
    pub nodes: Vec<String>,
    /// `(i, j, similarity)` with `i < j`, sorted.
    pub edges: Vec<(usize, usize, f64)>,
    pub k: usize,
}

impl ProximityGraph {
    pub fn from_edges(n: usize, edges: impl IntoIterator<Item = (usize, usize, f64)>) -> Self {
        let mut merged: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for (a, b, w) in edges {
            if a == b {
                continue;
            }
            merged.insert((a.min(b), a.max(b)), w);
        }
        ProximityGraph {
            nodes: (0..n).map(|i| i.to_string()).collect(),
            edges: merged.into_iter().map(|((a, b), w)| (a, b, w)).collect(),
            k: 0,
        }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn degree_counts(&self) -> Vec<usize> {
        let mut deg = vec![0; self.nodes.len()];
        for &(a, b, _) in &self.edges {
            deg[a] += 1;
            deg[b] += 1;
        }
        deg
    }

    /// `i j weight` per line, using node ids.
    pub fn write_edge_list(&self, out: &mut impl Write) -> std::io::Result<()> {
        for &(a, b, w) in &self.edges {
            writeln!(out, "{} {} {}", self.nodes[a], self.nodes[b], w)?;
        }
        Ok(())
    }
}

/// Connects each node to its `k` nearest other nodes, keeping edges whose
/// similarity is at least `min_similarity`.
pub fn build_knn_graph(index: &EmbeddingIndex, k: usize, min_similarity: f64) -> Result<ProximityGraph> {
    let mut edges: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for i in 0..index.len() {
        for (j, sim) in index.top_k(index.vector(i), k, |j| j == i)? {
            if sim >= min_similarity {
                edges.insert((i.min(j), i.max(j)), sim);
            }
        }
    }
    Ok(ProximityGraph {
        nodes: index.ids().to_vec(),
        edges: edges.into_iter().map(|((a, b), w)| (a, b, w)).collect(),
        k,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    /// Community of each node, by node position.
    pub assignment: Vec<usize>,
    pub count: usize,
}

impl Partition {
    pub fn singletons(n: usize) -> Self {
        Partition {
            assignment: (0..n).collect(),
            count: n,
        }
    }

    /// Renumbers communities densely in order of each community's first
    /// node.
    pub fn from_labels(labels: &[usize]) -> Self {
        let mut remap = BTreeMap::new();
        let assignment = labels
            .iter()
            .map(|l| {
                let next = remap.len();
                *remap.entry(*l).or_insert(next)
            })
            .collect();
        Partition {
            assignment,
            count: remap.len(),
        }
    }

    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.count];
        for (node, &c) in self.assignment.iter().enumerate() {
            out[c].push(node);
        }
        out
    }

    /// Community size → number of communities of that size.
    pub fn size_histogram(&self) -> BTreeMap<usize, usize> {
        let mut hist = BTreeMap::new();
        for m in self.members() {
            *hist.entry(m.len()).or_default() += 1;
        }
        hist
    }

    pub fn to_json_map(&self, graph: &ProximityGraph) -> BTreeMap<String, usize> {
        graph
            .nodes
            .iter()
            .cloned()
            .zip(self.assignment.iter().copied())
            .collect()
    }
}

/// Weighted modularity with resolution `gamma`. Non-positive edge weights
/// carry no weight; a graph with no positive weight scores 0.
pub fn modularity(graph: &ProximityGraph, partition: &Partition, gamma: f64) -> f64 {
    let mut internal = vec![0.0; partition.count];
    let mut total = vec![0.0; partition.count];
    let mut m = 0.0;
    for &(a, b, w) in &graph.edges {
        let w = w.max(0.0);
        m += w;
        let (ca, cb) = (partition.assignment[a], partition.assignment[b]);
        total[ca] += w;
        total[cb] += w;
        if ca == cb {
            internal[ca] += 2.0 * w;
        }
    }
    if m <= 0.0 {
        return 0.0;
    }
    let two_m = 2.0 * m;
    internal
        .iter()
        .zip(&total)
        .map(|(ein, tot)| ein / two_m - gamma * (tot / two_m).powi(2))
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DedupStrategy {
    /// Keep the member with the highest value of the named external score.
    HighestScore {
        score: String,
    },
    LowestId,
}

impl Default for DedupStrategy {
    fn default() -> Self {
        DedupStrategy::HighestScore {
            score: "aesthetic".into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DedupResult {
    pub representatives: BTreeSet<String>,
    /// Dropped id → the representative it collapsed into.
    pub dropped: BTreeMap<String, String>,
}

/// One representative per community; ties fall to the lowest id.
pub fn deduplicate(
    graph: &ProximityGraph,
    partition: &Partition,
    records: &BTreeMap<String, DataRecord>,
    strategy: &DedupStrategy,
) -> DedupResult {
    let score_of = |id: &str| -> f64 {
        match strategy {
            DedupStrategy::LowestId => 0.0,
            DedupStrategy::HighestScore { score } => records
                .get(id)
                .and_then(|r| r.profile.as_ref())
                .and_then(|p| p.external_scores.get(score))
                .copied()
                .unwrap_or(f64::NEG_INFINITY),
        }
    };
    let mut result = DedupResult::default();
    for members in partition.members() {
        let mut ids: Vec<&str> = members.iter().map(|&n| graph.nodes[n].as_str()).collect();
        ids.sort_unstable();
        let Some(&first) = ids.first() else { continue };
        let mut best = (first, score_of(first));
        for &id in &ids[1..] {
            let s = score_of(id);
            if s > best.1 {
                best = (id, s);
            }
        }
        result.representatives.insert(best.0.to_string());
        for &id in &ids {
            if id != best.0 {
                result.dropped.insert(id.to_string(), best.0.to_string());
            }
        }
    }
    result
}
