//! Concept graph: PageRank pruning, taxonomy construction, BM25 tag
//! statistics, rarity-based sampling weights and stratified weighted
//! sampling without replacement.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_DAMPING: f64 = 0.85;
pub const DEFAULT_TOL: f64 = 1e-9;
pub const DEFAULT_MAX_ITER: usize = 1000;
pub const BM25_K1: f64 = 1.2;
pub const BM25_B: f64 = 0.75;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Concept {
    pub id: String,
    pub name: String,
    #[serde(rename = "weight", default = "one")]
    pub manual_weight: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct ConceptFile {
    concepts: Vec<Concept>,
    #[serde(default)]
    hyperlinks: Vec<(String, String)>,
    #[serde(default)]
    taxonomy: Vec<(String, String)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pagerank: Option<BTreeMap<String, f64>>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    counts: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConceptGraph {
    pub concepts: BTreeMap<String, Concept>,
    pub hyperlinks: Vec<(String, String)>,
    /// parent -> child
    pub taxonomy: Vec<(String, String)>,
    pub pagerank: Option<BTreeMap<String, f64>>,
    pub counts: BTreeMap<String, u64>,
}

impl ConceptGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let file: ConceptFile = serde_path_to_error::deserialize(de).map_err(|e| Error::Config {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        let graph = ConceptGraph {
            concepts: file.concepts.into_iter().map(|c| (c.id.clone(), c)).collect(),
            hyperlinks: file.hyperlinks,
            taxonomy: file.taxonomy,
            pagerank: file.pagerank,
            counts: file.counts,
        };
        graph.validate()?;
        Ok(graph)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        let file = ConceptFile {
            concepts: self.concepts.values().cloned().collect(),
            hyperlinks: self.hyperlinks.clone(),
            taxonomy: self.taxonomy.clone(),
            pagerank: self.pagerank.clone(),
            counts: self.counts.clone(),
        };
        serde_json::to_string_pretty(&file).expect("concept graph serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }

    /// Checks edge endpoints, weights, single parents and acyclicity.
    pub fn validate(&self) -> Result<()> {
        for c in self.concepts.values() {
            if !(c.manual_weight >= 0.0 && c.manual_weight.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "concept {} has weight {}",
                    c.id, c.manual_weight
                )));
            }
        }
        for (a, b) in self.hyperlinks.iter().chain(&self.taxonomy) {
            for id in [a, b] {
                if !self.concepts.contains_key(id) {
                    return Err(Error::NotFound(id.clone()));
                }
            }
        }
        let mut parent: BTreeMap<&str, &str> = BTreeMap::new();
        for (p, c) in &self.taxonomy {
            if let Some(prev) = parent.insert(c, p) {
                if prev != p {
                    return Err(Error::InvalidArgument(format!(
                        "concept {c} has two parents ({prev}, {p})"
                    )));
                }
            }
        }
        self.leaves_up_order().map(|_| ())
    }

    /// Adds a concept as a new root with count 0. Existing ids are kept.
    pub fn add_concept(&mut self, id: &str, name: &str, manual_weight: f64) -> bool {
        if self.concepts.contains_key(id) {
            return false;
        }
        self.concepts.insert(
            id.to_string(),
            Concept {
                id: id.to_string(),
                name: name.to_string(),
                manual_weight,
            },
        );
        self.counts.insert(id.to_string(), 0);
        true
    }

    pub fn children(&self) -> BTreeMap<&str, Vec<&str>> {
        let mut out: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        for (p, c) in &self.taxonomy {
            out.entry(p).or_default().push(c);
        }
        out
    }

    pub fn roots(&self) -> Vec<&str> {
        let has_parent: BTreeSet<&str> = self.taxonomy.iter().map(|(_, c)| c.as_str()).collect();
        self.concepts
            .keys()
            .map(String::as_str)
            .filter(|id| !has_parent.contains(id))
            .collect()
    }

    /// Lowercased concept name -> id. On duplicate names the smallest id wins.
    pub fn name_index(&self) -> BTreeMap<String, String> {
        let mut out = BTreeMap::new();
        for c in self.concepts.values() {
            out.entry(c.name.to_lowercase()).or_insert_with(|| c.id.clone());
        }
        out
    }

    /// Recounts tag occurrences from a corpus of tag lists.
    pub fn count_tags<'a, I, T>(&mut self, tag_lists: I)
    where
        I: IntoIterator<Item = T>,
        T: IntoIterator<Item = &'a String>,
    {
        let index = self.name_index();
        self.counts = self.concepts.keys().map(|id| (id.clone(), 0)).collect();
        for tags in tag_lists {
            for tag in tags {
                if let Some(id) = index.get(&tag.to_lowercase()) {
                    *self.counts.entry(id.clone()).or_default() += 1;
                }
            }
        }
    }

    /// Applies a name -> weight map. Returns the names that matched nothing.
    pub fn apply_manual_weights(&mut self, weights: &BTreeMap<String, f64>) -> Result<Vec<String>> {
        let index = self.name_index();
        let mut unmatched = Vec::new();
        for (name, &w) in weights {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::InvalidArgument(format!("weight for {name} is {w}")));
            }
            match index.get(&name.to_lowercase()) {
                Some(id) => self.concepts.get_mut(id).expect("indexed").manual_weight = w,
                None => unmatched.push(name.clone()),
            }
        }
        Ok(unmatched)
    }

    /// Post-order over the taxonomy forest (children before parents).
    fn leaves_up_order(&self) -> Result<Vec<&str>> {
        let children = self.children();
        let mut state: BTreeMap<&str, u8> = BTreeMap::new();
        let mut order = Vec::with_capacity(self.concepts.len());
        for start in self.concepts.keys() {
            if state.contains_key(start.as_str()) {
                continue;
            }
            let mut stack: Vec<(&str, usize)> = vec![(start, 0)];
            state.insert(start, 1);
            while let Some(&mut (node, ref mut next)) = stack.last_mut() {
                let kids = children.get(node).map(Vec::as_slice).unwrap_or(&[]);
                if *next < kids.len() {
                    let child = kids[*next];
                    *next += 1;
                    match state.get(child) {
                        Some(1) => return Err(Error::Cycle(child.to_string())),
                        Some(_) => {}
                        None => {
                            state.insert(child, 1);
                            stack.push((child, 0));
                        }
                    }
                } else {
                    state.insert(node, 2);
                    order.push(node);
                    stack.pop();
                }
            }
        }
        Ok(order)
    }
}

/// Power iteration with uniform teleport; dangling mass is spread uniformly.
/// Duplicate hyperlinks count once.
pub fn pagerank(graph: &ConceptGraph, damping: f64, tol: f64, max_iter: usize) -> Result<BTreeMap<String, f64>> {
    let ids: Vec<&String> = graph.concepts.keys().collect();
    let n = ids.len();
    if n == 0 {
        return Err(Error::InvalidArgument("pagerank needs at least one concept".into()));
    }
    if !(0.0..=1.0).contains(&damping) {
        return Err(Error::InvalidArgument(format!("damping {damping} outside [0, 1]")));
    }
    let pos: BTreeMap<&str, usize> = ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let mut edges = BTreeSet::new();
    for (s, d) in &graph.hyperlinks {
        if let (Some(&a), Some(&b)) = (pos.get(s.as_str()), pos.get(d.as_str())) {
            edges.insert((a, b));
        }
    }
    let mut out_deg = vec![0usize; n];
    for &(s, _) in &edges {
        out_deg[s] += 1;
    }
    let nf = n as f64;
    let mut x = vec![1.0 / nf; n];
    let mut delta = f64::INFINITY;
    for _ in 0..max_iter {
        let dangling: f64 = (0..n).filter(|&i| out_deg[i] == 0).map(|i| x[i]).sum();
        let base = (1.0 - damping) / nf + damping * dangling / nf;
        let mut y = vec![base; n];
        for &(s, d) in &edges {
            y[d] += damping * x[s] / out_deg[s] as f64;
        }
        delta = y.iter().zip(&x).map(|(a, b)| (a - b).abs()).sum();
        x = y;
        if delta < tol {
            let total: f64 = x.iter().sum();
            return Ok(ids.into_iter().cloned().zip(x.into_iter().map(|v| v / total)).collect());
        }
    }
    Err(Error::NoConvergence {
        iterations: max_iter,
        delta,
        last: x,
    })
}

/// Linear-interpolation quantile (R type 7) of unsorted values.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let h = (v.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(v.len() - 1);
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

/// Removes concepts whose PageRank is strictly below the `q`-quantile.
/// PageRank is computed with defaults if absent. Children of removed
/// concepts become roots. The result carries no PageRank.
pub fn prune_by_centrality(graph: &ConceptGraph, q: f64) -> Result<ConceptGraph> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::InvalidArgument(format!("quantile {q} outside (0, 1)")));
    }
    let scores = match &graph.pagerank {
        Some(p) => p.clone(),
        None => pagerank(graph, DEFAULT_DAMPING, DEFAULT_TOL, DEFAULT_MAX_ITER)?,
    };
    let values: Vec<f64> = graph
        .concepts
        .keys()
        .map(|id| scores.get(id).copied().unwrap_or(0.0))
        .collect();
    if values.is_empty() {
        return Ok(graph.clone());
    }
    let cut = quantile(&values, q);
    let keep: BTreeSet<&String> = graph
        .concepts
        .keys()
        .zip(&values)
        .filter(|(_, &v)| v >= cut)
        .map(|(id, _)| id)
        .collect();
    let both = |(a, b): &&(String, String)| keep.contains(a) && keep.contains(b);
    Ok(ConceptGraph {
        concepts: graph
            .concepts
            .iter()
            .filter(|(id, _)| keep.contains(id))
            .map(|(id, c)| (id.clone(), c.clone()))
            .collect(),
        hyperlinks: graph.hyperlinks.iter().filter(both).cloned().collect(),
        taxonomy: graph.taxonomy.iter().filter(both).cloned().collect(),
        pagerank: None,
        counts: graph
            .counts
            .iter()
            .filter(|(id, _)| keep.contains(id))
            .map(|(id, c)| (id.clone(), *c))
            .collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Taxonomy {
    pub root: String,
    /// Synthetic cluster ids, root first.
    pub internal: Vec<String>,
    pub edges: Vec<(String, String)>,
}

impl Taxonomy {
    /// Registers the cluster nodes as concepts and appends the edges.
    pub fn attach(&self, graph: &mut ConceptGraph) {
        for id in &self.internal {
            graph.add_concept(id, id, 1.0);
        }
        for (p, c) in &self.edges {
            graph.add_concept(c, c, 1.0);
            graph.taxonomy.push((p.clone(), c.clone()));
        }
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's k-means with farthest-point seeding from the first member.
/// Returns groups of member positions, empty groups removed.
fn kmeans(points: &[&[f64]], k: usize) -> Vec<Vec<usize>> {
    let n = points.len();
    let mut centers: Vec<Vec<f64>> = vec![points[0].to_vec()];
    while centers.len() < k {
        let (far, dist) = (0..n)
            .map(|i| {
                (
                    i,
                    centers
                        .iter()
                        .map(|c| sq_dist(points[i], c))
                        .fold(f64::INFINITY, f64::min),
                )
            })
            .fold((0, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
        if dist <= 0.0 {
            break;
        }
        centers.push(points[far].to_vec());
    }
    let mut assign = vec![usize::MAX; n];
    for _ in 0..100 {
        let mut changed = false;
        for i in 0..n {
            let best = (0..centers.len())
                .min_by(|&a, &b| sq_dist(points[i], &centers[a]).total_cmp(&sq_dist(points[i], &centers[b])))
                .expect("k >= 1");
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        for (c, center) in centers.iter_mut().enumerate() {
            let members: Vec<usize> = (0..n).filter(|&i| assign[i] == c).collect();
            if members.is_empty() {
                continue;
            }
            for (d, x) in center.iter_mut().enumerate() {
                *x = members.iter().map(|&i| points[i][d]).sum::<f64>() / members.len() as f64;
            }
        }
    }
    let mut groups = vec![Vec::new(); centers.len()];
    for (i, &c) in assign.iter().enumerate() {
        groups[c].push(i);
    }
    groups.retain(|g| !g.is_empty());
    groups
}

/// Top-down recursive k-means (k = `branching`) until clusters hold at most
/// `branching` tags or `depth_cap` levels are used. Cluster ids are
/// `cluster/<path>` with dotted child indices.
pub fn build_taxonomy(
    tag_embeddings: &BTreeMap<String, Vec<f64>>,
    branching: usize,
    depth_cap: usize,
) -> Result<Taxonomy> {
    if tag_embeddings.is_empty() {
        return Err(Error::InvalidArgument("taxonomy needs at least one tag".into()));
    }
    if branching < 2 || depth_cap == 0 {
        return Err(Error::InvalidArgument(
            "branching must be >= 2 and depth cap >= 1".into(),
        ));
    }
    let dim = tag_embeddings.values().next().map(Vec::len).unwrap_or(0);
    if let Some(v) = tag_embeddings.values().find(|v| v.len() != dim) {
        return Err(Error::DimMismatch {
            expected: dim,
            got: v.len(),
        });
    }
    let tags: Vec<&String> = tag_embeddings.keys().collect();
    if tags.len() == 1 {
        return Ok(Taxonomy {
            root: tags[0].clone(),
            internal: Vec::new(),
            edges: Vec::new(),
        });
    }
    let mut out = Taxonomy {
        root: "cluster/0".to_string(),
        internal: Vec::new(),
        edges: Vec::new(),
    };
    let mut work = vec![("cluster/0".to_string(), (0..tags.len()).collect::<Vec<_>>(), 1usize)];
    while let Some((node, members, depth)) = work.pop() {
        out.internal.push(node.clone());
        let groups = if members.len() <= branching || depth >= depth_cap {
            Vec::new()
        } else {
            let points: Vec<&[f64]> = members.iter().map(|&i| tag_embeddings[tags[i]].as_slice()).collect();
            kmeans(&points, branching)
        };
        if groups.len() < 2 {
            for &i in &members {
                out.edges.push((node.clone(), tags[i].clone()));
            }
            continue;
        }
        let mut pending = Vec::new();
        for (j, group) in groups.iter().enumerate() {
            let ids: Vec<usize> = group.iter().map(|&g| members[g]).collect();
            if ids.len() == 1 {
                out.edges.push((node.clone(), tags[ids[0]].clone()));
            } else {
                let child = format!("{node}.{j}");
                out.edges.push((node.clone(), child.clone()));
                pending.push((child, ids, depth + 1));
            }
        }
        // keep a stable preorder of internal ids
        work.extend(pending.into_iter().rev());
    }
    Ok(out)
}

/// Document statistics over per-record tag lists. Tags are lowercased.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TagCorpusStats {
    pub doc_count: usize,
    pub doc_freq: BTreeMap<String, usize>,
    pub doc_lengths: BTreeMap<String, usize>,
    pub avg_doc_length: f64,
    term_freq: BTreeMap<String, BTreeMap<String, u32>>,
}

impl TagCorpusStats {
    pub fn from_docs<'a, I, T>(docs: I) -> Self
    where
        I: IntoIterator<Item = (&'a String, T)>,
        T: IntoIterator<Item = &'a String>,
    {
        let mut stats = TagCorpusStats::default();
        for (id, tags) in docs {
            let mut tf: BTreeMap<String, u32> = BTreeMap::new();
            let mut len = 0;
            for tag in tags {
                *tf.entry(tag.to_lowercase()).or_default() += 1;
                len += 1;
            }
            for tag in tf.keys() {
                *stats.doc_freq.entry(tag.clone()).or_default() += 1;
            }
            stats.doc_lengths.insert(id.clone(), len);
            stats.term_freq.insert(id.clone(), tf);
        }
        stats.doc_count = stats.doc_lengths.len();
        stats.avg_doc_length = if stats.doc_count == 0 {
            0.0
        } else {
            stats.doc_lengths.values().sum::<usize>() as f64 / stats.doc_count as f64
        };
        stats
    }

    pub fn idf(&self, tag: &str) -> f64 {
        let df = self.doc_freq.get(&tag.to_lowercase()).copied().unwrap_or(0) as f64;
        bm25_idf(self.doc_count as f64, df)
    }

    pub fn tf(&self, tag: &str, record_id: &str) -> u32 {
        self.term_freq
            .get(record_id)
            .and_then(|m| m.get(&tag.to_lowercase()))
            .copied()
            .unwrap_or(0)
    }
}

pub fn bm25_idf(n_docs: f64, df: f64) -> f64 {
    (1.0 + (n_docs - df + 0.5) / (df + 0.5)).ln()
}

/// Score of one term from raw corpus quantities.
pub fn bm25_term(n_docs: f64, df: f64, tf: f64, doc_len: f64, avg_doc_len: f64, k1: f64, b: f64) -> f64 {
    if tf <= 0.0 {
        return 0.0;
    }
    let norm = if avg_doc_len > 0.0 { doc_len / avg_doc_len } else { 1.0 };
    bm25_idf(n_docs, df) * (tf * (k1 + 1.0)) / (tf + k1 * (1.0 - b + b * norm))
}

pub fn bm25(stats: &TagCorpusStats, tag: &str, record_id: &str, k1: f64, b: f64) -> Result<f64> {
    let len = *stats
        .doc_lengths
        .get(record_id)
        .ok_or_else(|| Error::NotFound(record_id.to_string()))?;
    let df = stats.doc_freq.get(&tag.to_lowercase()).copied().unwrap_or(0);
    Ok(bm25_term(
        stats.doc_count as f64,
        df as f64,
        stats.tf(tag, record_id) as f64,
        len as f64,
        stats.avg_doc_length,
        k1,
        b,
    ))
}

/// `count(c) + λ · Σ effective(child)`, evaluated leaves up.
pub fn propagate_counts(graph: &ConceptGraph, decay: f64) -> Result<BTreeMap<String, f64>> {
    if !(decay > 0.0 && decay <= 1.0) {
        return Err(Error::InvalidArgument(format!("decay {decay} outside (0, 1]")));
    }
    let children = graph.children();
    let mut eff: BTreeMap<String, f64> = BTreeMap::new();
    for id in graph.leaves_up_order()? {
        let own = graph.counts.get(id).copied().unwrap_or(0) as f64;
        let below: f64 = children
            .get(id)
            .map(|kids| kids.iter().map(|k| eff[*k]).sum())
            .unwrap_or(0.0);
        eff.insert(id.to_string(), own + decay * below);
    }
    Ok(eff)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WeightConfig {
    pub epsilon: f64,
    pub decay: f64,
    pub default_weight: f64,
}

impl Default for WeightConfig {
    fn default() -> Self {
        WeightConfig {
            epsilon: 1.0,
            decay: 0.5,
            default_weight: 1.0,
        }
    }
}

/// Frozen inputs for per-record rarity weights.
#[derive(Debug, Clone)]
pub struct WeightModel<'a> {
    graph: &'a ConceptGraph,
    stats: &'a TagCorpusStats,
    names: BTreeMap<String, String>,
    effective: BTreeMap<String, f64>,
    cfg: WeightConfig,
}

impl<'a> WeightModel<'a> {
    pub fn new(graph: &'a ConceptGraph, stats: &'a TagCorpusStats, cfg: WeightConfig) -> Result<Self> {
        Ok(WeightModel {
            graph,
            stats,
            names: graph.name_index(),
            effective: propagate_counts(graph, cfg.decay)?,
            cfg,
        })
    }

    pub fn concept_for(&self, tag: &str) -> Option<&str> {
        self.names.get(&tag.to_lowercase()).map(String::as_str)
    }

    /// Mean of `manual_weight · idf / (effective_count + ε)` over distinct
    /// matched tags, or the default weight when nothing matches.
    pub fn weight(&self, tags: &[String]) -> f64 {
        let distinct: BTreeSet<String> = tags.iter().map(|t| t.to_lowercase()).collect();
        let rarities: Vec<f64> = distinct
            .iter()
            .filter_map(|t| {
                let id = self.names.get(t)?;
                let manual = self.graph.concepts[id].manual_weight;
                let eff = self.effective.get(id).copied().unwrap_or(0.0);
                Some(manual * self.stats.idf(t) / (eff + self.cfg.epsilon))
            })
            .collect();
        let w = if rarities.is_empty() {
            self.cfg.default_weight
        } else {
            rarities.iter().sum::<f64>() / rarities.len() as f64
        };
        w.max(f64::MIN_POSITIVE)
    }
}

pub fn sampling_weight(
    tags: &[String],
    graph: &ConceptGraph,
    stats: &TagCorpusStats,
    cfg: WeightConfig,
) -> Result<f64> {
    Ok(WeightModel::new(graph, stats, cfg)?.weight(tags))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleItem {
    pub id: String,
    pub source: String,
    pub weight: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SampleSummary {
    /// Selected ids, highest sampling key first.
    pub ids: Vec<String>,
    pub quotas: BTreeMap<String, usize>,
    pub per_source: BTreeMap<String, usize>,
    /// Quota left unfilled by each underfull stratum.
    pub shortfall: BTreeMap<String, usize>,
    /// Records taken from other strata to cover the shortfall.
    pub refilled: usize,
}

/// `t2i=0.8,i2i=0.2`
pub fn parse_mix(text: &str) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| Error::InvalidArgument(format!("mix entry {part:?} is not source=fraction")))?;
        let v: f64 = v
            .trim()
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("mix fraction {v:?} is not a number")))?;
        out.insert(k.trim().to_string(), v);
    }
    Ok(out)
}

pub fn default_mix() -> BTreeMap<String, f64> {
    BTreeMap::from([("t2i".to_string(), 0.8), ("i2i".to_string(), 0.2)])
}

/// Largest-remainder apportionment of `n` seats; ties go to the smaller key.
pub fn apportion(n: usize, mix: &BTreeMap<String, f64>) -> BTreeMap<String, usize> {
    let total: f64 = mix.values().sum();
    let mut out: BTreeMap<String, usize> = BTreeMap::new();
    let mut rema: Vec<(f64, &String)> = Vec::new();
    let mut given = 0;
    for (k, &f) in mix {
        let exact = n as f64 * f / total;
        let base = exact.floor() as usize;
        out.insert(k.clone(), base);
        given += base;
        rema.push((exact - base as f64, k));
    }
    rema.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
    for (_, k) in rema.into_iter().take(n.saturating_sub(given)) {
        *out.get_mut(k).expect("present") += 1;
    }
    out
}

/// Weighted sampling without replacement (Efraimidis-Spirakis keys
/// `ln(u)/w`) inside each source stratum; stratum sizes follow `mix`.
/// Records whose source is absent from `mix` only serve as refill. An empty
/// mix samples the whole pool as one stratum.
pub fn weighted_sample(
    items: &[SampleItem],
    n: usize,
    seed: u64,
    mix: &BTreeMap<String, f64>,
) -> Result<SampleSummary> {
    if n > items.len() {
        return Err(Error::InvalidArgument(format!(
            "sample size {n} exceeds pool of {}",
            items.len()
        )));
    }
    if let Some(bad) = items.iter().find(|i| !(i.weight > 0.0 && i.weight.is_finite())) {
        return Err(Error::InvalidArgument(format!(
            "weight of {} is {}",
            bad.id, bad.weight
        )));
    }
    if !mix.is_empty() {
        if mix.values().any(|&f| !(f >= 0.0 && f.is_finite())) {
            return Err(Error::InvalidArgument("mix fractions must be non-negative".into()));
        }
        let total: f64 = mix.values().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidArgument(format!("mix fractions sum to {total}, not 1")));
        }
    }
    let mut seen = BTreeSet::new();
    for item in items {
        if !seen.insert(&item.id) {
            return Err(Error::DuplicateId(item.id.clone()));
        }
    }

    // keys drawn in id order so input order does not matter
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&a, &b| items[a].id.cmp(&items[b].id));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keyed: Vec<(f64, usize)> = order
        .into_iter()
        .map(|i| {
            let u: f64 = 1.0 - rng.random::<f64>();
            (u.ln() / items[i].weight, i)
        })
        .collect();
    keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| items[a.1].id.cmp(&items[b.1].id)));

    let quotas = if mix.is_empty() {
        BTreeMap::from([(String::new(), n)])
    } else {
        apportion(n, mix)
    };
    let stratum = |i: usize| -> &str {
        if mix.is_empty() {
            ""
        } else {
            &items[i].source
        }
    };

    let mut taken = vec![false; items.len()];
    let mut filled: BTreeMap<String, usize> = quotas.keys().map(|k| (k.clone(), 0)).collect();
    for &(_, i) in &keyed {
        if let Some(q) = quotas.get(stratum(i)) {
            let f = filled.get_mut(stratum(i)).expect("same keys");
            if *f < *q {
                *f += 1;
                taken[i] = true;
            }
        }
    }
    let shortfall: BTreeMap<String, usize> = quotas
        .iter()
        .filter(|(k, q)| filled[*k] < **q)
        .map(|(k, q)| (k.clone(), q - filled[k]))
        .collect();
    let missing: usize = shortfall.values().sum();
    let mut refilled = 0;
    for &(_, i) in &keyed {
        if refilled == missing {
            break;
        }
        if !taken[i] {
            taken[i] = true;
            refilled += 1;
        }
    }

    let mut summary = SampleSummary {
        quotas: if mix.is_empty() { BTreeMap::new() } else { quotas },
        shortfall,
        refilled,
        ..Default::default()
    };
    for &(_, i) in &keyed {
        if taken[i] {
            summary.ids.push(items[i].id.clone());
            *summary.per_source.entry(items[i].source.clone()).or_default() += 1;
        }
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn graph(ids: &[&str], links: &[(&str, &str)], tax: &[(&str, &str)]) -> ConceptGraph {
        let mut g = ConceptGraph::new();
        for id in ids {
            g.add_concept(id, id, 1.0);
        }
        g.hyperlinks = links.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect();
        g.taxonomy = tax.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect();
        g
    }

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn pagerank_symmetric_cases() {
        let g = graph(&["a", "b"], &[("a", "b"), ("b", "a")], &[]);
        let p = pagerank(&g, 0.85, 1e-12, 1000).unwrap();
        assert!((p["a"] - 0.5).abs() < 1e-12 && (p["b"] - 0.5).abs() < 1e-12);
        let g = graph(&["a", "b", "c"], &[("a", "b"), ("b", "c"), ("c", "a")], &[]);
        let p = pagerank(&g, 0.85, 1e-12, 1000).unwrap();
        for v in p.values() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn pagerank_reports_last_iterate() {
        let g = graph(&["a", "b", "c"], &[("a", "b")], &[]);
        match pagerank(&g, 0.85, 1e-12, 1) {
            Err(Error::NoConvergence { iterations, last, .. }) => {
                assert_eq!(iterations, 1);
                assert_eq!(last.len(), 3);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn pruning_quantile_ties_and_rerooting() {
        let mut g = graph(&["a", "b", "c", "d"], &[], &[("a", "b")]);
        g.pagerank = Some(BTreeMap::from([
            ("a".into(), 0.1),
            ("b".into(), 0.2),
            ("c".into(), 0.3),
            ("d".into(), 0.4),
        ]));
        let p = prune_by_centrality(&g, 0.25).unwrap();
        assert_eq!(p.concepts.keys().collect::<Vec<_>>(), ["b", "c", "d"]);
        assert!(p.taxonomy.is_empty());
        assert!(p.roots().contains(&"b"));

        let mut flat = graph(&["a", "b", "c"], &[], &[]);
        flat.pagerank = Some(flat.concepts.keys().map(|k| (k.clone(), 1.0 / 3.0)).collect());
        assert_eq!(prune_by_centrality(&flat, 0.5).unwrap().concepts.len(), 3);
    }

    #[test]
    fn quantile_type7() {
        assert_eq!(quantile(&[4.0, 1.0, 3.0, 2.0], 0.5), 2.5);
        assert_eq!(quantile(&[1.0, 2.0, 3.0, 4.0], 0.25), 1.75);
    }

    #[test]
    fn taxonomy_shapes() {
        let one = BTreeMap::from([("cat".to_string(), vec![1.0, 0.0])]);
        let t = build_taxonomy(&one, 2, 4).unwrap();
        assert_eq!(t.root, "cat");
        assert!(t.edges.is_empty());

        let few: BTreeMap<String, Vec<f64>> = (0..3).map(|i| (format!("t{i}"), vec![i as f64])).collect();
        let t = build_taxonomy(&few, 5, 4).unwrap();
        assert_eq!(t.internal, ["cluster/0"]);
        assert_eq!(t.edges.len(), 3);
        assert!(t.edges.iter().all(|(p, _)| p == "cluster/0"));
    }

    #[test]
    fn taxonomy_separates_blobs() {
        let mut emb = BTreeMap::new();
        for i in 0..6 {
            let j = i as f64 * 0.01;
            emb.insert(format!("a{i}"), vec![0.0 + j, 0.0 - j]);
            emb.insert(format!("b{i}"), vec![100.0 - j, 100.0 + j]);
        }
        let t = build_taxonomy(&emb, 2, 8).unwrap();
        let mut g = ConceptGraph::new();
        t.attach(&mut g);
        g.validate().unwrap();
        let kids = g.children();
        let top = &kids["cluster/0"];
        assert_eq!(top.len(), 2);
        let leaves_under = |root: &str| {
            let mut out = BTreeSet::new();
            let mut stack = vec![root.to_string()];
            while let Some(n) = stack.pop() {
                match kids.get(n.as_str()) {
                    Some(ch) => stack.extend(ch.iter().map(|c| c.to_string())),
                    None => {
                        out.insert(n.chars().next().unwrap());
                    }
                }
            }
            out
        };
        let mut sides: Vec<BTreeSet<char>> = top.iter().map(|c| leaves_under(c)).collect();
        sides.sort();
        assert_eq!(sides, vec![BTreeSet::from(['a']), BTreeSet::from(['b'])]);
    }

    #[test]
    fn bm25_worked_value_and_absent_tag() {
        let ids = s(&["r1", "r2"]);
        let tags = [s(&["cat"]), s(&["dog"])];
        let stats = TagCorpusStats::from_docs(ids.iter().zip(tags.iter()));
        let v = bm25(&stats, "cat", "r1", BM25_K1, BM25_B).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-12);
        assert_eq!(format!("{v:.4}"), "0.6931");
        assert_eq!(bm25(&stats, "cat", "r2", BM25_K1, BM25_B).unwrap(), 0.0);
        assert!(matches!(
            bm25(&stats, "cat", "nope", 1.2, 0.75),
            Err(Error::NotFound(_))
        ));
    }

    #[test]
    fn bm25_monotone_in_tf() {
        let mut prev = 0.0;
        for tf in [1.0, 2.0, 4.0, 8.0, 16.0] {
            let v = bm25_term(10.0, 3.0, tf, 5.0, 4.0, BM25_K1, BM25_B);
            assert!(v > prev);
            prev = v;
        }
    }

    #[test]
    fn propagation_examples() {
        let mut g = graph(&["p", "x", "y"], &[], &[("p", "x"), ("p", "y")]);
        g.counts = BTreeMap::from([("p".into(), 0), ("x".into(), 10), ("y".into(), 30)]);
        let e = propagate_counts(&g, 0.5).unwrap();
        assert_eq!(e["x"], 10.0);
        assert_eq!(e["p"], 20.0);

        let mut chain = graph(&["root", "mid", "leaf"], &[], &[("root", "mid"), ("mid", "leaf")]);
        chain.counts = BTreeMap::from([("leaf".into(), 8)]);
        let e = propagate_counts(&chain, 0.5).unwrap();
        assert_eq!((e["root"], e["mid"], e["leaf"]), (2.0, 4.0, 8.0));
    }

    #[test]
    fn cycles_rejected() {
        let g = graph(&["a", "b"], &[], &[("a", "b"), ("b", "a")]);
        assert!(matches!(propagate_counts(&g, 0.5), Err(Error::Cycle(_))));
        assert!(g.validate().is_err());
    }

    #[test]
    fn weights_prefer_rare_and_scale_linearly() {
        let mut g = graph(&["common", "rare"], &[], &[]);
        g.counts = BTreeMap::from([("common".into(), 90), ("rare".into(), 10)]);
        let ids = s(&["r1", "r2"]);
        let tags = [s(&["common"]), s(&["rare"])];
        let stats = TagCorpusStats::from_docs(ids.iter().zip(tags.iter()));
        let cfg = WeightConfig::default();
        let wc = sampling_weight(&tags[0], &g, &stats, cfg).unwrap();
        let wr = sampling_weight(&tags[1], &g, &stats, cfg).unwrap();
        assert!(wr > wc);
        assert_eq!(
            sampling_weight(&s(&["unknown"]), &g, &stats, cfg).unwrap(),
            cfg.default_weight
        );
        g.concepts.get_mut("rare").unwrap().manual_weight = 2.0;
        assert_eq!(sampling_weight(&tags[1], &g, &stats, cfg).unwrap(), 2.0 * wr);
    }

    #[test]
    fn manual_weights_case_insensitive() {
        let mut g = ConceptGraph::new();
        g.add_concept("c1", "Cat", 1.0);
        let un = g
            .apply_manual_weights(&BTreeMap::from([("cat".into(), 3.0), ("owl".into(), 2.0)]))
            .unwrap();
        assert_eq!(g.concepts["c1"].manual_weight, 3.0);
        assert_eq!(un, ["owl"]);
    }

    fn items(t2i: usize, i2i: usize) -> Vec<SampleItem> {
        (0..t2i)
            .map(|i| ("t2i", i))
            .chain((0..i2i).map(|i| ("i2i", i)))
            .map(|(src, i)| SampleItem {
                id: format!("{src}-{i:03}"),
                source: src.into(),
                weight: 1.0,
            })
            .collect()
    }

    #[test]
    fn mix_four_to_one() {
        let out = weighted_sample(&items(20, 20), 10, 7, &default_mix()).unwrap();
        assert_eq!(out.per_source["t2i"], 8);
        assert_eq!(out.per_source["i2i"], 2);
        assert!(out.shortfall.is_empty());
    }

    #[test]
    fn full_draw_is_the_pool() {
        let pool = items(5, 5);
        let out = weighted_sample(&pool, 10, 1, &BTreeMap::new()).unwrap();
        let got: BTreeSet<_> = out.ids.iter().collect();
        assert_eq!(got, pool.iter().map(|i| &i.id).collect());
    }

    #[test]
    fn underfull_stratum_is_refilled() {
        let out = weighted_sample(&items(20, 1), 10, 3, &default_mix()).unwrap();
        assert_eq!(out.ids.len(), 10);
        assert_eq!(out.shortfall["i2i"], 1);
        assert_eq!(out.refilled, 1);
        assert_eq!(out.per_source["t2i"], 9);
    }

    #[test]
    fn inclusion_probability_follows_weight() {
        let pool = vec![
            SampleItem {
                id: "a".into(),
                source: "x".into(),
                weight: 1.0,
            },
            SampleItem {
                id: "b".into(),
                source: "x".into(),
                weight: 3.0,
            },
        ];
        let hits = (0..10_000)
            .filter(|&seed| weighted_sample(&pool, 1, seed, &BTreeMap::new()).unwrap().ids[0] == "b")
            .count();
        let rate = hits as f64 / 10_000.0;
        assert!((rate - 0.75).abs() < 0.02, "{rate}");
    }

    #[test]
    fn apportion_largest_remainder() {
        let q = apportion(
            7,
            &BTreeMap::from([("a".into(), 0.5), ("b".into(), 0.25), ("c".into(), 0.25)]),
        );
        assert_eq!(q.values().sum::<usize>(), 7);
        // exact shares 3.5, 1.75, 1.75
        assert_eq!((q["a"], q["b"], q["c"]), (3, 2, 2));
    }

    #[test]
    fn concept_file_round_trip() {
        let text = r#"{"concepts":[{"id":"c1","name":"cat","weight":2.0},{"id":"c2","name":"animal"}],
            "hyperlinks":[["c1","c2"]],"taxonomy":[["c2","c1"]]}"#;
        let g = ConceptGraph::from_json(text).unwrap();
        assert_eq!(g.concepts["c2"].manual_weight, 1.0);
        assert_eq!(ConceptGraph::from_json(&g.to_json()).unwrap(), g);
        let bad = r#"{"concepts":[{"id":"c1","name":"cat"}],"taxonomy":[["c1","zz"]]}"#;
        assert!(matches!(ConceptGraph::from_json(bad), Err(Error::NotFound(_))));
    }
}
