//! Stage orchestration: ingest, profile, dedup, graph, sample, pairs, plan.
//!
//! Each stage records a marker under `stages/` holding the config section it
//! ran with and its summary. A stage whose marker matches the current config
//! is skipped unless forced. Summaries are also written to `logs/`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::batch_planner::{padding_waste, plan_batches, shape_for_record, BatchPlan, TokenConfig};
use crate::curation_service::{Proposal, ReviewConfig, ReviewQueue, StubLabeler};
use crate::error::{Error, Result};
use crate::knowledge_graph::{
    bm25, build_taxonomy, default_mix, pagerank, prune_by_centrality, weighted_sample, ConceptGraph, SampleItem,
    SampleSummary, TagCorpusStats, WeightConfig, WeightModel, BM25_B, BM25_K1, DEFAULT_DAMPING, DEFAULT_MAX_ITER,
    DEFAULT_TOL,
};
use crate::pair_builder::{
    pairs_from_records, render_text_pair, write_pairs_jsonl, PairConfig, RenderedPair, TextRenderSpec,
};
use crate::profiler::{
    apply_filters, profile, Decision, FilterRule, FilterRuleSet, ProfileConfig, ProfileReport, StubScorer,
};
use crate::record_store::{default_data_dir, DataRecord, Modality, RecordPatch, RecordStore, Status};
use crate::vector_engine::{
    build_index, build_knn_graph, deduplicate, detect_communities_with, modularity, DedupStrategy, LeidenConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Ingest,
    Profile,
    Dedup,
    Graph,
    Sample,
    Pairs,
    Plan,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Ingest,
        Stage::Profile,
        Stage::Dedup,
        Stage::Graph,
        Stage::Sample,
        Stage::Pairs,
        Stage::Plan,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Profile => "profile",
            Stage::Dedup => "dedup",
            Stage::Graph => "graph",
            Stage::Sample => "sample",
            Stage::Pairs => "pairs",
            Stage::Plan => "plan",
        }
    }

    /// Stages whose outputs this one reads.
    pub fn requires(self) -> &'static [Stage] {
        match self {
            Stage::Ingest => &[],
            Stage::Profile => &[Stage::Ingest],
            Stage::Dedup => &[Stage::Profile],
            Stage::Graph => &[Stage::Dedup],
            Stage::Sample => &[Stage::Graph],
            Stage::Pairs => &[Stage::Dedup],
            Stage::Plan => &[Stage::Sample],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IngestConfig {
    pub input: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProfileStageConfig {
    pub border_width: u32,
    pub bpp_quality: u8,
    /// Inline rules; when both are absent the shipped defaults apply.
    pub rules: Option<Vec<FilterRule>>,
    pub rules_file: Option<PathBuf>,
}

impl Default for ProfileStageConfig {
    fn default() -> Self {
        let p = ProfileConfig::default();
        ProfileStageConfig {
            border_width: p.border_width,
            bpp_quality: p.bpp_quality,
            rules: None,
            rules_file: None,
        }
    }
}

impl ProfileStageConfig {
    pub fn rule_set(&self) -> Result<FilterRuleSet> {
        match (&self.rules, &self.rules_file) {
            (Some(_), Some(_)) => Err(Error::Config {
                path: "profile.rules".into(),
                message: "give either rules or rules_file, not both".into(),
            }),
            (Some(rules), None) => FilterRuleSet::new(rules.clone()),
            (None, Some(path)) => FilterRuleSet::load(path),
            (None, None) => Ok(FilterRuleSet::defaults()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DedupConfig {
    pub k: usize,
    pub gamma: f64,
    /// Similarity floor of the proximity graph.
    pub tau_edge: f64,
    /// Similarity floor of the duplicate graph.
    pub threshold: f64,
    pub seed: u64,
    pub strategy: DedupStrategy,
}

impl Default for DedupConfig {
    fn default() -> Self {
        DedupConfig {
            k: 100,
            gamma: 1.0,
            tau_edge: 0.0,
            threshold: 0.9,
            seed: 0,
            strategy: DedupStrategy::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GraphConfig {
    pub concepts: Option<PathBuf>,
    /// JSON map tag -> vector; when set a taxonomy is built and attached.
    pub tag_embeddings: Option<PathBuf>,
    pub branching: usize,
    pub depth_cap: usize,
    pub damping: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub prune_quantile: Option<f64>,
    /// Unknown record tags become root concepts with count 0.
    pub expand_new_tags: bool,
    pub decay: f64,
    pub epsilon: f64,
    pub default_weight: f64,
    pub k1: f64,
    pub b: f64,
    /// Concept name or id -> manual weight.
    pub manual_weights: BTreeMap<String, f64>,
}

impl Default for GraphConfig {
    fn default() -> Self {
        let w = WeightConfig::default();
        GraphConfig {
            concepts: None,
            tag_embeddings: None,
            branching: 4,
            depth_cap: 4,
            damping: DEFAULT_DAMPING,
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
            prune_quantile: None,
            expand_new_tags: false,
            decay: w.decay,
            epsilon: w.epsilon,
            default_weight: w.default_weight,
            k1: BM25_K1,
            b: BM25_B,
            manual_weights: BTreeMap::new(),
        }
    }
}

impl GraphConfig {
    pub fn weight_config(&self) -> WeightConfig {
        WeightConfig {
            epsilon: self.epsilon,
            decay: self.decay,
            default_weight: self.default_weight,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    /// Sample size; the whole pool when unset.
    pub n: Option<usize>,
    pub seed: u64,
    pub mix: BTreeMap<String, f64>,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            n: None,
            seed: 0,
            mix: default_mix(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlanConfig {
    pub budget: u64,
    pub rho: f64,
    pub seed: u64,
    /// Defaults to `plan.json` in the data dir.
    pub out: Option<PathBuf>,
    pub tokens: TokenConfig,
}

impl Default for PlanConfig {
    fn default() -> Self {
        PlanConfig {
            budget: 65536,
            rho: 1.25,
            seed: 0,
            out: None,
            tokens: TokenConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReviewStageConfig {
    pub lease_secs: u64,
    pub auto_approve: bool,
    pub thresholds: BTreeMap<String, f64>,
    pub alpha: f64,
    /// Candidates proposed when the service starts.
    pub propose: usize,
    pub seed: u64,
}

impl Default for ReviewStageConfig {
    fn default() -> Self {
        let r = ReviewConfig::default();
        ReviewStageConfig {
            lease_secs: r.lease_secs,
            auto_approve: r.auto_approve,
            thresholds: r.thresholds,
            alpha: r.alpha,
            propose: 0,
            seed: 0,
        }
    }
}

impl ReviewStageConfig {
    pub fn review_config(&self) -> ReviewConfig {
        ReviewConfig {
            lease_secs: self.lease_secs,
            auto_approve: self.auto_approve,
            thresholds: self.thresholds.clone(),
            alpha: self.alpha,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub data_dir: Option<PathBuf>,
    /// Worker cap; 0 uses every available core.
    pub jobs: usize,
    pub ingest: IngestConfig,
    pub profile: ProfileStageConfig,
    pub dedup: DedupConfig,
    pub graph: GraphConfig,
    pub sample: SampleConfig,
    pub pairs: PairConfig,
    pub plan: PlanConfig,
    pub review: ReviewStageConfig,
}

fn config_err(path: &str, message: impl Into<String>) -> Error {
    Error::Config {
        path: path.into(),
        message: message.into(),
    }
}

impl PipelineConfig {
    /// Parses TOML. Relative paths resolve against `base`.
    pub fn from_toml(text: &str, base: &Path) -> Result<Self> {
        let de = toml::Deserializer::new(text);
        let mut cfg: PipelineConfig = serde_path_to_error::deserialize(de).map_err(|e| Error::Config {
            path: e.path().to_string(),
            message: e.inner().message().to_string(),
        })?;
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| config_err("<file>", format!("{}: {e}", path.display())))?;
        Self::from_toml(&text, path.parent().unwrap_or(Path::new(".")))
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(path) = p {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        };
        fix(&mut self.data_dir);
        fix(&mut self.ingest.input);
        fix(&mut self.profile.rules_file);
        fix(&mut self.graph.concepts);
        fix(&mut self.graph.tag_embeddings);
        fix(&mut self.plan.out);
    }

    pub fn validate(&self) -> Result<()> {
        if self.dedup.k == 0 {
            return Err(config_err("dedup.k", "must be at least 1"));
        }
        if !(self.dedup.gamma > 0.0) {
            return Err(config_err("dedup.gamma", "must be positive"));
        }
        for (key, v) in [
            ("dedup.tau_edge", self.dedup.tau_edge),
            ("dedup.threshold", self.dedup.threshold),
        ] {
            if !(-1.0..=1.0).contains(&v) {
                return Err(config_err(key, "must lie in [-1, 1]"));
            }
        }
        if !(self.graph.damping > 0.0 && self.graph.damping < 1.0) {
            return Err(config_err("graph.damping", "must lie in (0, 1)"));
        }
        if !(self.graph.decay > 0.0 && self.graph.decay <= 1.0) {
            return Err(config_err("graph.decay", "must lie in (0, 1]"));
        }
        if !(self.graph.epsilon > 0.0) {
            return Err(config_err("graph.epsilon", "must be positive"));
        }
        if let Some(q) = self.graph.prune_quantile {
            if !(q > 0.0 && q < 1.0) {
                return Err(config_err("graph.prune_quantile", "must lie in (0, 1)"));
            }
        }
        if self.graph.branching < 2 {
            return Err(config_err("graph.branching", "must be at least 2"));
        }
        if !self.sample.mix.is_empty() {
            let total: f64 = self.sample.mix.values().sum();
            if self.sample.mix.values().any(|f| !(*f >= 0.0)) || (total - 1.0).abs() > 1e-6 {
                return Err(config_err(
                    "sample.mix",
                    format!("fractions must be >= 0 and sum to 1 (got {total})"),
                ));
            }
        }
        if !(self.plan.rho >= 1.0) {
            return Err(config_err("plan.rho", "must be at least 1"));
        }
        if self.plan.budget == 0 {
            return Err(config_err("plan.budget", "must be positive"));
        }
        if !(self.pairs.frame_tau >= -1.0 && self.pairs.frame_tau <= 1.0) {
            return Err(config_err("pairs.frame_tau", "must lie in [-1, 1]"));
        }
        if !(self.review.alpha >= 0.0) {
            return Err(config_err("review.alpha", "must be non-negative"));
        }
        self.profile.rule_set().map(|_| ())
    }

    pub fn data_dir(&self) -> PathBuf {
        self.data_dir.clone().unwrap_or_else(default_data_dir)
    }

    pub fn workers(&self) -> usize {
        match self.jobs {
            0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
            n => n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: String,
    /// True when a matching marker made the run a no-op.
    pub skipped: bool,
    pub summary: Value,
}

#[derive(Serialize, Deserialize)]
struct Marker {
    config: Value,
    summary: Value,
}

/// Per-record output of the graph stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordWeight {
    pub weight: f64,
    /// BM25 salience of each distinct tag within the record.
    pub salience: BTreeMap<String, f64>,
}

pub struct Pipeline {
    pub cfg: PipelineConfig,
    pub data_dir: PathBuf,
    pub force: bool,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Order-preserving map over `items` on up to `workers` scoped threads.
fn parallel_map<T: Sync, R: Send>(items: &[T], workers: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    if items.is_empty() {
        return Vec::new();
    }
    let chunk = items.len().div_ceil(workers.max(1));
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(|| c.iter().map(&f).collect::<Vec<R>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}

const DUPLICATE: &str = "duplicate";

fn in_pool(r: &DataRecord) -> bool {
    matches!(r.status, Status::Kept | Status::Sampled)
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig, force: bool) -> Self {
        Pipeline {
            data_dir: cfg.data_dir(),
            cfg,
            force,
        }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.data_dir.join(rel)
    }

    fn marker_path(&self, stage: Stage) -> PathBuf {
        self.path(&format!("stages/{}.json", stage.name()))
    }

    pub fn is_done(&self, stage: Stage) -> bool {
        self.marker_path(stage).exists()
    }

    fn stage_config(&self, stage: Stage) -> Value {
        let c = &self.cfg;
        let v = match stage {
            Stage::Ingest => serde_json::to_value(&c.ingest),
            Stage::Profile => serde_json::to_value(&c.profile),
            Stage::Dedup => serde_json::to_value(&c.dedup),
            Stage::Graph => serde_json::to_value(&c.graph),
            Stage::Sample => serde_json::to_value(&c.sample),
            Stage::Pairs => serde_json::to_value(c.pairs),
            Stage::Plan => serde_json::to_value(&c.plan),
        };
        v.expect("config serializes")
    }

    pub fn open_store(&self) -> Result<RecordStore> {
        RecordStore::open(&self.data_dir)
    }

    pub fn run(&self, stage: Stage) -> Result<StageReport> {
        for &req in stage.requires() {
            if !self.is_done(req) {
                return Err(Error::Prerequisite(format!(
                    "`{}` needs `{}` to have run in {}",
                    stage.name(),
                    req.name(),
                    self.data_dir.display()
                )));
            }
        }
        let config = self.stage_config(stage);
        let marker_path = self.marker_path(stage);
        if !self.force && marker_path.exists() {
            let marker: Marker = read_json(&marker_path)?;
            if marker.config == config {
                return Ok(StageReport {
                    stage: stage.name().into(),
                    skipped: true,
                    summary: marker.summary,
                });
            }
        }
        let summary = match stage {
            Stage::Ingest => self.ingest()?,
            Stage::Profile => self.profile()?,
            Stage::Dedup => self.dedup()?,
            Stage::Graph => self.graph()?,
            Stage::Sample => self.sample()?,
            Stage::Pairs => self.pairs()?,
            Stage::Plan => self.plan()?,
        };
        let finished_at = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        write_json(
            &self.path(&format!("logs/{}.json", stage.name())),
            &json!({"stage": stage.name(), "finished_at": finished_at, "summary": summary}),
        )?;
        write_json(
            &marker_path,
            &Marker {
                config,
                summary: summary.clone(),
            },
        )?;
        Ok(StageReport {
            stage: stage.name().into(),
            skipped: false,
            summary,
        })
    }

    fn ingest(&self) -> Result<Value> {
        let input = self
            .cfg
            .ingest
            .input
            .as_ref()
            .ok_or_else(|| config_err("ingest.input", "no input file given"))?;
        if !input.exists() {
            return Err(Error::Prerequisite(format!(
                "ingest input {} does not exist",
                input.display()
            )));
        }
        let mut store = self.open_store()?;
        let summary = store.ingest_jsonl(input)?;
        store.compact()?;
        Ok(json!({"added": summary.added, "rejected": summary.rejected,
                  "reject_reasons": summary.reject_reasons, "records": store.len()}))
    }

    fn profile(&self) -> Result<Value> {
        let rules = self.cfg.profile.rule_set()?;
        let pcfg = ProfileConfig {
            border_width: self.cfg.profile.border_width,
            bpp_quality: self.cfg.profile.bpp_quality,
        };
        let scorers = StubScorer::standard_set();
        let mut store = self.open_store()?;
        let raw: Vec<DataRecord> = store.records().filter(|r| r.status == Status::Raw).cloned().collect();
        let reports: Vec<Result<ProfileReport>> = parallel_map(&raw, self.cfg.workers(), |r| {
            let media = store.read_media(&r.id)?;
            profile(r, &media, &scorers, &pcfg)
        });
        let mut dropped: BTreeMap<String, usize> = BTreeMap::new();
        let mut flagged: BTreeMap<String, usize> = BTreeMap::new();
        let mut profiled = 0;
        for (record, report) in raw.iter().zip(reports) {
            let mut report = match report {
                Ok(r) => r,
                Err(Error::Decode(_)) | Err(Error::TooSmall { .. }) => {
                    store.update_record(&record.id, RecordPatch::status(Status::Dropped("decode".into())))?;
                    *dropped.entry("decode".into()).or_default() += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            let outcome = apply_filters(&report, &rules);
            for f in &outcome.flags {
                *flagged.entry(f.clone()).or_default() += 1;
            }
            report.flags = outcome.flags;
            store.update_record(
                &record.id,
                RecordPatch {
                    status: Some(Status::Profiled),
                    profile: Some(report),
                    ..Default::default()
                },
            )?;
            profiled += 1;
            if let Decision::Drop(reason) = outcome.decision {
                store.update_record(&record.id, RecordPatch::status(Status::Dropped(reason.clone())))?;
                *dropped.entry(reason).or_default() += 1;
            }
        }
        store.compact()?;
        Ok(json!({"profiled": profiled, "dropped": dropped, "flagged": flagged}))
    }

    /// Proximity graph and communities over profiled images, then one
    /// representative per duplicate community. Pair-group members are
    /// near-duplicates by construction and bypass deduplication.
    fn dedup(&self) -> Result<Value> {
        let c = &self.cfg.dedup;
        let mut store = self.open_store()?;
        // Records decided by an earlier run stay in the computation so a
        // forced re-run reproduces the same graph; only undecided ones move.
        let candidates: Vec<DataRecord> = store
            .records()
            .filter(|r| match &r.status {
                Status::Profiled | Status::Kept | Status::Sampled => true,
                Status::Dropped(reason) => reason == DUPLICATE,
                Status::Raw => false,
            })
            .cloned()
            .collect();
        let (paired, rest): (Vec<&DataRecord>, Vec<&DataRecord>) =
            candidates.iter().partition(|r| r.pair_role.is_some());
        let (indexed, no_embedding): (Vec<&DataRecord>, Vec<&DataRecord>) =
            rest.into_iter().partition(|r| r.embedding(Modality::Image).is_some());

        let index = build_index(indexed.iter().copied(), Modality::Image)?;
        let leiden = LeidenConfig {
            resolution: c.gamma,
            seed: c.seed,
            ..Default::default()
        };
        let graph = build_knn_graph(&index, c.k, c.tau_edge)?;
        let communities = detect_communities_with(&graph, &leiden);
        let q = modularity(&graph, &communities, c.gamma);
        let dir = self.path("index");
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let edges_path = dir.join("knn_graph.edges");
        let mut out = Vec::new();
        graph.write_edge_list(&mut out).map_err(|e| Error::io(&edges_path, e))?;
        fs::write(&edges_path, out).map_err(|e| Error::io(&edges_path, e))?;
        write_json(&dir.join("communities.json"), &communities.to_json_map(&graph))?;

        let dup_graph = build_knn_graph(&index, c.k, c.threshold)?;
        let dup_parts = detect_communities_with(&dup_graph, &leiden);
        let by_id: BTreeMap<String, DataRecord> = indexed.iter().map(|r| (r.id.clone(), (*r).clone())).collect();
        let result = deduplicate(&dup_graph, &dup_parts, &by_id, &c.strategy);
        write_json(&self.path("dedup.json"), &result)?;

        let keep = paired
            .iter()
            .chain(&no_embedding)
            .map(|r| r.id.as_str())
            .chain(result.representatives.iter().map(String::as_str));
        let decisions = keep.map(|id| (id, Status::Kept)).chain(
            result
                .dropped
                .keys()
                .map(|id| (id.as_str(), Status::Dropped(DUPLICATE.into()))),
        );
        let mut conflicts = 0;
        for (id, status) in decisions {
            match store.get_record(id)?.status {
                Status::Profiled => {
                    store.update_record(id, RecordPatch::status(status))?;
                }
                Status::Sampled if status == Status::Kept => {}
                current if current == status => {}
                _ => conflicts += 1,
            }
        }
        if conflicts > 0 {
            log::warn!("{conflicts} records were decided differently by an earlier dedup run and keep that status");
        }
        store.compact()?;
        Ok(json!({
            "k": c.k, "gamma": c.gamma, "tau_edge": c.tau_edge, "threshold": c.threshold,
            "nodes": graph.node_count(), "edges": graph.edges.len(),
            "communities": communities.count, "modularity": q,
            "community_sizes": communities.size_histogram(),
            "representatives": result.representatives.len(), "duplicates": result.dropped.len(),
            "pair_members": paired.len(), "no_embedding": no_embedding.len(), "conflicts": conflicts,
        }))
    }

    fn graph(&self) -> Result<Value> {
        let c = &self.cfg.graph;
        let path = c
            .concepts
            .as_ref()
            .ok_or_else(|| config_err("graph.concepts", "no concept file given"))?;
        if !path.exists() {
            return Err(Error::Prerequisite(format!(
                "concept file {} does not exist",
                path.display()
            )));
        }
        let mut g = ConceptGraph::load(path)?;
        let store = self.open_store()?;
        let pool: Vec<&DataRecord> = store.records().filter(|r| in_pool(r)).collect();

        let mut added = Vec::new();
        if c.expand_new_tags {
            let known: BTreeSet<String> = g.name_index().into_keys().collect();
            let fresh: BTreeSet<String> = pool
                .iter()
                .flat_map(|r| r.tags.iter().map(|t| t.to_lowercase()))
                .filter(|t| !known.contains(t))
                .collect();
            for t in fresh {
                if g.add_concept(&t, &t, 1.0) {
                    added.push(t);
                }
            }
        }
        let mut taxonomy_nodes = 0;
        if let Some(emb_path) = &c.tag_embeddings {
            let embeddings: BTreeMap<String, Vec<f64>> = read_json(emb_path)?;
            let tax = build_taxonomy(&embeddings, c.branching, c.depth_cap)?;
            taxonomy_nodes = tax.internal.len();
            tax.attach(&mut g);
            g.validate()?;
        }
        let unmatched = g.apply_manual_weights(&c.manual_weights)?;
        g.count_tags(pool.iter().map(|r| &r.tags));
        g.pagerank = Some(pagerank(&g, c.damping, c.tol, c.max_iter)?);
        let before = g.concepts.len();
        if let Some(q) = c.prune_quantile {
            g = prune_by_centrality(&g, q)?;
        }
        let pruned = before - g.concepts.len();
        let stats = TagCorpusStats::from_docs(pool.iter().map(|r| (&r.id, &r.tags)));
        let model = WeightModel::new(&g, &stats, c.weight_config())?;
        let mut weights: BTreeMap<String, RecordWeight> = BTreeMap::new();
        let mut matched = 0;
        for r in &pool {
            if r.tags.iter().any(|t| model.concept_for(t).is_some()) {
                matched += 1;
            }
            let mut salience = BTreeMap::new();
            for t in &r.tags {
                let t = t.to_lowercase();
                let s = bm25(&stats, &t, &r.id, c.k1, c.b)?;
                salience.insert(t, s);
            }
            weights.insert(
                r.id.clone(),
                RecordWeight {
                    weight: model.weight(&r.tags),
                    salience,
                },
            );
        }
        let dir = self.path("graph");
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        g.save(dir.join("concepts.json"))?;
        write_json(&dir.join("weights.json"), &weights)?;
        Ok(json!({
            "concepts": g.concepts.len(), "hyperlinks": g.hyperlinks.len(),
            "taxonomy_edges": g.taxonomy.len(), "taxonomy_nodes": taxonomy_nodes,
            "pruned": pruned, "added_concepts": added, "unmatched_manual_weights": unmatched,
            "records": pool.len(), "matched_records": matched,
        }))
    }

    fn load_weights(&self) -> Result<BTreeMap<String, RecordWeight>> {
        read_json(&self.path("graph/weights.json"))
    }

    fn sample(&self) -> Result<Value> {
        let c = &self.cfg.sample;
        let weights = self.load_weights()?;
        let mut store = self.open_store()?;
        let items: Vec<SampleItem> = store
            .records()
            .filter(|r| in_pool(r))
            .map(|r| SampleItem {
                id: r.id.clone(),
                source: r.source.clone(),
                weight: weights.get(&r.id).map_or(self.cfg.graph.default_weight, |w| w.weight),
            })
            .collect();
        let n = c.n.unwrap_or(items.len());
        let summary = weighted_sample(&items, n, c.seed, &c.mix)?;
        for id in &summary.ids {
            if store.get_record(id)?.status == Status::Kept {
                store.update_record(id, RecordPatch::status(Status::Sampled))?;
            }
        }
        store.compact()?;
        write_json(&self.path("sample.json"), &summary)?;
        let mut chosen: Vec<&String> = summary.ids.iter().collect();
        chosen.sort();
        let curated = self.path("curated.jsonl");
        let mut out = Vec::new();
        for id in chosen {
            serde_json::to_writer(&mut out, &store.get_record(id)?)?;
            out.push(b'\n');
        }
        fs::write(&curated, out).map_err(|e| Error::io(&curated, e))?;
        Ok(
            json!({"n": n, "seed": c.seed, "pool": items.len(), "per_source": summary.per_source,
                  "quotas": summary.quotas, "shortfall": summary.shortfall, "refilled": summary.refilled}),
        )
    }

    fn pairs(&self) -> Result<Value> {
        let store = self.open_store()?;
        let (pairs, summary) = pairs_from_records(store.records().filter(|r| in_pool(r)), &self.cfg.pairs);
        let path = self.path("pairs.jsonl");
        let mut out = Vec::new();
        write_pairs_jsonl(&pairs, &mut out).map_err(|e| Error::io(&path, e))?;
        fs::write(&path, out).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::to_value(summary)?)
    }

    pub fn plan_path(&self) -> PathBuf {
        self.cfg.plan.out.clone().unwrap_or_else(|| self.path("plan.json"))
    }

    fn plan(&self) -> Result<Value> {
        let c = &self.cfg.plan;
        let sample: SampleSummary = read_json(&self.path("sample.json"))?;
        let store = self.open_store()?;
        let mut shapes = Vec::with_capacity(sample.ids.len());
        let mut unprofiled = 0;
        for id in &sample.ids {
            match shape_for_record(&store.get_record(id)?, &c.tokens) {
                Some(s) => shapes.push(s),
                None => unprofiled += 1,
            }
        }
        let plan = plan_batches(&shapes, c.budget, c.rho, c.seed)?;
        let out = self.plan_path();
        write_json(&out, &plan)?;
        let sizes: Vec<usize> = plan.batches.iter().map(|b| b.ids.len()).collect();
        Ok(json!({
            "budget": c.budget, "rho": c.rho, "seed": c.seed, "samples": shapes.len(),
            "unprofiled": unprofiled, "batches": plan.batches.len(),
            "max_batch": sizes.iter().max(), "padding_waste": padding_waste(&plan),
        }))
    }

    pub fn load_plan(&self) -> Result<BatchPlan> {
        BatchPlan::load(self.plan_path())
    }

    /// Renders a text-editing pair over a stored record and appends it to
    /// `rendered_pairs.jsonl`.
    pub fn render_pair(&self, base_id: &str, spec: &TextRenderSpec) -> Result<RenderedPair> {
        if !self.is_done(Stage::Ingest) {
            return Err(Error::Prerequisite("`pairs render` needs `ingest` first".into()));
        }
        let mut store = self.open_store()?;
        let base = store.read_media(&store.get_record(base_id)?.id)?;
        let rendered = render_text_pair(&mut store, &base, spec)?;
        let path = self.path("rendered_pairs.jsonl");
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        let mut line = serde_json::to_vec(&rendered.pair)?;
        line.push(b'\n');
        f.write_all(&line).map_err(|e| Error::io(&path, e))?;
        Ok(rendered)
    }

    pub fn review_dir(&self) -> PathBuf {
        self.path("review")
    }

    pub fn open_review_queue(&self) -> Result<ReviewQueue> {
        let dir = self.review_dir();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        ReviewQueue::open(&dir, self.cfg.review.review_config())
    }

    pub fn load_concepts(&self) -> Result<ConceptGraph> {
        let path = self.path("graph/concepts.json");
        if !path.exists() {
            return Err(Error::Prerequisite("review feedback needs `graph` first".into()));
        }
        ConceptGraph::load(path)
    }

    /// Opens review tasks for `n` kept records not yet in the training
    /// sample, weighted by the current concept graph, and AI-checks them.
    pub fn propose(&self, queue: &mut ReviewQueue, graph: &ConceptGraph, n: usize, seed: u64) -> Result<Proposal> {
        let store = self.open_store()?;
        let pool: Vec<&DataRecord> = store.records().filter(|r| in_pool(r)).collect();
        let stats = TagCorpusStats::from_docs(pool.iter().map(|r| (&r.id, &r.tags)));
        let model = WeightModel::new(graph, &stats, self.cfg.graph.weight_config())?;
        let mut proposal = queue.propose_candidates(pool.iter().copied(), &model, n, seed, &StubLabeler)?;
        for t in &mut proposal.tasks {
            *t = queue.ai_verify(&t.task_id)?;
        }
        Ok(proposal)
    }

    pub fn stats(&self) -> Result<Value> {
        let store = self.open_store()?;
        let mut by_status: BTreeMap<String, usize> = BTreeMap::new();
        let mut drop_reasons: BTreeMap<String, usize> = BTreeMap::new();
        for r in store.records() {
            *by_status.entry(r.status.name().to_string()).or_default() += 1;
            if let Status::Dropped(reason) = &r.status {
                *drop_reasons.entry(reason.clone()).or_default() += 1;
            }
        }
        let stages: BTreeMap<&str, bool> = Stage::ALL.iter().map(|s| (s.name(), self.is_done(*s))).collect();
        let review = if self.review_dir().join(crate::curation_service::TASK_JOURNAL).exists() {
            serde_json::to_value(self.open_review_queue()?.stats())?
        } else {
            Value::Null
        };
        Ok(
            json!({"records": store.len(), "by_status": by_status, "drop_reasons": drop_reasons,
                  "stages": stages, "review": review}),
        )
    }
}
