//! Review loop: balanced proposals, pseudo-labels, AI and human
//! verification with leases, corrections and feedback into concept weights.

pub mod http;

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::knowledge_graph::{weighted_sample, ConceptGraph, SampleItem, WeightModel};
use crate::record_store::{DataRecord, Status};

pub const TASK_JOURNAL: &str = "tasks.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskState {
    Proposed,
    AiChecked,
    PendingHuman,
    Approved,
    Rejected,
    Corrected,
}

impl TaskState {
    pub fn can_transition_to(self, next: TaskState) -> bool {
        use TaskState::*;
        matches!(
            (self, next),
            (Proposed, AiChecked)
                | (AiChecked, Approved)
                | (AiChecked, PendingHuman)
                | (PendingHuman, Approved)
                | (PendingHuman, Rejected)
                | (Rejected, Corrected)
        )
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, TaskState::Approved | TaskState::Rejected | TaskState::Corrected)
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskState::Proposed => "proposed",
            TaskState::AiChecked => "ai_checked",
            TaskState::PendingHuman => "pending_human",
            TaskState::Approved => "approved",
            TaskState::Rejected => "rejected",
            TaskState::Corrected => "corrected",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub caption: String,
    #[serde(default)]
    pub scores: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AiResult {
    Pass,
    Fail,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AiVerdict {
    pub result: AiResult,
    pub reasons: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HumanVerdict {
    Approve,
    Reject,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lease {
    pub holder: String,
    /// Unix seconds; the lease is dead from this instant on.
    pub expires_at: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewTask {
    pub task_id: String,
    pub record_id: String,
    /// Concept ids matched by the record's tags.
    #[serde(default)]
    pub concepts: Vec<String>,
    pub pseudo_label: PseudoLabel,
    pub ai_verdict: Option<AiVerdict>,
    pub human_verdict: Option<HumanVerdict>,
    pub correction: Option<PseudoLabel>,
    pub state: TaskState,
    pub lease: Option<Lease>,
    /// Every state the task has been in, oldest first.
    pub history: Vec<TaskState>,
    #[serde(default)]
    pub feedback_applied: bool,
}

impl ReviewTask {
    fn set_state(&mut self, next: TaskState) -> Result<()> {
        if !self.state.can_transition_to(next) {
            return Err(Error::BadTransition {
                from: self.state.name().into(),
                to: next.name().into(),
            });
        }
        self.state = next;
        self.history.push(next);
        Ok(())
    }

    pub fn lease_live(&self, now: u64) -> bool {
        self.lease.as_ref().is_some_and(|l| l.expires_at > now)
    }
}

/// Produces pseudo-labels for proposed records.
pub trait Labeler: Send + Sync {
    fn label(&self, record: &DataRecord) -> PseudoLabel;
}

/// Reuses what the record already carries: its most detailed caption (or
/// alt text) and its profile scores.
#[derive(Debug, Clone, Copy, Default)]
pub struct StubLabeler;

impl Labeler for StubLabeler {
    fn label(&self, record: &DataRecord) -> PseudoLabel {
        let caption = record
            .captions
            .values()
            .next()
            .cloned()
            .or_else(|| record.alt_text.clone())
            .unwrap_or_default();
        let scores = record
            .profile
            .as_ref()
            .map(|p| p.external_scores.clone())
            .unwrap_or_default();
        PseudoLabel { caption, scores }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReviewConfig {
    pub lease_secs: u64,
    pub auto_approve: bool,
    /// Minimum score per scorer name.
    pub thresholds: BTreeMap<String, f64>,
    /// Feedback strength: factor = 1 + alpha * rejection rate.
    pub alpha: f64,
}

impl Default for ReviewConfig {
    fn default() -> Self {
        ReviewConfig {
            lease_secs: 600,
            auto_approve: false,
            thresholds: BTreeMap::from([("aesthetic".to_string(), 0.5)]),
            alpha: 0.5,
        }
    }
}

/// Threshold rule: every configured score present and at least its
/// threshold, and a non-empty caption.
pub fn ai_check(label: &PseudoLabel, thresholds: &BTreeMap<String, f64>) -> AiVerdict {
    let mut reasons = Vec::new();
    if label.caption.trim().is_empty() {
        reasons.push("caption_empty".to_string());
    }
    for (name, &min) in thresholds {
        match label.scores.get(name) {
            Some(&v) if v >= min => {}
            _ => reasons.push(name.clone()),
        }
    }
    AiVerdict {
        result: if reasons.is_empty() {
            AiResult::Pass
        } else {
            AiResult::Fail
        },
        reasons,
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FeedbackDelta {
    /// Multiplicative manual-weight factor per concept id.
    pub concept_factors: BTreeMap<String, f64>,
    pub additions: Vec<String>,
    pub removals: Vec<String>,
}

impl FeedbackDelta {
    pub fn is_empty(&self) -> bool {
        self.concept_factors.is_empty() && self.additions.is_empty() && self.removals.is_empty()
    }

    pub fn apply_to(&self, graph: &mut ConceptGraph) {
        for (id, f) in &self.concept_factors {
            if let Some(c) = graph.concepts.get_mut(id) {
                c.manual_weight *= f;
            }
        }
    }
}

/// Per-concept human rejection rate over terminal tasks. Corrected tasks
/// were rejected first and count as rejections.
pub fn rejection_rates<'a>(tasks: impl IntoIterator<Item = &'a ReviewTask>) -> BTreeMap<String, f64> {
    let mut tally: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for t in tasks.into_iter().filter(|t| t.state.is_terminal()) {
        let rejected = matches!(t.state, TaskState::Rejected | TaskState::Corrected);
        for c in &t.concepts {
            let e = tally.entry(c).or_default();
            e.0 += rejected as usize;
            e.1 += 1;
        }
    }
    tally
        .into_iter()
        .map(|(c, (r, n))| (c.to_string(), r as f64 / n as f64))
        .collect()
}

/// Delta for a window of resolved tasks. Non-terminal tasks are ignored.
pub fn feedback_delta<'a>(tasks: impl IntoIterator<Item = &'a ReviewTask> + Clone, alpha: f64) -> FeedbackDelta {
    let mut delta = FeedbackDelta {
        concept_factors: rejection_rates(tasks.clone())
            .into_iter()
            .map(|(c, rate)| (c, 1.0 + alpha * rate))
            .collect(),
        ..Default::default()
    };
    let mut add = BTreeSet::new();
    let mut remove = BTreeSet::new();
    for t in tasks {
        match t.state {
            TaskState::Approved | TaskState::Corrected => {
                add.insert(t.record_id.clone());
            }
            TaskState::Rejected => {
                remove.insert(t.record_id.clone());
            }
            _ => {}
        }
    }
    delta.additions = add.into_iter().collect();
    delta.removals = remove.into_iter().collect();
    delta
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub tasks: Vec<ReviewTask>,
    /// Set when the pool held fewer than the requested records.
    pub short: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReviewStats {
    pub queue_depth: usize,
    pub approval_rate: f64,
    pub per_concept_rejection: BTreeMap<String, f64>,
    pub by_state: BTreeMap<String, usize>,
}

/// Owner of all review tasks. Every mutation is appended to the task
/// journal when one is attached.
#[derive(Debug, Default)]
pub struct ReviewQueue {
    tasks: BTreeMap<String, ReviewTask>,
    next_seq: u64,
    cfg: ReviewConfig,
    journal: Option<(PathBuf, BufWriter<File>)>,
}

fn task_id(seq: u64) -> String {
    format!("task-{seq:06}")
}

impl ReviewQueue {
    pub fn new(cfg: ReviewConfig) -> Self {
        ReviewQueue {
            cfg,
            ..Default::default()
        }
    }

    /// Replays `dir/tasks.jsonl` (last line per task wins) and keeps
    /// appending to it.
    pub fn open(dir: impl AsRef<Path>, cfg: ReviewConfig) -> Result<Self> {
        let path = dir.as_ref().join(TASK_JOURNAL);
        let mut queue = ReviewQueue::new(cfg);
        if path.exists() {
            let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
            for line in BufReader::new(file).lines() {
                let line = line.map_err(|e| Error::io(&path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                let task: ReviewTask = serde_json::from_str(&line)?;
                queue.tasks.insert(task.task_id.clone(), task);
            }
        }
        queue.next_seq = queue
            .tasks
            .keys()
            .filter_map(|k| k.strip_prefix("task-")?.parse::<u64>().ok())
            .max()
            .map_or(0, |m| m + 1);
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        queue.journal = Some((path, BufWriter::new(file)));
        Ok(queue)
    }

    pub fn config(&self) -> &ReviewConfig {
        &self.cfg
    }

    fn persist(&mut self, id: &str) -> Result<()> {
        if let Some((path, w)) = self.journal.as_mut() {
            let task = &self.tasks[id];
            serde_json::to_writer(&mut *w, task)?;
            w.write_all(b"\n").map_err(|e| Error::io(&*path, e))?;
            w.flush().map_err(|e| Error::io(&*path, e))?;
        }
        Ok(())
    }

    pub fn get(&self, id: &str) -> Result<&ReviewTask> {
        self.tasks.get(id).ok_or_else(|| Error::NotFound(id.to_string()))
    }

    /// Tasks in creation order.
    pub fn tasks(&self) -> impl Iterator<Item = &ReviewTask> {
        self.tasks.values()
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    /// Draws up to `n` kept records by rarity weight and opens a task for
    /// each. Records with an unresolved task are not drawn again.
    pub fn propose_candidates<'a>(
        &mut self,
        records: impl IntoIterator<Item = &'a DataRecord>,
        model: &WeightModel,
        n: usize,
        seed: u64,
        labeler: &dyn Labeler,
    ) -> Result<Proposal> {
        if n == 0 {
            return Err(Error::InvalidArgument("n must be at least 1".into()));
        }
        let open: BTreeSet<&str> = self
            .tasks
            .values()
            .filter(|t| !t.state.is_terminal())
            .map(|t| t.record_id.as_str())
            .collect();
        let pool: BTreeMap<&str, &DataRecord> = records
            .into_iter()
            .filter(|r| r.status == Status::Kept && !open.contains(r.id.as_str()))
            .map(|r| (r.id.as_str(), r))
            .collect();
        let items: Vec<SampleItem> = pool
            .values()
            .map(|r| SampleItem {
                id: r.id.clone(),
                source: r.source.clone(),
                weight: model.weight(&r.tags),
            })
            .collect();
        let take = n.min(items.len());
        let drawn = weighted_sample(&items, take, seed, &BTreeMap::new())?;
        let mut out = Proposal {
            tasks: Vec::with_capacity(take),
            short: take < n,
        };
        for id in drawn.ids {
            let record = pool[id.as_str()];
            let mut concepts: Vec<String> = record
                .tags
                .iter()
                .filter_map(|t| model.concept_for(t).map(str::to_string))
                .collect();
            concepts.sort();
            concepts.dedup();
            let tid = task_id(self.next_seq);
            self.next_seq += 1;
            let task = ReviewTask {
                task_id: tid.clone(),
                record_id: record.id.clone(),
                concepts,
                pseudo_label: labeler.label(record),
                ai_verdict: None,
                human_verdict: None,
                correction: None,
                state: TaskState::Proposed,
                lease: None,
                history: vec![TaskState::Proposed],
                feedback_applied: false,
            };
            self.tasks.insert(tid.clone(), task.clone());
            self.persist(&tid)?;
            out.tasks.push(task);
        }
        Ok(out)
    }

    pub fn ai_verify(&mut self, id: &str) -> Result<ReviewTask> {
        let auto = self.cfg.auto_approve;
        let verdict = ai_check(&self.get(id)?.pseudo_label, &self.cfg.thresholds);
        let task = self.tasks.get_mut(id).expect("checked above");
        if task.state != TaskState::Proposed {
            return Err(Error::BadTransition {
                from: task.state.name().into(),
                to: TaskState::AiChecked.name().into(),
            });
        }
        task.set_state(TaskState::AiChecked)?;
        let next = if verdict.result == AiResult::Pass && auto {
            TaskState::Approved
        } else {
            TaskState::PendingHuman
        };
        task.ai_verdict = Some(verdict);
        task.set_state(next)?;
        let task = task.clone();
        self.persist(id)?;
        Ok(task)
    }

    /// Runs the AI check on every proposed task.
    pub fn ai_verify_all(&mut self) -> Result<usize> {
        let ids: Vec<String> = self
            .tasks
            .values()
            .filter(|t| t.state == TaskState::Proposed)
            .map(|t| t.task_id.clone())
            .collect();
        for id in &ids {
            self.ai_verify(id)?;
        }
        Ok(ids.len())
    }

    /// Leases the oldest pending task that is free, expired, or already
    /// held by `holder` (whose lease is renewed).
    pub fn lease_next(&mut self, holder: &str, now: u64) -> Result<Option<ReviewTask>> {
        let found = self
            .tasks
            .values()
            .find(|t| {
                t.state == TaskState::PendingHuman
                    && (!t.lease_live(now) || t.lease.as_ref().is_some_and(|l| l.holder == holder))
            })
            .map(|t| t.task_id.clone());
        let Some(id) = found else { return Ok(None) };
        let task = self.tasks.get_mut(&id).expect("found above");
        task.lease = Some(Lease {
            holder: holder.to_string(),
            expires_at: now + self.cfg.lease_secs,
        });
        let task = task.clone();
        self.persist(&id)?;
        Ok(Some(task))
    }

    pub fn submit_human_verdict(
        &mut self,
        id: &str,
        holder: &str,
        verdict: HumanVerdict,
        correction: Option<PseudoLabel>,
        now: u64,
    ) -> Result<ReviewTask> {
        let task = self.tasks.get_mut(id).ok_or_else(|| Error::NotFound(id.to_string()))?;
        if task.state != TaskState::PendingHuman {
            let to = match verdict {
                HumanVerdict::Approve => TaskState::Approved,
                HumanVerdict::Reject => TaskState::Rejected,
            };
            return Err(Error::BadTransition {
                from: task.state.name().into(),
                to: to.name().into(),
            });
        }
        let holds = task
            .lease
            .as_ref()
            .is_some_and(|l| l.holder == holder && l.expires_at > now);
        if !holds {
            return Err(Error::LeaseViolation(id.to_string()));
        }
        match verdict {
            HumanVerdict::Approve => task.set_state(TaskState::Approved)?,
            HumanVerdict::Reject => {
                task.set_state(TaskState::Rejected)?;
                if let Some(c) = correction {
                    task.correction = Some(c);
                    task.set_state(TaskState::Corrected)?;
                }
            }
        }
        task.human_verdict = Some(verdict);
        task.lease = None;
        let task = task.clone();
        self.persist(id)?;
        Ok(task)
    }

    /// Attaches a correction to a task rejected without one.
    pub fn correct(&mut self, id: &str, correction: PseudoLabel) -> Result<ReviewTask> {
        let task = self.tasks.get_mut(id).ok_or_else(|| Error::NotFound(id.to_string()))?;
        task.set_state(TaskState::Corrected)?;
        task.correction = Some(correction);
        let task = task.clone();
        self.persist(id)?;
        Ok(task)
    }

    /// Computes the delta over terminal tasks not yet fed back, applies the
    /// concept factors to `graph`, and marks the window consumed.
    pub fn apply_feedback(&mut self, graph: &mut ConceptGraph) -> Result<FeedbackDelta> {
        let window: Vec<String> = self
            .tasks
            .values()
            .filter(|t| t.state.is_terminal() && !t.feedback_applied)
            .map(|t| t.task_id.clone())
            .collect();
        let delta = feedback_delta(window.iter().map(|id| &self.tasks[id]), self.cfg.alpha);
        delta.apply_to(graph);
        for id in &window {
            self.tasks.get_mut(id).expect("window ids exist").feedback_applied = true;
            self.persist(id)?;
        }
        Ok(delta)
    }

    pub fn stats(&self) -> ReviewStats {
        let mut by_state: BTreeMap<String, usize> = BTreeMap::new();
        for t in self.tasks.values() {
            *by_state.entry(t.state.name().to_string()).or_default() += 1;
        }
        let terminal = self.tasks.values().filter(|t| t.state.is_terminal()).count();
        let approved = by_state.get("approved").copied().unwrap_or(0);
        ReviewStats {
            queue_depth: by_state.get("pending_human").copied().unwrap_or(0),
            approval_rate: if terminal == 0 {
                0.0
            } else {
                approved as f64 / terminal as f64
            },
            per_concept_rejection: rejection_rates(self.tasks.values()),
            by_state,
        }
    }
}
