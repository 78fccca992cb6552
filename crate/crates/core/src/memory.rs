//! Dual memory: an episodic pool of concrete demonstrations retrieved by BM25,
//! and a semantic pool of distilled insights capped per role with LRU
//! eviction. Both are partitioned by agent role.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use uuid::Uuid;

use crate::domain::{
    AgentRole, FinalStatus, RepairTrajectory, Stage, StepVerdict, TrajectoryStep, SCHEMA_VERSION,
};
use crate::llm::{parse_insight_ops, Backend, ChatRequest, LlmError};
use crate::prompting::{self, Phase};
use crate::retrieval::{index_build, top_k, Bm25Index, Bm25Params};

pub const DEFAULT_INSIGHT_CAP: usize = 15;
/// Most operations a single summarize-and-update round may apply.
pub const MAX_OPS_PER_UPDATE: usize = 3;
/// Upper bound on insight text length, to keep prompts bounded.
pub const MAX_INSIGHT_CHARS: usize = 600;

#[derive(Debug, Error)]
pub enum MemoryError {
    #[error("storage failure: {0}")]
    StorageFailure(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DemoKind {
    SuccessPair,
    FailureCorrectedTuple,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepairStatus {
    Resolved,
    Unresolved,
}

impl From<FinalStatus> for RepairStatus {
    fn from(status: FinalStatus) -> Self {
        match status {
            FinalStatus::Resolved => RepairStatus::Resolved,
            _ => RepairStatus::Unresolved,
        }
    }
}

/// One episodic-memory record: either a clean (input, success) pair or a
/// (input, failed attempt, feedback, corrected output) tuple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demonstration {
    #[serde(default = "default_schema_version")]
    pub schema_version: u32,
    pub id: String,
    pub role: AgentRole,
    pub kind: DemoKind,
    pub input_context: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failed_output: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feedback_text: Option<String>,
    pub success_output: String,
    pub issue_id: String,
    pub repair_status: RepairStatus,
    pub created_at: DateTime<Utc>,
}

fn default_schema_version() -> u32 {
    SCHEMA_VERSION
}

impl Demonstration {
    pub fn validate(&self) -> Result<(), MemoryError> {
        let ok = match self.kind {
            DemoKind::SuccessPair => self.failed_output.is_none() && self.feedback_text.is_none(),
            DemoKind::FailureCorrectedTuple => {
                self.failed_output.is_some() && self.feedback_text.is_some()
            }
        };
        if !ok {
            return Err(MemoryError::StorageFailure(format!(
                "demonstration {} violates its kind shape",
                self.id
            )));
        }
        Ok(())
    }

    /// Text the BM25 index sees: input context plus feedback, mirroring how
    /// retrieval queries are built.
    fn index_text(&self) -> String {
        match &self.feedback_text {
            Some(fb) => format!("{}\n{fb}", self.input_context),
            None => self.input_context.clone(),
        }
    }
}

/// One semantic-memory record: a short natural-language heuristic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Insight {
    pub id: String,
    pub role: AgentRole,
    pub text: String,
    pub created_at: DateTime<Utc>,
    pub last_used_at: DateTime<Utc>,
    pub use_count: u64,
}

/// A single mutation of the semantic pool, as emitted by the summarizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op")]
pub enum InsightOp {
    #[serde(rename = "ADD")]
    Add { text: String },
    #[serde(rename = "REMOVE")]
    Remove { target_id: String },
    #[serde(rename = "EDIT")]
    Edit { target_id: String, text: String },
}

impl InsightOp {
    pub fn validate(&self) -> Result<(), String> {
        let text = match self {
            InsightOp::Add { text } => Some(text),
            InsightOp::Edit { text, .. } => Some(text),
            InsightOp::Remove { .. } => None,
        };
        if let Some(text) = text {
            if text.trim().is_empty() {
                return Err("insight text is empty".into());
            }
            if text.chars().count() > MAX_INSIGHT_CHARS {
                return Err(format!("insight text exceeds {MAX_INSIGHT_CHARS} chars"));
            }
        }
        Ok(())
    }
}

/// Which pipeline stages feed demonstrations for each role. Validation-test
/// generation is deliberately excluded: example-based guidance covers
/// reproduction scripts and patch writing only.
pub fn demo_eligible(role: AgentRole, stage: Stage) -> bool {
    match role {
        AgentRole::TestAgent => stage == Stage::ReproGen,
        AgentRole::PatchAgent => matches!(
            stage,
            Stage::PatchGen | Stage::PatchRefine | Stage::PatchAugment
        ),
        AgentRole::ReviewAgent => false,
    }
}

fn step_feedback_text(step: &TrajectoryStep) -> Option<String> {
    if let Some(result) = &step.feedback {
        return Some(prompting::render_feedback(result));
    }
    step.detail.clone()
}

/// Mines demonstrations out of a finished trajectory, per role: a Success with
/// no failure directly before it becomes a SuccessPair; a maximal run of
/// failures resolved by a Success becomes one FailureCorrectedTuple built from
/// the LAST failed attempt. Runs that never recover produce nothing, and a
/// Pending step breaks any pattern in progress.
pub fn extract_demonstrations(traj: &RepairTrajectory) -> Vec<Demonstration> {
    let mut demos = Vec::new();
    let status = RepairStatus::from(traj.final_status);

    for role in [AgentRole::TestAgent, AgentRole::PatchAgent, AgentRole::ReviewAgent] {
        let mut failure_run: Option<&TrajectoryStep> = None;
        let mut prev_verdict: Option<StepVerdict> = None;
        for step in traj.steps_for(role) {
            if !demo_eligible(role, step.stage) {
                continue;
            }
            match step.verdict {
                StepVerdict::Failure => failure_run = Some(step),
                StepVerdict::Pending => {
                    failure_run = None;
                }
                StepVerdict::Success => {
                    let demo = if let Some(last_failure) = failure_run.take() {
                        Some(Demonstration {
                            schema_version: SCHEMA_VERSION,
                            id: Uuid::new_v4().to_string(),
                            role,
                            kind: DemoKind::FailureCorrectedTuple,
                            input_context: step.context.clone(),
                            failed_output: Some(last_failure.output.clone()),
                            feedback_text: Some(
                                step_feedback_text(last_failure).unwrap_or_default(),
                            ),
                            success_output: step.output.clone(),
                            issue_id: traj.issue_id.clone(),
                            repair_status: status,
                            created_at: Utc::now(),
                        })
                    } else if matches!(prev_verdict, None | Some(StepVerdict::Success)) {
                        Some(Demonstration {
                            schema_version: SCHEMA_VERSION,
                            id: Uuid::new_v4().to_string(),
                            role,
                            kind: DemoKind::SuccessPair,
                            input_context: step.context.clone(),
                            failed_output: None,
                            feedback_text: None,
                            success_output: step.output.clone(),
                            issue_id: traj.issue_id.clone(),
                            repair_status: status,
                            created_at: Utc::now(),
                        })
                    } else {
                        None
                    };
                    demos.extend(demo);
                }
            }
            prev_verdict = Some(step.verdict);
        }
    }
    demos
}

/// Episodic pool: per-role demonstrations plus a BM25 index per role,
/// rebuilt on every write so reads never see a stale index.
pub struct EpisodicStore {
    demos: HashMap<AgentRole, Vec<Demonstration>>,
    indexes: HashMap<AgentRole, Bm25Index>,
    retrieve_calls: AtomicU64,
}

impl Default for EpisodicStore {
    fn default() -> Self {
        Self::new()
    }
}

impl EpisodicStore {
    pub fn new() -> Self {
        Self {
            demos: HashMap::new(),
            indexes: HashMap::new(),
            retrieve_calls: AtomicU64::new(0),
        }
    }

    pub fn from_records(records: Vec<Demonstration>) -> Result<Self, MemoryError> {
        let mut store = Self::new();
        for dem in records {
            store.put(dem)?;
        }
        Ok(store)
    }

    pub fn len(&self, role: AgentRole) -> usize {
        self.demos.get(&role).map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.demos.values().all(Vec::is_empty)
    }

    pub fn iter(&self, role: AgentRole) -> impl Iterator<Item = &Demonstration> {
        self.demos.get(&role).into_iter().flatten()
    }

    pub fn get(&self, id: &str) -> Option<&Demonstration> {
        self.demos.values().flatten().find(|d| d.id == id)
    }

    /// How many times `retrieve` ran (phase-gate instrumentation).
    pub fn retrieve_calls(&self) -> u64 {
        self.retrieve_calls.load(Ordering::Relaxed)
    }

    pub fn put(&mut self, dem: Demonstration) -> Result<(), MemoryError> {
        dem.validate()?;
        if self.demos.values().flatten().any(|d| d.id == dem.id) {
            return Err(MemoryError::StorageFailure(format!(
                "duplicate demonstration id {}",
                dem.id
            )));
        }
        let role = dem.role;
        self.demos.entry(role).or_default().push(dem);
        self.rebuild_index(role)?;
        Ok(())
    }

    /// Removes a demonstration by id; true when something was removed.
    pub fn remove(&mut self, id: &str) -> Result<bool, MemoryError> {
        for (role, pool) in self.demos.iter_mut() {
            if let Some(pos) = pool.iter().position(|d| d.id == id) {
                pool.remove(pos);
                let role = *role;
                self.rebuild_index(role)?;
                return Ok(true);
            }
        }
        Ok(false)
    }

    fn rebuild_index(&mut self, role: AgentRole) -> Result<(), MemoryError> {
        let docs: Vec<(String, String)> = self
            .iter(role)
            .map(|d| (d.id.clone(), d.index_text()))
            .collect();
        let index = index_build(&docs, Bm25Params::default())
            .map_err(|e| MemoryError::StorageFailure(e.to_string()))?;
        self.indexes.insert(role, index);
        Ok(())
    }

    /// Top-k most similar demonstrations in the role's partition, best first.
    pub fn retrieve(&self, role: AgentRole, query: &str, k: usize) -> Vec<Demonstration> {
        assert!(k >= 1, "retrieve requires k >= 1");
        self.retrieve_calls.fetch_add(1, Ordering::Relaxed);
        let Some(index) = self.indexes.get(&role) else {
            return Vec::new();
        };
        top_k(index, query, k)
            .into_iter()
            .filter_map(|(id, _)| self.iter(role).find(|d| d.id == id).cloned())
            .collect()
    }
}

/// Outcome of applying one op batch to the semantic pool.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ApplyReport {
    pub added: Vec<String>,
    pub removed: Vec<String>,
    pub edited: Vec<String>,
    pub evicted: Vec<String>,
    pub skipped: Vec<String>,
}

/// Semantic pool: at most `capacity` insights per role; when full, ADD evicts
/// the least recently used insight (oldest `last_used_at`, ties by oldest
/// `created_at`, then smallest id).
pub struct SemanticStore {
    insights: HashMap<AgentRole, Vec<Insight>>,
    next_id: HashMap<AgentRole, u64>,
    capacity: usize,
    recall_calls: AtomicU64,
}

impl Default for SemanticStore {
    fn default() -> Self {
        Self::new(DEFAULT_INSIGHT_CAP)
    }
}

impl SemanticStore {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity >= 1, "capacity must be >= 1");
        Self {
            insights: HashMap::new(),
            next_id: HashMap::new(),
            capacity,
            recall_calls: AtomicU64::new(0),
        }
    }

    pub fn from_records(
        capacity: usize,
        insights: Vec<Insight>,
        next_id: HashMap<AgentRole, u64>,
    ) -> Self {
        let mut by_role: HashMap<AgentRole, Vec<Insight>> = HashMap::new();
        for ins in insights {
            by_role.entry(ins.role).or_default().push(ins);
        }
        Self {
            insights: by_role,
            next_id,
            capacity,
            recall_calls: AtomicU64::new(0),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self, role: AgentRole) -> usize {
        self.insights.get(&role).map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.insights.values().all(Vec::is_empty)
    }

    pub fn next_id_counter(&self, role: AgentRole) -> u64 {
        self.next_id.get(&role).copied().unwrap_or(1)
    }

    /// How many times `recall` ran (phase-gate instrumentation).
    pub fn recall_calls(&self) -> u64 {
        self.recall_calls.load(Ordering::Relaxed)
    }

    /// Un-instrumented view for maintenance and inspection; does NOT touch
    /// usage metadata, so it never influences LRU eviction.
    pub fn snapshot(&self, role: AgentRole) -> Vec<Insight> {
        let mut all: Vec<Insight> = self.insights.get(&role).cloned().unwrap_or_default();
        all.sort_by(|a, b| a.created_at.cmp(&b.created_at).then_with(|| a.id.cmp(&b.id)));
        all
    }

    /// All insights for the role, oldest first. Marks every returned insight
    /// as used now (bumping `last_used_at` and `use_count`).
    pub fn recall(&mut self, role: AgentRole) -> Vec<Insight> {
        self.recall_calls.fetch_add(1, Ordering::Relaxed);
        let now = Utc::now();
        let Some(pool) = self.insights.get_mut(&role) else {
            return Vec::new();
        };
        for ins in pool.iter_mut() {
            ins.last_used_at = now;
            ins.use_count += 1;
        }
        let mut out = pool.clone();
        out.sort_by(|a, b| a.created_at.cmp(&b.created_at).then_with(|| a.id.cmp(&b.id)));
        out
    }

    fn evict_lru(&mut self, role: AgentRole) -> Option<String> {
        let pool = self.insights.get_mut(&role)?;
        let victim = pool
            .iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| {
                a.last_used_at
                    .cmp(&b.last_used_at)
                    .then_with(|| a.created_at.cmp(&b.created_at))
                    .then_with(|| a.id.cmp(&b.id))
            })
            .map(|(i, _)| i)?;
        Some(pool.remove(victim).id)
    }

    /// Applies ops in order. Unknown REMOVE/EDIT targets are skipped and
    /// reported; the capacity bound holds after every individual op.
    pub fn apply(&mut self, role: AgentRole, ops: &[InsightOp]) -> ApplyReport {
        debug_assert!(ops.len() <= MAX_OPS_PER_UPDATE, "op batch exceeds budget");
        let mut report = ApplyReport::default();
        for op in ops {
            if let Err(reason) = op.validate() {
                report.skipped.push(reason);
                continue;
            }
            match op {
                InsightOp::Add { text } => {
                    if self.len(role) >= self.capacity {
                        if let Some(victim) = self.evict_lru(role) {
                            report.evicted.push(victim);
                        }
                    }
                    let counter = self.next_id.entry(role).or_insert(1);
                    let id = format!("ins-{}-{:04}", role.label(), counter);
                    *counter += 1;
                    let now = Utc::now();
                    self.insights.entry(role).or_default().push(Insight {
                        id: id.clone(),
                        role,
                        text: text.clone(),
                        created_at: now,
                        last_used_at: now,
                        use_count: 0,
                    });
                    report.added.push(id);
                }
                InsightOp::Remove { target_id } => {
                    let pool = self.insights.entry(role).or_default();
                    match pool.iter().position(|i| &i.id == target_id) {
                        Some(pos) => {
                            pool.remove(pos);
                            report.removed.push(target_id.clone());
                        }
                        None => report.skipped.push(format!("unknown target {target_id}")),
                    }
                }
                InsightOp::Edit { target_id, text } => {
                    let pool = self.insights.entry(role).or_default();
                    match pool.iter_mut().find(|i| &i.id == target_id) {
                        Some(ins) => {
                            ins.text = text.clone();
                            report.edited.push(target_id.clone());
                        }
                        None => report.skipped.push(format!("unknown target {target_id}")),
                    }
                }
            }
            debug_assert!(self.len(role) <= self.capacity);
        }
        report
    }
}

/// Both pools together, as the pipeline consumes them.
#[derive(Default)]
pub struct Memory {
    pub episodic: EpisodicStore,
    pub semantic: SemanticStore,
}

impl Memory {
    pub fn new(insight_cap: usize) -> Self {
        Self {
            episodic: EpisodicStore::new(),
            semantic: SemanticStore::new(insight_cap),
        }
    }
}

/// Asks the backend to distill a finished trajectory into at most
/// [`MAX_OPS_PER_UPDATE`] insight operations. A malformed answer is re-asked
/// once; a second parse failure degrades to an empty op list so memory
/// maintenance can never block a repair run.
pub fn summarize_insights(
    role: AgentRole,
    traj_digest: &str,
    existing: &[Insight],
    backend: &dyn Backend,
    temperature: f64,
) -> Result<Vec<InsightOp>, LlmError> {
    assert!(!traj_digest.is_empty(), "digest must be non-empty");

    let mut context = String::new();
    context.push_str(&format!("## Current insights for {role}\n"));
    if existing.is_empty() {
        context.push_str("(none)\n");
    } else {
        for (i, ins) in existing.iter().enumerate() {
            context.push_str(&format!("{}. [{}] {}\n", i + 1, ins.id, ins.text));
        }
    }
    context.push_str("\n## Repair trajectory\n");
    context.push_str(traj_digest);

    let bundle = prompting::compose(
        Stage::InsightUpdate,
        Phase::Initial,
        &[],
        &[],
        &context,
        None,
    )
    .expect("insight-update context is never empty");

    for attempt in 0..2 {
        let req = ChatRequest::new(role, &bundle.system_text, &bundle.user_text, temperature, 1);
        let resp = backend.complete(&req)?;
        let answer = resp.samples.first().cloned().unwrap_or_default();
        match parse_insight_ops(&answer) {
            Ok(mut ops) => {
                ops.truncate(MAX_OPS_PER_UPDATE);
                return Ok(ops);
            }
            Err(e) => {
                log::warn!("insight ops parse failed (attempt {}): {e}", attempt + 1);
            }
        }
    }
    log::warn!("insight update for {role} skipped after two malformed answers");
    Ok(Vec::new())
}
