//! Core data model shared by every subsystem: issues, agent roles, execution
//! results, and the append-only repair trajectory recorded for each issue.

use std::fmt;
use std::path::PathBuf;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::localization::LocalizationReport;

/// Schema version stamped on every persisted document.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DomainError {
    #[error("invalid issue: {0}")]
    InvalidIssue(String),
    #[error("non-consecutive trial index for {role}: expected {expected}, got {got}")]
    NonConsecutiveTrial {
        role: AgentRole,
        expected: u32,
        got: u32,
    },
}

/// An issue to repair: a textual description plus the workspace it concerns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Issue {
    pub id: String,
    pub title: String,
    pub body: String,
    /// Checked-out workspace this issue concerns. Never mutated by the engine.
    pub repo_root: PathBuf,
    pub created_at: DateTime<Utc>,
}

impl Issue {
    pub fn new(
        id: impl Into<String>,
        title: impl Into<String>,
        body: impl Into<String>,
        repo_root: impl Into<PathBuf>,
    ) -> Self {
        Self {
            id: id.into(),
            title: title.into(),
            body: body.into(),
            repo_root: repo_root.into(),
            created_at: Utc::now(),
        }
    }

    /// Checks the load-time invariants: non-empty id, repo_root is a directory.
    pub fn validate(&self) -> Result<(), DomainError> {
        if self.id.is_empty() {
            return Err(DomainError::InvalidIssue("empty id".into()));
        }
        if !self.repo_root.is_dir() {
            return Err(DomainError::InvalidIssue(format!(
                "repo_root {} is not a directory",
                self.repo_root.display()
            )));
        }
        Ok(())
    }

    /// Canonical textual context handed to agents (and used as retrieval query).
    pub fn context_text(&self) -> String {
        format!("# {}\n\n{}", self.title, self.body)
    }
}

/// The three model roles. Memory pools are partitioned by role.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentRole {
    TestAgent,
    PatchAgent,
    ReviewAgent,
}

impl AgentRole {
    /// Stable lowercase label used in file names and replay-script keys.
    pub fn label(&self) -> &'static str {
        match self {
            AgentRole::TestAgent => "test_agent",
            AgentRole::PatchAgent => "patch_agent",
            AgentRole::ReviewAgent => "review_agent",
        }
    }
}

impl fmt::Display for AgentRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Pipeline stage a prompt (and the step it produced) belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    ReproGen,
    ValidationGen,
    FileLocalizeCoarse,
    FileLocalizeRefine,
    LineLocalize,
    PatchGen,
    PatchRefine,
    PatchAugment,
    Review,
    InsightUpdate,
}

impl Stage {
    pub const ALL: [Stage; 10] = [
        Stage::ReproGen,
        Stage::ValidationGen,
        Stage::FileLocalizeCoarse,
        Stage::FileLocalizeRefine,
        Stage::LineLocalize,
        Stage::PatchGen,
        Stage::PatchRefine,
        Stage::PatchAugment,
        Stage::Review,
        Stage::InsightUpdate,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            Stage::ReproGen => "repro_gen",
            Stage::ValidationGen => "validation_gen",
            Stage::FileLocalizeCoarse => "file_localize_coarse",
            Stage::FileLocalizeRefine => "file_localize_refine",
            Stage::LineLocalize => "line_localize",
            Stage::PatchGen => "patch_gen",
            Stage::PatchRefine => "patch_refine",
            Stage::PatchAugment => "patch_augment",
            Stage::Review => "review",
            Stage::InsightUpdate => "insight_update",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Captured result of one sandboxed process run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionResult {
    pub exit_code: i32,
    pub stdout: String,
    pub stderr: String,
    pub duration_ms: u64,
    pub timed_out: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepVerdict {
    Pending,
    Success,
    Failure,
}

impl fmt::Display for StepVerdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            StepVerdict::Pending => "pending",
            StepVerdict::Success => "success",
            StepVerdict::Failure => "failure",
        };
        f.write_str(s)
    }
}

/// One agent interaction recorded in a trajectory.
///
/// `context` holds the issue-specific context the agent saw (demonstration
/// extraction needs it verbatim); `detail` carries failure text for steps that
/// never reached execution (parse errors, patch conflicts).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub role: AgentRole,
    pub stage: Stage,
    /// 1-based, consecutive per role within a trajectory.
    pub trial_index: u32,
    /// Content hash of the fully composed prompt.
    pub prompt_digest: String,
    pub context: String,
    pub output: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feedback: Option<ExecutionResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
    pub verdict: StepVerdict,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinalStatus {
    Resolved,
    Unresolved,
    ReproductionFailed,
}

impl fmt::Display for FinalStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            FinalStatus::Resolved => "resolved",
            FinalStatus::Unresolved => "unresolved",
            FinalStatus::ReproductionFailed => "reproduction_failed",
        };
        f.write_str(s)
    }
}

/// Append-only record of agent outputs and execution feedback for one issue.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepairTrajectory {
    #[serde(default = "default_schema_version")]
    pub schema_version: u32,
    pub issue_id: String,
    pub steps: Vec<TrajectoryStep>,
    pub final_status: FinalStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub localization: Option<LocalizationReport>,
}

fn default_schema_version() -> u32 {
    SCHEMA_VERSION
}

impl RepairTrajectory {
    /// Fresh empty trajectory bound to an issue; status starts Unresolved.
    pub fn new(issue: &Issue) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            issue_id: issue.id.clone(),
            steps: Vec::new(),
            final_status: FinalStatus::Unresolved,
            localization: None,
        }
    }

    /// Next trial index for a role (1 + highest recorded, or 1).
    pub fn next_trial(&self, role: AgentRole) -> u32 {
        self.steps
            .iter()
            .filter(|s| s.role == role)
            .map(|s| s.trial_index)
            .max()
            .unwrap_or(0)
            + 1
    }

    /// Appends a step, enforcing consecutive per-role trial indices.
    pub fn append_step(&mut self, step: TrajectoryStep) -> Result<(), DomainError> {
        let expected = self.next_trial(step.role);
        if step.trial_index != expected {
            return Err(DomainError::NonConsecutiveTrial {
                role: step.role,
                expected,
                got: step.trial_index,
            });
        }
        self.steps.push(step);
        Ok(())
    }

    /// Steps of one role, in trajectory order.
    pub fn steps_for(&self, role: AgentRole) -> impl Iterator<Item = &TrajectoryStep> {
        self.steps.iter().filter(move |s| s.role == role)
    }
}

/// Per-step head/tail limits inside the digest; the overall cap is `max_chars`.
const DIGEST_OUTPUT_HEAD: usize = 600;
const DIGEST_STDOUT_HEAD: usize = 200;
const DIGEST_STDERR_TAIL: usize = 400;
const DIGEST_TRUNCATION_MARKER: &str = "[digest truncated]";

/// First `max` chars of `s` (char-boundary safe).
pub fn head_chars(s: &str, max: usize) -> &str {
    match s.char_indices().nth(max) {
        Some((idx, _)) => &s[..idx],
        None => s,
    }
}

/// Last `max` chars of `s` (char-boundary safe).
pub fn tail_chars(s: &str, max: usize) -> &str {
    let count = s.chars().count();
    if count <= max {
        return s;
    }
    let skip = count - max;
    match s.char_indices().nth(skip) {
        Some((idx, _)) => &s[idx..],
        None => s,
    }
}

/// Deterministic plain-text rendering of a trajectory, capped at `max_chars`
/// characters. Outputs keep their head, stderr keeps its tail.
pub fn trajectory_digest(traj: &RepairTrajectory, max_chars: usize) -> String {
    assert!(max_chars >= 1000, "digest cap below minimum");
    let mut out = String::new();
    out.push_str(&format!(
        "Issue: {} | status: {}\n",
        traj.issue_id, traj.final_status
    ));
    if let Some(loc) = &traj.localization {
        out.push_str(&format!(
            "Localized files: {}\n",
            loc.refined_files.join(", ")
        ));
    }
    for step in &traj.steps {
        out.push_str(&format!(
            "-- {} trial {} stage {} verdict {}\n",
            step.role, step.trial_index, step.stage, step.verdict
        ));
        if !step.output.is_empty() {
            out.push_str("output:\n");
            out.push_str(head_chars(&step.output, DIGEST_OUTPUT_HEAD));
            out.push('\n');
        }
        if let Some(fb) = &step.feedback {
            out.push_str(&format!(
                "feedback: exit={} timed_out={} duration_ms={}\n",
                fb.exit_code, fb.timed_out, fb.duration_ms
            ));
            if !fb.stdout.is_empty() {
                out.push_str("stdout:\n");
                out.push_str(head_chars(&fb.stdout, DIGEST_STDOUT_HEAD));
                out.push('\n');
            }
            if !fb.stderr.is_empty() {
                out.push_str("stderr (tail):\n");
                out.push_str(tail_chars(&fb.stderr, DIGEST_STDERR_TAIL));
                out.push('\n');
            }
        }
        if let Some(detail) = &step.detail {
            out.push_str("note: ");
            out.push_str(head_chars(detail, DIGEST_STDOUT_HEAD));
            out.push('\n');
        }
    }
    if out.chars().count() > max_chars {
        let keep = max_chars - DIGEST_TRUNCATION_MARKER.chars().count() - 1;
        let mut truncated = head_chars(&out, keep).to_string();
        truncated.push('\n');
        truncated.push_str(DIGEST_TRUNCATION_MARKER);
        return truncated;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScriptKind {
    Reproduction,
    Validation,
}

/// A standalone executable test script produced by the test agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestScript {
    pub source: String,
    pub kind: ScriptKind,
}

impl TestScript {
    pub fn new(source: impl Into<String>, kind: ScriptKind) -> Self {
        let source = source.into();
        debug_assert!(!source.is_empty(), "test script source must be non-empty");
        Self { source, kind }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchOrigin {
    Initial,
    Refined,
    Augmented,
}

impl PatchOrigin {
    /// Selection preference used for most-tests-passed tie breaking.
    pub fn rank(&self) -> u8 {
        match self {
            PatchOrigin::Augmented => 2,
            PatchOrigin::Refined => 1,
            PatchOrigin::Initial => 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReproCheck {
    Untested,
    Passed,
    Failed,
}

/// A unified diff plus its verdicts against reproduction and validation tests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidatePatch {
    pub diff: String,
    pub origin: PatchOrigin,
    pub repro_verdict: ReproCheck,
    pub validation_passes: u32,
    pub validation_total: u32,
}

impl CandidatePatch {
    pub fn new(diff: impl Into<String>, origin: PatchOrigin) -> Self {
        Self {
            diff: diff.into(),
            origin,
            repro_verdict: ReproCheck::Untested,
            validation_passes: 0,
            validation_total: 0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step(role: AgentRole, trial: u32, verdict: StepVerdict) -> TrajectoryStep {
        TrajectoryStep {
            role,
            stage: Stage::ReproGen,
            trial_index: trial,
            prompt_digest: "d".into(),
            context: "ctx".into(),
            output: "out".into(),
            feedback: None,
            detail: None,
            verdict,
        }
    }

    fn issue() -> Issue {
        Issue::new("x", "t", "b", std::env::temp_dir())
    }

    #[test]
    fn new_trajectory_is_empty_and_unresolved() {
        let traj = RepairTrajectory::new(&issue());
        assert_eq!(traj.issue_id, "x");
        assert!(traj.steps.is_empty());
        assert_eq!(traj.final_status, FinalStatus::Unresolved);

        let other = RepairTrajectory::new(&issue());
        assert_eq!(traj, other); // independent values, no shared state
    }

    #[test]
    fn issue_with_empty_id_rejected() {
        let mut i = issue();
        i.id = String::new();
        assert!(matches!(i.validate(), Err(DomainError::InvalidIssue(_))));
    }

    #[test]
    fn issue_with_missing_repo_root_rejected() {
        let mut i = issue();
        i.repo_root = PathBuf::from("/nonexistent/surely/absent");
        assert!(i.validate().is_err());
    }

    #[test]
    fn append_step_base_case() {
        let mut traj = RepairTrajectory::new(&issue());
        traj.append_step(step(AgentRole::TestAgent, 1, StepVerdict::Success))
            .unwrap();
        assert_eq!(traj.steps.len(), 1);
    }

    #[test]
    fn append_step_rejects_gap() {
        let mut traj = RepairTrajectory::new(&issue());
        traj.append_step(step(AgentRole::TestAgent, 1, StepVerdict::Failure))
            .unwrap();
        let err = traj
            .append_step(step(AgentRole::TestAgent, 3, StepVerdict::Success))
            .unwrap_err();
        assert!(matches!(
            err,
            DomainError::NonConsecutiveTrial {
                expected: 2,
                got: 3,
                ..
            }
        ));
    }

    #[test]
    fn roles_count_trials_independently() {
        let mut traj = RepairTrajectory::new(&issue());
        traj.append_step(step(AgentRole::TestAgent, 1, StepVerdict::Success))
            .unwrap();
        traj.append_step(step(AgentRole::PatchAgent, 1, StepVerdict::Success))
            .unwrap();
        assert_eq!(traj.steps.len(), 2);
        assert_eq!(traj.next_trial(AgentRole::TestAgent), 2);
        assert_eq!(traj.next_trial(AgentRole::PatchAgent), 2);
    }

    #[test]
    fn digest_empty_trajectory_is_header_only() {
        let traj = RepairTrajectory::new(&issue());
        let d = trajectory_digest(&traj, 1000);
        assert_eq!(d, "Issue: x | status: unresolved\n");
    }

    #[test]
    fn digest_respects_cap_with_marker() {
        let mut traj = RepairTrajectory::new(&issue());
        for i in 1..=40 {
            let mut s = step(AgentRole::TestAgent, i, StepVerdict::Failure);
            s.output = "y".repeat(500);
            traj.append_step(s).unwrap();
        }
        let d = trajectory_digest(&traj, 1000);
        assert!(d.chars().count() <= 1000);
        assert!(d.ends_with(DIGEST_TRUNCATION_MARKER));
    }

    #[test]
    fn digest_is_deterministic() {
        let mut traj = RepairTrajectory::new(&issue());
        let mut s = step(AgentRole::TestAgent, 1, StepVerdict::Failure);
        s.feedback = Some(ExecutionResult {
            exit_code: 1,
            stdout: "o".repeat(500),
            stderr: "e".repeat(900),
            duration_ms: 12,
            timed_out: false,
        });
        traj.append_step(s).unwrap();
        assert_eq!(trajectory_digest(&traj, 2000), trajectory_digest(&traj, 2000));
    }

    #[test]
    fn head_and_tail_chars_are_boundary_safe() {
        let s = "héllo wörld";
        assert_eq!(head_chars(s, 2), "hé");
        assert_eq!(tail_chars(s, 4), "örld");
        assert_eq!(head_chars(s, 100), s);
        assert_eq!(tail_chars(s, 100), s);
    }

    #[test]
    fn serialization_round_trip() {
        let mut traj = RepairTrajectory::new(&issue());
        let mut s = step(AgentRole::PatchAgent, 1, StepVerdict::Success);
        s.feedback = Some(ExecutionResult {
            exit_code: 0,
            stdout: "ISSUE RESOLVED".into(),
            stderr: String::new(),
            duration_ms: 5,
            timed_out: false,
        });
        traj.append_step(s).unwrap();
        let json = serde_json::to_string(&traj).unwrap();
        let back: RepairTrajectory = serde_json::from_str(&json).unwrap();
        assert_eq!(traj, back);
    }
}
