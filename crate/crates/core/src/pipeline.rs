//! The repair loop: reproduction-script generation, hierarchical
//! localization, candidate patching with execution feedback, validation-test
//! scoring, final selection, and memory write-back. One [`Engine`] drives one
//! configuration against any number of issues.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use thiserror::Error;

use crate::config::{ConfigError, EngineConfig, LanguageProfile, SelectionStrategy};
use crate::domain::{
    AgentRole, CandidatePatch, DomainError, ExecutionResult, FinalStatus, Issue, PatchOrigin,
    RepairTrajectory, ReproCheck, ScriptKind, Stage, StepVerdict, TestScript, TrajectoryStep,
    trajectory_digest,
};
use crate::llm::{
    parse_fenced_code, parse_unified_diff, Backend, ChatRequest, ChatResponse, LlmError,
    TokenUsage,
};
use crate::localization::{
    extract_skeleton, localize_files_coarse, localize_files_refine, localize_regions, scan_repo,
    whole_file_regions, FileSelection, LocalizationError, LocalizationReport, RepoStructure,
};
use crate::memory::{
    extract_demonstrations, summarize_insights, Demonstration, Insight, InsightOp, Memory,
};
use crate::metrics::{most_tests_passed, IssueMetrics, IssueOutcome};
use crate::prompting::{compose, render_feedback, Phase, PromptBundle};
use crate::sandbox::{classify_repro, ReproVerdict, SandboxError, Workspace};
use crate::state::{StateDir, StateError, ROLES};

/// Digest budget for insight-update prompts.
const INSIGHT_DIGEST_CHARS: usize = 6000;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    State(#[from] StateError),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Workspace(#[from] SandboxError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error("batch worker failed: {0}")]
    Worker(String),
    #[error("internal invariant broken: {0}")]
    Internal(String),
}

/// Memory as seen by one in-flight issue. Concurrent initial-phase workers run
/// detached (they never read memory; their writes are merged afterwards).
enum MemoryHandle<'a> {
    Detached,
    Live(&'a mut Memory),
}

impl MemoryHandle<'_> {
    fn retrieve(&mut self, role: AgentRole, query: &str, k: usize) -> Vec<Demonstration> {
        match self {
            MemoryHandle::Detached => Vec::new(),
            MemoryHandle::Live(m) => m.episodic.retrieve(role, query, k),
        }
    }

    fn recall(&mut self, role: AgentRole) -> Vec<Insight> {
        match self {
            MemoryHandle::Detached => Vec::new(),
            MemoryHandle::Live(m) => m.semantic.recall(role),
        }
    }

    fn insight_view(&self, role: AgentRole) -> Vec<Insight> {
        match self {
            MemoryHandle::Detached => Vec::new(),
            MemoryHandle::Live(m) => m.semantic.snapshot(role),
        }
    }
}

/// Demonstrations and insight operations produced by one issue, applied to
/// the shared memory (and disk) in submission order.
struct MemoryWrites {
    demos: Vec<Demonstration>,
    insight_ops: Vec<(AgentRole, Vec<InsightOp>)>,
}

/// Counts calls and token usage across everything an issue run asks the
/// backend, including memory-maintenance calls that happen outside the
/// trajectory.
struct CountingBackend<'a> {
    inner: &'a dyn Backend,
    calls: AtomicU64,
    usage: Mutex<TokenUsage>,
}

impl<'a> CountingBackend<'a> {
    fn new(inner: &'a dyn Backend) -> Self {
        Self {
            inner,
            calls: AtomicU64::new(0),
            usage: Mutex::new(TokenUsage::default()),
        }
    }

    fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    fn usage(&self) -> TokenUsage {
        *self.usage.lock().unwrap()
    }
}

impl Backend for CountingBackend<'_> {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, LlmError> {
        let resp = self.inner.complete(req)?;
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.usage.lock().unwrap().add(resp.token_usage);
        Ok(resp)
    }

    fn is_deterministic(&self) -> bool {
        self.inner.is_deterministic()
    }
}

/// Mutable per-issue context threaded through the stage loops.
struct IssueRun<'e, 'm> {
    config: &'e EngineConfig,
    state: &'e StateDir,
    backend: CountingBackend<'e>,
    issue: &'e Issue,
    traj: RepairTrajectory,
    metrics: IssueMetrics,
    mem: MemoryHandle<'m>,
    /// Retrieval query for episodic memory.
    query: String,
    prompt_seq: u32,
    check_seq: u32,
}

impl IssueRun<'_, '_> {
    /// Composes nothing itself — sends a ready bundle, with config overrides
    /// applied, and accounts the call. A hard backend failure is recorded as
    /// a failed step before the error surfaces.
    fn chat(
        &mut self,
        role: AgentRole,
        stage: Stage,
        bundle: &PromptBundle,
        context: &str,
        n: u32,
    ) -> Result<Vec<String>, PipelineError> {
        let mut req = ChatRequest::new(
            role,
            &bundle.system_text,
            &bundle.user_text,
            self.config.temperature(stage),
            n,
        );
        req.max_output_tokens = self.config.max_output_tokens;
        match self.backend.complete(&req) {
            Ok(resp) => {
                self.log_prompt(stage, bundle, &resp.samples);
                Ok(resp.samples)
            }
            Err(e) => {
                self.log_prompt(stage, bundle, &[]);
                let detail = format!("model call failed: {e}");
                self.push_step(
                    role,
                    stage,
                    bundle.digest(),
                    context.to_string(),
                    String::new(),
                    None,
                    Some(detail),
                    StepVerdict::Failure,
                )?;
                Err(PipelineError::Llm(e))
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn push_step(
        &mut self,
        role: AgentRole,
        stage: Stage,
        prompt_digest: String,
        context: String,
        output: String,
        feedback: Option<ExecutionResult>,
        detail: Option<String>,
        verdict: StepVerdict,
    ) -> Result<(), PipelineError> {
        let trial_index = self.traj.next_trial(role);
        self.traj.append_step(TrajectoryStep {
            role,
            stage,
            trial_index,
            prompt_digest,
            context,
            output,
            feedback,
            detail,
            verdict,
        })?;
        Ok(())
    }

    /// Phase-gated memory reads: the initial phase composes prompts from the
    /// static templates alone, so detached and initial runs read nothing.
    fn memory_view(
        &mut self,
        role: AgentRole,
        with_demos: bool,
    ) -> (Vec<Insight>, Vec<Demonstration>) {
        if self.config.phase != Phase::Inference {
            return (Vec::new(), Vec::new());
        }
        let insights = self.mem.recall(role);
        let demos = if with_demos {
            let query = self.query.clone();
            self.mem.retrieve(role, &query, self.config.k_demos)
        } else {
            Vec::new()
        };
        (insights, demos)
    }

    fn log_prompt(&mut self, stage: Stage, bundle: &PromptBundle, samples: &[String]) {
        if !self.config.log_prompts {
            return;
        }
        self.prompt_seq += 1;
        let dir = self.state.prompt_log_dir(&self.issue.id);
        if let Err(e) = std::fs::create_dir_all(&dir) {
            log::warn!("prompt log dir failed: {e}");
            return;
        }
        let mut text = format!(
            "=== system ===\n{}\n=== user ===\n{}\n",
            bundle.system_text, bundle.user_text
        );
        for (i, s) in samples.iter().enumerate() {
            text.push_str(&format!("=== sample {} ===\n{s}\n", i + 1));
        }
        let path = dir.join(format!("{:03}_{}.txt", self.prompt_seq, stage));
        if let Err(e) = std::fs::write(&path, text) {
            log::warn!("prompt log write failed: {e}");
        }
    }

    fn next_check(&mut self) -> u32 {
        self.check_seq += 1;
        self.check_seq
    }
}

pub struct Engine {
    config: EngineConfig,
    backend: Box<dyn Backend>,
    state: StateDir,
}

impl Engine {
    pub fn new(
        config: EngineConfig,
        backend: Box<dyn Backend>,
        state: StateDir,
    ) -> Result<Self, ConfigError> {
        config.validate()?;
        Ok(Self {
            config,
            backend,
            state,
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn state(&self) -> &StateDir {
        &self.state
    }

    pub fn backend(&self) -> &dyn Backend {
        self.backend.as_ref()
    }

    /// Resolves one issue against live memory: reads are phase-gated inside,
    /// writes land in memory and on disk before this returns.
    pub fn run_issue(
        &self,
        issue: &Issue,
        profile: &LanguageProfile,
        memory: &mut Memory,
    ) -> Result<IssueOutcome, PipelineError> {
        let (outcome, writes) = self.resolve_issue(issue, profile, MemoryHandle::Live(memory))?;
        self.commit_memory(memory, writes)?;
        Ok(outcome)
    }

    /// Runs a batch. The initial (memory-building) phase may fan out across
    /// `workers` threads since it never reads memory; inference runs
    /// sequentially so each issue sees everything learned before it. A
    /// deterministic backend forces one worker to keep its call order stable.
    pub fn run_batch(
        &self,
        items: &[(Issue, LanguageProfile)],
        memory: &mut Memory,
        workers: usize,
    ) -> Result<Vec<IssueOutcome>, PipelineError> {
        let workers = if self.backend.is_deterministic() {
            1
        } else {
            workers.max(1)
        };
        if self.config.phase == Phase::Inference || workers == 1 {
            let mut outcomes = Vec::new();
            for (issue, profile) in items {
                outcomes.push(self.run_issue(issue, profile, memory)?);
            }
            return Ok(outcomes);
        }

        let mut outcomes = Vec::new();
        for chunk in items.chunks(workers) {
            let results: Vec<Result<(IssueOutcome, MemoryWrites), PipelineError>> =
                std::thread::scope(|scope| {
                    let handles: Vec<_> = chunk
                        .iter()
                        .map(|(issue, profile)| {
                            scope.spawn(move || {
                                self.resolve_issue(issue, profile, MemoryHandle::Detached)
                            })
                        })
                        .collect();
                    handles
                        .into_iter()
                        .map(|h| {
                            h.join().unwrap_or_else(|_| {
                                Err(PipelineError::Worker("issue worker panicked".into()))
                            })
                        })
                        .collect()
                });
            for result in results {
                let (outcome, writes) = result?;
                self.commit_memory(memory, writes)?;
                outcomes.push(outcome);
            }
        }
        Ok(outcomes)
    }

    fn commit_memory(
        &self,
        memory: &mut Memory,
        writes: MemoryWrites,
    ) -> Result<(), PipelineError> {
        for role in ROLES {
            let demos: Vec<Demonstration> = writes
                .demos
                .iter()
                .filter(|d| d.role == role)
                .cloned()
                .collect();
            if demos.is_empty() {
                continue;
            }
            self.state.append_demonstrations(role, &demos)?;
            for demo in demos {
                memory.episodic.put(demo).map_err(StateError::from)?;
            }
        }
        for (role, ops) in &writes.insight_ops {
            let report = memory.semantic.apply(*role, ops);
            if !report.skipped.is_empty() {
                log::warn!(
                    "{role} insight update skipped {} op(s) with unknown targets",
                    report.skipped.len()
                );
            }
            self.state.save_semantic(*role, &memory.semantic)?;
        }
        Ok(())
    }

    fn resolve_issue(
        &self,
        issue: &Issue,
        profile: &LanguageProfile,
        mem: MemoryHandle<'_>,
    ) -> Result<(IssueOutcome, MemoryWrites), PipelineError> {
        issue.validate()?;
        let started = Instant::now();
        let ws = Workspace::checkout(issue, profile, self.config.script_timeout_secs)?;
        let structure = map_loc_err(scan_repo(&ws, profile))?;

        let mut run = IssueRun {
            config: &self.config,
            state: &self.state,
            backend: CountingBackend::new(self.backend.as_ref()),
            issue,
            traj: RepairTrajectory::new(issue),
            metrics: IssueMetrics::default(),
            mem,
            query: issue.context_text(),
            prompt_seq: 0,
            check_seq: 0,
        };

        let final_patch = match self.drive(&mut run, &ws, &structure, profile) {
            Ok(patch) => patch,
            Err(PipelineError::Llm(e)) => {
                // The failed call is already on the trajectory; the issue
                // degrades to unresolved instead of poisoning the batch.
                log::warn!("issue {}: model failure, giving up: {e}", issue.id);
                run.traj.final_status = FinalStatus::Unresolved;
                None
            }
            Err(fatal) => return Err(fatal),
        };

        // Memory write-back happens in both phases, for resolved and failed
        // runs alike: failures carry lessons too.
        let demos = extract_demonstrations(&run.traj);
        let digest = trajectory_digest(&run.traj, INSIGHT_DIGEST_CHARS);
        let mut insight_ops = Vec::new();
        for role in ROLES {
            if run.traj.steps_for(role).next().is_none() {
                continue;
            }
            let existing = run.mem.insight_view(role);
            match summarize_insights(
                role,
                &digest,
                &existing,
                &run.backend,
                self.config.temperature(Stage::InsightUpdate),
            ) {
                Ok(ops) if !ops.is_empty() => insight_ops.push((role, ops)),
                Ok(_) => {}
                Err(e) => log::warn!("issue {}: {role} insight update skipped: {e}", issue.id),
            }
        }

        run.metrics.llm_calls = run.backend.calls();
        let usage = run.backend.usage();
        run.metrics.tokens_in = usage.input;
        run.metrics.tokens_out = usage.output;
        run.metrics.wall_time_ms = started.elapsed().as_millis() as u64;

        self.state.save_trajectory(&run.traj)?;
        let outcome = IssueOutcome::new(run.traj, final_patch.as_ref(), run.metrics);
        self.state.save_outcome(&outcome)?;
        Ok((outcome, MemoryWrites { demos, insight_ops }))
    }

    /// The stage sequence for one issue. Sets `final_status` and returns the
    /// selected patch for resolved runs.
    fn drive(
        &self,
        run: &mut IssueRun<'_, '_>,
        ws: &Workspace,
        structure: &RepoStructure,
        profile: &LanguageProfile,
    ) -> Result<Option<crate::diff::Patch>, PipelineError> {
        let Some((repro, repro_feedback)) = self.test_generation_loop(run, ws, structure)? else {
            run.traj.final_status = FinalStatus::ReproductionFailed;
            return Ok(None);
        };

        let (report, contents) =
            self.run_localization(run, ws, structure, profile, &repro_feedback)?;
        if let Err(broken) = report.check_invariants() {
            return Err(PipelineError::Internal(format!(
                "localization invariants: {broken}"
            )));
        }
        run.traj.localization = Some(report.clone());

        let patch_context = render_patch_context(run.issue, &report, &contents);
        let mut candidates =
            self.patch_generation_loop(run, ws, &repro, &patch_context, &repro_feedback)?;
        if candidates.is_empty() {
            run.traj.final_status = FinalStatus::Unresolved;
            ws.restore()?;
            return Ok(None);
        }

        let chosen = self.validate_and_select(run, ws, &repro, &patch_context, &mut candidates)?;
        ws.restore()?;
        run.traj.final_status = FinalStatus::Resolved;
        let parsed = crate::diff::parse(&candidates[chosen].diff)
            .map_err(|e| PipelineError::Internal(format!("selected patch unparseable: {e}")))?;
        Ok(Some(parsed))
    }

    /// Up to `z_test` attempts at a script that demonstrably reproduces the
    /// issue; each failed attempt feeds its execution output into the next
    /// prompt. Returns the accepted script and its rendered run feedback.
    fn test_generation_loop(
        &self,
        run: &mut IssueRun<'_, '_>,
        ws: &Workspace,
        structure: &RepoStructure,
    ) -> Result<Option<(TestScript, String)>, PipelineError> {
        let context = format!(
            "### Issue\n{}\n\n### Repository source files\n{}",
            run.issue.context_text(),
            structure.tree_rendering
        );
        let mut feedback: Option<String> = None;

        for trial in 1..=self.config.z_test {
            let (insights, demos) = run.memory_view(AgentRole::TestAgent, true);
            let bundle = compose(
                Stage::ReproGen,
                self.config.phase,
                &insights,
                &demos,
                &context,
                feedback.as_deref(),
            )
            .map_err(|e| PipelineError::Internal(e.to_string()))?;
            let answer = run
                .chat(AgentRole::TestAgent, Stage::ReproGen, &bundle, &context, 1)?
                .into_iter()
                .next()
                .unwrap_or_default();

            let Some(code) = parse_fenced_code(&answer) else {
                let detail = "answer contained no fenced code block".to_string();
                run.push_step(
                    AgentRole::TestAgent,
                    Stage::ReproGen,
                    bundle.digest(),
                    context.clone(),
                    answer,
                    None,
                    Some(detail.clone()),
                    StepVerdict::Failure,
                )?;
                feedback = Some(detail);
                continue;
            };

            let script = TestScript::new(code, ScriptKind::Reproduction);
            let result = ws.run_script(&script, "repro", trial)?;
            let verdict = classify_repro(&result);
            if matches!(verdict, ReproVerdict::Reproduced | ReproVerdict::Resolved) {
                run.metrics.esr_flag = true;
            }
            let rendered = render_feedback(&result);

            if verdict == ReproVerdict::Reproduced {
                run.push_step(
                    AgentRole::TestAgent,
                    Stage::ReproGen,
                    bundle.digest(),
                    context.clone(),
                    answer,
                    Some(result),
                    None,
                    StepVerdict::Success,
                )?;
                return Ok(Some((script, rendered)));
            }

            let detail = match verdict {
                ReproVerdict::Resolved => "script passed on the unpatched tree (nothing to fix?)",
                ReproVerdict::ExecutionError => "script crashed or timed out",
                ReproVerdict::Indeterminate => "script followed neither outcome convention",
                ReproVerdict::Reproduced => unreachable!(),
            };
            run.push_step(
                AgentRole::TestAgent,
                Stage::ReproGen,
                bundle.digest(),
                context.clone(),
                answer,
                Some(result),
                Some(detail.to_string()),
                StepVerdict::Failure,
            )?;
            feedback = Some(rendered);
        }
        Ok(None)
    }

    /// Coarse file pick → skeleton-guided refinement → line regions, with
    /// deterministic fallbacks whenever the model's selection is unusable.
    fn run_localization(
        &self,
        run: &mut IssueRun<'_, '_>,
        ws: &Workspace,
        structure: &RepoStructure,
        profile: &LanguageProfile,
        repro_feedback: &str,
    ) -> Result<(LocalizationReport, BTreeMap<String, String>), PipelineError> {
        let phase = self.config.phase;

        let coarse = match localize_files_coarse(
            structure,
            run.issue,
            Some(repro_feedback),
            &run.backend,
            phase,
            self.config.m_coarse,
            self.config.temperature(Stage::FileLocalizeCoarse),
        ) {
            Ok(sel) => {
                self.record_selection(run, &sel, Stage::FileLocalizeCoarse)?;
                sel.files
            }
            Err(LocalizationError::EmptySelection) => {
                let fallback: Vec<String> = structure
                    .files
                    .iter()
                    .take(self.config.m_coarse)
                    .cloned()
                    .collect();
                run.push_step(
                    AgentRole::PatchAgent,
                    Stage::FileLocalizeCoarse,
                    String::new(),
                    structure.tree_rendering.clone(),
                    String::new(),
                    None,
                    Some("no valid file selection; defaulted to leading files".into()),
                    StepVerdict::Failure,
                )?;
                fallback
            }
            Err(e) => return Err(localization_failure(run, Stage::FileLocalizeCoarse, e)?),
        };

        let skeletons: Vec<_> = coarse
            .iter()
            .map(|path| {
                let content = ws.read_file(path).unwrap_or_default();
                extract_skeleton(path, &content, profile)
            })
            .collect();

        let refined = match localize_files_refine(
            &coarse,
            &skeletons,
            run.issue,
            Some(repro_feedback),
            &run.backend,
            phase,
            self.config.n_refine,
            self.config.temperature(Stage::FileLocalizeRefine),
        ) {
            Ok(sel) => {
                self.record_selection(run, &sel, Stage::FileLocalizeRefine)?;
                sel.files
            }
            Err(LocalizationError::EmptySelection) => {
                let fallback: Vec<String> =
                    coarse.iter().take(self.config.n_refine).cloned().collect();
                run.push_step(
                    AgentRole::PatchAgent,
                    Stage::FileLocalizeRefine,
                    String::new(),
                    coarse.join("\n"),
                    String::new(),
                    None,
                    Some("no valid refinement; kept leading coarse files".into()),
                    StepVerdict::Failure,
                )?;
                fallback
            }
            Err(e) => return Err(localization_failure(run, Stage::FileLocalizeRefine, e)?),
        };

        let contents: BTreeMap<String, String> = refined
            .iter()
            .map(|p| (p.clone(), ws.read_file(p).unwrap_or_default()))
            .collect();

        let regions = match localize_regions(
            &refined,
            &contents,
            run.issue,
            Some(repro_feedback),
            &run.backend,
            phase,
            self.config.temperature(Stage::LineLocalize),
        ) {
            Ok(sel) => {
                if let Some(ex) = &sel.exchange {
                    run.push_step(
                        AgentRole::PatchAgent,
                        Stage::LineLocalize,
                        ex.bundle.digest(),
                        ex.bundle.user_text.clone(),
                        ex.answer.clone(),
                        None,
                        None,
                        StepVerdict::Success,
                    )?;
                }
                sel.regions
            }
            Err(LocalizationError::NoRegions) => {
                run.push_step(
                    AgentRole::PatchAgent,
                    Stage::LineLocalize,
                    String::new(),
                    refined.join("\n"),
                    String::new(),
                    None,
                    Some("no usable line regions; fell back to whole files".into()),
                    StepVerdict::Failure,
                )?;
                whole_file_regions(&refined, &contents)
            }
            Err(e) => return Err(localization_failure(run, Stage::LineLocalize, e)?),
        };

        Ok((
            LocalizationReport {
                coarse_files: coarse,
                refined_files: refined,
                regions,
            },
            contents,
        ))
    }

    fn record_selection(
        &self,
        run: &mut IssueRun<'_, '_>,
        sel: &FileSelection,
        stage: Stage,
    ) -> Result<(), PipelineError> {
        let Some(ex) = &sel.exchange else {
            return Ok(()); // degenerate refinement decided without a call
        };
        let detail = if sel.dropped.is_empty() {
            None
        } else {
            Some(format!("dropped invalid paths: {}", sel.dropped.join(", ")))
        };
        run.push_step(
            AgentRole::PatchAgent,
            stage,
            ex.bundle.digest(),
            ex.bundle.user_text.clone(),
            ex.answer.clone(),
            None,
            detail,
            StepVerdict::Success,
        )
    }

    /// Up to `z_patch` iterations of `patches_per_iter` sampled diffs. Every
    /// candidate is applied to a fresh tree and checked against the
    /// reproduction script; the loop stops at the first iteration that yields
    /// any passing patch, otherwise the collected failure feedback drives the
    /// next refinement round.
    fn patch_generation_loop(
        &self,
        run: &mut IssueRun<'_, '_>,
        ws: &Workspace,
        repro: &TestScript,
        patch_context: &str,
        repro_feedback: &str,
    ) -> Result<Vec<CandidatePatch>, PipelineError> {
        let mut passing = Vec::new();
        let mut feedback = Some(repro_feedback.to_string());

        for iteration in 1..=self.config.z_patch {
            let (stage, origin) = if iteration == 1 {
                (Stage::PatchGen, PatchOrigin::Initial)
            } else {
                (Stage::PatchRefine, PatchOrigin::Refined)
            };
            let (insights, demos) = run.memory_view(AgentRole::PatchAgent, true);
            let bundle = compose(
                stage,
                self.config.phase,
                &insights,
                &demos,
                patch_context,
                feedback.as_deref(),
            )
            .map_err(|e| PipelineError::Internal(e.to_string()))?;
            let samples = run.chat(
                AgentRole::PatchAgent,
                stage,
                &bundle,
                patch_context,
                self.config.patches_per_iter,
            )?;

            let mut failures = Vec::new();
            for answer in samples {
                match self.try_candidate(run, ws, repro, stage, origin, &bundle, patch_context, &answer)? {
                    Ok(candidate) => passing.push(candidate),
                    Err(failure_text) => failures.push(failure_text),
                }
            }
            if !passing.is_empty() {
                break;
            }
            feedback = Some(failures.join("\n--- next failed attempt ---\n"));
        }
        ws.restore()?;
        Ok(passing)
    }

    /// Parses, applies and repro-checks one sampled answer, recording the
    /// step. Inner `Err` carries feedback text for the refinement prompt.
    #[allow(clippy::too_many_arguments)]
    fn try_candidate(
        &self,
        run: &mut IssueRun<'_, '_>,
        ws: &Workspace,
        repro: &TestScript,
        stage: Stage,
        origin: PatchOrigin,
        bundle: &PromptBundle,
        context: &str,
        answer: &str,
    ) -> Result<Result<CandidatePatch, String>, PipelineError> {
        let patch = match parse_unified_diff(answer) {
            Ok(p) => p,
            Err(e) => {
                let detail = format!("unusable diff: {e}");
                run.push_step(
                    AgentRole::PatchAgent,
                    stage,
                    bundle.digest(),
                    context.to_string(),
                    answer.to_string(),
                    None,
                    Some(detail.clone()),
                    StepVerdict::Failure,
                )?;
                return Ok(Err(detail));
            }
        };

        let mut candidate = CandidatePatch::new(crate::diff::render(&patch), origin);
        ws.restore()?;
        if let Err(e) = ws.apply_patch(&candidate) {
            let detail = format!("patch failed to apply: {e}");
            run.push_step(
                AgentRole::PatchAgent,
                stage,
                bundle.digest(),
                context.to_string(),
                answer.to_string(),
                None,
                Some(detail.clone()),
                StepVerdict::Failure,
            )?;
            return Ok(Err(detail));
        }

        let trial = run.next_check();
        let result = ws.run_script(repro, "check", trial)?;
        let verdict = classify_repro(&result);
        let rendered = render_feedback(&result);
        if verdict == ReproVerdict::Resolved {
            candidate.repro_verdict = ReproCheck::Passed;
            run.push_step(
                AgentRole::PatchAgent,
                stage,
                bundle.digest(),
                context.to_string(),
                answer.to_string(),
                Some(result),
                None,
                StepVerdict::Success,
            )?;
            Ok(Ok(candidate))
        } else {
            let detail = match verdict {
                ReproVerdict::Reproduced => "patched tree still reproduces the issue",
                ReproVerdict::ExecutionError => "reproduction script crashed on the patched tree",
                ReproVerdict::Indeterminate => "reproduction script gave no verdict",
                ReproVerdict::Resolved => unreachable!(),
            };
            run.push_step(
                AgentRole::PatchAgent,
                stage,
                bundle.digest(),
                context.to_string(),
                answer.to_string(),
                Some(result),
                Some(detail.to_string()),
                StepVerdict::Failure,
            )?;
            Ok(Err(format!("{detail}\n{rendered}")))
        }
    }

    /// Generates validation tests (discarding any that cannot even run on the
    /// unpatched tree), augments the first passing patch, scores every
    /// candidate against the full suite, and picks the final patch.
    fn validate_and_select(
        &self,
        run: &mut IssueRun<'_, '_>,
        ws: &Workspace,
        repro: &TestScript,
        patch_context: &str,
        candidates: &mut Vec<CandidatePatch>,
    ) -> Result<usize, PipelineError> {
        let validations = self.validation_generation(run, ws, repro)?;
        self.augment_patches(run, ws, repro, patch_context, candidates)?;

        let mut suite = vec![repro.clone()];
        suite.extend(validations);
        for candidate in candidates.iter_mut() {
            let (passes, _) = ws.run_test_suite(candidate, &suite)?;
            candidate.validation_passes = passes;
            candidate.validation_total = suite.len() as u32;
        }

        if self.config.selection_strategy == SelectionStrategy::MostTestsPassed {
            return Ok(most_tests_passed(candidates)
                .expect("candidate list is non-empty at selection"));
        }

        let context = render_review_context(run.issue, candidates);
        let (insights, _) = run.memory_view(AgentRole::ReviewAgent, false);
        let bundle = compose(
            Stage::Review,
            self.config.phase,
            &insights,
            &[],
            &context,
            None,
        )
        .map_err(|e| PipelineError::Internal(e.to_string()))?;
        let answer = run
            .chat(AgentRole::ReviewAgent, Stage::Review, &bundle, &context, 1)?
            .into_iter()
            .next()
            .unwrap_or_default();

        match parse_choice(&answer, candidates.len()) {
            Some(idx) => {
                run.push_step(
                    AgentRole::ReviewAgent,
                    Stage::Review,
                    bundle.digest(),
                    context,
                    answer,
                    None,
                    None,
                    StepVerdict::Success,
                )?;
                Ok(idx)
            }
            None => {
                run.push_step(
                    AgentRole::ReviewAgent,
                    Stage::Review,
                    bundle.digest(),
                    context,
                    answer,
                    None,
                    Some("no usable candidate number; fell back to most tests passed".into()),
                    StepVerdict::Failure,
                )?;
                Ok(most_tests_passed(candidates)
                    .expect("candidate list is non-empty at selection"))
            }
        }
    }

    /// One multi-sample request for extra test scripts. Each script must at
    /// least execute cleanly on the unpatched tree to join the suite.
    fn validation_generation(
        &self,
        run: &mut IssueRun<'_, '_>,
        ws: &Workspace,
        repro: &TestScript,
    ) -> Result<Vec<TestScript>, PipelineError> {
        let context = format!(
            "### Issue\n{}\n\n### Existing reproduction script\n```\n{}\n```",
            run.issue.context_text(),
            repro.source
        );
        let (insights, _) = run.memory_view(AgentRole::TestAgent, false);
        let bundle = compose(
            Stage::ValidationGen,
            self.config.phase,
            &insights,
            &[],
            &context,
            None,
        )
        .map_err(|e| PipelineError::Internal(e.to_string()))?;
        let samples = run.chat(
            AgentRole::TestAgent,
            Stage::ValidationGen,
            &bundle,
            &context,
            self.config.n_validation_tests,
        )?;

        let mut kept = Vec::new();
        for (i, answer) in samples.iter().enumerate() {
            let Some(code) = parse_fenced_code(answer) else {
                run.push_step(
                    AgentRole::TestAgent,
                    Stage::ValidationGen,
                    bundle.digest(),
                    context.clone(),
                    answer.clone(),
                    None,
                    Some("answer contained no fenced code block".into()),
                    StepVerdict::Failure,
                )?;
                continue;
            };
            let script = TestScript::new(code, ScriptKind::Validation);
            ws.restore()?;
            let result = ws.run_script(&script, "valgate", i as u32 + 1)?;
            if classify_repro(&result) == ReproVerdict::ExecutionError {
                run.push_step(
                    AgentRole::TestAgent,
                    Stage::ValidationGen,
                    bundle.digest(),
                    context.clone(),
                    answer.clone(),
                    Some(result),
                    Some("discarded: execution error on the unpatched tree".into()),
                    StepVerdict::Failure,
                )?;
                continue;
            }
            run.push_step(
                AgentRole::TestAgent,
                Stage::ValidationGen,
                bundle.digest(),
                context.clone(),
                answer.clone(),
                Some(result),
                None,
                StepVerdict::Success,
            )?;
            kept.push(script);
        }
        Ok(kept)
    }

    /// Asks for variations of the first passing patch; survivors of the
    /// reproduction check join the candidate pool as augmented patches.
    fn augment_patches(
        &self,
        run: &mut IssueRun<'_, '_>,
        ws: &Workspace,
        repro: &TestScript,
        patch_context: &str,
        candidates: &mut Vec<CandidatePatch>,
    ) -> Result<(), PipelineError> {
        let seed = candidates
            .first()
            .expect("augmentation requires a passing candidate");
        let context = format!(
            "{patch_context}\n### Working fix to improve upon\n```diff\n{}\n```",
            seed.diff
        );
        let (insights, demos) = run.memory_view(AgentRole::PatchAgent, true);
        let bundle = compose(
            Stage::PatchAugment,
            self.config.phase,
            &insights,
            &demos,
            &context,
            None,
        )
        .map_err(|e| PipelineError::Internal(e.to_string()))?;
        let samples = run.chat(
            AgentRole::PatchAgent,
            Stage::PatchAugment,
            &bundle,
            &context,
            self.config.n_augmented_patches,
        )?;
        for answer in samples {
            if let Ok(candidate) = self.try_candidate(
                run,
                ws,
                repro,
                Stage::PatchAugment,
                PatchOrigin::Augmented,
                &bundle,
                &context,
                &answer,
            )? {
                candidates.push(candidate);
            }
        }
        Ok(())
    }
}

/// Records an abandoned localization stage, then forwards the underlying
/// error (model failures degrade the issue; environment failures abort).
fn localization_failure(
    run: &mut IssueRun<'_, '_>,
    stage: Stage,
    err: LocalizationError,
) -> Result<PipelineError, PipelineError> {
    run.push_step(
        AgentRole::PatchAgent,
        stage,
        String::new(),
        String::new(),
        String::new(),
        None,
        Some(format!("localization failed: {err}")),
        StepVerdict::Failure,
    )?;
    Ok(match err {
        LocalizationError::Llm(e) => PipelineError::Llm(e),
        LocalizationError::Io(e) => PipelineError::Workspace(e),
        other => PipelineError::Internal(other.to_string()),
    })
}

fn map_loc_err<T>(r: Result<T, LocalizationError>) -> Result<T, PipelineError> {
    r.map_err(|e| match e {
        LocalizationError::Llm(e) => PipelineError::Llm(e),
        LocalizationError::Io(e) => PipelineError::Workspace(e),
        other => PipelineError::Internal(other.to_string()),
    })
}

fn render_patch_context(
    issue: &Issue,
    report: &LocalizationReport,
    contents: &BTreeMap<String, String>,
) -> String {
    let mut out = format!("### Issue\n{}\n\n### Suspicious code regions\n", issue.context_text());
    for region in &report.regions {
        out.push_str(&format!(
            "#### {} (lines {}-{})",
            region.path, region.start_line, region.end_line
        ));
        if !region.rationale.is_empty() {
            out.push_str(&format!(" — {}", region.rationale));
        }
        out.push('\n');
        if let Some(content) = contents.get(&region.path) {
            out.push_str("```\n");
            for (i, line) in content
                .lines()
                .enumerate()
                .skip(region.start_line.saturating_sub(1))
                .take(region.end_line - region.start_line + 1)
            {
                out.push_str(&format!("{:>5} | {line}\n", i + 1));
            }
            out.push_str("```\n");
        }
    }
    out
}

fn render_review_context(issue: &Issue, candidates: &[CandidatePatch]) -> String {
    let mut out = format!(
        "### Issue\n{}\n\n### Candidate patches (pick one by number)\n",
        issue.context_text()
    );
    for (i, c) in candidates.iter().enumerate() {
        out.push_str(&format!(
            "#### Candidate {} — passed {}/{} tests\n```diff\n{}```\n",
            i + 1,
            c.validation_passes,
            c.validation_total,
            c.diff
        ));
    }
    out
}

/// Pulls a 1-based candidate number out of the reviewer's answer; `None` for
/// anything unparseable or out of range.
fn parse_choice(answer: &str, n_candidates: usize) -> Option<usize> {
    let body = parse_fenced_code(answer).unwrap_or_else(|| answer.to_string());
    body.split_whitespace()
        .find_map(|token| {
            token
                .trim_matches(|c: char| !c.is_ascii_digit())
                .parse::<usize>()
                .ok()
        })
        .filter(|i| (1..=n_candidates).contains(i))
        .map(|i| i - 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::DeclPattern;
    use crate::llm::ReplayBackend;
    use crate::memory::DemoKind;
    use std::collections::HashMap;
    use std::fs;
    use tempfile::TempDir;

    const REPRO_SH: &str = "\
if grep -q \"value=3\" app.txt; then\n  echo \"ISSUE RESOLVED\"\n  exit 0\nelse\n  echo \"ISSUE REPRODUCED\"\n  exit 1\nfi\n";

    const VAL_SH: &str = "\
if grep -q \"value=[0-9]\" app.txt; then\n  if grep -q \"value=3\" app.txt; then echo \"ISSUE RESOLVED\"; exit 0; fi\n  echo \"ISSUE REPRODUCED\"\n  exit 1\nfi\nexit 3\n";

    const GOOD_DIFF: &str = "\
--- a/app.txt\n+++ b/app.txt\n@@ -1 +1 @@\n-value=2\n+value=3\n";

    const CONFLICT_DIFF: &str = "\
--- a/app.txt\n+++ b/app.txt\n@@ -1 +1 @@\n-value=9\n+value=3\n";

    const WRONG_DIFF: &str = "\
--- a/lib.txt\n+++ b/lib.txt\n@@ -1 +1 @@\n-note=old\n+note=new\n";

    const AUG_DIFF: &str = "\
--- a/app.txt\n+++ b/app.txt\n@@ -1 +1 @@\n-value=2\n+value=3\n--- a/lib.txt\n+++ b/lib.txt\n@@ -1 +1 @@\n-note=old\n+note=new\n";

    fn fenced(body: &str) -> String {
        format!("Here is my answer.\n```\n{body}```\n")
    }

    fn add_op(text: &str) -> String {
        format!("```json\n[{{\"op\": \"ADD\", \"text\": \"{text}\"}}]\n```")
    }

    fn sh_profile() -> LanguageProfile {
        LanguageProfile {
            name: "sh-fixture".into(),
            extensions: vec!["txt".into()],
            script_extension: "sh".into(),
            runner: vec!["sh".into()],
            runner_env: BTreeMap::new(),
            ignore_dirs: vec![".git".into()],
            declarations: vec![DeclPattern {
                kind: crate::config::DeclKind::Constant,
                pattern: r"^([a-z]+)=".into(),
            }],
        }
    }

    fn fixture_repo() -> TempDir {
        let dir = TempDir::new().unwrap();
        fs::write(dir.path().join("app.txt"), "value=2\n").unwrap();
        fs::write(dir.path().join("lib.txt"), "note=old\n").unwrap();
        dir
    }

    fn small_config(phase: Phase) -> EngineConfig {
        EngineConfig {
            z_test: 3,
            z_patch: 2,
            patches_per_iter: 2,
            n_validation_tests: 2,
            n_augmented_patches: 2,
            phase,
            script_timeout_secs: 10,
            ..EngineConfig::default()
        }
    }

    fn script(entries: Vec<(&str, Vec<String>)>) -> HashMap<String, Vec<String>> {
        entries
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect()
    }

    fn engine(phase: Phase, entries: Vec<(&str, Vec<String>)>, state_root: &std::path::Path) -> Engine {
        let backend = ReplayBackend::new(script(entries));
        Engine::new(
            small_config(phase),
            Box::new(backend),
            StateDir::open(state_root).unwrap(),
        )
        .unwrap()
    }

    /// Script for a run that resolves the issue end to end: one good repro,
    /// singleton coarse localization (refinement is skipped), two sampled
    /// patches (one conflicts, one fixes), one surviving validation test, one
    /// working augmented patch, and a reviewer that picks the augmented one.
    fn resolved_session() -> Vec<(&'static str, Vec<String>)> {
        vec![
            ("test_agent/1", vec![fenced(REPRO_SH)]),
            ("patch_agent/1", vec![fenced("app.txt\n")]),
            ("patch_agent/2", vec![fenced("app.txt:1-1 wrong value\n")]),
            (
                "patch_agent/3",
                vec![fenced(CONFLICT_DIFF), fenced(GOOD_DIFF)],
            ),
            (
                "test_agent/2",
                vec![fenced(VAL_SH), fenced("exit 7\n")],
            ),
            (
                "patch_agent/4",
                vec!["no diff here, sorry".to_string(), fenced(AUG_DIFF)],
            ),
            ("review_agent/1", vec![fenced("2\n")]),
            ("test_agent/3", vec![add_op("make repro scripts print both sentinels")]),
            ("patch_agent/5", vec![add_op("apply diffs against exact context lines")]),
            ("review_agent/2", vec![add_op("prefer patches passing every test")]),
        ]
    }

    #[test]
    fn resolved_end_to_end_run() {
        let repo = fixture_repo();
        let state_root = TempDir::new().unwrap();
        let eng = engine(Phase::Initial, resolved_session(), state_root.path());
        let issue = Issue::new("iss-1", "wrong value", "value should be 3", repo.path());
        let mut memory = Memory::new(15);

        let outcome = eng.run_issue(&issue, &sh_profile(), &mut memory).unwrap();

        assert_eq!(outcome.status, FinalStatus::Resolved);
        assert!(outcome.metrics.esr_flag);
        let final_patch = outcome.final_patch.as_deref().unwrap();
        assert!(final_patch.contains("+value=3"));
        assert!(final_patch.contains("+note=new"), "reviewer picked candidate 2");
        assert!(outcome.metrics.llm_calls >= 9);
        assert!(outcome.metrics.tokens_in > 0);

        // The pristine repo is untouched.
        assert_eq!(fs::read_to_string(repo.path().join("app.txt")).unwrap(), "value=2\n");

        // Localization captured the degenerate single-file path.
        let loc = outcome.trajectory.localization.as_ref().unwrap();
        assert_eq!(loc.coarse_files, vec!["app.txt"]);
        assert_eq!(loc.refined_files, vec!["app.txt"]);
        assert_eq!(loc.regions.len(), 1);

        // Both memory pools were written, in the initial phase, with zero reads.
        assert_eq!(memory.episodic.retrieve_calls(), 0);
        assert_eq!(memory.semantic.recall_calls(), 0);
        assert_eq!(memory.episodic.len(AgentRole::TestAgent), 1);
        assert_eq!(memory.episodic.len(AgentRole::PatchAgent), 2);
        assert_eq!(memory.semantic.len(AgentRole::TestAgent), 1);
        assert_eq!(memory.semantic.len(AgentRole::PatchAgent), 1);
        assert_eq!(memory.semantic.len(AgentRole::ReviewAgent), 1);

        let patch_demos: Vec<DemoKind> = memory
            .episodic
            .iter(AgentRole::PatchAgent)
            .map(|d| d.kind)
            .collect();
        assert_eq!(
            patch_demos,
            vec![DemoKind::FailureCorrectedTuple, DemoKind::FailureCorrectedTuple]
        );

        // State files landed.
        assert!(eng.state().trajectory_path("iss-1").is_file());
        assert!(eng.state().outcome_path("iss-1").is_file());
        assert!(eng.state().episodic_path(AgentRole::TestAgent).is_file());
        assert!(eng.state().semantic_path(AgentRole::PatchAgent).is_file());
    }

    #[test]
    fn reproduction_failure_short_circuits() {
        let repo = fixture_repo();
        let state_root = TempDir::new().unwrap();
        let entries = vec![
            ("test_agent/1", vec!["no code at all".to_string()]),
            ("test_agent/2", vec!["still chatting".to_string()]),
            ("test_agent/3", vec!["nope".to_string()]),
            ("test_agent/4", vec![add_op("always emit a fenced script")]),
        ];
        let eng = engine(Phase::Initial, entries, state_root.path());
        let issue = Issue::new("iss-2", "t", "b", repo.path());
        let mut memory = Memory::new(15);

        let outcome = eng.run_issue(&issue, &sh_profile(), &mut memory).unwrap();
        assert_eq!(outcome.status, FinalStatus::ReproductionFailed);
        assert!(!outcome.metrics.esr_flag);
        assert!(outcome.final_patch.is_none());
        assert_eq!(outcome.trajectory.steps.len(), 3);
        assert!(outcome.trajectory.localization.is_none());
        // All-failure runs yield no demonstrations; insights still land.
        assert!(memory.episodic.is_empty());
        assert_eq!(memory.semantic.len(AgentRole::TestAgent), 1);
    }

    #[test]
    fn patch_exhaustion_is_unresolved() {
        let repo = fixture_repo();
        let state_root = TempDir::new().unwrap();
        let entries = vec![
            ("test_agent/1", vec![fenced(REPRO_SH)]),
            ("patch_agent/1", vec![fenced("app.txt\n")]),
            ("patch_agent/2", vec![fenced("app.txt:1-1\n")]),
            ("patch_agent/3", vec![fenced(WRONG_DIFF), fenced(WRONG_DIFF)]),
            ("patch_agent/4", vec![fenced(WRONG_DIFF), fenced(WRONG_DIFF)]),
            ("test_agent/2", vec![add_op("a")]),
            ("patch_agent/5", vec![add_op("b")]),
        ];
        let eng = engine(Phase::Initial, entries, state_root.path());
        let issue = Issue::new("iss-3", "t", "b", repo.path());
        let mut memory = Memory::new(15);

        let outcome = eng.run_issue(&issue, &sh_profile(), &mut memory).unwrap();
        assert_eq!(outcome.status, FinalStatus::Unresolved);
        assert!(outcome.metrics.esr_flag, "repro itself worked");
        assert!(outcome.final_patch.is_none());

        let stages: Vec<Stage> = outcome
            .trajectory
            .steps_for(AgentRole::PatchAgent)
            .filter(|s| matches!(s.stage, Stage::PatchGen | Stage::PatchRefine))
            .map(|s| s.stage)
            .collect();
        assert_eq!(
            stages,
            vec![Stage::PatchGen, Stage::PatchGen, Stage::PatchRefine, Stage::PatchRefine]
        );
        assert!(outcome
            .trajectory
            .steps
            .iter()
            .all(|s| s.stage != Stage::Review));
    }

    #[test]
    fn inference_phase_reads_memory() {
        let repo = fixture_repo();
        let state_root = TempDir::new().unwrap();
        let eng = engine(Phase::Inference, resolved_session(), state_root.path());
        let issue = Issue::new("iss-4", "wrong value", "value should be 3", repo.path());
        let mut memory = Memory::new(15);
        memory
            .episodic
            .put(Demonstration {
                schema_version: crate::domain::SCHEMA_VERSION,
                id: "seed-demo".into(),
                role: AgentRole::TestAgent,
                kind: DemoKind::SuccessPair,
                input_context: "wrong value in app".into(),
                failed_output: None,
                feedback_text: None,
                success_output: "echo done".into(),
                issue_id: "older".into(),
                repair_status: crate::memory::RepairStatus::Resolved,
                created_at: chrono::Utc::now(),
            })
            .unwrap();

        let outcome = eng.run_issue(&issue, &sh_profile(), &mut memory).unwrap();
        assert_eq!(outcome.status, FinalStatus::Resolved);
        assert!(memory.episodic.retrieve_calls() > 0);
        assert!(memory.semantic.recall_calls() > 0);
    }

    #[test]
    fn review_gibberish_falls_back_to_most_tests_passed() {
        let repo = fixture_repo();
        let state_root = TempDir::new().unwrap();
        let mut entries = resolved_session();
        entries[6] = ("review_agent/1", vec!["definitely the better one".to_string()]);
        let eng = engine(Phase::Initial, entries, state_root.path());
        let issue = Issue::new("iss-5", "wrong value", "value should be 3", repo.path());
        let mut memory = Memory::new(15);

        let outcome = eng.run_issue(&issue, &sh_profile(), &mut memory).unwrap();
        assert_eq!(outcome.status, FinalStatus::Resolved);

        let review_step = outcome
            .trajectory
            .steps_for(AgentRole::ReviewAgent)
            .find(|s| s.stage == Stage::Review)
            .unwrap();
        assert_eq!(review_step.verdict, StepVerdict::Failure);
        assert!(review_step.detail.as_deref().unwrap().contains("fell back"));
        // Both survivors pass the same tests; augmented origin wins the tie.
        assert!(outcome.final_patch.unwrap().contains("+note=new"));
    }

    #[test]
    fn replay_backend_forces_sequential_batch() {
        let repo_a = fixture_repo();
        let repo_b = fixture_repo();
        let state_root = TempDir::new().unwrap();
        // Two consecutive reproduction-failure sessions back to back.
        let entries = vec![
            ("test_agent/1", vec!["junk".to_string()]),
            ("test_agent/2", vec!["junk".to_string()]),
            ("test_agent/3", vec!["junk".to_string()]),
            ("test_agent/4", vec![add_op("a")]),
            ("test_agent/5", vec!["junk".to_string()]),
            ("test_agent/6", vec!["junk".to_string()]),
            ("test_agent/7", vec!["junk".to_string()]),
            ("test_agent/8", vec![add_op("b")]),
        ];
        let eng = engine(Phase::Initial, entries, state_root.path());
        let items = vec![
            (Issue::new("b-1", "t", "b", repo_a.path()), sh_profile()),
            (Issue::new("b-2", "t", "b", repo_b.path()), sh_profile()),
        ];
        let mut memory = Memory::new(15);

        let outcomes = eng.run_batch(&items, &mut memory, 8).unwrap();
        assert_eq!(outcomes.len(), 2);
        assert!(outcomes
            .iter()
            .all(|o| o.status == FinalStatus::ReproductionFailed));
        assert_eq!(memory.semantic.len(AgentRole::TestAgent), 2);
    }

    #[test]
    fn choice_parsing_is_lenient_but_range_checked() {
        assert_eq!(parse_choice("```\n2\n```", 3), Some(1));
        assert_eq!(parse_choice("Candidate 3.", 3), Some(2));
        assert_eq!(parse_choice("```\n7\n```", 3), None);
        assert_eq!(parse_choice("neither looks right", 3), None);
        assert_eq!(parse_choice("0", 3), None);
    }
}
