//! Dynamic prompt composition. Every agent call goes through [`compose`],
//! which renders: the stage's static task prompt (plus accumulated insights in
//! the inference phase) as system text, and demonstrations → context →
//! feedback, in that exact order, as user text.

use std::path::PathBuf;
use std::sync::OnceLock;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::domain::{tail_chars, ExecutionResult, Stage};
use crate::memory::{DemoKind, Demonstration, Insight};

/// Feedback sections keep only their last 4000 characters; error traces live
/// at the tail.
pub const FEEDBACK_TAIL_CHARS: usize = 4000;

pub const INSIGHTS_HEADER: &str = "## Accumulated insights";
pub const DEMOS_HEADER: &str = "## Demonstrations";
pub const CONTEXT_HEADER: &str = "## Context";
pub const FEEDBACK_HEADER: &str = "## Feedback";

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("context section is empty")]
    EmptyContext,
    #[error("initial phase must not carry memory sections")]
    MemoryInInitialPhase,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Initial,
    Inference,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptBundle {
    pub system_text: String,
    pub user_text: String,
    pub stage: Stage,
}

impl PromptBundle {
    /// Content hash of the fully composed prompt, recorded on each step.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.system_text.as_bytes());
        hasher.update([0u8]);
        hasher.update(self.user_text.as_bytes());
        format!("{:x}", hasher.finalize())
    }
}

static PROMPT_DIR: OnceLock<PathBuf> = OnceLock::new();

/// Points template loading at a directory of `<stage>.txt` files instead of
/// the embedded defaults. May be set once per process, before any composition.
pub fn set_prompt_dir(dir: PathBuf) -> Result<(), PathBuf> {
    PROMPT_DIR.set(dir)
}

fn embedded_template(stage: Stage) -> &'static str {
    match stage {
        Stage::ReproGen => include_str!("../prompts/repro_gen.txt"),
        Stage::ValidationGen => include_str!("../prompts/validation_gen.txt"),
        Stage::FileLocalizeCoarse => include_str!("../prompts/file_localize_coarse.txt"),
        Stage::FileLocalizeRefine => include_str!("../prompts/file_localize_refine.txt"),
        Stage::LineLocalize => include_str!("../prompts/line_localize.txt"),
        Stage::PatchGen => include_str!("../prompts/patch_gen.txt"),
        Stage::PatchRefine => include_str!("../prompts/patch_refine.txt"),
        Stage::PatchAugment => include_str!("../prompts/patch_augment.txt"),
        Stage::Review => include_str!("../prompts/review.txt"),
        Stage::InsightUpdate => include_str!("../prompts/insight_update.txt"),
    }
}

/// The fixed task prompt for a stage, from the override directory when one
/// was configured and readable, otherwise from the embedded assets.
pub fn static_task_prompt(stage: Stage) -> String {
    if let Some(dir) = PROMPT_DIR.get() {
        let path = dir.join(format!("{}.txt", stage.label()));
        if let Ok(text) = std::fs::read_to_string(&path) {
            return text;
        }
    }
    embedded_template(stage).to_string()
}

/// Plain-text rendering of execution feedback shown to agents and stored in
/// demonstrations. Deliberately excludes wall-clock duration so identical
/// executions render identically.
pub fn render_feedback(result: &ExecutionResult) -> String {
    format!(
        "exit_code: {}\ntimed_out: {}\n--- stdout ---\n{}\n--- stderr ---\n{}",
        result.exit_code, result.timed_out, result.stdout, result.stderr
    )
}

fn render_demo(index: usize, demo: &Demonstration) -> String {
    match demo.kind {
        DemoKind::SuccessPair => format!(
            "### Example {index}\nInput:\n{}\n\nOutput:\n{}\n",
            demo.input_context, demo.success_output
        ),
        DemoKind::FailureCorrectedTuple => format!(
            "### Example {index}\nInput:\n{}\n\nFailed attempt:\n{}\n\nFeedback:\n{}\n\nCorrected output:\n{}\n",
            demo.input_context,
            demo.failed_output.as_deref().unwrap_or(""),
            demo.feedback_text.as_deref().unwrap_or(""),
            demo.success_output
        ),
    }
}

/// Composes the full prompt for one agent call. Deterministic: identical
/// inputs yield a byte-identical bundle.
pub fn compose(
    stage: Stage,
    phase: Phase,
    insights: &[Insight],
    demos: &[Demonstration],
    context: &str,
    feedback: Option<&str>,
) -> Result<PromptBundle, PromptError> {
    if context.trim().is_empty() {
        return Err(PromptError::EmptyContext);
    }
    if phase == Phase::Initial && (!insights.is_empty() || !demos.is_empty()) {
        return Err(PromptError::MemoryInInitialPhase);
    }

    let mut system_text = static_task_prompt(stage);
    if !insights.is_empty() {
        system_text.push_str(&format!("\n\n{INSIGHTS_HEADER}\n"));
        for (i, ins) in insights.iter().enumerate() {
            system_text.push_str(&format!("{}. {}\n", i + 1, ins.text));
        }
    }

    let mut user_text = String::new();
    if !demos.is_empty() {
        user_text.push_str(&format!("{DEMOS_HEADER}\n"));
        for (i, demo) in demos.iter().enumerate() {
            user_text.push_str(&render_demo(i + 1, demo));
            user_text.push('\n');
        }
    }
    user_text.push_str(&format!("{CONTEXT_HEADER}\n{context}\n"));
    if let Some(fb) = feedback {
        user_text.push_str(&format!("\n{FEEDBACK_HEADER}\n"));
        if fb.chars().count() > FEEDBACK_TAIL_CHARS {
            user_text.push_str(&format!(
                "[feedback truncated to the last {FEEDBACK_TAIL_CHARS} characters]\n"
            ));
            user_text.push_str(tail_chars(fb, FEEDBACK_TAIL_CHARS));
        } else {
            user_text.push_str(fb);
        }
        user_text.push('\n');
    }

    Ok(PromptBundle {
        system_text,
        user_text,
        stage,
    })
}
