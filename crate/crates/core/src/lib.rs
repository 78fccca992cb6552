//! Automated program repair driven by cooperating model roles — a test agent
//! that writes reproduction scripts, a patch agent that localizes and fixes,
//! and a review agent that picks the final patch — all grounded in sandboxed
//! execution feedback. Past repairs feed two memory pools (worked examples
//! and distilled insights) that condition later prompts.

pub mod config;
pub mod diff;
pub mod domain;
pub mod llm;
pub mod localization;
pub mod memory;
pub mod metrics;
pub mod pipeline;
pub mod prompting;
pub mod retrieval;
pub mod sandbox;
pub mod state;

pub use config::{EngineConfig, IssueFile, LanguageProfile, SelectionStrategy};
pub use domain::{AgentRole, FinalStatus, Issue, RepairTrajectory, Stage};
pub use llm::{Backend, HttpBackend, HttpConfig, ReplayBackend};
pub use memory::Memory;
pub use metrics::{compute_stats, IssueOutcome, StatsReport};
pub use pipeline::{Engine, PipelineError};
pub use prompting::Phase;
pub use state::StateDir;
