//! Model-call abstraction: a synchronous [`Backend`] trait with an HTTP
//! chat-completion implementation and a deterministic replay implementation,
//! plus parsers that turn free-text answers into structured artifacts.

mod http;
mod parse;
mod replay;

pub use http::{HttpBackend, HttpConfig};
pub use parse::{parse_fenced_code, parse_insight_ops, parse_unified_diff, ParseError};
pub use replay::ReplayBackend;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::AgentRole;

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("llm call failed: {0}")]
    Failure(String),
    #[error("replay script exhausted at key {0}")]
    ReplayExhausted(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub role_label: AgentRole,
    pub system_text: String,
    pub user_text: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub n_samples: u32,
}

impl ChatRequest {
    /// Panics if asked for multiple samples at temperature 0 (they would all
    /// be identical) or for zero samples.
    pub fn new(
        role_label: AgentRole,
        system_text: impl Into<String>,
        user_text: impl Into<String>,
        temperature: f64,
        n_samples: u32,
    ) -> Self {
        assert!(n_samples >= 1, "n_samples must be >= 1");
        assert!(
            n_samples == 1 || temperature > 0.0,
            "multi-sample requests require temperature > 0"
        );
        assert!((0.0..=2.0).contains(&temperature), "temperature out of range");
        Self {
            role_label,
            system_text: system_text.into(),
            user_text: user_text.into(),
            temperature,
            max_output_tokens: 4096,
            n_samples,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TokenUsage {
    pub input: u64,
    pub output: u64,
}

impl TokenUsage {
    pub fn add(&mut self, other: TokenUsage) {
        self.input += other.input;
        self.output += other.output;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub samples: Vec<String>,
    pub token_usage: TokenUsage,
    pub latency_ms: u64,
}

/// A chat-completion provider, shareable across batch workers; the replay
/// backend serializes calls internally.
pub trait Backend: Send + Sync {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, LlmError>;

    /// True when calls are scripted and the engine must run single-threaded
    /// to keep the call sequence stable.
    fn is_deterministic(&self) -> bool {
        false
    }
}

/// Crude token estimate (≈4 chars per token) for providers that do not
/// report usage, and for the replay backend.
pub fn estimate_tokens(text: &str) -> u64 {
    (text.len() as u64 + 3) / 4
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn estimate_rounds_up() {
        assert_eq!(estimate_tokens(""), 0);
        assert_eq!(estimate_tokens("abc"), 1);
        assert_eq!(estimate_tokens("abcd"), 1);
        assert_eq!(estimate_tokens("abcde"), 2);
    }

    #[test]
    #[should_panic(expected = "multi-sample")]
    fn multi_sample_at_zero_temperature_rejected() {
        ChatRequest::new(AgentRole::PatchAgent, "s", "u", 0.0, 4);
    }

    #[test]
    fn single_sample_at_zero_temperature_ok() {
        let req = ChatRequest::new(AgentRole::ReviewAgent, "s", "u", 0.0, 1);
        assert_eq!(req.n_samples, 1);
    }
}
