//! Scripted backend for deterministic tests: answers come from a JSON file
//! mapping `"<role>/<seq>"` to a list of sample strings, where `seq` is a
//! 1-based per-role call counter.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Mutex;

use crate::domain::AgentRole;

use super::{estimate_tokens, Backend, ChatRequest, ChatResponse, LlmError, TokenUsage};

pub struct ReplayBackend {
    script: HashMap<String, Vec<String>>,
    counters: Mutex<HashMap<AgentRole, u64>>,
}

impl ReplayBackend {
    pub fn new(script: HashMap<String, Vec<String>>) -> Self {
        Self {
            script,
            counters: Mutex::new(HashMap::new()),
        }
    }

    pub fn from_file(path: &Path) -> Result<Self, LlmError> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| LlmError::Failure(format!("read {}: {e}", path.display())))?;
        let script: HashMap<String, Vec<String>> = serde_json::from_str(&raw)
            .map_err(|e| LlmError::Failure(format!("parse {}: {e}", path.display())))?;
        Ok(Self::new(script))
    }

    /// Number of script entries never consumed (0 when a session used the
    /// whole script).
    pub fn remaining(&self) -> usize {
        let counters = self.counters.lock().unwrap();
        self.script
            .keys()
            .filter(|key| {
                let Some((role, seq)) = key.split_once('/') else {
                    return true;
                };
                let Ok(seq) = seq.parse::<u64>() else {
                    return true;
                };
                let used = [
                    AgentRole::TestAgent,
                    AgentRole::PatchAgent,
                    AgentRole::ReviewAgent,
                ]
                .iter()
                .find(|r| r.label() == role)
                .and_then(|r| counters.get(r))
                .copied()
                .unwrap_or(0);
                seq > used
            })
            .count()
    }
}

impl Backend for ReplayBackend {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, LlmError> {
        let seq = {
            let mut counters = self.counters.lock().unwrap();
            let c = counters.entry(req.role_label).or_insert(0);
            *c += 1;
            *c
        };
        let key = format!("{}/{seq}", req.role_label);
        let samples = self
            .script
            .get(&key)
            .cloned()
            .ok_or(LlmError::ReplayExhausted(key))?;
        let output: u64 = samples.iter().map(|s| estimate_tokens(s)).sum();
        Ok(ChatResponse {
            samples,
            token_usage: TokenUsage {
                input: estimate_tokens(&req.system_text) + estimate_tokens(&req.user_text),
                output,
            },
            latency_ms: 0,
        })
    }

    fn is_deterministic(&self) -> bool {
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn script(entries: &[(&str, &[&str])]) -> HashMap<String, Vec<String>> {
        entries
            .iter()
            .map(|(k, v)| (k.to_string(), v.iter().map(|s| s.to_string()).collect()))
            .collect()
    }

    fn req(role: AgentRole, n: u32) -> ChatRequest {
        ChatRequest::new(role, "sys", "user", 0.5, n)
    }

    #[test]
    fn scripted_single_answer() {
        let backend = ReplayBackend::new(script(&[("test_agent/1", &["hello"])]));
        let resp = backend.complete(&req(AgentRole::TestAgent, 1)).unwrap();
        assert_eq!(resp.samples, ["hello"]);
        assert_eq!(resp.latency_ms, 0);
    }

    #[test]
    fn exhaustion_is_an_error() {
        let backend = ReplayBackend::new(script(&[("test_agent/1", &["a"])]));
        backend.complete(&req(AgentRole::TestAgent, 1)).unwrap();
        let err = backend.complete(&req(AgentRole::TestAgent, 1)).unwrap_err();
        assert!(matches!(err, LlmError::ReplayExhausted(k) if k == "test_agent/2"));
    }

    #[test]
    fn multi_sample_consumed_as_one_entry() {
        let backend = ReplayBackend::new(script(&[("patch_agent/1", &["a", "b", "c", "d"])]));
        let resp = backend.complete(&req(AgentRole::PatchAgent, 4)).unwrap();
        assert_eq!(resp.samples.len(), 4);
        assert_eq!(backend.remaining(), 0);
    }

    #[test]
    fn roles_advance_independently() {
        let backend = ReplayBackend::new(script(&[
            ("test_agent/1", &["t1"]),
            ("patch_agent/1", &["p1"]),
        ]));
        let t = backend.complete(&req(AgentRole::TestAgent, 1)).unwrap();
        let p = backend.complete(&req(AgentRole::PatchAgent, 1)).unwrap();
        assert_eq!(t.samples, ["t1"]);
        assert_eq!(p.samples, ["p1"]);
    }

    #[test]
    fn identical_scripts_replay_identically() {
        let s = script(&[("test_agent/1", &["same"]), ("test_agent/2", &["again"])]);
        let a = ReplayBackend::new(s.clone());
        let b = ReplayBackend::new(s);
        for _ in 0..2 {
            let ra = a.complete(&req(AgentRole::TestAgent, 1)).unwrap();
            let rb = b.complete(&req(AgentRole::TestAgent, 1)).unwrap();
            assert_eq!(ra, rb);
        }
    }
}
