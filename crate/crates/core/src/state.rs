//! On-disk state: trajectories, the two memory pools, issue outcomes, and
//! optional prompt logs. Every JSON artifact is written pretty-printed with a
//! trailing newline so that load → save round-trips are byte-identical, and
//! semantic-memory files are replaced atomically (temp file + rename).

use std::collections::HashMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::domain::{AgentRole, RepairTrajectory, SCHEMA_VERSION};
use crate::memory::{Demonstration, EpisodicStore, Insight, Memory, SemanticStore};
use crate::metrics::IssueOutcome;

pub const ROLES: [AgentRole; 3] = [
    AgentRole::TestAgent,
    AgentRole::PatchAgent,
    AgentRole::ReviewAgent,
];

#[derive(Debug, Error)]
pub enum StateError {
    #[error("i/o failure at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt state file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error("memory rejected a record: {0}")]
    Memory(#[from] crate::memory::MemoryError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StateError + '_ {
    move |source| StateError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Root of the engine's persistent state directory.
#[derive(Debug, Clone)]
pub struct StateDir {
    root: PathBuf,
}

impl StateDir {
    /// Opens (creating if needed) the state layout under `root`.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StateError> {
        let root = root.into();
        for sub in ["trajectories", "memory", "outcomes"] {
            let dir = root.join(sub);
            fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        }
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn trajectory_path(&self, issue_id: &str) -> PathBuf {
        self.root.join("trajectories").join(format!("{issue_id}.json"))
    }

    pub fn outcome_path(&self, issue_id: &str) -> PathBuf {
        self.root.join("outcomes").join(format!("{issue_id}.json"))
    }

    pub fn episodic_path(&self, role: AgentRole) -> PathBuf {
        self.root
            .join("memory")
            .join(format!("episodic_{}.jsonl", role.label()))
    }

    pub fn semantic_path(&self, role: AgentRole) -> PathBuf {
        self.root
            .join("memory")
            .join(format!("semantic_{}.json", role.label()))
    }

    pub fn prompt_log_dir(&self, issue_id: &str) -> PathBuf {
        self.root.join("prompt_log").join(issue_id)
    }

    pub fn save_trajectory(&self, traj: &RepairTrajectory) -> Result<(), StateError> {
        write_json(&self.trajectory_path(&traj.issue_id), traj)
    }

    pub fn load_trajectory(&self, issue_id: &str) -> Result<RepairTrajectory, StateError> {
        read_json(&self.trajectory_path(issue_id))
    }

    pub fn save_outcome(&self, outcome: &IssueOutcome) -> Result<(), StateError> {
        write_json(&self.outcome_path(&outcome.issue_id), outcome)
    }

    pub fn load_outcome(&self, issue_id: &str) -> Result<IssueOutcome, StateError> {
        read_json(&self.outcome_path(issue_id))
    }

    /// Every stored outcome, ordered by issue id.
    pub fn load_all_outcomes(&self) -> Result<Vec<IssueOutcome>, StateError> {
        let dir = self.root.join("outcomes");
        let mut paths: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(io_err(&dir))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().map(|e| e == "json").unwrap_or(false))
            .collect();
        paths.sort();
        paths.iter().map(|p| read_json(p)).collect()
    }

    /// Records the post-hoc regression judgement on a stored outcome.
    pub fn set_rsr_flag(&self, issue_id: &str, flag: bool) -> Result<(), StateError> {
        let mut outcome = self.load_outcome(issue_id)?;
        outcome.rsr_flag = Some(flag);
        self.save_outcome(&outcome)
    }

    /// Appends demonstrations to the role's episodic log (one JSON per line).
    pub fn append_demonstrations(
        &self,
        role: AgentRole,
        demos: &[Demonstration],
    ) -> Result<(), StateError> {
        if demos.is_empty() {
            return Ok(());
        }
        let path = self.episodic_path(role);
        let mut file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(io_err(&path))?;
        for d in demos {
            let line = serde_json::to_string(d).map_err(|e| StateError::Corrupt {
                path: path.clone(),
                reason: e.to_string(),
            })?;
            writeln!(file, "{line}").map_err(io_err(&path))?;
        }
        Ok(())
    }

    /// Loads one role's episodic log; a missing file is an empty list.
    pub fn load_demonstrations(&self, role: AgentRole) -> Result<Vec<Demonstration>, StateError> {
        let path = self.episodic_path(role);
        if !path.exists() {
            return Ok(Vec::new());
        }
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let mut out = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let d: Demonstration =
                serde_json::from_str(line).map_err(|e| StateError::Corrupt {
                    path: path.clone(),
                    reason: format!("line {}: {e}", i + 1),
                })?;
            out.push(d);
        }
        Ok(out)
    }

    /// Replaces a role's semantic-memory file atomically. Each file holds
    /// only its own role's slice of the store, so saving one role never
    /// disturbs another's file.
    pub fn save_semantic(&self, role: AgentRole, store: &SemanticStore) -> Result<(), StateError> {
        let file = SemanticFile {
            schema_version: SCHEMA_VERSION,
            capacity: store.capacity(),
            next_id: std::iter::once((role.label().to_string(), store.next_id_counter(role)))
                .collect(),
            insights: store.snapshot(role),
        };
        write_json(&self.semantic_path(role), &file)
    }

    /// Loads a role's semantic-memory file; missing file yields an empty store.
    pub fn load_semantic(
        &self,
        role: AgentRole,
        capacity: usize,
    ) -> Result<SemanticStore, StateError> {
        let path = self.semantic_path(role);
        if !path.exists() {
            return Ok(SemanticStore::new(capacity));
        }
        let file: SemanticFile = read_json(&path)?;
        let mut next_id = HashMap::new();
        for (label, v) in &file.next_id {
            if let Some(role) = role_from_label(label) {
                next_id.insert(role, *v);
            }
        }
        Ok(SemanticStore::from_records(capacity, file.insights, next_id))
    }

    /// Loads the whole dual memory for the engine.
    pub fn load_memory(&self, insight_cap: usize) -> Result<Memory, StateError> {
        let mut demos = Vec::new();
        for role in ROLES {
            demos.extend(self.load_demonstrations(role)?);
        }
        let episodic = EpisodicStore::from_records(demos)?;

        // Each role's insights live in their own file; merge into one store.
        let mut insights = Vec::new();
        let mut next_id = HashMap::new();
        for role in ROLES {
            let path = self.semantic_path(role);
            if !path.exists() {
                continue;
            }
            let file: SemanticFile = read_json(&path)?;
            insights.extend(file.insights.into_iter().filter(|i| i.role == role));
            if let Some(v) = file.next_id.get(role.label()) {
                next_id.insert(role, *v);
            }
        }
        let semantic = SemanticStore::from_records(insight_cap, insights, next_id);
        Ok(Memory { episodic, semantic })
    }

    /// Persists both memory pools. The episodic log is rewritten from the
    /// store (it is the load-time source of truth); semantic files are
    /// replaced atomically.
    pub fn save_memory(&self, memory: &Memory) -> Result<(), StateError> {
        for role in ROLES {
            let demos: Vec<Demonstration> = memory.episodic.iter(role).cloned().collect();
            let path = self.episodic_path(role);
            let mut text = String::new();
            for d in &demos {
                let line = serde_json::to_string(d).map_err(|e| StateError::Corrupt {
                    path: path.clone(),
                    reason: e.to_string(),
                })?;
                text.push_str(&line);
                text.push('\n');
            }
            atomic_write(&path, text.as_bytes())?;
            self.save_semantic(role, &memory.semantic)?;
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct SemanticFile {
    schema_version: u32,
    capacity: usize,
    /// Role label → next fresh insight ordinal.
    next_id: std::collections::BTreeMap<String, u64>,
    insights: Vec<Insight>,
}

pub fn role_from_label(label: &str) -> Option<AgentRole> {
    ROLES.iter().copied().find(|r| r.label() == label)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), StateError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| StateError::Corrupt {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    text.push('\n');
    atomic_write(path, text.as_bytes())
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, StateError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| StateError::Corrupt {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Writes via a sibling temp file and rename so readers never observe a
/// half-written file.
fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), StateError> {
    let parent = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(parent).map_err(io_err(parent))?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// Recursively zeroes volatile fields (timestamps and durations) in a JSON
/// tree so that two runs of the same deterministic session compare equal.
pub fn normalize_volatile_fields(value: &mut Value) {
    const VOLATILE_TIMES: [&str; 3] = ["created_at", "last_used_at", "updated_at"];
    const VOLATILE_NUMBERS: [&str; 3] = ["duration_ms", "wall_time_ms", "latency_ms"];
    match value {
        Value::Object(map) => {
            for (k, v) in map.iter_mut() {
                if VOLATILE_TIMES.contains(&k.as_str()) && v.is_string() {
                    *v = Value::String("1970-01-01T00:00:00Z".to_string());
                } else if VOLATILE_NUMBERS.contains(&k.as_str()) && v.is_number() {
                    *v = Value::from(0);
                } else {
                    normalize_volatile_fields(v);
                }
            }
        }
        Value::Array(items) => {
            for v in items {
                normalize_volatile_fields(v);
            }
        }
        _ => {}
    }
}
