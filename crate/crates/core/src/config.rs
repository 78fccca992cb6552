//! Engine configuration: loop budgets, sampling temperatures, selection
//! strategy, language profiles for target repositories, and issue input files.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{Issue, Stage};
use crate::prompting::Phase;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("io error for {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionStrategy {
    ReviewAgent,
    MostTestsPassed,
}

/// Default sampling temperature per stage. Patch candidate sampling runs hot
/// for diversity; review runs cold for a stable pick.
pub fn default_temperature(stage: Stage) -> f64 {
    match stage {
        Stage::PatchGen | Stage::PatchRefine => 0.8,
        Stage::Review => 0.0,
        _ => 0.2,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    /// Reproduction-script attempts per issue.
    pub z_test: u32,
    /// Patch-generation iterations per issue.
    pub z_patch: u32,
    /// Candidate patches sampled per iteration.
    pub patches_per_iter: u32,
    pub n_validation_tests: u32,
    pub n_augmented_patches: u32,
    /// Demonstrations injected per prompt.
    pub k_demos: usize,
    pub insight_cap: usize,
    pub selection_strategy: SelectionStrategy,
    pub phase: Phase,
    /// Coarse localization keeps at most this many files.
    pub m_coarse: usize,
    /// Refined localization keeps at most this many files.
    pub n_refine: usize,
    pub script_timeout_secs: u64,
    pub max_output_tokens: u32,
    /// Write every composed prompt under `<state_dir>/prompt_log/<issue>/`.
    pub log_prompts: bool,
    /// Per-stage temperature overrides; anything absent uses the default.
    pub temperatures: BTreeMap<Stage, f64>,
    pub prices: PriceConfig,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            z_test: 3,
            z_patch: 3,
            patches_per_iter: 4,
            n_validation_tests: 3,
            n_augmented_patches: 4,
            k_demos: 5,
            insight_cap: 15,
            selection_strategy: SelectionStrategy::ReviewAgent,
            phase: Phase::Inference,
            m_coarse: 8,
            n_refine: 3,
            script_timeout_secs: 120,
            max_output_tokens: 4096,
            log_prompts: false,
            temperatures: BTreeMap::new(),
            prices: PriceConfig::default(),
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let counts = [
            ("z_test", self.z_test),
            ("z_patch", self.z_patch),
            ("patches_per_iter", self.patches_per_iter),
            ("n_validation_tests", self.n_validation_tests),
            ("n_augmented_patches", self.n_augmented_patches),
        ];
        for (name, value) in counts {
            if value < 1 {
                return Err(ConfigError::Invalid(format!("{name} must be >= 1")));
            }
        }
        if self.k_demos < 1 || self.insight_cap < 1 {
            return Err(ConfigError::Invalid(
                "k_demos and insight_cap must be >= 1".into(),
            ));
        }
        if self.m_coarse <= self.n_refine {
            return Err(ConfigError::Invalid(format!(
                "m_coarse ({}) must exceed n_refine ({})",
                self.m_coarse, self.n_refine
            )));
        }
        if self.n_refine < 1 {
            return Err(ConfigError::Invalid("n_refine must be >= 1".into()));
        }
        Ok(())
    }

    pub fn temperature(&self, stage: Stage) -> f64 {
        self.temperatures
            .get(&stage)
            .copied()
            .unwrap_or_else(|| default_temperature(stage))
    }
}

/// Provider pricing used for cost reporting, in currency units per million
/// tokens. Zero (the default) reports zero cost.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PriceConfig {
    pub input_per_million: f64,
    pub output_per_million: f64,
}

impl PriceConfig {
    pub fn cost(&self, input_tokens: u64, output_tokens: u64) -> f64 {
        (input_tokens as f64 * self.input_per_million
            + output_tokens as f64 * self.output_per_million)
            / 1_000_000.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeclKind {
    Class,
    Function,
    Method,
    Constant,
}

/// A line-match rule for skeleton extraction; capture group 1 is the name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeclPattern {
    pub kind: DeclKind,
    pub pattern: String,
}

/// How to treat one target language: which files are source, how scripts run,
/// and how declarations look.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageProfile {
    pub name: String,
    /// Source-file extensions included in repository scans.
    pub extensions: Vec<String>,
    /// Extension given to generated test scripts.
    pub script_extension: String,
    /// Interpreter command the scripts run under, e.g. `["python3"]`.
    pub runner: Vec<String>,
    /// Extra environment for script runs (scripts live outside the repo, so
    /// e.g. Python needs `PYTHONPATH=.`).
    pub runner_env: BTreeMap<String, String>,
    /// Directory names excluded from scans.
    pub ignore_dirs: Vec<String>,
    pub declarations: Vec<DeclPattern>,
}

pub fn builtin_python_profile() -> LanguageProfile {
    LanguageProfile {
        name: "python".into(),
        extensions: vec!["py".into()],
        script_extension: "py".into(),
        runner: vec!["python3".into()],
        runner_env: BTreeMap::from([
            ("PYTHONPATH".into(), ".".into()),
            ("PYTHONDONTWRITEBYTECODE".into(), "1".into()),
        ]),
        ignore_dirs: vec![
            ".git".into(),
            "__pycache__".into(),
            ".venv".into(),
            "venv".into(),
            "node_modules".into(),
            "target".into(),
            "build".into(),
            "dist".into(),
            ".tox".into(),
        ],
        declarations: vec![
            DeclPattern {
                kind: DeclKind::Class,
                pattern: r"^class\s+([A-Za-z_]\w*)".into(),
            },
            DeclPattern {
                kind: DeclKind::Function,
                pattern: r"^(?:async\s+)?def\s+([A-Za-z_]\w*)".into(),
            },
            DeclPattern {
                kind: DeclKind::Method,
                pattern: r"^\s+(?:async\s+)?def\s+([A-Za-z_]\w*)".into(),
            },
            DeclPattern {
                kind: DeclKind::Constant,
                pattern: r"^([A-Z][A-Z0-9_]*)\s*=".into(),
            },
        ],
    }
}

/// Named profiles available to issues; always contains the python builtin.
pub fn builtin_profiles() -> HashMap<String, LanguageProfile> {
    let python = builtin_python_profile();
    HashMap::from([(python.name.clone(), python)])
}

/// On-disk issue description: `{id, title, body, repo_root}` plus optional
/// runner/profile overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IssueFile {
    pub id: String,
    pub title: String,
    pub body: String,
    pub repo_root: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub runner: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub language_profile: Option<String>,
}

impl IssueFile {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let raw = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&raw)
            .map_err(|e| ConfigError::Invalid(format!("{}: {e}", path.display())))
    }

    /// Resolves profile name and runner override into a concrete issue +
    /// profile pair. Relative `repo_root` is resolved against `base_dir`.
    pub fn resolve(
        self,
        base_dir: &Path,
        profiles: &HashMap<String, LanguageProfile>,
    ) -> Result<(Issue, LanguageProfile), ConfigError> {
        let name = self.language_profile.as_deref().unwrap_or("python");
        let mut profile = profiles
            .get(name)
            .cloned()
            .ok_or_else(|| ConfigError::Invalid(format!("unknown language profile {name}")))?;
        if let Some(runner) = self.runner {
            if runner.is_empty() {
                return Err(ConfigError::Invalid("runner override is empty".into()));
            }
            profile.runner = runner;
        }
        let repo_root = if self.repo_root.is_absolute() {
            self.repo_root
        } else {
            base_dir.join(self.repo_root)
        };
        let issue = Issue::new(self.id, self.title, self.body, repo_root);
        issue
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok((issue, profile))
    }
}
