//! Hierarchical fault localization: coarse file selection over the repository
//! tree, refinement over file skeletons, then line-region selection over full
//! contents — each step narrowing the previous one, with reproduction
//! feedback woven into every prompt. Localization never reads memory.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{DeclKind, LanguageProfile};
use crate::domain::{AgentRole, Issue, Stage};
use crate::llm::{Backend, ChatRequest, LlmError, TokenUsage};
use crate::prompting::{compose, Phase, PromptBundle};
use crate::sandbox::{SandboxError, Workspace};

#[derive(Debug, Error)]
pub enum LocalizationError {
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Io(#[from] SandboxError),
    #[error("model selected no valid files")]
    EmptySelection,
    #[error("model named no valid line regions")]
    NoRegions,
    #[error(transparent)]
    Prompt(#[from] crate::prompting::PromptError),
}

/// Source files of a workspace plus an indented tree rendering for prompts.
#[derive(Debug, Clone, PartialEq)]
pub struct RepoStructure {
    pub files: Vec<String>,
    pub tree_rendering: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Declaration {
    pub kind: DeclKind,
    pub name: String,
    pub start_line: usize,
    pub end_line: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileSkeleton {
    pub path: String,
    pub declarations: Vec<Declaration>,
}

impl FileSkeleton {
    /// Prompt rendering: one declaration per line with its span.
    pub fn render(&self) -> String {
        let mut out = format!("{}:\n", self.path);
        if self.declarations.is_empty() {
            out.push_str("  (no declarations found)\n");
        }
        for d in &self.declarations {
            let kind = match d.kind {
                DeclKind::Class => "class",
                DeclKind::Function => "function",
                DeclKind::Method => "method",
                DeclKind::Constant => "constant",
            };
            out.push_str(&format!(
                "  {kind} {} (lines {}-{})\n",
                d.name, d.start_line, d.end_line
            ));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub path: String,
    pub start_line: usize,
    pub end_line: usize,
    pub rationale: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationReport {
    pub coarse_files: Vec<String>,
    pub refined_files: Vec<String>,
    pub regions: Vec<Region>,
}

impl LocalizationReport {
    /// Checks refined ⊆ coarse and region paths ⊆ refined.
    pub fn check_invariants(&self) -> Result<(), String> {
        for f in &self.refined_files {
            if !self.coarse_files.contains(f) {
                return Err(format!("refined file {f} not in coarse set"));
            }
        }
        for r in &self.regions {
            if !self.refined_files.contains(&r.path) {
                return Err(format!("region path {} not in refined set", r.path));
            }
            if r.start_line == 0 || r.start_line > r.end_line {
                return Err(format!("bad span {}..{}", r.start_line, r.end_line));
            }
        }
        Ok(())
    }
}

/// One recorded model call, handed back to the pipeline for trajectory
/// bookkeeping.
#[derive(Debug, Clone)]
pub struct LlmExchange {
    pub stage: Stage,
    pub bundle: PromptBundle,
    pub answer: String,
    pub usage: TokenUsage,
}

/// Outcome of a file-selection step.
#[derive(Debug, Clone)]
pub struct FileSelection {
    pub files: Vec<String>,
    /// Paths the model named that were rejected (not in the allowed set).
    pub dropped: Vec<String>,
    /// Absent when the step was decided without a model call.
    pub exchange: Option<LlmExchange>,
}

/// Deterministic listing of the workspace's source files (profile extensions
/// only, ignore dirs excluded, lexicographic order).
pub fn scan_repo(
    ws: &Workspace,
    profile: &LanguageProfile,
) -> Result<RepoStructure, LocalizationError> {
    let files: Vec<String> = ws
        .list_files()?
        .into_iter()
        .filter(|p| {
            p.rsplit('.')
                .next()
                .map(|ext| profile.extensions.iter().any(|e| e == ext))
                .unwrap_or(false)
        })
        .collect();
    let tree_rendering = render_tree(&files);
    Ok(RepoStructure {
        files,
        tree_rendering,
    })
}

fn render_tree(files: &[String]) -> String {
    let mut out = String::new();
    let mut seen_dirs: Vec<String> = Vec::new();
    for path in files {
        let parts: Vec<&str> = path.split('/').collect();
        for depth in 0..parts.len() - 1 {
            let dir = parts[..=depth].join("/");
            if !seen_dirs.contains(&dir) {
                out.push_str(&format!("{}{}/\n", "  ".repeat(depth), parts[depth]));
                seen_dirs.push(dir);
            }
        }
        out.push_str(&format!(
            "{}{}\n",
            "  ".repeat(parts.len() - 1),
            parts[parts.len() - 1]
        ));
    }
    out
}

fn indent_of(line: &str) -> usize {
    line.len() - line.trim_start().len()
}

/// Line-based declaration scan driven by the profile's patterns. A
/// declaration's span runs until the next declaration at the same or an outer
/// indentation level; constants are single-line.
pub fn extract_skeleton(path: &str, content: &str, profile: &LanguageProfile) -> FileSkeleton {
    let patterns: Vec<(DeclKind, Regex)> = profile
        .declarations
        .iter()
        .filter_map(|d| Regex::new(&d.pattern).ok().map(|re| (d.kind, re)))
        .collect();
    let lines: Vec<&str> = content.lines().collect();

    struct Found {
        kind: DeclKind,
        name: String,
        line: usize,
        indent: usize,
    }
    let mut found = Vec::new();
    for (i, line) in lines.iter().enumerate() {
        for (kind, re) in &patterns {
            if let Some(caps) = re.captures(line) {
                if let Some(name) = caps.get(1) {
                    found.push(Found {
                        kind: *kind,
                        name: name.as_str().to_string(),
                        line: i + 1,
                        indent: indent_of(line),
                    });
                    break;
                }
            }
        }
    }

    let declarations = found
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let end_line = if f.kind == DeclKind::Constant {
                f.line
            } else {
                found[i + 1..]
                    .iter()
                    .find(|next| next.indent <= f.indent)
                    .map(|next| next.line - 1)
                    .unwrap_or(lines.len())
            };
            Declaration {
                kind: f.kind,
                name: f.name.clone(),
                start_line: f.line,
                end_line: end_line.max(f.line),
            }
        })
        .collect();

    FileSkeleton {
        path: path.to_string(),
        declarations,
    }
}

fn call(
    stage: Stage,
    phase: Phase,
    context: &str,
    feedback: Option<&str>,
    backend: &dyn Backend,
    temperature: f64,
) -> Result<LlmExchange, LocalizationError> {
    let bundle = compose(stage, phase, &[], &[], context, feedback)?;
    let req = ChatRequest::new(
        AgentRole::PatchAgent,
        &bundle.system_text,
        &bundle.user_text,
        temperature,
        1,
    );
    let resp = backend.complete(&req)?;
    Ok(LlmExchange {
        stage,
        answer: resp.samples.into_iter().next().unwrap_or_default(),
        usage: resp.token_usage,
        bundle,
    })
}

/// Lines of the answer's last fenced block, or of the whole answer when it
/// has no fences.
fn answer_lines(answer: &str) -> Vec<String> {
    let body = crate::llm::parse_fenced_code(answer).unwrap_or_else(|| answer.to_string());
    body.lines()
        .map(|l| l.trim().trim_matches('`').to_string())
        .filter(|l| !l.is_empty())
        .collect()
}

/// Stage one: pick at most `m` suspicious files from the repository tree.
/// Any structure path literally present in the reproduction feedback (stack
/// traces name files) is force-included at the front.
pub fn localize_files_coarse(
    structure: &RepoStructure,
    issue: &Issue,
    repro_feedback: Option<&str>,
    backend: &dyn Backend,
    phase: Phase,
    m: usize,
    temperature: f64,
) -> Result<FileSelection, LocalizationError> {
    let context = format!(
        "Candidate limit: at most {m} files.\n\n### Repository tree\n{}\n### Issue\n{}",
        structure.tree_rendering,
        issue.context_text()
    );
    let exchange = call(
        Stage::FileLocalizeCoarse,
        phase,
        &context,
        repro_feedback,
        backend,
        temperature,
    )?;

    let mut picked: Vec<String> = Vec::new();
    let mut dropped = Vec::new();
    for line in answer_lines(&exchange.answer) {
        if structure.files.contains(&line) {
            if !picked.contains(&line) {
                picked.push(line);
            }
        } else {
            dropped.push(line);
        }
    }

    let mut files: Vec<String> = Vec::new();
    if let Some(feedback) = repro_feedback {
        for path in &structure.files {
            if feedback.contains(path.as_str()) {
                files.push(path.clone());
            }
        }
    }
    for p in picked {
        if !files.contains(&p) {
            files.push(p);
        }
    }
    files.truncate(m);

    if files.is_empty() {
        return Err(LocalizationError::EmptySelection);
    }
    Ok(FileSelection {
        files,
        dropped,
        exchange: Some(exchange),
    })
}

/// Stage two: shrink the coarse set to at most `n` files using skeletons.
/// A singleton coarse set short-circuits without a model call.
pub fn localize_files_refine(
    coarse: &[String],
    skeletons: &[FileSkeleton],
    issue: &Issue,
    repro_feedback: Option<&str>,
    backend: &dyn Backend,
    phase: Phase,
    n: usize,
    temperature: f64,
) -> Result<FileSelection, LocalizationError> {
    assert!(!coarse.is_empty(), "coarse set must be non-empty");
    if coarse.len() == 1 {
        return Ok(FileSelection {
            files: coarse.to_vec(),
            dropped: Vec::new(),
            exchange: None,
        });
    }

    let mut context = format!("Candidate limit: at most {n} files.\n\n### File skeletons\n");
    for sk in skeletons {
        context.push_str(&sk.render());
        context.push('\n');
    }
    context.push_str(&format!("### Issue\n{}", issue.context_text()));

    let exchange = call(
        Stage::FileLocalizeRefine,
        phase,
        &context,
        repro_feedback,
        backend,
        temperature,
    )?;

    let mut files = Vec::new();
    let mut dropped = Vec::new();
    for line in answer_lines(&exchange.answer) {
        if coarse.contains(&line) {
            if !files.contains(&line) {
                files.push(line);
            }
        } else {
            dropped.push(line);
        }
    }
    files.truncate(n);
    if files.is_empty() {
        return Err(LocalizationError::EmptySelection);
    }
    Ok(FileSelection {
        files,
        dropped,
        exchange: Some(exchange),
    })
}

/// Prompt rendering of file contents with 1-based line numbers.
pub fn number_lines(content: &str) -> String {
    content
        .lines()
        .enumerate()
        .map(|(i, l)| format!("{:>5} | {l}\n", i + 1))
        .collect()
}

fn region_line_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^(.+?):(\d+)-(\d+)(?:\s+(.*))?$").expect("static regex"))
}

/// Outcome of region selection.
#[derive(Debug, Clone)]
pub struct RegionSelection {
    pub regions: Vec<Region>,
    pub exchange: Option<LlmExchange>,
}

/// Stage three: pick line regions inside the refined files. Spans are clamped
/// to file bounds; an answer with no usable region is [`LocalizationError::NoRegions`]
/// (callers fall back to whole-file regions).
pub fn localize_regions(
    refined: &[String],
    file_contents: &BTreeMap<String, String>,
    issue: &Issue,
    repro_feedback: Option<&str>,
    backend: &dyn Backend,
    phase: Phase,
    temperature: f64,
) -> Result<RegionSelection, LocalizationError> {
    assert!(!refined.is_empty(), "refined set must be non-empty");
    let mut context = String::from("### Suspicious files (numbered)\n");
    for path in refined {
        let content = file_contents.get(path).map(String::as_str).unwrap_or("");
        context.push_str(&format!("#### {path}\n{}\n", number_lines(content)));
    }
    context.push_str(&format!("### Issue\n{}", issue.context_text()));

    let exchange = call(
        Stage::LineLocalize,
        phase,
        &context,
        repro_feedback,
        backend,
        temperature,
    )?;

    let mut regions = Vec::new();
    for line in answer_lines(&exchange.answer) {
        let Some(caps) = region_line_re().captures(&line) else {
            continue;
        };
        let path = caps[1].trim().to_string();
        if !refined.contains(&path) {
            continue;
        }
        let line_count = file_contents
            .get(&path)
            .map(|c| c.lines().count())
            .unwrap_or(0);
        if line_count == 0 {
            continue;
        }
        let start: usize = caps[2].parse().unwrap_or(1);
        let end: usize = caps[3].parse().unwrap_or(start);
        let start = start.clamp(1, line_count);
        let end = end.clamp(1, line_count);
        if start > end {
            continue;
        }
        regions.push(Region {
            path,
            start_line: start,
            end_line: end,
            rationale: caps.get(4).map(|m| m.as_str().trim().to_string()).unwrap_or_default(),
        });
    }

    if regions.is_empty() {
        return Err(LocalizationError::NoRegions);
    }
    Ok(RegionSelection {
        regions,
        exchange: Some(exchange),
    })
}

/// One whole-file region per refined file — the fallback when region
/// selection yields nothing usable.
pub fn whole_file_regions(
    refined: &[String],
    file_contents: &BTreeMap<String, String>,
) -> Vec<Region> {
    refined
        .iter()
        .map(|path| {
            let line_count = file_contents
                .get(path)
                .map(|c| c.lines().count().max(1))
                .unwrap_or(1);
            Region {
                path: path.clone(),
                start_line: 1,
                end_line: line_count,
                rationale: "whole file (region fallback)".into(),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::builtin_python_profile;
    use crate::llm::ChatResponse;
    use std::sync::Mutex;

    struct Scripted {
        answers: Mutex<Vec<String>>,
        calls: Mutex<u32>,
    }

    impl Scripted {
        fn new(answers: &[&str]) -> Self {
            Self {
                answers: Mutex::new(answers.iter().map(|s| s.to_string()).collect()),
                calls: Mutex::new(0),
            }
        }

        fn calls(&self) -> u32 {
            *self.calls.lock().unwrap()
        }
    }

    impl Backend for Scripted {
        fn complete(&self, _req: &ChatRequest) -> Result<ChatResponse, LlmError> {
            *self.calls.lock().unwrap() += 1;
            let mut answers = self.answers.lock().unwrap();
            if answers.is_empty() {
                return Err(LlmError::Failure("script exhausted".into()));
            }
            Ok(ChatResponse {
                samples: vec![answers.remove(0)],
                token_usage: TokenUsage::default(),
                latency_ms: 0,
            })
        }
    }

    fn issue() -> Issue {
        Issue::new("i", "crash on close", "it crashes", std::env::temp_dir())
    }

    fn structure(paths: &[&str]) -> RepoStructure {
        let files: Vec<String> = paths.iter().map(|s| s.to_string()).collect();
        let tree_rendering = render_tree(&files);
        RepoStructure {
            files,
            tree_rendering,
        }
    }

    const PY_SAMPLE: &str = "\
GREETING = \"hi\"

class Calc:
    def add(self, a, b):
        return a + b

    def sub(self, a, b):
        return a - b

def main():
    print(Calc().add(1, 2))
";

    #[test]
    fn skeleton_spans_are_hand_verified() {
        let sk = extract_skeleton("calc.py", PY_SAMPLE, &builtin_python_profile());
        let got: Vec<(DeclKind, &str, usize, usize)> = sk
            .declarations
            .iter()
            .map(|d| (d.kind, d.name.as_str(), d.start_line, d.end_line))
            .collect();
        assert_eq!(
            got,
            vec![
                (DeclKind::Constant, "GREETING", 1, 1),
                (DeclKind::Class, "Calc", 3, 9),
                (DeclKind::Method, "add", 4, 6),
                (DeclKind::Method, "sub", 7, 9),
                (DeclKind::Function, "main", 10, 11),
            ]
        );
    }

    #[test]
    fn skeleton_of_empty_and_binary_content() {
        let profile = builtin_python_profile();
        assert!(extract_skeleton("e.py", "", &profile).declarations.is_empty());
        let binaryish = "\u{0}\u{1}\u{2}garbage\u{7f}";
        assert!(extract_skeleton("b.py", binaryish, &profile).declarations.is_empty());
    }

    #[test]
    fn tree_rendering_indents_directories() {
        let s = structure(&["pkg/io.py", "pkg/net/tcp.py", "top.py"]);
        assert_eq!(
            s.tree_rendering,
            "pkg/\n  io.py\n  net/\n    tcp.py\ntop.py\n"
        );
    }

    #[test]
    fn coarse_filters_bogus_paths() {
        let s = structure(&["a.py", "b.py", "c.py"]);
        let backend = Scripted::new(&["```\na.py\nnot/real.py\nc.py\n```"]);
        let sel = localize_files_coarse(&s, &issue(), None, &backend, Phase::Initial, 8, 0.2).unwrap();
        assert_eq!(sel.files, vec!["a.py", "c.py"]);
        assert_eq!(sel.dropped, vec!["not/real.py"]);
    }

    #[test]
    fn coarse_force_includes_stack_trace_path() {
        let s = structure(&["pkg/io.py", "pkg/other.py"]);
        let backend = Scripted::new(&["```\npkg/other.py\n```"]);
        let fb = "Traceback...\n  File \"<workspace>/pkg/io.py\", line 3\nBoom";
        let sel =
            localize_files_coarse(&s, &issue(), Some(fb), &backend, Phase::Initial, 8, 0.2).unwrap();
        assert_eq!(sel.files, vec!["pkg/io.py", "pkg/other.py"]);
    }

    #[test]
    fn coarse_all_bogus_is_empty_selection() {
        let s = structure(&["a.py"]);
        let backend = Scripted::new(&["```\nzz.py\n```"]);
        let err =
            localize_files_coarse(&s, &issue(), None, &backend, Phase::Initial, 8, 0.2).unwrap_err();
        assert!(matches!(err, LocalizationError::EmptySelection));
    }

    #[test]
    fn coarse_respects_the_limit() {
        let s = structure(&["a.py", "b.py", "c.py", "d.py"]);
        let backend = Scripted::new(&["```\na.py\nb.py\nc.py\nd.py\n```"]);
        let sel = localize_files_coarse(&s, &issue(), None, &backend, Phase::Initial, 2, 0.2).unwrap();
        assert_eq!(sel.files.len(), 2);
    }

    #[test]
    fn refine_keeps_subset_and_drops_strays() {
        let coarse: Vec<String> = ["a.py", "b.py", "c.py", "d.py", "e.py"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let sks: Vec<FileSkeleton> = coarse
            .iter()
            .map(|p| FileSkeleton {
                path: p.clone(),
                declarations: vec![],
            })
            .collect();
        let backend = Scripted::new(&["```\nb.py\nzz.py\nd.py\ne.py\n```"]);
        let sel = localize_files_refine(
            &coarse, &sks, &issue(), None, &backend, Phase::Initial, 3, 0.2,
        )
        .unwrap();
        assert_eq!(sel.files, vec!["b.py", "d.py", "e.py"]);
        assert_eq!(sel.dropped, vec!["zz.py"]);
    }

    #[test]
    fn refine_singleton_skips_the_model() {
        let coarse = vec!["only.py".to_string()];
        let backend = Scripted::new(&[]);
        let sel = localize_files_refine(
            &coarse, &[], &issue(), None, &backend, Phase::Initial, 3, 0.2,
        )
        .unwrap();
        assert_eq!(sel.files, coarse);
        assert!(sel.exchange.is_none());
        assert_eq!(backend.calls(), 0);
    }

    #[test]
    fn regions_parse_and_clamp() {
        let refined = vec!["f.py".to_string()];
        let contents = BTreeMap::from([(
            "f.py".to_string(),
            (1..=50).map(|i| format!("line {i}\n")).collect::<String>(),
        )]);
        let backend = Scripted::new(&["```\nf.py:10-9999 looks off\nf.py:3-4\n```"]);
        let sel = localize_regions(
            &refined, &contents, &issue(), None, &backend, Phase::Initial, 0.2,
        )
        .unwrap();
        assert_eq!(sel.regions.len(), 2);
        assert_eq!((sel.regions[0].start_line, sel.regions[0].end_line), (10, 50));
        assert_eq!(sel.regions[0].rationale, "looks off");
        assert_eq!((sel.regions[1].start_line, sel.regions[1].end_line), (3, 4));
    }

    #[test]
    fn regions_empty_answer_is_no_regions() {
        let refined = vec!["f.py".to_string()];
        let contents = BTreeMap::from([("f.py".to_string(), "x\n".to_string())]);
        let backend = Scripted::new(&["no usable answer"]);
        let err = localize_regions(
            &refined, &contents, &issue(), None, &backend, Phase::Initial, 0.2,
        )
        .unwrap_err();
        assert!(matches!(err, LocalizationError::NoRegions));

        let fallback = whole_file_regions(&refined, &contents);
        assert_eq!(fallback.len(), 1);
        assert_eq!((fallback[0].start_line, fallback[0].end_line), (1, 1));
    }

    #[test]
    fn report_invariants_catch_violations() {
        let ok = LocalizationReport {
            coarse_files: vec!["a.py".into(), "b.py".into()],
            refined_files: vec!["a.py".into()],
            regions: vec![Region {
                path: "a.py".into(),
                start_line: 1,
                end_line: 3,
                rationale: String::new(),
            }],
        };
        assert!(ok.check_invariants().is_ok());

        let mut bad = ok.clone();
        bad.refined_files = vec!["zz.py".into()];
        assert!(bad.check_invariants().is_err());
    }
}
