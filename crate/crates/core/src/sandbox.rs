//! Workspace isolation and script execution. Each run owns a private copy of
//! the target repository: `pristine/` is never mutated after checkout, `work/`
//! is wiped back to pristine before every patch trial, and generated scripts
//! live under `scratch/tests/`.

use std::collections::BTreeMap;
use std::io::Read;
#[cfg(unix)]
use std::os::unix::process::CommandExt;
use std::path::{Component, Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use sha2::{Digest, Sha256};
use tempfile::TempDir;
use thiserror::Error;

use crate::config::LanguageProfile;
use crate::diff::{self, DiffError, FileMap};
use crate::domain::{CandidatePatch, ExecutionResult, Issue, TestScript};

/// Exit code recorded when a script is killed at the timeout.
pub const TIMEOUT_EXIT_CODE: i32 = 124;
pub const SENTINEL_REPRODUCED: &str = "ISSUE REPRODUCED";
pub const SENTINEL_RESOLVED: &str = "ISSUE RESOLVED";

#[derive(Debug, Error)]
pub enum SandboxError {
    #[error("io failure at {path}: {source}")]
    IoFailure {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("failed to spawn {launcher}: {reason}")]
    SpawnFailure { launcher: String, reason: String },
    #[error("patch path escapes the workspace: {0}")]
    UnsafePath(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SandboxError + '_ {
    move |source| SandboxError::IoFailure {
        path: path.to_path_buf(),
        source,
    }
}

/// Verdict of a reproduction-style script run, derived purely from the
/// execution result via the sentinel contract.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReproVerdict {
    Reproduced,
    Resolved,
    ExecutionError,
    Indeterminate,
}

/// Sentinel contract: `ISSUE REPRODUCED` + exit 1 means the bug manifests,
/// `ISSUE RESOLVED` + exit 0 means it does not. Crashes (timeout or an exit
/// code outside {0,1}) are execution errors; a clean exit without the
/// matching sentinel is indeterminate.
pub fn classify_repro(result: &ExecutionResult) -> ReproVerdict {
    if !result.timed_out {
        if result.exit_code == 1 && result.stdout.contains(SENTINEL_REPRODUCED) {
            return ReproVerdict::Reproduced;
        }
        if result.exit_code == 0 && result.stdout.contains(SENTINEL_RESOLVED) {
            return ReproVerdict::Resolved;
        }
    }
    if result.timed_out || !(0..=1).contains(&result.exit_code) {
        ReproVerdict::ExecutionError
    } else {
        ReproVerdict::Indeterminate
    }
}

pub struct Workspace {
    #[allow(dead_code)] // owns the directory lifetime
    dir: TempDir,
    pristine: PathBuf,
    work: PathBuf,
    scratch: PathBuf,
    runner: Vec<String>,
    runner_env: BTreeMap<String, String>,
    script_extension: String,
    ignore_dirs: Vec<String>,
    pub timeout: Duration,
}

impl Workspace {
    /// Copies the issue's repository into a private temp directory (twice:
    /// pristine reference + working tree). The original is never mutated.
    pub fn checkout(
        issue: &Issue,
        profile: &LanguageProfile,
        timeout_secs: u64,
    ) -> Result<Self, SandboxError> {
        if !issue.repo_root.is_dir() {
            return Err(SandboxError::IoFailure {
                path: issue.repo_root.clone(),
                source: std::io::Error::new(std::io::ErrorKind::NotFound, "not a directory"),
            });
        }
        let dir = TempDir::new().map_err(io_err(Path::new("/tmp")))?;
        let pristine = dir.path().join("pristine");
        let work = dir.path().join("work");
        let scratch = dir.path().join("scratch");
        copy_tree(&issue.repo_root, &pristine, &profile.ignore_dirs)?;
        copy_tree(&pristine, &work, &profile.ignore_dirs)?;
        std::fs::create_dir_all(scratch.join("tests")).map_err(io_err(&scratch))?;
        Ok(Self {
            dir,
            pristine,
            work,
            scratch,
            runner: profile.runner.clone(),
            runner_env: profile.runner_env.clone(),
            script_extension: profile.script_extension.clone(),
            ignore_dirs: profile.ignore_dirs.clone(),
            timeout: Duration::from_secs(timeout_secs),
        })
    }

    pub fn work_dir(&self) -> &Path {
        &self.work
    }

    pub fn scratch_dir(&self) -> &Path {
        &self.scratch
    }

    /// Hash of the working tree (ignored directories excluded).
    pub fn work_tree_hash(&self) -> Result<String, SandboxError> {
        tree_hash(&self.work, &self.ignore_dirs)
    }

    /// Wipes the working tree back to the pristine copy.
    pub fn restore(&self) -> Result<(), SandboxError> {
        if self.work.exists() {
            std::fs::remove_dir_all(&self.work).map_err(io_err(&self.work))?;
        }
        copy_tree(&self.pristine, &self.work, &self.ignore_dirs)
    }

    /// Relative path of every working-tree file, sorted.
    pub fn list_files(&self) -> Result<Vec<String>, SandboxError> {
        let mut out = Vec::new();
        for entry in walk(&self.work, &self.ignore_dirs) {
            let entry = entry.map_err(|e| SandboxError::IoFailure {
                path: self.work.clone(),
                source: std::io::Error::other(e),
            })?;
            if entry.file_type().is_file() {
                let rel = entry
                    .path()
                    .strip_prefix(&self.work)
                    .expect("walk stays under root");
                out.push(rel.to_string_lossy().replace('\\', "/"));
            }
        }
        out.sort();
        Ok(out)
    }

    pub fn read_file(&self, rel: &str) -> Result<String, SandboxError> {
        let path = self.safe_join(rel)?;
        std::fs::read_to_string(&path).map_err(io_err(&path))
    }

    fn safe_join(&self, rel: &str) -> Result<PathBuf, SandboxError> {
        let rel_path = Path::new(rel);
        let unsafe_component = rel_path.components().any(|c| {
            !matches!(c, Component::Normal(_))
        });
        if rel.is_empty() || unsafe_component {
            return Err(SandboxError::UnsafePath(rel.to_string()));
        }
        Ok(self.work.join(rel_path))
    }

    /// Applies a unified diff to the working tree. All target files are
    /// patched in memory first, so a conflict in any hunk changes nothing on
    /// disk.
    pub fn apply_patch(&self, patch: &CandidatePatch) -> Result<(), SandboxError> {
        let parsed = diff::parse(&patch.diff)?;
        let mut before = FileMap::new();
        for fp in &parsed.files {
            for path in [&fp.old_path, &fp.new_path].into_iter().flatten() {
                let disk = self.safe_join(path)?;
                if disk.is_file() {
                    let content = std::fs::read_to_string(&disk).map_err(io_err(&disk))?;
                    before.insert(path.clone(), content);
                }
            }
        }
        let after = diff::apply(&before, &parsed)?;

        for (path, content) in &after {
            if before.get(path) == Some(content) {
                continue;
            }
            let disk = self.safe_join(path)?;
            if let Some(parent) = disk.parent() {
                std::fs::create_dir_all(parent).map_err(io_err(parent))?;
            }
            std::fs::write(&disk, content).map_err(io_err(&disk))?;
        }
        for path in before.keys() {
            if !after.contains_key(path) {
                let disk = self.safe_join(path)?;
                std::fs::remove_file(&disk).map_err(io_err(&disk))?;
            }
        }
        Ok(())
    }

    /// Writes the script under `scratch/tests/<label>_<trial>.<ext>` and runs
    /// it with the configured runner, cwd at the working tree. Kills the
    /// process at the timeout. Workspace paths in captured output are
    /// replaced with stable placeholders so identical runs produce identical
    /// feedback.
    pub fn run_script(
        &self,
        script: &TestScript,
        label: &str,
        trial: u32,
    ) -> Result<ExecutionResult, SandboxError> {
        let path = self
            .scratch
            .join("tests")
            .join(format!("{label}_{trial}.{}", self.script_extension));
        std::fs::write(&path, &script.source).map_err(io_err(&path))?;

        let launcher = self.runner.first().cloned().unwrap_or_default();
        let mut cmd = Command::new(&launcher);
        cmd.args(&self.runner[1..])
            .arg(&path)
            .current_dir(&self.work)
            .envs(&self.runner_env)
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped());
        // Own process group, so a timeout can kill the interpreter together
        // with anything it spawned (otherwise grandchildren keep the output
        // pipes open and the readers below never finish).
        #[cfg(unix)]
        cmd.process_group(0);

        let started = Instant::now();
        let mut child = cmd.spawn().map_err(|e| SandboxError::SpawnFailure {
            launcher: launcher.clone(),
            reason: e.to_string(),
        })?;

        let mut stdout_pipe = child.stdout.take().expect("stdout piped");
        let mut stderr_pipe = child.stderr.take().expect("stderr piped");
        let out_reader = std::thread::spawn(move || {
            let mut buf = Vec::new();
            let _ = stdout_pipe.read_to_end(&mut buf);
            buf
        });
        let err_reader = std::thread::spawn(move || {
            let mut buf = Vec::new();
            let _ = stderr_pipe.read_to_end(&mut buf);
            buf
        });

        let mut timed_out = false;
        let status = loop {
            if let Some(status) = child.try_wait().map_err(io_err(&path))? {
                break status;
            }
            if started.elapsed() >= self.timeout {
                timed_out = true;
                kill_process_group(child.id());
                let _ = child.kill();
                break child.wait().map_err(io_err(&path))?;
            }
            std::thread::sleep(Duration::from_millis(10));
        };
        let duration_ms = started.elapsed().as_millis() as u64;

        let stdout = String::from_utf8_lossy(&out_reader.join().unwrap_or_default()).into_owned();
        let stderr = String::from_utf8_lossy(&err_reader.join().unwrap_or_default()).into_owned();
        let exit_code = if timed_out {
            TIMEOUT_EXIT_CODE
        } else {
            status.code().unwrap_or(-1)
        };

        Ok(ExecutionResult {
            exit_code,
            stdout: self.scrub(&stdout),
            stderr: self.scrub(&stderr),
            duration_ms,
            timed_out,
        })
    }

    fn scrub(&self, text: &str) -> String {
        text.replace(&self.work.to_string_lossy().into_owned(), "<workspace>")
            .replace(&self.scratch.to_string_lossy().into_owned(), "<scratch>")
    }

    /// Restores, applies the patch, and runs every test. A test passes iff
    /// its verdict is Resolved.
    pub fn run_test_suite(
        &self,
        patch: &CandidatePatch,
        tests: &[TestScript],
    ) -> Result<(u32, Vec<ReproVerdict>), SandboxError> {
        assert!(!tests.is_empty(), "suite must contain at least one test");
        self.restore()?;
        self.apply_patch(patch)?;
        let mut verdicts = Vec::with_capacity(tests.len());
        for (i, test) in tests.iter().enumerate() {
            let result = self.run_script(test, "suite", i as u32 + 1)?;
            verdicts.push(classify_repro(&result));
        }
        let passes = verdicts.iter().filter(|v| **v == ReproVerdict::Resolved).count() as u32;
        Ok((passes, verdicts))
    }
}

/// Best-effort SIGKILL to the script's whole process group (the child was
/// started as a group leader), reaping interpreters' own subprocesses.
fn kill_process_group(pid: u32) {
    #[cfg(unix)]
    {
        let _ = Command::new("kill")
            .args(["-9", "--", &format!("-{pid}")])
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .status();
    }
    #[cfg(not(unix))]
    let _ = pid;
}

fn walk<'a>(
    root: &Path,
    ignore_dirs: &'a [String],
) -> impl Iterator<Item = walkdir::Result<walkdir::DirEntry>> + 'a {
    walkdir::WalkDir::new(root)
        .sort_by_file_name()
        .into_iter()
        .filter_entry(move |entry| {
            if entry.file_type().is_dir() {
                let name = entry.file_name().to_string_lossy();
                return !ignore_dirs.iter().any(|d| d == name.as_ref());
            }
            true
        })
}

fn copy_tree(src: &Path, dst: &Path, ignore_dirs: &[String]) -> Result<(), SandboxError> {
    std::fs::create_dir_all(dst).map_err(io_err(dst))?;
    for entry in walk(src, ignore_dirs) {
        let entry = entry.map_err(|e| SandboxError::IoFailure {
            path: src.to_path_buf(),
            source: std::io::Error::other(e),
        })?;
        let rel = entry.path().strip_prefix(src).expect("walk stays under root");
        if rel.as_os_str().is_empty() {
            continue;
        }
        let target = dst.join(rel);
        if entry.file_type().is_dir() {
            std::fs::create_dir_all(&target).map_err(io_err(&target))?;
        } else if entry.file_type().is_file() {
            std::fs::copy(entry.path(), &target).map_err(io_err(&target))?;
        }
    }
    Ok(())
}

/// Content hash of a directory tree: sorted relative paths plus file bytes.
pub fn tree_hash(root: &Path, ignore_dirs: &[String]) -> Result<String, SandboxError> {
    let mut files = Vec::new();
    for entry in walk(root, ignore_dirs) {
        let entry = entry.map_err(|e| SandboxError::IoFailure {
            path: root.to_path_buf(),
            source: std::io::Error::other(e),
        })?;
        if entry.file_type().is_file() {
            files.push(entry.path().to_path_buf());
        }
    }
    files.sort();
    let mut hasher = Sha256::new();
    for path in files {
        let rel = path.strip_prefix(root).expect("walk stays under root");
        hasher.update(rel.to_string_lossy().replace('\\', "/").as_bytes());
        hasher.update([0u8]);
        let bytes = std::fs::read(&path).map_err(io_err(&path))?;
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(&bytes);
    }
    Ok(format!("{:x}", hasher.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{PatchOrigin, ScriptKind};

    fn sh_profile() -> LanguageProfile {
        LanguageProfile {
            name: "sh".into(),
            extensions: vec!["txt".into()],
            script_extension: "sh".into(),
            runner: vec!["sh".into()],
            runner_env: BTreeMap::new(),
            ignore_dirs: vec![".git".into()],
            declarations: Vec::new(),
        }
    }

    fn fixture_repo() -> (TempDir, Issue) {
        let dir = TempDir::new().unwrap();
        let repo = dir.path().join("repo");
        std::fs::create_dir_all(repo.join("sub")).unwrap();
        std::fs::write(repo.join("flag.txt"), "bug\n").unwrap();
        std::fs::write(repo.join("sub/other.txt"), "stable\n").unwrap();
        let issue = Issue::new("iss", "t", "b", &repo);
        (dir, issue)
    }

    fn ws(issue: &Issue) -> Workspace {
        Workspace::checkout(issue, &sh_profile(), 5).unwrap()
    }

    fn repro_script() -> TestScript {
        TestScript::new(
            "if grep -q bug flag.txt; then\n  echo 'ISSUE REPRODUCED'\n  exit 1\nelse\n  echo 'ISSUE RESOLVED'\n  exit 0\nfi\n",
            ScriptKind::Reproduction,
        )
    }

    const FIX_DIFF: &str = "--- a/flag.txt\n+++ b/flag.txt\n@@ -1 +1 @@\n-bug\n+fixed\n";

    fn exec(exit_code: i32, stdout: &str, timed_out: bool) -> ExecutionResult {
        ExecutionResult {
            exit_code,
            stdout: stdout.into(),
            stderr: String::new(),
            duration_ms: 1,
            timed_out,
        }
    }

    #[test]
    fn checkout_copies_the_tree_faithfully() {
        let (_dir, issue) = fixture_repo();
        let ws = ws(&issue);
        let original = tree_hash(&issue.repo_root, &[".git".into()]).unwrap();
        assert_eq!(ws.work_tree_hash().unwrap(), original);
    }

    #[test]
    fn checkout_missing_repo_fails() {
        let issue = Issue::new("iss", "t", "b", "/nonexistent/nowhere");
        assert!(matches!(
            Workspace::checkout(&issue, &sh_profile(), 5),
            Err(SandboxError::IoFailure { .. })
        ));
    }

    #[test]
    fn checkouts_are_disjoint() {
        let (_dir, issue) = fixture_repo();
        let a = ws(&issue);
        let b = ws(&issue);
        assert_ne!(a.work_dir(), b.work_dir());
    }

    #[test]
    fn apply_patch_golden_post_state() {
        let (_dir, issue) = fixture_repo();
        let ws = ws(&issue);
        let patch = CandidatePatch::new(FIX_DIFF, PatchOrigin::Initial);
        ws.apply_patch(&patch).unwrap();
        assert_eq!(ws.read_file("flag.txt").unwrap(), "fixed\n");
        assert_eq!(ws.read_file("sub/other.txt").unwrap(), "stable\n");
    }

    #[test]
    fn apply_empty_patch_is_noop() {
        let (_dir, issue) = fixture_repo();
        let ws = ws(&issue);
        let before = ws.work_tree_hash().unwrap();
        ws.apply_patch(&CandidatePatch::new("", PatchOrigin::Initial)).unwrap();
        assert_eq!(ws.work_tree_hash().unwrap(), before);
    }

    #[test]
    fn conflicting_patch_changes_nothing() {
        let (_dir, issue) = fixture_repo();
        let ws = ws(&issue);
        let before = ws.work_tree_hash().unwrap();
        let bad = "--- a/flag.txt\n+++ b/flag.txt\n@@ -1 +1 @@\n-NOT THERE\n+x\n";
        let err = ws.apply_patch(&CandidatePatch::new(bad, PatchOrigin::Initial)).unwrap_err();
        assert!(matches!(err, SandboxError::Diff(DiffError::PatchConflict { .. })));
        assert_eq!(ws.work_tree_hash().unwrap(), before);
    }

    #[test]
    fn multi_file_conflict_in_second_file_rolls_back_first() {
        let (_dir, issue) = fixture_repo();
        let ws = ws(&issue);
        let before = ws.work_tree_hash().unwrap();
        let twofer = "--- a/flag.txt\n+++ b/flag.txt\n@@ -1 +1 @@\n-bug\n+fixed\n\
--- a/sub/other.txt\n+++ b/sub/other.txt\n@@ -1 +1 @@\n-WRONG\n+x\n";
        assert!(ws.apply_patch(&CandidatePatch::new(twofer, PatchOrigin::Initial)).is_err());
        assert_eq!(ws.work_tree_hash().unwrap(), before);
    }

    #[test]
    fn patch_escaping_the_workspace_is_rejected() {
        let (_dir, issue) = fixture_repo();
        let ws = ws(&issue);
        let evil = "--- a/../evil.txt\n+++ b/../evil.txt\n@@ -0,0 +1 @@\n+boo\n";
        let err = ws.apply_patch(&CandidatePatch::new(evil, PatchOrigin::Initial)).unwrap_err();
        assert!(matches!(err, SandboxError::UnsafePath(_)));
    }

    #[test]
    fn restore_reverts_mutations() {
        let (_dir, issue) = fixture_repo();
        let ws = ws(&issue);
        let before = ws.work_tree_hash().unwrap();
        ws.apply_patch(&CandidatePatch::new(FIX_DIFF, PatchOrigin::Initial)).unwrap();
        assert_ne!(ws.work_tree_hash().unwrap(), before);
        ws.restore().unwrap();
        assert_eq!(ws.work_tree_hash().unwrap(), before);
    }

    #[test]
    fn original_repo_is_never_touched() {
        let (_dir, issue) = fixture_repo();
        let original = tree_hash(&issue.repo_root, &[]).unwrap();
        let ws = ws(&issue);
        ws.apply_patch(&CandidatePatch::new(FIX_DIFF, PatchOrigin::Initial)).unwrap();
        let script = TestScript::new("echo mutate > newfile.txt\nexit 0\n", ScriptKind::Validation);
        ws.run_script(&script, "iso", 1).unwrap();
        assert_eq!(tree_hash(&issue.repo_root, &[]).unwrap(), original);
    }

    #[test]
    fn run_script_captures_output() {
        let (_dir, issue) = fixture_repo();
        let ws = ws(&issue);
        let script = TestScript::new("echo ok\necho warn >&2\nexit 0\n", ScriptKind::Validation);
        let result = ws.run_script(&script, "cap", 1).unwrap();
        assert_eq!(result.exit_code, 0);
        assert_eq!(result.stdout, "ok\n");
        assert_eq!(result.stderr, "warn\n");
        assert!(!result.timed_out);
    }

    #[test]
    fn run_script_times_out() {
        let (_dir, issue) = fixture_repo();
        let mut ws = ws(&issue);
        ws.timeout = Duration::from_millis(300);
        let script = TestScript::new("sleep 30\n", ScriptKind::Validation);
        let result = ws.run_script(&script, "slow", 1).unwrap();
        assert!(result.timed_out);
        assert_eq!(result.exit_code, TIMEOUT_EXIT_CODE);
        assert!(result.duration_ms >= 300 && result.duration_ms < 5000);
    }

    #[test]
    fn run_script_missing_launcher() {
        let (_dir, issue) = fixture_repo();
        let mut profile = sh_profile();
        profile.runner = vec!["launcher-that-does-not-exist-0x1".into()];
        let ws = Workspace::checkout(&issue, &profile, 5).unwrap();
        let err = ws
            .run_script(&TestScript::new("exit 0\n", ScriptKind::Validation), "x", 1)
            .unwrap_err();
        assert!(matches!(err, SandboxError::SpawnFailure { .. }));
    }

    #[test]
    fn scrubbed_output_hides_temp_paths() {
        let (_dir, issue) = fixture_repo();
        let ws = ws(&issue);
        let script = TestScript::new("pwd\n", ScriptKind::Validation);
        let result = ws.run_script(&script, "pwd", 1).unwrap();
        assert_eq!(result.stdout, "<workspace>\n");
    }

    #[test]
    fn classify_rules() {
        assert_eq!(classify_repro(&exec(1, "ISSUE REPRODUCED\n", false)), ReproVerdict::Reproduced);
        assert_eq!(classify_repro(&exec(0, "ISSUE RESOLVED\n", false)), ReproVerdict::Resolved);
        assert_eq!(classify_repro(&exec(2, "", false)), ReproVerdict::ExecutionError);
        assert_eq!(classify_repro(&exec(124, "", true)), ReproVerdict::ExecutionError);
        assert_eq!(classify_repro(&exec(0, "no sentinel", false)), ReproVerdict::Indeterminate);
        // Sentinel with the wrong exit code is not trusted.
        assert_eq!(classify_repro(&exec(0, "ISSUE REPRODUCED", false)), ReproVerdict::Indeterminate);
        assert_eq!(classify_repro(&exec(1, "ISSUE RESOLVED", false)), ReproVerdict::Indeterminate);
    }

    #[test]
    fn suite_counts_passes_after_patch() {
        let (_dir, issue) = fixture_repo();
        let ws = ws(&issue);
        let validation = TestScript::new(
            "if grep -q stable sub/other.txt; then\n  echo 'ISSUE RESOLVED'\n  exit 0\nelse\n  echo 'ISSUE REPRODUCED'\n  exit 1\nfi\n",
            ScriptKind::Validation,
        );
        let fix = CandidatePatch::new(FIX_DIFF, PatchOrigin::Initial);
        let (passes, verdicts) = ws.run_test_suite(&fix, &[repro_script(), validation.clone()]).unwrap();
        assert_eq!(passes, 2);
        assert_eq!(verdicts, vec![ReproVerdict::Resolved, ReproVerdict::Resolved]);

        // The no-op patch leaves the bug in place: repro still fires.
        let noop = CandidatePatch::new("", PatchOrigin::Initial);
        let (passes, verdicts) = ws.run_test_suite(&noop, &[repro_script(), validation]).unwrap();
        assert_eq!(passes, 1);
        assert_eq!(verdicts[0], ReproVerdict::Reproduced);
    }

    #[test]
    fn suite_propagates_conflicts() {
        let (_dir, issue) = fixture_repo();
        let ws = ws(&issue);
        let bad = CandidatePatch::new(
            "--- a/flag.txt\n+++ b/flag.txt\n@@ -1 +1 @@\n-nope\n+x\n",
            PatchOrigin::Initial,
        );
        assert!(ws.run_test_suite(&bad, &[repro_script()]).is_err());
    }
}
