//! Unified-diff parsing, rendering, and zero-fuzz in-memory application.
//!
//! Application works on a path → content map and returns a fresh map, so a
//! conflict in any hunk leaves the input untouched; the sandbox writes results
//! to disk only on success, which is what makes whole-patch atomicity cheap.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use regex::Regex;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("malformed diff at line {line}: {reason}")]
    MalformedDiff { line: usize, reason: String },
    #[error("patch conflict in {file} (hunk {hunk_index}): {reason}")]
    PatchConflict {
        file: String,
        hunk_index: usize,
        reason: String,
    },
    #[error("patch target missing: {file}")]
    TargetMissing { file: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LineTag {
    Context,
    Add,
    Remove,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HunkLine {
    pub tag: LineTag,
    pub text: String,
    /// Set when the line is followed by a `\ No newline at end of file` marker.
    pub no_newline: bool,
}

impl HunkLine {
    fn new(tag: LineTag, text: impl Into<String>) -> Self {
        Self {
            tag,
            text: text.into(),
            no_newline: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hunk {
    pub old_start: usize,
    pub old_count: usize,
    pub new_start: usize,
    pub new_count: usize,
    pub lines: Vec<HunkLine>,
}

impl Hunk {
    /// Builds a hunk from body lines, deriving the header counts.
    pub fn from_lines(old_start: usize, new_start: usize, lines: Vec<HunkLine>) -> Self {
        let old_count = lines
            .iter()
            .filter(|l| l.tag != LineTag::Add)
            .count();
        let new_count = lines
            .iter()
            .filter(|l| l.tag != LineTag::Remove)
            .count();
        Self {
            old_start,
            old_count,
            new_start,
            new_count,
            lines,
        }
    }
}

/// One file's change; `old_path` is `None` for creations and `new_path` is
/// `None` for deletions (`/dev/null` sides).
#[derive(Debug, Clone, PartialEq)]
pub struct FilePatch {
    pub old_path: Option<String>,
    pub new_path: Option<String>,
    pub hunks: Vec<Hunk>,
}

impl FilePatch {
    /// The path the change is about, preferring the post-image side.
    pub fn display_path(&self) -> &str {
        self.new_path
            .as_deref()
            .or(self.old_path.as_deref())
            .unwrap_or("?")
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Patch {
    pub files: Vec<FilePatch>,
}

impl Patch {
    pub fn is_empty(&self) -> bool {
        self.files.is_empty()
    }

    /// Relative paths touched by this patch (post-image side).
    pub fn touched_paths(&self) -> Vec<&str> {
        self.files.iter().map(|f| f.display_path()).collect()
    }
}

fn hunk_header_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"^@@ -(\d+)(?:,(\d+))? \+(\d+)(?:,(\d+))? @@").expect("static regex")
    })
}

fn parse_path(raw: &str) -> Option<String> {
    let raw = raw.split('\t').next().unwrap_or(raw).trim();
    if raw == "/dev/null" {
        return None;
    }
    let stripped = raw
        .strip_prefix("a/")
        .or_else(|| raw.strip_prefix("b/"))
        .unwrap_or(raw);
    Some(stripped.to_string())
}

/// Parses unified-diff text. Non-diff lines before and between file sections
/// (`diff --git`, `index`, prose) are skipped; hunk bodies are validated
/// against their header counts. Returns an empty patch for text containing no
/// file sections.
pub fn parse(text: &str) -> Result<Patch, DiffError> {
    let lines: Vec<&str> = text.lines().collect();
    let mut files: Vec<FilePatch> = Vec::new();
    let mut i = 0;

    while i < lines.len() {
        let line = lines[i];
        if !line.starts_with("--- ") {
            i += 1;
            continue;
        }
        let old_path = parse_path(&line[4..]);
        i += 1;
        let plus = lines.get(i).copied().unwrap_or("");
        if !plus.starts_with("+++ ") {
            return Err(DiffError::MalformedDiff {
                line: i + 1,
                reason: "expected +++ header".into(),
            });
        }
        let new_path = parse_path(&plus[4..]);
        if old_path.is_none() && new_path.is_none() {
            return Err(DiffError::MalformedDiff {
                line: i + 1,
                reason: "both sides are /dev/null".into(),
            });
        }
        i += 1;

        let mut hunks = Vec::new();
        while i < lines.len() {
            let Some(caps) = hunk_header_re().captures(lines[i]) else {
                break;
            };
            let old_start: usize = caps[1].parse().unwrap();
            let old_count: usize = caps.get(2).map_or(1, |m| m.as_str().parse().unwrap());
            let new_start: usize = caps[3].parse().unwrap();
            let new_count: usize = caps.get(4).map_or(1, |m| m.as_str().parse().unwrap());
            i += 1;

            let mut body = Vec::new();
            let mut old_left = old_count;
            let mut new_left = new_count;
            while old_left > 0 || new_left > 0 {
                let Some(raw) = lines.get(i) else {
                    return Err(DiffError::MalformedDiff {
                        line: i,
                        reason: format!(
                            "hunk body ended early ({old_left} old / {new_left} new lines missing)"
                        ),
                    });
                };
                let (tag, text) = if raw.is_empty() {
                    (LineTag::Context, "")
                } else {
                    match raw.as_bytes()[0] {
                        b' ' => (LineTag::Context, &raw[1..]),
                        b'+' => (LineTag::Add, &raw[1..]),
                        b'-' => (LineTag::Remove, &raw[1..]),
                        b'\\' => {
                            if let Some(last) = body.last_mut() {
                                let last: &mut HunkLine = last;
                                last.no_newline = true;
                            }
                            i += 1;
                            continue;
                        }
                        _ => {
                            return Err(DiffError::MalformedDiff {
                                line: i + 1,
                                reason: format!("unexpected hunk line: {raw}"),
                            })
                        }
                    }
                };
                let consumes_old = tag != LineTag::Add;
                let consumes_new = tag != LineTag::Remove;
                if (consumes_old && old_left == 0) || (consumes_new && new_left == 0) {
                    return Err(DiffError::MalformedDiff {
                        line: i + 1,
                        reason: "hunk body longer than header counts".into(),
                    });
                }
                if consumes_old {
                    old_left -= 1;
                }
                if consumes_new {
                    new_left -= 1;
                }
                body.push(HunkLine::new(tag, text));
                i += 1;
            }
            if let Some(raw) = lines.get(i) {
                if raw.starts_with('\\') {
                    if let Some(last) = body.last_mut() {
                        last.no_newline = true;
                    }
                    i += 1;
                }
            }
            hunks.push(Hunk {
                old_start,
                old_count,
                new_start,
                new_count,
                lines: body,
            });
        }
        if hunks.is_empty() {
            return Err(DiffError::MalformedDiff {
                line: i,
                reason: "file section without hunks".into(),
            });
        }
        files.push(FilePatch {
            old_path,
            new_path,
            hunks,
        });
    }

    Ok(Patch { files })
}

/// Canonical rendering; `parse(render(p)) == p` for any valid patch.
pub fn render(patch: &Patch) -> String {
    let mut out = String::new();
    for file in &patch.files {
        match &file.old_path {
            Some(p) => out.push_str(&format!("--- a/{p}\n")),
            None => out.push_str("--- /dev/null\n"),
        }
        match &file.new_path {
            Some(p) => out.push_str(&format!("+++ b/{p}\n")),
            None => out.push_str("+++ /dev/null\n"),
        }
        for hunk in &file.hunks {
            out.push_str(&format!(
                "@@ -{},{} +{},{} @@\n",
                hunk.old_start, hunk.old_count, hunk.new_start, hunk.new_count
            ));
            for line in &hunk.lines {
                let prefix = match line.tag {
                    LineTag::Context => ' ',
                    LineTag::Add => '+',
                    LineTag::Remove => '-',
                };
                out.push(prefix);
                out.push_str(&line.text);
                out.push('\n');
                if line.no_newline {
                    out.push_str("\\ No newline at end of file\n");
                }
            }
        }
    }
    out
}

/// In-memory file tree: relative path → content.
pub type FileMap = BTreeMap<String, String>;

fn split_lines(content: &str) -> (Vec<&str>, bool) {
    if content.is_empty() {
        return (Vec::new(), true);
    }
    let trailing = content.ends_with('\n');
    (content.lines().collect(), trailing)
}

fn conflict(file: &str, hunk_index: usize, reason: impl Into<String>) -> DiffError {
    DiffError::PatchConflict {
        file: file.to_string(),
        hunk_index,
        reason: reason.into(),
    }
}

fn apply_hunks(file: &str, content: &str, hunks: &[Hunk]) -> Result<String, DiffError> {
    let (old_lines, old_trailing_nl) = split_lines(content);
    // (text, ends-without-newline-if-last)
    let mut out: Vec<(String, bool)> = Vec::new();
    let mut cursor = 0usize;

    let original = |idx: usize| -> (String, bool) {
        (
            old_lines[idx].to_string(),
            idx + 1 == old_lines.len() && !old_trailing_nl,
        )
    };

    for (hi, hunk) in hunks.iter().enumerate() {
        let start = hunk.old_start.saturating_sub(1);
        if start < cursor {
            return Err(conflict(file, hi, "hunks overlap or are out of order"));
        }
        if start > old_lines.len() {
            return Err(conflict(
                file,
                hi,
                format!("hunk starts at line {} beyond EOF", hunk.old_start),
            ));
        }
        while cursor < start {
            out.push(original(cursor));
            cursor += 1;
        }
        for line in &hunk.lines {
            match line.tag {
                LineTag::Context | LineTag::Remove => {
                    let Some(have) = old_lines.get(cursor) else {
                        return Err(conflict(file, hi, "hunk runs past end of file"));
                    };
                    if *have != line.text {
                        return Err(conflict(
                            file,
                            hi,
                            format!(
                                "line {} mismatch: expected {:?}, found {:?}",
                                cursor + 1,
                                line.text,
                                have
                            ),
                        ));
                    }
                    if line.tag == LineTag::Context {
                        out.push((line.text.clone(), line.no_newline));
                    }
                    cursor += 1;
                }
                LineTag::Add => out.push((line.text.clone(), line.no_newline)),
            }
        }
    }
    while cursor < old_lines.len() {
        out.push(original(cursor));
        cursor += 1;
    }

    let mut result = String::new();
    let last = out.len();
    for (i, (text, no_nl)) in out.into_iter().enumerate() {
        result.push_str(&text);
        if !(i + 1 == last && no_nl) {
            result.push('\n');
        }
    }
    Ok(result)
}

/// Applies a whole patch to a file map, returning the patched map. Any
/// conflict fails the entire application; the input map is never modified.
pub fn apply(files: &FileMap, patch: &Patch) -> Result<FileMap, DiffError> {
    let mut out = files.clone();
    for fp in &patch.files {
        match (&fp.old_path, &fp.new_path) {
            (None, Some(new)) => {
                if out.contains_key(new) {
                    return Err(conflict(new, 0, "created file already exists"));
                }
                let content = apply_hunks(new, "", &fp.hunks)?;
                out.insert(new.clone(), content);
            }
            (Some(old), None) => {
                let content = out
                    .get(old)
                    .ok_or_else(|| DiffError::TargetMissing { file: old.clone() })?;
                let remainder = apply_hunks(old, content, &fp.hunks)?;
                if !remainder.is_empty() {
                    return Err(conflict(old, 0, "deletion leaves content behind"));
                }
                out.remove(old);
            }
            (Some(old), Some(new)) => {
                let content = out
                    .get(old)
                    .ok_or_else(|| DiffError::TargetMissing { file: old.clone() })?;
                let patched = apply_hunks(old, content, &fp.hunks)?;
                if old != new {
                    out.remove(old);
                }
                out.insert(new.clone(), patched);
            }
            (None, None) => unreachable!("parser rejects null→null file sections"),
        }
    }
    Ok(out)
}
