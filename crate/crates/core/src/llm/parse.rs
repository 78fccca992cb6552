//! Parsers for model answers. Agents are prompted to put their final artifact
//! in a fenced code block, so every parser here works on the LAST fenced block
//! (models often emit scratch work in earlier ones).

use thiserror::Error;

use crate::diff::{self, DiffError, Patch};
use crate::memory::InsightOp;

#[derive(Debug, Error)]
pub enum ParseError {
    #[error("parse failure: {0}")]
    ParseFailure(String),
}

/// Contents of the last fenced code block, or `None` when the text has no
/// complete fence pair. Language tags after the opening fence are ignored.
pub fn parse_fenced_code(text: &str) -> Option<String> {
    let mut blocks = Vec::new();
    let mut current: Option<Vec<&str>> = None;
    for line in text.lines() {
        if line.trim_start().starts_with("```") {
            match current.take() {
                Some(body) => blocks.push(body.join("\n")),
                None => current = Some(Vec::new()),
            }
            continue;
        }
        if let Some(body) = current.as_mut() {
            body.push(line);
        }
    }
    blocks.pop()
}

/// Extracts a unified diff from a model answer: the last fenced block when
/// fences are present, the raw text otherwise. The answer must contain at
/// least one file section.
pub fn parse_unified_diff(text: &str) -> Result<Patch, DiffError> {
    let body = parse_fenced_code(text).unwrap_or_else(|| text.to_string());
    let patch = diff::parse(&body)?;
    if patch.is_empty() {
        return Err(DiffError::MalformedDiff {
            line: 0,
            reason: "no unified diff found in answer".into(),
        });
    }
    Ok(patch)
}

/// Parses a JSON array of insight operations from the last fenced block (or
/// the whole text when unfenced). Invalid op shapes are a [`ParseError`];
/// truncation to the per-update op budget happens in the memory layer.
pub fn parse_insight_ops(text: &str) -> Result<Vec<InsightOp>, ParseError> {
    let body = parse_fenced_code(text).unwrap_or_else(|| text.trim().to_string());
    let ops: Vec<InsightOp> = serde_json::from_str(&body)
        .map_err(|e| ParseError::ParseFailure(format!("insight ops: {e}")))?;
    for op in &ops {
        op.validate().map_err(ParseError::ParseFailure)?;
    }
    Ok(ops)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fenced_block_basic() {
        assert_eq!(parse_fenced_code("```\nprint(1)\n```").as_deref(), Some("print(1)"));
    }

    #[test]
    fn fenced_block_absent() {
        assert_eq!(parse_fenced_code("no fences here"), None);
        assert_eq!(parse_fenced_code("``` unterminated\nbody"), None);
    }

    #[test]
    fn fenced_block_takes_last_of_two() {
        let text = "first:\n```\none\n```\nthen:\n```python\ntwo\n```\ndone";
        assert_eq!(parse_fenced_code(text).as_deref(), Some("two"));
    }

    #[test]
    fn diff_from_prose_with_fences() {
        let text = "Here is the fix you asked for:\n\n```diff\n--- a/x.py\n+++ b/x.py\n@@ -1 +1 @@\n-a\n+b\n```\nThat should do it.";
        let patch = parse_unified_diff(text).unwrap();
        assert_eq!(patch.files.len(), 1);
        assert_eq!(patch.files[0].old_path.as_deref(), Some("x.py"));
    }

    #[test]
    fn bare_diff_without_fences() {
        let text = "--- a/x.py\n+++ b/x.py\n@@ -1 +1 @@\n-a\n+b\n";
        assert!(parse_unified_diff(text).is_ok());
    }

    #[test]
    fn answer_without_diff_is_malformed() {
        let err = parse_unified_diff("I could not produce a patch.").unwrap_err();
        assert!(matches!(err, DiffError::MalformedDiff { .. }));
    }

    #[test]
    fn insight_ops_add() {
        let ops = parse_insight_ops("```json\n[{\"op\":\"ADD\",\"text\":\"check imports\"}]\n```").unwrap();
        assert_eq!(ops.len(), 1);
        assert!(matches!(&ops[0], InsightOp::Add { text } if text == "check imports"));
    }

    #[test]
    fn insight_ops_missing_fields_fail() {
        let err = parse_insight_ops("[{\"op\":\"EDIT\"}]").unwrap_err();
        assert!(matches!(err, ParseError::ParseFailure(_)));
    }

    #[test]
    fn insight_ops_all_five_parsed() {
        let body = r#"[
            {"op":"ADD","text":"a"},
            {"op":"ADD","text":"b"},
            {"op":"REMOVE","target_id":"ins-1"},
            {"op":"EDIT","target_id":"ins-2","text":"c"},
            {"op":"ADD","text":"d"}
        ]"#;
        let ops = parse_insight_ops(body).unwrap();
        assert_eq!(ops.len(), 5);
    }
}
