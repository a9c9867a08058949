//! Corpus loading: plain text split on blank lines, or JSON Lines with a `text` field.

use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CorpusFormat {
    Plain,
    JsonLines,
}

impl CorpusFormat {
    /// `.jsonl` and `.ndjson` files are JSON Lines; everything else is plain text.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl" | "ndjson") => Self::JsonLines,
            _ => Self::Plain,
        }
    }
}

#[derive(Deserialize)]
struct Line {
    text: String,
}

pub fn parse_plain(text: &str) -> Vec<String> {
    let mut docs = Vec::new();
    let mut current: Vec<&str> = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            if !current.is_empty() {
                docs.push(current.join("\n"));
                current.clear();
            }
        } else {
            current.push(line);
        }
    }
    if !current.is_empty() {
        docs.push(current.join("\n"));
    }
    docs
}

/// Parses JSON Lines. `path` is used only for error messages.
pub fn parse_jsonl(text: &str, path: &Path) -> Result<Vec<String>> {
    let mut docs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: Line = serde_json::from_str(line).map_err(|e| Error::Corpus {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        if !parsed.text.is_empty() {
            docs.push(parsed.text);
        }
    }
    Ok(docs)
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    match CorpusFormat::from_path(path) {
        CorpusFormat::Plain => Ok(parse_plain(&text)),
        CorpusFormat::JsonLines => parse_jsonl(&text, path),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_splits_on_blank_lines() {
        assert_eq!(parse_plain("a\n\nb"), vec!["a", "b"]);
        assert_eq!(parse_plain("a\nb\n\n\n  \nc\n\n\n"), vec!["a\nb", "c"]);
        assert!(parse_plain("\n\n").is_empty());
    }

    #[test]
    fn jsonl_reads_text_and_reports_line() {
        let p = Path::new("x.jsonl");
        assert_eq!(
            parse_jsonl("{\"text\":\"hi\"}\n{\"text\":\"yo\"}", p).unwrap(),
            vec!["hi", "yo"]
        );
        match parse_jsonl("{\"text\":\"hi\"}\n{oops}\n", p) {
            Err(Error::Corpus { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn loads_from_disk() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("c.jsonl");
        std::fs::write(&f, "{\"text\":\"\"}\n{\"text\":\"ok\"}\n").unwrap();
        assert_eq!(load_corpus(&f).unwrap(), vec!["ok"]);
        assert!(matches!(
            load_corpus(dir.path().join("missing.txt")),
            Err(Error::Io { .. })
        ));
    }
}
