use std::fs;
use std::path::Path;

use serde::Deserialize;

use super::template::QaPair;
use crate::error::{Error, Result};

#[derive(Deserialize)]
struct Record {
    question: String,
    answer: String,
    #[serde(default)]
    verified: Option<bool>,
}

/// Pairs read from a line-delimited file plus one diagnostic per bad line.
#[derive(Debug, Default)]
pub struct IngestReport {
    pub pairs: Vec<QaPair>,
    pub diagnostics: Vec<Error>,
}

/// Parse JSON-lines text: one `{"question": .., "answer": ..}` per line.
///
/// Blank lines are skipped. Lines that fail to parse or validate become
/// [`Error::Parse`] diagnostics naming the 1-based line; order of the
/// remaining pairs is preserved.
pub fn parse_records(text: &str) -> IngestReport {
    let mut report = IngestReport::default();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<Record>(line)
            .map_err(|e| e.to_string())
            .and_then(|r| {
                let pair = QaPair {
                    question: r.question,
                    answer: r.answer,
                    verified: r.verified.unwrap_or(true),
                };
                pair.validate().map(|_| pair).map_err(|e| e.to_string())
            });
        match parsed {
            Ok(p) => report.pairs.push(p),
            Err(detail) => report.diagnostics.push(Error::Parse {
                line: line_no,
                detail,
            }),
        }
    }
    report
}

pub fn ingest(path: &Path) -> Result<IngestReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let report = parse_records(&text);
    for d in &report.diagnostics {
        log::warn!("{}: {d}", path.display());
    }
    Ok(report)
}

pub fn write_records(path: &Path, pairs: &[QaPair]) -> Result<()> {
    let mut s = String::new();
    for p in pairs {
        s.push_str(&serde_json::json!({"question": p.question, "answer": p.answer}).to_string());
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_empty_dataset() {
        let r = parse_records("");
        assert!(r.pairs.is_empty() && r.diagnostics.is_empty());
    }

    #[test]
    fn valid_lines_keep_order() {
        let text = r#"{"question":"a","answer":"1"}
{"question":"b","answer":"2"}
{"question":"c","answer":"3"}
"#;
        let r = parse_records(text);
        let qs: Vec<_> = r.pairs.iter().map(|p| p.question.as_str()).collect();
        assert_eq!(qs, ["a", "b", "c"]);
    }

    #[test]
    fn missing_field_names_the_line() {
        let r = parse_records("{\"question\":\"a\",\"answer\":\"1\"}\n{\"question\":\"b\"}\n");
        assert_eq!(r.pairs.len(), 1);
        match &r.diagnostics[..] {
            [Error::Parse { line, detail }] => {
                assert_eq!(*line, 2);
                assert!(detail.contains("answer"), "{detail}");
            }
            other => panic!("unexpected diagnostics {other:?}"),
        }
    }

    #[test]
    fn unreadable_file_is_io_error() {
        let err = ingest(Path::new("/definitely/not/here.jsonl")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }
}
