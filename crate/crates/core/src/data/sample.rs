use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Task genre of a sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskTag {
    /// Answerable from stored knowledge (multiple choice, scored by accuracy).
    Knowledge,
    /// Must additionally follow a prescribed output format (scored by micro-F1).
    Alignment,
}

/// One `(input, target)` training pair. `options`, when present, are the candidate answers
/// of a multiple-choice item in lettered order; the target is then the correct letter.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sample {
    pub input: String,
    pub target: String,
    pub task: TaskTag,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub options: Option<Vec<String>>,
}

impl Sample {
    pub fn new(input: impl Into<String>, target: impl Into<String>, task: TaskTag) -> Self {
        Self {
            input: input.into(),
            target: target.into(),
            task,
            options: None,
        }
    }
}

/// Letter shown in front of option `i` (`A`, `B`, ...).
pub fn option_letter(i: usize) -> String {
    char::from(b'A' + i as u8).to_string()
}

/// One JSON object per line; blank lines are skipped. Errors carry the 1-based line number.
pub fn load_jsonl(path: &Path) -> Result<Vec<Sample>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(BufReader::new(file))
}

pub fn parse_jsonl(reader: impl BufRead) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::Ingestion {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: Sample = serde_json::from_str(&line).map_err(|e| Error::Ingestion {
            line: line_no,
            message: e.to_string(),
        })?;
        if sample.target.is_empty() {
            return Err(Error::Ingestion {
                line: line_no,
                message: "empty target".into(),
            });
        }
        out.push(sample);
    }
    Ok(out)
}

pub fn write_jsonl(path: &Path, samples: &[Sample]) -> Result<()> {
    let mut buf = Vec::new();
    for s in samples {
        serde_json::to_writer(&mut buf, s)?;
        buf.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn malformed_line_is_reported_by_number() {
        let text = concat!(
            r#"{"input":"a","target":"b","task":"knowledge"}"#,
            "\n",
            r#"{"input":"c","target":"d","task":"alignment","options":["x"]}"#,
            "\n",
            r#"{"input":"e","task":"alignment"}"#,
            "\n"
        );
        let err = parse_jsonl(text.as_bytes()).unwrap_err();
        match err {
            Error::Ingestion { line, message } => {
                assert_eq!(line, 3);
                assert!(message.contains("target"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_task_tag_is_rejected() {
        let text = r#"{"input":"a","target":"b","task":"poetry"}"#;
        assert!(matches!(
            parse_jsonl(text.as_bytes()),
            Err(Error::Ingestion { line: 1, .. })
        ));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.jsonl");
        let mut s = Sample::new("q", "A", TaskTag::Knowledge);
        s.options = Some(vec!["x".into(), "y".into()]);
        let samples = vec![s, Sample::new("é", "[NONE]", TaskTag::Alignment)];
        write_jsonl(&p, &samples).unwrap();
        assert_eq!(load_jsonl(&p).unwrap(), samples);
        let raw = std::fs::read_to_string(&p).unwrap();
        assert!(!raw.contains('\r'));
        assert_eq!(raw.lines().count(), 2);
    }
}
