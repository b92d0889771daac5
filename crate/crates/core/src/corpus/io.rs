//! Line-delimited JSON corpus files.
//!
//! One record per line:
//!
//! ```json
//! {"tokens": ["New", "York", "University"], "entities": [{"start": 0, "end": 2, "type": "ORG"}], "doc_id": "d1"}
//! ```
//!
//! `end` is inclusive. `entities` and `doc_id` may be omitted. Blank lines
//! are skipped.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::corpus::{Corpus, Document, Sentence};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    /// Reject sentences longer than this many tokens.
    pub max_len: Option<usize>,
}

/// Parses records and checks index bounds. Crossing and duplicate entities
/// are left for [`Sentence::validate`] or the audit.
pub fn parse_records(text: &str) -> Result<Vec<Sentence>> {
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let sentence: Sentence = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        sentence.check_bounds().map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        out.push(sentence);
    }
    Ok(out)
}

/// Parses unsplit documents, checking entity bounds against the tokens.
pub fn parse_documents(text: &str) -> Result<Vec<Document>> {
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse { line: idx + 1, message };
        let doc: Document = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        let as_sentence = Sentence::new(doc.tokens.clone(), doc.entities.clone());
        as_sentence.check_bounds().map_err(|e| parse_err(e.to_string()))?;
        out.push(doc);
    }
    Ok(out)
}

pub fn read_documents(path: &Path) -> Result<Vec<Document>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_documents(&text)
}

pub fn read_records(path: &Path) -> Result<Vec<Sentence>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_records(&text)
}

fn validate_all(sentences: &[Sentence], opts: &LoadOptions, origin: &Path) -> Result<()> {
    for (i, s) in sentences.iter().enumerate() {
        s.validate()
            .map_err(|e| Error::Validation(format!("{} record {}: {e}", origin.display(), i + 1)))?;
        if let Some(cap) = opts.max_len {
            if s.len() > cap {
                return Err(Error::Validation(format!(
                    "{} record {}: {} tokens exceeds the limit of {cap}",
                    origin.display(),
                    i + 1,
                    s.len()
                )));
            }
        }
    }
    Ok(())
}

/// Loads and validates a corpus. A directory is read as
/// `train.jsonl`/`dev.jsonl`/`test.jsonl` (missing files are empty
/// splits); a single file becomes the train split.
pub fn load_corpus(path: &Path, opts: &LoadOptions) -> Result<Corpus> {
    let (train, dev, test) = if path.is_dir() {
        let split = |name: &str| -> Result<Vec<Sentence>> {
            let p = path.join(format!("{name}.jsonl"));
            if p.exists() {
                let s = read_records(&p)?;
                validate_all(&s, opts, &p)?;
                Ok(s)
            } else {
                Ok(Vec::new())
            }
        };
        (split("train")?, split("dev")?, split("test")?)
    } else {
        let s = read_records(path)?;
        validate_all(&s, opts, path)?;
        (s, Vec::new(), Vec::new())
    };
    Ok(Corpus::from_splits(train, dev, test))
}

pub fn to_jsonl<T: serde::Serialize>(records: &[T]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).map_err(|e| Error::Validation(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_records<T: serde::Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let text = to_jsonl(records)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Writes `train.jsonl`, `dev.jsonl` and `test.jsonl` into `dir`.
pub fn write_corpus(dir: &Path, corpus: &Corpus) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, split) in corpus.splits() {
        write_records(&dir.join(format!("{name}.jsonl")), split)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Entity;

    #[test]
    fn empty_input_is_empty_corpus() {
        assert!(parse_records("").unwrap().is_empty());
        assert!(parse_records("\n\n").unwrap().is_empty());
    }

    #[test]
    fn malformed_record_reports_line() {
        let text = "{\"tokens\": [\"a\"]}\n{\"tokens\": [\"a\"\n";
        match parse_records(text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn end_past_last_token_rejected() {
        let text = r#"{"tokens": ["a", "b"], "entities": [{"start": 1, "end": 2, "type": "X"}]}"#;
        match parse_records(text) {
            Err(Error::Parse { line: 1, message }) => assert!(message.contains("(1, 2, X)"), "{message}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn optional_fields() {
        let s = parse_records(r#"{"tokens": ["a"]}"#).unwrap();
        assert!(s[0].entities.is_empty() && s[0].doc_id.is_none());
        let s = parse_records(r#"{"tokens": ["a", "b"], "entities": [{"start": 0, "end": 1, "type": "X"}], "doc_id": "d"}"#)
            .unwrap();
        assert_eq!(s[0].entities, vec![Entity::new(0, 1, "X")]);
        assert_eq!(s[0].doc_id.as_deref(), Some("d"));
    }

    #[test]
    fn serialization_uses_type_key() {
        let s = Sentence::new(vec!["a".into()], vec![Entity::new(0, 0, "X")]);
        let line = serde_json::to_string(&s).unwrap();
        assert_eq!(line, r#"{"tokens":["a"],"entities":[{"start":0,"end":0,"type":"X"}]}"#);
    }
}
