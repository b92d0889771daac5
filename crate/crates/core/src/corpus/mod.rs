//! Sentences, gold entities, and the tooling around them: JSONL ingestion
//! and validation, entity-safe sentence splitting, conflict and duplicate
//! audits, corpus statistics, document-level splits, target grids, and a
//! synthetic nested-entity generator.

pub mod io;
pub mod preprocess;
pub mod stats;
pub mod synth;
pub mod targets;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{load_corpus, parse_documents, parse_records, read_documents, read_records, to_jsonl, write_corpus, write_records, LoadOptions};
pub use preprocess::{
    audit, document_split, fix, split_sentences_entity_safe, AuditReport, ConflictGroup, Document, Duplicate, SplitRatios,
};
pub use stats::{corpus_stats, split_stats, SplitStats, StatsReport};
pub use synth::{synth_corpus, synth_generate, SynthConfig};
pub use targets::build_targets;

/// A mention `(start, end, type)` with an inclusive end index.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Entity {
    pub start: usize,
    pub end: usize,
    #[serde(rename = "type")]
    pub label: String,
}

impl Entity {
    pub fn new(start: usize, end: usize, label: impl Into<String>) -> Self {
        Entity {
            start,
            end,
            label: label.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.end + 1 - self.start
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Shares at least one token with `other`.
    pub fn overlaps(&self, other: &Entity) -> bool {
        self.start <= other.end && other.start <= self.end
    }

    /// Partial overlap where neither span contains the other.
    pub fn crosses(&self, other: &Entity) -> bool {
        spans_cross((self.start, self.end), (other.start, other.end))
    }
}

/// `(s1, e1)` and `(s2, e2)` cross iff `s1 < s2 <= e1 < e2` or
/// `s2 < s1 <= e2 < e1`. Nesting and identity are not crossings.
pub fn spans_cross(a: (usize, usize), b: (usize, usize)) -> bool {
    let ((s1, e1), (s2, e2)) = (a, b);
    (s1 < s2 && s2 <= e1 && e1 < e2) || (s2 < s1 && s1 <= e2 && e2 < e1)
}

/// Every valid span `(i, j)`, `i <= j < n`, in row-major order.
pub fn enumerate_spans(n: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..n).flat_map(move |i| (i..n).map(move |j| (i, j)))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub tokens: Vec<String>,
    #[serde(default)]
    pub entities: Vec<Entity>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub doc_id: Option<String>,
}

impl Sentence {
    pub fn new(tokens: Vec<String>, entities: Vec<Entity>) -> Self {
        Sentence {
            tokens,
            entities,
            doc_id: None,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Index bounds only.
    pub fn check_bounds(&self) -> Result<()> {
        for e in &self.entities {
            if e.start > e.end || e.end >= self.tokens.len() {
                return Err(Error::Validation(format!(
                    "entity ({}, {}, {}) out of range for {} tokens",
                    e.start,
                    e.end,
                    e.label,
                    self.tokens.len()
                )));
            }
        }
        Ok(())
    }

    /// Bounds, no crossing pairs, no repeated triples.
    pub fn validate(&self) -> Result<()> {
        self.check_bounds()?;
        for (a, ea) in self.entities.iter().enumerate() {
            for eb in &self.entities[a + 1..] {
                if ea.crosses(eb) {
                    return Err(Error::Validation(format!(
                        "entities ({}, {}, {}) and ({}, {}, {}) cross",
                        ea.start, ea.end, ea.label, eb.start, eb.end, eb.label
                    )));
                }
                if ea == eb {
                    return Err(Error::Validation(format!(
                        "entity ({}, {}, {}) is listed twice",
                        ea.start, ea.end, ea.label
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn entity_set(&self) -> BTreeSet<Entity> {
        self.entities.iter().cloned().collect()
    }
}

/// Entity type names in a fixed order; a type's id is its index.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TypeInventory(Vec<String>);

impl TypeInventory {
    pub fn new(mut names: Vec<String>) -> Self {
        names.sort();
        names.dedup();
        TypeInventory(names)
    }

    pub fn from_sentences<'a>(sentences: impl IntoIterator<Item = &'a Sentence>) -> Self {
        Self::new(
            sentences
                .into_iter()
                .flat_map(|s| s.entities.iter().map(|e| e.label.clone()))
                .collect(),
        )
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.0.binary_search_by(|n| n.as_str().cmp(name)).ok()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.0[id]
    }

    pub fn names(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    pub train: Vec<Sentence>,
    pub dev: Vec<Sentence>,
    pub test: Vec<Sentence>,
    pub types: TypeInventory,
}

impl Corpus {
    /// Builds a corpus and derives the type inventory from all splits.
    pub fn from_splits(train: Vec<Sentence>, dev: Vec<Sentence>, test: Vec<Sentence>) -> Self {
        let types = TypeInventory::from_sentences(train.iter().chain(&dev).chain(&test));
        Corpus { train, dev, test, types }
    }

    pub fn splits(&self) -> [(&'static str, &[Sentence]); 3] {
        [("train", &self.train), ("dev", &self.dev), ("test", &self.test)]
    }

    pub fn is_empty(&self) -> bool {
        self.train.is_empty() && self.dev.is_empty() && self.test.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crossing_predicate() {
        assert!(spans_cross((1, 3), (2, 4)));
        assert!(spans_cross((2, 4), (1, 3)));
        assert!(!spans_cross((2, 4), (2, 3)));
        assert!(!spans_cross((2, 4), (2, 4)));
        assert!(!spans_cross((0, 1), (2, 3)));
        assert!(!spans_cross((0, 5), (2, 3)));
    }

    #[test]
    fn span_count_is_triangular() {
        for n in 1..50 {
            assert_eq!(enumerate_spans(n).count(), n * (n + 1) / 2);
        }
        assert_eq!(enumerate_spans(4).count(), 10);
    }

    #[test]
    fn validate_names_crossing_pair() {
        let s = Sentence::new(
            "a b c d e".split(' ').map(String::from).collect(),
            vec![Entity::new(1, 3, "X"), Entity::new(2, 4, "Y")],
        );
        let msg = s.validate().unwrap_err().to_string();
        assert!(msg.contains("(1, 3, X)") && msg.contains("(2, 4, Y)"), "{msg}");
    }

    #[test]
    fn type_ids_are_sorted() {
        let t = TypeInventory::new(vec!["PER".into(), "GPE".into(), "PER".into()]);
        assert_eq!(t.names(), &["GPE".to_string(), "PER".to_string()]);
        assert_eq!(t.id("PER"), Some(1));
        assert_eq!(t.id("ORG"), None);
    }
}
