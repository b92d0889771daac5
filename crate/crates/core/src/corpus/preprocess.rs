//! Sentence splitting that never cuts an entity, annotation audits, and
//! document-level train/dev/test splits.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Entity, Sentence};
use crate::error::{Error, Result};

/// An unsplit document. `boundaries` are candidate sentence starts: a
/// boundary `b` cuts between tokens `b - 1` and `b`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    #[serde(default)]
    pub doc_id: Option<String>,
    pub tokens: Vec<String>,
    #[serde(default)]
    pub entities: Vec<Entity>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boundaries: Option<Vec<usize>>,
}

impl Document {
    /// Candidate boundaries after sentence-final punctuation.
    pub fn punctuation_boundaries(&self) -> Vec<usize> {
        self.tokens
            .iter()
            .enumerate()
            .filter(|(i, t)| matches!(t.as_str(), "." | "!" | "?") && i + 1 < self.tokens.len())
            .map(|(i, _)| i + 1)
            .collect()
    }
}

/// Cuts `tokens` at each candidate boundary that does not fall strictly
/// inside an entity, re-basing entity indices per sentence. Boundaries at
/// 0 or past the end are ignored.
pub fn split_sentences_entity_safe(
    tokens: &[String],
    entities: &[Entity],
    boundaries: &[usize],
    doc_id: Option<&str>,
) -> Vec<Sentence> {
    let n = tokens.len();
    let mut cuts: Vec<usize> = boundaries
        .iter()
        .copied()
        .filter(|&b| b > 0 && b < n)
        .filter(|&b| !entities.iter().any(|e| e.start < b && b <= e.end))
        .collect();
    cuts.sort_unstable();
    cuts.dedup();

    let mut starts = vec![0];
    starts.extend(cuts);
    let mut out = Vec::with_capacity(starts.len());
    for (k, &lo) in starts.iter().enumerate() {
        let hi = starts.get(k + 1).copied().unwrap_or(n);
        if lo >= hi {
            continue;
        }
        let ents = entities
            .iter()
            .filter(|e| e.start >= lo && e.start < hi)
            .map(|e| Entity::new(e.start - lo, e.end - lo, e.label.clone()))
            .collect();
        out.push(Sentence {
            tokens: tokens[lo..hi].to_vec(),
            entities: ents,
            doc_id: doc_id.map(str::to_string),
        });
    }
    out
}

/// Sentences sharing a token sequence but not an entity set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConflictGroup {
    pub tokens: Vec<String>,
    /// Indices of every sentence with this token sequence, in input order.
    pub sentences: Vec<usize>,
}

/// A triple listed more than once in one sentence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Duplicate {
    pub sentence: usize,
    pub entity: Entity,
    pub count: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditReport {
    pub conflicts: Vec<ConflictGroup>,
    pub duplicates: Vec<Duplicate>,
}

impl AuditReport {
    pub fn is_clean(&self) -> bool {
        self.conflicts.is_empty() && self.duplicates.is_empty()
    }
}

fn groups_by_text(sentences: &[Sentence]) -> Vec<Vec<usize>> {
    let mut index: HashMap<&[String], usize> = HashMap::new();
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for (i, s) in sentences.iter().enumerate() {
        let g = *index.entry(&s.tokens).or_insert_with(|| {
            groups.push(Vec::new());
            groups.len() - 1
        });
        groups[g].push(i);
    }
    groups
}

pub fn audit(sentences: &[Sentence]) -> AuditReport {
    let mut report = AuditReport::default();
    for group in groups_by_text(sentences) {
        let first = sentences[group[0]].entity_set();
        if group[1..].iter().any(|&i| sentences[i].entity_set() != first) {
            report.conflicts.push(ConflictGroup {
                tokens: sentences[group[0]].tokens.clone(),
                sentences: group,
            });
        }
    }
    for (i, s) in sentences.iter().enumerate() {
        let mut counts: BTreeMap<&Entity, usize> = BTreeMap::new();
        for e in &s.entities {
            *counts.entry(e).or_default() += 1;
        }
        for (e, count) in counts {
            if count > 1 {
                report.duplicates.push(Duplicate {
                    sentence: i,
                    entity: e.clone(),
                    count,
                });
            }
        }
    }
    report
}

/// Removes repeated triples, then within each conflict group keeps the
/// first sentence and every later one that agrees with it.
pub fn fix(sentences: &[Sentence]) -> Vec<Sentence> {
    let deduped: Vec<Sentence> = sentences
        .iter()
        .map(|s| {
            let mut seen = BTreeSet::new();
            let entities = s.entities.iter().filter(|e| seen.insert(*e)).cloned().collect();
            Sentence {
                entities,
                ..s.clone()
            }
        })
        .collect();
    let mut keep = vec![true; deduped.len()];
    for group in groups_by_text(&deduped) {
        let first = deduped[group[0]].entity_set();
        for &i in &group[1..] {
            if deduped[i].entity_set() != first {
                keep[i] = false;
            }
        }
    }
    deduped.into_iter().zip(keep).filter(|(_, k)| *k).map(|(s, _)| s).collect()
}

/// Relative split sizes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub dev: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 8.0,
            dev: 1.0,
            test: 1.0,
        }
    }
}

/// Shuffles documents by seed and partitions them by `ratios`. Dev and
/// test each get `max(1, round(D * share))` documents; train takes the rest.
pub fn document_split(sentences: Vec<Sentence>, ratios: SplitRatios, seed: u64) -> Result<Corpus> {
    let total = ratios.train + ratios.dev + ratios.test;
    if !(ratios.train > 0.0 && ratios.dev >= 0.0 && ratios.test >= 0.0 && total.is_finite()) {
        return Err(Error::Config(format!("invalid split ratios {ratios:?}")));
    }
    let mut order: Vec<String> = Vec::new();
    let mut docs: HashMap<String, Vec<Sentence>> = HashMap::new();
    for (i, s) in sentences.into_iter().enumerate() {
        let id = s
            .doc_id
            .clone()
            .ok_or_else(|| Error::Validation(format!("sentence {} has no doc_id", i + 1)))?;
        docs.entry(id.clone())
            .or_insert_with(|| {
                order.push(id);
                Vec::new()
            })
            .push(s);
    }
    let d = order.len();
    if d < 3 {
        return Err(Error::Validation(format!("document split needs at least 3 documents, got {d}")));
    }
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let share = |r: f64| ((d as f64 * r / total).round() as usize).max(1);
    let n_test = share(ratios.test);
    let n_dev = share(ratios.dev);
    if n_test + n_dev >= d {
        return Err(Error::Validation(format!("{d} documents are too few for ratios {ratios:?}")));
    }
    let n_train = d - n_dev - n_test;
    let mut take = |ids: &[String]| -> Vec<Sentence> { ids.iter().flat_map(|id| docs.remove(id).unwrap_or_default()).collect() };
    let train = take(&order[..n_train]);
    let dev = take(&order[n_train..n_train + n_dev]);
    let test = take(&order[n_train + n_dev..]);
    Ok(Corpus::from_splits(train, dev, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("t{i}")).collect()
    }

    #[test]
    fn no_entities_splits_everywhere() {
        let out = split_sentences_entity_safe(&toks(6), &[], &[2, 4], None);
        assert_eq!(out.iter().map(|s| s.len()).collect::<Vec<_>>(), vec![2, 2, 2]);
    }

    #[test]
    fn boundary_inside_entity_is_suppressed() {
        let ents = [Entity::new(2, 4, "X")];
        let out = split_sentences_entity_safe(&toks(7), &ents, &[3, 5], None);
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].tokens, toks(5));
        assert_eq!(out[0].entities, vec![Entity::new(2, 4, "X")]);
    }

    #[test]
    fn rebases_entities() {
        let ents = [Entity::new(0, 0, "A"), Entity::new(3, 4, "B")];
        let out = split_sentences_entity_safe(&toks(5), &ents, &[3], Some("d"));
        assert_eq!(out[1].entities, vec![Entity::new(0, 1, "B")]);
        assert_eq!(out[1].doc_id.as_deref(), Some("d"));
    }

    #[test]
    fn whole_document_entity_gives_one_sentence() {
        let out = split_sentences_entity_safe(&toks(5), &[Entity::new(0, 4, "X")], &[1, 2, 3, 4], None);
        assert_eq!(out.len(), 1);
    }

    #[test]
    fn audit_finds_conflict_and_duplicate() {
        let a = Sentence::new(toks(3), vec![Entity::new(0, 1, "X")]);
        let b = Sentence::new(toks(3), vec![Entity::new(0, 2, "X")]);
        let c = Sentence::new(toks(2), vec![Entity::new(0, 0, "Y"), Entity::new(0, 0, "Y")]);
        let report = audit(&[a.clone(), b, c]);
        assert_eq!(report.conflicts.len(), 1);
        assert_eq!(report.conflicts[0].sentences, vec![0, 1]);
        assert_eq!(report.duplicates.len(), 1);
        assert_eq!(report.duplicates[0].sentence, 2);
        assert!(audit(&[a]).is_clean());
    }

    #[test]
    fn ten_documents_split_eight_one_one() {
        let sents: Vec<Sentence> = (0..10)
            .flat_map(|d| {
                (0..3).map(move |k| Sentence {
                    tokens: vec![format!("s{k}")],
                    entities: vec![],
                    doc_id: Some(format!("doc{d}")),
                })
            })
            .collect();
        let c = document_split(sents.clone(), SplitRatios::default(), 7).unwrap();
        assert_eq!((c.train.len(), c.dev.len(), c.test.len()), (24, 3, 3));
        assert_eq!(c, document_split(sents, SplitRatios::default(), 7).unwrap());
    }

    #[test]
    fn too_few_documents() {
        let s = Sentence {
            tokens: vec!["a".into()],
            entities: vec![],
            doc_id: Some("d".into()),
        };
        assert!(document_split(vec![s], SplitRatios::default(), 0).is_err());
    }
}
