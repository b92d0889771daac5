//! Batched prediction and evaluation with a fixed parameter snapshot.

use serde::{Deserialize, Serialize};

use crate::corpus::{Entity, Sentence, TypeInventory};
use crate::decode::{decode_with, DecodedEntity, LabelMode};
use crate::error::Result;
use crate::metrics::{Evaluator, Flatness, MetricsReport};
use crate::model::{Batch, SpanScorer};
use crate::tensor::Scalar;
use crate::train::vocab::Vocab;

const PREDICT_BATCH: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredEntity {
    pub start: usize,
    pub end: usize,
    #[serde(rename = "type")]
    pub label: String,
    pub score: f64,
}

/// One output line of `predict`. Readable back as a corpus record; the
/// extra `score` field is ignored there.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub tokens: Vec<String>,
    pub entities: Vec<ScoredEntity>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub doc_id: Option<String>,
}

impl PredictionRecord {
    pub fn entity_set(&self) -> std::collections::BTreeSet<Entity> {
        self.entities.iter().map(|e| Entity::new(e.start, e.end, e.label.clone())).collect()
    }
}

pub struct Predictor<'a, F> {
    pub scorer: &'a SpanScorer<F>,
    pub vocab: &'a Vocab,
    pub types: &'a TypeInventory,
}

impl<F: Scalar> Predictor<'_, F> {
    /// Decoded spans per sentence, in input order. Empty sentences decode
    /// to nothing without touching the model.
    pub fn decode_all(&self, sentences: &[Sentence], threshold: f64, mode: LabelMode) -> Result<Vec<Vec<DecodedEntity>>> {
        crate::decode::check_threshold(threshold)?;
        let mut out = vec![Vec::new(); sentences.len()];
        let live: Vec<usize> = (0..sentences.len()).filter(|&i| !sentences[i].is_empty()).collect();
        for chunk in live.chunks(PREDICT_BATCH) {
            let ids: Vec<Vec<usize>> = chunk.iter().map(|&i| self.vocab.ids(&sentences[i].tokens)).collect();
            let probs = self.scorer.predict_probabilities(&Batch::from_token_ids(&ids))?;
            for (&i, p) in chunk.iter().zip(&probs) {
                out[i] = decode_with(p, threshold, mode)?;
            }
        }
        Ok(out)
    }

    pub fn predict(&self, sentences: &[Sentence], threshold: f64, mode: LabelMode) -> Result<Vec<PredictionRecord>> {
        let decoded = self.decode_all(sentences, threshold, mode)?;
        Ok(sentences
            .iter()
            .zip(decoded)
            .map(|(s, ents)| PredictionRecord {
                tokens: s.tokens.clone(),
                entities: ents
                    .iter()
                    .flat_map(|e| {
                        e.types.iter().map(move |&(t, score)| ScoredEntity {
                            start: e.start,
                            end: e.end,
                            label: self.types.name(t).to_string(),
                            score,
                        })
                    })
                    .collect(),
                doc_id: s.doc_id.clone(),
            })
            .collect())
    }

    pub fn evaluate(&self, sentences: &[Sentence], threshold: f64, mode: LabelMode, flatness: Flatness) -> Result<MetricsReport> {
        let records = self.predict(sentences, threshold, mode)?;
        let mut ev = Evaluator::new(flatness);
        for (s, r) in sentences.iter().zip(&records) {
            ev.add(&r.entity_set(), &s.entity_set());
        }
        Ok(ev.report())
    }
}
