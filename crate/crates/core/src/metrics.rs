//! Exact-match entity metrics with a flat/nested breakdown.
//!
//! An entity is nested when it shares a token with another entity of the
//! same set, flat otherwise. FEP is the share of predicted flat entities
//! found in gold, FER the share of gold flat entities found in the
//! prediction; NEP and NER are the same on the nested subsets. A breakdown
//! ratio with an empty denominator is `None`.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::corpus::Entity;

/// How predicted entities are sorted into flat and nested.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flatness {
    /// Each set judged on its own overlaps.
    #[default]
    OwnSet,
    /// A prediction is nested when it overlaps a gold entity other than
    /// itself.
    GoldStructure,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub correct: usize,
    pub predicted: usize,
    pub gold: usize,
}

impl Prf {
    /// Zero denominators give zero. F1 is taken as `2c / (p + g)`, the
    /// harmonic mean with a single rounding.
    pub fn from_counts(correct: usize, predicted: usize, gold: usize) -> Self {
        let div = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = div(correct, predicted);
        let recall = div(correct, gold);
        let f1 = div(2 * correct, predicted + gold);
        Prf {
            precision,
            recall,
            f1,
            correct,
            predicted,
            gold,
        }
    }
}

/// `hits / total`, absent when `total == 0`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Ratio {
    pub hits: usize,
    pub total: usize,
    pub value: Option<f64>,
}

impl Ratio {
    fn new(hits: usize, total: usize) -> Self {
        Ratio {
            hits,
            total,
            value: (total > 0).then(|| hits as f64 / total as f64),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Breakdown {
    pub fep: Ratio,
    pub fer: Ratio,
    pub nep: Ratio,
    pub ner: Ratio,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub fep: Option<f64>,
    pub fer: Option<f64>,
    pub nep: Option<f64>,
    pub ner: Option<f64>,
    pub supports: Supports,
    pub per_type: BTreeMap<String, Prf>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Supports {
    pub gold: usize,
    pub predicted: usize,
    pub correct: usize,
    pub gold_flat: usize,
    pub gold_nested: usize,
    pub pred_flat: usize,
    pub pred_nested: usize,
}

fn overlaps_other(e: &Entity, set: &BTreeSet<Entity>) -> bool {
    set.iter().any(|o| o != e && o.overlaps(e))
}

/// Splits one sentence's entities into `(flat, nested)`.
pub fn classify_flat_nested(set: &BTreeSet<Entity>) -> (BTreeSet<Entity>, BTreeSet<Entity>) {
    set.iter().cloned().partition(|e| !overlaps_other(e, set))
}

/// Corpus-wide micro P/R/F1 over per-sentence `(pred, gold)` sets.
pub fn micro_prf<'a>(pairs: impl IntoIterator<Item = (&'a BTreeSet<Entity>, &'a BTreeSet<Entity>)>) -> Prf {
    let (mut c, mut p, mut g) = (0, 0, 0);
    for (pred, gold) in pairs {
        c += pred.intersection(gold).count();
        p += pred.len();
        g += gold.len();
    }
    Prf::from_counts(c, p, g)
}

/// Accumulates per-sentence sets and produces a [`MetricsReport`].
#[derive(Debug, Clone, Default)]
pub struct Evaluator {
    flatness: Flatness,
    correct: usize,
    predicted: usize,
    gold: usize,
    counts: [usize; 8],
    per_type: BTreeMap<String, (usize, usize, usize)>,
}

impl Evaluator {
    pub fn new(flatness: Flatness) -> Self {
        Evaluator {
            flatness,
            ..Default::default()
        }
    }

    pub fn add(&mut self, pred: &BTreeSet<Entity>, gold: &BTreeSet<Entity>) {
        self.correct += pred.intersection(gold).count();
        self.predicted += pred.len();
        self.gold += gold.len();
        for e in pred {
            let slot = self.per_type.entry(e.label.clone()).or_default();
            slot.1 += 1;
            if gold.contains(e) {
                slot.0 += 1;
            }
        }
        for e in gold {
            self.per_type.entry(e.label.clone()).or_default().2 += 1;
        }

        let (gold_flat, gold_nested) = classify_flat_nested(gold);
        let (pred_flat, pred_nested): (BTreeSet<Entity>, BTreeSet<Entity>) = match self.flatness {
            Flatness::OwnSet => classify_flat_nested(pred),
            Flatness::GoldStructure => pred.iter().cloned().partition(|e| !overlaps_other(e, gold)),
        };
        let hits = |a: &BTreeSet<Entity>, b: &BTreeSet<Entity>| a.iter().filter(|e| b.contains(*e)).count();
        let update = [
            hits(&pred_flat, gold),
            pred_flat.len(),
            hits(&gold_flat, pred),
            gold_flat.len(),
            hits(&pred_nested, gold),
            pred_nested.len(),
            hits(&gold_nested, pred),
            gold_nested.len(),
        ];
        for (c, u) in self.counts.iter_mut().zip(update) {
            *c += u;
        }
    }

    pub fn breakdown(&self) -> Breakdown {
        let c = &self.counts;
        Breakdown {
            fep: Ratio::new(c[0], c[1]),
            fer: Ratio::new(c[2], c[3]),
            nep: Ratio::new(c[4], c[5]),
            ner: Ratio::new(c[6], c[7]),
        }
    }

    pub fn report(&self) -> MetricsReport {
        let prf = Prf::from_counts(self.correct, self.predicted, self.gold);
        let b = self.breakdown();
        MetricsReport {
            precision: prf.precision,
            recall: prf.recall,
            f1: prf.f1,
            fep: b.fep.value,
            fer: b.fer.value,
            nep: b.nep.value,
            ner: b.ner.value,
            supports: Supports {
                gold: self.gold,
                predicted: self.predicted,
                correct: self.correct,
                gold_flat: b.fer.total,
                gold_nested: b.ner.total,
                pred_flat: b.fep.total,
                pred_nested: b.nep.total,
            },
            per_type: self
                .per_type
                .iter()
                .map(|(k, &(c, p, g))| (k.clone(), Prf::from_counts(c, p, g)))
                .collect(),
        }
    }
}

/// Breakdown for a single pair of sets.
pub fn fep_fer_nep_ner(pred: &BTreeSet<Entity>, gold: &BTreeSet<Entity>, flatness: Flatness) -> Breakdown {
    let mut ev = Evaluator::new(flatness);
    ev.add(pred, gold);
    ev.breakdown()
}
