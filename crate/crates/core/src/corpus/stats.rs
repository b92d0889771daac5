//! Per-split corpus statistics.

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Sentence};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitStats {
    pub sentences: usize,
    pub mentions: usize,
    pub avg_sentence_len: f64,
    pub avg_mention_len: f64,
    /// Mentions sharing a token with at least one other mention in the
    /// same sentence, each counted once.
    pub overlapping_mentions: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub train: SplitStats,
    pub dev: SplitStats,
    pub test: SplitStats,
}

fn mean(total: usize, count: usize) -> f64 {
    if count == 0 {
        0.0
    } else {
        total as f64 / count as f64
    }
}

pub fn split_stats(sentences: &[Sentence]) -> SplitStats {
    let mut tokens = 0;
    let mut mentions = 0;
    let mut mention_tokens = 0;
    let mut overlapping = 0;
    for s in sentences {
        tokens += s.len();
        mentions += s.entities.len();
        for (a, ea) in s.entities.iter().enumerate() {
            mention_tokens += ea.len();
            if s.entities.iter().enumerate().any(|(b, eb)| a != b && ea.overlaps(eb)) {
                overlapping += 1;
            }
        }
    }
    SplitStats {
        sentences: sentences.len(),
        mentions,
        avg_sentence_len: mean(tokens, sentences.len()),
        avg_mention_len: mean(mention_tokens, mentions),
        overlapping_mentions: overlapping,
    }
}

pub fn corpus_stats(corpus: &Corpus) -> StatsReport {
    StatsReport {
        train: split_stats(&corpus.train),
        dev: split_stats(&corpus.dev),
        test: split_stats(&corpus.test),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Entity;

    #[test]
    fn single_sentence() {
        let s = Sentence::new((0..5).map(|i| i.to_string()).collect(), vec![Entity::new(1, 2, "X")]);
        let st = split_stats(&[s]);
        assert_eq!(
            st,
            SplitStats {
                sentences: 1,
                mentions: 1,
                avg_sentence_len: 5.0,
                avg_mention_len: 2.0,
                overlapping_mentions: 0,
            }
        );
    }

    #[test]
    fn nested_pair_counts_two() {
        let s = Sentence::new(
            (0..5).map(|i| i.to_string()).collect(),
            vec![Entity::new(1, 3, "X"), Entity::new(2, 3, "Y"), Entity::new(4, 4, "Z")],
        );
        assert_eq!(split_stats(&[s]).overlapping_mentions, 2);
    }

    #[test]
    fn empty_split_has_zero_means() {
        assert_eq!(split_stats(&[]), SplitStats::default());
    }
}
