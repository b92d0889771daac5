//! Probability grid to non-crossing typed spans.
//!
//! The grid is averaged with its transpose, spans whose best type score does
//! not exceed the threshold are dropped, and the rest are accepted greedily
//! from the highest score down, skipping any span that crosses one already
//! accepted. Nested and disjoint spans never clash.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::corpus::spans_cross;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSpan {
    pub start: usize,
    pub end: usize,
    /// Averaged probability per type.
    pub scores: Vec<f64>,
    pub max_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodedEntity {
    pub start: usize,
    pub end: usize,
    /// `(type id, score)`, ascending by type id, never empty.
    pub types: Vec<(usize, f64)>,
}

impl DecodedEntity {
    pub fn triples(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        self.types.iter().map(move |&(t, _)| (self.start, self.end, t))
    }
}

/// Which types an accepted span reports.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    /// Every type above the threshold.
    #[default]
    MultiLabel,
    /// Only the best type.
    Argmax,
}

fn check_grid<F: Scalar>(p: &Tensor<F>) -> Result<(usize, usize)> {
    let s = p.shape();
    if s.len() != 3 || s[0] != s[1] {
        return Err(Error::dim("decode", s, &[s.first().copied().unwrap_or(0); 2]));
    }
    Ok((s[0], s[2]))
}

pub fn check_threshold(threshold: f64) -> Result<()> {
    if threshold > 0.0 && threshold < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("threshold {threshold} must lie in (0, 1)")))
    }
}

/// `P̂[i, j, t] = (P[i, j, t] + P[j, i, t]) / 2` for `i <= j`; the strict
/// lower triangle of the result is zero.
pub fn symmetrize<F: Scalar>(p: &Tensor<F>) -> Result<Tensor<f64>> {
    let (n, t) = check_grid(p)?;
    let src = p.cast::<f64>();
    let mut out = Tensor::zeros(&[n, n, t]);
    for i in 0..n {
        for j in i..n {
            for k in 0..t {
                out.set(&[i, j, k], (src.at(&[i, j, k]) + src.at(&[j, i, k])) / 2.0);
            }
        }
    }
    Ok(out)
}

fn rank_order(a: &CandidateSpan, b: &CandidateSpan) -> Ordering {
    b.max_score
        .total_cmp(&a.max_score)
        .then(a.start.cmp(&b.start))
        .then(a.end.cmp(&b.end))
}

/// Upper-triangle spans with a type score above `threshold`, best first;
/// ties go to the earlier start, then the earlier end.
pub fn prune_and_rank(p_hat: &Tensor<f64>, threshold: f64) -> Result<Vec<CandidateSpan>> {
    let (n, t) = check_grid(p_hat)?;
    let mut out = Vec::new();
    for i in 0..n {
        for j in i..n {
            let o = p_hat.offset(&[i, j, 0]);
            let scores = p_hat.data()[o..o + t].to_vec();
            let max_score = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if max_score > threshold {
                out.push(CandidateSpan {
                    start: i,
                    end: j,
                    scores,
                    max_score,
                });
            }
        }
    }
    out.sort_by(rank_order);
    Ok(out)
}

/// Accepts ranked spans that cross nothing accepted so far.
pub fn greedy_select(ranked: &[CandidateSpan], threshold: f64, mode: LabelMode) -> Vec<DecodedEntity> {
    let mut accepted: Vec<DecodedEntity> = Vec::new();
    for c in ranked {
        let clash = accepted
            .iter()
            .any(|a| (a.start, a.end) == (c.start, c.end) || spans_cross((a.start, a.end), (c.start, c.end)));
        if clash {
            continue;
        }
        let above = c.scores.iter().copied().enumerate().filter(|&(_, s)| s > threshold);
        let types: Vec<(usize, f64)> = match mode {
            LabelMode::MultiLabel => above.collect(),
            LabelMode::Argmax => above.fold(None, |best: Option<(usize, f64)>, (k, s)| match best {
                Some((_, b)) if b >= s => best,
                _ => Some((k, s)),
            })
            .into_iter()
            .collect(),
        };
        if !types.is_empty() {
            accepted.push(DecodedEntity {
                start: c.start,
                end: c.end,
                types,
            });
        }
    }
    accepted
}

pub fn decode<F: Scalar>(p: &Tensor<F>, threshold: f64) -> Result<Vec<DecodedEntity>> {
    decode_with(p, threshold, LabelMode::MultiLabel)
}

pub fn decode_with<F: Scalar>(p: &Tensor<F>, threshold: f64, mode: LabelMode) -> Result<Vec<DecodedEntity>> {
    check_threshold(threshold)?;
    let p_hat = symmetrize(p)?;
    Ok(greedy_select(&prune_and_rank(&p_hat, threshold)?, threshold, mode))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(n: usize, t: usize, cells: &[(usize, usize, usize, f64)]) -> Tensor<f64> {
        let mut p = Tensor::full(&[n, n, t], 0.1);
        for &(i, j, k, v) in cells {
            p.set(&[i, j, k], v);
            p.set(&[j, i, k], v);
        }
        p
    }

    fn spans(out: &[DecodedEntity]) -> Vec<(usize, usize)> {
        out.iter().map(|e| (e.start, e.end)).collect()
    }

    #[test]
    fn averages_the_two_triangles() {
        let mut p = Tensor::full(&[2, 2, 1], 0.0);
        p.set(&[0, 1, 0], 0.6);
        p.set(&[1, 0, 0], 0.8);
        assert!((symmetrize(&p).unwrap().at(&[0, 1, 0]) - 0.7).abs() < 1e-15);
    }

    #[test]
    fn half_everywhere_decodes_nothing() {
        assert!(decode(&Tensor::full(&[5, 5, 2], 0.5), 0.5).unwrap().is_empty());
    }

    #[test]
    fn just_above_threshold_is_kept() {
        let out = decode(&grid(4, 1, &[(1, 2, 0, 0.51)]), 0.5).unwrap();
        assert_eq!(out, vec![DecodedEntity { start: 1, end: 2, types: vec![(0, 0.51)] }]);
    }

    #[test]
    fn ties_break_by_start() {
        let p_hat = symmetrize(&grid(5, 1, &[(3, 3, 0, 0.7), (0, 4, 0, 0.9), (1, 1, 0, 0.7)])).unwrap();
        let ranked = prune_and_rank(&p_hat, 0.5).unwrap();
        assert_eq!(ranked.iter().map(|c| (c.start, c.end)).collect::<Vec<_>>(), vec![(0, 4), (1, 1), (3, 3)]);
    }

    #[test]
    fn nested_pair_is_kept() {
        let out = decode(&grid(6, 1, &[(2, 4, 0, 0.9), (2, 3, 0, 0.8)]), 0.5).unwrap();
        assert_eq!(spans(&out), vec![(2, 4), (2, 3)]);
    }

    #[test]
    fn crossing_pair_keeps_the_better() {
        let out = decode(&grid(6, 1, &[(1, 3, 0, 0.9), (2, 4, 0, 0.8)]), 0.5).unwrap();
        assert_eq!(spans(&out), vec![(1, 3)]);
    }

    #[test]
    fn multi_label_and_argmax() {
        let p = grid(3, 3, &[(0, 2, 0, 0.7), (0, 2, 2, 0.8)]);
        assert_eq!(decode(&p, 0.5).unwrap()[0].types, vec![(0, 0.7), (2, 0.8)]);
        assert_eq!(decode_with(&p, 0.5, LabelMode::Argmax).unwrap()[0].types, vec![(2, 0.8)]);
    }

    #[test]
    fn empty_input() {
        assert!(greedy_select(&[], 0.5, LabelMode::MultiLabel).is_empty());
        assert!(decode(&Tensor::<f64>::zeros(&[0, 0, 2]), 0.5).unwrap().is_empty());
    }

    #[test]
    fn threshold_must_be_open_unit() {
        for th in [0.0, 1.0, f64::NAN] {
            assert!(decode(&Tensor::<f64>::zeros(&[1, 1, 1]), th).is_err());
        }
    }
}
