#![allow(dead_code)]

use std::collections::BTreeSet;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use span_ner::tensor::Tensor;

/// Straightforward re-statement of the decoding rules: average both
/// triangles, keep spans whose best type beats the threshold, repeatedly
/// take the best remaining span (earliest start, then earliest end on ties)
/// and accept it unless it crosses or repeats an accepted span.
pub fn reference_decode(p: &Tensor<f64>, threshold: f64) -> BTreeSet<(usize, usize, usize)> {
    let n = p.shape()[0];
    let t = p.shape()[2];
    let mut pool: Vec<(usize, usize, Vec<f64>)> = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if j < i {
                continue;
            }
            let mut scores = vec![0.0; t];
            for k in 0..t {
                scores[k] = (p.at(&[i, j, k]) + p.at(&[j, i, k])) / 2.0;
            }
            if scores.iter().any(|&s| s > threshold) {
                pool.push((i, j, scores));
            }
        }
    }
    let best = |s: &[f64]| s.iter().cloned().fold(f64::MIN, f64::max);
    let mut chosen: Vec<(usize, usize)> = Vec::new();
    let mut out = BTreeSet::new();
    while !pool.is_empty() {
        let mut pick = 0;
        for c in 1..pool.len() {
            let (a, b) = (&pool[c], &pool[pick]);
            let (sa, sb) = (best(&a.2), best(&b.2));
            if sa > sb || (sa == sb && (a.0, a.1) < (b.0, b.1)) {
                pick = c;
            }
        }
        let (s, e, scores) = pool.remove(pick);
        let bad = chosen.iter().any(|&(cs, ce)| {
            (cs, ce) == (s, e) || (cs < s && s <= ce && ce < e) || (s < cs && cs <= e && e < ce)
        });
        if bad {
            continue;
        }
        chosen.push((s, e));
        for (k, &v) in scores.iter().enumerate() {
            if v > threshold {
                out.insert((s, e, k));
            }
        }
    }
    out
}

/// Random `[n, n, t]` probability grid. Half the grids are quantized to a
/// coarse step so that equal scores occur.
pub fn random_grid(rng: &mut ChaCha8Rng, n: usize, t: usize) -> Tensor<f64> {
    let coarse = rng.random_bool(0.5);
    let data = (0..n * n * t)
        .map(|_| {
            let v: f64 = rng.random();
            if coarse {
                (v * 10.0).floor() / 10.0 + 0.05
            } else {
                v
            }
        })
        .collect();
    Tensor::new(&[n, n, t], data).unwrap()
}
