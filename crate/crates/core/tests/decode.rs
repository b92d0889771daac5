mod common;

use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use span_ner::corpus::spans_cross;
use span_ner::decode::{decode, prune_and_rank, symmetrize, DecodedEntity};
use span_ner::tensor::Tensor;

fn triples(out: &[DecodedEntity]) -> BTreeSet<(usize, usize, usize)> {
    out.iter().flat_map(|e| e.triples()).collect()
}

#[test]
fn symmetrize_matches_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p = common::random_grid(&mut rng, 6, 2);
    let s = symmetrize(&p).unwrap();
    for i in 0..6 {
        for j in 0..6 {
            for k in 0..2 {
                let want = if i <= j { 0.5 * (p.at(&[i, j, k]) + p.at(&[j, i, k])) } else { 0.0 };
                assert_eq!(s.at(&[i, j, k]), want);
            }
        }
    }
}

#[test]
fn symmetric_grid_keeps_upper_triangle() {
    let mut p = Tensor::zeros(&[3, 3, 1]);
    for (i, j, v) in [(0, 1, 0.3), (0, 2, 0.9), (1, 2, 0.6)] {
        p.set(&[i, j, 0], v);
        p.set(&[j, i, 0], v);
    }
    let s = symmetrize(&p).unwrap();
    assert_eq!(s.at(&[0, 2, 0]), 0.9);
    assert_eq!(s.at(&[1, 2, 0]), 0.6);
}

#[test]
fn single_hot_cell_decodes_to_that_span() {
    let mut p = Tensor::full(&[5, 5, 2], 0.2);
    p.set(&[1, 3, 1], 0.95);
    p.set(&[3, 1, 1], 0.95);
    let out = decode(&p, 0.5).unwrap();
    assert_eq!(triples(&out), BTreeSet::from([(1, 3, 1)]));
}

#[test]
fn matches_reference_on_random_grids() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..500 {
        let n = rng.random_range(1..=8);
        let t = rng.random_range(1..=3);
        let p = common::random_grid(&mut rng, n, t);
        assert_eq!(triples(&decode(&p, 0.5).unwrap()), common::reference_decode(&p, 0.5));
    }
}

fn grid_strategy() -> impl Strategy<Value = Tensor<f64>> {
    (1usize..9, 1usize..4, any::<u64>()).prop_map(|(n, t, seed)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        common::random_grid(&mut rng, n, t)
    })
}

fn transpose(p: &Tensor<f64>) -> Tensor<f64> {
    let (n, t) = (p.shape()[0], p.shape()[2]);
    let mut out = Tensor::zeros(&[n, n, t]);
    for i in 0..n {
        for j in 0..n {
            for k in 0..t {
                out.set(&[i, j, k], p.at(&[j, i, k]));
            }
        }
    }
    out
}

proptest! {
    #[test]
    fn output_never_crosses(p in grid_strategy(), th in 0.05f64..0.95) {
        let out = decode(&p, th).unwrap();
        for a in &out {
            prop_assert!(!a.types.is_empty());
            prop_assert!(a.types.iter().all(|&(_, s)| s > th));
            for b in &out {
                prop_assert!(!spans_cross((a.start, a.end), (b.start, b.end)));
            }
        }
    }

    #[test]
    fn rejected_spans_are_explained(p in grid_strategy()) {
        let out = decode(&p, 0.5).unwrap();
        let ranked = prune_and_rank(&symmetrize(&p).unwrap(), 0.5).unwrap();
        let kept: BTreeSet<(usize, usize)> = out.iter().map(|e| (e.start, e.end)).collect();
        for (rank, c) in ranked.iter().enumerate() {
            if kept.contains(&(c.start, c.end)) {
                continue;
            }
            let blocked = ranked[..rank]
                .iter()
                .any(|h| kept.contains(&(h.start, h.end)) && spans_cross((h.start, h.end), (c.start, c.end)));
            prop_assert!(blocked, "span ({}, {}) dropped without a crossing winner", c.start, c.end);
        }
    }

    #[test]
    fn transpose_invariant(p in grid_strategy()) {
        prop_assert_eq!(decode(&p, 0.5).unwrap(), decode(&transpose(&p), 0.5).unwrap());
    }
}
