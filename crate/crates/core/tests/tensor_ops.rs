use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use span_ner::tensor::gradcheck::check_gradients;
use span_ner::tensor::{
    conv2d_zero_pad, layer_norm_feature, matmul, piecewise_max_pool, Activation, Graph, Mask, Tensor,
};

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Direct summation with signed offsets; independent of the kernel's
/// slice-based loops.
fn conv_oracle(x: &Tensor<f64>, k: &Tensor<f64>, mask: &[Vec<bool>]) -> Vec<f64> {
    let (n, cin) = (x.shape()[0], x.shape()[2]);
    let (ks, cout) = (k.shape()[0], k.shape()[3]);
    let half = (ks / 2) as i64;
    let mut out = vec![0.0; n * n * cout];
    for i in 0..n as i64 {
        for j in 0..n as i64 {
            if !mask[i as usize][j as usize] {
                continue;
            }
            for o in 0..cout {
                let mut s = 0.0;
                for di in -half..=half {
                    for dj in -half..=half {
                        let (ii, jj) = (i + di, j + dj);
                        if ii < 0 || jj < 0 || ii >= n as i64 || jj >= n as i64 || !mask[ii as usize][jj as usize] {
                            continue;
                        }
                        for ci in 0..cin {
                            s += x.at(&[ii as usize, jj as usize, ci])
                                * k.at(&[(di + half) as usize, (dj + half) as usize, ci, o]);
                        }
                    }
                }
                out[(i as usize * n + j as usize) * cout + o] = s;
            }
        }
    }
    out
}

#[test]
fn conv2d_matches_triple_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random(&mut rng, &[5, 5, 2]);
    let k = random(&mut rng, &[3, 3, 2, 2]);
    let full = vec![vec![true; 5]; 5];
    let got = conv2d_zero_pad(&x, &k, &Mask::all(&[5, 5])).unwrap();
    for (a, b) in got.data().iter().zip(conv_oracle(&x, &k, &full)) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }

    // a 3-token sentence padded to 5
    let lens_mask = Mask::grid(&[3], 5);
    let x3 = x.clone().reshape(&[1, 5, 5, 2]).unwrap();
    let partial: Vec<Vec<bool>> = (0..5).map(|i| (0..5).map(|j| i < 3 && j < 3).collect()).collect();
    let got = conv2d_zero_pad(&x3, &k, &lens_mask).unwrap();
    for (a, b) in got.data().iter().zip(conv_oracle(&x, &k, &partial)) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn conv2d_masked_cells_are_exact_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random(&mut rng, &[2, 6, 6, 3]);
    let k = random(&mut rng, &[3, 3, 3, 3]);
    let mask = Mask::grid(&[4, 6], 6);
    let out = conv2d_zero_pad(&x, &k, &mask).unwrap();
    for (row, &ok) in out.data().chunks(3).zip(mask.valid()) {
        if !ok {
            assert!(row.iter().all(|v| v.to_bits() == 0));
        }
    }
}

#[test]
fn layer_norm_matches_scalar_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random(&mut rng, &[7]);
    let gamma = random(&mut rng, &[7]);
    let beta = random(&mut rng, &[7]);
    let eps = 1e-5;
    let y = layer_norm_feature(&x, &gamma, &beta, eps).unwrap();
    let xs = x.data();
    let mean = xs.iter().sum::<f64>() / 7.0;
    let var = xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 7.0;
    for t in 0..7 {
        let expect = (xs[t] - mean) / (var + eps).sqrt() * gamma.data()[t] + beta.data()[t];
        assert!((y.data()[t] - expect).abs() < 1e-12);
    }
}

#[test]
fn max_pool_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = random(&mut rng, &[6, 4]);
    let got = piecewise_max_pool(&x, &[0..2, 2..6]).unwrap();
    for (w, range) in [(0usize, 0..2usize), (1, 2..6)] {
        for t in 0..4 {
            let m = range.clone().map(|r| x.at(&[r, t])).fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(got.at(&[w, t]), m);
        }
    }
}

#[test]
fn sigmoid_derivative_at_zero() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::scalar(0.0));
    let y = g.activation(x, Activation::Sigmoid);
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap()[0], 0.25);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::zeros(&[2]));
    assert!(g.backward(x).is_err());
}

#[test]
fn matmul_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let w = random(&mut rng, &[3, 3]);
    let inputs = vec![("a".to_string(), random(&mut rng, &[3, 3])), ("b".to_string(), random(&mut rng, &[3, 3]))];
    let reports = check_gradients(&inputs, 1e-3, 1e-8, |g, v| {
        let c = g.matmul(v[0], v[1])?;
        g.weighted_sum(c, w.clone())
    })
    .unwrap();
    for r in reports {
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }
}

/// Every recorded op against central differences on small random inputs.
#[test]
fn op_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let lens = [2usize, 4];
    let n = 4;
    let grid_mask = std::sync::Arc::new(Mask::grid(&lens, n));
    let seq_mask = std::sync::Arc::new(Mask::sequence(&lens, n));
    let probe_grid = random(&mut rng, &[2, n, n, 4]);
    let probe_seq = random(&mut rng, &[2, n, 4]);
    let inputs = vec![
        ("grid".to_string(), random(&mut rng, &[2, n, n, 4])),
        ("k2".to_string(), random(&mut rng, &[3, 3, 4, 4])),
        ("gamma".to_string(), random(&mut rng, &[4])),
        ("beta".to_string(), random(&mut rng, &[4])),
        ("seq".to_string(), random(&mut rng, &[2, n, 4])),
        ("k1".to_string(), random(&mut rng, &[3, 4, 4])),
        ("u".to_string(), random(&mut rng, &[2, 2, 2, 2])),
        ("table".to_string(), random(&mut rng, &[5, 4])),
        ("w".to_string(), random(&mut rng, &[4, 4])),
        ("bias".to_string(), random(&mut rng, &[4])),
    ];
    let reports = check_gradients(&inputs, 1e-4, 1e-6, |g, v| {
        let (grid, k2, gamma, beta, seq, k1, u, table, w, bias) =
            (v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8], v[9]);
        let conv = g.conv2d(grid, k2, grid_mask.clone())?;
        let res = g.add(conv, grid)?;
        let ln = g.layer_norm(res, gamma, beta, 1e-5)?;
        let act = g.activation(ln, Activation::Gelu);
        let masked = g.mask_cells(act, grid_mask.clone())?;
        let l1 = g.weighted_sum(masked, probe_grid.clone())?;

        let c1 = g.conv1d(seq, k1, seq_mask.clone())?;
        let lr = g.activation(c1, Activation::LeakyRelu { slope: 0.1 });
        let proj = g.matmul(lr, w)?;
        let hs = g.add_row(proj, bias)?;
        let bil = g.bilinear_heads(hs, seq, u, &lens)?;
        let ps = g.pair_sum(hs, seq, table, &lens, 2)?;
        let sum = g.add(bil, ps)?;
        let sg = g.activation(sum, Activation::Sigmoid);
        let l2 = g.weighted_sum(sg, probe_grid.clone())?;
        let l3 = g.weighted_sum(hs, probe_seq.clone())?;

        let wt = g.transpose(w)?;
        let rows = g.row_slice(wt, 1..3)?;
        let flat = g.matmul(rows, w)?;
        let l4 = g.weighted_sum(flat, Tensor::full(&[2, 4], 0.3))?;

        let s12 = g.add(l1, l2)?;
        let s34 = g.add(l3, l4)?;
        g.add(s12, s34)
    })
    .unwrap();
    for r in reports {
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }
}

#[test]
fn pooling_gather_and_bce_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let inputs = vec![
        ("pieces".to_string(), random(&mut rng, &[5, 3])),
        ("table".to_string(), random(&mut rng, &[4, 3])),
        ("logits".to_string(), random(&mut rng, &[1, 3, 3, 2])),
    ];
    let mut targets = Tensor::<f64>::zeros(&[1, 3, 3, 2]);
    targets.set(&[0, 0, 1, 1], 1.0);
    targets.set(&[0, 1, 0, 1], 1.0);
    let mask = std::sync::Arc::new(Mask::grid(&[2], 3));
    let probe = random(&mut rng, &[2, 3, 3]);
    let reports = check_gradients(&inputs, 1e-4, 1e-6, |g, v| {
        let w0 = g.piecewise_max_pool(v[0], &[0..2, 2..3, 3..5])?;
        let w1 = g.gather_rows(v[1], vec![Some(3), None, Some(0)], &[3])?;
        let stacked = g.stack_padded(vec![w0, w1], 3)?;
        let l1 = g.weighted_sum(stacked, probe.clone())?;
        let l2 = g.sigmoid_bce(v[2], targets.clone(), mask.clone())?;
        g.add(l1, l2)
    })
    .unwrap();
    for r in reports {
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn layer_norm_cells_are_standardized(values in proptest::collection::vec(-10.0f64..10.0, 8)) {
        let spread = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - values.iter().cloned().fold(f64::INFINITY, f64::min);
        prop_assume!(spread > 1e-2);
        let x = Tensor::new(&[8], values).unwrap();
        let eps = 1e-5;
        let y = layer_norm_feature(&x, &Tensor::full(&[8], 1.0), &Tensor::zeros(&[8]), eps).unwrap();
        let mean = y.data().iter().sum::<f64>() / 8.0;
        let var = y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
        let xs = x.data();
        let xm = xs.iter().sum::<f64>() / 8.0;
        let xv = xs.iter().map(|v| (v - xm).powi(2)).sum::<f64>() / 8.0;
        prop_assert!(mean.abs() < 1e-6);
        prop_assert!((var - xv / (xv + eps)).abs() < 1e-6);
    }

    #[test]
    fn matmul_is_deterministic(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&mut rng, &[4, 5]);
        let b = random(&mut rng, &[5, 3]);
        let x = matmul(&a, &b).unwrap();
        let y = matmul(&a, &b).unwrap();
        prop_assert!(x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}
