use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use span_ner::model::{
    bce_from_logits, pad_grids, Batch, InitOptions, ModelConfig, ModelParams, SentenceInput, SpanScorer,
};
use span_ner::train::{gradient_check, GradcheckConfig};
use span_ner::tensor::{offset_index, Graph, Mask, Tensor};

fn small_config() -> ModelConfig {
    ModelConfig {
        encoder_dim: 8,
        hidden_size: 8,
        biaffine_size: 4,
        num_heads: 2,
        length_embed_dim: 3,
        max_offset: 3,
        cnn_blocks: 1,
        num_types: 2,
        vocab_size: 20,
        ..Default::default()
    }
}

fn model(cfg: &ModelConfig, seed: u64) -> SpanScorer<f64> {
    SpanScorer::new(cfg.clone(), ModelParams::init(cfg, seed, InitOptions::default()).unwrap()).unwrap()
}

fn random_sentence(rng: &mut ChaCha8Rng, len: usize, vocab: usize) -> Vec<usize> {
    (0..len).map(|_| rng.random_range(0..vocab)).collect()
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn zero_parameters_give_zero_grid() {
    let cfg = small_config();
    let mut m = model(&cfg, 1);
    for t in m.params.tensors_mut() {
        t.data_mut().fill(0.0);
    }
    let batch = Batch::from_token_ids(&[vec![1, 2, 3, 4]]);
    let mut g = Graph::new();
    let fwd = m.forward(&mut g, &batch, None).unwrap();
    assert!(g.value(fwd.grid).data().iter().all(|&v| v == 0.0));
    let p = m.probabilities(&g, &fwd);
    assert!(p.data().iter().all(|&v| v == 0.5));
}

#[test]
fn length_selector_makes_grid_constant_along_diagonals() {
    let cfg = small_config();
    let mut m = model(&cfg, 2);
    let (h, c, r) = (cfg.hidden_size, cfg.length_embed_dim, cfg.biaffine_size);
    m.params.u.data_mut().fill(0.0);
    // W reads only the length-embedding block: row 2h+t feeds feature t.
    let mut w = Tensor::zeros(&[2 * h + c, r]);
    for t in 0..c.min(r) {
        w.set(&[2 * h + t, t], 1.0);
    }
    m.params.w_concat = w;
    let n = 9;
    let batch = Batch::from_token_ids(&[(0..n).collect()]);
    let mut g = Graph::new();
    let fwd = m.forward(&mut g, &batch, None).unwrap();
    let grid = g.value(fwd.grid);
    for i in 0..n {
        for j in 0..n {
            let off = offset_index(i, j, cfg.max_offset);
            for t in 0..r {
                let expect = if t < c { m.params.length_embeds.at(&[off, t]) } else { 0.0 };
                assert_eq!(grid.at(&[0, i, j, t]), expect, "cell ({i},{j},{t})");
            }
        }
    }
    // offsets beyond ±L share the clamped row
    assert_eq!(grid.at(&[0, 8, 0, 0]), grid.at(&[0, 7, 0, 0]));
    assert_eq!(grid.at(&[0, 0, 8, 1]), grid.at(&[0, 0, 4, 1]));
}

/// Multi-head bilinear features equal a single head whose tensor is block
/// diagonal over the hidden axis; with K heads of width r_k each, feature
/// `k*r_k + q` of the multi-head output is feature `k*r_k + q` of the
/// single-head output.
#[test]
fn heads_equal_block_diagonal_single_head() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (heads, hk, rk, n) = (3usize, 2usize, 2usize, 5usize);
    let h = heads * hk;
    let r = heads * rk;
    let hs = random_tensor(&mut rng, &[1, n, h]);
    let he = random_tensor(&mut rng, &[1, n, h]);
    let u = random_tensor(&mut rng, &[heads, hk, rk, hk]);
    let mut big = Tensor::<f64>::zeros(&[1, h, r, h]);
    for k in 0..heads {
        for a in 0..hk {
            for q in 0..rk {
                for c in 0..hk {
                    big.set(&[0, k * hk + a, k * rk + q, k * hk + c], u.at(&[k, a, q, c]));
                }
            }
        }
    }
    let mut g = Graph::new();
    let (vs, ve, vu, vb) = (g.constant(hs.clone()), g.constant(he.clone()), g.constant(u), g.constant(big.clone()));
    let multi = g.bilinear_heads(vs, ve, vu, &[n]).unwrap();
    let single = g.bilinear_heads(vs, ve, vb, &[n]).unwrap();
    let diff = g.value(multi).max_abs_diff(g.value(single));
    assert!(diff < 1e-12, "{diff}");
    // and against a direct quadruple loop
    for i in 0..n {
        for j in 0..n {
            for f in 0..r {
                let mut s = 0.0;
                for a in 0..h {
                    for c in 0..h {
                        s += hs.at(&[0, i, a]) * big.at(&[0, a, f, c]) * he.at(&[0, j, c]);
                    }
                }
                assert!((g.value(multi).at(&[0, i, j, f]) - s).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn output_layer_cases() {
    let cfg = small_config();
    let mut m = model(&cfg, 4);
    m.params.w_out.data_mut().fill(0.0);
    let batch = Batch::from_token_ids(&[vec![3, 1, 4]]);
    let mut g = Graph::new();
    let fwd = m.forward(&mut g, &batch, None).unwrap();
    assert!(m.probabilities(&g, &fwd).data().iter().all(|&p| p == 0.5));

    m.params.b_out.set(&[1], 10.0);
    let p = m.predict_probabilities(&batch).unwrap().remove(0);
    for i in 0..3 {
        for j in 0..3 {
            assert!((p.at(&[i, j, 1]) - 0.999_954_602_131_297_6).abs() < 1e-12);
            assert_eq!(p.at(&[i, j, 0]), 0.5);
        }
    }
}

#[test]
fn output_matches_per_cell_formula() {
    let cfg = small_config();
    let m = model(&cfg, 5);
    let batch = Batch::from_token_ids(&[vec![3, 1, 4, 1, 5]]);
    let mut g = Graph::new();
    let fwd = m.forward(&mut g, &batch, None).unwrap();
    let (r, r2) = (g.value(fwd.grid), g.value(fwd.refined.unwrap()));
    let p = m.probabilities(&g, &fwd);
    for i in 0..5 {
        for j in 0..5 {
            for t in 0..cfg.num_types {
                let mut z = m.params.b_out.at(&[t]);
                for f in 0..cfg.biaffine_size {
                    z += m.params.w_out.at(&[t, f]) * (r.at(&[0, i, j, f]) + r2.at(&[0, i, j, f]));
                }
                let expect = 1.0 / (1.0 + (-z).exp());
                assert!((p.at(&[0, i, j, t]) - expect).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn zero_kernels_refine_to_zero() {
    let cfg = small_config();
    let mut m = model(&cfg, 6);
    for k in m.params.block_kernels.iter_mut().chain(m.params.final_kernel.iter_mut()) {
        k.data_mut().fill(0.0);
    }
    let batch = Batch::from_token_ids(&[vec![1, 2, 3], vec![4, 5, 6, 7, 8]]);
    let mut g = Graph::new();
    let fwd = m.forward(&mut g, &batch, None).unwrap();
    assert!(g.value(fwd.refined.unwrap()).data().iter().all(|&v| v == 0.0));
}

#[test]
fn masked_cells_of_every_grid_are_zero() {
    let cfg = ModelConfig { cnn_blocks: 2, ..small_config() };
    let m = model(&cfg, 7);
    let batch = Batch::from_token_ids(&[vec![1, 2, 3], vec![4, 5, 6, 7, 8, 9]]);
    let mut g = Graph::new();
    let fwd = m.forward(&mut g, &batch, None).unwrap();
    let mask = batch.grid_mask();
    for v in [fwd.grid, fwd.refined.unwrap()] {
        let t = g.value(v);
        for (cell, &ok) in t.data().chunks(cfg.biaffine_size).zip(mask.valid()) {
            if !ok {
                assert!(cell.iter().all(|x| x.to_bits() == 0));
            }
        }
    }
}

#[test]
fn batch_matches_singletons_f32() {
    let cfg = ModelConfig { cnn_blocks: 2, ..small_config() };
    let m: SpanScorer<f32> =
        SpanScorer::new(cfg.clone(), ModelParams::init(&cfg, 8, InitOptions::default()).unwrap()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let sents = vec![random_sentence(&mut rng, 3, 20), random_sentence(&mut rng, 9, 20)];
    let batched = m.predict_probabilities(&Batch::from_token_ids(&sents)).unwrap();
    for (s, b) in sents.iter().zip(&batched) {
        let alone = m.predict_probabilities(&Batch::from_token_ids(std::slice::from_ref(s))).unwrap().remove(0);
        assert!(alone.max_abs_diff(b) <= 1e-6);
    }
}

#[test]
fn pass_through_single_pieces_is_identity() {
    let cfg = ModelConfig {
        encoder_dim: 8,
        hidden_size: 8,
        ..small_config()
    };
    let mut m = model(&cfg, 9);
    m.params.w_start = Tensor::eye(8);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let emb = random_tensor(&mut rng, &[4, 8]).map(f64::abs);
    let batch = Batch::new(vec![SentenceInput::Pieces {
        embeddings: emb.clone(),
        groups: vec![0..1, 1..2, 2..3, 3..4],
    }]);
    let mut g = Graph::new();
    let fwd = m.forward(&mut g, &batch, None).unwrap();
    assert_eq!(g.value(fwd.encoded).data(), emb.data());
    // LeakyReLU(H · I) = H for H >= 0
    assert_eq!(g.value(fwd.start).data(), emb.data());
}

#[test]
fn toy_encoder_shape_and_determinism() {
    let cfg = ModelConfig {
        encoder_dim: 16,
        ..small_config()
    };
    let m = model(&cfg, 10);
    let batch = Batch::from_token_ids(&[vec![1, 2, 3, 4, 5, 6, 7]]);
    let run = || {
        let mut g = Graph::new();
        let fwd = m.forward(&mut g, &batch, None).unwrap();
        g.value(fwd.encoded).clone()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.shape(), &[1, 7, 16]);
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn start_projection_negative_slope() {
    let cfg = ModelConfig {
        encoder_dim: 1,
        hidden_size: 2,
        num_heads: 1,
        ..small_config()
    };
    let mut m = model(&cfg, 11);
    m.params.w_start = Tensor::from_f64(&[1, 2], &[-2.0, 1.0]).unwrap();
    let batch = Batch::new(vec![SentenceInput::Pieces {
        embeddings: Tensor::from_f64(&[1, 1], &[1.0]).unwrap(),
        groups: vec![0..1],
    }]);
    let mut g = Graph::new();
    let fwd = m.forward(&mut g, &batch, None).unwrap();
    let hs = g.value(fwd.start).data();
    assert!((hs[0] + 0.02).abs() < 1e-15 && hs[1] == 1.0);
}

#[test]
fn zero_head_loss_is_ln2() {
    let cfg = small_config();
    let m = SpanScorer::<f64>::new(
        cfg.clone(),
        ModelParams::init(&cfg, 12, InitOptions { zero_head: true }).unwrap(),
    )
    .unwrap();
    let batch = Batch::from_token_ids(&[vec![1, 2], vec![3, 4, 5, 6]]);
    let mut y = Tensor::zeros(&[2, 4, 4, 2]);
    y.set(&[1, 0, 3, 1], 1.0);
    y.set(&[1, 3, 0, 1], 1.0);
    let mut g = Graph::new();
    let fwd = m.forward(&mut g, &batch, None).unwrap();
    let loss = m.loss(&mut g, &fwd, y).unwrap();
    assert!((g.value(loss).item() - std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn loss_from_logits_matches_graph() {
    let cfg = small_config();
    let m = model(&cfg, 13);
    let batch = Batch::from_token_ids(&[vec![1, 2, 3], vec![4, 5]]);
    let mut y1 = Tensor::zeros(&[3, 3, 2]);
    y1.set(&[0, 2, 0], 1.0);
    y1.set(&[2, 0, 0], 1.0);
    let y = pad_grids(&[y1, Tensor::zeros(&[2, 2, 2])], 3, 2).unwrap();
    let mut g = Graph::new();
    let fwd = m.forward(&mut g, &batch, None).unwrap();
    let loss = m.loss(&mut g, &fwd, y.clone()).unwrap();
    let direct = bce_from_logits(g.value(fwd.logits), &y, &Mask::grid(&[3, 2], 3)).unwrap();
    assert_eq!(g.value(loss).item(), direct);
}

#[test]
fn gradients_match_finite_differences_across_depths() {
    for blocks in [0, 2] {
        let mut cfg = GradcheckConfig::default();
        cfg.model.cnn_blocks = blocks;
        let out = gradient_check(&cfg).unwrap();
        assert!(out.min_preactivation > 1e-2, "{blocks} blocks: {}", out.min_preactivation);
        for r in &out.reports {
            assert!(r.array_rel_error < 1e-4, "{blocks} blocks: {r:?}");
        }
    }
}
