//! Forward pass from tokens to span probabilities.
//!
//! ```text
//! H  = Encoder(X)                         [B, n, d]
//! Hs = LeakyReLU(H W_s), He = LeakyReLU(H W_e)
//! R  = (Hs[i] ⊕ He[j] ⊕ w_{i-j}) W + Concat_k(Hs⁽ᵏ⁾[i] U⁽ᵏ⁾ He⁽ᵏ⁾[j]ᵀ)
//! R' = GeLU(LayerNorm(Conv(R) + R))       repeated per block, then one final conv
//! P  = Sigmoid(W_o (R + R') + b)
//! ```
//!
//! Padding cells of every grid are exact zeros, so a padded batch gives the
//! same per-sentence numbers as running each sentence alone.

use std::ops::Range;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::model::params::ModelParams;
use crate::tensor::kernels::{check_groups, softplus};
use crate::tensor::{Activation, Graph, Mask, Scalar, Tensor, Var};

/// Encoder input for one sentence.
#[derive(Debug, Clone)]
pub enum SentenceInput<F> {
    /// Ids into the built-in embedding table. Ids `>= vocab_size` use the
    /// unknown-token row.
    Tokens(Vec<usize>),
    /// Precomputed sub-word piece vectors `[p, d]` and, per word, the range
    /// of pieces it was split into. Words are max-pooled over their pieces
    /// and passed through unchanged.
    Pieces { embeddings: Tensor<F>, groups: Vec<Range<usize>> },
}

impl<F: Scalar> SentenceInput<F> {
    pub fn len(&self) -> usize {
        match self {
            SentenceInput::Tokens(ids) => ids.len(),
            SentenceInput::Pieces { groups, .. } => groups.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Sentences padded to a common length `n`.
#[derive(Debug, Clone)]
pub struct Batch<F> {
    pub inputs: Vec<SentenceInput<F>>,
    pub lens: Vec<usize>,
    pub n: usize,
}

impl<F: Scalar> Batch<F> {
    pub fn new(inputs: Vec<SentenceInput<F>>) -> Self {
        let lens: Vec<usize> = inputs.iter().map(|s| s.len()).collect();
        let n = lens.iter().copied().max().unwrap_or(0);
        Batch { inputs, lens, n }
    }

    pub fn from_token_ids(seqs: &[Vec<usize>]) -> Self {
        Self::new(seqs.iter().cloned().map(SentenceInput::Tokens).collect())
    }

    pub fn size(&self) -> usize {
        self.inputs.len()
    }

    pub fn grid_mask(&self) -> Mask {
        Mask::grid(&self.lens, self.n)
    }

    pub fn sequence_mask(&self) -> Mask {
        Mask::sequence(&self.lens, self.n)
    }
}

/// A span feature grid `[B, n, n, r]` with its validity mask.
#[derive(Debug, Clone)]
pub struct SpanGrid<F> {
    pub values: Tensor<F>,
    pub mask: Arc<Mask>,
}

/// Graph handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    /// Parameter vars, in [`ModelParams::named`] order.
    pub params: Vec<Var>,
    pub encoded: Var,
    pub start: Var,
    pub end: Var,
    pub grid: Var,
    pub refined: Option<Var>,
    pub logits: Var,
    pub grid_mask: Arc<Mask>,
}

/// Named parameter vars, indexed the same way as [`ModelParams`].
struct ParamVars {
    token_embeds: Var,
    encoder_convs: Vec<Var>,
    w_start: Var,
    w_end: Var,
    length_embeds: Var,
    w_concat: Var,
    u: Var,
    blocks: Vec<(Var, Var, Var)>,
    final_kernel: Option<Var>,
    w_out: Var,
    b_out: Var,
}

impl ParamVars {
    fn from_flat(flat: &[Var], cfg: &ModelConfig) -> Self {
        let mut it = flat.iter().copied();
        let mut next = || it.next().expect("parameter count");
        let token_embeds = next();
        let encoder_convs = (0..cfg.encoder_layers).map(|_| next()).collect();
        let w_start = next();
        let w_end = next();
        let length_embeds = next();
        let w_concat = next();
        let u = next();
        let blocks = (0..cfg.cnn_blocks).map(|_| (next(), next(), next())).collect();
        let final_kernel = (cfg.cnn_blocks > 0).then(&mut next);
        let w_out = next();
        let b_out = next();
        ParamVars {
            token_embeds,
            encoder_convs,
            w_start,
            w_end,
            length_embeds,
            w_concat,
            u,
            blocks,
            final_kernel,
            w_out,
            b_out,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SpanScorer<F> {
    pub config: ModelConfig,
    pub params: ModelParams<F>,
}

impl<F: Scalar> SpanScorer<F> {
    pub fn new(config: ModelConfig, params: ModelParams<F>) -> Result<Self> {
        config.validate()?;
        // Shape check against the config.
        let params = ModelParams::from_named(
            &config,
            params.named().into_iter().map(|(n, t)| (n, t.clone())).collect(),
        )?;
        Ok(SpanScorer { config, params })
    }

    /// Records the full forward pass. `dropout` applies inverted dropout to
    /// the encoder output with the given rate.
    pub fn forward(&self, g: &mut Graph<F>, batch: &Batch<F>, dropout: Option<(f64, &mut ChaCha8Rng)>) -> Result<Forward> {
        let flat: Vec<Var> = self.params.named().into_iter().map(|(_, t)| g.param(t.clone())).collect();
        self.forward_with(g, batch, &flat, dropout)
    }

    /// Like [`SpanScorer::forward`] but reads parameters from existing vars.
    pub fn forward_with(
        &self,
        g: &mut Graph<F>,
        batch: &Batch<F>,
        flat: &[Var],
        dropout: Option<(f64, &mut ChaCha8Rng)>,
    ) -> Result<Forward> {
        let pv = ParamVars::from_flat(flat, &self.config);
        let seq_mask = Arc::new(batch.sequence_mask());
        let grid_mask = Arc::new(batch.grid_mask());
        let mut encoded = self.encode_tokens(g, batch, &pv, &seq_mask)?;
        if let Some((rate, rng)) = dropout {
            if rate > 0.0 {
                let keep = 1.0 - rate;
                let factors = (0..g.value(encoded).numel())
                    .map(|_| if rng.random::<f64>() < keep { F::from_f64_lossy(1.0 / keep) } else { F::zero() })
                    .collect();
                encoded = g.scale(encoded, factors)?;
            }
        }
        let (start, end) = self.project_start_end(g, encoded, &pv)?;
        let grid = self.multi_head_biaffine(g, start, end, &batch.lens, &pv)?;
        let refined = self.cnn_refine(g, grid, &grid_mask, &pv)?;
        let logits = self.output_logits(g, grid, refined, &pv)?;
        Ok(Forward {
            params: flat.to_vec(),
            encoded,
            start,
            end,
            grid,
            refined,
            logits,
            grid_mask,
        })
    }

    fn encode_tokens(&self, g: &mut Graph<F>, batch: &Batch<F>, pv: &ParamVars, seq_mask: &Arc<Mask>) -> Result<Var> {
        let n = batch.n;
        let all_tokens = batch.inputs.iter().all(|s| matches!(s, SentenceInput::Tokens(_)));
        let all_pieces = batch.inputs.iter().all(|s| matches!(s, SentenceInput::Pieces { .. }));
        if all_tokens {
            let unk = self.config.vocab_size;
            let mut ids = Vec::with_capacity(batch.size() * n);
            for s in &batch.inputs {
                let SentenceInput::Tokens(tok) = s else { unreachable!() };
                ids.extend(tok.iter().map(|&t| Some(t.min(unk))));
                ids.extend(std::iter::repeat_n(None, n - tok.len()));
            }
            let mut h = g.gather_rows(pv.token_embeds, ids, &[batch.size(), n])?;
            for &kernel in &pv.encoder_convs {
                let mixed = g.conv1d(h, kernel, seq_mask.clone())?;
                let act = g.activation(mixed, Activation::Gelu);
                h = g.add(h, act)?;
            }
            Ok(h)
        } else if all_pieces {
            let mut words = Vec::with_capacity(batch.size());
            for s in &batch.inputs {
                let SentenceInput::Pieces { embeddings, groups } = s else { unreachable!() };
                if embeddings.rank() != 2 || embeddings.shape()[1] != self.config.encoder_dim {
                    return Err(Error::dim("piece embeddings", embeddings.shape(), &[0, self.config.encoder_dim]));
                }
                check_groups(groups, embeddings.shape()[0])?;
                let pieces = g.constant(embeddings.clone());
                words.push(g.piecewise_max_pool(pieces, groups)?);
            }
            g.stack_padded(words, n)
        } else {
            Err(Error::Validation("a batch must not mix token ids and piece embeddings".into()))
        }
    }

    fn project_start_end(&self, g: &mut Graph<F>, h: Var, pv: &ParamVars) -> Result<(Var, Var)> {
        let act = Activation::LeakyRelu {
            slope: self.config.leaky_slope,
        };
        let s = g.matmul(h, pv.w_start)?;
        let e = g.matmul(h, pv.w_end)?;
        Ok((g.activation(s, act), g.activation(e, act)))
    }

    fn multi_head_biaffine(&self, g: &mut Graph<F>, hs: Var, he: Var, lens: &[usize], pv: &ParamVars) -> Result<Var> {
        let h = self.config.hidden_size;
        let c = self.config.length_embed_dim;
        // (hs ⊕ he ⊕ w) W splits into three products over row blocks of W.
        let w1 = g.row_slice(pv.w_concat, 0..h)?;
        let w2 = g.row_slice(pv.w_concat, h..2 * h)?;
        let w3 = g.row_slice(pv.w_concat, 2 * h..2 * h + c)?;
        let a = g.matmul(hs, w1)?;
        let b = g.matmul(he, w2)?;
        let offsets = g.matmul(pv.length_embeds, w3)?;
        let concat_path = g.pair_sum(a, b, offsets, lens, self.config.max_offset)?;
        let bilinear_path = g.bilinear_heads(hs, he, pv.u, lens)?;
        g.add(concat_path, bilinear_path)
    }

    fn cnn_refine(&self, g: &mut Graph<F>, grid: Var, mask: &Arc<Mask>, pv: &ParamVars) -> Result<Option<Var>> {
        let Some(final_kernel) = pv.final_kernel else {
            return Ok(None);
        };
        let mut x = grid;
        for &(kernel, gamma, beta) in &pv.blocks {
            let conv = g.conv2d(x, kernel, mask.clone())?;
            let res = g.add(conv, x)?;
            let norm = g.layer_norm(res, gamma, beta, self.config.ln_eps)?;
            let act = g.activation(norm, Activation::Gelu);
            // LayerNorm maps zero cells to beta; padding must stay zero.
            x = g.mask_cells(act, mask.clone())?;
        }
        Ok(Some(g.conv2d(x, final_kernel, mask.clone())?))
    }

    fn output_logits(&self, g: &mut Graph<F>, grid: Var, refined: Option<Var>, pv: &ParamVars) -> Result<Var> {
        let features = match refined {
            Some(r2) => g.add(grid, r2)?,
            None => grid,
        };
        let w_t = g.transpose(pv.w_out)?;
        let z = g.matmul(features, w_t)?;
        g.add_row(z, pv.b_out)
    }

    /// Mean BCE of the forward pass against padded `[B, n, n, |T|]` targets.
    pub fn loss(&self, g: &mut Graph<F>, fwd: &Forward, targets: Tensor<F>) -> Result<Var> {
        g.sigmoid_bce(fwd.logits, targets, fwd.grid_mask.clone())
    }

    /// Probabilities `[B, n, n, |T|]`; padding cells hold `sigmoid(b)` and
    /// must be ignored.
    pub fn probabilities(&self, g: &Graph<F>, fwd: &Forward) -> Tensor<F> {
        g.value(fwd.logits).map(crate::tensor::sigmoid)
    }

    /// Runs a forward pass without keeping the graph and returns the
    /// per-sentence `[n_b, n_b, |T|]` probability grids.
    pub fn predict_probabilities(&self, batch: &Batch<F>) -> Result<Vec<Tensor<F>>> {
        let mut g = Graph::new();
        let fwd = self.forward(&mut g, batch, None)?;
        let probs = self.probabilities(&g, &fwd);
        Ok(split_grids(&probs, &batch.lens))
    }

    pub fn grid(&self, g: &Graph<F>, fwd: &Forward) -> SpanGrid<F> {
        SpanGrid {
            values: g.value(fwd.grid).clone(),
            mask: fwd.grid_mask.clone(),
        }
    }

    pub fn refined_grid(&self, g: &Graph<F>, fwd: &Forward) -> Option<SpanGrid<F>> {
        fwd.refined.map(|v| SpanGrid {
            values: g.value(v).clone(),
            mask: fwd.grid_mask.clone(),
        })
    }
}

/// Cuts a padded `[B, n, n, c]` tensor into per-sentence `[len, len, c]`
/// grids.
pub fn split_grids<F: Scalar>(padded: &Tensor<F>, lens: &[usize]) -> Vec<Tensor<F>> {
    let s = padded.shape();
    let (n, c) = (s[1], s[3]);
    lens.iter()
        .enumerate()
        .map(|(b, &len)| {
            let mut data = Vec::with_capacity(len * len * c);
            for i in 0..len {
                let o = ((b * n + i) * n) * c;
                data.extend_from_slice(&padded.data()[o..o + len * c]);
            }
            Tensor::new(&[len, len, c], data).expect("grid shape")
        })
        .collect()
}

/// Stacks per-sentence `[len, len, c]` grids into a zero-padded
/// `[B, n, n, c]` tensor.
pub fn pad_grids<F: Scalar>(grids: &[Tensor<F>], n: usize, c: usize) -> Result<Tensor<F>> {
    let mut out = Tensor::zeros(&[grids.len(), n, n, c]);
    for (b, grid) in grids.iter().enumerate() {
        let len = grid.shape()[0];
        if grid.shape() != [len, len, c] || len > n {
            return Err(Error::dim("pad_grids", grid.shape(), &[n, n, c]));
        }
        for i in 0..len {
            let o = ((b * n + i) * n) * c;
            out.data_mut()[o..o + len * c].copy_from_slice(&grid.data()[i * len * c..(i + 1) * len * c]);
        }
    }
    Ok(out)
}

/// Mean binary cross entropy between probabilities `p` and binary targets
/// `y`, both `[n, n, |T|]`, over the cells where `mask` (`[n, n]`) is true.
///
/// Probabilities are clamped to `[1e-7, 1 - 1e-7]`. Targets must be
/// symmetric in their first two axes.
pub fn bce_loss<F: Scalar>(p: &Tensor<F>, y: &Tensor<F>, mask: &Mask) -> Result<F> {
    if p.shape() != y.shape() || p.rank() != 3 || p.shape()[0] != p.shape()[1] {
        return Err(Error::dim("bce_loss", p.shape(), y.shape()));
    }
    mask.check_covers("bce_loss mask", p)?;
    let (n, t) = (p.shape()[0], p.shape()[2]);
    for i in 0..n {
        for j in i + 1..n {
            for k in 0..t {
                if y.at(&[i, j, k]) != y.at(&[j, i, k]) {
                    return Err(Error::Validation(format!("targets are not symmetric at ({i}, {j}, {k})")));
                }
            }
        }
    }
    let lo = F::from_f64_lossy(1e-7);
    let hi = F::one() - lo;
    let term = |i: usize, j: usize, k: usize| {
        let pc = p.at(&[i, j, k]).max(lo).min(hi);
        let yv = y.at(&[i, j, k]);
        -(yv * pc.ln() + (F::one() - yv) * (F::one() - pc).ln())
    };
    let valid = |i: usize, j: usize| mask.valid()[i * n + j];
    // Mirrored cells are added pairwise so transposing `p` permutes only
    // the operands of commutative additions.
    let mut total = F::zero();
    let mut count = 0usize;
    for i in 0..n {
        for j in i..n {
            for k in 0..t {
                let (a, b) = (valid(i, j), valid(j, i));
                let pair = match (a, b, i == j) {
                    (true, _, true) => term(i, i, k),
                    (true, true, false) => term(i, j, k) + term(j, i, k),
                    (true, false, false) => term(i, j, k),
                    (false, true, false) => term(j, i, k),
                    _ => continue,
                };
                total = total + pair;
                count += usize::from(a) + usize::from(b && i != j);
            }
        }
    }
    Ok(if count == 0 { F::zero() } else { total / F::from_f64_lossy(count as f64) })
}

/// Mean BCE computed straight from logits; the same quantity the training
/// graph records.
pub fn bce_from_logits<F: Scalar>(logits: &Tensor<F>, y: &Tensor<F>, mask: &Mask) -> Result<F> {
    if logits.shape() != y.shape() {
        return Err(Error::dim("bce_from_logits", logits.shape(), y.shape()));
    }
    mask.check_covers("bce_from_logits mask", logits)?;
    let t = logits.last_dim();
    let mut total = F::zero();
    let mut count = 0usize;
    for ((zrow, yrow), &ok) in logits.data().chunks_exact(t).zip(y.data().chunks_exact(t)).zip(mask.valid()) {
        if ok {
            for (&z, &yv) in zrow.iter().zip(yrow) {
                total = total + softplus(z) - yv * z;
                count += 1;
            }
        }
    }
    Ok(if count == 0 { F::zero() } else { total / F::from_f64_lossy(count as f64) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::InitOptions;

    fn cfg() -> ModelConfig {
        ModelConfig {
            encoder_dim: 8,
            hidden_size: 8,
            biaffine_size: 4,
            num_heads: 2,
            length_embed_dim: 3,
            max_offset: 4,
            cnn_blocks: 1,
            num_types: 2,
            vocab_size: 12,
            ..Default::default()
        }
    }

    #[test]
    fn shape_chain() {
        let cfg = cfg();
        let params = ModelParams::<f64>::init(&cfg, 5, InitOptions::default()).unwrap();
        let model = SpanScorer::new(cfg, params).unwrap();
        let batch = Batch::from_token_ids(&[vec![1, 2, 3, 4, 5, 6, 7]]);
        let mut g = Graph::new();
        let fwd = model.forward(&mut g, &batch, None).unwrap();
        assert_eq!(g.value(fwd.encoded).shape(), &[1, 7, 8]);
        assert_eq!(g.value(fwd.start).shape(), &[1, 7, 8]);
        assert_eq!(g.value(fwd.grid).shape(), &[1, 7, 7, 4]);
        assert_eq!(g.value(fwd.refined.unwrap()).shape(), &[1, 7, 7, 4]);
        assert_eq!(g.value(fwd.logits).shape(), &[1, 7, 7, 2]);
    }

    #[test]
    fn unknown_ids_use_reserved_row() {
        let cfg = cfg();
        let params = ModelParams::<f64>::init(&cfg, 5, InitOptions::default()).unwrap();
        let model = SpanScorer::new(cfg, params).unwrap();
        let a = model.predict_probabilities(&Batch::from_token_ids(&[vec![1, 500]])).unwrap();
        let b = model.predict_probabilities(&Batch::from_token_ids(&[vec![1, 12]])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mixed_inputs_rejected() {
        let cfg = cfg();
        let params = ModelParams::<f64>::init(&cfg, 5, InitOptions::default()).unwrap();
        let model = SpanScorer::new(cfg, params).unwrap();
        let batch = Batch::new(vec![
            SentenceInput::Tokens(vec![1]),
            SentenceInput::Pieces {
                embeddings: Tensor::zeros(&[1, 8]),
                groups: vec![0..1],
            },
        ]);
        assert!(model.forward(&mut Graph::new(), &batch, None).is_err());
    }

    #[test]
    fn missing_piece_groups_rejected() {
        let cfg = cfg();
        let params = ModelParams::<f64>::init(&cfg, 5, InitOptions::default()).unwrap();
        let model = SpanScorer::new(cfg, params).unwrap();
        let batch = Batch::new(vec![SentenceInput::Pieces {
            embeddings: Tensor::zeros(&[3, 8]),
            groups: vec![0..1],
        }]);
        assert!(matches!(
            model.forward(&mut Graph::new(), &batch, None),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn bce_rejects_asymmetric_targets() {
        let p = Tensor::<f64>::full(&[2, 2, 1], 0.5);
        let mut y = Tensor::zeros(&[2, 2, 1]);
        y.set(&[0, 1, 0], 1.0);
        assert!(matches!(bce_loss(&p, &y, &Mask::all(&[2, 2])), Err(Error::Validation(_))));
    }

    #[test]
    fn bce_half_is_ln2() {
        let p = Tensor::<f64>::full(&[3, 3, 2], 0.5);
        let mut y = Tensor::zeros(&[3, 3, 2]);
        y.set(&[0, 2, 1], 1.0);
        y.set(&[2, 0, 1], 1.0);
        let l = bce_loss(&p, &y, &Mask::all(&[3, 3])).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn bce_perfect_prediction_is_near_zero() {
        let mut y = Tensor::<f64>::zeros(&[2, 2, 1]);
        y.set(&[0, 1, 0], 1.0);
        y.set(&[1, 0, 0], 1.0);
        let p = y.map(|v| if v > 0.5 { 1.0 - 1e-7 } else { 1e-7 });
        assert!(bce_loss(&p, &y, &Mask::all(&[2, 2])).unwrap() < 1e-6);
    }
}
