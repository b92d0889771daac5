use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::tensor::{Scalar, Tensor};

/// Every learnable array of the model. Grid convolutions carry no bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<F> {
    /// `[vocab_size + 1, d]`; the last row is the unknown-token embedding.
    pub token_embeds: Tensor<F>,
    /// `[k_enc, d, d]` per encoder layer.
    pub encoder_convs: Vec<Tensor<F>>,
    /// `[d, h]`
    pub w_start: Tensor<F>,
    /// `[d, h]`
    pub w_end: Tensor<F>,
    /// `[2L + 1, c]`, row `offset + L` embeds the signed offset `i - j`.
    pub length_embeds: Tensor<F>,
    /// `[2h + c, r]`, applied to `start ⊕ end ⊕ length`.
    pub w_concat: Tensor<F>,
    /// `[K, h_k, r_k, h_k]`
    pub u: Tensor<F>,
    /// `[k, k, r, r]` per block.
    pub block_kernels: Vec<Tensor<F>>,
    pub ln_gamma: Vec<Tensor<F>>,
    pub ln_beta: Vec<Tensor<F>>,
    /// Present iff there is at least one block.
    pub final_kernel: Option<Tensor<F>>,
    /// `[|T|, r]`
    pub w_out: Tensor<F>,
    /// `[|T|]`
    pub b_out: Tensor<F>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct InitOptions {
    /// Start the output layer at zero so every probability is exactly 0.5.
    pub zero_head: bool,
}

fn xavier<F: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor<F> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| F::from_f64_lossy(dist.sample(rng))).collect()).expect("shape")
}

fn normal<F: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<F> {
    let dist = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| F::from_f64_lossy(dist.sample(rng))).collect()).expect("shape")
}

impl<F: Scalar> ModelParams<F> {
    pub fn init(cfg: &ModelConfig, seed: u64, opts: InitOptions) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, h, r, c) = (cfg.encoder_dim, cfg.hidden_size, cfg.biaffine_size, cfg.length_embed_dim);
        let (k, ke) = (cfg.kernel_size, cfg.encoder_kernel);
        let (hk, rk) = (cfg.head_hidden(), cfg.head_features());
        let token_embeds = normal(&mut rng, &[cfg.vocab_size + 1, d], 1.0);
        let encoder_convs = (0..cfg.encoder_layers)
            .map(|_| xavier(&mut rng, &[ke, d, d], ke * d, ke * d))
            .collect();
        let w_start = xavier(&mut rng, &[d, h], d, h);
        let w_end = xavier(&mut rng, &[d, h], d, h);
        let length_embeds = normal(&mut rng, &[cfg.offset_rows(), c], 1.0);
        let w_concat = xavier(&mut rng, &[2 * h + c, r], 2 * h + c, r);
        let u = xavier(&mut rng, &[cfg.num_heads, hk, rk, hk], hk, rk * hk);
        let block_kernels = (0..cfg.cnn_blocks)
            .map(|_| xavier(&mut rng, &[k, k, r, r], k * k * r, k * k * r))
            .collect();
        let ln_gamma = (0..cfg.cnn_blocks).map(|_| Tensor::full(&[r], F::one())).collect();
        let ln_beta = (0..cfg.cnn_blocks).map(|_| Tensor::zeros(&[r])).collect();
        let final_kernel = (cfg.cnn_blocks > 0).then(|| xavier(&mut rng, &[k, k, r, r], k * k * r, k * k * r));
        let w_out = if opts.zero_head {
            Tensor::zeros(&[cfg.num_types, r])
        } else {
            xavier(&mut rng, &[cfg.num_types, r], r, cfg.num_types)
        };
        let b_out = Tensor::zeros(&[cfg.num_types]);
        Ok(ModelParams {
            token_embeds,
            encoder_convs,
            w_start,
            w_end,
            length_embeds,
            w_concat,
            u,
            block_kernels,
            ln_gamma,
            ln_beta,
            final_kernel,
            w_out,
            b_out,
        })
    }

    /// All parameters in a fixed order with stable names.
    pub fn named(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out = vec![("token_embeds".to_string(), &self.token_embeds)];
        for (l, t) in self.encoder_convs.iter().enumerate() {
            out.push((format!("encoder.{l}.kernel"), t));
        }
        out.push(("w_start".into(), &self.w_start));
        out.push(("w_end".into(), &self.w_end));
        out.push(("length_embeds".into(), &self.length_embeds));
        out.push(("w_concat".into(), &self.w_concat));
        out.push(("u".into(), &self.u));
        for b in 0..self.block_kernels.len() {
            out.push((format!("block.{b}.kernel"), &self.block_kernels[b]));
            out.push((format!("block.{b}.ln_gamma"), &self.ln_gamma[b]));
            out.push((format!("block.{b}.ln_beta"), &self.ln_beta[b]));
        }
        if let Some(t) = &self.final_kernel {
            out.push(("final.kernel".into(), t));
        }
        out.push(("w_out".into(), &self.w_out));
        out.push(("b_out".into(), &self.b_out));
        out
    }

    /// Same order as [`ModelParams::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<F>> {
        let mut out = vec![&mut self.token_embeds];
        out.extend(self.encoder_convs.iter_mut());
        out.push(&mut self.w_start);
        out.push(&mut self.w_end);
        out.push(&mut self.length_embeds);
        out.push(&mut self.w_concat);
        out.push(&mut self.u);
        for ((k, g), b) in self.block_kernels.iter_mut().zip(self.ln_gamma.iter_mut()).zip(self.ln_beta.iter_mut()) {
            out.push(k);
            out.push(g);
            out.push(b);
        }
        if let Some(t) = &mut self.final_kernel {
            out.push(t);
        }
        out.push(&mut self.w_out);
        out.push(&mut self.b_out);
        out
    }

    pub fn count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Rebuilds parameters from named tensors, checking every shape against
    /// a freshly initialized template for `cfg`.
    pub fn from_named(cfg: &ModelConfig, named: Vec<(String, Tensor<F>)>) -> Result<Self> {
        let mut template = ModelParams::<F>::init(cfg, 0, InitOptions::default())?;
        let expected: Vec<(String, Vec<usize>)> =
            template.named().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
        if expected.len() != named.len() {
            return Err(Error::Format(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                named.len()
            )));
        }
        for (slot, ((name, shape), (got_name, got))) in
            template.tensors_mut().into_iter().zip(expected.iter().zip(named))
        {
            if *name != got_name || shape.as_slice() != got.shape() {
                return Err(Error::Format(format!(
                    "parameter {got_name} {:?} does not match expected {name} {shape:?}",
                    got.shape()
                )));
            }
            *slot = got;
        }
        Ok(template)
    }

    pub fn cast<G: Scalar>(&self, cfg: &ModelConfig) -> ModelParams<G> {
        let named = self.named().into_iter().map(|(n, t)| (n, t.cast::<G>())).collect();
        ModelParams::from_named(cfg, named).expect("same layout")
    }
}
