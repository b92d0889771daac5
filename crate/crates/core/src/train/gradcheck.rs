//! Finite-difference check of every model parameter on a small random
//! problem.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{Batch, InitOptions, ModelConfig, ModelParams, SpanScorer};
use crate::tensor::gradcheck::{check_gradients, GradReport};
use crate::tensor::{Graph, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub seed: u64,
    pub sentence_len: usize,
    pub model: ModelConfig,
    /// Central-difference step.
    pub step: f64,
    /// Denominator floor of the per-entry relative error.
    pub floor: f64,
    /// Fraction of upper-triangle target cells set to 1.
    pub target_density: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            seed: 0,
            sentence_len: 6,
            model: ModelConfig {
                encoder_dim: 8,
                hidden_size: 16,
                biaffine_size: 8,
                num_heads: 2,
                length_embed_dim: 4,
                max_offset: 4,
                cnn_blocks: 1,
                kernel_size: 3,
                num_types: 3,
                vocab_size: 10,
                encoder_layers: 1,
                ..ModelConfig::default()
            },
            step: 1e-3,
            floor: 1e-6,
            target_density: 0.2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradcheckOutcome {
    pub reports: Vec<GradReport>,
    /// Smallest |pre-activation| of the start/end LeakyReLU. The check is
    /// only meaningful when this is well above the difference step.
    pub min_preactivation: f64,
}

impl GradcheckOutcome {
    /// Worst per-entry relative error over all parameters.
    pub fn max_rel_error(&self) -> f64 {
        self.reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max)
    }

    /// Worst per-parameter error, each measured against the largest
    /// gradient entry of its own array.
    pub fn max_array_rel_error(&self) -> f64 {
        self.reports.iter().map(|r| r.array_rel_error).fold(0.0, f64::max)
    }
}

fn redraw(t: &mut Tensor<f64>, rng: &mut ChaCha8Rng) {
    for v in t.data_mut() {
        *v = StandardNormal.sample(rng);
    }
}

/// Builds a random model and sentence from `cfg.seed` and compares the
/// analytic gradient of the loss with central differences. Embedding rows
/// are redrawn at unit scale so every path carries a gradient of
/// comparable magnitude.
pub fn gradient_check(cfg: &GradcheckConfig) -> Result<GradcheckOutcome> {
    let mut params = ModelParams::<f64>::init(&cfg.model, cfg.seed, InitOptions::default())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    redraw(&mut params.token_embeds, &mut rng);
    redraw(&mut params.length_embeds, &mut rng);
    let scorer = SpanScorer::new(cfg.model.clone(), params)?;

    let n = cfg.sentence_len;
    let t = cfg.model.num_types;
    let ids: Vec<usize> = (0..n).map(|_| rng.random_range(0..cfg.model.vocab_size)).collect();
    let batch = Batch::from_token_ids(&[ids]);
    let mut y = Tensor::zeros(&[1, n, n, t]);
    for i in 0..n {
        for j in i..n {
            for k in 0..t {
                if rng.random_bool(cfg.target_density) {
                    y.set(&[0, i, j, k], 1.0);
                    y.set(&[0, j, i, k], 1.0);
                }
            }
        }
    }

    let mut g = Graph::new();
    let fwd = scorer.forward(&mut g, &batch, None)?;
    let slope = scorer.config.leaky_slope;
    let min_preactivation = [fwd.start, fwd.end]
        .iter()
        .flat_map(|&v| g.value(v).data().to_vec())
        .map(|post| if post > 0.0 { post } else { post / slope }.abs())
        .fold(f64::INFINITY, f64::min);

    let inputs: Vec<(String, Tensor<f64>)> = scorer.params.named().into_iter().map(|(n, t)| (n, t.clone())).collect();
    let reports = check_gradients(&inputs, cfg.step, cfg.floor, |g, vars| {
        let fwd = scorer.forward_with(g, &batch, vars, None)?;
        scorer.loss(g, &fwd, y.clone())
    })?;
    Ok(GradcheckOutcome {
        reports,
        min_preactivation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_problem_passes() {
        let out = gradient_check(&GradcheckConfig::default()).unwrap();
        assert!(out.min_preactivation > 10.0 * 1e-3, "{}", out.min_preactivation);
        assert!(out.max_array_rel_error() < 1e-4, "{:?}", out.reports);
        assert_eq!(out.reports.len(), 13);
    }
}
