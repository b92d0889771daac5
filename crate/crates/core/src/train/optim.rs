//! AdamW with decoupled weight decay and bias correction.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<F> {
    pub m: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
    /// Updates applied so far.
    pub step: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<F: Scalar> AdamW<F> {
    /// Zero moments shaped like `params`.
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor<F>>, weight_decay: f64, betas: (f64, f64), eps: f64) -> Self {
        let m: Vec<Tensor<F>> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        AdamW {
            v: m.clone(),
            m,
            step: 0,
            weight_decay,
            beta1: betas.0,
            beta2: betas.1,
            eps,
        }
    }

    /// One update:
    ///
    /// ```text
    /// m ← β1 m + (1 - β1) g        v ← β2 v + (1 - β2) g²
    /// p ← p - lr (m̂ / (√v̂ + ε) + λ p)
    /// ```
    ///
    /// with `m̂ = m / (1 - β1ᵗ)` and `v̂ = v / (1 - β2ᵗ)`.
    pub fn update(&mut self, params: &mut [&mut Tensor<F>], grads: &[Tensor<F>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Contract(format!(
                "optimizer holds {} moments, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.shape() != m.shape() || g.shape() != m.shape() {
                return Err(Error::dim("adamw", p.shape(), g.shape()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c = F::from_f64_lossy;
        let (b1, b2) = (c(self.beta1), c(self.beta2));
        let (one_b1, one_b2) = (c(1.0 - self.beta1), c(1.0 - self.beta2));
        let bc1 = c(1.0 - self.beta1.powi(t));
        let bc2 = c(1.0 - self.beta2.powi(t));
        let (lr_f, decay, eps) = (c(lr), c(lr * self.weight_decay), c(self.eps));
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let pd = p.data_mut();
            for (((pv, &gv), mv), vv) in pd.iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mv = b1 * *mv + one_b1 * gv;
                *vv = b2 * *vv + one_b2 * gv * gv;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *pv = *pv - lr_f * (m_hat / (v_hat.sqrt() + eps)) - decay * *pv;
            }
        }
        Ok(())
    }
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<F: Scalar>(grads: &mut [Tensor<F>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| {
            let x = v.to_f64().unwrap_or(0.0);
            x * x
        })
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = F::from_f64_lossy(max_norm / norm);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v = *v * s);
        }
    }
    norm
}
