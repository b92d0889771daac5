use crate::corpus::{Sentence, TypeInventory};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Symmetric `[n, n, |T|]` gold grid: `Y[s, e, t] = Y[e, s, t] = 1` for
/// every entity `(s, e, t)`.
pub fn build_targets<F: Scalar>(sentence: &Sentence, types: &TypeInventory) -> Result<Tensor<F>> {
    let n = sentence.len();
    let t = types.len();
    let mut y = Tensor::zeros(&[n, n, t]);
    sentence.check_bounds()?;
    for e in &sentence.entities {
        let k = types
            .id(&e.label)
            .ok_or_else(|| Error::Validation(format!("entity type {} is not in the type inventory", e.label)))?;
        y.set(&[e.start, e.end, k], F::one());
        y.set(&[e.end, e.start, k], F::one());
    }
    Ok(y)
}
