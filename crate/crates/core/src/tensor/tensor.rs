use crate::error::{Error, Result};
use crate::tensor::scalar::Scalar;

/// Dense row-major array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: &[usize], data: Vec<F>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim("tensor", shape, &[data.len()]));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, F::zero())
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: F) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = F::one();
        }
        t
    }

    /// Builds a tensor from `f64` literals, rounding to the element type.
    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| F::from_f64_lossy(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    /// Size of the trailing dimension; 1 for scalars.
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn item(&self) -> F {
        self.data[0]
    }

    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &n)| {
                debug_assert!(i < n);
                acc * n + i
            })
    }

    pub fn at(&self, index: &[usize]) -> F {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: F) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::dim("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| G::from_f64_lossy(v.to_f64().unwrap_or(f64::NAN)))
                .collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> F {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(F::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }
}

/// Validity flags over every axis of a tensor except the trailing feature
/// axis: `[batch, n]` for sequences, `[batch, n, n]` for span grids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    shape: Vec<usize>,
    valid: Vec<bool>,
}

impl Mask {
    pub fn new(shape: &[usize], valid: Vec<bool>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != valid.len() {
            return Err(Error::dim("mask", shape, &[valid.len()]));
        }
        Ok(Mask {
            shape: shape.to_vec(),
            valid,
        })
    }

    pub fn all(shape: &[usize]) -> Self {
        Mask {
            shape: shape.to_vec(),
            valid: vec![true; shape.iter().product()],
        }
    }

    /// `[batch, n]` mask: position `i` of row `b` is valid iff `i < lens[b]`.
    pub fn sequence(lens: &[usize], n: usize) -> Self {
        let mut valid = Vec::with_capacity(lens.len() * n);
        for &len in lens {
            valid.extend((0..n).map(|i| i < len));
        }
        Mask {
            shape: vec![lens.len(), n],
            valid,
        }
    }

    /// `[batch, n, n]` mask: cell `(i, j)` is valid iff both indices are
    /// below the sentence length.
    pub fn grid(lens: &[usize], n: usize) -> Self {
        let mut valid = Vec::with_capacity(lens.len() * n * n);
        for &len in lens {
            for i in 0..n {
                valid.extend((0..n).map(|j| i < len && j < len));
            }
        }
        Mask {
            shape: vec![lens.len(), n, n],
            valid,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn is_symmetric(&self) -> bool {
        let r = self.shape.len();
        if r < 2 || self.shape[r - 1] != self.shape[r - 2] {
            return false;
        }
        let n = self.shape[r - 1];
        self.valid.chunks(n * n).all(|g| {
            (0..n).all(|i| (0..n).all(|j| g[i * n + j] == g[j * n + i]))
        })
    }

    /// Checks that this mask covers `t` when the trailing axis of `t` is
    /// treated as features.
    pub(crate) fn check_covers<F: Scalar>(&self, op: &'static str, t: &Tensor<F>) -> Result<()> {
        let s = t.shape();
        if s.is_empty() || s[..s.len() - 1] != self.shape[..] {
            return Err(Error::dim(op, s, &self.shape));
        }
        Ok(())
    }
}
