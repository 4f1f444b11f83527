//! Dense row-major tensors of rank 1 through 4.
//!
//! Values are stored as `f64` behind an [`Arc`], so tensors are cheap to
//! clone and safe to share read-only across threads. A tensor becomes part
//! of an autodiff graph when it carries a node handle into a [`Tape`];
//! detached tensors are plain values.
//!
//! [`Tape`]: crate::tape::Tape

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tape::{NodeId, TapeId};

/// Scalars are represented as shape `[1]`; there is no rank-0 tensor.
pub const MAX_RANK: usize = 4;

#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    pub(crate) node: Option<(TapeId, NodeId)>,
    requires_grad: bool,
}

impl Tensor {
    /// Build a tensor from a shape and row-major values.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.len() > MAX_RANK {
            return Err(Error::ShapeMismatch(format!(
                "rank must be 1..={MAX_RANK}, got {}",
                shape.len()
            )));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::ShapeMismatch(format!("zero extent in {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} wants {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
            node: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor::from_vec(shape, vec![0.0; numel]).expect("zeros: valid shape")
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel: usize = shape.iter().product();
        Tensor::from_vec(shape, vec![value; numel]).expect("full: valid shape")
    }

    /// Scalar as a shape-`[1]` tensor.
    pub fn scalar(value: f64) -> Self {
        Tensor::from_vec(&[1], vec![value]).expect("scalar")
    }

    /// Gaussian init with the given standard deviation.
    pub fn randn<R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Self {
        let normal = Normal::new(0.0, std).expect("valid std");
        let numel: usize = shape.iter().product();
        let data: Vec<f64> = (0..numel).map(|_| normal.sample(rng)).collect();
        Tensor::from_vec(shape, data).expect("randn: valid shape")
    }

    /// Uniform values in `[lo, hi)`.
    pub fn rand_uniform<R: Rng>(rng: &mut R, shape: &[usize], lo: f64, hi: f64) -> Self {
        let numel: usize = shape.iter().product();
        let data: Vec<f64> = (0..numel).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor::from_vec(shape, data).expect("rand_uniform: valid shape")
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Shared handle to the underlying buffer; identity of this pointer is
    /// what ties a parameter to its tape node.
    pub(crate) fn buffer(&self) -> &Arc<Vec<f64>> {
        &self.data
    }

    /// Mutable access for optimizer updates. Callers must ensure no tape
    /// still references the buffer (drop the step's tape first); otherwise
    /// this clones the storage.
    pub fn data_mut(&mut self) -> &mut [f64] {
        self.node = None;
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    /// Value of a shape-`[1]` tensor.
    pub fn value(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1, "value() on non-scalar");
        self.data[0]
    }

    pub fn is_attached(&self) -> bool {
        self.node.is_some()
    }

    /// Same data viewed under a new shape with equal element count.
    /// Gradient-transparent reshaping lives in `ops::reshape`.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() || shape.is_empty() || shape.len() > MAX_RANK {
            return Err(Error::ShapeMismatch(format!(
                "cannot view {:?} as {shape:?}",
                self.shape
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
            node: None,
            requires_grad: self.requires_grad,
        })
    }

    pub(crate) fn detached_with(&self, data: Vec<f64>) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(data),
            node: None,
            requires_grad: false,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Row-major offset for a rank-4 index.
#[inline]
pub(crate) fn idx4(shape: &[usize], b: usize, c: usize, h: usize, w: usize) -> usize {
    ((b * shape[1] + c) * shape[2] + h) * shape[3] + w
}
