//! Dense row-major tensors with a reverse-mode tape.
//!
//! Storage is generic over [`Real`] so the same graph code runs in 32-bit
//! (training, inference) and 64-bit (gradient checking). Every reduction
//! accumulates in `f64` regardless of the storage type.

mod gradcheck;
mod tape;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use tape::{Grads, Tape, Var};

use std::fmt::Debug;

use crate::error::{Error, Result};

/// Storage scalar. All arithmetic is carried out in `f64` and rounded on store.
pub trait Real: Copy + Default + Debug + PartialEq + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn is_finite(self) -> bool;
}

impl Real for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
}

impl Real for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline]
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    dims: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(dims: Vec<usize>, data: Vec<T>) -> Result<Self> {
        check_dims(&dims)?;
        let numel: usize = dims.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "dims {dims:?} hold {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { dims, data })
    }

    pub fn zeros(dims: Vec<usize>) -> Self {
        let numel = dims.iter().product();
        Tensor {
            dims,
            data: vec![T::default(); numel],
        }
    }

    pub fn full(dims: Vec<usize>, value: f64) -> Self {
        let numel = dims.iter().product();
        Tensor {
            dims,
            data: vec![T::from_f64(value); numel],
        }
    }

    pub fn from_f64(dims: Vec<usize>, values: &[f64]) -> Result<Self> {
        Self::new(dims, values.iter().map(|&v| T::from_f64(v)).collect())
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            dims: vec![1],
            data: vec![T::from_f64(value)],
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64()).collect()
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reinterpret with new dims of the same element count.
    pub fn reshaped(mut self, dims: Vec<usize>) -> Result<Self> {
        check_dims(&dims)?;
        if dims.iter().product::<usize>() != self.data.len() {
            return Err(Error::Shape(format!("cannot reshape {:?} to {dims:?}", self.dims)));
        }
        self.dims = dims;
        Ok(self)
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&self, axis: usize) -> Result<Self> {
        if axis >= self.dims.len() {
            return Err(Error::Shape(format!(
                "softmax axis {axis} out of range for {:?}",
                self.dims
            )));
        }
        let len = self.dims[axis];
        let inner: usize = self.dims[axis + 1..].iter().product();
        let outer: usize = self.dims[..axis].iter().product();
        let mut out = vec![T::default(); self.data.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let max = (0..len)
                    .map(|j| self.data[idx(j)].to_f64())
                    .fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = (0..len).map(|j| (self.data[idx(j)].to_f64() - max).exp()).collect();
                let sum: f64 = exps.iter().sum();
                for (j, e) in exps.iter().enumerate() {
                    out[idx(j)] = T::from_f64(e / sum);
                }
            }
        }
        Ok(Tensor {
            dims: self.dims.clone(),
            data: out,
        })
    }
}

pub(crate) fn check_dims(dims: &[usize]) -> Result<()> {
    if dims.is_empty() || dims.contains(&0) {
        return Err(Error::Shape(format!(
            "dims must be a non-empty list of positive integers, got {dims:?}"
        )));
    }
    Ok(())
}
