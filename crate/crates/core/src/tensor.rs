//! Dense row-major f32 tensors of rank 1..=5.
//!
//! The numeric contract is strict: every public operation that produces a
//! tensor verifies the result is finite and returns an error otherwise, so NaN
//! and Inf never propagate silently through a training run.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

pub const MAX_RANK: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Build from explicit dims and data; validates rank, positive dims and
    /// element count. Does not inspect values — use [`Tensor::checked`] for
    /// data from outside the crate.
    pub fn new(dims: &[usize], data: Vec<f32>) -> Result<Self> {
        if dims.is_empty() || dims.len() > MAX_RANK {
            return Err(Error::shape("tensor", format!("rank {} outside 1..=5", dims.len())));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::shape("tensor", format!("zero-sized dim in {dims:?}")));
        }
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("dims {dims:?} expect {n} elements, got {}", data.len()),
            ));
        }
        Ok(Tensor { dims: dims.to_vec(), data })
    }

    /// Like [`Tensor::new`] but also rejects non-finite elements.
    pub fn checked(dims: &[usize], data: Vec<f32>) -> Result<Self> {
        let t = Tensor::new(dims, data)?;
        t.ensure_finite("tensor input")?;
        Ok(t)
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        let n: usize = dims.iter().product();
        Tensor::new(dims, vec![0.0; n])
    }

    pub fn full(dims: &[usize], v: f32) -> Result<Self> {
        let n: usize = dims.iter().product();
        Tensor::new(dims, vec![v; n])
    }

    pub fn scalar(v: f32) -> Self {
        Tensor { dims: vec![1], data: vec![v] }
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> f32) -> Result<Self> {
        let n: usize = dims.iter().product();
        Tensor::new(dims, (0..n).map(|i| f(i)).collect())
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Scalar value of a single-element tensor.
    pub fn item(&self) -> Result<f32> {
        if self.numel() != 1 {
            return Err(Error::shape("item", format!("expected 1 element, got {}", self.numel())));
        }
        Ok(self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, op: &'static str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::NonFinite {
                op,
                detail: format!("element {i} of {:?} is {}", self.dims, self.data[i]),
            }),
        }
    }

    /// Reinterpret with new dims of equal element count.
    pub fn reshaped(&self, dims: &[usize]) -> Result<Tensor> {
        let n: usize = dims.iter().product();
        if n != self.numel() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {dims:?} changes element count", self.dims),
            ));
        }
        Tensor::new(dims, self.data.clone())
    }

    pub fn describe(&self) -> String {
        format!("Tensor{:?}", self.dims)
    }
}

/// Row-major offset helpers for the fixed layouts used by the networks.
#[inline]
pub fn at2(cols: usize, r: usize, c: usize) -> usize {
    r * cols + c
}

/// Offset into a `[C, D, H, W]` block (x fastest, z slowest).
#[inline]
pub fn at4(d: usize, h: usize, w: usize, c: usize, z: usize, y: usize, x: usize) -> usize {
    ((c * d + z) * h + y) * w + x
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_validation() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(&[0], vec![]).is_err());
        assert!(Tensor::new(&[1, 1, 1, 1, 1, 1], vec![0.0]).is_err());
    }

    #[test]
    fn non_finite_is_surfaced() {
        let t = Tensor::new(&[2], vec![1.0, f32::NAN]).unwrap();
        assert!(matches!(t.ensure_finite("t"), Err(Error::NonFinite { .. })));
        assert!(Tensor::checked(&[2], vec![1.0, f32::INFINITY]).is_err());
    }

    #[test]
    fn reshape_preserves_count() {
        let t = Tensor::from_fn(&[2, 3], |i| i as f32).unwrap();
        let r = t.reshaped(&[6]).unwrap();
        assert_eq!(r.data(), t.data());
        assert!(t.reshaped(&[5]).is_err());
    }
}
