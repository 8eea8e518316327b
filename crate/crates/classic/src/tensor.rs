//! Dense row-major f64 tensor.
//!
//! Rank is at most 3 in practice (batched matrices); elementwise ops are
//! rank-agnostic. All training-facing math runs in f64 so that protection
//! invariants and gradient checks can be asserted tightly.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::InvalidArg(format!(
                "tensor shape {:?} wants {} values, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n] }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1, "item() on a non-scalar tensor");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Size of the last axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("tensor with empty shape")
    }

    /// Number of rows when the tensor is viewed as [rows, last_dim].
    pub fn row_count(&self) -> usize {
        if self.shape.is_empty() {
            return 0;
        }
        self.shape[..self.shape.len() - 1].iter().product::<usize>().max(1)
    }

    /// Reinterpret with a new shape of identical element count.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }

    /// FNV-1a hash over the exact bit pattern of every value plus the shape.
    /// Used to assert bit-identity of frozen parameters.
    pub fn bit_checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |byte: u8| {
            h ^= byte as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        };
        for &d in &self.shape {
            for b in (d as u64).to_le_bytes() {
                eat(b);
            }
        }
        for &v in &self.data {
            for b in v.to_bits().to_le_bytes() {
                eat(b);
            }
        }
        h
    }
}
