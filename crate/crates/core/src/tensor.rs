//! Dense row-major tensors with a fixed, documented reduction order.
//!
//! Every reduction in this module (matmul dot products, row sums) walks
//! memory strictly left-to-right in index order. That pins the floating
//! point result of every operation for a given input, which is what lets
//! growth verification compare models at 1e-10 tolerances.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::real::Real;

/// Dense tensor: `shape` extents, row-major contiguous `data`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<R: Real> {
    shape: Vec<usize>,
    data: Vec<R>,
}

impl<R: Real> Tensor<R> {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![R::ZERO; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: R) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<R>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(CoreError::Shape(format!(
                "data length {} does not match shape {:?} (product {})",
                data.len(),
                shape,
                expect
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Scalar tensor (rank 0).
    pub fn scalar(value: R) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[R] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [R] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    pub fn scalar_value(&self) -> R {
        debug_assert!(self.data.len() == 1);
        self.data[0]
    }

    /// Rows of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Columns of a rank-2 tensor.
    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    #[inline]
    pub fn at2(&self, i: usize, j: usize) -> R {
        self.data[i * self.shape[1] + j]
    }

    #[inline]
    pub fn set2(&mut self, i: usize, j: usize, v: R) {
        self.data[i * self.shape[1] + j] = v;
    }

    pub fn row(&self, i: usize) -> &[R] {
        let c = self.shape[1];
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [R] {
        let c = self.shape[1];
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Maximum absolute element-wise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor<R>) -> Result<f64> {
        if self.shape != other.shape {
            return Err(CoreError::Shape(format!(
                "shape mismatch {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let mut m = 0.0f64;
        for (a, b) in self.data.iter().zip(other.data.iter()) {
            let d = (a.to_f64() - b.to_f64()).abs();
            if d > m {
                m = d;
            }
        }
        Ok(m)
    }

    pub fn bit_identical(&self, other: &Tensor<R>) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits_u64() == b.to_bits_u64())
    }

    /// Matrix product of two rank-2 tensors.
    ///
    /// Loop order is i-k-j: each output element accumulates its dot product
    /// strictly in ascending `k`, so the summation order is fixed.
    pub fn matmul(&self, other: &Tensor<R>) -> Result<Tensor<R>> {
        if self.shape.len() != 2 || other.shape.len() != 2 {
            return Err(CoreError::Shape(String::from("matmul expects rank-2 tensors")));
        }
        let (n, k) = (self.shape[0], self.shape[1]);
        let (k2, m) = (other.shape[0], other.shape[1]);
        if k != k2 {
            return Err(CoreError::Shape(format!(
                "matmul inner extents differ: {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        let mut out = vec![R::ZERO; n * m];
        for i in 0..n {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * m..(i + 1) * m];
            for (kk, &a) in a_row.iter().enumerate() {
                let b_row = &other.data[kk * m..(kk + 1) * m];
                for (o, &b) in o_row.iter_mut().zip(b_row.iter()) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor {
            shape: vec![n, m],
            data: out,
        })
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose2(&self) -> Result<Tensor<R>> {
        if self.shape.len() != 2 {
            return Err(CoreError::Shape(String::from("transpose expects rank 2")));
        }
        let (n, m) = (self.shape[0], self.shape[1]);
        let mut out = vec![R::ZERO; n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = self.data[i * m + j];
            }
        }
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    /// Row-wise softmax with max-subtraction; rank >= 1. The trailing
    /// dimension is the row; leading dimensions are flattened.
    pub fn softmax_rows(&self) -> Result<Tensor<R>> {
        if self.shape.is_empty() {
            return Err(CoreError::Shape(String::from("softmax_rows expects rank >= 1")));
        }
        let width = *self.shape.last().unwrap();
        if width == 0 {
            return Err(CoreError::Shape(String::from("softmax_rows on empty rows")));
        }
        let mut out = self.data.clone();
        for row in out.chunks_mut(width) {
            softmax_in_place(row);
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: out,
        })
    }

    /// Serializes as: rank (u64 LE), each extent (u64 LE), then the values
    /// row-major as little-endian IEEE-754.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out =
            Vec::with_capacity(8 * (1 + self.shape.len()) + self.data.len() * R::BYTE_WIDTH);
        out.extend_from_slice(&(self.shape.len() as u64).to_le_bytes());
        for &e in &self.shape {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &v in &self.data {
            v.write_le(&mut out);
        }
        out
    }

    /// Parses the layout written by [`Tensor::to_bytes`]. Returns the
    /// tensor and the number of bytes consumed.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Tensor<R>, usize)> {
        let truncated = || CoreError::Input(String::from("truncated tensor bytes"));
        if bytes.len() < 8 {
            return Err(truncated());
        }
        let rank = u64::from_le_bytes(bytes[0..8].try_into().unwrap()) as usize;
        let mut off = 8;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            if bytes.len() < off + 8 {
                return Err(truncated());
            }
            shape.push(u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap()) as usize);
            off += 8;
        }
        let count: usize = shape.iter().product();
        let need = count * R::BYTE_WIDTH;
        if bytes.len() < off + need {
            return Err(truncated());
        }
        let mut data = Vec::with_capacity(count);
        for idx in 0..count {
            data.push(R::read_le(&bytes[off + idx * R::BYTE_WIDTH..]));
        }
        Ok((
            Tensor {
                shape,
                data,
            },
            off + need,
        ))
    }
}

/// In-place stable softmax of one row.
pub(crate) fn softmax_in_place<R: Real>(row: &mut [R]) {
    let mut max = row[0];
    for &v in row.iter() {
        max = max.maximum(v);
    }
    let mut sum = R::ZERO;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}
