use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::kernels;
use crate::Scalar;

/// Dense row-major array.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) || shape.iter().product::<usize>() != data.len() {
            return Err(Error::DataLength { len: data.len(), shape });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: T) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    /// Builds a `rows × cols` matrix from nested rows.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(shape_err("from_rows", "ragged rows"));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::lit(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// False when any element is NaN or infinite.
    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    /// Row `i` of a 2-D tensor.
    pub fn row(&self, i: usize) -> &[T] {
        let cols = self.shape[1];
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Plain (non-recorded) matrix product.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k, n) = matmul_dims(self.shape(), other.shape())?;
        let mut out = vec![T::zero(); m * n];
        kernels::gemm_nn(m, k, n, &self.data, &other.data, &mut out);
        Ok(Self { shape: vec![m, n], data: out })
    }

    pub fn transpose(&self) -> Result<Self> {
        if self.shape.len() != 2 {
            return Err(shape_err("transpose", format!("expected 2-D, got {:?}", self.shape)));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Self { shape: vec![c, r], data: out })
    }

    /// Row-wise softmax of a 2-D tensor. Entries of `-inf` get probability zero.
    pub fn softmax_rows(&self) -> Result<Self> {
        require_2d("softmax", &self.shape)?;
        let cols = self.shape[1];
        let mut out = self.data.clone();
        for row in out.chunks_mut(cols) {
            kernels::softmax_in_place(row);
        }
        Ok(Self { shape: self.shape.clone(), data: out })
    }

    /// Index of the largest entry in each row; ties resolve to the lowest index.
    pub fn argmax_rows(&self) -> Vec<usize> {
        let cols = self.shape[1];
        self.data.chunks(cols).map(argmax).collect()
    }
}

/// Index of the first maximal element.
pub fn argmax<T: Scalar>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn require_2d(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(shape_err(op, format!("expected 2-D, got {shape:?}"))),
    }
}

pub(crate) fn require_4d(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match shape {
        [n, c, h, w] => Ok((*n, *c, *h, *w)),
        _ => Err(shape_err(op, format!("expected N×C×H×W, got {shape:?}"))),
    }
}

pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize)> {
    let (m, k) = require_2d("matmul", a)?;
    let (k2, n) = require_2d("matmul", b)?;
    if k != k2 {
        return Err(shape_err("matmul", format!("{a:?} × {b:?}")));
    }
    Ok((m, k, n))
}

/// Spatial output size of a 3×3 convolution, or `None` when the stride does not divide evenly.
pub fn conv_out_size(size: usize, stride: usize, pad: usize) -> Option<usize> {
    let span = (size + 2 * pad).checked_sub(3)?;
    (span % stride == 0).then_some(span / stride + 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_lengths() {
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f64>::new(vec![0], vec![]).is_err());
    }

    #[test]
    fn validity_check_flags_nan() {
        let t = Tensor::<f64>::new(vec![2], vec![1.0, f64::NAN]).unwrap();
        assert!(!t.is_finite());
        assert!(Tensor::<f64>::scalar(1.0).is_finite());
    }

    #[test]
    fn softmax_handles_neg_infinity() {
        let t = Tensor::<f64>::new(vec![1, 3], vec![0.0, f64::NEG_INFINITY, 0.0]).unwrap();
        assert_eq!(t.softmax_rows().unwrap().data(), &[0.5, 0.0, 0.5]);
    }

    #[test]
    fn conv_output_sizes() {
        assert_eq!(conv_out_size(3, 1, 0), Some(1));
        assert_eq!(conv_out_size(32, 1, 1), Some(32));
        assert_eq!(conv_out_size(5, 2, 0), Some(2));
        assert_eq!(conv_out_size(32, 2, 1), None);
        assert_eq!(conv_out_size(2, 1, 0), None);
    }
}
