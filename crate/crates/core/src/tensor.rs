//! Dense row-major tensors.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

/// Binary mask stored one byte per element (`0` or `1`).
pub type Mask = Tensor<u8>;

impl<T: Copy> Tensor<T> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch {
                layer: "tensor".into(),
                expected: shape,
                actual: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map<U: Copy, V: Copy>(&self, other: &Tensor<U>, f: impl Fn(T, U) -> V) -> Tensor<V> {
        debug_assert_eq!(self.shape, other.shape);
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }
}

impl<F: Scalar> Tensor<F> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, F::zero())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Bitwise equality, distinguishing `-0.0` from `0.0` and comparing NaN payloads.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }
}

impl Mask {
    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1)
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    /// Elementwise OR.
    pub fn or(&self, other: &Mask) -> Mask {
        self.zip_map(other, |a, b| a | b)
    }
}

/// Fails with a message naming `layer` if `actual` differs from `expected`.
pub(crate) fn check_shape(layer: impl FnOnce() -> String, expected: &[usize], actual: &[usize]) -> Result<()> {
    if expected != actual {
        return Err(Error::ShapeMismatch {
            layer: layer(),
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_wrong_length() {
        assert!(Tensor::from_vec(vec![2, 3], vec![0.0f32; 5]).is_err());
        assert!(Tensor::from_vec(vec![2, 3], vec![0.0f32; 6]).is_ok());
    }

    #[test]
    fn mask_or_and_count() {
        let a = Mask::from_vec(vec![4], vec![1, 0, 0, 1]).unwrap();
        let b = Mask::from_vec(vec![4], vec![0, 0, 1, 1]).unwrap();
        assert_eq!(a.or(&b).data(), &[1, 0, 1, 1]);
        assert_eq!(a.or(&b).count_ones(), 3);
    }

    #[test]
    fn bit_eq_sees_signed_zero() {
        let a = Tensor::from_vec(vec![1], vec![0.0f32]).unwrap();
        let b = Tensor::from_vec(vec![1], vec![-0.0f32]).unwrap();
        assert!(!a.bit_eq(&b));
        assert!(a.bit_eq(&a.clone()));
    }
}
