//! Dense row-major f64 tensors.
//!
//! The last axis is always the channel/feature axis; leading axes are batch
//! and spatial extents. All arithmetic in this crate is double precision.

use crate::error::TensorError;

/// A dense n-dimensional array of `f64` in row-major order.
///
/// `grad` is populated for leaf tensors after a backward pass through the
/// graph that borrowed them; it always has the same length as `data`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self, TensorError> {
        let shape = shape.into();
        let want: usize = shape.iter().product();
        if shape.iter().any(|&e| e == 0) {
            return Err(TensorError::BadShape(format!(
                "zero extent in shape {shape:?}"
            )));
        }
        if data.len() != want {
            return Err(TensorError::BadShape(format!(
                "shape {shape:?} wants {want} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n], requires_grad: false, grad: None }
    }

    pub fn filled(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor { shape, data: vec![value; n], requires_grad: false, grad: None }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value], requires_grad: false, grad: None }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data, requires_grad: false, grad: None }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Extent of the last (channel/feature) axis.
    pub fn channels(&self) -> usize {
        *self.shape.last().expect("tensor has at least one axis")
    }

    /// Product of all axes except the last.
    pub fn rows(&self) -> usize {
        self.data.len() / self.channels()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reinterpret the buffer under a new shape of equal volume.
    pub fn reshaped(mut self, shape: impl Into<Vec<usize>>) -> Result<Self, TensorError> {
        let shape = shape.into();
        let want: usize = shape.iter().product();
        if want != self.data.len() {
            return Err(TensorError::BadShape(format!(
                "cannot view {:?} ({} values) as {shape:?} ({want} values)",
                self.shape,
                self.data.len()
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }
}

/// Max absolute elementwise difference between two equally sized slices.
pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_length_mismatch() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn rows_and_channels() {
        let t = Tensor::zeros(vec![4, 5, 3]);
        assert_eq!(t.rows(), 20);
        assert_eq!(t.channels(), 3);
    }

    #[test]
    fn reshape_preserves_volume() {
        let t = Tensor::new(vec![2, 6], (0..12).map(|i| i as f64).collect()).unwrap();
        let r = t.clone().reshaped(vec![3, 4]).unwrap();
        assert_eq!(r.shape(), &[3, 4]);
        assert_eq!(r.data(), t.data());
        assert!(t.reshaped(vec![5, 5]).is_err());
    }
}
