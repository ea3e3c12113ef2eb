//! Dense row-major f64 arrays. The only tensor carrier in the crate.

use crate::error::{Error, Result};

/// A dense multi-dimensional array of f64 in row-major order
/// (last axis fastest). A scalar is represented as shape `[1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct NdArray {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl NdArray {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::InvalidShape {
                shape,
                reason: "extents must be >= 1".into(),
            });
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("data length {} != product of extents {}", data.len(), n),
            });
        }
        Ok(NdArray { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        NdArray {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        let n: usize = shape.iter().product();
        NdArray {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        NdArray {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        NdArray {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    /// Scalar value; panics if numel != 1.
    pub fn value(&self) -> f64 {
        assert_eq!(self.numel(), 1, "value() on non-scalar array");
        self.data[0]
    }

    pub fn reshaped(&self, shape: Vec<usize>) -> Result<NdArray> {
        NdArray::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> NdArray {
        NdArray {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &NdArray) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn random_uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut crate::rng::SplitMix64) -> Self {
        let n: usize = shape.iter().product();
        NdArray {
            shape: shape.to_vec(),
            data: (0..n).map(|_| rng.uniform(lo, hi)).collect(),
        }
    }

    pub fn random_gaussian(shape: &[usize], sigma: f64, rng: &mut crate::rng::SplitMix64) -> Self {
        let n: usize = shape.iter().product();
        NdArray {
            shape: shape.to_vec(),
            data: (0..n).map(|_| sigma * rng.gaussian()).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_zero_extent() {
        assert!(NdArray::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn rejects_length_mismatch() {
        assert!(NdArray::new(vec![2, 2], vec![1.0; 3]).is_err());
    }

    #[test]
    fn row_major_layout() {
        let a = NdArray::new(vec![2, 3], (0..6).map(|i| i as f64).collect()).unwrap();
        // element (1, 2) is at 1*3 + 2
        assert_eq!(a.data()[5], 5.0);
    }
}
