//! Dense row-major f64 tensor.

use crate::error::{Error, Result};

/// Dense n-dimensional 64-bit real array.
///
/// Storage is row-major. A tensor may carry a gradient of identical shape
/// after a backward pass. There is no broadcasting beyond scalar-times-tensor;
/// shape changes are explicit (`reshape`, concat/slice ops on the graph).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Build a tensor from a shape and flat row-major data.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Dimension(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} implies {numel} elements, data has {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    /// Rank-0 scalar.
    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![], data: vec![value], requires_grad: false, grad: None }
    }

    /// 1-D vector.
    pub fn vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Tensor::new(vec![n], data).expect("vector shape always consistent")
    }

    /// 2-D matrix from flat row-major data.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        Tensor::new(shape, vec![0.0; numel])
    }

    /// Mark this tensor as a differentiation target.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a rank-0 / single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if !self.is_scalar() {
            return Err(Error::Contract(format!(
                "item() requires a scalar tensor, shape is {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// Number of rows of a 2-D tensor.
    pub fn rows(&self) -> Result<usize> {
        self.require_rank2("rows")?;
        Ok(self.shape[0])
    }

    /// Number of columns of a 2-D tensor.
    pub fn cols(&self) -> Result<usize> {
        self.require_rank2("cols")?;
        Ok(self.shape[1])
    }

    /// Row slice of a 2-D tensor.
    pub fn row(&self, r: usize) -> Result<&[f64]> {
        self.require_rank2("row")?;
        let (rows, cols) = (self.shape[0], self.shape[1]);
        if r >= rows {
            return Err(Error::Index(format!("row {r} out of {rows}")));
        }
        Ok(&self.data[r * cols..(r + 1) * cols])
    }

    pub(crate) fn require_rank2(&self, op: &'static str) -> Result<()> {
        if self.shape.len() != 2 {
            return Err(Error::Dimension(format!(
                "{op} requires a 2-D tensor, shape is {:?}",
                self.shape
            )));
        }
        Ok(())
    }

    /// True when every element is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_data_length_must_agree() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn zero_extent_rejected() {
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn scalar_has_one_element() {
        let s = Tensor::scalar(4.5);
        assert_eq!(s.numel(), 1);
        assert_eq!(s.item().unwrap(), 4.5);
        assert!(s.shape().is_empty());
    }
}
