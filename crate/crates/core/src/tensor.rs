//! Dense row-major tensors of `f64`.

use crate::error::{Error, Result};
use crate::rng::RngStream;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::InvalidShape(shape.to_vec()));
    }
    Ok(shape.iter().product())
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n = check_shape(&shape)?;
        if n != data.len() {
            return Err(Error::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    /// One-dimensional tensor. An empty vector gives an empty tensor, which
    /// the statistics below reject with [`Error::EmptyInput`].
    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = check_shape(&shape)?;
        Ok(Self {
            shape,
            data: vec![0.0; n],
        })
    }

    /// Standard-normal samples drawn from [`RngStream::new(seed)`](RngStream).
    pub fn gaussian(shape: Vec<usize>, seed: u64) -> Result<Self> {
        let n = check_shape(&shape)?;
        let mut rng = RngStream::new(seed);
        let data = (0..n).map(|_| rng.standard_normal()).collect();
        Ok(Self { shape, data })
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    /// Same shape, new data. `data.len()` must equal `self.len()`.
    pub(crate) fn like(&self, data: Vec<f64>) -> Tensor {
        debug_assert_eq!(data.len(), self.data.len());
        Tensor {
            shape: self.shape.clone(),
            data,
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|x| c * x)
    }

    pub fn ensure_same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(())
    }

    pub fn ensure_finite(&self) -> Result<()> {
        match self.data.iter().position(|x| !x.is_finite()) {
            Some(i) => Err(Error::NonFinite(i)),
            None => Ok(()),
        }
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.ensure_same_shape(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn mean_abs(&self) -> Result<f64> {
        mean_abs(&self.data)
    }

    pub fn normalized_distance(&self, approx: &Tensor) -> Result<f64> {
        normalized_distance(self, approx)
    }
}

/// Arithmetic mean of `|x|`. All-zero input gives 0.
pub fn mean_abs(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyInput("mean_abs"));
    }
    Ok(values.iter().map(|x| x.abs()).sum::<f64>() / values.len() as f64)
}

/// `‖a − b‖₂ / ‖a‖₂`.
pub fn normalized_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let denom = a.norm();
    if denom == 0.0 {
        return Err(Error::DegenerateNorm);
    }
    let num = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    Ok(num / denom)
}

#[cfg(test)]
mod tests {
    use super::*;

    const EX: [f64; 4] = [0.1, -0.5, 0.9, -0.2];

    #[test]
    fn gaussian_is_deterministic() {
        let a = Tensor::gaussian(vec![4], 42).unwrap();
        let b = Tensor::gaussian(vec![4], 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
        assert_eq!(Tensor::gaussian(vec![2, 3], 1).unwrap().len(), 6);
    }

    #[test]
    fn gaussian_rejects_bad_shape() {
        assert!(matches!(
            Tensor::gaussian(vec![3, 0], 1),
            Err(Error::InvalidShape(_))
        ));
        assert!(matches!(Tensor::gaussian(vec![], 1), Err(Error::InvalidShape(_))));
    }

    #[test]
    fn mean_abs_examples() {
        assert!((mean_abs(&EX).unwrap() - 0.425).abs() < 1e-12);
        assert_eq!(mean_abs(&[1.0, 1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(mean_abs(&[0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(mean_abs(&[]), Err(Error::EmptyInput("mean_abs")));
    }

    #[test]
    fn normalized_distance_examples() {
        let a = Tensor::from_vec(EX.to_vec());
        let b = Tensor::from_vec(vec![0.425, -0.425, 0.425, -0.425]);
        // sqrt(0.325^2 + 0.075^2 + 0.475^2 + 0.225^2) / sqrt(0.01 + 0.25 + 0.81 + 0.04)
        let expected = (0.105625f64 + 0.005625 + 0.225625 + 0.050625).sqrt() / 1.11f64.sqrt();
        assert!((a.normalized_distance(&b).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.5908).abs() < 1e-4);
        assert_eq!(a.normalized_distance(&a).unwrap(), 0.0);

        let a = Tensor::from_vec(vec![3.0, 4.0]);
        let z = Tensor::from_vec(vec![0.0, 0.0]);
        assert_eq!(a.normalized_distance(&z).unwrap(), 1.0);
        assert_eq!(z.normalized_distance(&a), Err(Error::DegenerateNorm));
        assert!(matches!(
            a.normalized_distance(&Tensor::from_vec(vec![1.0])),
            Err(Error::ShapeMismatch { .. })
        ));
    }
}
