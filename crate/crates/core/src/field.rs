//! The flat, shaped real-valued container used for every signal, noise draw
//! and measurement.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// A flat array of `f64` with an explicit row-major shape (`[d]`, `[H, W]`
/// or `[H, W, C]`).
#[derive(Debug, Clone, PartialEq)]
pub struct SignalField {
    data: Vec<f64>,
    shape: Vec<usize>,
}

impl SignalField {
    pub fn new(data: Vec<f64>, shape: Vec<usize>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if shape.is_empty() || expected != data.len() {
            return Err(Error::ShapeMismatch {
                expected: shape,
                actual: vec![data.len()],
            });
        }
        Ok(Self { data, shape })
    }

    /// One-dimensional field of length `data.len()`.
    pub fn from_vec(data: Vec<f64>) -> Self {
        let n = data.len();
        Self {
            data,
            shape: vec![n],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Self {
            data: vec![value; shape.iter().product()],
            shape: shape.to_vec(),
        }
    }

    /// Field of iid standard normal draws, consumed from `rng` in index order.
    pub fn standard_normal<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        Self {
            data,
            shape: shape.to_vec(),
        }
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

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Same data under a different shape with the same element count.
    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::ShapeMismatch {
                expected: shape.to_vec(),
                actual: self.shape,
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn ensure_shape(&self, expected: &[usize]) -> Result<()> {
        if self.shape != expected {
            return Err(Error::ShapeMismatch {
                expected: expected.to_vec(),
                actual: self.shape.clone(),
            });
        }
        Ok(())
    }

    pub fn ensure_same_shape(&self, other: &SignalField) -> Result<()> {
        self.ensure_shape(&other.shape)
    }

    pub fn dot(&self, other: &SignalField) -> f64 {
        dot(&self.data, &other.data)
    }

    pub fn norm_sq(&self) -> f64 {
        dot(&self.data, &self.data)
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn scaled(&self, a: f64) -> SignalField {
        self.map(|v| a * v)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> SignalField {
        SignalField {
            data: self.data.iter().map(|&v| f(v)).collect(),
            shape: self.shape.clone(),
        }
    }

    /// `a * self + b * other`; shapes must agree.
    pub fn lin_comb(&self, a: f64, other: &SignalField, b: f64) -> SignalField {
        debug_assert_eq!(self.shape, other.shape);
        SignalField {
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(x, y)| a * x + b * y)
                .collect(),
            shape: self.shape.clone(),
        }
    }

    /// `self += a * other`.
    pub fn axpy(&mut self, a: f64, other: &SignalField) {
        debug_assert_eq!(self.shape, other.shape);
        for (x, y) in self.data.iter_mut().zip(&other.data) {
            *x += a * y;
        }
    }

    pub fn sub(&self, other: &SignalField) -> SignalField {
        self.lin_comb(1.0, other, -1.0)
    }

    pub fn mean_squared_error(&self, other: &SignalField) -> Result<f64> {
        self.ensure_same_shape(other)?;
        let sum: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        Ok(sum / self.data.len() as f64)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
