use ndarray::Array1;

use crate::error::{Error, Result};

/// Tolerance on ‖v‖₂ for vectors tagged as normalized.
pub const UNIT_TOL: f64 = 1e-6;

/// A vector in the shared embedding space.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    values: Array1<f64>,
    normalized: bool,
}

impl Embedding {
    /// L2-normalizes `values`. A zero or non-finite vector has no direction
    /// and is rejected.
    pub fn normalize(values: Array1<f64>) -> Result<Self> {
        let norm = values.dot(&values).sqrt();
        if !norm.is_finite() || norm == 0.0 {
            return Err(Error::Numeric(format!("cannot normalize vector with norm {norm}")));
        }
        Ok(Embedding {
            values: values / norm,
            normalized: true,
        })
    }

    /// Wraps a vector without normalizing it.
    pub fn raw(values: Array1<f64>) -> Self {
        Embedding {
            values,
            normalized: false,
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn values(&self) -> &Array1<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array1<f64> {
        self.values
    }

    pub fn as_slice(&self) -> &[f64] {
        self.values.as_slice().expect("contiguous")
    }

    pub fn norm(&self) -> f64 {
        self.values.dot(&self.values).sqrt()
    }

    pub fn dot(&self, other: &Embedding) -> f64 {
        self.values.dot(&other.values)
    }

    pub fn cosine(&self, other: &Embedding) -> f64 {
        self.dot(other) / (self.norm() * other.norm())
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.values.iter().map(|&v| v as f32).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn normalize_contract() {
        let e = Embedding::normalize(array![3.0, 4.0]).unwrap();
        assert!((e.norm() - 1.0).abs() < UNIT_TOL);
        assert!(e.is_normalized());
        assert!(Embedding::normalize(array![0.0, 0.0]).is_err());
        assert!(Embedding::normalize(array![f64::NAN, 1.0]).is_err());
    }
}
