use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Data {
    Real(Vec<f64>),
    Complex(Vec<Complex64>),
}

/// Dense row-major array, real or complex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Array {
    pub shape: Vec<usize>,
    pub data: Data,
}

impl Array {
    pub fn real(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape {shape:?} vs {} elements", data.len());
        Self { shape: shape.to_vec(), data: Data::Real(data) }
    }

    pub fn complex(shape: &[usize], data: Vec<Complex64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape {shape:?} vs {} elements", data.len());
        Self { shape: shape.to_vec(), data: Data::Complex(data) }
    }

    pub fn scalar(v: f64) -> Self {
        Self::real(&[1], vec![v])
    }

    pub fn zeros_like(&self) -> Self {
        match &self.data {
            Data::Real(v) => Self::real(&self.shape, vec![0.0; v.len()]),
            Data::Complex(v) => Self::complex(&self.shape, vec![Complex64::new(0.0, 0.0); v.len()]),
        }
    }

    pub fn len(&self) -> usize {
        match &self.data {
            Data::Real(v) => v.len(),
            Data::Complex(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_complex(&self) -> bool {
        matches!(self.data, Data::Complex(_))
    }

    pub fn re(&self) -> &[f64] {
        match &self.data {
            Data::Real(v) => v,
            Data::Complex(_) => panic!("expected a real array"),
        }
    }

    pub fn re_mut(&mut self) -> &mut Vec<f64> {
        match &mut self.data {
            Data::Real(v) => v,
            Data::Complex(_) => panic!("expected a real array"),
        }
    }

    pub fn cx(&self) -> &[Complex64] {
        match &self.data {
            Data::Complex(v) => v,
            Data::Real(_) => panic!("expected a complex array"),
        }
    }

    pub fn cx_mut(&mut self) -> &mut Vec<Complex64> {
        match &mut self.data {
            Data::Complex(v) => v,
            Data::Real(_) => panic!("expected a complex array"),
        }
    }

    pub fn expect_real(&self, what: &str) -> Result<&[f64]> {
        match &self.data {
            Data::Real(v) => Ok(v),
            Data::Complex(_) => Err(Error::Kind(format!("{what}: expected real input"))),
        }
    }

    pub fn expect_complex(&self, what: &str) -> Result<&[Complex64]> {
        match &self.data {
            Data::Complex(v) => Ok(v),
            Data::Real(_) => Err(Error::Kind(format!("{what}: expected complex input"))),
        }
    }

    /// `self += other` (same kind and shape).
    pub fn add_assign(&mut self, other: &Array) {
        match (&mut self.data, &other.data) {
            (Data::Real(a), Data::Real(b)) => a.iter_mut().zip(b).for_each(|(a, b)| *a += b),
            (Data::Complex(a), Data::Complex(b)) => a.iter_mut().zip(b).for_each(|(a, b)| *a += b),
            _ => panic!("gradient kind mismatch"),
        }
    }

    /// Real inner product `Re <self, other>` over all elements.
    pub fn dot_re(&self, other: &Array) -> f64 {
        match (&self.data, &other.data) {
            (Data::Real(a), Data::Real(b)) => a.iter().zip(b).map(|(a, b)| a * b).sum(),
            (Data::Complex(a), Data::Complex(b)) => a.iter().zip(b).map(|(a, b)| a.re * b.re + a.im * b.im).sum(),
            _ => panic!("kind mismatch"),
        }
    }

    pub fn norm(&self) -> f64 {
        self.dot_re(self).sqrt()
    }

    pub fn all_finite(&self) -> bool {
        match &self.data {
            Data::Real(v) => v.iter().all(|x| x.is_finite()),
            Data::Complex(v) => v.iter().all(|x| x.re.is_finite() && x.im.is_finite()),
        }
    }

    /// Number of elements per entry of the leading axis.
    pub fn plane(&self) -> usize {
        self.len() / self.shape[0].max(1)
    }
}
