//! Dense flat-vector arithmetic used by the surgery routines.
//!
//! Reductions sum strictly left to right so that results are reproducible
//! bit-for-bit across runs and platforms.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// A non-empty vector of finite `f64` components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct FlatVector(Vec<f64>);

impl FlatVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Empty);
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self(values))
    }

    pub fn zeros(dim: usize) -> Self {
        assert!(dim > 0, "FlatVector must have at least one component");
        Self(vec![0.0; dim])
    }

    /// Wraps values produced by arithmetic on already-validated vectors.
    pub(crate) fn from_raw(values: Vec<f64>) -> Self {
        debug_assert!(!values.is_empty());
        Self(values)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        norm_sq(self).sqrt()
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &FlatVector) -> Result<()> {
        check_dims(self, other)?;
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += b;
        }
        Ok(())
    }

    pub fn scaled(&self, alpha: f64) -> FlatVector {
        Self(self.0.iter().map(|v| alpha * v).collect())
    }
}

impl TryFrom<Vec<f64>> for FlatVector {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<FlatVector> for Vec<f64> {
    fn from(v: FlatVector) -> Self {
        v.0
    }
}

impl AsRef<[f64]> for FlatVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

fn check_dims(a: &FlatVector, b: &FlatVector) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch { expected: a.dim(), got: b.dim() });
    }
    Ok(())
}

pub fn dot(a: &FlatVector, b: &FlatVector) -> Result<f64> {
    check_dims(a, b)?;
    Ok(dot_unchecked(&a.0, &b.0))
}

#[inline]
pub(crate) fn dot_unchecked(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

pub fn norm_sq(a: &FlatVector) -> f64 {
    dot_unchecked(&a.0, &a.0)
}

/// Returns `alpha * x + y` as a new vector.
pub fn axpy(alpha: f64, x: &FlatVector, y: &FlatVector) -> Result<FlatVector> {
    check_dims(x, y)?;
    Ok(FlatVector(x.0.iter().zip(&y.0).map(|(a, b)| alpha * a + b).collect()))
}

/// Sequential sum `v[0] + v[1] + ... + v[n-1]`, starting from a copy of `v[0]`.
pub fn sum(vectors: &[FlatVector]) -> Result<FlatVector> {
    let (first, rest) = vectors.split_first().ok_or(Error::Empty)?;
    let mut acc = first.clone();
    for v in rest {
        acc.add_assign(v)?;
    }
    Ok(acc)
}

/// Cosine similarity, or `None` when either vector has squared norm below `eps`.
pub fn cosine(a: &FlatVector, b: &FlatVector, eps: f64) -> Result<Option<f64>> {
    let d = dot(a, b)?;
    let na = norm_sq(a);
    let nb = norm_sq(b);
    if na < eps || nb < eps {
        return Ok(None);
    }
    Ok(Some((d / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn v(xs: &[f64]) -> FlatVector {
        FlatVector::new(xs.to_vec()).unwrap()
    }

    #[test]
    fn dot_examples() {
        assert_eq!(dot(&v(&[1.0, 0.0]), &v(&[0.0, 1.0])).unwrap(), 0.0);
        assert_eq!(dot(&v(&[1.0, 2.0]), &v(&[3.0, 4.0])).unwrap(), 11.0);
        assert_eq!(dot(&v(&[1.0, 0.0]), &v(&[-1.0, 0.0])).unwrap(), -1.0);
    }

    #[test]
    fn dot_dimension_mismatch() {
        let err = dot(&v(&[1.0, 2.0]), &v(&[1.0])).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { expected: 2, got: 1 }));
    }

    #[test]
    fn norm_sq_examples() {
        assert_eq!(norm_sq(&v(&[0.0, 0.0, 0.0])), 0.0);
        assert_eq!(norm_sq(&v(&[3.0, 4.0])), 25.0);
        assert_eq!(norm_sq(&v(&[1.0])), 1.0);
    }

    #[test]
    fn axpy_examples() {
        let x = v(&[5.0, -7.0]);
        let y = v(&[2.0, 3.0]);
        assert_eq!(axpy(0.0, &x, &y).unwrap(), y);
        assert_eq!(axpy(1.0, &v(&[1.0, 1.0]), &v(&[0.0, 0.0])).unwrap(), v(&[1.0, 1.0]));
        assert_eq!(axpy(-2.0, &v(&[1.0, 0.0]), &v(&[3.0, 1.0])).unwrap(), v(&[1.0, 1.0]));
        assert!(axpy(1.0, &v(&[1.0]), &y).is_err());
    }

    #[test]
    fn construction_rejects_bad_input() {
        assert!(matches!(FlatVector::new(vec![]), Err(Error::Empty)));
        assert!(matches!(FlatVector::new(vec![1.0, f64::NAN]), Err(Error::NonFinite { index: 1 })));
        assert!(FlatVector::new(vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn serde_rejects_non_finite() {
        assert!(serde_json::from_str::<FlatVector>("[]").is_err());
        let ok: FlatVector = serde_json::from_str("[1.5,-2.0]").unwrap();
        assert_eq!(ok, v(&[1.5, -2.0]));
    }

    fn vec_pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (1usize..64).prop_flat_map(|n| (prop::collection::vec(-1e3f64..1e3, n), prop::collection::vec(-1e3f64..1e3, n)))
    }

    proptest! {
        #[test]
        fn dot_is_symmetric((a, b) in vec_pair()) {
            let (a, b) = (v(&a), v(&b));
            let ab = dot(&a, &b).unwrap();
            let ba = dot(&b, &a).unwrap();
            // x*y == y*x exactly in IEEE arithmetic, and the order of the
            // accumulation is the same.
            prop_assert_eq!(ab.to_bits(), ba.to_bits());
        }

        #[test]
        fn norm_sq_matches_self_dot((a, _b) in vec_pair()) {
            let a = v(&a);
            prop_assert_eq!(norm_sq(&a).to_bits(), dot(&a, &a).unwrap().to_bits());
            prop_assert!(norm_sq(&a) >= 0.0);
        }

        #[test]
        fn axpy_leaves_inputs_alone((x, y) in vec_pair(), alpha in -10.0f64..10.0) {
            let (x, y) = (v(&x), v(&y));
            let (x0, y0) = (x.clone(), y.clone());
            let _ = axpy(alpha, &x, &y).unwrap();
            prop_assert_eq!(x, x0);
            prop_assert_eq!(y, y0);
        }
    }
}
