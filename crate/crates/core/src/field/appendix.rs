//! Symmetric double well with an antisymmetric coupling.
//!
//! In deviation coordinates `d = p - p*`:
//!
//! ```text
//! V(d)  = (a² - d₁²)² / 4 + b d₂² / 2
//! Ā(d)  = (k d₂, -k d₁)
//! A(d)  = (d₁(a² - d₁²) + k d₂,  -b d₂ - k d₁)
//! ```

use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{DomainBox, FieldError, FieldModel, FieldSpec, ParameterVector, PriceVector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppendixParams {
    pub a: f64,
    pub b: f64,
    pub k: f64,
    pub reference_point: PriceVector,
}

impl AppendixParams {
    /// Reference point at the origin.
    pub fn new(a: f64, b: f64, k: f64) -> Result<Self, FieldError> {
        Self::with_reference(a, b, k, PriceVector::from([0.0, 0.0]))
    }

    pub fn with_reference(
        a: f64,
        b: f64,
        k: f64,
        reference_point: PriceVector,
    ) -> Result<Self, FieldError> {
        if !(a.is_finite() && a > 0.0) {
            return Err(FieldError::InvalidParameters(format!("a must be > 0, got {a}")));
        }
        if !(b.is_finite() && b > 0.0) {
            return Err(FieldError::InvalidParameters(format!("b must be > 0, got {b}")));
        }
        if !k.is_finite() {
            return Err(FieldError::InvalidParameters(format!("k must be finite, got {k}")));
        }
        if reference_point.dim() != 2 {
            return Err(FieldError::DimensionMismatch {
                expected: 2,
                got: reference_point.dim(),
            });
        }
        Ok(Self { a, b, k, reference_point })
    }

    /// `a² - k²/b`, positive in the two-well regime.
    pub fn well_discriminant(&self) -> f64 {
        self.a * self.a - self.k * self.k / self.b
    }

    pub fn is_two_well(&self) -> bool {
        self.well_discriminant() > 0.0
    }
}

#[derive(Debug, Clone)]
pub struct AppendixModel {
    params: AppendixParams,
}

impl AppendixModel {
    pub fn new(params: AppendixParams) -> Self {
        Self { params }
    }

    pub fn params(&self) -> &AppendixParams {
        &self.params
    }

    #[inline]
    fn deviation(&self, p: &[f64]) -> (f64, f64) {
        let r = &self.params.reference_point;
        (p[0] - r[0], p[1] - r[1])
    }
}

impl FieldModel for AppendixModel {
    fn dimension(&self) -> usize {
        2
    }

    fn parameters(&self) -> ParameterVector {
        ParameterVector(vec![self.params.a, self.params.b, self.params.k])
    }

    fn with_parameters(
        &self,
        params: &ParameterVector,
    ) -> Result<Arc<dyn FieldModel>, FieldError> {
        let v = params.as_slice();
        if v.len() != 3 {
            return Err(FieldError::InvalidParameters(format!(
                "double-well family takes [a, b, k], got {} values",
                v.len()
            )));
        }
        let p = AppendixParams::with_reference(
            v[0],
            v[1],
            v[2],
            self.params.reference_point.clone(),
        )?;
        Ok(Arc::new(Self::new(p)))
    }

    #[inline]
    fn eval_into(&self, p: &[f64], out: &mut [f64]) {
        let (d1, d2) = self.deviation(p);
        let AppendixParams { a, b, k, .. } = self.params;
        out[0] = d1 * (a * a - d1 * d1) + k * d2;
        out[1] = -b * d2 - k * d1;
    }

    fn capabilities(&self) -> super::Capabilities {
        super::Capabilities {
            jacobian: true,
            potential: true,
            solenoidal: true,
        }
    }

    fn jacobian_into(&self, p: &[f64], out: &mut DMatrix<f64>) -> bool {
        let (d1, _) = self.deviation(p);
        let AppendixParams { a, b, k, .. } = self.params;
        out[(0, 0)] = a * a - 3.0 * d1 * d1;
        out[(0, 1)] = k;
        out[(1, 0)] = -k;
        out[(1, 1)] = -b;
        true
    }

    fn potential(&self, p: &[f64]) -> Option<f64> {
        let (d1, d2) = self.deviation(p);
        let AppendixParams { a, b, .. } = self.params;
        let w = a * a - d1 * d1;
        Some(0.25 * w * w + 0.5 * b * d2 * d2)
    }

    fn potential_gradient_into(&self, p: &[f64], out: &mut [f64]) -> bool {
        let (d1, d2) = self.deviation(p);
        let AppendixParams { a, b, .. } = self.params;
        out[0] = -d1 * (a * a - d1 * d1);
        out[1] = b * d2;
        true
    }

    fn solenoidal_into(&self, p: &[f64], out: &mut [f64]) -> bool {
        let (d1, d2) = self.deviation(p);
        out[0] = self.params.k * d2;
        out[1] = -self.params.k * d1;
        true
    }

    fn describe(&self) -> serde_json::Value {
        serde_json::json!({
            "kind": "appendix",
            "a": self.params.a,
            "b": self.params.b,
            "k": self.params.k,
            "reference_point": self.params.reference_point,
        })
    }
}

/// The double-well field on `domain`, in absolute price coordinates.
pub fn make_appendix_field(
    params: &AppendixParams,
    domain: DomainBox,
) -> Result<FieldSpec, FieldError> {
    let params =
        AppendixParams::with_reference(params.a, params.b, params.k, params.reference_point.clone())?;
    FieldSpec::new(Arc::new(AppendixModel::new(params)), domain)
}

/// Closed-form wells `(low, high)` ordered by the first deviation coordinate,
/// in absolute coordinates: `d₁ = ±√(a² - k²/b)`, `d₂ = -(k/b) d₁`.
/// `None` outside the two-well regime.
pub fn appendix_wells(params: &AppendixParams) -> Option<(PriceVector, PriceVector)> {
    if !params.is_two_well() {
        return None;
    }
    let s = params.well_discriminant().sqrt();
    let r = &params.reference_point;
    let well = |d1: f64| PriceVector(vec![r[0] + d1, r[1] - params.k / params.b * d1]);
    Some((well(-s), well(s)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn field(a: f64, b: f64, k: f64) -> FieldSpec {
        make_appendix_field(
            &AppendixParams::new(a, b, k).unwrap(),
            DomainBox::symmetric(2, 3.0).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn wells_are_zeros_without_coupling() {
        let f = field(1.0, 1.0, 0.0);
        assert_eq!(f.eval(&[1.0, 0.0]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(f.eval(&[-1.0, 0.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn potential_and_solenoidal_values() {
        let f = field(1.0, 1.0, 0.5);
        assert_eq!(f.potential(&[0.0, 0.0]).unwrap(), 0.25);
        assert_eq!(f.solenoidal(&[1.0, 2.0]).unwrap(), vec![1.0, -0.5]);
    }

    #[test]
    fn reference_point_shifts_everything() {
        let params =
            AppendixParams::with_reference(1.0, 2.0, 0.3, PriceVector::from([5.0, 7.0])).unwrap();
        let dom = DomainBox::new(vec![2.0, 4.0], vec![8.0, 10.0]).unwrap();
        let f = make_appendix_field(&params, dom).unwrap();
        let (lo, hi) = appendix_wells(&params).unwrap();
        for w in [lo, hi] {
            let r = f.eval(&w).unwrap();
            assert!(r.iter().all(|v| v.abs() < 1e-14), "{r:?}");
        }
        assert_eq!(f.eval(&[5.0, 7.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn invalid_parameters() {
        assert!(AppendixParams::new(0.0, 1.0, 0.1).is_err());
        assert!(AppendixParams::new(1.0, -1.0, 0.1).is_err());
        assert!(AppendixParams::new(1.0, 1.0, f64::NAN).is_err());
        let single = AppendixParams::new(1.0, 1.0, 2.0).unwrap();
        assert!(!single.is_two_well());
        assert!(appendix_wells(&single).is_none());
    }

    #[test]
    fn wells_closed_form() {
        let p = AppendixParams::new(1.0, 1.0, 0.5).unwrap();
        let (lo, hi) = appendix_wells(&p).unwrap();
        assert!((lo[0] + 0.8660254037844386).abs() < 1e-15);
        assert!((lo[1] - 0.4330127018922193).abs() < 1e-15);
        assert!((hi[0] - 0.8660254037844386).abs() < 1e-15);
        assert!((hi[1] + 0.4330127018922193).abs() < 1e-15);
    }
}
