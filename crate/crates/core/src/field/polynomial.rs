//! Polynomial fields given as coefficient tables.

use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{Capabilities, FieldError, FieldModel, ParameterVector};

/// `coeff * Π p_i^powers[i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Monomial {
    pub coeff: f64,
    pub powers: Vec<u32>,
}

impl Monomial {
    pub fn new(coeff: f64, powers: Vec<u32>) -> Self {
        Self { coeff, powers }
    }

    #[inline]
    fn eval(&self, p: &[f64]) -> f64 {
        let mut v = self.coeff;
        for (x, &e) in p.iter().zip(&self.powers) {
            if e > 0 {
                v *= x.powi(e as i32);
            }
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Polynomial {
    pub terms: Vec<Monomial>,
}

impl Polynomial {
    pub fn from_terms(terms: Vec<Monomial>) -> Self {
        Self { terms }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    #[inline]
    pub fn eval(&self, p: &[f64]) -> f64 {
        self.terms.iter().map(|t| t.eval(p)).sum()
    }

    pub fn derivative(&self, axis: usize) -> Polynomial {
        let terms = self
            .terms
            .iter()
            .filter(|t| t.powers.get(axis).copied().unwrap_or(0) > 0)
            .map(|t| {
                let mut powers = t.powers.clone();
                let e = powers[axis];
                powers[axis] = e - 1;
                Monomial::new(t.coeff * e as f64, powers)
            })
            .collect();
        Self { terms }
    }

    pub fn scaled(&self, factor: f64) -> Polynomial {
        Self {
            terms: self
                .terms
                .iter()
                .map(|t| Monomial::new(t.coeff * factor, t.powers.clone()))
                .collect(),
        }
    }

    pub fn plus(&self, other: &Polynomial) -> Polynomial {
        let mut terms = self.terms.clone();
        terms.extend(other.terms.iter().cloned());
        Self { terms }
    }

    fn check_dimension(&self, dim: usize) -> Result<(), FieldError> {
        for t in &self.terms {
            if t.powers.len() != dim {
                return Err(FieldError::DimensionMismatch {
                    expected: dim,
                    got: t.powers.len(),
                });
            }
            if !t.coeff.is_finite() {
                return Err(FieldError::InvalidParameters(format!(
                    "non-finite coefficient {}",
                    t.coeff
                )));
            }
        }
        Ok(())
    }
}

/// Polynomial excess demand with exact Jacobian and optional explicit
/// potential / solenoidal parts.
///
/// The parameter vector is the flattened list of component coefficients
/// (component-major, in term order).
#[derive(Debug, Clone)]
pub struct PolynomialModel {
    dim: usize,
    components: Vec<Polynomial>,
    potential: Option<Polynomial>,
    solenoidal: Option<Vec<Polynomial>>,
    jacobian: Vec<Vec<Polynomial>>,
    potential_gradient: Option<Vec<Polynomial>>,
}

impl PolynomialModel {
    pub fn new(
        dim: usize,
        components: Vec<Polynomial>,
        potential: Option<Polynomial>,
        solenoidal: Option<Vec<Polynomial>>,
    ) -> Result<Self, FieldError> {
        if dim == 0 {
            return Err(FieldError::DimensionMismatch { expected: 1, got: 0 });
        }
        if components.len() != dim {
            return Err(FieldError::DimensionMismatch {
                expected: dim,
                got: components.len(),
            });
        }
        for c in &components {
            c.check_dimension(dim)?;
        }
        if let Some(v) = &potential {
            v.check_dimension(dim)?;
        }
        if let Some(s) = &solenoidal {
            if s.len() != dim {
                return Err(FieldError::DimensionMismatch {
                    expected: dim,
                    got: s.len(),
                });
            }
            for c in s {
                c.check_dimension(dim)?;
            }
        }
        let jacobian = components
            .iter()
            .map(|c| (0..dim).map(|j| c.derivative(j)).collect())
            .collect();
        let potential_gradient = potential
            .as_ref()
            .map(|v| (0..dim).map(|j| v.derivative(j)).collect());
        Ok(Self {
            dim,
            components,
            potential,
            solenoidal,
            jacobian,
            potential_gradient,
        })
    }

    /// Builds `A = -∇V + Ā` from its parts; an absent part is taken as zero and
    /// still declared, so the result always carries both analytic parts.
    pub fn from_parts(
        dim: usize,
        potential: Option<Polynomial>,
        solenoidal: Option<Vec<Polynomial>>,
    ) -> Result<Self, FieldError> {
        let potential = potential.unwrap_or_default();
        let solenoidal = solenoidal.unwrap_or_else(|| vec![Polynomial::zero(); dim]);
        if solenoidal.len() != dim {
            return Err(FieldError::DimensionMismatch {
                expected: dim,
                got: solenoidal.len(),
            });
        }
        let components = (0..dim)
            .map(|i| potential.derivative(i).scaled(-1.0).plus(&solenoidal[i]))
            .collect();
        Self::new(dim, components, Some(potential), Some(solenoidal))
    }

    /// `A(p) = M p`.
    pub fn linear(matrix: &[Vec<f64>]) -> Result<Self, FieldError> {
        let dim = matrix.len();
        let components = matrix
            .iter()
            .map(|row| {
                if row.len() != dim {
                    return Err(FieldError::DimensionMismatch {
                        expected: dim,
                        got: row.len(),
                    });
                }
                Ok(Polynomial::from_terms(
                    row.iter()
                        .enumerate()
                        .filter(|(_, c)| **c != 0.0)
                        .map(|(j, c)| {
                            let mut powers = vec![0; dim];
                            powers[j] = 1;
                            Monomial::new(*c, powers)
                        })
                        .collect(),
                ))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(dim, components, None, None)
    }

    pub fn components(&self) -> &[Polynomial] {
        &self.components
    }
}

impl FieldModel for PolynomialModel {
    fn dimension(&self) -> usize {
        self.dim
    }

    fn parameters(&self) -> ParameterVector {
        ParameterVector(
            self.components
                .iter()
                .flat_map(|c| c.terms.iter().map(|t| t.coeff))
                .collect(),
        )
    }

    /// Replaces the component coefficients. Explicit analytic parts are kept
    /// only when the coefficients are unchanged.
    fn with_parameters(
        &self,
        params: &ParameterVector,
    ) -> Result<Arc<dyn FieldModel>, FieldError> {
        let values = params.as_slice();
        let expected: usize = self.components.iter().map(|c| c.terms.len()).sum();
        if values.len() != expected {
            return Err(FieldError::InvalidParameters(format!(
                "polynomial field takes {expected} coefficients, got {}",
                values.len()
            )));
        }
        if *params == self.parameters() {
            return Ok(Arc::new(self.clone()));
        }
        let mut it = values.iter();
        let components = self
            .components
            .iter()
            .map(|c| Polynomial {
                terms: c
                    .terms
                    .iter()
                    .map(|t| Monomial::new(*it.next().unwrap(), t.powers.clone()))
                    .collect(),
            })
            .collect();
        Ok(Arc::new(Self::new(self.dim, components, None, None)?))
    }

    #[inline]
    fn eval_into(&self, p: &[f64], out: &mut [f64]) {
        for (o, c) in out.iter_mut().zip(&self.components) {
            *o = c.eval(p);
        }
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            jacobian: true,
            potential: self.potential.is_some(),
            solenoidal: self.solenoidal.is_some(),
        }
    }

    fn jacobian_into(&self, p: &[f64], out: &mut DMatrix<f64>) -> bool {
        for (i, row) in self.jacobian.iter().enumerate() {
            for (j, d) in row.iter().enumerate() {
                out[(i, j)] = d.eval(p);
            }
        }
        true
    }

    fn potential(&self, p: &[f64]) -> Option<f64> {
        self.potential.as_ref().map(|v| v.eval(p))
    }

    fn potential_gradient_into(&self, p: &[f64], out: &mut [f64]) -> bool {
        match &self.potential_gradient {
            Some(g) => {
                for (o, d) in out.iter_mut().zip(g) {
                    *o = d.eval(p);
                }
                true
            }
            None => false,
        }
    }

    fn solenoidal_into(&self, p: &[f64], out: &mut [f64]) -> bool {
        match &self.solenoidal {
            Some(s) => {
                for (o, c) in out.iter_mut().zip(s) {
                    *o = c.eval(p);
                }
                true
            }
            None => false,
        }
    }

    fn describe(&self) -> serde_json::Value {
        serde_json::json!({
            "kind": "polynomial",
            "dimension": self.dim,
            "components": self.components,
            "potential": self.potential,
            "solenoidal": self.solenoidal,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derivative_of_monomials() {
        // 3 x² y - y³
        let p = Polynomial::from_terms(vec![
            Monomial::new(3.0, vec![2, 1]),
            Monomial::new(-1.0, vec![0, 3]),
        ]);
        let dx = p.derivative(0);
        let dy = p.derivative(1);
        let at = [1.5, -2.0];
        assert_eq!(p.eval(&at), 3.0 * 2.25 * -2.0 + 8.0);
        assert_eq!(dx.eval(&at), 6.0 * 1.5 * -2.0);
        assert_eq!(dy.eval(&at), 3.0 * 2.25 - 3.0 * 4.0);
    }

    #[test]
    fn parameters_round_trip() {
        let m = PolynomialModel::linear(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(m.parameters().as_slice(), &[1.0, 2.0, 3.0, 4.0]);
        let m2 = m
            .with_parameters(&ParameterVector::new(vec![-1.0, 0.0, 0.0, -1.0]).unwrap())
            .unwrap();
        let mut out = [0.0; 2];
        m2.eval_into(&[2.0, 3.0], &mut out);
        assert_eq!(out, [-2.0, -3.0]);
        assert!(m
            .with_parameters(&ParameterVector::new(vec![1.0]).unwrap())
            .is_err());
    }

    #[test]
    fn mismatched_powers_rejected() {
        let c = vec![
            Polynomial::from_terms(vec![Monomial::new(1.0, vec![1])]),
            Polynomial::zero(),
        ];
        assert!(PolynomialModel::new(2, c, None, None).is_err());
    }
}
