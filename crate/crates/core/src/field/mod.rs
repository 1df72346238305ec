//! Excess-demand vector fields.
//!
//! A [`FieldSpec`] couples a [`FieldModel`] (the rule `p -> A(p)` plus any
//! analytic extras it can provide) with the axis-aligned box on which it may be
//! evaluated. Evaluation outside the box is an error, never an extrapolation.

mod appendix;
mod polynomial;

use std::fmt;
use std::ops::Deref;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use appendix::{appendix_wells, make_appendix_field, AppendixModel, AppendixParams};
pub use polynomial::{Monomial, Polynomial, PolynomialModel};

use crate::critical::{self, CriticalError, CriticalPoint, CriticalSearchSettings};

/// Relative central-difference step.
pub const FD_RELATIVE_STEP: f64 = 1e-5;
/// Absolute floor for the finite-difference step.
pub const FD_ABSOLUTE_FLOOR: f64 = 1e-8;
/// Tolerance of the `A = -∇V + Ā` identity for fields with both analytic parts.
pub const DECOMPOSITION_IDENTITY_TOL: f64 = 1e-10;
/// Tolerance on the divergence of a declared solenoidal part.
pub const SOLENOIDAL_DIVERGENCE_TOL: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FieldError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("point {point:?} lies outside the domain box")]
    OutsideDomain { point: Vec<f64> },
    #[error("non-finite {what} at {point:?}")]
    NonFinite { what: &'static str, point: Vec<f64> },
    #[error("field has no analytic {0}")]
    MissingAnalytic(&'static str),
    #[error("invalid parameters: {0}")]
    InvalidParameters(String),
    #[error("invalid domain: {0}")]
    InvalidDomain(String),
    #[error("inconsistent analytic parts: {0}")]
    InconsistentAnalytic(String),
}

/// Prices of the `n` goods.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PriceVector(Vec<f64>);

impl PriceVector {
    pub fn new(values: Vec<f64>) -> Result<Self, FieldError> {
        if values.is_empty() {
            return Err(FieldError::DimensionMismatch { expected: 1, got: 0 });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(FieldError::NonFinite { what: "price", point: values });
        }
        Ok(Self(values))
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

    pub fn distance(&self, other: &[f64]) -> f64 {
        distance(&self.0, other)
    }
}

impl Deref for PriceVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl<const N: usize> From<[f64; N]> for PriceVector {
    fn from(values: [f64; N]) -> Self {
        Self(values.to_vec())
    }
}

/// Model parameters `π`; may be empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(transparent)]
pub struct ParameterVector(Vec<f64>);

impl ParameterVector {
    pub fn new(values: Vec<f64>) -> Result<Self, FieldError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(FieldError::InvalidParameters(format!(
                "non-finite entry in {values:?}"
            )));
        }
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Axis-aligned box `[lower_i, upper_i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl DomainBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self, FieldError> {
        if lower.len() != upper.len() || lower.is_empty() {
            return Err(FieldError::InvalidDomain(format!(
                "bounds have lengths {} and {}",
                lower.len(),
                upper.len()
            )));
        }
        for (axis, (lo, hi)) in lower.iter().zip(&upper).enumerate() {
            if !lo.is_finite() || !hi.is_finite() || lo >= hi {
                return Err(FieldError::InvalidDomain(format!(
                    "axis {axis}: need finite lower < upper, got [{lo}, {hi}]"
                )));
            }
        }
        Ok(Self { lower, upper })
    }

    /// The cube `[-half_width, half_width]^dim`.
    pub fn symmetric(dim: usize, half_width: f64) -> Result<Self, FieldError> {
        Self::new(vec![-half_width; dim], vec![half_width; dim])
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, p: &[f64]) -> bool {
        p.len() == self.lower.len()
            && p
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(x, (lo, hi))| *x >= *lo && *x <= *hi)
    }

    pub fn contains_box(&self, other: &DomainBox) -> bool {
        self.contains(&other.lower) && self.contains(&other.upper)
    }

    /// Tensor lattice with `per_axis` evenly spaced points per axis (endpoints included).
    pub fn lattice(&self, per_axis: usize) -> Vec<Vec<f64>> {
        let n = self.dim();
        let per_axis = per_axis.max(2);
        let total = per_axis.pow(n as u32);
        (0..total)
            .map(|mut flat| {
                let mut p = vec![0.0; n];
                for axis in (0..n).rev() {
                    let i = flat % per_axis;
                    flat /= per_axis;
                    let s = i as f64 / (per_axis - 1) as f64;
                    p[axis] = self.lower[axis] + s * (self.upper[axis] - self.lower[axis]);
                }
                p
            })
            .collect()
    }
}

/// `∂A_i/∂p_j` at a point.
#[derive(Debug, Clone, PartialEq)]
pub struct JacobianMatrix(pub DMatrix<f64>);

impl JacobianMatrix {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[(i, j)]
    }

    /// Frobenius norm of the antisymmetric part `(J - Jᵀ)/2`.
    pub fn antisymmetric_norm(&self) -> f64 {
        let anti = (&self.0 - self.0.transpose()) * 0.5;
        anti.norm()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum JacobianMode {
    /// Use the model's analytic Jacobian; fails if it has none.
    Analytic,
    FiniteDifference,
    /// Analytic when available, finite differences otherwise.
    #[default]
    Auto,
}

/// Analytic extras a model may provide.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Capabilities {
    pub jacobian: bool,
    pub potential: bool,
    pub solenoidal: bool,
}

/// The rule `p -> A(p)` for fixed parameters, plus optional analytic parts.
///
/// Coordinates passed to a model have already been dimension-checked.
pub trait FieldModel: fmt::Debug + Send + Sync {
    fn dimension(&self) -> usize;

    fn parameters(&self) -> ParameterVector;

    /// Same family, new parameters.
    fn with_parameters(&self, params: &ParameterVector)
        -> Result<Arc<dyn FieldModel>, FieldError>;

    fn eval_into(&self, p: &[f64], out: &mut [f64]);

    fn capabilities(&self) -> Capabilities {
        Capabilities::default()
    }

    /// Writes the analytic Jacobian into `out`; `false` if unavailable.
    fn jacobian_into(&self, _p: &[f64], _out: &mut DMatrix<f64>) -> bool {
        false
    }

    fn potential(&self, _p: &[f64]) -> Option<f64> {
        None
    }

    /// Writes `∇V` into `out`; `false` if unavailable.
    fn potential_gradient_into(&self, _p: &[f64], _out: &mut [f64]) -> bool {
        false
    }

    /// Writes `Ā` into `out`; `false` if unavailable.
    fn solenoidal_into(&self, _p: &[f64], _out: &mut [f64]) -> bool {
        false
    }

    /// Machine-readable description used when echoing configurations.
    fn describe(&self) -> serde_json::Value;
}

/// An evaluable excess-demand field on a bounded box.
#[derive(Debug, Clone)]
pub struct FieldSpec {
    model: Arc<dyn FieldModel>,
    domain: DomainBox,
}

impl FieldSpec {
    /// Wraps a model, checking the domain and (when both analytic parts are
    /// declared) the decomposition identity and solenoidal divergence on a
    /// sample lattice.
    pub fn new(model: Arc<dyn FieldModel>, domain: DomainBox) -> Result<Self, FieldError> {
        if domain.dim() != model.dimension() {
            return Err(FieldError::DimensionMismatch {
                expected: model.dimension(),
                got: domain.dim(),
            });
        }
        let spec = Self { model, domain };
        spec.verify_analytic_parts()?;
        Ok(spec)
    }

    pub fn dimension(&self) -> usize {
        self.model.dimension()
    }

    pub fn domain(&self) -> &DomainBox {
        &self.domain
    }

    pub fn model(&self) -> &Arc<dyn FieldModel> {
        &self.model
    }

    pub fn parameters(&self) -> ParameterVector {
        self.model.parameters()
    }

    pub fn capabilities(&self) -> Capabilities {
        self.model.capabilities()
    }

    pub fn with_parameters(&self, params: &ParameterVector) -> Result<Self, FieldError> {
        Self::new(self.model.with_parameters(params)?, self.domain.clone())
    }

    pub fn with_domain(&self, domain: DomainBox) -> Result<Self, FieldError> {
        Self::new(self.model.clone(), domain)
    }

    pub fn check_point(&self, p: &[f64]) -> Result<(), FieldError> {
        if p.len() != self.dimension() {
            return Err(FieldError::DimensionMismatch {
                expected: self.dimension(),
                got: p.len(),
            });
        }
        if !self.domain.contains(p) {
            return Err(FieldError::OutsideDomain { point: p.to_vec() });
        }
        Ok(())
    }

    /// `A(p)` into a caller-provided buffer.
    pub fn eval_into(&self, p: &[f64], out: &mut [f64]) -> Result<(), FieldError> {
        self.check_point(p)?;
        self.model.eval_into(p, out);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(FieldError::NonFinite {
                what: "excess demand",
                point: p.to_vec(),
            });
        }
        Ok(())
    }

    pub fn eval(&self, p: &[f64]) -> Result<Vec<f64>, FieldError> {
        let mut out = vec![0.0; self.dimension()];
        self.eval_into(p, &mut out)?;
        Ok(out)
    }

    pub fn jacobian(&self, p: &[f64], mode: JacobianMode) -> Result<JacobianMatrix, FieldError> {
        self.check_point(p)?;
        let n = self.dimension();
        let analytic = self.capabilities().jacobian;
        let use_analytic = match mode {
            JacobianMode::Analytic if !analytic => {
                return Err(FieldError::MissingAnalytic("jacobian"))
            }
            JacobianMode::Analytic => true,
            JacobianMode::FiniteDifference => false,
            JacobianMode::Auto => analytic,
        };
        let jac = if use_analytic {
            let mut m = DMatrix::zeros(n, n);
            self.model.jacobian_into(p, &mut m);
            m
        } else {
            self.finite_difference_jacobian(p, None)?
        };
        if jac.iter().any(|v| !v.is_finite()) {
            return Err(FieldError::NonFinite {
                what: "jacobian",
                point: p.to_vec(),
            });
        }
        Ok(JacobianMatrix(jac))
    }

    /// Central differences with per-axis step `max(rel * max(1, |p_j|), 1e-8)`.
    /// Falls back to a one-sided difference where a central stencil would leave
    /// the domain.
    pub fn finite_difference_jacobian(
        &self,
        p: &[f64],
        relative_step: Option<f64>,
    ) -> Result<DMatrix<f64>, FieldError> {
        self.check_point(p)?;
        let n = self.dimension();
        let rel = relative_step.unwrap_or(FD_RELATIVE_STEP);
        let mut jac = DMatrix::zeros(n, n);
        let mut x = p.to_vec();
        let mut plus = vec![0.0; n];
        let mut minus = vec![0.0; n];
        for j in 0..n {
            let h = (rel * p[j].abs().max(1.0)).max(FD_ABSOLUTE_FLOOR);
            let hi_ok = p[j] + h <= self.domain.upper[j];
            let lo_ok = p[j] - h >= self.domain.lower[j];
            let (up, down) = match (hi_ok, lo_ok) {
                (true, true) => (h, h),
                (true, false) => (h, 0.0),
                (false, true) => (0.0, h),
                (false, false) => {
                    return Err(FieldError::InvalidDomain(format!(
                        "axis {j} narrower than the difference step {h}"
                    )))
                }
            };
            x[j] = p[j] + up;
            self.eval_into(&x, &mut plus)?;
            x[j] = p[j] - down;
            self.eval_into(&x, &mut minus)?;
            x[j] = p[j];
            for i in 0..n {
                jac[(i, j)] = (plus[i] - minus[i]) / (up + down);
            }
        }
        Ok(jac)
    }

    pub fn potential(&self, p: &[f64]) -> Result<f64, FieldError> {
        self.check_point(p)?;
        self.model
            .potential(p)
            .ok_or(FieldError::MissingAnalytic("potential"))
    }

    pub fn potential_gradient(&self, p: &[f64]) -> Result<Vec<f64>, FieldError> {
        self.check_point(p)?;
        let mut out = vec![0.0; self.dimension()];
        if self.model.potential_gradient_into(p, &mut out) {
            Ok(out)
        } else {
            Err(FieldError::MissingAnalytic("potential gradient"))
        }
    }

    pub fn solenoidal_into(&self, p: &[f64], out: &mut [f64]) -> Result<(), FieldError> {
        self.check_point(p)?;
        if self.model.solenoidal_into(p, out) {
            Ok(())
        } else {
            Err(FieldError::MissingAnalytic("solenoidal part"))
        }
    }

    pub fn solenoidal(&self, p: &[f64]) -> Result<Vec<f64>, FieldError> {
        let mut out = vec![0.0; self.dimension()];
        self.solenoidal_into(p, &mut out)?;
        Ok(out)
    }

    pub fn describe(&self) -> serde_json::Value {
        serde_json::json!({
            "model": self.model.describe(),
            "domain": { "lower": self.domain.lower, "upper": self.domain.upper },
        })
    }

    fn verify_analytic_parts(&self) -> Result<(), FieldError> {
        let caps = self.capabilities();
        if !(caps.potential && caps.solenoidal) {
            return Ok(());
        }
        let n = self.dimension();
        let per_axis = if n <= 2 { 7 } else { 4 };
        let mut a = vec![0.0; n];
        let mut grad = vec![0.0; n];
        let mut sol = vec![0.0; n];
        for p in self.domain.lattice(per_axis) {
            self.model.eval_into(&p, &mut a);
            if !self.model.potential_gradient_into(&p, &mut grad) {
                return Err(FieldError::InconsistentAnalytic(
                    "potential declared without its gradient".into(),
                ));
            }
            self.model.solenoidal_into(&p, &mut sol);
            for i in 0..n {
                let mismatch = (a[i] + grad[i] - sol[i]).abs();
                if mismatch > DECOMPOSITION_IDENTITY_TOL * (1.0 + a[i].abs()) {
                    return Err(FieldError::InconsistentAnalytic(format!(
                        "A + ∇V - Ā = {mismatch:e} in component {i} at {p:?}"
                    )));
                }
            }
            let div = self.solenoidal_divergence(&p)?;
            let scale = 1.0 + sol.iter().map(|v| v.abs()).fold(0.0, f64::max);
            if div.abs() > SOLENOIDAL_DIVERGENCE_TOL * scale {
                return Err(FieldError::InconsistentAnalytic(format!(
                    "solenoidal divergence {div:e} at {p:?}"
                )));
            }
        }
        Ok(())
    }

    /// Central-difference divergence of the analytic solenoidal part.
    pub fn solenoidal_divergence(&self, p: &[f64]) -> Result<f64, FieldError> {
        let n = self.dimension();
        let mut x = p.to_vec();
        let mut plus = vec![0.0; n];
        let mut minus = vec![0.0; n];
        let mut div = 0.0;
        for j in 0..n {
            let h = (FD_RELATIVE_STEP * p[j].abs().max(1.0)).max(FD_ABSOLUTE_FLOOR);
            x[j] = p[j] + h;
            if !self.model.solenoidal_into(&x, &mut plus) {
                return Err(FieldError::MissingAnalytic("solenoidal part"));
            }
            x[j] = p[j] - h;
            self.model.solenoidal_into(&x, &mut minus);
            x[j] = p[j];
            div += (plus[j] - minus[j]) / (2.0 * h);
        }
        Ok(div)
    }
}

pub(crate) fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// `A(p, π)` under the field's current parameters.
pub fn eval_excess_demand(field: &FieldSpec, p: &PriceVector) -> Result<Vec<f64>, FieldError> {
    field.eval(p)
}

pub fn eval_jacobian(
    field: &FieldSpec,
    p: &PriceVector,
    mode: JacobianMode,
) -> Result<JacobianMatrix, FieldError> {
    field.jacobian(p, mode)
}

/// Frobenius norm of `(∇A - ∇Aᵀ)/2`; zero iff the Jacobian is symmetric at `p`.
pub fn asymmetry_norm(field: &FieldSpec, p: &PriceVector) -> Result<f64, FieldError> {
    Ok(field.jacobian(p, JacobianMode::Auto)?.antisymmetric_norm())
}

#[derive(Debug, Error)]
pub enum CompareError {
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error("critical-point search failed for the {scenario} scenario: {source}")]
    Search {
        scenario: &'static str,
        #[source]
        source: CriticalError,
    },
}

#[derive(Debug, Clone, Serialize)]
pub struct MatchedPair {
    pub baseline: usize,
    pub alternative: usize,
    pub displacement: Vec<f64>,
    pub distance: f64,
    pub index_changed: bool,
}

/// Critical points of the same field under two parameter vectors.
#[derive(Debug, Clone, Serialize)]
pub struct ScenarioComparison {
    pub baseline_parameters: ParameterVector,
    pub alternative_parameters: ParameterVector,
    pub baseline: Vec<CriticalPoint>,
    pub alternative: Vec<CriticalPoint>,
    pub pairs: Vec<MatchedPair>,
    pub unmatched_baseline: Vec<usize>,
    pub unmatched_alternative: Vec<usize>,
}

/// Runs the critical-point search under `π` and `π′` and pairs the results by
/// nearest displacement (greedy over all pairs, closest first).
pub fn compare_scenarios(
    field: &FieldSpec,
    baseline: &ParameterVector,
    alternative: &ParameterVector,
    settings: &CriticalSearchSettings,
) -> Result<ScenarioComparison, CompareError> {
    let base_field = field.with_parameters(baseline)?;
    let alt_field = field.with_parameters(alternative)?;
    let base = critical::find_critical_points(&base_field, settings)
        .map_err(|source| CompareError::Search { scenario: "baseline", source })?
        .points;
    let alt = critical::find_critical_points(&alt_field, settings)
        .map_err(|source| CompareError::Search { scenario: "alternative", source })?
        .points;

    let mut candidates: Vec<(f64, usize, usize)> = Vec::with_capacity(base.len() * alt.len());
    for (i, b) in base.iter().enumerate() {
        for (j, a) in alt.iter().enumerate() {
            candidates.push((b.location.distance(&a.location), i, j));
        }
    }
    candidates.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));

    let mut base_used = vec![false; base.len()];
    let mut alt_used = vec![false; alt.len()];
    let mut pairs = Vec::new();
    for (dist, i, j) in candidates {
        if base_used[i] || alt_used[j] {
            continue;
        }
        base_used[i] = true;
        alt_used[j] = true;
        let displacement = alt[j]
            .location
            .iter()
            .zip(base[i].location.iter())
            .map(|(a, b)| a - b)
            .collect();
        pairs.push(MatchedPair {
            baseline: i,
            alternative: j,
            displacement,
            distance: dist,
            index_changed: base[i].index != alt[j].index,
        });
    }
    pairs.sort_by_key(|p| p.baseline);
    let unmatched = |used: &[bool]| {
        used.iter()
            .enumerate()
            .filter(|(_, u)| !**u)
            .map(|(i, _)| i)
            .collect()
    };
    Ok(ScenarioComparison {
        baseline_parameters: baseline.clone(),
        alternative_parameters: alternative.clone(),
        unmatched_baseline: unmatched(&base_used),
        unmatched_alternative: unmatched(&alt_used),
        baseline: base,
        alternative: alt,
        pairs,
    })
}
