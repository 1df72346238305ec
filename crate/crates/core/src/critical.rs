//! Critical points of `A`: multistart Newton search, classification by index,
//! and basins of attraction of the deterministic flow.
//!
//! The index of a critical point is the number of Jacobian eigenvalues with
//! positive real part (unstable directions of `dp/dt = A`). For a gradient
//! field `∇A = -Hess(V)`, so this equals the number of negative Hessian
//! eigenvalues of the potential.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Serialize, Serializer};
use thiserror::Error;

use crate::field::{distance, DomainBox, FieldError, FieldSpec, JacobianMode, PriceVector};
use crate::hodge::GridSpec;

/// Eigenvalue real parts within this of zero mark a point as marginal.
pub const EIGEN_TIE_TOL: f64 = 1e-9;
/// Residual `|A|` accepted by [`classify`].
pub const CLASSIFY_RESIDUAL_TOL: f64 = 1e-6;
/// Roots closer than this are merged.
pub const DEDUP_DISTANCE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CriticalError {
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error("|A| = {residual:e} at {location:?} exceeds {tol:e}; not a critical point")]
    NotCritical {
        location: Vec<f64>,
        residual: f64,
        tol: f64,
    },
    #[error("invalid search settings: {0}")]
    InvalidSettings(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Stability {
    Stable,
    Saddle,
    Unstable,
    Marginal,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CriticalPoint {
    pub location: PriceVector,
    #[serde(serialize_with = "serialize_eigenvalues")]
    pub jacobian_eigenvalues: Vec<Complex64>,
    pub index: usize,
    pub stability: Stability,
    pub residual: f64,
}

fn serialize_eigenvalues<S: Serializer>(v: &[Complex64], s: S) -> Result<S::Ok, S::Error> {
    let pairs: Vec<[f64; 2]> = v.iter().map(|c| [c.re, c.im]).collect();
    pairs.serialize(s)
}

impl CriticalPoint {
    pub fn is_stable(&self) -> bool {
        self.stability == Stability::Stable
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CriticalSearchSettings {
    pub search_box: DomainBox,
    /// Starts per axis of the multistart lattice.
    pub multistart: usize,
    pub tol: f64,
    pub max_iters: usize,
}

impl CriticalSearchSettings {
    pub fn for_box(search_box: DomainBox) -> Self {
        Self {
            search_box,
            multistart: 16,
            tol: 1e-10,
            max_iters: 60,
        }
    }
}

/// Points plus per-start bookkeeping.
#[derive(Debug, Clone, Serialize)]
pub struct CriticalSearch {
    pub points: Vec<CriticalPoint>,
    pub starts: usize,
    pub converged: usize,
    pub abandoned_singular: usize,
    pub abandoned_domain: usize,
    pub not_converged: usize,
    pub diagnostic: Option<String>,
}

enum StartOutcome {
    Converged(Vec<f64>, f64),
    Singular,
    LeftBox,
    NoConvergence,
}

fn newton_from(
    field: &FieldSpec,
    start: Vec<f64>,
    settings: &CriticalSearchSettings,
) -> StartOutcome {
    let n = field.dimension();
    let mut x = start;
    let mut a = vec![0.0; n];
    if field.eval_into(&x, &mut a).is_err() {
        return StartOutcome::LeftBox;
    }
    let mut res = norm(&a);
    let mut trial = vec![0.0; n];
    let mut a_trial = vec![0.0; n];
    for _ in 0..settings.max_iters {
        if res <= settings.tol {
            return StartOutcome::Converged(x, res);
        }
        let jac = match field.jacobian(&x, JacobianMode::Auto) {
            Ok(j) => j.0,
            Err(_) => return StartOutcome::Singular,
        };
        let rhs = nalgebra::DVector::from_column_slice(&a);
        let step = match jac.lu().solve(&rhs) {
            Some(s) if s.iter().all(|v| v.is_finite()) => s,
            _ => return StartOutcome::Singular,
        };
        // damped step: halve until |A| decreases
        let mut lambda = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            for i in 0..n {
                trial[i] = x[i] - lambda * step[i];
            }
            if settings.search_box.contains(&trial) && field.eval_into(&trial, &mut a_trial).is_ok()
            {
                let r = norm(&a_trial);
                if r < res {
                    x.copy_from_slice(&trial);
                    a.copy_from_slice(&a_trial);
                    res = r;
                    accepted = true;
                    break;
                }
            }
            lambda *= 0.5;
        }
        if !accepted {
            return if settings.search_box.contains(&trial) {
                StartOutcome::NoConvergence
            } else {
                StartOutcome::LeftBox
            };
        }
    }
    if res <= settings.tol {
        StartOutcome::Converged(x, res)
    } else {
        StartOutcome::NoConvergence
    }
}

/// Cell-centred lattice of `per_axis^n` starting points.
fn multistart_lattice(b: &DomainBox, per_axis: usize) -> Vec<Vec<f64>> {
    let n = b.dim();
    let total = per_axis.pow(n as u32);
    (0..total)
        .map(|mut flat| {
            let mut p = vec![0.0; n];
            for axis in (0..n).rev() {
                let i = flat % per_axis;
                flat /= per_axis;
                let s = (i as f64 + 0.5) / per_axis as f64;
                p[axis] = b.lower[axis] + s * (b.upper[axis] - b.lower[axis]);
            }
            p
        })
        .collect()
}

/// Newton iterations from a `multistart^n` lattice; converged roots are
/// deduplicated, classified and sorted by location.
pub fn find_critical_points(
    field: &FieldSpec,
    settings: &CriticalSearchSettings,
) -> Result<CriticalSearch, CriticalError> {
    if settings.multistart == 0 {
        return Err(CriticalError::InvalidSettings("multistart must be ≥ 1".into()));
    }
    if !(settings.tol > 0.0) {
        return Err(CriticalError::InvalidSettings("tol must be > 0".into()));
    }
    if settings.search_box.dim() != field.dimension() {
        return Err(FieldError::DimensionMismatch {
            expected: field.dimension(),
            got: settings.search_box.dim(),
        }
        .into());
    }
    if !field.domain().contains_box(&settings.search_box) {
        return Err(CriticalError::InvalidSettings(
            "search box must lie inside the field domain".into(),
        ));
    }
    let starts = multistart_lattice(&settings.search_box, settings.multistart);
    let outcomes: Vec<StartOutcome> = starts
        .par_iter()
        .map(|s| newton_from(field, s.clone(), settings))
        .collect();

    let mut search = CriticalSearch {
        points: Vec::new(),
        starts: starts.len(),
        converged: 0,
        abandoned_singular: 0,
        abandoned_domain: 0,
        not_converged: 0,
        diagnostic: None,
    };
    let mut roots: Vec<(Vec<f64>, f64)> = Vec::new();
    for outcome in outcomes {
        match outcome {
            StartOutcome::Converged(x, r) => {
                search.converged += 1;
                match roots.iter_mut().find(|(y, _)| distance(&x, y) < DEDUP_DISTANCE) {
                    Some(existing) => {
                        if r < existing.1 {
                            *existing = (x, r);
                        }
                    }
                    None => roots.push((x, r)),
                }
            }
            StartOutcome::Singular => search.abandoned_singular += 1,
            StartOutcome::LeftBox => search.abandoned_domain += 1,
            StartOutcome::NoConvergence => search.not_converged += 1,
        }
    }
    roots.sort_by(|a, b| lexicographic(&a.0, &b.0));
    for (x, _) in roots {
        search.points.push(classify(field, &PriceVector::new(x)?)?);
    }
    if search.points.is_empty() {
        search.diagnostic = Some(format!(
            "no start converged ({} singular, {} left the box, {} hit the iteration cap)",
            search.abandoned_singular, search.abandoned_domain, search.not_converged
        ));
    }
    Ok(search)
}

fn lexicographic(a: &[f64], b: &[f64]) -> std::cmp::Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            std::cmp::Ordering::Equal => continue,
            o => return o,
        }
    }
    std::cmp::Ordering::Equal
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn eigenvalues(jac: &DMatrix<f64>) -> Vec<Complex64> {
    let mut ev: Vec<Complex64> = jac.complex_eigenvalues().iter().copied().collect();
    ev.sort_by(|a, b| a.re.total_cmp(&b.re).then(a.im.total_cmp(&b.im)));
    ev
}

/// Index and stability class from Jacobian eigenvalues.
pub fn classify_eigenvalues(ev: &[Complex64]) -> (usize, Stability) {
    let index = ev.iter().filter(|c| c.re > EIGEN_TIE_TOL).count();
    let marginal = ev.iter().any(|c| c.re.abs() <= EIGEN_TIE_TOL);
    let stability = if marginal {
        Stability::Marginal
    } else if index == 0 {
        Stability::Stable
    } else if index == ev.len() {
        Stability::Unstable
    } else {
        Stability::Saddle
    };
    (index, stability)
}

pub fn classify(field: &FieldSpec, location: &PriceVector) -> Result<CriticalPoint, CriticalError> {
    let a = field.eval(location)?;
    let residual = norm(&a);
    if residual > CLASSIFY_RESIDUAL_TOL {
        return Err(CriticalError::NotCritical {
            location: location.to_vec(),
            residual,
            tol: CLASSIFY_RESIDUAL_TOL,
        });
    }
    let jac = field.jacobian(location, JacobianMode::Auto)?;
    let ev = eigenvalues(jac.matrix());
    let (index, stability) = classify_eigenvalues(&ev);
    Ok(CriticalPoint {
        location: location.clone(),
        jacobian_eigenvalues: ev,
        index,
        stability,
        residual,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BasinLabel {
    /// Index into the critical-point list passed to [`basin_of_attraction`].
    Point(usize),
    Unresolved,
}

impl Serialize for BasinLabel {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            BasinLabel::Point(i) => s.serialize_u64(*i as u64),
            BasinLabel::Unresolved => s.serialize_str("unresolved"),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BasinMap {
    pub grid: GridSpec,
    pub labels: Vec<BasinLabel>,
}

impl BasinMap {
    pub fn count(&self, label: BasinLabel) -> usize {
        self.labels.iter().filter(|l| **l == label).count()
    }

    pub fn to_csv(&self) -> String {
        let n = self.grid.dim();
        let mut out = String::new();
        for axis in 0..n {
            out.push_str(&format!("p{},", axis + 1));
        }
        out.push_str("label\n");
        for (flat, label) in self.labels.iter().enumerate() {
            for x in self.grid.node_coords(flat) {
                out.push_str(&format!("{x},"));
            }
            match label {
                BasinLabel::Point(i) => out.push_str(&format!("{i}\n")),
                BasinLabel::Unresolved => out.push_str("unresolved\n"),
            }
        }
        out
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BasinSettings {
    pub capture_radius: f64,
    pub t_max: f64,
    pub dt: f64,
}

impl Default for BasinSettings {
    fn default() -> Self {
        Self {
            capture_radius: 0.1,
            t_max: 50.0,
            dt: 1e-2,
        }
    }
}

/// Labels every grid node with the stable point its deterministic flow
/// (fourth-order Runge–Kutta) reaches within `t_max`, or `Unresolved`.
pub fn basin_of_attraction(
    field: &FieldSpec,
    points: &[CriticalPoint],
    grid: &GridSpec,
    settings: &BasinSettings,
) -> Result<BasinMap, CriticalError> {
    if points.is_empty() {
        return Err(CriticalError::InvalidSettings("no critical points given".into()));
    }
    if !(settings.capture_radius > 0.0 && settings.dt > 0.0 && settings.t_max > 0.0) {
        return Err(CriticalError::InvalidSettings(
            "capture radius, dt and t_max must be positive".into(),
        ));
    }
    let attractors: Vec<(usize, &[f64])> = points
        .iter()
        .enumerate()
        .filter(|(_, c)| c.is_stable())
        .map(|(i, c)| (i, c.location.as_slice()))
        .collect();
    let steps = (settings.t_max / settings.dt).ceil() as usize;
    let labels = (0..grid.node_count())
        .into_par_iter()
        .map(|flat| {
            let mut x = grid.node_coords(flat);
            let mut stepper = crate::dynamics::Rk4::new(field.dimension());
            for _ in 0..=steps {
                if let Some((i, _)) = attractors
                    .iter()
                    .find(|(_, loc)| distance(&x, loc) <= settings.capture_radius)
                {
                    return BasinLabel::Point(*i);
                }
                if stepper.step(field, &mut x, settings.dt).is_err() {
                    return BasinLabel::Unresolved;
                }
            }
            BasinLabel::Unresolved
        })
        .collect();
    Ok(BasinMap {
        grid: grid.clone(),
        labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{make_appendix_field, AppendixParams, PolynomialModel};
    use std::sync::Arc;

    fn appendix(k: f64) -> FieldSpec {
        make_appendix_field(
            &AppendixParams::new(1.0, 1.0, k).unwrap(),
            DomainBox::symmetric(2, 3.0).unwrap(),
        )
        .unwrap()
    }

    fn settings() -> CriticalSearchSettings {
        CriticalSearchSettings::for_box(DomainBox::symmetric(2, 2.0).unwrap())
    }

    #[test]
    fn symmetric_double_well_roots() {
        let found = find_critical_points(&appendix(0.0), &settings()).unwrap();
        let locs: Vec<Vec<f64>> = found.points.iter().map(|c| c.location.to_vec()).collect();
        assert_eq!(locs.len(), 3);
        let expected = [[-1.0, 0.0], [0.0, 0.0], [1.0, 0.0]];
        for (l, e) in locs.iter().zip(expected) {
            assert!(distance(l, &e) < 1e-12, "{l:?}");
        }
        let idx: Vec<usize> = found.points.iter().map(|c| c.index).collect();
        assert_eq!(idx, vec![0, 1, 0]);
        assert!(found.points.iter().all(|c| c.residual <= 1e-10));
    }

    #[test]
    fn coupled_double_well_roots() {
        let found = find_critical_points(&appendix(0.5), &settings()).unwrap();
        assert_eq!(found.points.len(), 3);
        let s = 0.75f64.sqrt();
        let expected = [[-s, 0.5 * s], [0.0, 0.0], [s, -0.5 * s]];
        for (c, e) in found.points.iter().zip(expected) {
            assert!(c.location.distance(&e) < 1e-10);
            assert!(c.residual <= 1e-10);
        }
    }

    #[test]
    fn linear_stable_field_has_single_root() {
        let m = PolynomialModel::linear(&[vec![-1.0, 0.0], vec![0.0, -1.0]]).unwrap();
        let f = FieldSpec::new(Arc::new(m), DomainBox::symmetric(2, 2.0).unwrap()).unwrap();
        let found = find_critical_points(&f, &settings()).unwrap();
        assert_eq!(found.points.len(), 1);
        assert!(found.points[0].location.distance(&[0.0, 0.0]) < 1e-12);
        assert_eq!(found.points[0].index, 0);
        assert_eq!(found.points[0].stability, Stability::Stable);
    }

    #[test]
    fn no_roots_gives_diagnostic() {
        let m = PolynomialModel::new(
            1,
            vec![crate::field::Polynomial::from_terms(vec![
                crate::field::Monomial::new(1.0, vec![0]),
                crate::field::Monomial::new(1.0, vec![2]),
            ])],
            None,
            None,
        )
        .unwrap();
        let f = FieldSpec::new(Arc::new(m), DomainBox::symmetric(1, 2.0).unwrap()).unwrap();
        let s = CriticalSearchSettings::for_box(DomainBox::symmetric(1, 2.0).unwrap());
        let found = find_critical_points(&f, &s).unwrap();
        assert!(found.points.is_empty());
        assert!(found.diagnostic.is_some());
    }

    #[test]
    fn classify_saddle_and_wells() {
        let f = appendix(0.5);
        let origin = classify(&f, &PriceVector::from([0.0, 0.0])).unwrap();
        assert_eq!(origin.index, 1);
        assert_eq!(origin.stability, Stability::Saddle);
        let s = 0.75f64.sqrt();
        assert!((origin.jacobian_eigenvalues[0].re + s).abs() < 1e-12);
        assert!((origin.jacobian_eigenvalues[1].re - s).abs() < 1e-12);

        let well = classify(&f, &PriceVector::from([s, -0.5 * s])).unwrap();
        assert_eq!(well.index, 0);
        assert_eq!(well.stability, Stability::Stable);
        let tr: f64 = well.jacobian_eigenvalues.iter().map(|c| c.re).sum();
        assert!((tr + 2.25).abs() < 1e-9);
        let det = (well.jacobian_eigenvalues[0] * well.jacobian_eigenvalues[1]).re;
        assert!((det - 1.5).abs() < 1e-9);

        assert!(matches!(
            classify(&f, &PriceVector::from([0.5, 0.5])),
            Err(CriticalError::NotCritical { .. })
        ));
    }

    #[test]
    fn repelling_origin_is_unstable() {
        let m = PolynomialModel::linear(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let f = FieldSpec::new(Arc::new(m), DomainBox::symmetric(2, 1.0).unwrap()).unwrap();
        let c = classify(&f, &PriceVector::from([0.0, 0.0])).unwrap();
        assert_eq!(c.index, 2);
        assert_eq!(c.stability, Stability::Unstable);
    }

    #[test]
    fn zero_eigenvalue_is_marginal() {
        let (idx, st) = classify_eigenvalues(&[Complex64::new(0.0, 1.0), Complex64::new(0.0, -1.0)]);
        assert_eq!(idx, 0);
        assert_eq!(st, Stability::Marginal);
        let (idx, st) = classify_eigenvalues(&[Complex64::new(-0.5, 2.0), Complex64::new(-0.5, -2.0)]);
        assert_eq!((idx, st), (0, Stability::Stable));
    }

    #[test]
    fn basins_of_symmetric_double_well() {
        let f = appendix(0.0);
        let pts = find_critical_points(&f, &settings()).unwrap().points;
        let grid = GridSpec::new(vec![-2.0, -2.0], vec![2.0, 2.0], vec![9, 9]).unwrap();
        let map = basin_of_attraction(&f, &pts, &grid, &BasinSettings::default()).unwrap();
        for flat in 0..grid.node_count() {
            let x = grid.node_coords(flat);
            let label = map.labels[flat];
            if x[0] > 0.0 {
                assert_eq!(label, BasinLabel::Point(2), "{x:?}");
            } else if x[0] < 0.0 {
                assert_eq!(label, BasinLabel::Point(0), "{x:?}");
            }
        }
    }

    #[test]
    fn single_well_basin_is_everything() {
        let m = PolynomialModel::linear(&[vec![-1.0, 0.0], vec![0.0, -1.0]]).unwrap();
        let f = FieldSpec::new(Arc::new(m), DomainBox::symmetric(2, 2.0).unwrap()).unwrap();
        let pts = find_critical_points(&f, &settings()).unwrap().points;
        let grid = GridSpec::new(vec![-2.0, -2.0], vec![2.0, 2.0], vec![8, 8]).unwrap();
        let map = basin_of_attraction(&f, &pts, &grid, &BasinSettings::default()).unwrap();
        assert_eq!(map.count(BasinLabel::Point(0)), grid.node_count());
    }
}
