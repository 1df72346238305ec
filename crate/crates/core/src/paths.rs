//! Path functionals: the solenoidal line integral, the positivity margin
//! `V(start) - V(end) + ∫dp·Ā`, the Onsager–Machlup action and its
//! minimisers, and the two L-shaped paths between the double-well minima.

use serde::Serialize;
use thiserror::Error;

use crate::critical::CriticalPoint;
use crate::dynamics::Trajectory;
use crate::field::{
    appendix_wells, distance, make_appendix_field, AppendixParams, DomainBox, FieldError,
    FieldSpec, JacobianMode,
};

const UNIFORM_TIME_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PathError {
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error("invalid path: {0}")]
    InvalidPath(String),
    #[error("path times are not uniformly spaced")]
    NonUniformTimes,
    #[error("path has no times attached")]
    MissingTimes,
    #[error("noise scale ε must be > 0, got {0}")]
    InvalidEpsilon(f64),
    #[error("invalid settings: {0}")]
    InvalidSettings(String),
    #[error("field has no analytic {0}")]
    MissingAnalytic(&'static str),
    #[error("parameters are outside the two-well regime (a² - k²/b = {0})")]
    DegenerateWells(f64),
}

/// Polyline through `nodes`; `times` is present for timed paths.
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewisePath {
    dim: usize,
    nodes: Vec<f64>,
    times: Option<Vec<f64>>,
}

impl PiecewisePath {
    pub fn geometric(nodes: Vec<Vec<f64>>) -> Result<Self, PathError> {
        let (dim, flat) = flatten(nodes)?;
        Ok(Self { dim, nodes: flat, times: None })
    }

    /// Uniform times `0, T/(n-1), …, T`.
    pub fn timed(nodes: Vec<Vec<f64>>, t_final: f64) -> Result<Self, PathError> {
        if !(t_final.is_finite() && t_final > 0.0) {
            return Err(PathError::InvalidPath(format!("T must be > 0, got {t_final}")));
        }
        let n = nodes.len();
        let times = (0..n).map(|i| t_final * i as f64 / (n - 1).max(1) as f64).collect();
        Self::with_times(nodes, times)
    }

    /// `n` equally spaced nodes on the segment `start → end`, timed over `[0, t_final]`.
    pub fn straight(start: &[f64], end: &[f64], n: usize, t_final: f64) -> Result<Self, PathError> {
        if n < 2 {
            return Err(PathError::InvalidPath(format!("need at least 2 nodes, got {n}")));
        }
        if start.len() != end.len() {
            return Err(PathError::InvalidPath("endpoints differ in dimension".into()));
        }
        let nodes = (0..n)
            .map(|i| {
                let s = i as f64 / (n - 1) as f64;
                start.iter().zip(end).map(|(a, b)| a + s * (b - a)).collect()
            })
            .collect();
        Self::timed(nodes, t_final)
    }

    pub fn with_times(nodes: Vec<Vec<f64>>, times: Vec<f64>) -> Result<Self, PathError> {
        let (dim, flat) = flatten(nodes)?;
        if times.len() != flat.len() / dim {
            return Err(PathError::InvalidPath(format!(
                "{} times for {} nodes",
                times.len(),
                flat.len() / dim
            )));
        }
        if times.iter().any(|t| !t.is_finite()) || times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(PathError::InvalidPath("times must be finite and strictly increasing".into()));
        }
        Ok(Self { dim, nodes: flat, times: Some(times) })
    }

    pub fn from_trajectory(traj: &Trajectory) -> Result<Self, PathError> {
        let nodes = traj.iter().map(|(_, x)| x.to_vec()).collect();
        Self::with_times(nodes, traj.times.clone())
    }

    /// Same nodes in reverse order on the same time grid.
    pub fn reversed(&self) -> Self {
        let mut nodes = Vec::with_capacity(self.nodes.len());
        for x in self.nodes.chunks_exact(self.dim).rev() {
            nodes.extend_from_slice(x);
        }
        Self { dim: self.dim, nodes, times: self.times.clone() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.nodes.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, i: usize) -> &[f64] {
        &self.nodes[i * self.dim..(i + 1) * self.dim]
    }

    pub fn nodes(&self) -> impl Iterator<Item = &[f64]> {
        self.nodes.chunks_exact(self.dim)
    }

    pub fn times(&self) -> Option<&[f64]> {
        self.times.as_deref()
    }

    pub fn start(&self) -> &[f64] {
        self.node(0)
    }

    pub fn end(&self) -> &[f64] {
        self.node(self.len() - 1)
    }

    /// Uniform step of a timed path.
    pub fn time_step(&self) -> Result<f64, PathError> {
        let times = self.times.as_ref().ok_or(PathError::MissingTimes)?;
        let dt = (times[times.len() - 1] - times[0]) / (times.len() - 1) as f64;
        let uniform = times
            .windows(2)
            .all(|w| ((w[1] - w[0]) - dt).abs() <= UNIFORM_TIME_TOL * dt.abs().max(1.0));
        if uniform {
            Ok(dt)
        } else {
            Err(PathError::NonUniformTimes)
        }
    }

    /// `[t,]p1,…,pn` with a header row.
    pub fn to_csv(&self) -> String {
        let mut header: Vec<String> = (1..=self.dim).map(|i| format!("p{i}")).collect();
        if self.times.is_some() {
            header.insert(0, "t".into());
        }
        let mut out = header.join(",");
        out.push('\n');
        for (i, x) in self.nodes().enumerate() {
            let mut cells: Vec<String> = x.iter().map(|v| v.to_string()).collect();
            if let Some(t) = &self.times {
                cells.insert(0, t[i].to_string());
            }
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}

fn flatten(nodes: Vec<Vec<f64>>) -> Result<(usize, Vec<f64>), PathError> {
    if nodes.len() < 2 {
        return Err(PathError::InvalidPath(format!("need at least 2 nodes, got {}", nodes.len())));
    }
    let dim = nodes[0].len();
    if dim == 0 {
        return Err(PathError::InvalidPath("zero-dimensional nodes".into()));
    }
    let mut flat = Vec::with_capacity(dim * nodes.len());
    for (i, x) in nodes.iter().enumerate() {
        if x.len() != dim {
            return Err(PathError::InvalidPath(format!("node {i} has dimension {}, expected {dim}", x.len())));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(PathError::InvalidPath(format!("node {i} is not finite")));
        }
        flat.extend_from_slice(x);
    }
    Ok((dim, flat))
}

/// Gauss–Legendre nodes and weights on `[0, 1]`.
fn gauss_legendre(points: usize) -> (&'static [f64], &'static [f64]) {
    const N1: [f64; 1] = [0.5];
    const W1: [f64; 1] = [1.0];
    const N2: [f64; 2] = [0.211_324_865_405_187_1, 0.788_675_134_594_812_9];
    const W2: [f64; 2] = [0.5, 0.5];
    const N3: [f64; 3] = [0.112_701_665_379_258_3, 0.5, 0.887_298_334_620_741_7];
    const W3: [f64; 3] = [5.0 / 18.0, 8.0 / 18.0, 5.0 / 18.0];
    const N4: [f64; 4] = [
        0.069_431_844_202_973_71,
        0.330_009_478_207_571_9,
        0.669_990_521_792_428_1,
        0.930_568_155_797_026_3,
    ];
    const W4: [f64; 4] = [
        0.173_927_422_568_726_9,
        0.326_072_577_431_273_1,
        0.326_072_577_431_273_1,
        0.173_927_422_568_726_9,
    ];
    const N5: [f64; 5] = [
        0.046_910_077_030_668_0,
        0.230_765_344_947_158_5,
        0.5,
        0.769_234_655_052_841_5,
        0.953_089_922_969_332_0,
    ];
    const W5: [f64; 5] = [
        0.118_463_442_528_094_5,
        0.239_314_335_249_683_2,
        0.284_444_444_444_444_4,
        0.239_314_335_249_683_2,
        0.118_463_442_528_094_5,
    ];
    match points {
        1 => (&N1, &W1),
        2 => (&N2, &W2),
        3 => (&N3, &W3),
        4 => (&N4, &W4),
        _ => (&N5, &W5),
    }
}

/// `∫dp·Ā` along the polyline, five Gauss–Legendre points per segment.
pub fn line_integral_solenoidal(path: &PiecewisePath, field: &FieldSpec) -> Result<f64, PathError> {
    if !field.capabilities().solenoidal {
        return Err(PathError::MissingAnalytic("solenoidal part"));
    }
    if path.dim() != field.dimension() {
        return Err(FieldError::DimensionMismatch {
            expected: field.dimension(),
            got: path.dim(),
        }
        .into());
    }
    let (s, w) = gauss_legendre(5);
    let n = path.dim();
    let mut x = vec![0.0; n];
    let mut bar = vec![0.0; n];
    let mut total = 0.0;
    for j in 0..path.len() - 1 {
        let a = path.node(j);
        let b = path.node(j + 1);
        let mut seg = 0.0;
        for (sq, wq) in s.iter().zip(w) {
            for d in 0..n {
                x[d] = a[d] + sq * (b[d] - a[d]);
            }
            field.solenoidal_into(&x, &mut bar)?;
            let dot: f64 = (0..n).map(|d| bar[d] * (b[d] - a[d])).sum();
            seg += wq * dot;
        }
        total += seg;
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PositivityMargin {
    /// `V(start) - V(end)`.
    pub potential_drop: f64,
    pub solenoidal_integral: f64,
    pub margin: f64,
}

impl PositivityMargin {
    pub fn is_admissible(&self) -> bool {
        self.margin >= 0.0
    }
}

pub fn positivity_margin(path: &PiecewisePath, field: &FieldSpec) -> Result<PositivityMargin, PathError> {
    if !field.capabilities().potential {
        return Err(PathError::MissingAnalytic("potential"));
    }
    let potential_drop = field.potential(path.start())? - field.potential(path.end())?;
    let solenoidal_integral = line_integral_solenoidal(path, field)?;
    Ok(PositivityMargin {
        potential_drop,
        solenoidal_integral,
        margin: potential_drop + solenoidal_integral,
    })
}

/// Gauss–Legendre points per segment for the drift term of the action.
/// One point is the midpoint rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ActionQuadrature(usize);

impl ActionQuadrature {
    pub const MIDPOINT: Self = Self(1);
    pub const GAUSS5: Self = Self(5);

    pub fn new(points: usize) -> Result<Self, PathError> {
        if (1..=5).contains(&points) {
            Ok(Self(points))
        } else {
            Err(PathError::InvalidSettings(format!("quadrature points must be 1..=5, got {points}")))
        }
    }

    pub fn points(&self) -> usize {
        self.0
    }
}

impl Default for ActionQuadrature {
    fn default() -> Self {
        Self::MIDPOINT
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ActionValue {
    pub total: f64,
    pub epsilon: f64,
    pub quadrature_points: usize,
    /// Contribution of each segment to `total`.
    pub segments: Vec<f64>,
    /// `K = dp/dt - A` at each node, node-major (central differences inside,
    /// one-sided at the ends).
    pub residuals: Vec<f64>,
}

impl ActionValue {
    pub fn max_residual_norm(&self, dim: usize) -> f64 {
        self.residuals
            .chunks_exact(dim)
            .map(|k| k.iter().map(|v| v * v).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }
}

/// `(1/2ε) Σ_j Σ_q w_q |Δp_j/Δt - A(x_q)|² Δt` with isotropic noise `Σ = εI`.
pub fn onsager_machlup_action(
    path: &PiecewisePath,
    field: &FieldSpec,
    epsilon: f64,
) -> Result<ActionValue, PathError> {
    onsager_machlup_action_with(path, field, epsilon, ActionQuadrature::MIDPOINT)
}

pub fn onsager_machlup_action_with(
    path: &PiecewisePath,
    field: &FieldSpec,
    epsilon: f64,
    quadrature: ActionQuadrature,
) -> Result<ActionValue, PathError> {
    if !(epsilon.is_finite() && epsilon > 0.0) {
        return Err(PathError::InvalidEpsilon(epsilon));
    }
    if path.dim() != field.dimension() {
        return Err(FieldError::DimensionMismatch {
            expected: field.dimension(),
            got: path.dim(),
        }
        .into());
    }
    let dt = path.time_step()?;
    let n = path.dim();
    let m = path.len();
    let (s, w) = gauss_legendre(quadrature.points());
    let mut x = vec![0.0; n];
    let mut a = vec![0.0; n];
    let mut segments = Vec::with_capacity(m - 1);
    for j in 0..m - 1 {
        let p = path.node(j);
        let q = path.node(j + 1);
        let mut seg = 0.0;
        for (sq, wq) in s.iter().zip(w) {
            for d in 0..n {
                x[d] = p[d] + sq * (q[d] - p[d]);
            }
            field.eval_into(&x, &mut a)?;
            let r2: f64 = (0..n)
                .map(|d| {
                    let r = (q[d] - p[d]) / dt - a[d];
                    r * r
                })
                .sum();
            seg += wq * r2;
        }
        segments.push(seg * dt / (2.0 * epsilon));
    }
    let total = segments.iter().sum();
    let mut residuals = vec![0.0; m * n];
    for i in 0..m {
        let (lo, hi) = (i.saturating_sub(1), (i + 1).min(m - 1));
        let span = (hi - lo) as f64 * dt;
        field.eval_into(path.node(i), &mut a)?;
        for d in 0..n {
            residuals[i * n + d] = (path.node(hi)[d] - path.node(lo)[d]) / span - a[d];
        }
    }
    Ok(ActionValue {
        total,
        epsilon,
        quadrature_points: quadrature.points(),
        segments,
        residuals,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MinimizeSettings {
    pub n_nodes: usize,
    pub t_final: f64,
    pub max_iters: usize,
    /// Converged when the action decreases by less than `tol` per iteration.
    pub tol: f64,
    pub quadrature: ActionQuadrature,
    /// Point the initial straight line is bent towards (typically the saddle).
    pub saddle_hint: Option<Vec<f64>>,
    pub initial_bump: f64,
}

impl Default for MinimizeSettings {
    fn default() -> Self {
        Self {
            n_nodes: 128,
            t_final: 40.0,
            max_iters: 20_000,
            tol: 1e-12,
            quadrature: ActionQuadrature::MIDPOINT,
            saddle_hint: None,
            initial_bump: 1e-3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MinimizedPath {
    pub path: PiecewisePath,
    pub action: ActionValue,
    pub initial_action: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Action and its gradient with respect to every node (endpoint rows are
/// computed but never used).
fn action_and_gradient(
    field: &FieldSpec,
    nodes: &[f64],
    n: usize,
    dt: f64,
    epsilon: f64,
    quadrature: ActionQuadrature,
    grad: &mut [f64],
) -> Result<f64, FieldError> {
    let m = nodes.len() / n;
    let (s, w) = gauss_legendre(quadrature.points());
    grad.iter_mut().for_each(|g| *g = 0.0);
    let mut x = vec![0.0; n];
    let mut a = vec![0.0; n];
    let mut r = vec![0.0; n];
    let mut jtr = vec![0.0; n];
    let mut total = 0.0;
    for j in 0..m - 1 {
        let p = &nodes[j * n..(j + 1) * n];
        let q = &nodes[(j + 1) * n..(j + 2) * n];
        for (sq, wq) in s.iter().zip(w) {
            for d in 0..n {
                x[d] = p[d] + sq * (q[d] - p[d]);
            }
            field.eval_into(&x, &mut a)?;
            let jac = field.jacobian(&x, JacobianMode::Auto)?;
            let mut r2 = 0.0;
            for d in 0..n {
                r[d] = (q[d] - p[d]) / dt - a[d];
                r2 += r[d] * r[d];
            }
            for c in 0..n {
                jtr[c] = (0..n).map(|d| jac.get(d, c) * r[d]).sum();
            }
            total += wq * r2 * dt / (2.0 * epsilon);
            let scale = wq / epsilon;
            for d in 0..n {
                grad[j * n + d] += scale * (-r[d] - dt * (1.0 - sq) * jtr[d]);
                grad[(j + 1) * n + d] += scale * (r[d] - dt * sq * jtr[d]);
            }
        }
    }
    Ok(total)
}

/// Fixed-time minimum-action path between two critical points.
///
/// Gradient descent over interior nodes with a Barzilai–Borwein trial step and
/// Armijo backtracking; endpoints stay pinned. Stops when the action decrease
/// per iteration falls below `tol` or after `max_iters` (best path returned,
/// `converged = false`).
pub fn minimize_action(
    field: &FieldSpec,
    epsilon: f64,
    start: &CriticalPoint,
    end: &CriticalPoint,
    settings: &MinimizeSettings,
) -> Result<MinimizedPath, PathError> {
    if !(epsilon.is_finite() && epsilon > 0.0) {
        return Err(PathError::InvalidEpsilon(epsilon));
    }
    if settings.n_nodes < 32 {
        return Err(PathError::InvalidSettings(format!(
            "n_nodes must be ≥ 32, got {}",
            settings.n_nodes
        )));
    }
    if !(settings.t_final.is_finite() && settings.t_final > 0.0) {
        return Err(PathError::InvalidSettings(format!("T must be > 0, got {}", settings.t_final)));
    }
    if !(settings.tol >= 0.0) {
        return Err(PathError::InvalidSettings("tol must be ≥ 0".into()));
    }
    let a = start.location.as_slice();
    let b = end.location.as_slice();
    if distance(a, b) == 0.0 {
        return Err(PathError::InvalidSettings("start and end coincide".into()));
    }
    let n = field.dimension();
    let m = settings.n_nodes;
    let dt = settings.t_final / (m - 1) as f64;
    let mut nodes = initial_nodes(a, b, m, settings.saddle_hint.as_deref(), settings.initial_bump);

    let mut grad = vec![0.0; nodes.len()];
    let mut value = action_and_gradient(field, &nodes, n, dt, epsilon, settings.quadrature, &mut grad)?;
    let initial_action = value;
    let interior = n..(m - 1) * n;
    let mut step = 1e-3 * dt;
    let mut prev: Option<(Vec<f64>, Vec<f64>)> = None;
    let mut trial = nodes.clone();
    let mut trial_grad = vec![0.0; nodes.len()];
    let mut iterations = 0;
    let mut converged = false;
    let mut quiet = 0;
    while iterations < settings.max_iters {
        iterations += 1;
        if let Some((px, pg)) = &prev {
            let mut ss = 0.0;
            let mut sy = 0.0;
            for i in interior.clone() {
                let si = nodes[i] - px[i];
                ss += si * si;
                sy += si * (grad[i] - pg[i]);
            }
            if sy > 0.0 && ss > 0.0 {
                step = ss / sy;
            }
        }
        let g2: f64 = grad[interior.clone()].iter().map(|g| g * g).sum();
        if g2 == 0.0 {
            converged = true;
            break;
        }
        let mut accepted = None;
        for _ in 0..60 {
            trial.copy_from_slice(&nodes);
            for i in interior.clone() {
                trial[i] -= step * grad[i];
            }
            match action_and_gradient(field, &trial, n, dt, epsilon, settings.quadrature, &mut trial_grad) {
                Ok(v) if v.is_finite() && v <= value - 1e-4 * step * g2 => {
                    accepted = Some(v);
                    break;
                }
                _ => step *= 0.5,
            }
        }
        let Some(new_value) = accepted else {
            // no descent possible at machine precision
            converged = true;
            break;
        };
        prev = Some((nodes.clone(), grad.clone()));
        std::mem::swap(&mut nodes, &mut trial);
        std::mem::swap(&mut grad, &mut trial_grad);
        let decrease = value - new_value;
        value = new_value;
        if decrease < settings.tol {
            quiet += 1;
            if quiet >= 5 {
                converged = true;
                break;
            }
        } else {
            quiet = 0;
        }
    }
    let path = PiecewisePath::timed(nodes.chunks_exact(n).map(|x| x.to_vec()).collect(), settings.t_final)?;
    let action = onsager_machlup_action_with(&path, field, epsilon, settings.quadrature)?;
    Ok(MinimizedPath {
        path,
        action,
        initial_action,
        iterations,
        converged,
    })
}

/// Straight line from `a` to `b` plus `bump · sin(πs)` towards `hint`; when
/// the hint lies on the line (or is absent) the bump is perpendicular.
fn initial_nodes(a: &[f64], b: &[f64], m: usize, hint: Option<&[f64]>, bump: f64) -> Vec<f64> {
    let n = a.len();
    let mid: Vec<f64> = (0..n).map(|d| 0.5 * (a[d] + b[d])).collect();
    let chord: Vec<f64> = (0..n).map(|d| b[d] - a[d]).collect();
    let chord_len = chord.iter().map(|v| v * v).sum::<f64>().sqrt();
    let unit: Vec<f64> = chord.iter().map(|v| v / chord_len).collect();
    let normal_from = |v: &[f64]| -> Option<Vec<f64>> {
        let along: f64 = v.iter().zip(&unit).map(|(x, u)| x * u).sum();
        let perp: Vec<f64> = v.iter().zip(&unit).map(|(x, u)| x - along * u).collect();
        let len = perp.iter().map(|x| x * x).sum::<f64>().sqrt();
        (len > 1e-9 * chord_len).then(|| perp.iter().map(|x| x / len).collect())
    };
    let direction = hint
        .and_then(|h| normal_from(&h.iter().zip(&mid).map(|(h, m)| h - m).collect::<Vec<_>>()))
        .or_else(|| {
            (0..n).find_map(|axis| {
                let mut e = vec![0.0; n];
                e[axis] = 1.0;
                normal_from(&e)
            })
        })
        .unwrap_or_else(|| vec![0.0; n]);
    let mut nodes = Vec::with_capacity(m * n);
    for i in 0..m {
        let s = i as f64 / (m - 1) as f64;
        let lift = bump * (std::f64::consts::PI * s).sin();
        for d in 0..n {
            nodes.push(a[d] + s * chord[d] + lift * direction[d]);
        }
    }
    // endpoints exact
    nodes[..n].copy_from_slice(a);
    nodes[(m - 1) * n..].copy_from_slice(b);
    nodes
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PathPair {
    pub path_a: f64,
    pub path_b: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AppendixPathReport {
    pub params: AppendixParams,
    /// Minimum with the smaller first deviation coordinate (start of both paths).
    pub well_b: Vec<f64>,
    pub well_a: Vec<f64>,
    /// Vertical leg first.
    pub path_a: Vec<Vec<f64>>,
    /// Horizontal leg first.
    pub path_b: Vec<Vec<f64>>,
    pub closed_form: PathPair,
    pub quadrature: PathPair,
    pub potential_drop: f64,
    pub margins: PathPair,
    pub favored: Option<&'static str>,
}

/// The two L-shaped paths from well b to well a, their solenoidal integrals
/// (closed form and quadrature) and positivity margins.
pub fn appendix_paths(params: &AppendixParams) -> Result<AppendixPathReport, PathError> {
    let (wb, wa) = appendix_wells(params).ok_or(PathError::DegenerateWells(params.well_discriminant()))?;
    let r = params.reference_point.as_slice();
    let (b1, b2) = (wb[0] - r[0], wb[1] - r[1]);
    let (a1, a2) = (wa[0] - r[0], wa[1] - r[1]);
    let k = params.k;
    let closed_form = PathPair {
        path_a: -k * b1 * (a2 - b2) + k * a2 * (a1 - b1),
        path_b: k * b2 * (a1 - b1) - k * a1 * (a2 - b2),
    };
    let path_a = vec![wb.as_slice().to_vec(), vec![wb[0], wa[1]], wa.as_slice().to_vec()];
    let path_b = vec![wb.as_slice().to_vec(), vec![wa[0], wb[1]], wa.as_slice().to_vec()];

    let half = [b1, b2, a1, a2].iter().fold(0.0f64, |m, v| m.max(v.abs())) + 1.0;
    let domain = DomainBox::new(
        r.iter().map(|c| c - half).collect(),
        r.iter().map(|c| c + half).collect(),
    )?;
    let field = make_appendix_field(params, domain)?;
    let pa = PiecewisePath::geometric(path_a.clone())?;
    let pb = PiecewisePath::geometric(path_b.clone())?;
    let ma = positivity_margin(&pa, &field)?;
    let mb = positivity_margin(&pb, &field)?;
    let margins = PathPair { path_a: ma.margin, path_b: mb.margin };
    let favored = if (mb.margin - ma.margin).abs() <= 1e-12 {
        None
    } else if mb.margin > ma.margin {
        Some("B")
    } else {
        Some("A")
    };
    Ok(AppendixPathReport {
        params: params.clone(),
        well_b: wb.into_inner(),
        well_a: wa.into_inner(),
        path_a,
        path_b,
        closed_form,
        quadrature: PathPair {
            path_a: ma.solenoidal_integral,
            path_b: mb.solenoidal_integral,
        },
        potential_drop: ma.potential_drop,
        margins,
        favored,
    })
}

/// Node of `path` where the analytic potential is largest.
pub fn max_potential_node(path: &PiecewisePath, field: &FieldSpec) -> Result<(Vec<f64>, f64), PathError> {
    if !field.capabilities().potential {
        return Err(PathError::MissingAnalytic("potential"));
    }
    let mut best = (path.start().to_vec(), f64::NEG_INFINITY);
    for node in path.nodes() {
        let v = field.potential(node)?;
        if v > best.1 {
            best = (node.to_vec(), v);
        }
    }
    Ok(best)
}

/// Both sides of `S[reverse] - S[forward] = (2/ε)·margin` for one path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReversalIdentity {
    pub forward: f64,
    pub reverse: f64,
    pub margin: f64,
    /// `S[reverse] - S[forward]`.
    pub lhs: f64,
    /// `(2/ε)·margin`.
    pub rhs: f64,
    pub relative_residual: f64,
}

pub fn reversal_identity(
    path: &PiecewisePath,
    field: &FieldSpec,
    epsilon: f64,
    quadrature: ActionQuadrature,
) -> Result<ReversalIdentity, PathError> {
    let forward = onsager_machlup_action_with(path, field, epsilon, quadrature)?.total;
    let reverse = onsager_machlup_action_with(&path.reversed(), field, epsilon, quadrature)?.total;
    let margin = positivity_margin(path, field)?.margin;
    let lhs = reverse - forward;
    let rhs = 2.0 / epsilon * margin;
    let scale = lhs.abs().max(rhs.abs()).max(f64::MIN_POSITIVE);
    Ok(ReversalIdentity {
        forward,
        reverse,
        margin,
        lhs,
        rhs,
        relative_residual: (lhs - rhs).abs() / scale,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::critical::classify;
    use crate::dynamics::integrate_deterministic;
    use crate::field::{PolynomialModel, PriceVector};
    use std::sync::Arc;

    fn appendix(k: f64) -> FieldSpec {
        make_appendix_field(
            &AppendixParams::new(1.0, 1.0, k).unwrap(),
            DomainBox::symmetric(2, 3.0).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn path_validation() {
        assert!(PiecewisePath::geometric(vec![vec![0.0, 0.0]]).is_err());
        assert!(PiecewisePath::geometric(vec![vec![0.0, 0.0], vec![1.0]]).is_err());
        assert!(PiecewisePath::geometric(vec![vec![0.0], vec![f64::NAN]]).is_err());
        assert!(PiecewisePath::with_times(vec![vec![0.0], vec![1.0]], vec![1.0, 1.0]).is_err());
        let p = PiecewisePath::with_times(vec![vec![0.0], vec![1.0], vec![2.0]], vec![0.0, 1.0, 3.0]).unwrap();
        assert_eq!(p.time_step(), Err(PathError::NonUniformTimes));
        let g = PiecewisePath::geometric(vec![vec![0.0], vec![1.0]]).unwrap();
        assert_eq!(g.time_step(), Err(PathError::MissingTimes));
    }

    #[test]
    fn counterclockwise_unit_square() {
        let f = appendix(0.5);
        let sq = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![1.0, 1.0], vec![0.0, 1.0], vec![0.0, 0.0]];
        let p = PiecewisePath::geometric(sq).unwrap();
        assert!((line_integral_solenoidal(&p, &f).unwrap() + 1.0).abs() < 1e-14);
        assert!((line_integral_solenoidal(&p.reversed(), &f).unwrap() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn closed_loop_without_rotation() {
        let f = appendix(0.0);
        let p = PiecewisePath::geometric(vec![vec![0.3, 0.1], vec![-1.0, 2.0], vec![0.3, 0.1]]).unwrap();
        assert_eq!(line_integral_solenoidal(&p, &f).unwrap(), 0.0);
        let m = positivity_margin(&p, &f).unwrap();
        assert_eq!(m.margin, 0.0);
    }

    #[test]
    fn missing_parts_are_reported() {
        let model = PolynomialModel::linear(&[vec![-1.0, 0.0], vec![0.0, -1.0]]).unwrap();
        let f = FieldSpec::new(Arc::new(model), DomainBox::symmetric(2, 2.0).unwrap()).unwrap();
        let p = PiecewisePath::geometric(vec![vec![0.0, 0.0], vec![1.0, 0.0]]).unwrap();
        assert!(matches!(line_integral_solenoidal(&p, &f), Err(PathError::MissingAnalytic(_))));
        assert!(matches!(positivity_margin(&p, &f), Err(PathError::MissingAnalytic(_))));
    }

    #[test]
    fn flow_paths_have_vanishing_action() {
        let f = appendix(0.5);
        let tr = integrate_deterministic(&f, &PriceVector::from([0.2, 0.4]), 10.0, 1e-2).unwrap();
        let p = PiecewisePath::from_trajectory(&tr).unwrap();
        let s = onsager_machlup_action(&p, &f, 0.1).unwrap();
        assert!(s.total <= 1e-3 / 0.1, "{}", s.total);
        assert!(s.total >= 0.0);
    }

    #[test]
    fn action_rejects_bad_input() {
        let f = appendix(0.5);
        let p = PiecewisePath::timed(vec![vec![0.0, 0.0], vec![1.0, 0.0]], 1.0).unwrap();
        assert!(matches!(onsager_machlup_action(&p, &f, 0.0), Err(PathError::InvalidEpsilon(_))));
        let g = PiecewisePath::geometric(vec![vec![0.0, 0.0], vec![1.0, 0.0]]).unwrap();
        assert!(onsager_machlup_action(&g, &f, 1.0).is_err());
        assert!(ActionQuadrature::new(0).is_err());
        assert!(ActionQuadrature::new(6).is_err());
    }

    #[test]
    fn reversal_identity_exact_with_gauss5() {
        let f = appendix(0.5);
        let nodes: Vec<Vec<f64>> = (0..50)
            .map(|i| {
                let s = i as f64 / 49.0;
                vec![-0.8 + 1.6 * s, 0.4 * (3.0 * s).sin() - 0.2]
            })
            .collect();
        let p = PiecewisePath::timed(nodes, 7.0).unwrap();
        let eps = 0.3;
        let fwd = onsager_machlup_action_with(&p, &f, eps, ActionQuadrature::GAUSS5).unwrap();
        let rev = onsager_machlup_action_with(&p.reversed(), &f, eps, ActionQuadrature::GAUSS5).unwrap();
        let margin = positivity_margin(&p, &f).unwrap().margin;
        let lhs = rev.total - fwd.total;
        let rhs = 2.0 / eps * margin;
        assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(rhs.abs()), "{lhs} {rhs}");
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let f = appendix(0.5);
        let n = 2;
        let m = 6;
        let nodes: Vec<f64> = (0..m)
            .flat_map(|i| {
                let s = i as f64 / (m - 1) as f64;
                [-0.9 + 1.8 * s, 0.3 * (2.0 * s).cos()]
            })
            .collect();
        for quad in [ActionQuadrature::MIDPOINT, ActionQuadrature::GAUSS5] {
            let mut g = vec![0.0; nodes.len()];
            action_and_gradient(&f, &nodes, n, 0.7, 0.2, quad, &mut g).unwrap();
            let mut scratch = vec![0.0; nodes.len()];
            for i in 0..nodes.len() {
                let h = 1e-6;
                let mut up = nodes.clone();
                up[i] += h;
                let mut dn = nodes.clone();
                dn[i] -= h;
                let fd = (action_and_gradient(&f, &up, n, 0.7, 0.2, quad, &mut scratch).unwrap()
                    - action_and_gradient(&f, &dn, n, 0.7, 0.2, quad, &mut scratch).unwrap())
                    / (2.0 * h);
                assert!((fd - g[i]).abs() <= 1e-6 * (1.0 + fd.abs()), "{i}: {fd} vs {}", g[i]);
            }
        }
    }

    #[test]
    fn initial_path_bends_towards_hint() {
        let nodes = initial_nodes(&[-1.0, 0.0], &[1.0, 0.0], 33, Some(&[0.0, 0.5]), 1e-3);
        assert_eq!(&nodes[..2], &[-1.0, 0.0]);
        assert_eq!(&nodes[64..], &[1.0, 0.0]);
        assert!((nodes[33] - 1e-3).abs() < 1e-15);
        // hint on the chord: perpendicular bump
        let nodes = initial_nodes(&[-1.0, 0.0], &[1.0, 0.0], 33, Some(&[0.0, 0.0]), 1e-3);
        assert!((nodes[33].abs() - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn minimizer_lowers_the_straight_path_action() {
        let f = appendix(0.0);
        let s = classify(&f, &PriceVector::from([-1.0, 0.0])).unwrap();
        let e = classify(&f, &PriceVector::from([1.0, 0.0])).unwrap();
        let settings = MinimizeSettings {
            n_nodes: 48,
            t_final: 10.0,
            max_iters: 3000,
            ..Default::default()
        };
        let r = minimize_action(&f, 0.1, &s, &e, &settings).unwrap();
        assert!(r.action.total < r.initial_action);
        assert_eq!(r.path.start(), &[-1.0, 0.0]);
        assert_eq!(r.path.end(), &[1.0, 0.0]);
        assert!(minimize_action(&f, 0.1, &s, &s, &settings).is_err());
        let small = MinimizeSettings { n_nodes: 16, ..settings };
        assert!(minimize_action(&f, 0.1, &s, &e, &small).is_err());
    }

    #[test]
    fn appendix_report_values() {
        let r = appendix_paths(&AppendixParams::new(1.0, 1.0, 0.5).unwrap()).unwrap();
        assert!((r.closed_form.path_a + 0.75).abs() < 1e-12);
        assert!((r.closed_form.path_b - 0.75).abs() < 1e-12);
        assert!((r.quadrature.path_a - r.closed_form.path_a).abs() < 1e-10);
        assert!((r.quadrature.path_b - r.closed_form.path_b).abs() < 1e-10);
        assert!(r.potential_drop.abs() < 1e-15);
        assert_eq!(r.favored, Some("B"));

        let r = appendix_paths(&AppendixParams::new(1.0, 1.0, 0.0).unwrap()).unwrap();
        assert_eq!((r.closed_form.path_a, r.closed_form.path_b), (0.0, 0.0));
        assert_eq!(r.favored, None);

        assert!(matches!(
            appendix_paths(&AppendixParams::new(1.0, 1.0, 1.5).unwrap()),
            Err(PathError::DegenerateWells(_))
        ));
    }
}
