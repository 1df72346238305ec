//! Deterministic and noisy price dynamics, transition detection and escape
//! statistics.
//!
//! Noise follows the Itô convention with Euler–Maruyama steps
//! `p ← p + A(p) dt + L √dt z`, `L Lᵀ = Σ`. Every stochastic run draws from a
//! ChaCha8 stream selected by `(seed, stream)`, so ensemble members are
//! independent of scheduling and worker count.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::critical::{CriticalPoint, Stability};
use crate::field::{distance, FieldError, FieldSpec, PriceVector};
use crate::hodge::AnalyticDecomposition;

pub const DEFAULT_DT: f64 = 1e-3;
pub const DEFAULT_CAPTURE_RADIUS: f64 = 0.1;
pub const DEFAULT_RELEASE_RADIUS: f64 = 0.3;
const SYMMETRY_TOL: f64 = 1e-12;
const PSD_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid noise covariance: {0}")]
    InvalidNoise(String),
    #[error("field has no analytic {0}")]
    MissingDecomposition(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Rk4,
    EulerMaruyama,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryStatus {
    Complete,
    /// Truncated at the last state inside the domain box.
    LeftDomain,
    /// Truncated at the last finite state.
    NonFinite,
}

/// Gaussian white noise with `⟨ξ_i(t) ξ_j(t')⟩ = Σ_ij δ(t - t')`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NoiseSpec {
    covariance: Vec<Vec<f64>>,
    seed: u64,
}

#[derive(Debug, Clone)]
enum NoiseFactor {
    Zero,
    Diagonal(Vec<f64>),
    Full(DMatrix<f64>),
}

impl NoiseSpec {
    pub fn new(covariance: Vec<Vec<f64>>, seed: u64) -> Result<Self, DynamicsError> {
        let n = covariance.len();
        if n == 0 {
            return Err(DynamicsError::InvalidNoise("empty covariance".into()));
        }
        for (i, row) in covariance.iter().enumerate() {
            if row.len() != n {
                return Err(DynamicsError::InvalidNoise(format!(
                    "row {i} has {} entries, expected {n}",
                    row.len()
                )));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(DynamicsError::InvalidNoise(format!("row {i} is not finite")));
            }
        }
        for i in 0..n {
            for j in 0..i {
                let gap = (covariance[i][j] - covariance[j][i]).abs();
                if gap > SYMMETRY_TOL {
                    return Err(DynamicsError::InvalidNoise(format!(
                        "not symmetric: |Σ[{i}][{j}] - Σ[{j}][{i}]| = {gap:e} > {SYMMETRY_TOL:e}"
                    )));
                }
            }
        }
        let min_eig = SymmetricEigen::new(Self::matrix_of(&covariance))
            .eigenvalues
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
        if min_eig < -PSD_TOL {
            return Err(DynamicsError::InvalidNoise(format!(
                "not positive semi-definite: smallest eigenvalue {min_eig:e}"
            )));
        }
        Ok(Self { covariance, seed })
    }

    /// `Σ = ε I`.
    pub fn isotropic(dim: usize, epsilon: f64, seed: u64) -> Result<Self, DynamicsError> {
        if !(epsilon.is_finite() && epsilon >= 0.0) {
            return Err(DynamicsError::InvalidNoise(format!("ε must be ≥ 0, got {epsilon}")));
        }
        let cov = (0..dim)
            .map(|i| (0..dim).map(|j| if i == j { epsilon } else { 0.0 }).collect())
            .collect();
        Self::new(cov, seed)
    }

    pub fn covariance(&self) -> &[Vec<f64>] {
        &self.covariance
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dim(&self) -> usize {
        self.covariance.len()
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { covariance: self.covariance.clone(), seed }
    }

    fn matrix_of(cov: &[Vec<f64>]) -> DMatrix<f64> {
        let n = cov.len();
        DMatrix::from_fn(n, n, |i, j| 0.5 * (cov[i][j] + cov[j][i]))
    }

    /// A matrix `L` with `L Lᵀ = Σ` (negative round-off eigenvalues clipped).
    pub fn factor(&self) -> DMatrix<f64> {
        match self.noise_factor() {
            NoiseFactor::Zero => DMatrix::zeros(self.dim(), self.dim()),
            NoiseFactor::Diagonal(d) => DMatrix::from_diagonal(&nalgebra::DVector::from_vec(d)),
            NoiseFactor::Full(l) => l,
        }
    }

    fn noise_factor(&self) -> NoiseFactor {
        let n = self.dim();
        let off_diagonal_zero = (0..n).all(|i| (0..n).all(|j| i == j || self.covariance[i][j] == 0.0));
        if off_diagonal_zero {
            let d: Vec<f64> = (0..n).map(|i| self.covariance[i][i].max(0.0).sqrt()).collect();
            if d.iter().all(|v| *v == 0.0) {
                NoiseFactor::Zero
            } else {
                NoiseFactor::Diagonal(d)
            }
        } else {
            let eig = SymmetricEigen::new(Self::matrix_of(&self.covariance));
            let mut l = eig.eigenvectors.clone();
            for (j, lambda) in eig.eigenvalues.iter().enumerate() {
                let s = lambda.max(0.0).sqrt();
                l.column_mut(j).scale_mut(s);
            }
            NoiseFactor::Full(l)
        }
    }
}

/// Uniformly sampled path; `states` is node-major with `dim` entries per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub dim: usize,
    pub times: Vec<f64>,
    pub states: Vec<f64>,
    /// Spacing of the recorded samples.
    pub dt: f64,
    /// Integrator step; differs from `dt` when only every k-th step is kept.
    pub step_dt: f64,
    pub scheme: Scheme,
    pub seed: Option<u64>,
    pub stream: Option<u64>,
    pub status: TrajectoryStatus,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.dim..(i + 1) * self.dim]
    }

    pub fn initial_state(&self) -> &[f64] {
        self.state(0)
    }

    pub fn final_state(&self) -> &[f64] {
        self.state(self.len() - 1)
    }

    pub fn final_time(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn iter(&self) -> impl Iterator<Item = (f64, &[f64])> {
        self.times.iter().copied().zip(self.states.chunks_exact(self.dim))
    }

    /// `t,p1,…,pn` with a header row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t");
        for i in 1..=self.dim {
            out.push_str(&format!(",p{i}"));
        }
        out.push('\n');
        for (t, x) in self.iter() {
            out.push_str(&t.to_string());
            for v in x {
                out.push(',');
                out.push_str(&v.to_string());
            }
            out.push('\n');
        }
        out
    }
}

/// Classical fourth-order Runge–Kutta step with reusable stage buffers.
#[derive(Debug, Clone)]
pub struct Rk4 {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4 {
    pub fn new(dim: usize) -> Self {
        Self {
            k1: vec![0.0; dim],
            k2: vec![0.0; dim],
            k3: vec![0.0; dim],
            k4: vec![0.0; dim],
            tmp: vec![0.0; dim],
        }
    }

    /// Advances `x` by `dt`. Stage points must lie in the domain.
    pub fn step(&mut self, field: &FieldSpec, x: &mut [f64], dt: f64) -> Result<(), FieldError> {
        field.eval_into(x, &mut self.k1)?;
        for i in 0..x.len() {
            self.tmp[i] = x[i] + 0.5 * dt * self.k1[i];
        }
        field.eval_into(&self.tmp, &mut self.k2)?;
        for i in 0..x.len() {
            self.tmp[i] = x[i] + 0.5 * dt * self.k2[i];
        }
        field.eval_into(&self.tmp, &mut self.k3)?;
        for i in 0..x.len() {
            self.tmp[i] = x[i] + dt * self.k3[i];
        }
        field.eval_into(&self.tmp, &mut self.k4)?;
        for i in 0..x.len() {
            x[i] += dt / 6.0 * (self.k1[i] + 2.0 * self.k2[i] + 2.0 * self.k3[i] + self.k4[i]);
        }
        Ok(())
    }
}

fn step_count(t_final: f64, dt: f64) -> Result<usize, DynamicsError> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(DynamicsError::InvalidArgument(format!("dt must be > 0, got {dt}")));
    }
    if !(t_final.is_finite() && t_final >= dt) {
        return Err(DynamicsError::InvalidArgument(format!(
            "T must be ≥ dt, got T = {t_final}, dt = {dt}"
        )));
    }
    Ok((t_final / dt).round() as usize)
}

fn check_start(field: &FieldSpec, p0: &[f64]) -> Result<(), DynamicsError> {
    field.check_point(p0)?;
    Ok(())
}

/// Integrates `dp/dt = A(p)` with fixed-step RK4.
pub fn integrate_deterministic(
    field: &FieldSpec,
    p0: &PriceVector,
    t_final: f64,
    dt: f64,
) -> Result<Trajectory, DynamicsError> {
    let steps = step_count(t_final, dt)?;
    check_start(field, p0)?;
    let dim = field.dimension();
    let mut x = p0.as_slice().to_vec();
    let mut times = Vec::with_capacity(steps + 1);
    let mut states = Vec::with_capacity((steps + 1) * dim);
    times.push(0.0);
    states.extend_from_slice(&x);
    let mut stepper = Rk4::new(dim);
    let mut status = TrajectoryStatus::Complete;
    for i in 1..=steps {
        match stepper.step(field, &mut x, dt) {
            Ok(()) => {}
            Err(FieldError::OutsideDomain { .. }) => {
                status = TrajectoryStatus::LeftDomain;
                break;
            }
            Err(FieldError::NonFinite { .. }) => {
                status = TrajectoryStatus::NonFinite;
                break;
            }
            Err(e) => return Err(e.into()),
        }
        if x.iter().any(|v| !v.is_finite()) {
            status = TrajectoryStatus::NonFinite;
            break;
        }
        if !field.domain().contains(&x) {
            status = TrajectoryStatus::LeftDomain;
            break;
        }
        times.push(i as f64 * dt);
        states.extend_from_slice(&x);
    }
    Ok(Trajectory {
        dim,
        times,
        states,
        dt,
        step_dt: dt,
        scheme: Scheme::Rk4,
        seed: None,
        stream: None,
        status,
    })
}

/// Euler–Maruyama integrator bound to one random stream.
struct EmStepper<'a> {
    field: &'a FieldSpec,
    factor: NoiseFactor,
    rng: ChaCha8Rng,
    drift: Vec<f64>,
    z: Vec<f64>,
    dt: f64,
    sqrt_dt: f64,
}

enum StepOutcome {
    Ok,
    LeftDomain,
    NonFinite,
}

impl<'a> EmStepper<'a> {
    fn new(field: &'a FieldSpec, noise: &NoiseSpec, stream: u64, dt: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(noise.seed());
        rng.set_stream(stream);
        let n = field.dimension();
        Self {
            field,
            factor: noise.noise_factor(),
            rng,
            drift: vec![0.0; n],
            z: vec![0.0; n],
            dt,
            sqrt_dt: dt.sqrt(),
        }
    }

    /// On failure `x` keeps its previous value.
    #[inline]
    fn step(&mut self, x: &mut [f64]) -> StepOutcome {
        self.field.model().eval_into(x, &mut self.drift);
        let n = x.len();
        match &self.factor {
            NoiseFactor::Zero => {
                for i in 0..n {
                    self.z[i] = x[i] + self.drift[i] * self.dt;
                }
            }
            NoiseFactor::Diagonal(d) => {
                for i in 0..n {
                    let g: f64 = self.rng.sample(StandardNormal);
                    self.z[i] = x[i] + self.drift[i] * self.dt + d[i] * self.sqrt_dt * g;
                }
            }
            NoiseFactor::Full(l) => {
                let g: Vec<f64> = (0..n).map(|_| self.rng.sample(StandardNormal)).collect();
                for i in 0..n {
                    let mut noise = 0.0;
                    for j in 0..n {
                        noise += l[(i, j)] * g[j];
                    }
                    self.z[i] = x[i] + self.drift[i] * self.dt + self.sqrt_dt * noise;
                }
            }
        }
        if self.z.iter().any(|v| !v.is_finite()) {
            return StepOutcome::NonFinite;
        }
        if !self.field.domain().contains(&self.z) {
            return StepOutcome::LeftDomain;
        }
        x.copy_from_slice(&self.z);
        StepOutcome::Ok
    }
}

/// Options for [`simulate_sde_with`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SdeOptions {
    /// Keep every k-th state (k ≥ 1); the final state is always kept.
    pub record_every: usize,
    /// Random stream within the master seed.
    pub stream: u64,
}

impl Default for SdeOptions {
    fn default() -> Self {
        Self { record_every: 1, stream: 0 }
    }
}

fn check_noise(field: &FieldSpec, noise: &NoiseSpec) -> Result<(), DynamicsError> {
    if noise.dim() != field.dimension() {
        return Err(FieldError::DimensionMismatch {
            expected: field.dimension(),
            got: noise.dim(),
        }
        .into());
    }
    Ok(())
}

/// Euler–Maruyama (Itô) integration of `dp = A(p) dt + ξ dt`.
pub fn simulate_sde(
    field: &FieldSpec,
    noise: &NoiseSpec,
    p0: &PriceVector,
    t_final: f64,
    dt: f64,
) -> Result<Trajectory, DynamicsError> {
    simulate_sde_with(field, noise, p0, t_final, dt, SdeOptions::default())
}

pub fn simulate_sde_with(
    field: &FieldSpec,
    noise: &NoiseSpec,
    p0: &PriceVector,
    t_final: f64,
    dt: f64,
    options: SdeOptions,
) -> Result<Trajectory, DynamicsError> {
    let steps = step_count(t_final, dt)?;
    check_start(field, p0)?;
    check_noise(field, noise)?;
    if options.record_every == 0 {
        return Err(DynamicsError::InvalidArgument("record_every must be ≥ 1".into()));
    }
    let dim = field.dimension();
    let mut stepper = EmStepper::new(field, noise, options.stream, dt);
    let mut x = p0.as_slice().to_vec();
    let mut times = vec![0.0];
    let mut states = x.clone();
    let mut status = TrajectoryStatus::Complete;
    let mut last_recorded = 0;
    let mut done = 0;
    for i in 1..=steps {
        match stepper.step(&mut x) {
            StepOutcome::Ok => {}
            StepOutcome::LeftDomain => {
                status = TrajectoryStatus::LeftDomain;
                break;
            }
            StepOutcome::NonFinite => {
                status = TrajectoryStatus::NonFinite;
                break;
            }
        }
        done = i;
        if i % options.record_every == 0 {
            times.push(i as f64 * dt);
            states.extend_from_slice(&x);
            last_recorded = i;
        }
    }
    if status == TrajectoryStatus::Complete && last_recorded != done {
        times.push(done as f64 * dt);
        states.extend_from_slice(&x);
    }
    Ok(Trajectory {
        dim,
        times,
        states,
        dt: dt * options.record_every as f64,
        step_dt: dt,
        scheme: Scheme::EulerMaruyama,
        seed: Some(noise.seed()),
        stream: Some(options.stream),
        status,
    })
}

/// `n` independent runs; member `i` uses stream `i`. Output order is member
/// order regardless of scheduling.
pub fn sample_ensemble(
    field: &FieldSpec,
    noise: &NoiseSpec,
    p0: &PriceVector,
    t_final: f64,
    dt: f64,
    n: usize,
    record_every: usize,
) -> Result<Vec<Trajectory>, DynamicsError> {
    (0..n as u64)
        .into_par_iter()
        .map(|member| {
            simulate_sde_with(
                field,
                noise,
                p0,
                t_final,
                dt,
                SdeOptions { record_every, stream: member },
            )
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SaddleDistance {
    pub point: usize,
    pub distance: f64,
}

/// Hop between two stable critical points. Point identifiers index the list
/// handed to the detector.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransitionEvent {
    pub from_point: usize,
    pub to_point: usize,
    pub departure_time: f64,
    pub arrival_time: f64,
    pub min_distance_to_saddles: Vec<SaddleDistance>,
    /// Closest approach to any registered saddle.
    pub min_distance_to_saddle: Option<f64>,
    #[serde(skip)]
    pub path_slice: Option<Trajectory>,
}

/// Streaming hysteresis state machine over stable critical points.
///
/// A visit starts when the path enters the capture radius of a stable point
/// and ends once it leaves the release radius. Entering the capture radius of
/// a different stable point after the previous visit ended records an event
/// whose slice runs from the last sample inside the previous capture disc.
#[derive(Debug, Clone)]
pub struct TransitionDetector {
    dim: usize,
    stable: Vec<(usize, Vec<f64>)>,
    saddles: Vec<(usize, Vec<f64>)>,
    capture: f64,
    release: f64,
    keep_slices: bool,
    sample_dt: f64,
    scheme: Scheme,
    current: Option<usize>,
    in_visit: bool,
    buf_times: Vec<f64>,
    buf_states: Vec<f64>,
    buf_start: f64,
    buf_min: Vec<f64>,
    events: Vec<TransitionEvent>,
}

impl TransitionDetector {
    pub fn new(
        points: &[CriticalPoint],
        capture_radius: f64,
        release_radius: f64,
    ) -> Result<Self, DynamicsError> {
        if !(capture_radius > 0.0 && release_radius > capture_radius) {
            return Err(DynamicsError::InvalidArgument(format!(
                "need release > capture > 0, got capture = {capture_radius}, release = {release_radius}"
            )));
        }
        let stable: Vec<(usize, Vec<f64>)> = points
            .iter()
            .enumerate()
            .filter(|(_, c)| c.stability == Stability::Stable)
            .map(|(i, c)| (i, c.location.as_slice().to_vec()))
            .collect();
        if stable.len() < 2 {
            return Err(DynamicsError::InvalidArgument(format!(
                "transition detection needs at least two stable points, got {}",
                stable.len()
            )));
        }
        let dim = stable[0].1.len();
        let saddles = points
            .iter()
            .enumerate()
            .filter(|(_, c)| c.stability == Stability::Saddle)
            .map(|(i, c)| (i, c.location.as_slice().to_vec()))
            .collect::<Vec<_>>();
        let buf_min = vec![f64::INFINITY; saddles.len()];
        Ok(Self {
            dim,
            stable,
            saddles,
            capture: capture_radius,
            release: release_radius,
            keep_slices: true,
            sample_dt: 0.0,
            scheme: Scheme::EulerMaruyama,
            current: None,
            in_visit: false,
            buf_times: Vec::new(),
            buf_states: Vec::new(),
            buf_start: 0.0,
            buf_min,
            events: Vec::new(),
        })
    }

    /// Keep (default) or drop the bridging path slices.
    pub fn keep_slices(mut self, keep: bool) -> Self {
        self.keep_slices = keep;
        self
    }

    pub fn with_sampling(mut self, dt: f64, scheme: Scheme) -> Self {
        self.sample_dt = dt;
        self.scheme = scheme;
        self
    }

    fn reset_buffer(&mut self, t: f64, x: &[f64]) {
        self.buf_times.clear();
        self.buf_states.clear();
        self.buf_start = t;
        for (m, (_, s)) in self.buf_min.iter_mut().zip(&self.saddles) {
            *m = distance(x, s);
        }
        if self.keep_slices {
            self.buf_times.push(t);
            self.buf_states.extend_from_slice(x);
        }
    }

    fn append(&mut self, t: f64, x: &[f64]) {
        for (m, (_, s)) in self.buf_min.iter_mut().zip(&self.saddles) {
            *m = m.min(distance(x, s));
        }
        if self.keep_slices {
            self.buf_times.push(t);
            self.buf_states.extend_from_slice(x);
        }
    }

    pub fn push(&mut self, t: f64, x: &[f64]) {
        let near = self
            .stable
            .iter()
            .position(|(_, c)| distance(x, c) <= self.capture);
        match (self.current, near) {
            (None, None) => {}
            (None, Some(j)) => {
                self.current = Some(j);
                self.in_visit = true;
                self.reset_buffer(t, x);
            }
            (Some(i), Some(j)) if i == j => {
                self.in_visit = true;
                self.reset_buffer(t, x);
            }
            (Some(i), Some(j)) if !self.in_visit => {
                self.append(t, x);
                self.emit(i, j, t);
                self.current = Some(j);
                self.in_visit = true;
                self.reset_buffer(t, x);
            }
            (Some(i), _) => {
                if self.in_visit && distance(x, &self.stable[i].1) > self.release {
                    self.in_visit = false;
                }
                self.append(t, x);
            }
        }
    }

    fn emit(&mut self, i: usize, j: usize, t: f64) {
        let min_distance_to_saddles: Vec<SaddleDistance> = self
            .saddles
            .iter()
            .zip(&self.buf_min)
            .map(|((id, _), d)| SaddleDistance { point: *id, distance: *d })
            .collect();
        let min_distance_to_saddle = min_distance_to_saddles
            .iter()
            .map(|s| s.distance)
            .reduce(f64::min);
        let path_slice = self.keep_slices.then(|| Trajectory {
            dim: self.dim,
            times: self.buf_times.clone(),
            states: self.buf_states.clone(),
            dt: self.sample_dt,
            step_dt: self.sample_dt,
            scheme: self.scheme,
            seed: None,
            stream: None,
            status: TrajectoryStatus::Complete,
        });
        self.events.push(TransitionEvent {
            from_point: self.stable[i].0,
            to_point: self.stable[j].0,
            departure_time: self.buf_start,
            arrival_time: t,
            min_distance_to_saddles,
            min_distance_to_saddle,
            path_slice,
        });
    }

    pub fn events(&self) -> &[TransitionEvent] {
        &self.events
    }

    pub fn into_events(self) -> Vec<TransitionEvent> {
        self.events
    }
}

pub fn detect_transitions(
    traj: &Trajectory,
    points: &[CriticalPoint],
    capture_radius: f64,
    release_radius: f64,
) -> Result<Vec<TransitionEvent>, DynamicsError> {
    let mut det = TransitionDetector::new(points, capture_radius, release_radius)?
        .with_sampling(traj.dt, traj.scheme);
    for (t, x) in traj.iter() {
        det.push(t, x);
    }
    Ok(det.into_events())
}

#[derive(Debug, Clone, Serialize)]
pub struct TransitionRun {
    pub events: Vec<TransitionEvent>,
    pub steps: usize,
    pub final_time: f64,
    pub final_state: Vec<f64>,
    pub status: TrajectoryStatus,
}

/// One long stochastic run fed straight into the detector at every step, so
/// the full trajectory is never stored.
impl TransitionRun {
    /// Share of events whose closest saddle approach is within `radius`;
    /// `None` without events or registered saddles.
    pub fn saddle_passage_fraction(&self, radius: f64) -> Option<f64> {
        saddle_passage_fraction(&self.events, radius)
    }
}

pub fn saddle_passage_fraction(events: &[TransitionEvent], radius: f64) -> Option<f64> {
    let measured: Vec<f64> = events.iter().filter_map(|e| e.min_distance_to_saddle).collect();
    if measured.is_empty() {
        return None;
    }
    let near = measured.iter().filter(|d| **d <= radius).count();
    Some(near as f64 / measured.len() as f64)
}

#[allow(clippy::too_many_arguments)]
pub fn simulate_transitions(
    field: &FieldSpec,
    noise: &NoiseSpec,
    p0: &PriceVector,
    t_final: f64,
    dt: f64,
    points: &[CriticalPoint],
    capture_radius: f64,
    release_radius: f64,
) -> Result<TransitionRun, DynamicsError> {
    let steps = step_count(t_final, dt)?;
    check_start(field, p0)?;
    check_noise(field, noise)?;
    let mut det = TransitionDetector::new(points, capture_radius, release_radius)?
        .with_sampling(dt, Scheme::EulerMaruyama);
    let mut stepper = EmStepper::new(field, noise, 0, dt);
    let mut x = p0.as_slice().to_vec();
    det.push(0.0, &x);
    let mut status = TrajectoryStatus::Complete;
    let mut done = 0;
    for i in 1..=steps {
        match stepper.step(&mut x) {
            StepOutcome::Ok => {}
            StepOutcome::LeftDomain => {
                status = TrajectoryStatus::LeftDomain;
                break;
            }
            StepOutcome::NonFinite => {
                status = TrajectoryStatus::NonFinite;
                break;
            }
        }
        done = i;
        det.push(i as f64 * dt, &x);
    }
    Ok(TransitionRun {
        events: det.into_events(),
        steps: done,
        final_time: done as f64 * dt,
        final_state: x,
        status,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MfptSettings {
    pub noise_levels: Vec<f64>,
    pub ensemble_size: usize,
    pub dt: f64,
    pub t_cap: f64,
    pub capture_radius: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MfptEstimate {
    pub epsilon: f64,
    /// Mean over runs that reached the target; `None` when every run was
    /// censored or left the domain.
    pub mean: Option<f64>,
    pub std_error: Option<f64>,
    pub hits: usize,
    pub censored: usize,
    pub left_domain: usize,
    pub ensemble_size: usize,
}

enum Passage {
    Hit(f64),
    Censored,
    LeftDomain,
}

/// First-passage times from `start` into the capture disc of `target` under
/// `Σ = ε I`. Member `m` at noise level index `e` uses stream `e·2³² + m`.
pub fn mean_first_passage(
    field: &FieldSpec,
    start: &CriticalPoint,
    target: &CriticalPoint,
    settings: &MfptSettings,
) -> Result<Vec<MfptEstimate>, DynamicsError> {
    if settings.ensemble_size < 100 {
        return Err(DynamicsError::InvalidArgument(format!(
            "ensemble size must be ≥ 100, got {}",
            settings.ensemble_size
        )));
    }
    if settings.noise_levels.is_empty() {
        return Err(DynamicsError::InvalidArgument("no noise levels given".into()));
    }
    if !(settings.capture_radius > 0.0) {
        return Err(DynamicsError::InvalidArgument("capture radius must be > 0".into()));
    }
    let cap_steps = step_count(settings.t_cap, settings.dt)?;
    check_start(field, &start.location)?;
    let dim = field.dimension();
    let goal = target.location.as_slice();
    let mut out = Vec::with_capacity(settings.noise_levels.len());
    for (e, &eps) in settings.noise_levels.iter().enumerate() {
        if !(eps.is_finite() && eps > 0.0) {
            return Err(DynamicsError::InvalidArgument(format!("ε must be > 0, got {eps}")));
        }
        let noise = NoiseSpec::isotropic(dim, eps, settings.seed)?;
        let outcomes: Vec<Passage> = (0..settings.ensemble_size as u64)
            .into_par_iter()
            .map(|m| {
                let stream = ((e as u64) << 32) | m;
                let mut stepper = EmStepper::new(field, &noise, stream, settings.dt);
                let mut x = start.location.as_slice().to_vec();
                for i in 1..=cap_steps {
                    match stepper.step(&mut x) {
                        StepOutcome::Ok => {}
                        _ => return Passage::LeftDomain,
                    }
                    if distance(&x, goal) <= settings.capture_radius {
                        return Passage::Hit(i as f64 * settings.dt);
                    }
                }
                Passage::Censored
            })
            .collect();
        let hits: Vec<f64> = outcomes
            .iter()
            .filter_map(|o| if let Passage::Hit(t) = o { Some(*t) } else { None })
            .collect();
        let censored = outcomes.iter().filter(|o| matches!(o, Passage::Censored)).count();
        let left = outcomes.iter().filter(|o| matches!(o, Passage::LeftDomain)).count();
        let (mean, std_error) = mean_and_std_error(&hits);
        out.push(MfptEstimate {
            epsilon: eps,
            mean,
            std_error,
            hits: hits.len(),
            censored,
            left_domain: left,
            ensemble_size: settings.ensemble_size,
        });
    }
    Ok(out)
}

fn mean_and_std_error(values: &[f64]) -> (Option<f64>, Option<f64>) {
    let n = values.len();
    if n == 0 {
        return (None, None);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (Some(mean), None);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (Some(mean), Some((var / n as f64).sqrt()))
}

/// Least-squares line `ln(MFPT) = intercept + slope / ε`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ArrheniusFit {
    pub slope: f64,
    pub intercept: f64,
    pub points: usize,
}

pub fn arrhenius_fit(estimates: &[MfptEstimate]) -> Option<ArrheniusFit> {
    let pts: Vec<(f64, f64)> = estimates
        .iter()
        .filter_map(|e| e.mean.filter(|m| *m > 0.0).map(|m| (1.0 / e.epsilon, m.ln())))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    Some(ArrheniusFit {
        slope,
        intercept: my - slope * mx,
        points: pts.len(),
    })
}

/// Terms of `∫|ṗ|² dt = V(p₀) - V(p_f) + ∫dp·Ā` along a sampled path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EnergyIdentity {
    pub kinetic: f64,
    pub potential_drop: f64,
    pub solenoidal_work: f64,
    pub residual: f64,
}

impl EnergyIdentity {
    /// `V(p₀) - V(p_f) + ∫dp·Ā`, non-negative for classical paths.
    pub fn positivity_margin(&self) -> f64 {
        self.potential_drop + self.solenoidal_work
    }
}

/// `∫|ṗ|²` is taken on the piecewise-linear interpolant (`Σ|Δp|²/Δt`),
/// `∫dp·Ā` by the trapezoid rule per segment.
pub fn energy_identity_check(
    traj: &Trajectory,
    decomposition: &AnalyticDecomposition,
) -> Result<EnergyIdentity, DynamicsError> {
    if traj.is_empty() {
        return Err(DynamicsError::InvalidArgument("empty trajectory".into()));
    }
    let n = traj.dim;
    let v0 = decomposition.potential(traj.initial_state())?;
    let vf = decomposition.potential(traj.final_state())?;
    let mut kinetic = 0.0;
    let mut work = 0.0;
    let mut prev_bar = decomposition.solenoidal(traj.state(0))?;
    for i in 1..traj.len() {
        let a = traj.state(i - 1);
        let b = traj.state(i);
        let h = traj.times[i] - traj.times[i - 1];
        let bar = decomposition.solenoidal(b)?;
        let mut sq = 0.0;
        for d in 0..n {
            let dp = b[d] - a[d];
            sq += dp * dp;
            work += 0.5 * dp * (prev_bar[d] + bar[d]);
        }
        kinetic += sq / h;
        prev_bar = bar;
    }
    let potential_drop = v0 - vf;
    Ok(EnergyIdentity {
        kinetic,
        potential_drop,
        solenoidal_work: work,
        residual: (kinetic - (potential_drop + work)).abs(),
    })
}
