//! Scenario files: TOML parsing, exhaustive validation and default filling.
//!
//! Parsing walks the raw TOML table so that every problem is reported with
//! its config path instead of stopping at the first one.

use std::collections::BTreeSet;
use std::fmt;
use std::sync::Arc;

use serde::Serialize;
use sha2::{Digest, Sha256};
use toml::{Table, Value};

use crate::critical::CriticalSearchSettings;
use crate::dynamics::{NoiseSpec, DEFAULT_CAPTURE_RADIUS, DEFAULT_DT, DEFAULT_RELEASE_RADIUS};
use crate::field::{
    make_appendix_field, AppendixParams, DomainBox, FieldSpec, Monomial, Polynomial,
    PolynomialModel, PriceVector,
};
use crate::hodge::{DEFAULT_MAX_NODES, MAX_GRID_DIM, MIN_RESOLUTION, POISSON_TOL};

pub const DEFAULT_SEED: u64 = 0;
pub const DEFAULT_MULTISTART: usize = 16;
pub const DEFAULT_NEWTON_TOL: f64 = 1e-10;
pub const DEFAULT_NEWTON_ITERS: usize = 60;
pub const DEFAULT_COMPARISON_MARGIN: f64 = 0.4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    CriticalPoints,
    Decompose,
    Simulate,
    Transitions,
    Mfpt,
    PathAction,
    MinimizeAction,
    AppendixDemo,
    CompareScenarios,
}

impl Experiment {
    pub const ALL: [Experiment; 9] = [
        Experiment::CriticalPoints,
        Experiment::Decompose,
        Experiment::Simulate,
        Experiment::Transitions,
        Experiment::Mfpt,
        Experiment::PathAction,
        Experiment::MinimizeAction,
        Experiment::AppendixDemo,
        Experiment::CompareScenarios,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Experiment::CriticalPoints => "critical-points",
            Experiment::Decompose => "decompose",
            Experiment::Simulate => "simulate",
            Experiment::Transitions => "transitions",
            Experiment::Mfpt => "mfpt",
            Experiment::PathAction => "path-action",
            Experiment::MinimizeAction => "minimize-action",
            Experiment::AppendixDemo => "appendix-demo",
            Experiment::CompareScenarios => "compare-scenarios",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|e| e.name() == s)
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub path: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FieldConfig {
    Appendix {
        a: f64,
        b: f64,
        k: f64,
        reference_point: Vec<f64>,
    },
    Polynomial {
        dimension: usize,
        components: Option<Vec<Polynomial>>,
        potential: Option<Polynomial>,
        solenoidal: Option<Vec<Polynomial>>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DomainConfig {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CriticalConfig {
    pub multistart: usize,
    pub tol: f64,
    pub max_iters: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridConfig {
    pub resolution: Vec<usize>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub poisson_tol: f64,
    pub max_iters: usize,
    pub comparison_margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BasinConfig {
    pub resolution: Vec<usize>,
    pub t_max: f64,
    pub dt: f64,
    pub capture_radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NoiseConfig {
    pub covariance: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IntegrationConfig {
    pub dt: f64,
    pub t_final: Option<f64>,
    pub p0: Option<Vec<f64>>,
    pub record_every: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DetectionConfig {
    pub capture_radius: f64,
    pub release_radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MfptConfig {
    pub noise_levels: Vec<f64>,
    pub ensemble_size: usize,
    pub t_cap: f64,
    pub dt: f64,
    pub capture_radius: f64,
    pub start: Vec<f64>,
    pub target: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PathsConfig {
    pub start: Option<Vec<f64>>,
    pub end: Option<Vec<f64>>,
    pub nodes: Option<Vec<Vec<f64>>>,
    pub epsilon: f64,
    pub t_final: f64,
    pub n_nodes: usize,
    pub max_iters: usize,
    pub tol: f64,
    pub quadrature_points: usize,
    pub initial_bump: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareConfig {
    pub baseline_parameters: Option<Vec<f64>>,
    pub alternative_parameters: Vec<f64>,
}

/// Fully resolved scenario; every default is explicit.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    pub experiments: Vec<Experiment>,
    pub field: FieldConfig,
    pub domain: DomainConfig,
    pub critical: CriticalConfig,
    pub grid: Option<GridConfig>,
    pub basins: Option<BasinConfig>,
    pub noise: Option<NoiseConfig>,
    pub integration: IntegrationConfig,
    pub detection: DetectionConfig,
    pub mfpt: Option<MfptConfig>,
    pub paths: Option<PathsConfig>,
    pub compare: Option<CompareConfig>,
}

impl Scenario {
    pub fn dimension(&self) -> usize {
        match &self.field {
            FieldConfig::Appendix { .. } => 2,
            FieldConfig::Polynomial { dimension, .. } => *dimension,
        }
    }

    /// Canonical JSON: object keys sorted, defaults filled.
    pub fn canonical_json(&self) -> String {
        serde_json::to_value(self)
            .expect("scenario serialises")
            .to_string()
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }

    pub fn build_field(&self) -> Result<FieldSpec, String> {
        let domain = DomainBox::new(self.domain.lower.clone(), self.domain.upper.clone())
            .map_err(|e| e.to_string())?;
        match &self.field {
            FieldConfig::Appendix { a, b, k, reference_point } => {
                let reference = PriceVector::new(reference_point.clone()).map_err(|e| e.to_string())?;
                let params =
                    AppendixParams::with_reference(*a, *b, *k, reference).map_err(|e| e.to_string())?;
                make_appendix_field(&params, domain).map_err(|e| e.to_string())
            }
            FieldConfig::Polynomial { dimension, components, potential, solenoidal } => {
                let model = match components {
                    Some(c) => PolynomialModel::new(*dimension, c.clone(), potential.clone(), solenoidal.clone()),
                    None => PolynomialModel::from_parts(*dimension, potential.clone(), solenoidal.clone()),
                }
                .map_err(|e| e.to_string())?;
                FieldSpec::new(Arc::new(model), domain).map_err(|e| e.to_string())
            }
        }
    }

    pub fn critical_settings(&self, field: &FieldSpec) -> CriticalSearchSettings {
        CriticalSearchSettings {
            search_box: field.domain().clone(),
            multistart: self.critical.multistart,
            tol: self.critical.tol,
            max_iters: self.critical.max_iters,
        }
    }

    pub fn noise_spec(&self) -> Option<NoiseSpec> {
        self.noise
            .as_ref()
            .map(|n| NoiseSpec::new(n.covariance.clone(), self.seed).expect("validated covariance"))
    }
}

struct Ctx {
    violations: Vec<Violation>,
}

impl Ctx {
    fn err(&mut self, path: impl Into<String>, message: impl Into<String>) {
        self.violations.push(Violation {
            path: path.into(),
            message: message.into(),
        });
    }

    fn unknown_keys(&mut self, t: &Table, allowed: &[&str], prefix: &str) {
        for key in t.keys() {
            if !allowed.contains(&key.as_str()) {
                self.err(join(prefix, key), "unknown key");
            }
        }
    }

    fn table<'a>(&mut self, t: &'a Table, key: &str, prefix: &str) -> Option<&'a Table> {
        match t.get(key) {
            None => None,
            Some(Value::Table(inner)) => Some(inner),
            Some(other) => {
                self.err(join(prefix, key), format!("expected a table, got {}", other.type_str()));
                None
            }
        }
    }

    fn f64(&mut self, t: &Table, key: &str, prefix: &str) -> Option<f64> {
        t.get(key).and_then(|v| self.as_f64(v, &join(prefix, key)))
    }

    fn as_f64(&mut self, v: &Value, path: &str) -> Option<f64> {
        match v {
            Value::Float(x) => Some(*x),
            Value::Integer(i) => Some(*i as f64),
            other => {
                self.err(path, format!("expected a number, got {}", other.type_str()));
                None
            }
        }
    }

    fn uint(&mut self, t: &Table, key: &str, prefix: &str) -> Option<u64> {
        match t.get(key)? {
            Value::Integer(i) if *i >= 0 => Some(*i as u64),
            Value::Integer(i) => {
                self.err(join(prefix, key), format!("must be a non-negative integer, got {i}"));
                None
            }
            other => {
                self.err(join(prefix, key), format!("expected an integer, got {}", other.type_str()));
                None
            }
        }
    }

    fn string(&mut self, t: &Table, key: &str, prefix: &str) -> Option<String> {
        match t.get(key)? {
            Value::String(s) => Some(s.clone()),
            other => {
                self.err(join(prefix, key), format!("expected a string, got {}", other.type_str()));
                None
            }
        }
    }

    fn vec_f64(&mut self, t: &Table, key: &str, prefix: &str) -> Option<Vec<f64>> {
        let path = join(prefix, key);
        self.as_vec_f64(t.get(key)?, &path)
    }

    fn as_vec_f64(&mut self, v: &Value, path: &str) -> Option<Vec<f64>> {
        match v {
            Value::Array(items) => {
                let before = self.violations.len();
                let out: Vec<f64> = items
                    .iter()
                    .enumerate()
                    .filter_map(|(i, x)| self.as_f64(x, &format!("{path}[{i}]")))
                    .collect();
                (self.violations.len() == before).then_some(out)
            }
            other => {
                self.err(path, format!("expected an array of numbers, got {}", other.type_str()));
                None
            }
        }
    }

    fn matrix(&mut self, t: &Table, key: &str, prefix: &str) -> Option<Vec<Vec<f64>>> {
        let path = join(prefix, key);
        match t.get(key)? {
            Value::Array(rows) => {
                let before = self.violations.len();
                let out: Vec<Vec<f64>> = rows
                    .iter()
                    .enumerate()
                    .filter_map(|(i, r)| self.as_vec_f64(r, &format!("{path}[{i}]")))
                    .collect();
                (self.violations.len() == before).then_some(out)
            }
            other => {
                self.err(path, format!("expected an array of arrays, got {}", other.type_str()));
                None
            }
        }
    }

    fn polynomial(&mut self, v: &Value, path: &str, dim: usize) -> Option<Polynomial> {
        let Value::Array(terms) = v else {
            self.err(path, format!("expected an array of monomials, got {}", v.type_str()));
            return None;
        };
        let before = self.violations.len();
        let mut out = Vec::with_capacity(terms.len());
        for (i, term) in terms.iter().enumerate() {
            let tp = format!("{path}[{i}]");
            let Value::Table(t) = term else {
                self.err(&tp, "expected a table {coeff, powers}");
                continue;
            };
            self.unknown_keys(t, &["coeff", "powers"], &tp);
            let coeff = self.f64(t, "coeff", &tp);
            if coeff.is_none() && !t.contains_key("coeff") {
                self.err(join(&tp, "coeff"), "missing");
            }
            if let Some(c) = coeff {
                if !c.is_finite() {
                    self.err(join(&tp, "coeff"), "must be finite");
                }
            }
            let powers = match t.get("powers") {
                Some(Value::Array(ps)) => {
                    let mut v = Vec::with_capacity(ps.len());
                    for (j, p) in ps.iter().enumerate() {
                        match p {
                            Value::Integer(e) if *e >= 0 && *e <= 64 => v.push(*e as u32),
                            _ => self.err(format!("{tp}.powers[{j}]"), "must be an integer in 0..=64"),
                        }
                    }
                    if v.len() != dim && v.len() == ps.len() {
                        self.err(
                            join(&tp, "powers"),
                            format!("has {} entries, field dimension is {dim}", v.len()),
                        );
                    }
                    Some(v)
                }
                Some(other) => {
                    self.err(join(&tp, "powers"), format!("expected an array, got {}", other.type_str()));
                    None
                }
                None => {
                    self.err(join(&tp, "powers"), "missing");
                    None
                }
            };
            if let (Some(c), Some(p)) = (coeff, powers) {
                out.push(Monomial::new(c, p));
            }
        }
        (self.violations.len() == before).then(|| Polynomial::from_terms(out))
    }

    fn polynomial_list(&mut self, v: &Value, path: &str, dim: usize) -> Option<Vec<Polynomial>> {
        let Value::Array(items) = v else {
            self.err(path, format!("expected an array of polynomials, got {}", v.type_str()));
            return None;
        };
        if items.len() != dim {
            self.err(path, format!("has {} components, field dimension is {dim}", items.len()));
        }
        let before = self.violations.len();
        let out: Vec<Polynomial> = items
            .iter()
            .enumerate()
            .filter_map(|(i, p)| self.polynomial(p, &format!("{path}[{i}]"), dim))
            .collect();
        (self.violations.len() == before && out.len() == dim).then_some(out)
    }

    fn positive(&mut self, value: Option<f64>, path: &str) {
        if let Some(v) = value {
            if !(v.is_finite() && v > 0.0) {
                self.err(path, format!("must be > 0, got {v}"));
            }
        }
    }

    fn point(&mut self, value: &Option<Vec<f64>>, path: &str, dim: usize, domain: Option<&DomainBox>) {
        if let Some(p) = value {
            if p.len() != dim {
                self.err(path, format!("has {} coordinates, field dimension is {dim}", p.len()));
            } else if let Some(d) = domain {
                if !d.contains(p) {
                    self.err(path, format!("{p:?} lies outside the domain box"));
                }
            }
        }
    }
}

fn join(prefix: &str, key: &str) -> String {
    if prefix.is_empty() {
        key.to_string()
    } else {
        format!("{prefix}.{key}")
    }
}

/// Parses TOML text and validates it for the experiments listed in the file
/// plus `requested`.
pub fn parse_scenario(text: &str, requested: &[Experiment]) -> Result<Scenario, Vec<Violation>> {
    let root: Table = match toml::from_str(text) {
        Ok(t) => t,
        Err(e) => {
            return Err(vec![Violation {
                path: "<file>".into(),
                message: format!("TOML parse error: {}", e.message()),
            }])
        }
    };
    let mut ctx = Ctx { violations: Vec::new() };
    let scenario = resolve(&root, requested, &mut ctx);
    match scenario {
        Some(s) if ctx.violations.is_empty() => Ok(s),
        _ => Err(ctx.violations),
    }
}

/// Every violation for the experiments listed in the file plus `requested`;
/// empty when the scenario is valid.
pub fn validate_scenario(text: &str, requested: &[Experiment]) -> Vec<Violation> {
    match parse_scenario(text, requested) {
        Ok(_) => Vec::new(),
        Err(v) => v,
    }
}

const TOP_KEYS: &[&str] = &[
    "name",
    "seed",
    "experiments",
    "field",
    "domain",
    "critical",
    "grid",
    "basins",
    "noise",
    "integration",
    "detection",
    "mfpt",
    "paths",
    "compare",
];

fn resolve(root: &Table, requested: &[Experiment], ctx: &mut Ctx) -> Option<Scenario> {
    ctx.unknown_keys(root, TOP_KEYS, "");

    let name = ctx.string(root, "name", "");
    match &name {
        None if !root.contains_key("name") => ctx.err("name", "missing"),
        Some(n) if n.trim().is_empty() => ctx.err("name", "must not be empty"),
        _ => {}
    }
    let seed = ctx.uint(root, "seed", "").unwrap_or(DEFAULT_SEED);

    let mut experiments: BTreeSet<Experiment> = requested.iter().copied().collect();
    match root.get("experiments") {
        None => {}
        Some(Value::Array(items)) => {
            for (i, item) in items.iter().enumerate() {
                match item.as_str().and_then(Experiment::from_name) {
                    Some(e) => {
                        experiments.insert(e);
                    }
                    None => ctx.err(
                        format!("experiments[{i}]"),
                        format!(
                            "unknown experiment {item}; expected one of {}",
                            Experiment::ALL.map(|e| e.name()).join(", ")
                        ),
                    ),
                }
            }
        }
        Some(other) => ctx.err("experiments", format!("expected an array, got {}", other.type_str())),
    }
    let wants = |e: Experiment| experiments.contains(&e);

    // field
    let field = match ctx.table(root, "field", "") {
        None => {
            if !root.contains_key("field") {
                ctx.err("field", "missing");
            }
            None
        }
        Some(t) => resolve_field(t, ctx),
    };
    let dim = match &field {
        Some(FieldConfig::Appendix { .. }) => 2,
        Some(FieldConfig::Polynomial { dimension, .. }) => *dimension,
        None => 0,
    };

    // domain
    let domain = match ctx.table(root, "domain", "") {
        None => {
            if !root.contains_key("domain") {
                ctx.err("domain", "missing");
            }
            None
        }
        Some(t) => {
            ctx.unknown_keys(t, &["lower", "upper"], "domain");
            let lower = ctx.vec_f64(t, "lower", "domain");
            let upper = ctx.vec_f64(t, "upper", "domain");
            for (key, v) in [("lower", &lower), ("upper", &upper)] {
                if !t.contains_key(key) {
                    ctx.err(join("domain", key), "missing");
                } else if let Some(v) = v {
                    if dim > 0 && v.len() != dim {
                        ctx.err(join("domain", key), format!("has {} entries, field dimension is {dim}", v.len()));
                    }
                }
            }
            match (lower, upper) {
                (Some(l), Some(u)) if l.len() == u.len() => {
                    let mut ok = true;
                    for i in 0..l.len() {
                        if !(l[i].is_finite() && u[i].is_finite() && l[i] < u[i]) {
                            ctx.err(
                                format!("domain.lower[{i}]"),
                                format!("must be finite and < domain.upper[{i}] ({} vs {})", l[i], u[i]),
                            );
                            ok = false;
                        }
                    }
                    ok.then_some(DomainConfig { lower: l, upper: u })
                }
                (Some(_), Some(_)) => {
                    ctx.err("domain", "lower and upper have different lengths");
                    None
                }
                _ => None,
            }
        }
    };
    let domain_box = domain
        .as_ref()
        .filter(|d| d.lower.len() == dim)
        .and_then(|d| DomainBox::new(d.lower.clone(), d.upper.clone()).ok());

    // critical
    let critical = {
        let t = ctx.table(root, "critical", "").cloned().unwrap_or_default();
        ctx.unknown_keys(&t, &["multistart", "tol", "max_iters"], "critical");
        let multistart = ctx.uint(&t, "multistart", "critical").map(|v| v as usize).unwrap_or(DEFAULT_MULTISTART);
        let tol = ctx.f64(&t, "tol", "critical").unwrap_or(DEFAULT_NEWTON_TOL);
        let max_iters = ctx.uint(&t, "max_iters", "critical").map(|v| v as usize).unwrap_or(DEFAULT_NEWTON_ITERS);
        if multistart == 0 {
            ctx.err("critical.multistart", "must be ≥ 1");
        }
        ctx.positive(Some(tol), "critical.tol");
        if max_iters == 0 {
            ctx.err("critical.max_iters", "must be ≥ 1");
        }
        if dim > 0 && (multistart as f64).powi(dim as i32) > 1e7 {
            ctx.err("critical.multistart", format!("{multistart}^{dim} starting points is too many"));
        }
        CriticalConfig { multistart, tol, max_iters }
    };

    // grid
    let grid = match ctx.table(root, "grid", "") {
        None => {
            if wants(Experiment::Decompose) {
                ctx.err("grid", "required by the decompose experiment");
            }
            None
        }
        Some(t) => {
            ctx.unknown_keys(
                t,
                &["resolution", "lower", "upper", "poisson_tol", "max_iters", "comparison_margin"],
                "grid",
            );
            let resolution = resolution_list(ctx, t, "grid", dim);
            let lower = ctx.vec_f64(t, "lower", "grid").or_else(|| domain.as_ref().map(|d| d.lower.clone()));
            let upper = ctx.vec_f64(t, "upper", "grid").or_else(|| domain.as_ref().map(|d| d.upper.clone()));
            let poisson_tol = ctx.f64(t, "poisson_tol", "grid").unwrap_or(POISSON_TOL);
            ctx.positive(Some(poisson_tol), "grid.poisson_tol");
            let max_iters = ctx.uint(t, "max_iters", "grid").map(|v| v as usize).unwrap_or(50_000);
            if max_iters == 0 {
                ctx.err("grid.max_iters", "must be ≥ 1");
            }
            let comparison_margin = ctx.f64(t, "comparison_margin", "grid").unwrap_or(DEFAULT_COMPARISON_MARGIN);
            if !(comparison_margin.is_finite() && comparison_margin >= 0.0) {
                ctx.err("grid.comparison_margin", "must be ≥ 0");
            }
            if dim > MAX_GRID_DIM {
                ctx.err("grid", format!("gridded decomposition supports dimension ≤ {MAX_GRID_DIM}"));
            }
            if let (Some(l), Some(u)) = (&lower, &upper) {
                if l.len() != dim || u.len() != dim {
                    ctx.err("grid", "lower/upper must match the field dimension");
                } else if let Some(d) = &domain_box {
                    if !d.contains(l) || !d.contains(u) || l.iter().zip(u).any(|(a, b)| a >= b) {
                        ctx.err("grid", "grid box must be non-empty and inside the domain box");
                    }
                }
            }
            match (resolution, lower, upper) {
                (Some(resolution), Some(lower), Some(upper)) => Some(GridConfig {
                    resolution,
                    lower,
                    upper,
                    poisson_tol,
                    max_iters,
                    comparison_margin,
                }),
                _ => None,
            }
        }
    };

    // basins (optional add-on to critical-points)
    let basins = ctx.table(root, "basins", "").map(|t| {
        ctx.unknown_keys(t, &["resolution", "t_max", "dt", "capture_radius"], "basins");
        let resolution = resolution_list(ctx, t, "basins", dim).unwrap_or_default();
        let t_max = ctx.f64(t, "t_max", "basins").unwrap_or(50.0);
        let dt = ctx.f64(t, "dt", "basins").unwrap_or(1e-2);
        let capture_radius = ctx.f64(t, "capture_radius", "basins").unwrap_or(DEFAULT_CAPTURE_RADIUS);
        ctx.positive(Some(t_max), "basins.t_max");
        ctx.positive(Some(dt), "basins.dt");
        ctx.positive(Some(capture_radius), "basins.capture_radius");
        BasinConfig { resolution, t_max, dt, capture_radius }
    });

    // noise
    let noise = match ctx.table(root, "noise", "") {
        None => {
            if wants(Experiment::Transitions) {
                ctx.err("noise", "required by the transitions experiment");
            }
            None
        }
        Some(t) => {
            ctx.unknown_keys(t, &["covariance", "epsilon"], "noise");
            let cov = ctx.matrix(t, "covariance", "noise");
            let eps = ctx.f64(t, "epsilon", "noise");
            match (cov, eps, t.contains_key("covariance"), t.contains_key("epsilon")) {
                (_, _, true, true) => {
                    ctx.err("noise", "give either covariance or epsilon, not both");
                    None
                }
                (_, _, false, false) => {
                    ctx.err("noise", "needs covariance or epsilon");
                    None
                }
                (_, Some(e), _, _) => {
                    if !(e.is_finite() && e >= 0.0) {
                        ctx.err("noise.epsilon", format!("must be ≥ 0, got {e}"));
                        None
                    } else {
                        Some(NoiseConfig {
                            covariance: (0..dim)
                                .map(|i| (0..dim).map(|j| if i == j { e } else { 0.0 }).collect())
                                .collect(),
                        })
                    }
                }
                (Some(c), _, _, _) => {
                    if c.len() != dim || c.iter().any(|r| r.len() != dim) {
                        ctx.err("noise.covariance", format!("must be {dim}×{dim}"));
                        None
                    } else {
                        match NoiseSpec::new(c.clone(), seed) {
                            Ok(_) => Some(NoiseConfig { covariance: c }),
                            Err(e) => {
                                let msg = e.to_string();
                                let msg = if msg.contains("symmetric") && !msg.contains("semi-definite") {
                                    format!("violates the symmetry invariant: {msg}")
                                } else {
                                    msg
                                };
                                ctx.err("noise.covariance", msg);
                                None
                            }
                        }
                    }
                }
                _ => None,
            }
        }
    };

    // integration
    let integration = {
        let t = ctx.table(root, "integration", "").cloned().unwrap_or_default();
        ctx.unknown_keys(&t, &["dt", "t_final", "p0", "record_every"], "integration");
        let dt = ctx.f64(&t, "dt", "integration").unwrap_or(DEFAULT_DT);
        ctx.positive(Some(dt), "integration.dt");
        let t_final = ctx.f64(&t, "t_final", "integration");
        if let Some(tf) = t_final {
            if !(tf.is_finite() && tf >= dt) {
                ctx.err("integration.t_final", format!("must be ≥ dt ({dt}), got {tf}"));
            }
        }
        let p0 = ctx.vec_f64(&t, "p0", "integration");
        ctx.point(&p0, "integration.p0", dim, domain_box.as_ref());
        let record_every = ctx.uint(&t, "record_every", "integration").map(|v| v as usize).unwrap_or(1);
        if record_every == 0 {
            ctx.err("integration.record_every", "must be ≥ 1");
        }
        for (e, need_p0) in [(Experiment::Simulate, true), (Experiment::Transitions, false)] {
            if wants(e) {
                if t_final.is_none() && !t.contains_key("t_final") {
                    ctx.err("integration.t_final", format!("required by the {e} experiment"));
                }
                if need_p0 && p0.is_none() && !t.contains_key("p0") {
                    ctx.err("integration.p0", format!("required by the {e} experiment"));
                }
            }
        }
        IntegrationConfig { dt, t_final, p0, record_every }
    };

    // detection
    let detection = {
        let t = ctx.table(root, "detection", "").cloned().unwrap_or_default();
        ctx.unknown_keys(&t, &["capture_radius", "release_radius"], "detection");
        let capture_radius = ctx.f64(&t, "capture_radius", "detection").unwrap_or(DEFAULT_CAPTURE_RADIUS);
        let release_radius = ctx.f64(&t, "release_radius", "detection").unwrap_or(DEFAULT_RELEASE_RADIUS);
        ctx.positive(Some(capture_radius), "detection.capture_radius");
        if !(release_radius > capture_radius) {
            ctx.err(
                "detection.release_radius",
                format!("must exceed capture_radius ({capture_radius}), got {release_radius}"),
            );
        }
        DetectionConfig { capture_radius, release_radius }
    };

    // mfpt
    let mfpt = match ctx.table(root, "mfpt", "") {
        None => {
            if wants(Experiment::Mfpt) {
                ctx.err("mfpt", "required by the mfpt experiment");
            }
            None
        }
        Some(t) => {
            ctx.unknown_keys(
                t,
                &["noise_levels", "ensemble_size", "t_cap", "dt", "capture_radius", "start", "target"],
                "mfpt",
            );
            let levels = ctx.vec_f64(t, "noise_levels", "mfpt");
            match &levels {
                None if !t.contains_key("noise_levels") => ctx.err("mfpt.noise_levels", "missing"),
                Some(l) if l.is_empty() => ctx.err("mfpt.noise_levels", "must not be empty"),
                Some(l) => {
                    for (i, e) in l.iter().enumerate() {
                        ctx.positive(Some(*e), &format!("mfpt.noise_levels[{i}]"));
                    }
                }
                None => {}
            }
            let ensemble_size = ctx.uint(t, "ensemble_size", "mfpt").map(|v| v as usize).unwrap_or(500);
            if ensemble_size < 100 {
                ctx.err("mfpt.ensemble_size", format!("must be ≥ 100, got {ensemble_size}"));
            }
            let t_cap = ctx.f64(t, "t_cap", "mfpt").unwrap_or(1e5);
            let dt = ctx.f64(t, "dt", "mfpt").unwrap_or(integration.dt);
            ctx.positive(Some(dt), "mfpt.dt");
            if !(t_cap.is_finite() && t_cap >= dt) {
                ctx.err("mfpt.t_cap", format!("must be ≥ dt, got {t_cap}"));
            }
            let capture_radius = ctx.f64(t, "capture_radius", "mfpt").unwrap_or(detection.capture_radius);
            ctx.positive(Some(capture_radius), "mfpt.capture_radius");
            let start = ctx.vec_f64(t, "start", "mfpt");
            let target = ctx.vec_f64(t, "target", "mfpt");
            for (key, v) in [("start", &start), ("target", &target)] {
                if !t.contains_key(key) {
                    ctx.err(join("mfpt", key), "missing");
                }
                ctx.point(v, &join("mfpt", key), dim, domain_box.as_ref());
            }
            if let (Some(s), Some(g)) = (&start, &target) {
                if s == g {
                    ctx.err("mfpt.target", "must differ from mfpt.start");
                }
            }
            match (levels, start, target) {
                (Some(noise_levels), Some(start), Some(target)) => Some(MfptConfig {
                    noise_levels,
                    ensemble_size,
                    t_cap,
                    dt,
                    capture_radius,
                    start,
                    target,
                }),
                _ => None,
            }
        }
    };

    // paths
    let needs_paths = wants(Experiment::PathAction) || wants(Experiment::MinimizeAction);
    let paths = match ctx.table(root, "paths", "") {
        None => {
            if needs_paths {
                let which = if wants(Experiment::PathAction) { "path-action" } else { "minimize-action" };
                ctx.err("paths", format!("required by the {which} experiment"));
            }
            None
        }
        Some(t) => {
            ctx.unknown_keys(
                t,
                &[
                    "start",
                    "end",
                    "nodes",
                    "epsilon",
                    "t_final",
                    "n_nodes",
                    "max_iters",
                    "tol",
                    "quadrature_points",
                    "initial_bump",
                ],
                "paths",
            );
            let start = ctx.vec_f64(t, "start", "paths");
            let end = ctx.vec_f64(t, "end", "paths");
            ctx.point(&start, "paths.start", dim, domain_box.as_ref());
            ctx.point(&end, "paths.end", dim, domain_box.as_ref());
            let nodes = ctx.matrix(t, "nodes", "paths");
            if let Some(ns) = &nodes {
                if ns.len() < 2 {
                    ctx.err("paths.nodes", "needs at least 2 nodes");
                }
                for (i, n) in ns.iter().enumerate() {
                    ctx.point(&Some(n.clone()), &format!("paths.nodes[{i}]"), dim, domain_box.as_ref());
                }
            }
            let epsilon = ctx.f64(t, "epsilon", "paths").unwrap_or(1.0);
            ctx.positive(Some(epsilon), "paths.epsilon");
            let t_final = ctx.f64(t, "t_final", "paths").unwrap_or(40.0);
            ctx.positive(Some(t_final), "paths.t_final");
            let n_nodes = ctx.uint(t, "n_nodes", "paths").map(|v| v as usize).unwrap_or(128);
            let max_iters = ctx.uint(t, "max_iters", "paths").map(|v| v as usize).unwrap_or(20_000);
            let tol = ctx.f64(t, "tol", "paths").unwrap_or(1e-12);
            if !(tol.is_finite() && tol >= 0.0) {
                ctx.err("paths.tol", "must be ≥ 0");
            }
            let quadrature_points = ctx.uint(t, "quadrature_points", "paths").map(|v| v as usize).unwrap_or(1);
            if !(1..=5).contains(&quadrature_points) {
                ctx.err("paths.quadrature_points", format!("must be in 1..=5, got {quadrature_points}"));
            }
            let initial_bump = ctx.f64(t, "initial_bump", "paths").unwrap_or(1e-3);
            if !initial_bump.is_finite() {
                ctx.err("paths.initial_bump", "must be finite");
            }
            if wants(Experiment::MinimizeAction) {
                if start.is_none() && !t.contains_key("start") {
                    ctx.err("paths.start", "required by the minimize-action experiment");
                }
                if end.is_none() && !t.contains_key("end") {
                    ctx.err("paths.end", "required by the minimize-action experiment");
                }
                if n_nodes < 32 {
                    ctx.err("paths.n_nodes", format!("must be ≥ 32 for minimize-action, got {n_nodes}"));
                }
                if let (Some(s), Some(e)) = (&start, &end) {
                    if s == e {
                        ctx.err("paths.end", "must differ from paths.start");
                    }
                }
            }
            if wants(Experiment::PathAction) {
                if nodes.is_none() && !t.contains_key("nodes") && (start.is_none() || end.is_none()) {
                    ctx.err("paths", "path-action needs paths.nodes or both paths.start and paths.end");
                }
                if n_nodes < 2 {
                    ctx.err("paths.n_nodes", "must be ≥ 2");
                }
            }
            Some(PathsConfig {
                start,
                end,
                nodes,
                epsilon,
                t_final,
                n_nodes,
                max_iters,
                tol,
                quadrature_points,
                initial_bump,
            })
        }
    };

    // compare
    let compare = match ctx.table(root, "compare", "") {
        None => {
            if wants(Experiment::CompareScenarios) {
                ctx.err("compare", "required by the compare-scenarios experiment");
            }
            None
        }
        Some(t) => {
            ctx.unknown_keys(t, &["baseline_parameters", "alternative_parameters"], "compare");
            let baseline = ctx.vec_f64(t, "baseline_parameters", "compare");
            let alternative = ctx.vec_f64(t, "alternative_parameters", "compare");
            if alternative.is_none() && !t.contains_key("alternative_parameters") {
                ctx.err("compare.alternative_parameters", "missing");
            }
            alternative.map(|alternative_parameters| CompareConfig {
                baseline_parameters: baseline,
                alternative_parameters,
            })
        }
    };

    if wants(Experiment::AppendixDemo) && !matches!(field, Some(FieldConfig::Appendix { .. })) && field.is_some() {
        ctx.err("field.kind", "the appendix-demo experiment needs kind = \"appendix\"");
    }

    let scenario = Scenario {
        name: name?,
        seed,
        experiments: experiments.into_iter().collect(),
        field: field?,
        domain: domain?,
        critical,
        grid,
        basins,
        noise,
        integration,
        detection,
        mfpt,
        paths,
        compare,
    };
    if !ctx.violations.is_empty() {
        return None;
    }
    // checks that need the assembled field
    match scenario.build_field() {
        Ok(field) => {
            if let Some(c) = &scenario.compare {
                let expected = field.parameters().len();
                for (key, v) in [("baseline_parameters", &c.baseline_parameters), ("alternative_parameters", &Some(c.alternative_parameters.clone()))] {
                    if let Some(v) = v {
                        if v.len() != expected {
                            ctx.err(
                                join("compare", key),
                                format!("has {} values, the field takes {expected}", v.len()),
                            );
                        } else if let Err(e) = field.with_parameters(&crate::field::ParameterVector::new(v.clone()).unwrap_or_default()) {
                            ctx.err(join("compare", key), e.to_string());
                        }
                    }
                }
            }
            if let Some(g) = &scenario.grid {
                let total = g.resolution.iter().try_fold(1usize, |acc, r| acc.checked_mul(*r));
                if total.is_none_or(|t| t > DEFAULT_MAX_NODES) {
                    ctx.err("grid.resolution", format!("more than {DEFAULT_MAX_NODES} nodes"));
                }
            }
        }
        Err(e) => ctx.err("field", e),
    }
    ctx.violations.is_empty().then_some(scenario)
}

fn resolution_list(ctx: &mut Ctx, t: &Table, prefix: &str, dim: usize) -> Option<Vec<usize>> {
    let path = join(prefix, "resolution");
    match t.get("resolution") {
        None => {
            ctx.err(path, "missing");
            None
        }
        Some(Value::Integer(r)) => {
            if *r < MIN_RESOLUTION as i64 {
                ctx.err(path, format!("must be ≥ {MIN_RESOLUTION}, got {r}"));
                None
            } else {
                Some(vec![*r as usize; dim.max(1)])
            }
        }
        Some(Value::Array(items)) => {
            let mut out = Vec::new();
            for (i, v) in items.iter().enumerate() {
                match v {
                    Value::Integer(r) if *r >= MIN_RESOLUTION as i64 => out.push(*r as usize),
                    _ => ctx.err(format!("{path}[{i}]"), format!("must be an integer ≥ {MIN_RESOLUTION}")),
                }
            }
            if dim > 0 && items.len() != dim {
                ctx.err(&path, format!("has {} entries, field dimension is {dim}", items.len()));
                return None;
            }
            (out.len() == items.len()).then_some(out)
        }
        Some(other) => {
            ctx.err(path, format!("expected an integer or array, got {}", other.type_str()));
            None
        }
    }
}

fn resolve_field(t: &Table, ctx: &mut Ctx) -> Option<FieldConfig> {
    let kind = ctx.string(t, "kind", "field");
    match kind.as_deref() {
        Some("appendix") => {
            ctx.unknown_keys(t, &["kind", "a", "b", "k", "reference_point"], "field");
            let a = ctx.f64(t, "a", "field");
            let b = ctx.f64(t, "b", "field");
            let k = ctx.f64(t, "k", "field");
            for (key, v) in [("a", a), ("b", b), ("k", k)] {
                if v.is_none() && !t.contains_key(key) {
                    ctx.err(join("field", key), "missing");
                }
            }
            ctx.positive(a, "field.a");
            ctx.positive(b, "field.b");
            if let Some(k) = k {
                if !k.is_finite() {
                    ctx.err("field.k", "must be finite");
                }
            }
            let reference_point = ctx.vec_f64(t, "reference_point", "field").unwrap_or_else(|| vec![0.0, 0.0]);
            if reference_point.len() != 2 {
                ctx.err("field.reference_point", "must have 2 coordinates");
            }
            Some(FieldConfig::Appendix {
                a: a?,
                b: b?,
                k: k?,
                reference_point,
            })
        }
        Some("polynomial") => {
            ctx.unknown_keys(t, &["kind", "dimension", "components", "potential", "solenoidal"], "field");
            let dimension = match ctx.uint(t, "dimension", "field") {
                Some(0) => {
                    ctx.err("field.dimension", "must be ≥ 1");
                    return None;
                }
                Some(d) => d as usize,
                None => {
                    if !t.contains_key("dimension") {
                        ctx.err("field.dimension", "missing");
                    }
                    return None;
                }
            };
            let components = t
                .get("components")
                .and_then(|v| ctx.polynomial_list(v, "field.components", dimension));
            let potential = t.get("potential").and_then(|v| ctx.polynomial(v, "field.potential", dimension));
            let solenoidal = t
                .get("solenoidal")
                .and_then(|v| ctx.polynomial_list(v, "field.solenoidal", dimension));
            if !t.contains_key("components") && !t.contains_key("potential") && !t.contains_key("solenoidal") {
                ctx.err("field", "polynomial fields need components, or potential and/or solenoidal parts");
            }
            Some(FieldConfig::Polynomial {
                dimension,
                components,
                potential,
                solenoidal,
            })
        }
        Some(other) => {
            ctx.err("field.kind", format!("unknown kind {other:?}; expected \"appendix\" or \"polynomial\""));
            None
        }
        None => {
            if !t.contains_key("kind") {
                ctx.err("field.kind", "missing");
            }
            None
        }
    }
}
