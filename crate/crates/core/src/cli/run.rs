//! Experiment runners: scenario in, result files out.
//!
//! Every number written here comes from a library call; the runners only
//! choose inputs and arrange outputs.

use serde::Serialize;
use serde_json::{json, Value};

use super::scenario::{Experiment, Scenario};
use super::CliError;
use crate::critical::{
    basin_of_attraction, find_critical_points, BasinLabel, BasinSettings, CriticalPoint, Stability,
};
use crate::dynamics::{
    arrhenius_fit, energy_identity_check, integrate_deterministic, mean_first_passage, simulate_sde_with,
    simulate_transitions, MfptSettings, SdeOptions, TransitionEvent,
};
use crate::field::{compare_scenarios, AppendixParams, FieldSpec, ParameterVector, PriceVector};
use crate::hodge::{analytic_decomposition, compare_with_analytic, decompose_on_grid_with, GridSpec};
use crate::paths::{
    appendix_paths, max_potential_node, minimize_action, onsager_machlup_action_with, positivity_margin,
    reversal_identity, ActionQuadrature, MinimizeSettings, MinimizedPath, PiecewisePath,
};

/// Result files (name, contents) in write order plus a manifest summary.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub files: Vec<(String, String)>,
    pub summary: Value,
}

fn numerical(context: &str) -> impl Fn(String) -> CliError + '_ {
    move |e| CliError::Numerical(format!("{context}: {e}"))
}

fn to_json<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("result serialises")
}

fn result_file(experiment: Experiment, scenario: &Scenario, results: Value) -> (String, String) {
    let doc = json!({
        "experiment": experiment.name(),
        "scenario": to_json(scenario),
        "scenario_hash": scenario.hash(),
        "results": results,
    });
    let mut text = serde_json::to_string_pretty(&doc).expect("json");
    text.push('\n');
    (format!("{}.json", experiment.name()), text)
}

pub fn execute(experiment: Experiment, scenario: &Scenario, field: &FieldSpec) -> Result<RunOutput, CliError> {
    match experiment {
        Experiment::CriticalPoints => critical_points(scenario, field),
        Experiment::Decompose => decompose(scenario, field),
        Experiment::Simulate => simulate(scenario, field),
        Experiment::Transitions => transitions(scenario, field),
        Experiment::Mfpt => mfpt(scenario, field),
        Experiment::PathAction => path_action(scenario, field),
        Experiment::MinimizeAction => minimize(scenario, field),
        Experiment::AppendixDemo => appendix_demo(scenario, field),
        Experiment::CompareScenarios => compare(scenario, field),
    }
}

fn search(scenario: &Scenario, field: &FieldSpec) -> Result<Vec<CriticalPoint>, CliError> {
    let found = find_critical_points(field, &scenario.critical_settings(field))
        .map_err(|e| numerical("critical-point search")(e.to_string()))?;
    Ok(found.points)
}

fn nearest<'a>(points: &'a [CriticalPoint], target: &[f64], what: &str) -> Result<&'a CriticalPoint, CliError> {
    points
        .iter()
        .min_by(|a, b| {
            a.location
                .distance(target)
                .total_cmp(&b.location.distance(target))
        })
        .ok_or_else(|| CliError::Numerical(format!("{what}: the field has no critical points in the domain")))
}

fn points_csv(points: &[CriticalPoint]) -> String {
    let dim = points.first().map_or(0, |c| c.location.dim());
    let mut out: Vec<String> = (1..=dim).map(|i| format!("p{i}")).collect();
    out.extend(["index", "stability", "residual"].map(String::from));
    let mut text = out.join(",") + "\n";
    for c in points {
        let mut row: Vec<String> = c.location.as_slice().iter().map(|x| x.to_string()).collect();
        row.push(c.index.to_string());
        row.push(to_json(&c.stability).as_str().unwrap_or_default().to_string());
        row.push(c.residual.to_string());
        text.push_str(&row.join(","));
        text.push('\n');
    }
    text
}

fn count_stability(points: &[CriticalPoint]) -> Value {
    let count = |s: Stability| points.iter().filter(|c| c.stability == s).count();
    json!({
        "critical_points": points.len(),
        "stable": count(Stability::Stable),
        "saddle": count(Stability::Saddle),
        "unstable": count(Stability::Unstable),
        "marginal": count(Stability::Marginal),
    })
}

fn critical_points(scenario: &Scenario, field: &FieldSpec) -> Result<RunOutput, CliError> {
    let found = find_critical_points(field, &scenario.critical_settings(field))
        .map_err(|e| numerical("critical-point search")(e.to_string()))?;
    let mut summary = count_stability(&found.points);
    let mut files = Vec::new();
    let mut results = json!({ "search": to_json(&found) });
    if let Some(b) = &scenario.basins {
        let grid = GridSpec::new(scenario.domain.lower.clone(), scenario.domain.upper.clone(), b.resolution.clone())
            .map_err(|e| numerical("basin grid")(e.to_string()))?;
        let settings = BasinSettings {
            capture_radius: b.capture_radius,
            t_max: b.t_max,
            dt: b.dt,
        };
        let map = basin_of_attraction(field, &found.points, &grid, &settings)
            .map_err(|e| numerical("basin map")(e.to_string()))?;
        let counts: Vec<Value> = (0..found.points.len())
            .filter(|i| found.points[*i].is_stable())
            .map(|i| json!({ "point": i, "nodes": map.count(BasinLabel::Point(i)) }))
            .collect();
        let unresolved = map.count(BasinLabel::Unresolved);
        results["basins"] = json!({ "grid": to_json(&map.grid), "counts": counts, "unresolved": unresolved });
        summary["basin_unresolved_nodes"] = json!(unresolved);
        files.push(("basins.csv".to_string(), map.to_csv()));
    }
    files.insert(0, result_file(Experiment::CriticalPoints, scenario, results));
    files.insert(1, ("critical_points.csv".to_string(), points_csv(&found.points)));
    Ok(RunOutput { files, summary })
}

fn decompose(scenario: &Scenario, field: &FieldSpec) -> Result<RunOutput, CliError> {
    let g = scenario.grid.as_ref().expect("validated grid");
    let grid = GridSpec::new(g.lower.clone(), g.upper.clone(), g.resolution.clone())
        .map_err(|e| numerical("grid")(e.to_string()))?;
    let result = decompose_on_grid_with(field, &grid, g.poisson_tol, g.max_iters)
        .map_err(|e| numerical("decomposition")(e.to_string()))?;
    let caps = field.capabilities();
    let comparison = if caps.potential && caps.solenoidal {
        Some(
            compare_with_analytic(&result, field, g.comparison_margin)
                .map_err(|e| numerical("analytic comparison")(e.to_string()))?,
        )
    } else {
        None
    };
    let results = json!({
        "grid": to_json(&result.grid),
        "reconstruction_residual": result.reconstruction_residual,
        "divergence_residual": result.divergence_residual,
        "poisson_relative_residual": result.poisson_relative_residual,
        "poisson_iterations": result.poisson_iterations,
        "gauge_note": result.gauge_note,
        "analytic_comparison": to_json(&comparison),
    });
    let summary = json!({
        "nodes": result.grid.node_count(),
        "divergence_residual": result.divergence_residual,
        "poisson_iterations": result.poisson_iterations,
    });
    Ok(RunOutput {
        files: vec![
            result_file(Experiment::Decompose, scenario, results),
            ("decomposition.csv".to_string(), result.to_csv()),
        ],
        summary,
    })
}

fn start_point(p: &[f64]) -> Result<PriceVector, CliError> {
    PriceVector::new(p.to_vec()).map_err(|e| numerical("start point")(e.to_string()))
}

fn simulate(scenario: &Scenario, field: &FieldSpec) -> Result<RunOutput, CliError> {
    let int = &scenario.integration;
    let p0 = start_point(int.p0.as_deref().expect("validated p0"))?;
    let t_final = int.t_final.expect("validated t_final");
    let (traj, energy) = match scenario.noise_spec() {
        Some(noise) => {
            let opts = SdeOptions { record_every: int.record_every, stream: 0 };
            let traj = simulate_sde_with(field, &noise, &p0, t_final, int.dt, opts)
                .map_err(|e| numerical("simulation")(e.to_string()))?;
            (traj, None)
        }
        None => {
            let traj = integrate_deterministic(field, &p0, t_final, int.dt)
                .map_err(|e| numerical("integration")(e.to_string()))?;
            let energy = match analytic_decomposition(field) {
                Ok(d) => Some(energy_identity_check(&traj, &d).map_err(|e| numerical("energy identity")(e.to_string()))?),
                Err(_) => None,
            };
            (traj, energy)
        }
    };
    let results = json!({
        "scheme": to_json(&traj.scheme),
        "status": to_json(&traj.status),
        "seed": traj.seed,
        "stream": traj.stream,
        "records": traj.len(),
        "final_time": traj.final_time(),
        "final_state": traj.final_state(),
        "energy_identity": to_json(&energy),
        "positivity_margin": energy.map(|e| e.positivity_margin()),
    });
    let summary = json!({
        "status": to_json(&traj.status),
        "records": traj.len(),
        "final_time": traj.final_time(),
    });
    Ok(RunOutput {
        files: vec![
            result_file(Experiment::Simulate, scenario, results),
            ("trajectory.csv".to_string(), traj.to_csv()),
        ],
        summary,
    })
}

fn events_csv(events: &[TransitionEvent]) -> String {
    let mut text = String::from("from_point,to_point,departure_time,arrival_time,min_distance_to_saddle\n");
    for e in events {
        let d = e.min_distance_to_saddle.map_or_else(String::new, |d| d.to_string());
        text.push_str(&format!(
            "{},{},{},{},{}\n",
            e.from_point, e.to_point, e.departure_time, e.arrival_time, d
        ));
    }
    text
}

fn transitions(scenario: &Scenario, field: &FieldSpec) -> Result<RunOutput, CliError> {
    let points = search(scenario, field)?;
    let int = &scenario.integration;
    let p0 = match &int.p0 {
        Some(p) => start_point(p)?,
        None => points
            .iter()
            .find(|c| c.is_stable())
            .map(|c| c.location.clone())
            .ok_or_else(|| CliError::Numerical("transitions: no stable critical point to start from".into()))?,
    };
    let noise = scenario.noise_spec().expect("validated noise");
    let det = &scenario.detection;
    let run = simulate_transitions(
        field,
        &noise,
        &p0,
        int.t_final.expect("validated t_final"),
        int.dt,
        &points,
        det.capture_radius,
        det.release_radius,
    )
    .map_err(|e| numerical("transition run")(e.to_string()))?;
    let fraction = run.saddle_passage_fraction(det.release_radius);
    let results = json!({
        "critical_points": to_json(&points),
        "start": p0.as_slice(),
        "run": to_json(&run),
        "saddle_passage_radius": det.release_radius,
        "saddle_passage_fraction": fraction,
    });
    let summary = json!({
        "events": run.events.len(),
        "status": to_json(&run.status),
        "saddle_passage_fraction": fraction,
    });
    Ok(RunOutput {
        files: vec![
            result_file(Experiment::Transitions, scenario, results),
            ("transitions.csv".to_string(), events_csv(&run.events)),
        ],
        summary,
    })
}

fn mfpt(scenario: &Scenario, field: &FieldSpec) -> Result<RunOutput, CliError> {
    let cfg = scenario.mfpt.as_ref().expect("validated mfpt");
    let points = search(scenario, field)?;
    let start = nearest(&points, &cfg.start, "mfpt.start")?;
    let target = nearest(&points, &cfg.target, "mfpt.target")?;
    if start.location == target.location {
        return Err(CliError::Numerical(
            "mfpt: start and target resolve to the same critical point".into(),
        ));
    }
    let settings = MfptSettings {
        noise_levels: cfg.noise_levels.clone(),
        ensemble_size: cfg.ensemble_size,
        dt: cfg.dt,
        t_cap: cfg.t_cap,
        capture_radius: cfg.capture_radius,
        seed: scenario.seed,
    };
    let estimates =
        mean_first_passage(field, start, target, &settings).map_err(|e| numerical("mfpt")(e.to_string()))?;
    let fit = arrhenius_fit(&estimates);
    let mut csv = String::from("epsilon,mean,std_error,hits,censored,left_domain,ensemble_size\n");
    for e in &estimates {
        let opt = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            e.epsilon,
            opt(e.mean),
            opt(e.std_error),
            e.hits,
            e.censored,
            e.left_domain,
            e.ensemble_size
        ));
    }
    let results = json!({
        "start": to_json(start),
        "target": to_json(target),
        "estimates": to_json(&estimates),
        "arrhenius_fit": to_json(&fit),
    });
    let summary = json!({
        "noise_levels": estimates.len(),
        "arrhenius_slope": fit.as_ref().map(|f| f.slope),
    });
    Ok(RunOutput {
        files: vec![result_file(Experiment::Mfpt, scenario, results), ("mfpt.csv".to_string(), csv)],
        summary,
    })
}

fn quadrature(scenario: &Scenario) -> Result<ActionQuadrature, CliError> {
    let q = scenario.paths.as_ref().expect("validated paths").quadrature_points;
    ActionQuadrature::new(q).map_err(|e| numerical("paths.quadrature_points")(e.to_string()))
}

fn path_action(scenario: &Scenario, field: &FieldSpec) -> Result<RunOutput, CliError> {
    let cfg = scenario.paths.as_ref().expect("validated paths");
    let path = match (&cfg.nodes, &cfg.start, &cfg.end) {
        (Some(nodes), _, _) => PiecewisePath::timed(nodes.clone(), cfg.t_final),
        (None, Some(s), Some(e)) => PiecewisePath::straight(s, e, cfg.n_nodes, cfg.t_final),
        _ => unreachable!("validated path source"),
    }
    .map_err(|e| numerical("path")(e.to_string()))?;
    let quad = quadrature(scenario)?;
    let forward = onsager_machlup_action_with(&path, field, cfg.epsilon, quad)
        .map_err(|e| numerical("action")(e.to_string()))?;
    let reverse = onsager_machlup_action_with(&path.reversed(), field, cfg.epsilon, quad)
        .map_err(|e| numerical("reverse action")(e.to_string()))?;
    let caps = field.capabilities();
    let (margin, identity) = if caps.potential && caps.solenoidal {
        let m = positivity_margin(&path, field).map_err(|e| numerical("positivity margin")(e.to_string()))?;
        let r = reversal_identity(&path, field, cfg.epsilon, quad)
            .map_err(|e| numerical("reversal identity")(e.to_string()))?;
        (Some(m), Some(r))
    } else {
        (None, None)
    };
    let results = json!({
        "nodes": path.len(),
        "epsilon": cfg.epsilon,
        "quadrature_points": quad.points(),
        "forward_action": forward.total,
        "reverse_action": reverse.total,
        "max_residual_norm": forward.max_residual_norm(path.dim()),
        "positivity_margin": to_json(&margin),
        "reversal_identity": to_json(&identity),
    });
    let summary = json!({ "forward_action": forward.total, "reverse_action": reverse.total });
    Ok(RunOutput {
        files: vec![
            result_file(Experiment::PathAction, scenario, results),
            ("path.csv".to_string(), path.to_csv()),
        ],
        summary,
    })
}

fn describe_minimizer(m: &MinimizedPath, field: &FieldSpec, eps: f64, quad: ActionQuadrature) -> Result<Value, CliError> {
    let caps = field.capabilities();
    let (peak, identity) = if caps.potential && caps.solenoidal {
        let peak = max_potential_node(&m.path, field).map_err(|e| numerical("peak potential")(e.to_string()))?;
        let id = reversal_identity(&m.path, field, eps, quad)
            .map_err(|e| numerical("reversal identity")(e.to_string()))?;
        (Some(json!({ "location": peak.0, "potential": peak.1 })), Some(id))
    } else {
        (None, None)
    };
    Ok(json!({
        "start": m.path.start(),
        "end": m.path.end(),
        "action": m.action.total,
        "initial_action": m.initial_action,
        "iterations": m.iterations,
        "converged": m.converged,
        "max_residual_norm": m.action.max_residual_norm(m.path.dim()),
        "max_potential_node": peak,
        "reversal_identity": to_json(&identity),
    }))
}

fn minimize(scenario: &Scenario, field: &FieldSpec) -> Result<RunOutput, CliError> {
    let cfg = scenario.paths.as_ref().expect("validated paths");
    let points = search(scenario, field)?;
    let start = nearest(&points, cfg.start.as_deref().expect("validated"), "paths.start")?;
    let end = nearest(&points, cfg.end.as_deref().expect("validated"), "paths.end")?;
    if start.location == end.location {
        return Err(CliError::Numerical("minimize-action: endpoints resolve to the same critical point".into()));
    }
    let hint = points
        .iter()
        .filter(|c| c.stability == Stability::Saddle)
        .min_by(|a, b| {
            let cost = |c: &CriticalPoint| c.location.distance(start.location.as_slice()) + c.location.distance(end.location.as_slice());
            cost(a).total_cmp(&cost(b))
        })
        .map(|c| c.location.as_slice().to_vec());
    let quad = quadrature(scenario)?;
    let settings = MinimizeSettings {
        n_nodes: cfg.n_nodes,
        t_final: cfg.t_final,
        max_iters: cfg.max_iters,
        tol: cfg.tol,
        quadrature: quad,
        saddle_hint: hint.clone(),
        initial_bump: cfg.initial_bump,
    };
    let (fwd, rev) = rayon::join(
        || minimize_action(field, cfg.epsilon, start, end, &settings),
        || minimize_action(field, cfg.epsilon, end, start, &settings),
    );
    let fwd = fwd.map_err(|e| numerical("forward minimisation")(e.to_string()))?;
    let rev = rev.map_err(|e| numerical("reverse minimisation")(e.to_string()))?;
    let results = json!({
        "start_point": to_json(start),
        "end_point": to_json(end),
        "saddle_hint": hint,
        "settings": to_json(&settings),
        "forward": describe_minimizer(&fwd, field, cfg.epsilon, quad)?,
        "reverse": describe_minimizer(&rev, field, cfg.epsilon, quad)?,
    });
    let summary = json!({
        "forward_action": fwd.action.total,
        "reverse_action": rev.action.total,
        "converged": fwd.converged && rev.converged,
    });
    Ok(RunOutput {
        files: vec![
            result_file(Experiment::MinimizeAction, scenario, results),
            ("instanton_forward.csv".to_string(), fwd.path.to_csv()),
            ("instanton_reverse.csv".to_string(), rev.path.to_csv()),
        ],
        summary,
    })
}

fn appendix_demo(scenario: &Scenario, field: &FieldSpec) -> Result<RunOutput, CliError> {
    let super::scenario::FieldConfig::Appendix { a, b, k, reference_point } = &scenario.field else {
        unreachable!("validated appendix field");
    };
    let params = AppendixParams::with_reference(*a, *b, *k, PriceVector::new(reference_point.clone()).expect("validated"))
        .map_err(|e| numerical("appendix parameters")(e.to_string()))?;
    let points = search(scenario, field)?;
    let report = appendix_paths(&params).map_err(|e| numerical("appendix paths")(e.to_string()))?;
    let results = json!({
        "critical_points": to_json(&points),
        "paths": to_json(&report),
    });
    let mut summary = count_stability(&points);
    summary["favored"] = json!(report.favored);
    summary["path_a"] = json!(report.closed_form.path_a);
    summary["path_b"] = json!(report.closed_form.path_b);
    Ok(RunOutput {
        files: vec![
            result_file(Experiment::AppendixDemo, scenario, results),
            ("critical_points.csv".to_string(), points_csv(&points)),
        ],
        summary,
    })
}

fn compare(scenario: &Scenario, field: &FieldSpec) -> Result<RunOutput, CliError> {
    let cfg = scenario.compare.as_ref().expect("validated compare");
    let baseline = match &cfg.baseline_parameters {
        Some(p) => ParameterVector::new(p.clone()).map_err(|e| numerical("compare.baseline_parameters")(e.to_string()))?,
        None => field.parameters(),
    };
    let alternative = ParameterVector::new(cfg.alternative_parameters.clone())
        .map_err(|e| numerical("compare.alternative_parameters")(e.to_string()))?;
    let cmp = compare_scenarios(field, &baseline, &alternative, &scenario.critical_settings(field))
        .map_err(|e| numerical("scenario comparison")(e.to_string()))?;
    let mut csv = String::from("baseline,alternative,distance,index_changed\n");
    for p in &cmp.pairs {
        csv.push_str(&format!("{},{},{},{}\n", p.baseline, p.alternative, p.distance, p.index_changed));
    }
    let summary = json!({
        "baseline_points": cmp.baseline.len(),
        "alternative_points": cmp.alternative.len(),
        "pairs": cmp.pairs.len(),
    });
    Ok(RunOutput {
        files: vec![
            result_file(Experiment::CompareScenarios, scenario, to_json(&cmp)),
            ("comparison.csv".to_string(), csv),
        ],
        summary,
    })
}
