//! End-to-end runs of the binary: exit codes, validation reports, outputs.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_tatonnement"));
    c.env_remove("TATONNEMENT_OUTPUT_DIR");
    c
}

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(name)
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn results(dir: &Path, experiment: &str) -> Value {
    let text = std::fs::read_to_string(dir.join(format!("{experiment}.json"))).unwrap();
    serde_json::from_str::<Value>(&text).unwrap()["results"].clone()
}

const APPENDIX: &str = r#"
name = "t"
[field]
kind = "appendix"
a = 1.0
b = 1.0
k = 0.5
[domain]
lower = [-3.0, -3.0]
upper = [3.0, 3.0]
"#;

#[test]
fn shipped_scenarios_validate_cleanly() {
    for name in ["appendix_k0.toml", "appendix_k05.toml", "polynomial_custom.toml"] {
        let out = bin().arg("validate").arg(scenario(name)).output().unwrap();
        assert_eq!(out.status.code(), Some(0), "{name}: {}", stdout(&out));
        assert!(stdout(&out).contains("no violations"));
    }
}

#[test]
fn negative_dt_is_a_config_error_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!("{APPENDIX}[integration]\ndt = -0.001\nt_final = 1.0\np0 = [0.5, 0.0]\n");
    let path = write(dir.path(), "bad.toml", &text);
    let out = bin()
        .args(["--output-dir"])
        .arg(dir.path().join("out"))
        .arg("simulate")
        .arg(&path)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert!(err.contains("integration.dt") && err.contains("must be > 0"), "{err}");
    assert!(!dir.path().join("out").exists());
}

#[test]
fn violations_are_listed_exhaustively() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!(
        "{APPENDIX}[integration]\ndt = 0\n[detection]\ncapture_radius = 0.4\n[noise]\ncovariance = [[0.1, 0.001], [0.0, 0.1]]\n"
    );
    let path = write(dir.path(), "bad.toml", &text);
    let out = bin().arg("validate").arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let report = stdout(&out);
    for needle in ["integration.dt", "detection.release_radius", "noise.covariance", "symmetry"] {
        assert!(report.contains(needle), "missing {needle} in\n{report}");
    }
}

#[test]
fn requested_experiment_sections_are_required() {
    let dir = tempfile::tempdir().unwrap();
    let path = write(dir.path(), "s.toml", &format!("experiments = [\"mfpt\"]\n{APPENDIX}"));
    let out = bin().arg("validate").arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(stdout(&out).contains("mfpt: required by the mfpt experiment"));

    let path = write(dir.path(), "plain.toml", APPENDIX);
    let out = bin().arg("validate").arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let out = bin().args(["validate", "--experiment", "decompose"]).arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(stdout(&out).contains("grid"));
}

#[test]
fn unreadable_scenario_is_an_io_error() {
    let out = bin().args(["validate", "/nonexistent/scenario.toml"]).output().unwrap();
    assert_eq!(out.status.code(), Some(4));
    let out = bin().args(["critical-points", "/nonexistent/scenario.toml"]).output().unwrap();
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn unwritable_output_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = write(dir.path(), "file", "not a directory");
    let out = bin()
        .arg("--output-dir")
        .arg(blocker.join("sub"))
        .arg("appendix-demo")
        .arg(scenario("appendix_k05.toml"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(4), "{}", stderr(&out));
}

#[test]
fn numerical_failures_exit_with_three() {
    let dir = tempfile::tempdir().unwrap();
    // A = -p has a single critical point, so start and target coincide
    let text = r#"
name = "linear"
[field]
kind = "polynomial"
dimension = 2
components = [[{ coeff = -1.0, powers = [1, 0] }], [{ coeff = -1.0, powers = [0, 1] }]]
[domain]
lower = [-2.0, -2.0]
upper = [2.0, 2.0]
[mfpt]
noise_levels = [0.1]
ensemble_size = 100
t_cap = 1.0
start = [-1.0, 0.0]
target = [1.0, 0.0]
"#;
    let path = write(dir.path(), "linear.toml", text);
    let out = bin().arg("--output-dir").arg(dir.path().join("o")).arg("mfpt").arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
    assert!(stderr(&out).contains("same critical point"));
}

#[test]
fn wrong_field_kind_for_appendix_demo() {
    let out = bin().args(["validate", "--experiment", "appendix-demo"]).arg(scenario("polynomial_custom.toml")).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(stdout(&out).contains("field.kind"));
}

#[test]
fn usage_errors_exit_with_two() {
    let out = bin().args(["frobnicate", "x.toml"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = bin().arg("--help").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn appendix_demo_reports_points_and_paths() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin().arg("--output-dir").arg(dir.path()).arg("appendix-demo").arg(scenario("appendix_k05.toml")).output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let r = results(dir.path(), "appendix-demo");
    let points = r["critical_points"].as_array().unwrap();
    assert_eq!(points.len(), 3);
    let mut idx: Vec<u64> = points.iter().map(|p| p["index"].as_u64().unwrap()).collect();
    idx.sort();
    assert_eq!(idx, [0, 0, 1]);
    assert!((r["paths"]["closed_form"]["path_a"].as_f64().unwrap() + 0.75).abs() < 1e-12);
    assert!((r["paths"]["closed_form"]["path_b"].as_f64().unwrap() - 0.75).abs() < 1e-12);
    assert_eq!(r["paths"]["favored"], "B");

    let manifest: Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest-appendix-demo.json")).unwrap()).unwrap();
    let files = manifest["files"].as_array().unwrap();
    assert_eq!(files.len(), 2);
    for f in files {
        let bytes = std::fs::read(dir.path().join(f["name"].as_str().unwrap())).unwrap();
        assert_eq!(f["bytes"].as_u64().unwrap() as usize, bytes.len());
    }
    assert_eq!(manifest["summary"]["favored"], "B");
}

#[test]
fn critical_points_on_the_gradient_scenario() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin().arg("--output-dir").arg(dir.path()).arg("critical-points").arg(scenario("appendix_k0.toml")).output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let r = results(dir.path(), "critical-points");
    let idx: Vec<u64> = r["search"]["points"].as_array().unwrap().iter().map(|p| p["index"].as_u64().unwrap()).collect();
    assert_eq!(idx, [0, 1, 0]);
    let csv = std::fs::read_to_string(dir.path().join("basins.csv")).unwrap();
    assert!(csv.starts_with("p1,p2,label\n"));
    assert_eq!(csv.lines().count(), 41 * 41 + 1);
}

#[test]
fn resolved_scenario_is_echoed_with_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin().arg("--output-dir").arg(dir.path()).arg("compare-scenarios").arg(scenario("polynomial_custom.toml")).output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = std::fs::read_to_string(dir.path().join("compare-scenarios.json")).unwrap();
    let doc: Value = serde_json::from_str(&text).unwrap();
    let s = &doc["scenario"];
    assert_eq!(s["detection"]["capture_radius"], 0.1);
    assert_eq!(s["detection"]["release_radius"], 0.3);
    assert_eq!(s["critical"]["multistart"], 16);
    assert_eq!(s["grid"]["poisson_tol"], 1e-10);
    assert_eq!(s["seed"], 11);
}

#[test]
fn output_dir_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let env_dir = dir.path().join("from_env");
    let flag_dir = dir.path().join("from_flag");
    let out = bin()
        .env("TATONNEMENT_OUTPUT_DIR", &env_dir)
        .arg("appendix-demo")
        .arg(scenario("appendix_k05.toml"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(env_dir.join("appendix-demo.json").exists());
    let out = bin()
        .env("TATONNEMENT_OUTPUT_DIR", &env_dir)
        .arg("--output-dir")
        .arg(&flag_dir)
        .arg("appendix-demo")
        .arg(scenario("appendix_k05.toml"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(flag_dir.join("appendix-demo.json").exists());

    let out = bin().current_dir(dir.path()).arg("appendix-demo").arg(scenario("appendix_k05.toml")).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(dir.path().join("out/appendix_k05/appendix-demo.json").exists());
}

#[test]
fn scenario_hash_ignores_spelling() {
    let dir = tempfile::tempdir().unwrap();
    let a = write(dir.path(), "a.toml", APPENDIX);
    let spelled = format!(
        "seed = 0\n{}[detection]\ncapture_radius = 0.1\nrelease_radius = 0.3\n[critical]\nmultistart = 16\n",
        APPENDIX.replace("a = 1.0", "a = 1")
    );
    let b = write(dir.path(), "b.toml", &spelled);
    let hash = |p: &Path, out: &str| {
        let o = bin().arg("--output-dir").arg(dir.path().join(out)).arg("appendix-demo").arg(p).output().unwrap();
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        results_hash(&dir.path().join(out))
    };
    assert_eq!(hash(&a, "a"), hash(&b, "b"));
}

fn results_hash(dir: &Path) -> String {
    let m: Value = serde_json::from_str(&std::fs::read_to_string(dir.join("manifest-appendix-demo.json")).unwrap()).unwrap();
    m["scenario_hash"].as_str().unwrap().to_string()
}
