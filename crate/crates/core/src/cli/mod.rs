//! Command-line front end.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numerical failure,
//! 4 I/O error.

pub mod run;
pub mod scenario;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use run::{execute, RunOutput};
pub use scenario::{parse_scenario, validate_scenario, Experiment, Scenario, Violation};

/// Environment variable overriding the default output directory.
pub const OUTPUT_DIR_ENV: &str = "TATONNEMENT_OUTPUT_DIR";

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_IO: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid scenario:\n{}", format_violations(.0))]
    Config(Vec<Violation>),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("I/O error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Numerical(_) => EXIT_NUMERICAL,
            CliError::Io(_) => EXIT_IO,
        }
    }
}

fn format_violations(v: &[Violation]) -> String {
    v.iter().map(|v| format!("  {v}")).collect::<Vec<_>>().join("\n")
}

#[derive(Debug, Parser)]
#[command(name = "tatonnement", version, about = "Excess-demand dynamics experiments driven by TOML scenarios")]
pub struct Args {
    /// Directory for result files (overrides TATONNEMENT_OUTPUT_DIR; default ./out/<scenario name>).
    #[arg(long, global = true)]
    pub output_dir: Option<PathBuf>,
    /// Worker threads for ensemble work; results do not depend on it.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Locate and classify critical points (optionally basins).
    CriticalPoints { scenario: PathBuf },
    /// Gridded potential/solenoidal split.
    Decompose { scenario: PathBuf },
    /// One deterministic or noisy trajectory.
    Simulate { scenario: PathBuf },
    /// Well-to-well transition events of one long noisy run.
    Transitions { scenario: PathBuf },
    /// Mean first-passage times over a list of noise levels.
    Mfpt { scenario: PathBuf },
    /// Action and reversal asymmetry of a given path.
    PathAction { scenario: PathBuf },
    /// Minimum-action paths in both directions between two critical points.
    MinimizeAction { scenario: PathBuf },
    /// Double-well example: equilibria and the two L-shaped paths.
    AppendixDemo { scenario: PathBuf },
    /// Critical points under baseline and alternative parameters.
    CompareScenarios { scenario: PathBuf },
    /// Check a scenario without running anything.
    Validate {
        scenario: PathBuf,
        /// Also check the sections these experiments need.
        #[arg(long = "experiment", value_parser = parse_experiment)]
        experiments: Vec<Experiment>,
    },
}

fn parse_experiment(s: &str) -> Result<Experiment, String> {
    Experiment::from_name(s).ok_or_else(|| format!("unknown experiment {s:?}"))
}

impl Command {
    fn experiment(&self) -> Option<Experiment> {
        Some(match self {
            Command::CriticalPoints { .. } => Experiment::CriticalPoints,
            Command::Decompose { .. } => Experiment::Decompose,
            Command::Simulate { .. } => Experiment::Simulate,
            Command::Transitions { .. } => Experiment::Transitions,
            Command::Mfpt { .. } => Experiment::Mfpt,
            Command::PathAction { .. } => Experiment::PathAction,
            Command::MinimizeAction { .. } => Experiment::MinimizeAction,
            Command::AppendixDemo { .. } => Experiment::AppendixDemo,
            Command::CompareScenarios { .. } => Experiment::CompareScenarios,
            Command::Validate { .. } => return None,
        })
    }

    fn scenario_path(&self) -> &Path {
        match self {
            Command::CriticalPoints { scenario }
            | Command::Decompose { scenario }
            | Command::Simulate { scenario }
            | Command::Transitions { scenario }
            | Command::Mfpt { scenario }
            | Command::PathAction { scenario }
            | Command::MinimizeAction { scenario }
            | Command::AppendixDemo { scenario }
            | Command::CompareScenarios { scenario }
            | Command::Validate { scenario, .. } => scenario,
        }
    }
}

/// Parses `args` (including the program name), runs, and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args = match Args::try_parse_from(args) {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let path = args.command.scenario_path().to_path_buf();
    let text = match fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: cannot read {}: {e}", path.display());
            return EXIT_IO;
        }
    };

    let Some(experiment) = args.command.experiment() else {
        let Command::Validate { experiments, .. } = &args.command else { unreachable!() };
        let violations = validate_scenario(&text, experiments);
        if violations.is_empty() {
            println!("{}: no violations", path.display());
            return EXIT_OK;
        }
        println!("{}: {} violation(s)", path.display(), violations.len());
        for v in &violations {
            println!("  {v}");
        }
        return EXIT_CONFIG;
    };

    let scenario = match parse_scenario(&text, &[experiment]) {
        Ok(s) => s,
        Err(v) => {
            eprintln!("error: {}", CliError::Config(v));
            return EXIT_CONFIG;
        }
    };
    let out_dir = resolve_output_dir(args.output_dir, std::env::var_os(OUTPUT_DIR_ENV), &scenario.name);
    match run_experiment(experiment, &scenario, &out_dir, args.workers) {
        Ok(files) => {
            for f in files {
                println!("{}", out_dir.join(f).display());
            }
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Flag, then environment variable, then `./out/<scenario name>`.
pub fn resolve_output_dir(flag: Option<PathBuf>, env: Option<OsString>, scenario_name: &str) -> PathBuf {
    flag.or_else(|| env.filter(|v| !v.is_empty()).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out").join(scenario_name))
}

/// Runs one experiment and writes its result files plus a manifest into
/// `out_dir`. Returns the written file names, manifest last.
pub fn run_experiment(
    experiment: Experiment,
    scenario: &Scenario,
    out_dir: &Path,
    workers: Option<usize>,
) -> Result<Vec<String>, CliError> {
    let field = scenario
        .build_field()
        .map_err(|e| CliError::Config(vec![Violation { path: "field".into(), message: e }]))?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(w) = workers {
        if w == 0 {
            return Err(CliError::Config(vec![Violation {
                path: "--workers".into(),
                message: "must be ≥ 1".into(),
            }]));
        }
        pool = pool.num_threads(w);
    }
    let pool = pool.build().map_err(|e| CliError::Io(format!("worker pool: {e}")))?;

    let started = chrono::Utc::now();
    let output = pool.install(|| execute(experiment, scenario, &field))?;
    let finished = chrono::Utc::now();

    fs::create_dir_all(out_dir).map_err(|e| CliError::Io(format!("{}: {e}", out_dir.display())))?;
    let mut inventory = Vec::new();
    let mut names = Vec::new();
    for (name, contents) in &output.files {
        let path = out_dir.join(name);
        fs::write(&path, contents).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        inventory.push(json!({
            "name": name,
            "bytes": contents.len(),
            "sha256": hex::encode(Sha256::digest(contents.as_bytes())),
        }));
        names.push(name.clone());
    }
    let manifest = json!({
        "artifact": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "experiment": experiment.name(),
        "scenario_name": scenario.name,
        "scenario_hash": scenario.hash(),
        "started_at": started.to_rfc3339(),
        "finished_at": finished.to_rfc3339(),
        "workers": workers.unwrap_or_else(|| pool.current_num_threads()),
        "files": inventory,
        "summary": output.summary,
    });
    let name = format!("manifest-{}.json", experiment.name());
    let path = out_dir.join(&name);
    let mut text = serde_json::to_string_pretty(&manifest).expect("json");
    text.push('\n');
    fs::write(&path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    names.push(name);
    Ok(names)
}
