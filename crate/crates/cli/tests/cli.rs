//! Binary-level behavior: exit codes, stage resume, and figure exports.

use std::path::Path;
use std::process::Command;

use recourse_cli::config::ExperimentConfig;
use recourse_cli::error::CliError;
use recourse_cli::figures::{emit_plot_data, Figure};
use recourse_cli::pipeline::{run_pipeline, RunPlan, Stage};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_recourse"))
}

fn workspace_config(name: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

const SMALL: &str = r#"
schema_version = 1
seed = 5

[data]
n = 40
norm_bound = 1.0
[data.marginal]
kind = "gaussian"
dim = 2
mean = [0.0, 0.0]
sigma2 = 0.25
[data.labeler]
weights = [2.0, -1.0]

[train]
step_size = 4.0

[perturb]
r = 1
members = 4

[counterfactual]
norm = "l2"
[[counterfactual.queries]]
sample_negatives = 2

[stability]
k = 60
sigma2 = 0.25
tau = 0.5

[bounds]
theorems = ["T2"]
k = [30]
epsilon = [0.3]
ell = [2.0]
trials = 400
n_mc = 2000
"#;

fn write_config(dir: &Path, text: &str) -> std::path::PathBuf {
    let path = dir.join("config.toml");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn missing_config_file_exits_with_config_error() {
    let out = bin()
        .args(["run", "--config", "/nonexistent/config.toml"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_config_key_exits_with_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let bad = SMALL.replace("[train]\nstep_size = 4.0", "[train]\nstep_size = 4.0\nwhat = 1");
    let config = write_config(dir.path(), &bad);
    let out_dir = dir.path().join("out");
    let out = bin()
        .args(["run", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn oversized_perturbation_fails_before_any_compute() {
    let dir = tempfile::tempdir().unwrap();
    let bad = SMALL.replace("r = 1", "r = 41");
    let config = write_config(dir.path(), &bad);
    let out_dir = dir.path().join("out");
    let out = bin()
        .args(["run", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(!out_dir.join("data.csv").exists(), "validation must precede computation");
}

#[test]
fn infeasible_manifold_search_exits_with_code_3() {
    // with ||theta|| <= 1 and data in the unit ball no training point can
    // reach sigmoid(1) < 0.8, so slack 0.3 is unreachable on the manifold
    let dir = tempfile::tempdir().unwrap();
    let text = SMALL
        .replace("norm = \"l2\"", "norm = \"l2\"\nmode = \"manifold\"")
        .replace("sample_negatives = 2", "sample_negatives = 2\nmargin_slack = 0.3");
    let config = write_config(dir.path(), &text);
    let out_dir = dir.path().join("out");
    let out = bin()
        .args(["run", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn verify_bounds_passes_on_the_minimal_config() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let out = bin()
        .args(["verify-bounds", "--config"])
        .arg(workspace_config("minimal.toml"))
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("0 violations"), "stdout: {stdout}");
}

#[test]
fn bound_violation_maps_to_exit_code_4() {
    // the mapping itself; an honest violation is not constructible from
    // sound profile parameters
    assert_eq!(CliError::BoundViolation("x".into()).exit_code(), 4);
    assert_eq!(CliError::Config("x".into()).exit_code(), 2);
    assert_eq!(CliError::Infeasible("x".into()).exit_code(), 3);
    assert_eq!(CliError::Internal("x".into()).exit_code(), 5);
}

#[test]
fn emit_plot_data_requires_its_stage() {
    let dir = tempfile::tempdir().unwrap();
    let resolved = ExperimentConfig::parse(SMALL, None).unwrap();
    // nothing has run: dependency errors name the missing stage
    let err = emit_plot_data(&resolved, dir.path(), Figure::BoundCurves).unwrap_err();
    match err {
        CliError::MissingStage(msg) => assert!(msg.contains("bounds"), "{msg}"),
        other => panic!("expected MissingStage, got {other:?}"),
    }
    // run through stability: validity figure works, bounds figure still missing
    run_pipeline(&resolved, dir.path(), RunPlan::Through(Stage::Stability)).unwrap();
    let path = emit_plot_data(&resolved, dir.path(), Figure::ValidityVsTau).unwrap();
    let text = std::fs::read_to_string(path).unwrap();
    assert!(text.lines().any(|l| l == "tau,cohort_size,validity_rate"));
    assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), 22); // header + 21 taus
    assert!(matches!(
        emit_plot_data(&resolved, dir.path(), Figure::BoundCurves),
        Err(CliError::MissingStage(_))
    ));
}

#[test]
fn figures_reshape_run_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let resolved = ExperimentConfig::parse(SMALL, None).unwrap();
    run_pipeline(&resolved, dir.path(), RunPlan::Through(Stage::Bounds)).unwrap();

    let path = emit_plot_data(&resolved, dir.path(), Figure::BoundCurves).unwrap();
    let text = std::fs::read_to_string(path).unwrap();
    let rows: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows[0], "theorem,k,epsilon,ell,rhs,freq");
    assert_eq!(rows.len(), 2); // header + one T2 grid point

    let path = emit_plot_data(&resolved, dir.path(), Figure::DivergenceTrace).unwrap();
    let text = std::fs::read_to_string(path).unwrap();
    let rows: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows[0], "t,delta_t,analytic_bound_prefix");
    assert_eq!(rows.len(), 1 + 40 + 1); // header + n+1 iterates
}

#[test]
fn single_stage_resume_matches_full_run() {
    let resolved = ExperimentConfig::parse(SMALL, None).unwrap();
    let full = tempfile::tempdir().unwrap();
    run_pipeline(&resolved, full.path(), RunPlan::Through(Stage::Bounds)).unwrap();

    let staged = tempfile::tempdir().unwrap();
    for stage in recourse_cli::pipeline::ALL_STAGES {
        run_pipeline(&resolved, staged.path(), RunPlan::Single(stage)).unwrap();
    }
    for file in [
        "data.csv",
        "model.json",
        "trace.csv",
        "divergence.csv",
        "profile.json",
        "counterfactuals.csv",
        "stability.json",
        "bound_params.json",
        "bounds.csv",
        "manifest.json",
    ] {
        let a = std::fs::read(full.path().join(file)).unwrap();
        let b = std::fs::read(staged.path().join(file)).unwrap();
        assert_eq!(a, b, "{file} differs between full and staged runs");
    }
}

#[test]
fn stage_resume_rejects_artifacts_from_another_config() {
    let dir = tempfile::tempdir().unwrap();
    let resolved = ExperimentConfig::parse(SMALL, None).unwrap();
    run_pipeline(&resolved, dir.path(), RunPlan::Single(Stage::Synth)).unwrap();
    // same directory, different seed: the data artifact no longer matches
    let other = ExperimentConfig::parse(SMALL, Some(6)).unwrap();
    let err = run_pipeline(&other, dir.path(), RunPlan::Single(Stage::Train)).unwrap_err();
    assert!(matches!(err, CliError::Config(_)), "{err:?}");
}

#[test]
fn seed_override_flows_into_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMALL);
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    for (out, seed) in [(&out_a, "5"), (&out_b, "99")] {
        let status = bin()
            .args(["run", "--config"])
            .arg(&config)
            .arg("--out")
            .arg(out)
            .args(["--seed", seed, "--stage", "synth"])
            .status()
            .unwrap();
        assert!(status.success());
    }
    let a = std::fs::read_to_string(out_a.join("data.csv")).unwrap();
    let b = std::fs::read_to_string(out_b.join("data.csv")).unwrap();
    assert_ne!(a, b);
    assert!(a.contains("# seed=5"));
    assert!(b.contains("# seed=99"));
}

#[test]
fn batch_query_file_feeds_the_counterfactual_stage() {
    let dir = tempfile::tempdir().unwrap();
    let queries = dir.path().join("queries.csv");
    std::fs::write(&queries, "x_0,x_1\n-0.4,0.1\n-0.2,-0.3\n").unwrap();
    let text = SMALL.replace(
        "sample_negatives = 2",
        &format!("points_file = \"{}\"", queries.display()),
    );
    let resolved = ExperimentConfig::parse(&text, None).unwrap();
    run_pipeline(&resolved, dir.path(), RunPlan::Through(Stage::Counterfactual)).unwrap();
    let rows = recourse_cli::pipeline::read_counterfactual_rows(&resolved, dir.path()).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].x, vec![-0.4, 0.1]);
    assert!(rows.iter().all(|r| r.valid));
}

#[test]
fn selftest_succeeds() {
    let out = bin().arg("selftest").output().unwrap();
    assert_eq!(out.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("determinism    ok"));
}
