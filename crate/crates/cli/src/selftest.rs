//! Built-in smoke test: a small experiment run end to end in a temporary
//! directory, with one line per stage.

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};
use crate::figures::{emit_plot_data, Figure};
use crate::pipeline::{run_pipeline, RunPlan, Stage, ALL_STAGES};

const SELFTEST_CONFIG: &str = r#"
schema_version = 1
seed = 7

[data]
n = 50
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
members = 5

[counterfactual]
norm = "l2"
[[counterfactual.queries]]
sample_negatives = 2

[stability]
k = 100
sigma2 = 0.25
tau = 0.5

[bounds]
theorems = ["T1", "T2"]
k = [50]
epsilon = [0.2]
ell = [2.0]
trials = 500
n_mc = 5000
"#;

pub fn run_selftest() -> Result<()> {
    let resolved = ExperimentConfig::parse(SELFTEST_CONFIG, None)?;
    let dir = tempfile::tempdir().map_err(|e| CliError::Internal(format!("tempdir: {e}")))?;
    for stage in ALL_STAGES {
        run_pipeline(&resolved, dir.path(), RunPlan::Single(stage))?;
        println!("selftest: stage {:<14} ok", stage.name());
    }
    for figure in [Figure::BoundCurves, Figure::ValidityVsTau, Figure::DivergenceTrace] {
        emit_plot_data(&resolved, dir.path(), figure)?;
    }
    println!("selftest: figures        ok");
    // a full run over the same config must agree with the staged one
    let dir2 = tempfile::tempdir().map_err(|e| CliError::Internal(format!("tempdir: {e}")))?;
    run_pipeline(&resolved, dir2.path(), RunPlan::Through(Stage::Bounds))?;
    for file in ["data.csv", "model.json", "bounds.csv"] {
        let a = std::fs::read(dir.path().join(file))?;
        let b = std::fs::read(dir2.path().join(file))?;
        if a != b {
            return Err(CliError::Internal(format!(
                "staged and full runs disagree on {file}"
            )));
        }
    }
    println!("selftest: determinism    ok");
    Ok(())
}
