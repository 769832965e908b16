//! The experiment pipeline: synthesize data, train, perturb, profile,
//! generate counterfactuals, score stability, verify bounds.
//!
//! Stages run in a fixed order and communicate exclusively through files in
//! the output directory, so a stage can be re-run in isolation and resumed
//! runs produce byte-identical artifacts. Every artifact embeds the config
//! hash and the root seed; readers reject artifacts from a different
//! config. Wall-clock timings go to `timings.txt`, which is the one file
//! excluded from the determinism contract.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use recourse_core::bounds::{lhs_event_frequency, BoundQuery};
use recourse_core::counterfactual::{
    find_counterfactual_free, find_counterfactual_manifold, CounterfactualQuery,
};
use recourse_core::distributions::{kappa, Distribution, KappaEstimate};
use recourse_core::modelchange::{
    check_nomc, estimate_profile, generate_ensemble, EnsembleGenerator, GeneratorKind,
    ModelChangeEnsemble, ModelChangeProfile, NomcReport, PerturbationSpec, ReplacementSource,
    RetrainDiagnostics, RetrainSetup,
};
use recourse_core::models::{FeatureVector, Model, DECISION_THRESHOLD};
use recourse_core::rng::derive_seed;
use recourse_core::stability::{evaluate as evaluate_stability, StabilityConfig};
use recourse_core::training::{gd_train, BoundedProblem, LabeledExample};

use crate::config::{CounterfactualMode, ResolvedConfig, TheoremName};
use crate::error::{CliError, Result};

pub const F_DATA: &str = "data.csv";
pub const F_MODEL: &str = "model.json";
pub const F_TRACE: &str = "trace.csv";
pub const F_ENSEMBLE_MANIFEST: &str = "ensemble/manifest.json";
pub const F_DIVERGENCE: &str = "divergence.csv";
pub const F_PROFILE: &str = "profile.json";
pub const F_COUNTERFACTUALS: &str = "counterfactuals.csv";
pub const F_STABILITY: &str = "stability.json";
pub const F_BOUND_PARAMS: &str = "bound_params.json";
pub const F_BOUNDS: &str = "bounds.csv";
pub const F_MANIFEST: &str = "manifest.json";
pub const F_TIMINGS: &str = "timings.txt";

/// Pipeline stages in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Synth,
    Train,
    Ensemble,
    Profile,
    Counterfactual,
    Stability,
    Bounds,
}

pub const ALL_STAGES: [Stage; 7] = [
    Stage::Synth,
    Stage::Train,
    Stage::Ensemble,
    Stage::Profile,
    Stage::Counterfactual,
    Stage::Stability,
    Stage::Bounds,
];

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Train => "train",
            Stage::Ensemble => "ensemble",
            Stage::Profile => "profile",
            Stage::Counterfactual => "counterfactual",
            Stage::Stability => "stability",
            Stage::Bounds => "bounds",
        }
    }

    pub fn from_name(name: &str) -> Result<Stage> {
        ALL_STAGES
            .iter()
            .copied()
            .find(|s| s.name() == name)
            .ok_or_else(|| {
                CliError::Config(format!(
                    "unknown stage '{name}'; expected one of synth, train, ensemble, profile, counterfactual, stability, bounds"
                ))
            })
    }

    fn outputs(&self) -> &'static [&'static str] {
        match self {
            Stage::Synth => &[F_DATA],
            Stage::Train => &[F_MODEL, F_TRACE],
            Stage::Ensemble => &[F_ENSEMBLE_MANIFEST, F_DIVERGENCE],
            Stage::Profile => &[F_PROFILE],
            Stage::Counterfactual => &[F_COUNTERFACTUALS],
            Stage::Stability => &[F_STABILITY],
            Stage::Bounds => &[F_BOUND_PARAMS, F_BOUNDS],
        }
    }
}

/// What to execute.
#[derive(Debug, Clone, Copy)]
pub enum RunPlan {
    /// All stages up to and including the given one.
    Through(Stage),
    /// Exactly one stage; upstream artifacts must already exist.
    Single(Stage),
}

#[derive(Debug, Clone, Serialize)]
pub struct StageRecord {
    pub name: &'static str,
    pub outputs: Vec<String>,
}

/// Deterministic summary of a run; timings live in `timings.txt` instead.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub version: String,
    pub seed: u64,
    pub stages: Vec<StageRecord>,
}

struct Ctx<'a> {
    cfg: &'a ResolvedConfig,
    out: &'a Path,
}

impl<'a> Ctx<'a> {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn header_comment(&self) -> String {
        format!(
            "# config_hash={}\n# seed={}\n",
            self.cfg.hash, self.cfg.config.seed
        )
    }
}

fn fmt_f(x: f64) -> String {
    format!("{x}")
}

/// Run the pipeline. Returns the manifest describing all artifacts present
/// after this invocation.
pub fn run_pipeline(cfg: &ResolvedConfig, out: &Path, plan: RunPlan) -> Result<RunManifest> {
    std::fs::create_dir_all(out)?;
    std::fs::create_dir_all(out.join("ensemble"))?;
    let ctx = Ctx { cfg, out };
    let stages: Vec<Stage> = match plan {
        RunPlan::Through(last) => ALL_STAGES.iter().copied().filter(|s| *s <= last).collect(),
        RunPlan::Single(stage) => vec![stage],
    };
    let mut timings = String::new();
    for stage in &stages {
        let start = std::time::Instant::now();
        run_stage(&ctx, *stage)?;
        let _ = writeln!(timings, "{} {} ms", stage.name(), start.elapsed().as_millis());
    }
    std::fs::write(ctx.path(F_TIMINGS), timings)?;
    let manifest = build_manifest(&ctx);
    write_json(&ctx.path(F_MANIFEST), &manifest)?;
    Ok(manifest)
}

fn build_manifest(ctx: &Ctx<'_>) -> RunManifest {
    let mut stages = Vec::new();
    for stage in ALL_STAGES {
        let outputs: Vec<String> = stage
            .outputs()
            .iter()
            .filter(|f| ctx.path(f).exists())
            .map(|f| f.to_string())
            .collect();
        if !outputs.is_empty() {
            stages.push(StageRecord { name: stage.name(), outputs });
        }
    }
    RunManifest {
        config_hash: ctx.cfg.hash.clone(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: ctx.cfg.config.seed,
        stages,
    }
}

fn run_stage(ctx: &Ctx<'_>, stage: Stage) -> Result<()> {
    match stage {
        Stage::Synth => stage_synth(ctx),
        Stage::Train => stage_train(ctx),
        Stage::Ensemble => stage_ensemble(ctx),
        Stage::Profile => stage_profile(ctx),
        Stage::Counterfactual => stage_counterfactual(ctx),
        Stage::Stability => stage_stability(ctx),
        Stage::Bounds => stage_bounds(ctx),
    }
}

// --- JSON wrappers -------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct ModelArtifact {
    config_hash: String,
    seed: u64,
    model: Model,
}

#[derive(Serialize, Deserialize)]
struct EnsembleManifest {
    config_hash: String,
    seed: u64,
    kind: GeneratorKind,
    /// Generator parameters, for a self-contained artifact.
    r: usize,
    positions: Option<Vec<usize>>,
    members: usize,
    member_files: Vec<String>,
    retrain: Option<RetrainDiagnostics>,
}

#[derive(Serialize, Deserialize)]
struct ProfileArtifact {
    config_hash: String,
    seed: u64,
    profile: ModelChangeProfile,
}

#[derive(Serialize, Deserialize)]
struct StabilityArtifact {
    config_hash: String,
    seed: u64,
    rows: Vec<StabilityRow>,
}

/// One stability record per counterfactual, including its validity under
/// every ensemble member.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StabilityRow {
    pub query: usize,
    pub group: usize,
    pub margin_slack: f64,
    /// The counterfactual point that was scored.
    pub x: Vec<f64>,
    pub k: usize,
    pub sigma2: f64,
    pub tau: f64,
    pub r: Option<f64>,
    pub rhat: f64,
    pub pass: bool,
    /// Fraction of ensemble members still classifying the point positive.
    pub validity_rate: f64,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct BoundParams {
    config_hash: String,
    seed: u64,
    evaluation_point: Vec<f64>,
    kappa: Option<KappaEstimate2>,
    delta: f64,
    nu: f64,
    gamma_t2: f64,
    gamma_t1: f64,
    gamma_m: f64,
    sigma2: f64,
    nomc: Option<NomcReport>,
    /// Theorems skipped (with reasons) rather than verified.
    skipped: Vec<String>,
}

/// Serializable mirror of the kappa estimate (keeps the artifact readable
/// on its own).
#[derive(Serialize, Deserialize)]
struct KappaEstimate2 {
    value: f64,
    stderr: f64,
    n: usize,
    reliable: bool,
}

impl From<KappaEstimate> for KappaEstimate2 {
    fn from(k: KappaEstimate) -> Self {
        KappaEstimate2 { value: k.value, stderr: k.stderr, n: k.n, reliable: k.reliable }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, stage: Stage) -> Result<T> {
    if !path.exists() {
        return Err(CliError::MissingStage(format!(
            "{} (expected file {})",
            stage.name(),
            path.display()
        )));
    }
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

fn check_hash(ctx: &Ctx<'_>, artifact_hash: &str, file: &str) -> Result<()> {
    if artifact_hash != ctx.cfg.hash {
        return Err(CliError::Config(format!(
            "{file} was produced by a different config (hash {artifact_hash}, current {})",
            ctx.cfg.hash
        )));
    }
    Ok(())
}

fn read_csv_lines(path: &Path, stage: Stage, ctx: &Ctx<'_>) -> Result<Vec<String>> {
    if !path.exists() {
        return Err(CliError::MissingStage(format!(
            "{} (expected file {})",
            stage.name(),
            path.display()
        )));
    }
    let text = std::fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for line in text.lines() {
        if let Some(hash) = line.strip_prefix("# config_hash=") {
            check_hash(ctx, hash, &path.display().to_string())?;
            continue;
        }
        if line.starts_with('#') || line.is_empty() {
            continue;
        }
        rows.push(line.to_string());
    }
    Ok(rows)
}

fn parse_f(field: &str) -> Result<f64> {
    field
        .parse::<f64>()
        .map_err(|e| CliError::Internal(format!("bad float '{field}' in artifact: {e}")))
}

// --- stage: synth --------------------------------------------------------

fn stage_synth(ctx: &Ctx<'_>) -> Result<()> {
    let cfg = &ctx.cfg.config;
    let dist = ctx.cfg.data_distribution()?;
    let seed = derive_seed(cfg.seed, "synth", 0);
    let data = dist.sample(cfg.data.n, seed, Some(cfg.data.norm_bound))?;
    let dim = ctx.cfg.dim();
    let mut text = ctx.header_comment();
    let mut header = String::from("index");
    for a in 0..dim {
        let _ = write!(header, ",x_{a}");
    }
    header.push_str(",y");
    text.push_str(&header);
    text.push('\n');
    for (i, ex) in data.iter().enumerate() {
        let mut row = i.to_string();
        for c in ex.x.coords() {
            let _ = write!(row, ",{}", fmt_f(*c));
        }
        let _ = write!(row, ",{}", if ex.y > 0.0 { 1 } else { -1 });
        text.push_str(&row);
        text.push('\n');
    }
    std::fs::write(ctx.path(F_DATA), text)?;
    Ok(())
}

fn read_data(ctx: &Ctx<'_>) -> Result<Vec<LabeledExample>> {
    let rows = read_csv_lines(&ctx.path(F_DATA), Stage::Synth, ctx)?;
    let dim = ctx.cfg.dim();
    let mut out = Vec::new();
    for row in rows.iter().skip(1) {
        let fields: Vec<&str> = row.split(',').collect();
        if fields.len() != dim + 2 {
            return Err(CliError::Internal(format!("bad data row: {row}")));
        }
        let coords: Vec<f64> = fields[1..=dim]
            .iter()
            .map(|f| parse_f(f))
            .collect::<Result<_>>()?;
        let y: f64 = parse_f(fields[dim + 1])?;
        out.push(LabeledExample::new(FeatureVector::new(coords).map_err(CliError::from)?, y)?);
    }
    Ok(out)
}

// --- stage: train --------------------------------------------------------

fn stage_train(ctx: &Ctx<'_>) -> Result<()> {
    let cfg = &ctx.cfg.config;
    let data = read_data(ctx)?;
    let problem = BoundedProblem::new(cfg.data.norm_bound)?;
    let trace = gd_train(
        &problem,
        &data,
        &ctx.cfg.step_sizes(),
        &ctx.cfg.theta0(),
        cfg.train.allow_unsafe_steps,
    )?;
    let model = trace.to_model()?;
    write_json(
        &ctx.path(F_MODEL),
        &ModelArtifact { config_hash: ctx.cfg.hash.clone(), seed: cfg.seed, model },
    )?;
    let mut buf = Vec::new();
    buf.extend_from_slice(ctx.header_comment().as_bytes());
    trace.write_csv(&mut buf, None)?;
    std::fs::write(ctx.path(F_TRACE), buf)?;
    Ok(())
}

fn read_model(ctx: &Ctx<'_>) -> Result<Model> {
    let artifact: ModelArtifact = read_json(&ctx.path(F_MODEL), Stage::Train)?;
    check_hash(ctx, &artifact.config_hash, F_MODEL)?;
    Ok(artifact.model)
}

// --- stage: ensemble -----------------------------------------------------

fn stage_ensemble(ctx: &Ctx<'_>) -> Result<()> {
    let cfg = &ctx.cfg.config;
    let data = read_data(ctx)?;
    let trained = read_model(ctx)?;
    let problem = BoundedProblem::new(cfg.data.norm_bound)?;
    let step_sizes = ctx.cfg.step_sizes();
    let theta0 = ctx.cfg.theta0();
    let perturbation = PerturbationSpec {
        r: cfg.perturb.r,
        positions: cfg.perturb.positions.clone(),
        source: ReplacementSource::Resample {
            dist: ctx.cfg.replacement_distribution()?,
            norm_bound: cfg.data.norm_bound,
        },
    };
    let generator = EnsembleGenerator::RetrainPerturbed {
        setup: RetrainSetup {
            problem: &problem,
            data: &data,
            step_sizes: &step_sizes,
            theta0: &theta0,
        },
        perturbation,
    };
    let seed = derive_seed(cfg.seed, "ensemble", 0);
    let ens = generate_ensemble(&generator, cfg.perturb.members, seed)?;
    if ens.original != trained {
        return Err(CliError::Internal(
            "retrained original does not match the trained model artifact".into(),
        ));
    }

    let mut member_files = Vec::with_capacity(ens.members.len());
    for (j, member) in ens.members.iter().enumerate() {
        let name = format!("ensemble/member_{j:03}.json");
        write_json(
            &ctx.path(&name),
            &ModelArtifact {
                config_hash: ctx.cfg.hash.clone(),
                seed: cfg.seed,
                model: member.clone(),
            },
        )?;
        member_files.push(name);
    }
    let manifest = EnsembleManifest {
        config_hash: ctx.cfg.hash.clone(),
        seed,
        kind: ens.kind,
        r: cfg.perturb.r,
        positions: cfg.perturb.positions.clone(),
        members: cfg.perturb.members,
        member_files,
        retrain: ens.retrain.clone(),
    };
    write_json(&ctx.path(F_ENSEMBLE_MANIFEST), &manifest)?;

    // divergence trace of the first member
    let diag = ens
        .retrain
        .as_ref()
        .ok_or_else(|| CliError::Internal("retrain ensemble without diagnostics".into()))?;
    let mut text = ctx.header_comment();
    text.push_str("t,delta_t,analytic_bound_prefix\n");
    for (t, (d, b)) in diag.first_divergence.iter().zip(&diag.first_bound_prefix).enumerate() {
        let _ = writeln!(text, "{t},{},{}", fmt_f(*d), fmt_f(*b));
    }
    std::fs::write(ctx.path(F_DIVERGENCE), text)?;
    Ok(())
}

fn read_ensemble(ctx: &Ctx<'_>) -> Result<ModelChangeEnsemble> {
    let manifest: EnsembleManifest = read_json(&ctx.path(F_ENSEMBLE_MANIFEST), Stage::Ensemble)?;
    check_hash(ctx, &manifest.config_hash, F_ENSEMBLE_MANIFEST)?;
    let original = read_model(ctx)?;
    let mut members = Vec::with_capacity(manifest.member_files.len());
    for file in &manifest.member_files {
        let artifact: ModelArtifact = read_json(&ctx.path(file), Stage::Ensemble)?;
        check_hash(ctx, &artifact.config_hash, file)?;
        members.push(artifact.model);
    }
    Ok(ModelChangeEnsemble {
        original,
        members,
        kind: manifest.kind,
        seed: manifest.seed,
        retrain: manifest.retrain,
    })
}

// --- stage: profile ------------------------------------------------------

fn stage_profile(ctx: &Ctx<'_>) -> Result<()> {
    let cfg = &ctx.cfg.config;
    let ens = read_ensemble(ctx)?;
    let mu = cfg.data.marginal.build()?;
    let profile = estimate_profile(&ens, &mu, cfg.bounds.n_mc, derive_seed(cfg.seed, "profile", 0))?;
    write_json(
        &ctx.path(F_PROFILE),
        &ProfileArtifact { config_hash: ctx.cfg.hash.clone(), seed: cfg.seed, profile },
    )?;
    Ok(())
}

fn read_profile(ctx: &Ctx<'_>) -> Result<ModelChangeProfile> {
    let artifact: ProfileArtifact = read_json(&ctx.path(F_PROFILE), Stage::Profile)?;
    check_hash(ctx, &artifact.config_hash, F_PROFILE)?;
    Ok(artifact.profile)
}

// --- stage: counterfactual ----------------------------------------------

#[derive(Debug, Clone)]
pub struct CfRow {
    pub query: usize,
    pub group: usize,
    pub margin_slack: f64,
    pub x: Vec<f64>,
    pub xbar: Vec<f64>,
    pub cost: f64,
    pub valid: bool,
    pub iterations: usize,
    pub candidates: usize,
}

fn stage_counterfactual(ctx: &Ctx<'_>) -> Result<()> {
    let cfg = &ctx.cfg.config;
    let model = read_model(ctx)?;
    let marginal = cfg.data.marginal.build()?;
    let manifold: Option<Vec<FeatureVector>> = match cfg.counterfactual.mode {
        CounterfactualMode::Free => None,
        CounterfactualMode::Manifold => {
            Some(read_data(ctx)?.into_iter().map(|ex| ex.x).collect())
        }
    };

    let mut rows: Vec<CfRow> = Vec::new();
    let mut query_index = 0usize;
    for (g, group) in cfg.counterfactual.queries.iter().enumerate() {
        let raw_points: Option<Vec<Vec<f64>>> = if let Some(pts) = &group.points {
            Some(pts.clone())
        } else if let Some(file) = &group.points_file {
            Some(read_query_points_csv(std::path::Path::new(file), ctx.cfg.dim())?)
        } else {
            None
        };
        let points: Vec<FeatureVector> = match (raw_points, &group.sample_negatives) {
            (Some(pts), None) => {
                let mut out = Vec::with_capacity(pts.len());
                for p in pts {
                    let x = FeatureVector::new(p).map_err(CliError::from)?;
                    if model.predict(&x)? >= DECISION_THRESHOLD {
                        return Err(CliError::Config(format!(
                            "counterfactual.queries[{g}]: explicit point is not negatively classified"
                        )));
                    }
                    out.push(x);
                }
                out
            }
            (None, Some(count)) => sample_negatives(&model, &marginal, *count, derive_seed(cfg.seed, "cf-group", g as u64))?,
            _ => unreachable!("validated config"),
        };
        for x in points {
            let query = CounterfactualQuery::new(x.clone(), cfg.counterfactual.norm, group.margin_slack)?;
            let result = match &manifold {
                None => find_counterfactual_free(&model, &query)?,
                Some(set) => find_counterfactual_manifold(&model, &query, set)?,
            };
            rows.push(CfRow {
                query: query_index,
                group: g,
                margin_slack: group.margin_slack,
                x: x.coords().to_vec(),
                xbar: result.xbar.coords().to_vec(),
                cost: result.cost,
                valid: result.valid,
                iterations: result.iterations,
                candidates: result.candidates_examined,
            });
            query_index += 1;
        }
    }

    let dim = ctx.cfg.dim();
    let mut text = ctx.header_comment();
    let mut header = String::from("query,group,margin_slack");
    for a in 0..dim {
        let _ = write!(header, ",x_{a}");
    }
    for a in 0..dim {
        let _ = write!(header, ",xbar_{a}");
    }
    header.push_str(",cost,valid,iterations,candidates");
    text.push_str(&header);
    text.push('\n');
    for r in &rows {
        let mut row = format!("{},{},{}", r.query, r.group, fmt_f(r.margin_slack));
        for c in &r.x {
            let _ = write!(row, ",{}", fmt_f(*c));
        }
        for c in &r.xbar {
            let _ = write!(row, ",{}", fmt_f(*c));
        }
        let _ = write!(
            row,
            ",{},{},{},{}",
            fmt_f(r.cost),
            r.valid,
            r.iterations,
            r.candidates
        );
        text.push_str(&row);
        text.push('\n');
    }
    std::fs::write(ctx.path(F_COUNTERFACTUALS), text)?;
    Ok(())
}

/// Parse a batch query file: one comma-separated point per row; comment
/// lines and an optional header row are skipped.
fn read_query_points_csv(path: &Path, dim: usize) -> Result<Vec<Vec<f64>>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read query file {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with("x_0") {
            continue;
        }
        let coords: Vec<f64> = line
            .split(',')
            .map(|f| {
                f.trim()
                    .parse::<f64>()
                    .map_err(|e| CliError::Config(format!("bad query coordinate '{f}': {e}")))
            })
            .collect::<Result<_>>()?;
        if coords.len() != dim {
            return Err(CliError::Config(format!(
                "query row has {} coordinates, expected {dim}",
                coords.len()
            )));
        }
        out.push(coords);
    }
    if out.is_empty() {
        return Err(CliError::Config(format!(
            "query file {} holds no points",
            path.display()
        )));
    }
    Ok(out)
}

/// Draw points from the marginal until `count` negatively classified ones
/// are found.
fn sample_negatives(
    model: &Model,
    marginal: &Distribution,
    count: usize,
    seed: u64,
) -> Result<Vec<FeatureVector>> {
    let mut out = Vec::with_capacity(count);
    for attempt in 0..64u64 {
        let batch = marginal.sample(count * 4, derive_seed(seed, "batch", attempt));
        for x in batch {
            if model.predict(&x)? < DECISION_THRESHOLD {
                out.push(x);
                if out.len() == count {
                    return Ok(out);
                }
            }
        }
    }
    Err(CliError::Config(format!(
        "could not sample {count} negatively classified points; the model rejects almost nothing"
    )))
}

fn read_counterfactuals(ctx: &Ctx<'_>) -> Result<Vec<CfRow>> {
    let rows = read_csv_lines(&ctx.path(F_COUNTERFACTUALS), Stage::Counterfactual, ctx)?;
    let dim = ctx.cfg.dim();
    let mut out = Vec::new();
    for row in rows.iter().skip(1) {
        let fields: Vec<&str> = row.split(',').collect();
        if fields.len() != 3 + 2 * dim + 4 {
            return Err(CliError::Internal(format!("bad counterfactual row: {row}")));
        }
        let query: usize = fields[0]
            .parse()
            .map_err(|_| CliError::Internal("bad query index".into()))?;
        let group: usize = fields[1]
            .parse()
            .map_err(|_| CliError::Internal("bad group index".into()))?;
        let margin_slack = parse_f(fields[2])?;
        let x: Vec<f64> = fields[3..3 + dim].iter().map(|f| parse_f(f)).collect::<Result<_>>()?;
        let xbar: Vec<f64> = fields[3 + dim..3 + 2 * dim]
            .iter()
            .map(|f| parse_f(f))
            .collect::<Result<_>>()?;
        let cost = parse_f(fields[3 + 2 * dim])?;
        let valid = fields[3 + 2 * dim + 1] == "true";
        let iterations: usize = fields[3 + 2 * dim + 2]
            .parse()
            .map_err(|_| CliError::Internal("bad iterations".into()))?;
        let candidates: usize = fields[3 + 2 * dim + 3]
            .parse()
            .map_err(|_| CliError::Internal("bad candidates".into()))?;
        out.push(CfRow {
            query,
            group,
            margin_slack,
            x,
            xbar,
            cost,
            valid,
            iterations,
            candidates,
        });
    }
    Ok(out)
}

// --- stage: stability ----------------------------------------------------

fn stage_stability(ctx: &Ctx<'_>) -> Result<()> {
    let cfg = &ctx.cfg.config;
    let model = read_model(ctx)?;
    let profile = read_profile(ctx)?;
    let ens = read_ensemble(ctx)?;
    let cf = read_counterfactuals(ctx)?;

    let mut rows = Vec::with_capacity(cf.len());
    for r in &cf {
        let xbar = FeatureVector::new(r.xbar.clone()).map_err(CliError::from)?;
        let seed = derive_seed(cfg.seed, "stability", r.query as u64);
        let stab_cfg = StabilityConfig::gaussian(cfg.stability.k, cfg.stability.sigma2, cfg.stability.tau, seed)?;
        let report = evaluate_stability(&model, &xbar, &stab_cfg, Some(profile.gamma))?;
        let mut valid_members = 0usize;
        for member in &ens.members {
            if member.predict(&xbar)? >= DECISION_THRESHOLD {
                valid_members += 1;
            }
        }
        rows.push(StabilityRow {
            query: r.query,
            group: r.group,
            margin_slack: r.margin_slack,
            x: r.xbar.clone(),
            k: cfg.stability.k,
            sigma2: cfg.stability.sigma2,
            tau: cfg.stability.tau,
            r: report.r,
            rhat: report.rhat,
            pass: report.pass,
            validity_rate: valid_members as f64 / ens.members.len() as f64,
            seed,
        });
    }
    write_json(
        &ctx.path(F_STABILITY),
        &StabilityArtifact { config_hash: ctx.cfg.hash.clone(), seed: cfg.seed, rows },
    )?;
    Ok(())
}

pub fn read_stability(ctx_cfg: &ResolvedConfig, out: &Path) -> Result<Vec<StabilityRow>> {
    let ctx = Ctx { cfg: ctx_cfg, out };
    let artifact: StabilityArtifact = read_json(&ctx.path(F_STABILITY), Stage::Stability)?;
    check_hash(&ctx, &artifact.config_hash, F_STABILITY)?;
    Ok(artifact.rows)
}

// --- stage: bounds -------------------------------------------------------

fn stage_bounds(ctx: &Ctx<'_>) -> Result<()> {
    let cfg = &ctx.cfg.config;
    let model = read_model(ctx)?;
    let profile = read_profile(ctx)?;
    let retrain_ens = read_ensemble(ctx)?;
    let cf = read_counterfactuals(ctx)?;

    // Bounds are verified at the first valid counterfactual.
    let point = cf
        .iter()
        .find(|r| r.valid)
        .ok_or_else(|| CliError::Infeasible("no valid counterfactual to verify bounds at".into()))?;
    let x = FeatureVector::new(point.xbar.clone()).map_err(CliError::from)?;

    let mu = cfg.data.marginal.build()?;
    let gamma_m = model.lipschitz_constant().value();
    let sigma2 = cfg.stability.sigma2;
    let mut skipped: Vec<String> = Vec::new();

    // kappa of the local Gaussian against the data marginal (only needed
    // for the distance-based guarantee).
    let want_t2 = cfg.bounds.theorems.contains(&TheoremName::T2);
    let kappa_est = if want_t2 {
        let mu_tilde = Distribution::gaussian(x.coords().to_vec(), sigma2).map_err(CliError::from)?;
        let est = kappa(&mu_tilde, &mu, cfg.bounds.n_mc, derive_seed(cfg.seed, "kappa", 0))?;
        if !est.reliable {
            skipped.push("T2: kappa estimate unreliable (chi-square integral diverges)".into());
        }
        Some(est)
    } else {
        None
    };

    // mean-preserving ensemble for the Theorem-1-style verification
    let want_t1 = cfg.bounds.theorems.contains(&TheoremName::T1);
    let (nomc_ens, nomc_report) = if want_t1 {
        let generator = EnsembleGenerator::OutputNoise {
            base: &model,
            amplitude: cfg.bounds.nomc_amplitude,
        };
        let ens = generate_ensemble(&generator, cfg.perturb.members, derive_seed(cfg.seed, "nomc-ensemble", 0))?;
        let test_points = mu.sample(20, derive_seed(cfg.seed, "nomc-points", 0));
        let report = check_nomc(&ens, &test_points, 2000, derive_seed(cfg.seed, "nomc-boot", 0))?;
        if report.rejected {
            skipped.push("T1: output-noise ensemble failed the mean-zero check".into());
        }
        (Some(ens), Some(report))
    } else {
        (None, None)
    };

    let gamma_t1 = match &nomc_ens {
        Some(ens) => recourse_core::models::ensemble_lipschitz(
            std::iter::once(&ens.original).chain(&ens.members),
        )?,
        None => gamma_m,
    };

    write_json(
        &ctx.path(F_BOUND_PARAMS),
        &BoundParams {
            config_hash: ctx.cfg.hash.clone(),
            seed: cfg.seed,
            evaluation_point: x.coords().to_vec(),
            kappa: kappa_est.map(KappaEstimate2::from),
            delta: profile.delta.value,
            nu: profile.nu,
            gamma_t2: profile.gamma,
            gamma_t1,
            gamma_m,
            sigma2,
            nomc: nomc_report,
            skipped: skipped.clone(),
        },
    )?;

    let mut text = ctx.header_comment();
    text.push_str("theorem,k,epsilon,ell,rhs,freq,ci_lo,ci_hi,violated,trials,seed\n");
    for theorem in &cfg.bounds.theorems {
        match theorem {
            TheoremName::T1 => {
                let Some(ens) = &nomc_ens else { continue };
                let mut index = 0u64;
                for &k in &cfg.bounds.k {
                    for &epsilon in &cfg.bounds.epsilon {
                        let seed = derive_seed(cfg.seed, "bounds-T1", index);
                        index += 1;
                        let stab_cfg = StabilityConfig::gaussian(k, sigma2, cfg.stability.tau, seed)?;
                        let query = BoundQuery::Theorem1 { epsilon, gamma: gamma_t1, gamma_m, sigma2 };
                        let report = lhs_event_frequency(ens, &x, &stab_cfg, &query, cfg.bounds.trials, seed)?;
                        let _ = writeln!(
                            text,
                            "T1,{k},{},,{},{},{},{},{},{},{seed}",
                            fmt_f(epsilon),
                            fmt_f(report.analytic_bound),
                            fmt_f(report.frequency),
                            fmt_f(report.ci_lower),
                            fmt_f(report.ci_upper),
                            report.violated,
                            report.trials,
                        );
                    }
                }
            }
            TheoremName::T2 => {
                let Some(est) = &kappa_est else { continue };
                if !est.reliable {
                    continue;
                }
                let mut index = 0u64;
                for &k in &cfg.bounds.k {
                    for &epsilon in &cfg.bounds.epsilon {
                        for &ell in &cfg.bounds.ell {
                            let seed = derive_seed(cfg.seed, "bounds-T2", index);
                            index += 1;
                            let stab_cfg = StabilityConfig::gaussian(k, sigma2, cfg.stability.tau, seed)?;
                            let query = BoundQuery::Theorem2 {
                                epsilon,
                                ell,
                                delta: profile.delta.value,
                                nu: profile.nu,
                                kappa: est.value,
                                gamma: profile.gamma,
                            };
                            let report =
                                lhs_event_frequency(&retrain_ens, &x, &stab_cfg, &query, cfg.bounds.trials, seed)?;
                            let _ = writeln!(
                                text,
                                "T2,{k},{},{},{},{},{},{},{},{},{seed}",
                                fmt_f(epsilon),
                                fmt_f(ell),
                                fmt_f(report.analytic_bound),
                                fmt_f(report.frequency),
                                fmt_f(report.ci_lower),
                                fmt_f(report.ci_upper),
                                report.violated,
                                report.trials,
                            );
                        }
                    }
                }
            }
        }
    }
    std::fs::write(ctx.path(F_BOUNDS), text)?;
    Ok(())
}

/// Parsed row of the bound-verification table.
#[derive(Debug, Clone)]
pub struct BoundRow {
    pub theorem: String,
    pub k: usize,
    pub epsilon: f64,
    pub ell: Option<f64>,
    pub rhs: f64,
    pub freq: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub violated: bool,
    pub trials: usize,
}

pub fn read_bounds(cfg: &ResolvedConfig, out: &Path) -> Result<Vec<BoundRow>> {
    let ctx = Ctx { cfg, out };
    let rows = read_csv_lines(&ctx.path(F_BOUNDS), Stage::Bounds, &ctx)?;
    let mut out_rows = Vec::new();
    for row in rows.iter().skip(1) {
        let f: Vec<&str> = row.split(',').collect();
        if f.len() != 11 {
            return Err(CliError::Internal(format!("bad bounds row: {row}")));
        }
        out_rows.push(BoundRow {
            theorem: f[0].to_string(),
            k: f[1].parse().map_err(|_| CliError::Internal("bad k".into()))?,
            epsilon: parse_f(f[2])?,
            ell: if f[3].is_empty() { None } else { Some(parse_f(f[3])?) },
            rhs: parse_f(f[4])?,
            freq: parse_f(f[5])?,
            ci_lo: parse_f(f[6])?,
            ci_hi: parse_f(f[7])?,
            violated: f[8] == "true",
            trials: f[9].parse().map_err(|_| CliError::Internal("bad trials".into()))?,
        });
    }
    Ok(out_rows)
}

/// Public artifact readers used by figures and tests.
pub fn read_counterfactual_rows(cfg: &ResolvedConfig, out: &Path) -> Result<Vec<CfRow>> {
    read_counterfactuals(&Ctx { cfg, out })
}

pub fn read_divergence(cfg: &ResolvedConfig, out: &Path) -> Result<Vec<(usize, f64, f64)>> {
    let ctx = Ctx { cfg, out };
    let rows = read_csv_lines(&ctx.path(F_DIVERGENCE), Stage::Ensemble, &ctx)?;
    let mut out_rows = Vec::new();
    for row in rows.iter().skip(1) {
        let f: Vec<&str> = row.split(',').collect();
        if f.len() != 3 {
            return Err(CliError::Internal(format!("bad divergence row: {row}")));
        }
        out_rows.push((
            f[0].parse().map_err(|_| CliError::Internal("bad t".into()))?,
            parse_f(f[1])?,
            parse_f(f[2])?,
        ));
    }
    Ok(out_rows)
}
