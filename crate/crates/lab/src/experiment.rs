//! Named experiments: planning sweep points, executing them and writing
//! trace and summary CSVs.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use distill_core::ddim::sample_chain;
use distill_core::mlp::{draw_batch, init_denoiser, train_denoiser, epsilon_mse, MlpDenoiser};
use distill_core::optimize::{
    grad_variance, restore_experiment, run_distillation, tail_mean, cosine_trace, AdamConfig, InitMode,
    ModelChoice, PriorSet, RestoreConfig, RunConfig, VarianceTarget,
};
use distill_core::prior::{ConditionalPrior, MixtureComponent};
use distill_core::render::{grid_to_csv, prior_from_scene, scene_library, PoseSet, Renderer};
use distill_core::schedule::build_schedule;
use distill_core::vector::cosine;
use distill_core::{seeded_rng, EpsilonModel};
use rayon::prelude::*;

use crate::config::{
    EstimatorKind, ExperimentName, ExperimentSpec, Fixture, InitSpec, ModelSpec, RendererKind, SweepAxis,
};

/// Columns every optimisation summary starts with.
pub const SUMMARY_COLUMNS: [&str; 8] = [
    "run",
    "estimator",
    "axis",
    "value",
    "seed",
    "final_mode_excess",
    "final_logp",
    "mean_variance",
];

/// Summary columns of `chain-check` and `sample`.
pub const CHAIN_COLUMNS: [&str; 8] = [
    "run",
    "condition",
    "samples",
    "stride",
    "sigma",
    "max_abs_deviation",
    "mean_error_norm",
    "cov_max_abs_error",
];

/// Summary columns of `train`.
pub const TRAIN_COLUMNS: [&str; 8] = [
    "steps",
    "batch",
    "lr",
    "final_loss",
    "heldout_mse",
    "oracle_mse",
    "mse_gap",
    "mean_cosine",
];

/// Tail fraction used for the cosine summaries.
pub const COSINE_TAIL: f64 = 0.1;

/// Extra columns appended to [`SUMMARY_COLUMNS`] for `name`.
pub fn extra_columns(name: ExperimentName) -> &'static [&'static str] {
    match name {
        ExperimentName::CosineDiag => &["tail_cos_recon", "tail_cos_cls", "tail_cos_inv"],
        ExperimentName::Multiview => &["grid_mse"],
        ExperimentName::Restore => &["initial_distance", "final_distance", "distance_ratio"],
        _ => &[],
    }
}

/// Full summary header for `name`.
pub fn summary_header(name: ExperimentName) -> Vec<&'static str> {
    if name == ExperimentName::ChainCheck {
        return CHAIN_COLUMNS.to_vec();
    }
    let mut cols = SUMMARY_COLUMNS.to_vec();
    cols.extend_from_slice(extra_columns(name));
    cols
}

/// Conditions `y1`, `y2` with single components at `(2, 0)` and `(-2, 0)`.
pub fn benchmark_prior(sdev: f64) -> Result<ConditionalPrior> {
    core(ConditionalPrior::new(
        vec!["y1".into(), "y2".into()],
        vec![
            vec![MixtureComponent::new(vec![2.0, 0.0], sdev, 1.0)],
            vec![MixtureComponent::new(vec![-2.0, 0.0], sdev, 1.0)],
        ],
        vec![0.5, 0.5],
    ))
}

fn core<T>(r: distill_core::Result<T>) -> Result<T> {
    r.map_err(|e| anyhow!("{e}"))
}

/// One sweep point.
#[derive(Debug, Clone)]
pub struct RunPlan {
    pub id: String,
    pub estimator: EstimatorKind,
    pub axis: SweepAxis,
    pub value: String,
    pub spec: ExperimentSpec,
}

fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
        .collect()
}

/// Expand the sweep into runs: every estimator series at every value.
pub fn plan_runs(spec: &ExperimentSpec) -> Result<Vec<RunPlan>> {
    spec.validate()?;
    let axis = spec.sweep.axis;
    let values: Vec<String> = if axis == SweepAxis::None {
        vec![String::new()]
    } else {
        spec.sweep.values.clone()
    };
    let series: Vec<Option<EstimatorKind>> = if axis == SweepAxis::Estimator {
        vec![None]
    } else if spec.sweep.estimators.is_empty() {
        vec![Some(spec.estimator.kind)]
    } else {
        spec.sweep.estimators.iter().copied().map(Some).collect()
    };
    let mut plans = Vec::new();
    for kind in &series {
        for value in &values {
            let mut run = spec.with_axis_value(axis, value)?;
            if let Some(k) = kind {
                run.estimator.kind = *k;
            }
            let idx = plans.len();
            let id = match axis {
                SweepAxis::None if spec.name == Some(ExperimentName::ChainCheck) => format!("{idx:02}-chain"),
                SweepAxis::None => format!("{idx:02}-{}", run.estimator.kind.as_str()),
                SweepAxis::Estimator => format!("{idx:02}-{}", sanitize(value)),
                _ => format!("{idx:02}-{}-{}-{}", run.estimator.kind.as_str(), axis.as_str(), sanitize(value)),
            };
            plans.push(RunPlan {
                id,
                estimator: run.estimator.kind,
                axis,
                value: value.clone(),
                spec: run,
            });
        }
    }
    Ok(plans)
}

/// Prior set, renderer and (for scene priors) the reference parameters.
pub fn build_prior(spec: &ExperimentSpec) -> Result<(PriorSet, Renderer, Option<Vec<f64>>)> {
    let p = &spec.prior;
    let r = &spec.renderer;
    let projection = || core(PoseSet::new(r.grid, r.bins, r.poses)).map(Renderer::Projection);
    match p.fixture {
        Fixture::Scene => {
            if r.kind != RendererKind::Projection {
                bail!("scene priors need the projection renderer");
            }
            let renderer = projection()?;
            let scenes = p
                .scenes
                .iter()
                .map(|name| Ok((name.clone(), core(scene_library(name))?)))
                .collect::<Result<Vec<_>>>()?;
            let priors = core(prior_from_scene(&scenes, &renderer, p.sdev))?;
            let reference = p
                .cond
                .as_ref()
                .and_then(|c| scenes.iter().find(|(n, _)| n == c))
                .map(|(_, theta)| theta.clone());
            Ok((PriorSet::PerPose(priors), renderer, reference))
        }
        fixture => {
            let prior = match fixture {
                Fixture::TwoCondition2d => benchmark_prior(p.sdev)?,
                Fixture::Delta => core(ConditionalPrior::single("y", p.mean.clone(), 0.0))?,
                _ => core(ConditionalPrior::single("y", p.mean.clone(), p.sdev))?,
            };
            let renderer = match r.kind {
                RendererKind::Identity => Renderer::Identity { dim: prior.dim() },
                RendererKind::Projection => projection()?,
            };
            Ok((PriorSet::Single(prior), renderer, None))
        }
    }
}

fn load_model(spec: &ExperimentSpec) -> Result<ModelChoice> {
    Ok(match &spec.model {
        ModelSpec::Oracle => ModelChoice::Oracle,
        ModelSpec::Mlp(path) => ModelChoice::Mlp(
            MlpDenoiser::load(path)
                .map_err(|e| anyhow!("{e}"))
                .with_context(|| format!("loading model {}", path.display()))?,
        ),
    })
}

fn condition_index(prior: &ConditionalPrior, cond: &Option<String>) -> Result<Option<usize>> {
    cond.as_ref().map(|c| core(prior.label_index(c))).transpose()
}

/// Assemble the optimisation config of one run.
pub fn build_run_config(spec: &ExperimentSpec) -> Result<RunConfig> {
    let (prior, renderer, reference) = build_prior(spec)?;
    let first = core(prior.for_pose(0))?;
    let cond = condition_index(first, &spec.prior.cond)?;
    let estimator = spec.estimator.build();
    core(estimator.validate(first.labels()))?;
    let o = &spec.optimizer;
    let config = RunConfig {
        estimator,
        model: load_model(spec)?,
        schedule: core(build_schedule(spec.schedule.kind, spec.schedule.steps))?,
        weighting: spec.schedule.weighting,
        policy: spec.timesteps,
        adam: AdamConfig {
            lr: o.lr,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            weight_decay: o.weight_decay,
        },
        steps: o.steps,
        seed: spec.seed,
        init: match &o.init {
            InitSpec::Zeros => InitMode::Zeros,
            InitSpec::PriorSample => InitMode::PriorSample,
            InitSpec::Noise(s) => InitMode::Noise(*s),
            InitSpec::Given(v) => InitMode::Given(v.clone()),
        },
        cond,
        batch: o.batch,
        snapshot_every: o.snapshot_every,
        reference,
        prior,
        renderer,
    };
    core(config.validate())?;
    Ok(config)
}

fn frac_to_t(frac: f64, steps: usize) -> usize {
    ((frac * steps as f64).round() as usize).clamp(1, steps)
}

/// Shortest round-trip form, in exponent notation when very small or large.
fn num(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-4 || v.abs() >= 1e15) {
        format!("{v:e}")
    } else {
        format!("{v}")
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

/// Files and summary row produced by one run.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub id: String,
    pub row: Vec<String>,
    /// Paths relative to the output directory, with contents.
    pub files: Vec<(String, String)>,
}

fn mean_variance(config: &RunConfig, theta: &[f64], spec: &ExperimentSpec) -> Result<Option<f64>> {
    if spec.variance.samples < 2 {
        return Ok(None);
    }
    let t = frac_to_t(spec.variance.t_frac, config.schedule.steps());
    let mut rng = seeded_rng(spec.seed ^ 0x7661_7269_616e_6365);
    let report = core(grad_variance(config, theta, Some(t), VarianceTarget::Total, spec.variance.samples, &mut rng))?;
    Ok(Some(report.trace / theta.len() as f64))
}

fn common_row(plan: &RunPlan, excess: f64, logp: Option<f64>, variance: Option<f64>) -> Vec<String> {
    vec![
        plan.id.clone(),
        plan.estimator.as_str().into(),
        plan.axis.as_str().into(),
        plan.value.clone(),
        plan.spec.seed.to_string(),
        num(excess),
        opt(logp),
        opt(variance),
    ]
}

/// Execute one sweep point of `name`.
pub fn execute_run(name: ExperimentName, plan: &RunPlan) -> Result<RunOutput> {
    match name {
        ExperimentName::ChainCheck => execute_chain(plan),
        ExperimentName::Restore => execute_restore(plan),
        _ => execute_distillation(name, plan),
    }
}

fn execute_distillation(name: ExperimentName, plan: &RunPlan) -> Result<RunOutput> {
    let spec = &plan.spec;
    let config = build_run_config(spec)?;
    let trace = core(run_distillation(&config))?;
    let theta = &trace.final_params;
    let (excess, logp) = core(config.metrics(theta))?;
    let variance = mean_variance(&config, theta, spec)?;
    let mut row = common_row(plan, excess, logp, variance);
    let mut files = vec![
        (format!("runs/{}.trace.csv", plan.id), trace.to_csv()),
        (format!("runs/{}.params.csv", plan.id), trace.params_csv()),
    ];
    match name {
        ExperimentName::CosineDiag => {
            let cos = core(cosine_trace(&trace))?;
            row.extend(cos.iter().map(|s| opt(tail_mean(s, COSINE_TAIL))));
        }
        ExperimentName::Multiview => {
            row.push(opt(config.reference_mse(theta)));
            if let Renderer::Projection(poses) = &config.renderer {
                files.push((format!("runs/{}.grid.csv", plan.id), core(grid_to_csv(theta, poses.grid()))?));
            }
        }
        _ => {}
    }
    Ok(RunOutput {
        id: plan.id.clone(),
        row,
        files,
    })
}

fn execute_restore(plan: &RunPlan) -> Result<RunOutput> {
    let spec = &plan.spec;
    let config = build_run_config(spec)?;
    if !matches!(config.renderer, Renderer::Identity { .. }) {
        bail!("restore runs use the identity renderer");
    }
    let prior = core(config.prior.for_pose(0))?;
    let x_clean = core(prior.components(config.cond))?[0].mean.clone();
    let restore = RestoreConfig {
        perturb_scale: spec.restore.perturb,
        t_noise: frac_to_t(spec.restore.t_frac, config.schedule.steps()),
        steps: spec.restore.steps,
        perturb_seed: spec.restore.perturb_seed,
    };
    let distances = core(restore_experiment(&config, &x_clean, &restore))?;
    let first = distances[0];
    let last = *distances.last().unwrap_or(&first);
    // Mode excess of the final iterate; the clean point is the mode.
    let sdev = core(prior.components(config.cond))?[0].sdev;
    let final_excess = if sdev > 0.0 { last / sdev } else { last };
    let variance = mean_variance(&config, &x_clean, spec)?;
    let mut row = common_row(plan, final_excess, None, variance);
    row.push(num(first));
    row.push(num(last));
    row.push(if first > 0.0 { num(last / first) } else { String::new() });
    let mut csv = String::from("step,distance\n");
    for (k, d) in distances.iter().enumerate() {
        let _ = writeln!(csv, "{k},{d}");
    }
    Ok(RunOutput {
        id: plan.id.clone(),
        row,
        files: vec![(format!("runs/{}.restore.csv", plan.id), csv)],
    })
}

/// Statistics of chain samples against the target condition.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainStats {
    pub max_abs_deviation: f64,
    pub mean_error_norm: f64,
    pub cov_max_abs_error: f64,
}

/// Compare samples with the mixture `comps`: the largest coordinate gap to
/// the nearest component mean, and the error of the sample mean and
/// covariance against the mixture moments.
pub fn chain_stats(samples: &[Vec<f64>], comps: &[MixtureComponent]) -> ChainStats {
    let dim = comps[0].mean.len();
    let n = samples.len().max(1) as f64;
    let max_abs_deviation = samples
        .iter()
        .map(|x| {
            comps
                .iter()
                .map(|c| x.iter().zip(&c.mean).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
                .fold(f64::INFINITY, f64::min)
        })
        .fold(0.0, f64::max);
    let mut mu = vec![0.0; dim];
    let mut second = vec![vec![0.0; dim]; dim];
    for c in comps {
        for i in 0..dim {
            mu[i] += c.weight * c.mean[i];
            for j in 0..dim {
                let iso = if i == j { c.sdev * c.sdev } else { 0.0 };
                second[i][j] += c.weight * (iso + c.mean[i] * c.mean[j]);
            }
        }
    }
    let mut m = vec![0.0; dim];
    for x in samples {
        for i in 0..dim {
            m[i] += x[i] / n;
        }
    }
    let mean_error_norm = m.iter().zip(&mu).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let mut cov_max_abs_error: f64 = 0.0;
    let denom = (samples.len().max(2) - 1) as f64;
    for i in 0..dim {
        for j in 0..dim {
            let c: f64 = samples.iter().map(|x| (x[i] - m[i]) * (x[j] - m[j])).sum::<f64>() / denom;
            let target = second[i][j] - mu[i] * mu[j];
            cov_max_abs_error = cov_max_abs_error.max((c - target).abs());
        }
    }
    ChainStats {
        max_abs_deviation,
        mean_error_norm,
        cov_max_abs_error,
    }
}

fn execute_chain(plan: &RunPlan) -> Result<RunOutput> {
    let spec = &plan.spec;
    let (prior, _, _) = build_prior(spec)?;
    let prior = core(prior.for_pose(0))?.clone();
    let cond = condition_index(&prior, &spec.prior.cond)?;
    let sched = core(build_schedule(spec.schedule.kind, spec.schedule.steps))?;
    let model = load_model(spec)?;
    let eps_model: &dyn EpsilonModel = match &model {
        ModelChoice::Oracle => &prior,
        ModelChoice::Mlp(m) => m,
    };
    let s = &spec.sample;
    let mut rng = seeded_rng(spec.seed);
    let samples = core(sample_chain(eps_model, cond, &sched, s.stride, s.sigma, s.guidance, &mut rng, s.count))?;
    let comps = core(prior.components(cond))?;
    let stats = chain_stats(&samples, comps);
    let label = spec.prior.cond.clone().unwrap_or_else(|| "none".into());
    let mut csv = String::from("sample,condition");
    for k in 0..prior.dim() {
        let _ = write!(csv, ",x{k}");
    }
    csv.push('\n');
    for (i, x) in samples.iter().enumerate() {
        let _ = write!(csv, "{i},{label}");
        for v in x {
            let _ = write!(csv, ",{}", num(*v));
        }
        csv.push('\n');
    }
    let row = vec![
        plan.id.clone(),
        label,
        s.count.to_string(),
        s.stride.to_string(),
        s.sigma.to_string(),
        num(stats.max_abs_deviation),
        num(stats.mean_error_norm),
        num(stats.cov_max_abs_error),
    ];
    Ok(RunOutput {
        id: plan.id.clone(),
        row,
        files: vec![(format!("runs/{}.samples.csv", plan.id), csv)],
    })
}

/// Refuse to reuse a non-empty directory unless `overwrite` is set; with
/// `overwrite`, stale artifacts from a previous run are removed first.
pub fn prepare_output(out: &Path, overwrite: bool) -> Result<()> {
    if out.exists() {
        let non_empty = fs::read_dir(out)
            .with_context(|| format!("reading {}", out.display()))?
            .next()
            .is_some();
        if non_empty && !overwrite {
            bail!("output directory {} is not empty; pass --overwrite to replace it", out.display());
        }
        if non_empty {
            let runs = out.join("runs");
            if runs.is_dir() {
                fs::remove_dir_all(&runs)?;
            }
            for entry in fs::read_dir(out)? {
                let path = entry?.path();
                let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
                let generated = matches!(
                    name,
                    "summary.csv" | "MANIFEST" | "resolved.cfg" | "model.mlpd" | "loss.csv"
                ) || name.ends_with(".svg");
                if generated && path.is_file() {
                    fs::remove_file(&path)?;
                }
            }
        }
    }
    fs::create_dir_all(out.join("runs")).with_context(|| format!("creating {}", out.display()))?;
    Ok(())
}

fn write_file(out: &Path, rel: &str, contents: &str) -> Result<()> {
    let path = out.join(rel);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))
}

fn csv_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut s = header.join(",");
    s.push('\n');
    for r in rows {
        s.push_str(&r.join(","));
        s.push('\n');
    }
    s
}

/// Outcome of [`run_experiment`].
#[derive(Debug, Clone, Default)]
pub struct ExperimentReport {
    pub completed: Vec<String>,
    /// Run id and error message of each failed run.
    pub failed: Vec<(String, String)>,
}

/// Execute every run of `spec` on `jobs` threads and write artifacts to
/// `out`, which must already be prepared. Results are merged in plan order,
/// so the artifacts do not depend on `jobs`.
pub fn run_experiment(spec: &ExperimentSpec, out: &Path, jobs: usize) -> Result<ExperimentReport> {
    let name = spec.name.ok_or_else(|| anyhow!("the config does not name an experiment"))?;
    write_file(out, "resolved.cfg", &spec.resolved())?;
    let plans = plan_runs(spec)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .context("building the worker pool")?;
    let results: Vec<Result<RunOutput>> =
        pool.install(|| plans.par_iter().map(|p| execute_run(name, p)).collect());

    let mut report = ExperimentReport::default();
    let mut rows = Vec::new();
    let mut manifest = format!("experiment {}\n", name.as_str());
    for (plan, result) in plans.iter().zip(results) {
        match result {
            Ok(output) => {
                for (rel, contents) in &output.files {
                    write_file(out, rel, contents)?;
                }
                rows.push(output.row);
                let _ = writeln!(manifest, "run {} complete", plan.id);
                report.completed.push(plan.id.clone());
            }
            Err(e) => {
                let msg = format!("{e:#}").replace('\n', " ");
                let _ = writeln!(manifest, "run {} incomplete: {msg}", plan.id);
                report.failed.push((plan.id.clone(), msg));
            }
        }
    }
    write_file(out, "summary.csv", &csv_table(&summary_header(name), &rows))?;
    let status = if report.failed.is_empty() { "complete" } else { "incomplete" };
    let _ = writeln!(manifest, "status {status}");
    write_file(out, "MANIFEST", &manifest)?;
    if !report.completed.is_empty() {
        crate::report::write_reports(out)?;
    }
    Ok(report)
}

/// Outcome of [`train_model`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub final_loss: Option<f64>,
    pub heldout_mse: f64,
    pub oracle_mse: f64,
    pub mean_cosine: Option<f64>,
    pub model_path: PathBuf,
}

/// Train a denoiser on the configured prior and write `model.mlpd`,
/// `loss.csv`, `summary.csv`, `resolved.cfg` and `MANIFEST` to `out`.
pub fn train_model(spec: &ExperimentSpec, out: &Path) -> Result<TrainReport> {
    write_file(out, "resolved.cfg", &spec.resolved())?;
    let (prior, _, _) = build_prior(spec)?;
    let prior = match prior {
        PriorSet::Single(p) => p,
        PriorSet::PerPose(_) => bail!("training needs a single prior, not per-pose scene priors"),
    };
    let sched = core(build_schedule(spec.schedule.kind, spec.schedule.steps))?;
    let tr = &spec.train;
    let mut rng = seeded_rng(spec.seed);
    let mut model = core(init_denoiser(&mut rng, prior.dim(), prior.num_conditions(), tr.widths, tr.p_uncond))?;
    let curve = core(train_denoiser(&mut model, &prior, &sched, &mut rng, tr.steps, tr.batch, tr.lr));
    let curve = match curve {
        Ok(c) => c,
        Err(e) => {
            write_file(out, "MANIFEST", &format!("train incomplete: {e:#}\nstatus incomplete\n"))?;
            return Err(e);
        }
    };
    let model_path = out.join("model.mlpd");
    core(model.save(&model_path))?;
    let mut loss = String::from("step,loss\n");
    for (k, l) in curve.losses.iter().enumerate() {
        let _ = writeln!(loss, "{k},{l}");
    }
    write_file(out, "loss.csv", &loss)?;

    let mut hold_rng = seeded_rng(spec.seed ^ 0x686f_6c64_6f75_74);
    let examples = core(draw_batch(&prior, &sched, tr.p_uncond, tr.holdout.max(1), &mut hold_rng))?;
    let heldout_mse = core(epsilon_mse(&model, &examples, &sched))?;
    let oracle_mse = core(epsilon_mse(&prior, &examples, &sched))?;
    let mut cosines = Vec::new();
    for ex in &examples {
        let a = core(model.predict(&ex.z, ex.t, ex.cond, &sched))?;
        let b = core(prior.predict(&ex.z, ex.t, ex.cond, &sched))?;
        cosines.extend(cosine(&a, &b));
    }
    let mean_cosine = (!cosines.is_empty()).then(|| cosines.iter().sum::<f64>() / cosines.len() as f64);
    let final_loss = curve.losses.last().copied();
    let row = vec![
        tr.steps.to_string(),
        tr.batch.to_string(),
        num(tr.lr),
        opt(final_loss),
        num(heldout_mse),
        num(oracle_mse),
        num(heldout_mse - oracle_mse),
        opt(mean_cosine),
    ];
    write_file(out, "summary.csv", &csv_table(&TRAIN_COLUMNS, &[row]))?;
    write_file(out, "MANIFEST", "train complete\nstatus complete\n")?;
    Ok(TrainReport {
        final_loss,
        heldout_mse,
        oracle_mse,
        mean_cosine,
        model_path,
    })
}
