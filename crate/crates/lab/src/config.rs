//! Line-oriented experiment configuration.
//!
//! ```text
//! name = guidance-sweep
//! seed = 0
//!
//! [estimator]
//! kind = sds
//! guidance = 7.5
//! ```
//!
//! Blank lines and `#` comments are ignored. Every key must be known; the
//! resolved form written next to the outputs lists every key and parses
//! back to the same spec.

use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use distill_core::ddim::{InvMode, SigmaMode};
use distill_core::distill::{Estimator, LambdaMode, NegMode};
use distill_core::schedule::{LossWeighting, ScheduleKind, TimestepPolicy};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentName {
    TermAblation,
    GuidanceSweep,
    Restore,
    CosineDiag,
    CAblation,
    LambdaAblation,
    Multiview,
    ChainCheck,
}

impl ExperimentName {
    pub const ALL: [ExperimentName; 8] = [
        ExperimentName::TermAblation,
        ExperimentName::GuidanceSweep,
        ExperimentName::Restore,
        ExperimentName::CosineDiag,
        ExperimentName::CAblation,
        ExperimentName::LambdaAblation,
        ExperimentName::Multiview,
        ExperimentName::ChainCheck,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ExperimentName::TermAblation => "term-ablation",
            ExperimentName::GuidanceSweep => "guidance-sweep",
            ExperimentName::Restore => "restore",
            ExperimentName::CosineDiag => "cosine-diag",
            ExperimentName::CAblation => "c-ablation",
            ExperimentName::LambdaAblation => "lambda-ablation",
            ExperimentName::Multiview => "multiview",
            ExperimentName::ChainCheck => "chain-check",
        }
    }
}

impl FromStr for ExperimentName {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        ExperimentName::ALL
            .into_iter()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| anyhow!("unknown experiment {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimatorKind {
    Sds,
    ReconOnly,
    CfgOnly,
    Isd,
    Nfsd,
    VsdApprox,
}

impl EstimatorKind {
    const ALL: [EstimatorKind; 6] = [
        EstimatorKind::Sds,
        EstimatorKind::ReconOnly,
        EstimatorKind::CfgOnly,
        EstimatorKind::Isd,
        EstimatorKind::Nfsd,
        EstimatorKind::VsdApprox,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            EstimatorKind::Sds => "sds",
            EstimatorKind::ReconOnly => "recon-only",
            EstimatorKind::CfgOnly => "cfg-only",
            EstimatorKind::Isd => "isd",
            EstimatorKind::Nfsd => "nfsd",
            EstimatorKind::VsdApprox => "vsd-approx",
        }
    }
}

impl FromStr for EstimatorKind {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        EstimatorKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| anyhow!("unknown estimator {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorSpec {
    pub kind: EstimatorKind,
    pub guidance: f64,
    pub interval: usize,
    pub inv_mode: InvMode,
    pub lambda: LambdaMode,
    pub neg_mode: NegMode,
    pub sigma_vsd: f64,
}

impl Default for EstimatorSpec {
    fn default() -> Self {
        Self {
            kind: EstimatorKind::Isd,
            guidance: 7.5,
            interval: 20,
            inv_mode: InvMode::default(),
            lambda: LambdaMode::default(),
            neg_mode: NegMode::ShiftedTime,
            sigma_vsd: 0.5,
        }
    }
}

impl EstimatorSpec {
    pub fn build(&self) -> Estimator {
        match self.kind {
            EstimatorKind::Sds => Estimator::Sds {
                guidance: self.guidance,
            },
            EstimatorKind::ReconOnly => Estimator::ReconOnly,
            EstimatorKind::CfgOnly => Estimator::CfgOnly,
            EstimatorKind::Isd => Estimator::Isd {
                guidance: self.guidance,
                interval: self.interval,
                inv_mode: self.inv_mode,
                lambda: self.lambda,
            },
            EstimatorKind::Nfsd => Estimator::Nfsd {
                guidance: self.guidance,
                interval: self.interval,
                neg_mode: self.neg_mode.clone(),
            },
            EstimatorKind::VsdApprox => Estimator::VsdApprox {
                guidance: self.guidance,
                sigma: self.sigma_vsd,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fixture {
    /// Conditions y1, y2 with single components at (±2, 0), equal weights.
    TwoCondition2d,
    /// One condition `y` with a delta at `mean`.
    Delta,
    /// One condition `y` with an isotropic Gaussian at `mean`.
    Gaussian,
    /// Per-pose priors projected from built-in scenes.
    Scene,
}

impl Fixture {
    const ALL: [Fixture; 4] = [Fixture::TwoCondition2d, Fixture::Delta, Fixture::Gaussian, Fixture::Scene];

    pub fn as_str(&self) -> &'static str {
        match self {
            Fixture::TwoCondition2d => "two-condition-2d",
            Fixture::Delta => "delta",
            Fixture::Gaussian => "gaussian",
            Fixture::Scene => "scene",
        }
    }
}

impl FromStr for Fixture {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Fixture::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| anyhow!("unknown prior fixture {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PriorSpec {
    pub fixture: Fixture,
    pub sdev: f64,
    pub mean: Vec<f64>,
    /// Condition label to distill; `None` distills the pooled prior.
    pub cond: Option<String>,
    pub scenes: Vec<String>,
}

impl Default for PriorSpec {
    fn default() -> Self {
        Self {
            fixture: Fixture::TwoCondition2d,
            sdev: 0.25,
            mean: vec![2.0, 0.0],
            cond: Some("y1".into()),
            scenes: vec!["disk".into()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum ModelSpec {
    #[default]
    Oracle,
    Mlp(PathBuf),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RendererKind {
    Identity,
    Projection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RendererSpec {
    pub kind: RendererKind,
    pub grid: usize,
    pub bins: usize,
    pub poses: usize,
}

impl Default for RendererSpec {
    fn default() -> Self {
        Self {
            kind: RendererKind::Identity,
            grid: 8,
            bins: 16,
            poses: 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub steps: usize,
    pub weighting: LossWeighting,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::DdpmLinear,
            steps: 1000,
            weighting: LossWeighting::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum InitSpec {
    Zeros,
    PriorSample,
    Noise(f64),
    Given(Vec<f64>),
}

impl fmt::Display for InitSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InitSpec::Zeros => f.write_str("zeros"),
            InitSpec::PriorSample => f.write_str("prior-sample"),
            InitSpec::Noise(s) => write!(f, "noise:{s}"),
            InitSpec::Given(v) => {
                let parts: Vec<String> = v.iter().map(|x| x.to_string()).collect();
                write!(f, "given:{}", parts.join(";"))
            }
        }
    }
}

impl FromStr for InitSpec {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zeros" => return Ok(InitSpec::Zeros),
            "prior-sample" => return Ok(InitSpec::PriorSample),
            _ => {}
        }
        if let Some(v) = s.strip_prefix("noise:") {
            return Ok(InitSpec::Noise(parse_f64(v)?));
        }
        if let Some(v) = s.strip_prefix("given:") {
            return Ok(InitSpec::Given(v.split(';').map(parse_f64).collect::<Result<_>>()?));
        }
        bail!("unknown init {s:?} (zeros, prior-sample, noise:<scale>, given:<v;v;...>)")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerSpec {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub batch: usize,
    pub snapshot_every: usize,
    pub init: InitSpec,
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        Self {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            steps: 2000,
            batch: 1,
            snapshot_every: 0,
            init: InitSpec::Zeros,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    None,
    Guidance,
    Interval,
    Lambda,
    InvMode,
    SigmaVsd,
    Estimator,
    Seed,
}

impl SweepAxis {
    const ALL: [SweepAxis; 8] = [
        SweepAxis::None,
        SweepAxis::Guidance,
        SweepAxis::Interval,
        SweepAxis::Lambda,
        SweepAxis::InvMode,
        SweepAxis::SigmaVsd,
        SweepAxis::Estimator,
        SweepAxis::Seed,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            SweepAxis::None => "none",
            SweepAxis::Guidance => "guidance",
            SweepAxis::Interval => "interval",
            SweepAxis::Lambda => "lambda",
            SweepAxis::InvMode => "inv_mode",
            SweepAxis::SigmaVsd => "sigma_vsd",
            SweepAxis::Estimator => "estimator",
            SweepAxis::Seed => "seed",
        }
    }
}

impl FromStr for SweepAxis {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        SweepAxis::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| anyhow!("unknown sweep axis {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<String>,
    /// Estimator series; each is run at every sweep value.
    pub estimators: Vec<EstimatorKind>,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            axis: SweepAxis::None,
            values: Vec::new(),
            estimators: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RestoreSpec {
    pub perturb: f64,
    pub t_frac: f64,
    pub steps: usize,
    pub perturb_seed: u64,
}

impl Default for RestoreSpec {
    fn default() -> Self {
        Self {
            perturb: 0.5,
            t_frac: 0.6,
            steps: 200,
            perturb_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSpec {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub widths: (usize, usize),
    pub p_uncond: f64,
    pub holdout: usize,
}

impl Default for TrainSpec {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch: 64,
            lr: 1e-3,
            widths: (64, 64),
            p_uncond: 0.1,
            holdout: 4096,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleSpec {
    pub stride: usize,
    pub sigma: SigmaMode,
    pub count: usize,
    pub guidance: Option<f64>,
}

impl Default for SampleSpec {
    fn default() -> Self {
        Self {
            stride: 20,
            sigma: SigmaMode::Zero,
            count: 100,
            guidance: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarianceSpec {
    pub samples: usize,
    pub t_frac: f64,
}

impl Default for VarianceSpec {
    fn default() -> Self {
        Self {
            samples: 1000,
            t_frac: 0.6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub name: Option<ExperimentName>,
    pub seed: u64,
    /// Output directory; `--out` takes precedence.
    pub out: Option<PathBuf>,
    pub estimator: EstimatorSpec,
    pub prior: PriorSpec,
    pub model: ModelSpec,
    pub renderer: RendererSpec,
    pub schedule: ScheduleSpec,
    pub timesteps: TimestepPolicy,
    pub optimizer: OptimizerSpec,
    pub sweep: SweepSpec,
    pub restore: RestoreSpec,
    pub train: TrainSpec,
    pub sample: SampleSpec,
    pub variance: VarianceSpec,
}

impl ExperimentSpec {
    /// Fully defaulted spec for `name`.
    pub fn defaults(name: Option<ExperimentName>) -> Self {
        let mut spec = ExperimentSpec {
            name,
            seed: 0,
            out: None,
            estimator: EstimatorSpec::default(),
            prior: PriorSpec::default(),
            model: ModelSpec::default(),
            renderer: RendererSpec::default(),
            schedule: ScheduleSpec::default(),
            timesteps: TimestepPolicy::default(),
            optimizer: OptimizerSpec::default(),
            sweep: SweepSpec::default(),
            restore: RestoreSpec::default(),
            train: TrainSpec::default(),
            sample: SampleSpec::default(),
            variance: VarianceSpec::default(),
        };
        let values = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        match name {
            Some(ExperimentName::TermAblation) => {
                spec.estimator.guidance = 100.0;
                spec.sweep.axis = SweepAxis::Estimator;
                spec.sweep.values = values(&["sds", "recon-only", "cfg-only"]);
            }
            Some(ExperimentName::GuidanceSweep) => {
                spec.estimator.kind = EstimatorKind::Sds;
                spec.sweep.axis = SweepAxis::Guidance;
                spec.sweep.values = values(&["2.5", "7.5", "25", "100"]);
                spec.sweep.estimators = vec![EstimatorKind::Sds];
            }
            Some(ExperimentName::Restore) => {
                spec.prior.fixture = Fixture::Delta;
                spec.prior.sdev = 0.0;
                spec.prior.cond = Some("y".into());
                spec.sweep.axis = SweepAxis::Estimator;
                spec.sweep.values = values(&["recon-only", "isd"]);
            }
            Some(ExperimentName::CosineDiag) => {}
            Some(ExperimentName::CAblation) => {
                spec.sweep.axis = SweepAxis::Interval;
                spec.sweep.values = values(&["1", "20", "50"]);
            }
            Some(ExperimentName::LambdaAblation) => {
                spec.sweep.axis = SweepAxis::Lambda;
                spec.sweep.values = values(&["ratio", "one"]);
            }
            Some(ExperimentName::Multiview) => {
                spec.prior.fixture = Fixture::Scene;
                spec.prior.sdev = 0.0;
                spec.prior.cond = Some("disk".into());
                spec.renderer.kind = RendererKind::Projection;
                spec.optimizer.steps = 5000;
            }
            Some(ExperimentName::ChainCheck) => {
                spec.prior.fixture = Fixture::Delta;
                spec.prior.sdev = 0.0;
                spec.prior.cond = Some("y".into());
            }
            None => {}
        }
        spec
    }

    /// Check cross-field constraints.
    pub fn validate(&self) -> Result<()> {
        if self.sweep.axis != SweepAxis::None && self.sweep.values.is_empty() {
            bail!("sweep axis {} needs at least one value", self.sweep.axis.as_str());
        }
        if self.sweep.axis == SweepAxis::None && !self.sweep.values.is_empty() {
            bail!("sweep values given without an axis");
        }
        if self.sweep.axis == SweepAxis::Estimator && !self.sweep.estimators.is_empty() {
            bail!("sweep.estimators cannot be combined with the estimator axis");
        }
        for v in &self.sweep.values {
            check_axis_value(self.sweep.axis, v).with_context(|| format!("sweep value {v:?}"))?;
        }
        self.timesteps
            .validate()
            .map_err(|e| anyhow!("timesteps: {e}"))?;
        if self.optimizer.steps == 0 {
            bail!("optimizer.steps must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.restore.t_frac) || !(0.0..=1.0).contains(&self.variance.t_frac) {
            bail!("t_frac values must lie in [0, 1]");
        }
        if self.sample.stride == 0 {
            bail!("sample.stride must be positive");
        }
        Ok(())
    }

    /// Every key with its value, in canonical order.
    pub fn resolved(&self) -> String {
        let mut s = String::new();
        if let Some(n) = self.name {
            let _ = writeln!(s, "name = {}", n.as_str());
        }
        let _ = writeln!(s, "seed = {}", self.seed);
        if let Some(out) = &self.out {
            let _ = writeln!(s, "out = {}", out.display());
        }
        let section = |s: &mut String, name: &str, pairs: Vec<(&str, String)>| {
            let _ = writeln!(s, "\n[{name}]");
            for (k, v) in pairs {
                let _ = writeln!(s, "{k} = {v}");
            }
        };
        let e = &self.estimator;
        section(
            &mut s,
            "estimator",
            vec![
                ("kind", e.kind.as_str().into()),
                ("guidance", e.guidance.to_string()),
                ("interval", e.interval.to_string()),
                ("inv_mode", e.inv_mode.as_str().into()),
                ("lambda", e.lambda.as_str().into()),
                ("neg_mode", e.neg_mode.to_string()),
                ("sigma_vsd", e.sigma_vsd.to_string()),
            ],
        );
        let p = &self.prior;
        section(
            &mut s,
            "prior",
            vec![
                ("fixture", p.fixture.as_str().into()),
                ("sdev", p.sdev.to_string()),
                ("mean", join(&p.mean)),
                ("cond", p.cond.clone().unwrap_or_else(|| "none".into())),
                ("scenes", p.scenes.join(", ")),
            ],
        );
        let model = match &self.model {
            ModelSpec::Oracle => vec![("kind", "oracle".to_string())],
            ModelSpec::Mlp(path) => vec![("kind", "mlp".to_string()), ("path", path.display().to_string())],
        };
        section(&mut s, "model", model);
        let r = &self.renderer;
        section(
            &mut s,
            "renderer",
            vec![
                (
                    "kind",
                    match r.kind {
                        RendererKind::Identity => "identity",
                        RendererKind::Projection => "projection",
                    }
                    .into(),
                ),
                ("grid", r.grid.to_string()),
                ("bins", r.bins.to_string()),
                ("poses", r.poses.to_string()),
            ],
        );
        let sc = &self.schedule;
        section(
            &mut s,
            "schedule",
            vec![
                ("kind", sc.kind.as_str().into()),
                ("steps", sc.steps.to_string()),
                ("weighting", sc.weighting.as_str().into()),
            ],
        );
        let t = &self.timesteps;
        section(
            &mut s,
            "timesteps",
            vec![
                ("lo", t.lo_frac.to_string()),
                ("hi", t.hi_frac.to_string()),
                ("anneal_at", t.anneal_at_frac.to_string()),
                ("lo2", t.lo_frac2.to_string()),
                ("hi2", t.hi_frac2.to_string()),
            ],
        );
        let o = &self.optimizer;
        section(
            &mut s,
            "optimizer",
            vec![
                ("lr", o.lr.to_string()),
                ("beta1", o.beta1.to_string()),
                ("beta2", o.beta2.to_string()),
                ("eps", o.eps.to_string()),
                ("weight_decay", o.weight_decay.to_string()),
                ("steps", o.steps.to_string()),
                ("batch", o.batch.to_string()),
                ("snapshot_every", o.snapshot_every.to_string()),
                ("init", o.init.to_string()),
            ],
        );
        let sw = &self.sweep;
        section(
            &mut s,
            "sweep",
            vec![
                ("axis", sw.axis.as_str().into()),
                ("values", sw.values.join(", ")),
                (
                    "estimators",
                    sw.estimators.iter().map(|k| k.as_str()).collect::<Vec<_>>().join(", "),
                ),
            ],
        );
        let rs = &self.restore;
        section(
            &mut s,
            "restore",
            vec![
                ("perturb", rs.perturb.to_string()),
                ("t_frac", rs.t_frac.to_string()),
                ("steps", rs.steps.to_string()),
                ("perturb_seed", rs.perturb_seed.to_string()),
            ],
        );
        let tr = &self.train;
        section(
            &mut s,
            "train",
            vec![
                ("steps", tr.steps.to_string()),
                ("batch", tr.batch.to_string()),
                ("lr", tr.lr.to_string()),
                ("widths", format!("{}, {}", tr.widths.0, tr.widths.1)),
                ("p_uncond", tr.p_uncond.to_string()),
                ("holdout", tr.holdout.to_string()),
            ],
        );
        let sa = &self.sample;
        section(
            &mut s,
            "sample",
            vec![
                ("stride", sa.stride.to_string()),
                ("sigma", sa.sigma.to_string()),
                ("count", sa.count.to_string()),
                ("guidance", sa.guidance.map(|g| g.to_string()).unwrap_or_else(|| "none".into())),
            ],
        );
        let v = &self.variance;
        section(
            &mut s,
            "variance",
            vec![("samples", v.samples.to_string()), ("t_frac", v.t_frac.to_string())],
        );
        s
    }
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ")
}

fn parse_f64(s: &str) -> Result<f64> {
    let v: f64 = s.trim().parse().map_err(|_| anyhow!("expected a number, got {s:?}"))?;
    if !v.is_finite() {
        bail!("expected a finite number, got {s:?}");
    }
    Ok(v)
}

fn parse_usize(s: &str) -> Result<usize> {
    s.trim()
        .parse()
        .map_err(|_| anyhow!("expected a non-negative integer, got {s:?}"))
}

fn parse_list(s: &str) -> Vec<String> {
    s.split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(String::from)
        .collect()
}

fn core<T>(r: distill_core::Result<T>) -> Result<T> {
    r.map_err(|e| anyhow!("{e}"))
}

fn check_axis_value(axis: SweepAxis, v: &str) -> Result<()> {
    match axis {
        SweepAxis::None => Ok(()),
        SweepAxis::Guidance | SweepAxis::SigmaVsd => parse_f64(v).map(|_| ()),
        SweepAxis::Interval => parse_usize(v).map(|_| ()),
        SweepAxis::Seed => v.parse::<u64>().map(|_| ()).map_err(|_| anyhow!("bad seed")),
        SweepAxis::Lambda => core(v.parse::<LambdaMode>()).map(|_| ()),
        SweepAxis::InvMode => core(v.parse::<InvMode>()).map(|_| ()),
        SweepAxis::Estimator => v.parse::<EstimatorKind>().map(|_| ()),
    }
}

impl ExperimentSpec {
    /// Apply one sweep value to a copy of this spec.
    pub fn with_axis_value(&self, axis: SweepAxis, value: &str) -> Result<ExperimentSpec> {
        let mut s = self.clone();
        match axis {
            SweepAxis::None => {}
            SweepAxis::Guidance => s.estimator.guidance = parse_f64(value)?,
            SweepAxis::Interval => s.estimator.interval = parse_usize(value)?,
            SweepAxis::Lambda => s.estimator.lambda = core(value.parse())?,
            SweepAxis::InvMode => s.estimator.inv_mode = core(value.parse())?,
            SweepAxis::SigmaVsd => s.estimator.sigma_vsd = parse_f64(value)?,
            SweepAxis::Estimator => s.estimator.kind = value.parse()?,
            SweepAxis::Seed => s.seed = value.parse().map_err(|_| anyhow!("bad seed {value:?}"))?,
        }
        Ok(s)
    }
}

/// Parse config text; `origin` names the source in error messages.
pub fn parse_config_str(text: &str, origin: &str) -> Result<ExperimentSpec> {
    let mut entries = Vec::new();
    let mut section = String::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| anyhow!("{origin}:{line_no}: malformed section header {line:?}"))?;
            section = name.trim().to_string();
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("{origin}:{line_no}: expected `key = value`, got {line:?}"))?;
        entries.push((line_no, section.clone(), k.trim().to_string(), v.trim().to_string()));
    }

    let mut name = None;
    for (line_no, sec, k, v) in &entries {
        if sec.is_empty() && k == "name" {
            name = Some(v.parse::<ExperimentName>().with_context(|| format!("{origin}:{line_no}"))?);
        }
    }
    let mut spec = ExperimentSpec::defaults(name);
    for (line_no, sec, k, v) in &entries {
        apply(&mut spec, sec, k, v).with_context(|| format!("{origin}:{line_no}: [{sec}] {k}"))?;
    }
    spec.validate().with_context(|| format!("{origin}: invalid configuration"))?;
    Ok(spec)
}

pub fn parse_config(path: &Path) -> Result<ExperimentSpec> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_config_str(&text, &path.display().to_string())
}

fn apply(s: &mut ExperimentSpec, section: &str, key: &str, v: &str) -> Result<()> {
    match (section, key) {
        ("", "name") => {}
        ("", "seed") => s.seed = v.parse().map_err(|_| anyhow!("expected an unsigned integer"))?,
        ("", "out") => s.out = Some(PathBuf::from(v)),

        ("estimator", "kind") => s.estimator.kind = v.parse()?,
        ("estimator", "guidance") => s.estimator.guidance = parse_f64(v)?,
        ("estimator", "interval") => s.estimator.interval = parse_usize(v)?,
        ("estimator", "inv_mode") => s.estimator.inv_mode = core(v.parse())?,
        ("estimator", "lambda") => s.estimator.lambda = core(v.parse())?,
        ("estimator", "neg_mode") => s.estimator.neg_mode = core(v.parse())?,
        ("estimator", "sigma_vsd") => s.estimator.sigma_vsd = parse_f64(v)?,

        ("prior", "fixture") => s.prior.fixture = v.parse()?,
        ("prior", "sdev") => s.prior.sdev = parse_f64(v)?,
        ("prior", "mean") => s.prior.mean = parse_list(v).iter().map(|x| parse_f64(x)).collect::<Result<_>>()?,
        ("prior", "cond") => s.prior.cond = if v == "none" { None } else { Some(v.to_string()) },
        ("prior", "scenes") => s.prior.scenes = parse_list(v),

        ("model", "kind") => match v {
            "oracle" => s.model = ModelSpec::Oracle,
            "mlp" => {
                if !matches!(s.model, ModelSpec::Mlp(_)) {
                    s.model = ModelSpec::Mlp(PathBuf::new());
                }
            }
            _ => bail!("unknown model kind {v:?}"),
        },
        ("model", "path") => s.model = ModelSpec::Mlp(PathBuf::from(v)),

        ("renderer", "kind") => {
            s.renderer.kind = match v {
                "identity" => RendererKind::Identity,
                "projection" => RendererKind::Projection,
                _ => bail!("unknown renderer {v:?}"),
            }
        }
        ("renderer", "grid") => s.renderer.grid = parse_usize(v)?,
        ("renderer", "bins") => s.renderer.bins = parse_usize(v)?,
        ("renderer", "poses") => s.renderer.poses = parse_usize(v)?,

        ("schedule", "kind") => s.schedule.kind = core(v.parse())?,
        ("schedule", "steps") => s.schedule.steps = parse_usize(v)?,
        ("schedule", "weighting") => s.schedule.weighting = core(v.parse())?,

        ("timesteps", "lo") => s.timesteps.lo_frac = parse_f64(v)?,
        ("timesteps", "hi") => s.timesteps.hi_frac = parse_f64(v)?,
        ("timesteps", "anneal_at") => s.timesteps.anneal_at_frac = parse_f64(v)?,
        ("timesteps", "lo2") => s.timesteps.lo_frac2 = parse_f64(v)?,
        ("timesteps", "hi2") => s.timesteps.hi_frac2 = parse_f64(v)?,

        ("optimizer", "lr") => s.optimizer.lr = parse_f64(v)?,
        ("optimizer", "beta1") => s.optimizer.beta1 = parse_f64(v)?,
        ("optimizer", "beta2") => s.optimizer.beta2 = parse_f64(v)?,
        ("optimizer", "eps") => s.optimizer.eps = parse_f64(v)?,
        ("optimizer", "weight_decay") => s.optimizer.weight_decay = parse_f64(v)?,
        ("optimizer", "steps") => s.optimizer.steps = parse_usize(v)?,
        ("optimizer", "batch") => s.optimizer.batch = parse_usize(v)?,
        ("optimizer", "snapshot_every") => s.optimizer.snapshot_every = parse_usize(v)?,
        ("optimizer", "init") => s.optimizer.init = v.parse()?,

        ("sweep", "axis") => s.sweep.axis = v.parse()?,
        ("sweep", "values") => s.sweep.values = parse_list(v),
        ("sweep", "estimators") => {
            s.sweep.estimators = parse_list(v).iter().map(|k| k.parse()).collect::<Result<_>>()?
        }

        ("restore", "perturb") => s.restore.perturb = parse_f64(v)?,
        ("restore", "t_frac") => s.restore.t_frac = parse_f64(v)?,
        ("restore", "steps") => s.restore.steps = parse_usize(v)?,
        ("restore", "perturb_seed") => {
            s.restore.perturb_seed = v.parse().map_err(|_| anyhow!("expected an unsigned integer"))?
        }

        ("train", "steps") => s.train.steps = parse_usize(v)?,
        ("train", "batch") => s.train.batch = parse_usize(v)?,
        ("train", "lr") => s.train.lr = parse_f64(v)?,
        ("train", "widths") => {
            let w = parse_list(v).iter().map(|x| parse_usize(x)).collect::<Result<Vec<_>>>()?;
            match w.as_slice() {
                [a, b] => s.train.widths = (*a, *b),
                _ => bail!("expected two widths"),
            }
        }
        ("train", "p_uncond") => s.train.p_uncond = parse_f64(v)?,
        ("train", "holdout") => s.train.holdout = parse_usize(v)?,

        ("sample", "stride") => s.sample.stride = parse_usize(v)?,
        ("sample", "sigma") => s.sample.sigma = core(v.parse())?,
        ("sample", "count") => s.sample.count = parse_usize(v)?,
        ("sample", "guidance") => s.sample.guidance = if v == "none" { None } else { Some(parse_f64(v)?) },

        ("variance", "samples") => s.variance.samples = parse_usize(v)?,
        ("variance", "t_frac") => s.variance.t_frac = parse_f64(v)?,

        _ => bail!("unknown key"),
    }
    Ok(())
}
