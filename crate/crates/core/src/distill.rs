//! Per-step distillation gradient estimators in data space.
//!
//! Every estimator returns a [`GradientTerms`] record: the individual terms
//! (reconstruction-like, classifier, invariant), the weights used, and the
//! total direction that is later pulled back through the renderer. None of
//! them differentiates through the ε-model; the model is only evaluated.
//!
//! | estimator   | total                                   |
//! |-------------|-----------------------------------------|
//! | SDS         | w(t) · (δ_N + w δ_cls)                  |
//! | recon-only  | w(t) · δ_N                              |
//! | cfg-only    | w(t) · δ_cls                            |
//! | ISD         | w(t) · (λ(t) δ_inv + w δ_cls)           |
//! | NFSD        | w(t) · (δ_D + w δ_cls)                  |
//! | VSD approx  | w(t) · (ε̂_cfg − ε_lora)                 |
//!
//! with `δ_N = ε̂(z_t; y) − ε` and `δ_cls = ε̂(z_t; y) − ε̂(z_t; ∅)`.

use std::fmt;
use std::str::FromStr;

use crate::ddim::{invariant_term_with, InvContext, InvMode};
use crate::error::{check_dim, Error, Result};
use crate::prior::ConditionalPrior;
use crate::schedule::{forward_noise, lambda_weight, loss_weight, LossWeighting, NoiseSchedule};
use crate::vector::{cosine, norm, sub};
use crate::EpsilonModel;

/// Default guidance scale for ISD.
pub const DEFAULT_GUIDANCE: f64 = 7.5;
/// Default step interval `c` for ISD.
pub const DEFAULT_INTERVAL: usize = 20;
/// Default mixing coefficient of the VSD approximation.
pub const DEFAULT_VSD_SIGMA: f64 = 0.5;
/// NFSD switches its δ_D branch above this fraction of `T`.
pub const NFSD_THRESHOLD_FRAC: f64 = 0.2;

/// Weighting applied to δ_inv.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LambdaMode {
    /// `√((β/α)[t−c] / (β/α)[t])`.
    #[default]
    Ratio,
    One,
}

impl LambdaMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            LambdaMode::Ratio => "ratio",
            LambdaMode::One => "one",
        }
    }
}

impl FromStr for LambdaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ratio" => Ok(LambdaMode::Ratio),
            "one" => Ok(LambdaMode::One),
            other => Err(Error::Config(format!("unknown lambda mode {other:?}"))),
        }
    }
}

/// Source of the negative-prompt prediction in NFSD.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NegMode {
    /// `ε̂(z_t; y_neg, t) ≈ ε̂(z_{t+c}; y, t+c)`, with `z_{t+c}` renoised from the same ε.
    ShiftedTime,
    /// A designated garbage condition of the prior, by label.
    JunkCondition(String),
}

impl fmt::Display for NegMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NegMode::ShiftedTime => f.write_str("shifted-time"),
            NegMode::JunkCondition(l) => write!(f, "junk:{l}"),
        }
    }
}

impl FromStr for NegMode {
    type Err = Error;

    /// `shifted-time` or `junk:<label>`.
    fn from_str(s: &str) -> Result<Self> {
        if s == "shifted-time" {
            return Ok(NegMode::ShiftedTime);
        }
        match s.strip_prefix("junk:") {
            Some(label) if !label.is_empty() => Ok(NegMode::JunkCondition(label.to_string())),
            _ => Err(Error::Config(format!("unknown neg mode {s:?}"))),
        }
    }
}

/// Estimator family with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum Estimator {
    Sds {
        guidance: f64,
    },
    ReconOnly,
    CfgOnly,
    Isd {
        guidance: f64,
        interval: usize,
        inv_mode: InvMode,
        lambda: LambdaMode,
    },
    Nfsd {
        guidance: f64,
        interval: usize,
        neg_mode: NegMode,
    },
    VsdApprox {
        guidance: f64,
        sigma: f64,
    },
}

impl Estimator {
    pub fn isd_default() -> Self {
        Estimator::Isd {
            guidance: DEFAULT_GUIDANCE,
            interval: DEFAULT_INTERVAL,
            inv_mode: InvMode::default(),
            lambda: LambdaMode::default(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Estimator::Sds { .. } => "sds",
            Estimator::ReconOnly => "recon-only",
            Estimator::CfgOnly => "cfg-only",
            Estimator::Isd { .. } => "isd",
            Estimator::Nfsd { .. } => "nfsd",
            Estimator::VsdApprox { .. } => "vsd-approx",
        }
    }

    /// Reject configurations that cannot be evaluated against `prior`'s labels.
    pub fn validate(&self, labels: &[String]) -> Result<()> {
        match self {
            Estimator::Nfsd {
                neg_mode: NegMode::JunkCondition(label),
                ..
            } => {
                if labels.iter().any(|l| l == label) {
                    Ok(())
                } else {
                    Err(Error::Config(format!(
                        "junk-component mode needs condition {label:?} in the prior"
                    )))
                }
            }
            Estimator::VsdApprox { sigma, .. } if !(0.0..=1.0).contains(sigma) => Err(
                Error::Config(format!("vsd sigma {sigma} outside [0, 1]")),
            ),
            _ => Ok(()),
        }
    }
}

/// One term of the decomposition. Absent terms hold zeros and `present = false`.
#[derive(Debug, Clone, PartialEq)]
pub struct Term {
    pub values: Vec<f64>,
    pub present: bool,
}

impl Term {
    fn present(values: Vec<f64>) -> Self {
        Self {
            values,
            present: true,
        }
    }

    fn absent(dim: usize) -> Self {
        Self {
            values: vec![0.0; dim],
            present: false,
        }
    }

    pub fn norm(&self) -> f64 {
        norm(&self.values)
    }
}

/// Coefficients that turn the raw terms into `total`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TermWeights {
    /// `w(t)`.
    pub loss_weight: f64,
    /// Coefficient on the invariant term (λ(t)); 0 when absent.
    pub lambda: f64,
    /// Coefficient on the classifier term.
    pub guidance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientTerms {
    /// Reconstruction-like term in play: δ_N (SDS, recon-only), δ_D (NFSD)
    /// or `ε̂(z_t; y) − ε_lora` (VSD approximation).
    pub recon: Term,
    pub cls: Term,
    pub inv: Term,
    pub total: Vec<f64>,
    pub weights: TermWeights,
    pub t: usize,
    pub c: usize,
    /// Which NFSD branch was taken, if any.
    pub branch: Option<&'static str>,
}

impl GradientTerms {
    /// Weighted contribution of each term; they sum to `total`.
    pub fn contributions(&self) -> [Vec<f64>; 3] {
        let w = &self.weights;
        let scaled = |term: &Term, k: f64| -> Vec<f64> {
            term.values.iter().map(|v| w.loss_weight * k * v).collect()
        };
        [
            scaled(&self.recon, 1.0),
            scaled(&self.cls, w.guidance),
            scaled(&self.inv, w.lambda),
        ]
    }

    /// `cos(contribution, total)` per term; `None` for absent or zero terms.
    pub fn cosines(&self) -> [Option<f64>; 3] {
        let contrib = self.contributions();
        let present = [self.recon.present, self.cls.present, self.inv.present];
        let mut out = [None; 3];
        for k in 0..3 {
            if present[k] {
                out[k] = cosine(&contrib[k], &self.total);
            }
        }
        out
    }

    fn assemble(
        recon: Term,
        cls: Term,
        inv: Term,
        weights: TermWeights,
        t: usize,
        c: usize,
    ) -> Self {
        let total = recon
            .values
            .iter()
            .zip(&cls.values)
            .zip(&inv.values)
            .map(|((r, k), i)| weights.loss_weight * (r + weights.guidance * k + weights.lambda * i))
            .collect();
        Self {
            recon,
            cls,
            inv,
            total,
            weights,
            t,
            c,
            branch: None,
        }
    }
}

/// Everything an estimator needs for one draw.
#[derive(Clone, Copy)]
pub struct EstimatorInput<'a> {
    pub x: &'a [f64],
    pub cond: Option<usize>,
    pub t: usize,
    pub eps: &'a [f64],
    pub model: &'a dyn EpsilonModel,
    /// Labels of the conditions the model was built with (for NFSD junk lookup).
    pub labels: &'a [String],
    pub sched: &'a NoiseSchedule,
    pub weighting: LossWeighting,
}

impl<'a> EstimatorInput<'a> {
    /// Input with the oracle of `prior` as the model.
    pub fn with_prior(
        x: &'a [f64],
        cond: Option<usize>,
        t: usize,
        eps: &'a [f64],
        prior: &'a ConditionalPrior,
        sched: &'a NoiseSchedule,
    ) -> Self {
        Self {
            x,
            cond,
            t,
            eps,
            model: prior,
            labels: prior.labels(),
            sched,
            weighting: LossWeighting::default(),
        }
    }

    fn noised(&self) -> Result<Vec<f64>> {
        check_dim(self.model.dim(), self.x.len())?;
        forward_noise(self.x, self.t, self.eps, self.sched)
    }

    fn w_t(&self) -> Result<f64> {
        loss_weight(self.t, self.sched, self.weighting)
    }
}

/// Shared evaluations at `z_t`.
struct Predictions {
    z: Vec<f64>,
    cond: Vec<f64>,
}

fn predictions(input: &EstimatorInput<'_>) -> Result<Predictions> {
    let z = input.noised()?;
    let cond = input.model.predict(&z, input.t, input.cond, input.sched)?;
    Ok(Predictions { z, cond })
}

fn classifier_term(input: &EstimatorInput<'_>, p: &Predictions) -> Result<Vec<f64>> {
    let uncond = input.model.predict(&p.z, input.t, None, input.sched)?;
    Ok(sub(&p.cond, &uncond))
}

/// Evaluate `estimator` on one draw.
pub fn estimate(estimator: &Estimator, input: &EstimatorInput<'_>) -> Result<GradientTerms> {
    match estimator {
        Estimator::Sds { guidance } => sds_grad(input, *guidance),
        Estimator::ReconOnly => recon_only_grad(input),
        Estimator::CfgOnly => cfg_only_grad(input),
        Estimator::Isd {
            guidance,
            interval,
            inv_mode,
            lambda,
        } => isd_grad(input, *guidance, *interval, *inv_mode, *lambda),
        Estimator::Nfsd {
            guidance,
            interval,
            neg_mode,
        } => nfsd_grad(input, *guidance, *interval, neg_mode),
        Estimator::VsdApprox { guidance, sigma } => vsd_approx_grad(input, *guidance, *sigma),
    }
}

/// `w(t) · (ε̂(z_t; y) − ε + w δ_cls)`.
pub fn sds_grad(input: &EstimatorInput<'_>, guidance: f64) -> Result<GradientTerms> {
    let p = predictions(input)?;
    let recon = sub(&p.cond, input.eps);
    let cls = classifier_term(input, &p)?;
    let weights = TermWeights {
        loss_weight: input.w_t()?,
        lambda: 0.0,
        guidance,
    };
    Ok(GradientTerms::assemble(
        Term::present(recon),
        Term::present(cls),
        Term::absent(input.x.len()),
        weights,
        input.t,
        0,
    ))
}

/// `w(t) · (ε̂(z_t; y) − ε)`.
pub fn recon_only_grad(input: &EstimatorInput<'_>) -> Result<GradientTerms> {
    let p = predictions(input)?;
    let recon = sub(&p.cond, input.eps);
    let dim = input.x.len();
    let weights = TermWeights {
        loss_weight: input.w_t()?,
        lambda: 0.0,
        guidance: 0.0,
    };
    Ok(GradientTerms::assemble(
        Term::present(recon),
        Term::absent(dim),
        Term::absent(dim),
        weights,
        input.t,
        0,
    ))
}

/// `w(t) · δ_cls`.
pub fn cfg_only_grad(input: &EstimatorInput<'_>) -> Result<GradientTerms> {
    let p = predictions(input)?;
    let cls = classifier_term(input, &p)?;
    let dim = input.x.len();
    let weights = TermWeights {
        loss_weight: input.w_t()?,
        lambda: 0.0,
        guidance: 1.0,
    };
    Ok(GradientTerms::assemble(
        Term::absent(dim),
        Term::present(cls),
        Term::absent(dim),
        weights,
        input.t,
        0,
    ))
}

/// `w(t) · (λ(t) δ_inv + w δ_cls)`.
pub fn isd_grad(
    input: &EstimatorInput<'_>,
    guidance: f64,
    interval: usize,
    inv_mode: InvMode,
    lambda_mode: LambdaMode,
) -> Result<GradientTerms> {
    let p = predictions(input)?;
    let ctx = InvContext::with_source(&p.z, input.x, input.eps);
    let inv = invariant_term_with(
        &ctx,
        input.t,
        interval,
        &p.cond,
        input.model,
        input.cond,
        inv_mode,
        input.sched,
    )?;
    let cls = classifier_term(input, &p)?;
    let lambda = match lambda_mode {
        LambdaMode::Ratio => lambda_weight(input.t, interval, input.sched)?,
        LambdaMode::One => 1.0,
    };
    let weights = TermWeights {
        loss_weight: input.w_t()?,
        lambda,
        guidance,
    };
    Ok(GradientTerms::assemble(
        Term::absent(input.x.len()),
        Term::present(cls),
        Term::present(inv),
        weights,
        input.t,
        interval,
    ))
}

/// `w(t) · (δ_D + w δ_cls)`.
///
/// Above `0.2 T`, `δ_D = ε̂(z_t; ∅) − ε̂(z_t; y_neg)`; at or below it,
/// `δ_D = ε̂(z_t; ∅)`. The lower branch is this crate's choice and is
/// reported in [`GradientTerms::branch`].
pub fn nfsd_grad(
    input: &EstimatorInput<'_>,
    guidance: f64,
    interval: usize,
    neg_mode: &NegMode,
) -> Result<GradientTerms> {
    let p = predictions(input)?;
    let uncond = input.model.predict(&p.z, input.t, None, input.sched)?;
    let cls = sub(&p.cond, &uncond);
    let threshold = (NFSD_THRESHOLD_FRAC * input.sched.steps() as f64).round() as usize;
    let (delta_d, branch) = if input.t > threshold {
        let neg = match neg_mode {
            NegMode::ShiftedTime => {
                let shifted = input.t + interval;
                if shifted > input.sched.steps() {
                    return Err(Error::ShiftOverflow {
                        shifted,
                        max: input.sched.steps(),
                    });
                }
                let z_shift = forward_noise(input.x, shifted, input.eps, input.sched)?;
                input.model.predict(&z_shift, shifted, input.cond, input.sched)?
            }
            NegMode::JunkCondition(label) => {
                let idx = input
                    .labels
                    .iter()
                    .position(|l| l == label)
                    .ok_or_else(|| Error::UnknownCondition(label.clone()))?;
                input.model.predict(&p.z, input.t, Some(idx), input.sched)?
            }
        };
        (sub(&uncond, &neg), "negative")
    } else {
        (uncond, "unconditional")
    };
    let weights = TermWeights {
        loss_weight: input.w_t()?,
        lambda: 0.0,
        guidance,
    };
    let mut terms = GradientTerms::assemble(
        Term::present(delta_d),
        Term::present(cls),
        Term::absent(input.x.len()),
        weights,
        input.t,
        interval,
    );
    terms.branch = Some(branch);
    Ok(terms)
}

/// `w(t) · (cfg(ε̂_c, ε̂_u, w) − ε_lora)` with
/// `ε_lora ≈ √(1−σ²) ε̂(z_t; y) + σ ε`.
pub fn vsd_approx_grad(input: &EstimatorInput<'_>, guidance: f64, sigma: f64) -> Result<GradientTerms> {
    if !(0.0..=1.0).contains(&sigma) {
        return Err(Error::Config(format!("vsd sigma {sigma} outside [0, 1]")));
    }
    let p = predictions(input)?;
    let cls = classifier_term(input, &p)?;
    let keep = (1.0 - sigma * sigma).sqrt();
    let recon: Vec<f64> = p
        .cond
        .iter()
        .zip(input.eps)
        .map(|(c, e)| c - (keep * c + sigma * e))
        .collect();
    let weights = TermWeights {
        loss_weight: input.w_t()?,
        lambda: 0.0,
        guidance,
    };
    Ok(GradientTerms::assemble(
        Term::present(recon),
        Term::present(cls),
        Term::absent(input.x.len()),
        weights,
        input.t,
        0,
    ))
}
