//! DDIM prediction and stepping.
//!
//! ```text
//! x₀ᵗ    = (z_t − √(1−ᾱ_t) ε̂_t) / √ᾱ_t
//! z_prev = √ᾱ_prev x₀ᵗ + √(1−ᾱ_prev−σ²) ε̂_t + σ ε
//! ```
//!
//! The residual between two consecutive predictions and its σ = 0 special
//! case (the invariant score term) live here too, together with a strided
//! chain sampler used to validate models.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{check_dim, Error, Result};
use crate::schedule::{forward_noise, interval_start, NoiseSchedule, ALPHA_BAR_FLOOR};
use crate::{standard_normal, EpsilonModel};

/// Noise scale of a DDIM step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SigmaMode {
    /// Deterministic step.
    Zero,
    /// `σ = √(1 − ᾱ_prev)`: the ε̂ coefficient vanishes.
    Full,
    /// `σ = η √((1−ᾱ_prev)/(1−ᾱ_t)) √(1 − ᾱ_t/ᾱ_prev)`.
    Eta(f64),
}

impl SigmaMode {
    pub fn sigma(&self, t: usize, t_prev: usize, sched: &NoiseSchedule) -> f64 {
        let a = sched.alpha_bar(t);
        let a_prev = sched.alpha_bar(t_prev);
        match *self {
            SigmaMode::Zero => 0.0,
            SigmaMode::Full => (1.0 - a_prev).sqrt(),
            SigmaMode::Eta(eta) => {
                if eta == 0.0 {
                    return 0.0;
                }
                eta * ((1.0 - a_prev) / (1.0 - a)).sqrt() * (1.0 - a / a_prev).sqrt()
            }
        }
    }
}

impl fmt::Display for SigmaMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SigmaMode::Zero => f.write_str("zero"),
            SigmaMode::Full => f.write_str("full"),
            SigmaMode::Eta(eta) => write!(f, "eta:{eta}"),
        }
    }
}

impl FromStr for SigmaMode {
    type Err = Error;

    /// `zero`, `full` or `eta:<value>`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(SigmaMode::Zero),
            "full" => Ok(SigmaMode::Full),
            _ => {
                let eta = s
                    .strip_prefix("eta:")
                    .and_then(|v| v.trim().parse::<f64>().ok())
                    .ok_or_else(|| Error::Config(format!("unknown sigma mode {s:?}")))?;
                if !(0.0..=1.0).contains(&eta) {
                    return Err(Error::Config(format!("eta {eta} outside [0, 1]")));
                }
                Ok(SigmaMode::Eta(eta))
            }
        }
    }
}

/// How the earlier point `z_{t−c}` is built for the invariant term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InvMode {
    /// One deterministic DDIM step from `z_t`.
    #[default]
    DdimHop,
    /// `√ᾱ_{t−c} x + √(1−ᾱ_{t−c}) ε` with the same ε that produced `z_t`.
    Renoise,
}

impl InvMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            InvMode::DdimHop => "ddim-hop",
            InvMode::Renoise => "renoise",
        }
    }
}

impl FromStr for InvMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddim-hop" => Ok(InvMode::DdimHop),
            "renoise" => Ok(InvMode::Renoise),
            other => Err(Error::Config(format!("unknown inv mode {other:?}"))),
        }
    }
}

/// `x₀ᵗ = (z − √(1−ᾱ_t) ε̂) / √ᾱ_t`.
pub fn predict_x0(z: &[f64], t: usize, eps_hat: &[f64], sched: &NoiseSchedule) -> Result<Vec<f64>> {
    check_dim(z.len(), eps_hat.len())?;
    sched.check_t(t, 1)?;
    let a = sched.alpha_bar(t);
    if a < ALPHA_BAR_FLOOR {
        return Err(Error::AlphaBelowFloor { t, alpha_bar: a });
    }
    let sqrt_a = a.sqrt();
    let sqrt_b = sched.beta_bar(t).sqrt();
    Ok(z
        .iter()
        .zip(eps_hat)
        .map(|(zi, ei)| (zi - sqrt_b * ei) / sqrt_a)
        .collect())
}

/// Result of one DDIM step.
#[derive(Debug, Clone, PartialEq)]
pub struct DdimStep {
    pub z_prev: Vec<f64>,
    pub x0: Vec<f64>,
    pub eps_hat: Vec<f64>,
    pub sigma: f64,
    /// Fresh noise drawn for the step; `None` when σ = 0.
    pub noise: Option<Vec<f64>>,
}

/// DDIM step with a precomputed prediction `eps_hat`.
pub fn ddim_update<R: Rng + ?Sized>(
    z: &[f64],
    t: usize,
    t_prev: usize,
    eps_hat: Vec<f64>,
    sigma: SigmaMode,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<DdimStep> {
    if t_prev >= t {
        return Err(Error::Config(format!("t_prev = {t_prev} must be below t = {t}")));
    }
    sched.check_t(t, 1)?;
    let x0 = predict_x0(z, t, &eps_hat, sched)?;
    let a_prev = sched.alpha_bar(t_prev);
    let sigma = sigma.sigma(t, t_prev, sched);
    let sigma_sq = sigma * sigma;
    let limit = 1.0 - a_prev;
    if sigma_sq > limit * (1.0 + 1e-12) {
        return Err(Error::SigmaTooLarge { sigma_sq, limit });
    }
    // σ = √(1 − ᾱ_prev) must drop ε̂ exactly, not leave √(round-off) of it.
    let dir = if sigma_sq >= limit * (1.0 - 1e-12) {
        0.0
    } else {
        (limit - sigma_sq).sqrt()
    };
    let sqrt_a_prev = a_prev.sqrt();
    let mut z_prev: Vec<f64> = x0
        .iter()
        .zip(&eps_hat)
        .map(|(x, e)| sqrt_a_prev * x + dir * e)
        .collect();
    let noise = if sigma > 0.0 {
        let n = standard_normal(rng, z.len());
        crate::vector::axpy(&mut z_prev, sigma, &n);
        Some(n)
    } else {
        None
    };
    Ok(DdimStep {
        z_prev,
        x0,
        eps_hat,
        sigma,
        noise,
    })
}

/// DDIM step evaluating the model's conditional prediction at `(z, t)`.
#[allow(clippy::too_many_arguments)]
pub fn ddim_step<R: Rng + ?Sized>(
    z: &[f64],
    t: usize,
    t_prev: usize,
    sigma: SigmaMode,
    model: &dyn EpsilonModel,
    cond: Option<usize>,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<DdimStep> {
    let eps_hat = model.predict(z, t, cond, sched)?;
    ddim_update(z, t, t_prev, eps_hat, sigma, sched, rng)
}

/// Residual between the predictions at `t − c` and `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Residual {
    /// `ε̂(z_{t−c}; t−c) − √(1−σ̃²) ε̂(z_t; t) − σ̃ ε`.
    pub delta: Vec<f64>,
    pub z_prev: Vec<f64>,
    pub eps_t: Vec<f64>,
    pub eps_prev: Vec<f64>,
    /// Raw DDIM noise scale σ_t of the hop.
    pub sigma: f64,
    /// σ̃ = σ_t / √(1 − ᾱ_{t−c}).
    pub sigma_rel: f64,
    /// Fresh noise used by the hop, if any.
    pub noise: Option<Vec<f64>>,
}

/// Residual term of a DDIM hop from `t` to `t − c`.
///
/// σ enters relative to the noise level of the target step, `σ̃ = σ_t /
/// √(1−ᾱ_{t−c})`, which is what makes the expression the bracket of
///
/// ```text
/// x₀^{t−c} = x₀ᵗ − √(1−ᾱ_{t−c})/√ᾱ_{t−c} · δ_res
/// ```
///
/// With σ = 0 this is the invariant term; with σ full and c = 1 it is
/// `ε̂(z_{t−1}; t−1) − ε`.
#[allow(clippy::too_many_arguments)]
pub fn residual_term<R: Rng + ?Sized>(
    z: &[f64],
    t: usize,
    c: usize,
    sigma: SigmaMode,
    model: &dyn EpsilonModel,
    cond: Option<usize>,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<Residual> {
    if c == 0 || t < c + 1 {
        return Err(Error::IntervalUnderflow { t, c });
    }
    let t_prev = t - c;
    let step = ddim_step(z, t, t_prev, sigma, model, cond, sched, rng)?;
    let eps_prev = model.predict(&step.z_prev, t_prev, cond, sched)?;
    let sigma_rel = step.sigma / sched.beta_bar(t_prev).sqrt();
    let keep = if sigma_rel * sigma_rel >= 1.0 - 1e-12 {
        0.0
    } else {
        (1.0 - sigma_rel * sigma_rel).sqrt()
    };
    let mut delta: Vec<f64> = eps_prev
        .iter()
        .zip(&step.eps_hat)
        .map(|(p, e)| p - keep * e)
        .collect();
    if let Some(n) = &step.noise {
        crate::vector::axpy(&mut delta, -sigma_rel, n);
    }
    Ok(Residual {
        delta,
        z_prev: step.z_prev,
        eps_t: step.eps_hat,
        eps_prev,
        sigma: step.sigma,
        sigma_rel,
        noise: step.noise,
    })
}

/// Inputs available when forming the invariant term.
#[derive(Debug, Clone, Copy)]
pub struct InvContext<'a> {
    pub z: &'a [f64],
    /// Clean point and noise that produced `z`, needed by [`InvMode::Renoise`].
    pub x: Option<&'a [f64]>,
    pub eps: Option<&'a [f64]>,
}

impl<'a> InvContext<'a> {
    pub fn new(z: &'a [f64]) -> Self {
        Self {
            z,
            x: None,
            eps: None,
        }
    }

    pub fn with_source(z: &'a [f64], x: &'a [f64], eps: &'a [f64]) -> Self {
        Self {
            z,
            x: Some(x),
            eps: Some(eps),
        }
    }
}

/// `δ_inv = ε̂(z_{t−c}; y, t−c) − ε̂(z_t; y, t)`, with `t − c` clamped to 1.
pub fn invariant_term(
    ctx: &InvContext<'_>,
    t: usize,
    c: usize,
    model: &dyn EpsilonModel,
    cond: Option<usize>,
    mode: InvMode,
    sched: &NoiseSchedule,
) -> Result<Vec<f64>> {
    let eps_t = model.predict(ctx.z, t, cond, sched)?;
    invariant_term_with(ctx, t, c, &eps_t, model, cond, mode, sched)
}

/// [`invariant_term`] reusing an already evaluated `ε̂(z_t; y, t)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn invariant_term_with(
    ctx: &InvContext<'_>,
    t: usize,
    c: usize,
    eps_t: &[f64],
    model: &dyn EpsilonModel,
    cond: Option<usize>,
    mode: InvMode,
    sched: &NoiseSchedule,
) -> Result<Vec<f64>> {
    let t_prev = interval_start(t, c);
    if c == 0 || t_prev >= t {
        return Ok(vec![0.0; ctx.z.len()]);
    }
    let z_prev = match mode {
        InvMode::DdimHop => {
            let x0 = predict_x0(ctx.z, t, eps_t, sched)?;
            let sqrt_a = sched.alpha_bar(t_prev).sqrt();
            let sqrt_b = sched.beta_bar(t_prev).sqrt();
            x0.iter()
                .zip(eps_t)
                .map(|(x, e)| sqrt_a * x + sqrt_b * e)
                .collect::<Vec<_>>()
        }
        InvMode::Renoise => {
            let (x, eps) = match (ctx.x, ctx.eps) {
                (Some(x), Some(eps)) => (x, eps),
                _ => return Err(Error::MissingContext("renoise needs the clean point and its noise")),
            };
            forward_noise(x, t_prev, eps, sched)?
        }
    };
    let eps_prev = model.predict(&z_prev, t_prev, cond, sched)?;
    Ok(crate::vector::sub(&eps_prev, eps_t))
}

/// Classifier-free guidance: `(1 + w) ε_c − w ε_u`.
pub fn cfg_combine(eps_cond: &[f64], eps_uncond: &[f64], w: f64) -> Result<Vec<f64>> {
    check_dim(eps_cond.len(), eps_uncond.len())?;
    Ok(eps_cond
        .iter()
        .zip(eps_uncond)
        .map(|(c, u)| (1.0 + w) * c - w * u)
        .collect())
}

/// Descending ladder `T, T − stride, …, 0`; the last hop may be shorter.
pub fn timestep_ladder(steps: usize, stride: usize) -> Result<Vec<usize>> {
    if stride == 0 {
        return Err(Error::Config("stride must be positive".into()));
    }
    let mut ladder: Vec<usize> = (0..)
        .map(|k| steps as i64 - (k * stride) as i64)
        .take_while(|t| *t > 0)
        .map(|t| t as usize)
        .collect();
    ladder.push(0);
    Ok(ladder)
}

/// Run `n` strided DDIM chains from `z_T ~ N(0, I)` and return the final
/// x₀ predictions.
#[allow(clippy::too_many_arguments)]
pub fn sample_chain<R: Rng + ?Sized>(
    model: &dyn EpsilonModel,
    cond: Option<usize>,
    sched: &NoiseSchedule,
    stride: usize,
    sigma: SigmaMode,
    cfg_w: Option<f64>,
    rng: &mut R,
    n: usize,
) -> Result<Vec<Vec<f64>>> {
    let ladder = timestep_ladder(sched.steps(), stride)?;
    let dim = model.dim();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut z = standard_normal(rng, dim);
        for pair in ladder.windows(2) {
            let (t, t_prev) = (pair[0], pair[1]);
            let eps = guided_prediction(model, &z, t, cond, cfg_w, sched)?;
            if t_prev == 0 {
                z = predict_x0(&z, t, &eps, sched)?;
                break;
            }
            z = ddim_update(&z, t, t_prev, eps, sigma, sched, rng)?.z_prev;
        }
        out.push(z);
    }
    Ok(out)
}

fn guided_prediction(
    model: &dyn EpsilonModel,
    z: &[f64],
    t: usize,
    cond: Option<usize>,
    cfg_w: Option<f64>,
    sched: &NoiseSchedule,
) -> Result<Vec<f64>> {
    let eps_c = model.predict(z, t, cond, sched)?;
    match (cfg_w, cond) {
        (Some(w), Some(_)) if w != 0.0 => {
            let eps_u = model.predict(z, t, None, sched)?;
            cfg_combine(&eps_c, &eps_u, w)
        }
        _ => Ok(eps_c),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prior::{ConditionalPrior, MixtureComponent};
    use crate::schedule::{build_schedule, ScheduleKind};
    use crate::seeded_rng;

    fn linear() -> NoiseSchedule {
        build_schedule(ScheduleKind::LinearAlphaBar, 100).unwrap()
    }

    #[test]
    fn predict_x0_inverts_forward_noise() {
        let s = build_schedule(ScheduleKind::DdpmLinear, 1000).unwrap();
        let x = [0.3, -2.0, 1.1];
        let eps = [1.0, 0.2, -0.7];
        let z = forward_noise(&x, 400, &eps, &s).unwrap();
        let x0 = predict_x0(&z, 400, &eps, &s).unwrap();
        for (a, b) in x0.iter().zip(&x) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn delta_prior_reconstructs_its_mean() {
        let s = linear();
        let prior = ConditionalPrior::single("y", vec![3.0, 0.0], 0.0).unwrap();
        let z = [1.8, 0.8];
        let e = prior.predict(&z, 64, Some(0), &s).unwrap();
        let x0 = predict_x0(&z, 64, &e, &s).unwrap();
        assert!((x0[0] - 3.0).abs() < 1e-12 && x0[1].abs() < 1e-12);
    }

    #[test]
    fn mixture_x0_is_responsibility_weighted_blend() {
        let s = build_schedule(ScheduleKind::DdpmLinear, 1000).unwrap();
        let sd = 0.3;
        let prior = ConditionalPrior::new(
            vec!["y".into()],
            vec![vec![
                MixtureComponent::new(vec![-2.0, 0.0], sd, 0.5),
                MixtureComponent::new(vec![2.0, 1.0], sd, 0.5),
            ]],
            vec![1.0],
        )
        .unwrap();
        let z = [0.3, -0.4];
        let t = 800;
        let e = prior.predict(&z, t, Some(0), &s).unwrap();
        let x0 = predict_x0(&z, t, &e, &s).unwrap();
        // Posterior mean of x given z: Σ r_i (μ_i + √ᾱ s² (z − √ᾱ μ_i) / v_i).
        let a = s.alpha_bar(t);
        let v = a * sd * sd + 1.0 - a;
        let r = prior.responsibilities(&z, t, Some(0), &s).unwrap();
        let comps = prior.components(Some(0)).unwrap();
        for k in 0..2 {
            let expected: f64 = comps
                .iter()
                .zip(&r)
                .map(|(c, ri)| ri * (c.mean[k] + a.sqrt() * sd * sd * (z[k] - a.sqrt() * c.mean[k]) / v))
                .sum();
            assert!((x0[k] - expected).abs() < 1e-9, "{} vs {expected}", x0[k]);
        }
    }

    #[test]
    fn deterministic_step_on_delta_prior() {
        let s = linear();
        let prior = ConditionalPrior::single("y", vec![3.0, 0.0], 0.0).unwrap();
        let mut rng = seeded_rng(0);
        // 0.36 at t = 64, 0.64 at t = 36
        let step = ddim_step(&[1.8, 0.8], 64, 36, SigmaMode::Zero, &prior, Some(0), &s, &mut rng).unwrap();
        assert!((step.z_prev[0] - 2.4).abs() < 1e-12 && (step.z_prev[1] - 0.6).abs() < 1e-12);
        assert!(step.noise.is_none());
    }

    #[test]
    fn full_sigma_drops_the_prediction() {
        let s = linear();
        let prior = ConditionalPrior::single("y", vec![3.0, 0.0], 0.0).unwrap();
        let mut a = seeded_rng(5);
        let step = ddim_step(&[1.8, 0.8], 64, 63, SigmaMode::Full, &prior, Some(0), &s, &mut a).unwrap();
        let noise = step.noise.clone().unwrap();
        let sa = s.alpha_bar(63).sqrt();
        let sb = s.beta_bar(63).sqrt();
        for k in 0..2 {
            let expected = sa * step.x0[k] + sb * noise[k];
            assert!((step.z_prev[k] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn eta_one_matches_ancestral_variance() {
        // Posterior variance of q(z_prev | z_t, x0): (1−ᾱ_prev)/(1−ᾱ_t) · (1 − ᾱ_t/ᾱ_prev).
        let s = build_schedule(ScheduleKind::Cosine, 1000).unwrap();
        for (t, tp) in [(500, 480), (20, 1), (999, 980)] {
            let a = s.alpha_bar(t);
            let ap = s.alpha_bar(tp);
            let beta_step = 1.0 - a / ap;
            let posterior_var = (1.0 - ap) / (1.0 - a) * beta_step;
            let sigma = SigmaMode::Eta(1.0).sigma(t, tp, &s);
            assert!((sigma * sigma - posterior_var).abs() < 1e-14);
        }
    }

    #[test]
    fn oversized_sigma_is_rejected() {
        let s = linear();
        let mut rng = seeded_rng(0);
        let err = ddim_update(&[0.0], 50, 40, vec![0.0], SigmaMode::Eta(1.0), &s, &mut rng);
        assert!(err.is_ok());
        assert!(ddim_update(&[0.0], 40, 50, vec![0.0], SigmaMode::Zero, &s, &mut rng).is_err());
    }

    #[test]
    fn residual_with_zero_sigma_is_the_invariant_term() {
        let s = build_schedule(ScheduleKind::DdpmLinear, 1000).unwrap();
        let prior = ConditionalPrior::new(
            vec!["y".into()],
            vec![vec![
                MixtureComponent::new(vec![-1.0, 0.5], 0.4, 0.3),
                MixtureComponent::new(vec![1.5, 0.0], 0.2, 0.7),
            ]],
            vec![1.0],
        )
        .unwrap();
        let mut rng = seeded_rng(1);
        let z = [0.2, -0.3];
        let r = residual_term(&z, 600, 20, SigmaMode::Zero, &prior, Some(0), &s, &mut rng).unwrap();
        let inv = invariant_term(&InvContext::new(&z), 600, 20, &prior, Some(0), InvMode::DdimHop, &s).unwrap();
        assert_eq!(r.delta, inv);
        assert!(r.noise.is_none());
    }

    #[test]
    fn residual_interval_underflow() {
        let s = linear();
        let prior = ConditionalPrior::single("y", vec![0.0], 1.0).unwrap();
        let mut rng = seeded_rng(1);
        assert!(matches!(
            residual_term(&[0.0], 10, 10, SigmaMode::Zero, &prior, Some(0), &s, &mut rng),
            Err(Error::IntervalUnderflow { .. })
        ));
    }

    #[test]
    fn invariant_term_edge_cases() {
        let s = build_schedule(ScheduleKind::DdpmLinear, 1000).unwrap();
        let delta = ConditionalPrior::single("y", vec![1.0, -1.0], 0.0).unwrap();
        let z = [0.4, 2.0];
        for (t, c) in [(600, 20), (30, 50), (999, 1), (2, 1)] {
            let inv = invariant_term(&InvContext::new(&z), t, c, &delta, Some(0), InvMode::DdimHop, &s).unwrap();
            assert!(inv.iter().all(|v| v.abs() < 1e-12), "{t} {c}: {inv:?}");
        }
        let g = ConditionalPrior::single("y", vec![1.0, -1.0], 0.5).unwrap();
        let zero = invariant_term(&InvContext::new(&z), 600, 0, &g, Some(0), InvMode::DdimHop, &s).unwrap();
        assert_eq!(zero, vec![0.0, 0.0]);
        assert!(matches!(
            invariant_term(&InvContext::new(&z), 600, 20, &g, Some(0), InvMode::Renoise, &s),
            Err(Error::MissingContext(_))
        ));
    }

    #[test]
    fn cfg_examples() {
        assert_eq!(cfg_combine(&[1.0, 2.0], &[5.0, 6.0], 0.0).unwrap(), vec![1.0, 2.0]);
        assert_eq!(cfg_combine(&[1.0, 2.0], &[1.0, 2.0], 42.0).unwrap(), vec![1.0, 2.0]);
        assert_eq!(cfg_combine(&[1.0, 0.0], &[0.0, 1.0], 7.5).unwrap(), vec![8.5, -7.5]);
        assert!(cfg_combine(&[1.0], &[1.0, 2.0], 1.0).is_err());
    }

    #[test]
    fn ladder_shape() {
        assert_eq!(timestep_ladder(100, 30).unwrap(), vec![100, 70, 40, 10, 0]);
        assert_eq!(timestep_ladder(100, 50).unwrap(), vec![100, 50, 0]);
        assert!(timestep_ladder(100, 0).is_err());
    }

    #[test]
    fn sigma_mode_parsing() {
        assert_eq!("zero".parse::<SigmaMode>().unwrap(), SigmaMode::Zero);
        assert_eq!("eta:0.5".parse::<SigmaMode>().unwrap(), SigmaMode::Eta(0.5));
        assert!("eta:2".parse::<SigmaMode>().is_err());
        assert_eq!(SigmaMode::Eta(0.5).to_string().parse::<SigmaMode>().unwrap(), SigmaMode::Eta(0.5));
    }
}
