//! Discrete noise schedules, forward noising and timestep weighting.
//!
//! Every table is precomputed once so all modules read identical values.
//! `alpha_bar[t]` is the cumulative signal coefficient with `alpha_bar[0] = 1`
//! and `beta_bar[t] = 1 - alpha_bar[t]`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{check_dim, Error, Result};

/// Smallest `alpha_bar` produced by the closed-form linear schedule.
pub const LINEAR_ALPHA_BAR_FLOOR: f64 = 1e-6;

/// Below this `alpha_bar`, dividing by `sqrt(alpha_bar)` is refused.
pub const ALPHA_BAR_FLOOR: f64 = 1e-10;

const DDPM_BETA_START: f64 = 1e-4;
const DDPM_BETA_END: f64 = 0.02;
const COSINE_OFFSET: f64 = 0.008;
const COSINE_MAX_BETA: f64 = 0.999;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    /// Per-step variances linearly spaced in `[1e-4, 0.02]`.
    DdpmLinear,
    /// Squared-cosine profile with offset 0.008 and betas clipped at 0.999.
    Cosine,
    /// `alpha_bar[t] = 1 - t/T`, floored at 1e-6. Handy for hand-checked values.
    LinearAlphaBar,
}

impl ScheduleKind {
    pub const ALL: [ScheduleKind; 3] = [
        ScheduleKind::DdpmLinear,
        ScheduleKind::Cosine,
        ScheduleKind::LinearAlphaBar,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ScheduleKind::DdpmLinear => "ddpm-linear",
            ScheduleKind::Cosine => "cosine",
            ScheduleKind::LinearAlphaBar => "linear-alpha-bar",
        }
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddpm-linear" => Ok(ScheduleKind::DdpmLinear),
            "cosine" => Ok(ScheduleKind::Cosine),
            "linear-alpha-bar" => Ok(ScheduleKind::LinearAlphaBar),
            other => Err(Error::InvalidSchedule(format!("unknown kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    steps: usize,
    alpha_bar: Vec<f64>,
    beta_bar: Vec<f64>,
}

/// Build a schedule with `steps` discrete timesteps (tables of length `steps + 1`).
pub fn build_schedule(kind: ScheduleKind, steps: usize) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(Error::InvalidSchedule(format!(
            "need at least 2 timesteps, got {steps}"
        )));
    }
    let alpha_bar = match kind {
        ScheduleKind::DdpmLinear => {
            let mut table = Vec::with_capacity(steps + 1);
            table.push(1.0);
            let mut acc = 1.0;
            for i in 0..steps {
                let beta = DDPM_BETA_START
                    + (DDPM_BETA_END - DDPM_BETA_START) * i as f64 / (steps - 1) as f64;
                acc *= 1.0 - beta;
                table.push(acc);
            }
            table
        }
        ScheduleKind::Cosine => {
            let f = |t: usize| {
                let u = (t as f64 / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
                (u * std::f64::consts::FRAC_PI_2).cos().powi(2)
            };
            let mut table = Vec::with_capacity(steps + 1);
            table.push(1.0);
            let mut acc = 1.0;
            for t in 1..=steps {
                let beta = (1.0 - f(t) / f(t - 1)).min(COSINE_MAX_BETA);
                acc *= 1.0 - beta;
                table.push(acc);
            }
            table
        }
        ScheduleKind::LinearAlphaBar => (0..=steps)
            .map(|t| (1.0 - t as f64 / steps as f64).clamp(LINEAR_ALPHA_BAR_FLOOR, 1.0))
            .collect(),
    };
    let beta_bar = alpha_bar.iter().map(|a| 1.0 - a).collect();
    Ok(NoiseSchedule {
        kind,
        steps,
        alpha_bar,
        beta_bar,
    })
}

impl NoiseSchedule {
    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Number of timesteps `T`.
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn beta_bar(&self, t: usize) -> f64 {
        self.beta_bar[t]
    }

    pub fn alpha_bar_table(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn beta_bar_table(&self) -> &[f64] {
        &self.beta_bar
    }

    /// Signal-to-noise ratio `alpha_bar / beta_bar`.
    pub fn snr(&self, t: usize) -> f64 {
        self.alpha_bar[t] / self.beta_bar[t]
    }

    pub(crate) fn check_t(&self, t: usize, min: usize) -> Result<()> {
        if t < min || t > self.steps {
            return Err(Error::TimestepOutOfRange {
                t,
                min,
                max: self.steps,
            });
        }
        Ok(())
    }
}

/// `z_t = sqrt(alpha_bar[t]) x + sqrt(beta_bar[t]) eps`.
pub fn forward_noise(x: &[f64], t: usize, eps: &[f64], sched: &NoiseSchedule) -> Result<Vec<f64>> {
    check_dim(x.len(), eps.len())?;
    sched.check_t(t, 0)?;
    let a = sched.alpha_bar(t).sqrt();
    let b = sched.beta_bar(t).sqrt();
    Ok(x.iter().zip(eps).map(|(xi, ei)| a * xi + b * ei).collect())
}

/// The earlier timestep of an interval, clamped to 1.
pub fn interval_start(t: usize, c: usize) -> usize {
    t.saturating_sub(c).max(1)
}

/// `λ(t) = sqrt((β/α)[t−c] / (β/α)[t])`, with `t − c` clamped to 1.
pub fn lambda_weight(t: usize, c: usize, sched: &NoiseSchedule) -> Result<f64> {
    if t == 0 {
        return Err(Error::TimestepOutOfRange {
            t,
            min: 1,
            max: sched.steps(),
        });
    }
    sched.check_t(t, 1)?;
    if c == 0 {
        return Ok(1.0);
    }
    let prev = interval_start(t, c);
    let ratio_prev = sched.beta_bar(prev) / sched.alpha_bar(prev);
    let ratio_now = sched.beta_bar(t) / sched.alpha_bar(t);
    Ok((ratio_prev / ratio_now).sqrt())
}

/// How the per-timestep loss weight `w(t)` is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossWeighting {
    /// `w(t) = 1 - alpha_bar[t]`.
    #[default]
    OneMinusAlphaBar,
    Constant,
}

impl LossWeighting {
    pub fn as_str(&self) -> &'static str {
        match self {
            LossWeighting::OneMinusAlphaBar => "one-minus-alpha-bar",
            LossWeighting::Constant => "constant",
        }
    }
}

impl FromStr for LossWeighting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "one-minus-alpha-bar" => Ok(LossWeighting::OneMinusAlphaBar),
            "constant" => Ok(LossWeighting::Constant),
            other => Err(Error::Config(format!("unknown loss weighting {other:?}"))),
        }
    }
}

pub fn loss_weight(t: usize, sched: &NoiseSchedule, mode: LossWeighting) -> Result<f64> {
    sched.check_t(t, 1)?;
    Ok(match mode {
        LossWeighting::OneMinusAlphaBar => sched.beta_bar(t),
        LossWeighting::Constant => 1.0,
    })
}

/// Annealed uniform timestep sampling.
///
/// Before `anneal_at_frac * total_steps` the timestep is drawn from
/// `[round(lo_frac T), round(hi_frac T)]`; afterwards from the second pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimestepPolicy {
    pub lo_frac: f64,
    pub hi_frac: f64,
    pub anneal_at_frac: f64,
    pub lo_frac2: f64,
    pub hi_frac2: f64,
}

impl Default for TimestepPolicy {
    fn default() -> Self {
        Self {
            lo_frac: 0.02,
            hi_frac: 0.98,
            anneal_at_frac: 0.2,
            lo_frac2: 0.02,
            hi_frac2: 0.50,
        }
    }
}

impl TimestepPolicy {
    /// A policy that always samples the same fraction.
    pub fn fixed(frac: f64) -> Self {
        Self {
            lo_frac: frac,
            hi_frac: frac,
            anneal_at_frac: 1.0,
            lo_frac2: frac,
            hi_frac2: frac,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |lo: f64, hi: f64| lo > 0.0 && lo <= hi && hi <= 1.0;
        if !ok(self.lo_frac, self.hi_frac) || !ok(self.lo_frac2, self.hi_frac2) {
            return Err(Error::InvalidPolicy(format!(
                "fractions must satisfy 0 < lo <= hi <= 1: {self:?}"
            )));
        }
        if !(0.0..=1.0).contains(&self.anneal_at_frac) {
            return Err(Error::InvalidPolicy(format!(
                "anneal_at_frac {} outside [0, 1]",
                self.anneal_at_frac
            )));
        }
        Ok(())
    }

    /// Inclusive integer range in force at `step`.
    pub fn range(&self, step: usize, total_steps: usize, sched: &NoiseSchedule) -> Result<(usize, usize)> {
        let annealed = (step as f64) >= self.anneal_at_frac * total_steps as f64;
        let (lo, hi) = if annealed {
            (self.lo_frac2, self.hi_frac2)
        } else {
            (self.lo_frac, self.hi_frac)
        };
        let big_t = sched.steps() as f64;
        let lo_t = ((lo * big_t).round() as usize).max(1);
        let hi_t = ((hi * big_t).round() as usize).min(sched.steps());
        if lo_t > hi_t {
            return Err(Error::InvalidPolicy(format!(
                "empty timestep range [{lo_t}, {hi_t}] after rounding"
            )));
        }
        Ok((lo_t, hi_t))
    }
}

pub fn sample_timestep<R: Rng + ?Sized>(
    rng: &mut R,
    step: usize,
    total_steps: usize,
    policy: &TimestepPolicy,
    sched: &NoiseSchedule,
) -> Result<usize> {
    if total_steps == 0 || step >= total_steps {
        return Err(Error::InvalidPolicy(format!(
            "step {step} outside 0..{total_steps}"
        )));
    }
    let (lo, hi) = policy.range(step, total_steps, sched)?;
    Ok(rng.random_range(lo..=hi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded_rng;

    fn linear(t: usize) -> NoiseSchedule {
        build_schedule(ScheduleKind::LinearAlphaBar, t).unwrap()
    }

    #[test]
    fn linear_alpha_bar_midpoint() {
        assert_eq!(linear(1000).alpha_bar(500), 0.5);
        assert_eq!(linear(1000).alpha_bar(1000), LINEAR_ALPHA_BAR_FLOOR);
    }

    #[test]
    fn every_kind_starts_noise_free_and_decreases() {
        for kind in ScheduleKind::ALL {
            let s = build_schedule(kind, 1000).unwrap();
            assert_eq!(s.alpha_bar(0), 1.0);
            assert_eq!(s.beta_bar(0), 0.0);
            for t in 1..=1000 {
                assert!(s.alpha_bar(t) < s.alpha_bar(t - 1), "{kind} at {t}");
                assert!(s.alpha_bar(t) > 0.0);
                assert!((s.alpha_bar(t) + s.beta_bar(t) - 1.0).abs() <= f64::EPSILON);
            }
        }
    }

    #[test]
    fn ddpm_linear_matches_log_space_product() {
        // Independent route: accumulate ln(1 - beta) with compensated
        // summation and exponentiate once.
        let s = build_schedule(ScheduleKind::DdpmLinear, 1000).unwrap();
        let (mut sum, mut comp) = (0.0f64, 0.0f64);
        for i in 0..1000 {
            let beta = 1e-4 + (0.02 - 1e-4) * (i as f64) / 999.0;
            let y = (-beta).ln_1p() - comp;
            let tmp = sum + y;
            comp = (tmp - sum) - y;
            sum = tmp;
        }
        let expected = sum.exp();
        assert!((s.alpha_bar(1000) / expected - 1.0).abs() < 1e-12);
        assert!((expected - 4.035e-5).abs() < 1e-7);
        let w600 = loss_weight(600, &s, LossWeighting::OneMinusAlphaBar).unwrap();
        assert_eq!(w600, 1.0 - s.alpha_bar(600));
    }

    #[test]
    fn rejects_short_schedules() {
        assert!(build_schedule(ScheduleKind::Cosine, 1).is_err());
        assert!("sigmoid".parse::<ScheduleKind>().is_err());
    }

    #[test]
    fn forward_noise_examples() {
        let s = linear(1000);
        let x = [0.3, -1.2];
        let eps = [0.7, 0.1];
        assert_eq!(forward_noise(&x, 0, &eps, &s).unwrap(), x.to_vec());
        // alpha_bar = 0.36 at t = 640
        let z = forward_noise(&[1.0, 1.0], 640, &[0.0, 1.0], &s).unwrap();
        assert!((z[0] - 0.6).abs() < 1e-12 && (z[1] - 1.4).abs() < 1e-12);
        let z = forward_noise(&[0.0, 0.0], 1000, &eps, &s).unwrap();
        let k = s.beta_bar(1000).sqrt();
        assert_eq!(z, vec![k * 0.7, k * 0.1]);
        assert!(forward_noise(&x, 1001, &eps, &s).is_err());
        assert!(forward_noise(&x, 3, &[1.0], &s).is_err());
    }

    #[test]
    fn lambda_examples() {
        let s = linear(1000);
        assert_eq!(lambda_weight(500, 0, &s).unwrap(), 1.0);
        let expected = ((0.48f64 / 0.52) / (0.5 / 0.5)).sqrt();
        assert!((lambda_weight(500, 20, &s).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.96077).abs() < 1e-5);
        assert_eq!(
            lambda_weight(10, 20, &s).unwrap(),
            lambda_weight(10, 9, &s).unwrap()
        );
        assert!(lambda_weight(0, 20, &s).is_err());
    }

    #[test]
    fn loss_weight_modes() {
        let s = linear(1000);
        assert_eq!(loss_weight(250, &s, LossWeighting::Constant).unwrap(), 1.0);
        assert_eq!(
            loss_weight(250, &s, LossWeighting::OneMinusAlphaBar).unwrap(),
            0.25
        );
        assert!(loss_weight(0, &s, LossWeighting::Constant).is_err());
    }

    #[test]
    fn annealed_ranges() {
        let s = linear(1000);
        let p = TimestepPolicy::default();
        assert_eq!(p.range(0, 1000, &s).unwrap(), (20, 980));
        assert_eq!(p.range(900, 1000, &s).unwrap(), (20, 500));
        let mut rng = seeded_rng(3);
        for step in 0..1000 {
            let t = sample_timestep(&mut rng, step, 1000, &p, &s).unwrap();
            if step < 200 {
                assert!((20..=980).contains(&t));
            } else {
                assert!((20..=500).contains(&t));
            }
        }
        let fixed = TimestepPolicy::fixed(0.5);
        for step in 0..10 {
            assert_eq!(sample_timestep(&mut rng, step, 10, &fixed, &s).unwrap(), 500);
        }
        assert!(sample_timestep(&mut rng, 10, 10, &fixed, &s).is_err());
    }

    #[test]
    fn empty_range_after_rounding_is_an_error() {
        let s = linear(10);
        let p = TimestepPolicy {
            lo_frac: 0.01,
            hi_frac: 0.04,
            ..TimestepPolicy::default()
        };
        assert!(p.validate().is_ok());
        assert!(p.range(0, 10, &s).is_err());
        let bad = TimestepPolicy {
            lo_frac: 0.66,
            hi_frac: 0.64,
            ..TimestepPolicy::default()
        };
        assert!(bad.validate().is_err());
    }
}
