//! Conditional Gaussian-mixture priors with a closed-form noise oracle.
//!
//! Each condition `y` owns an isotropic mixture. The unconditional prior is
//! the `q_y`-weighted pool of every condition's components. Under forward
//! noising a component `N(μ, s² I)` becomes `N(√ᾱ μ, v I)` with
//! `v = ᾱ s² + (1 − ᾱ)`, so the optimal noise prediction is
//!
//! ```text
//! ε̂(z) = √(1 − ᾱ) Σ_i r_i(z) (z − √ᾱ μ_i) / v_i,
//! r_i(z) ∝ π_i N(z; √ᾱ μ_i, v_i I).
//! ```
//!
//! Components with `sdev = 0` are point masses; a prior made of a single
//! point mass uses the exact expression `(z − √ᾱ μ) / √(1 − ᾱ)`.

use rand::Rng;

use crate::error::{check_dim, Error, Result};
use crate::schedule::NoiseSchedule;
use crate::{standard_normal, EpsilonModel};

const WEIGHT_TOLERANCE: f64 = 1e-12;
const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureComponent {
    pub mean: Vec<f64>,
    pub sdev: f64,
    pub weight: f64,
}

impl MixtureComponent {
    pub fn new(mean: Vec<f64>, sdev: f64, weight: f64) -> Self {
        Self { mean, sdev, weight }
    }

    pub fn is_delta(&self) -> bool {
        self.sdev == 0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalPrior {
    labels: Vec<String>,
    components: Vec<Vec<MixtureComponent>>,
    condition_weights: Vec<f64>,
    pooled: Vec<MixtureComponent>,
    dim: usize,
}

impl ConditionalPrior {
    /// Build a prior; component weights within each condition and the
    /// condition weights must each sum to one.
    pub fn new(
        labels: Vec<String>,
        components: Vec<Vec<MixtureComponent>>,
        condition_weights: Vec<f64>,
    ) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::InvalidPrior("no conditions".into()));
        }
        if labels.len() != components.len() || labels.len() != condition_weights.len() {
            return Err(Error::InvalidPrior(format!(
                "{} labels, {} component lists, {} condition weights",
                labels.len(),
                components.len(),
                condition_weights.len()
            )));
        }
        for (i, l) in labels.iter().enumerate() {
            if labels[..i].contains(l) {
                return Err(Error::InvalidPrior(format!("duplicate label {l:?}")));
            }
        }
        let dim = components
            .iter()
            .flatten()
            .next()
            .map(|c| c.mean.len())
            .ok_or_else(|| Error::InvalidPrior("no components".into()))?;
        if dim == 0 {
            return Err(Error::InvalidPrior("zero-dimensional means".into()));
        }
        for (label, comps) in labels.iter().zip(&components) {
            if comps.is_empty() {
                return Err(Error::InvalidPrior(format!("condition {label:?} is empty")));
            }
            for c in comps {
                if c.mean.len() != dim {
                    return Err(Error::InvalidPrior(format!(
                        "condition {label:?}: mean of dimension {} (expected {dim})",
                        c.mean.len()
                    )));
                }
                if !(c.weight > 0.0) || !c.weight.is_finite() {
                    return Err(Error::InvalidPrior(format!(
                        "condition {label:?}: non-positive weight {}",
                        c.weight
                    )));
                }
                if !(c.sdev >= 0.0) || !c.sdev.is_finite() {
                    return Err(Error::InvalidPrior(format!(
                        "condition {label:?}: invalid sdev {}",
                        c.sdev
                    )));
                }
            }
            let total: f64 = comps.iter().map(|c| c.weight).sum();
            if (total - 1.0).abs() > WEIGHT_TOLERANCE {
                return Err(Error::InvalidPrior(format!(
                    "condition {label:?}: component weights sum to {total}"
                )));
            }
        }
        if condition_weights.iter().any(|q| !(*q > 0.0)) {
            return Err(Error::InvalidPrior("non-positive condition weight".into()));
        }
        let total: f64 = condition_weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_TOLERANCE {
            return Err(Error::InvalidPrior(format!(
                "condition weights sum to {total}"
            )));
        }
        let pooled = components
            .iter()
            .zip(&condition_weights)
            .flat_map(|(comps, q)| {
                comps
                    .iter()
                    .map(move |c| MixtureComponent::new(c.mean.clone(), c.sdev, q * c.weight))
            })
            .collect();
        Ok(Self {
            labels,
            components,
            condition_weights,
            pooled,
            dim,
        })
    }

    /// Like [`ConditionalPrior::new`] but rescales positive weights to sum to one.
    pub fn normalized(
        labels: Vec<String>,
        mut components: Vec<Vec<MixtureComponent>>,
        mut condition_weights: Vec<f64>,
    ) -> Result<Self> {
        for comps in &mut components {
            let total: f64 = comps.iter().map(|c| c.weight).sum();
            if total > 0.0 {
                comps.iter_mut().for_each(|c| c.weight /= total);
            }
        }
        let total: f64 = condition_weights.iter().sum();
        if total > 0.0 {
            condition_weights.iter_mut().for_each(|q| *q /= total);
        }
        Self::new(labels, components, condition_weights)
    }

    /// A single condition holding one isotropic Gaussian (or point mass).
    pub fn single(label: &str, mean: Vec<f64>, sdev: f64) -> Result<Self> {
        Self::new(
            vec![label.to_string()],
            vec![vec![MixtureComponent::new(mean, sdev, 1.0)]],
            vec![1.0],
        )
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn condition_weights(&self) -> &[f64] {
        &self.condition_weights
    }

    pub fn num_conditions(&self) -> usize {
        self.labels.len()
    }

    pub fn label_index(&self, label: &str) -> Result<usize> {
        self.labels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| Error::UnknownCondition(label.to_string()))
    }

    /// Components of a condition, or the pooled mixture for `None`.
    pub fn components(&self, cond: Option<usize>) -> Result<&[MixtureComponent]> {
        match cond {
            None => Ok(&self.pooled),
            Some(i) => self
                .components
                .get(i)
                .map(Vec::as_slice)
                .ok_or_else(|| Error::UnknownCondition(format!("#{i}"))),
        }
    }

    pub fn has_delta(&self) -> bool {
        self.pooled.iter().any(MixtureComponent::is_delta)
    }

    /// Posterior responsibilities of each component for a noised point.
    pub fn responsibilities(
        &self,
        z: &[f64],
        t: usize,
        cond: Option<usize>,
        sched: &NoiseSchedule,
    ) -> Result<Vec<f64>> {
        check_dim(self.dim, z.len())?;
        sched.check_t(t, 1)?;
        let comps = self.components(cond)?;
        let a = sched.alpha_bar(t);
        let (_, resp) = noised_log_weights(comps, z, a, sched.beta_bar(t));
        Ok(resp)
    }

    /// Exact noise prediction `ε̂(z; cond, t)`.
    pub fn epsilon_oracle(
        &self,
        z: &[f64],
        t: usize,
        cond: Option<usize>,
        sched: &NoiseSchedule,
    ) -> Result<Vec<f64>> {
        check_dim(self.dim, z.len())?;
        sched.check_t(t, 1)?;
        let comps = self.components(cond)?;
        let a = sched.alpha_bar(t);
        let b = sched.beta_bar(t);
        let sqrt_a = a.sqrt();
        let sqrt_b = b.sqrt();

        if let [only] = comps {
            if only.is_delta() {
                return Ok(z
                    .iter()
                    .zip(&only.mean)
                    .map(|(zi, mi)| (zi - sqrt_a * mi) / sqrt_b)
                    .collect());
            }
        }

        let (vars, resp) = noised_log_weights(comps, z, a, b);
        let mut out = vec![0.0; self.dim];
        for ((c, v), r) in comps.iter().zip(&vars).zip(&resp) {
            if *r == 0.0 {
                continue;
            }
            let k = r / v;
            for ((o, zi), mi) in out.iter_mut().zip(z).zip(&c.mean) {
                *o += k * (zi - sqrt_a * mi);
            }
        }
        out.iter_mut().for_each(|o| *o *= sqrt_b);
        Ok(out)
    }

    /// Log density of the clean (t = 0) mixture.
    pub fn log_density(&self, x: &[f64], cond: Option<usize>) -> Result<f64> {
        check_dim(self.dim, x.len())?;
        let comps = self.components(cond)?;
        if comps.iter().any(MixtureComponent::is_delta) {
            return Err(Error::DeltaComponent);
        }
        let logs: Vec<f64> = comps
            .iter()
            .map(|c| c.weight.ln() + gaussian_log_pdf(x, &c.mean, 1.0, c.sdev * c.sdev))
            .collect();
        Ok(log_sum_exp(&logs))
    }

    /// Ancestral sample: pick a component by weight, then add `s · N(0, I)`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, cond: Option<usize>) -> Result<Vec<f64>> {
        let comps = self.components(cond)?;
        let idx = pick_index(rng, comps.iter().map(|c| c.weight));
        let c = &comps[idx];
        let noise = standard_normal(rng, self.dim);
        Ok(c
            .mean
            .iter()
            .zip(&noise)
            .map(|(m, n)| m + c.sdev * n)
            .collect())
    }

    /// Sample a condition index according to `q_y`.
    pub fn sample_condition<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        pick_index(rng, self.condition_weights.iter().copied())
    }
}

impl EpsilonModel for ConditionalPrior {
    fn dim(&self) -> usize {
        self.dim
    }

    fn num_conditions(&self) -> usize {
        self.labels.len()
    }

    fn predict(
        &self,
        z: &[f64],
        t: usize,
        cond: Option<usize>,
        sched: &NoiseSchedule,
    ) -> Result<Vec<f64>> {
        self.epsilon_oracle(z, t, cond, sched)
    }
}

/// Draw one sample of `cond` (or of the pooled prior) from `prior`.
pub fn sample_prior<R: Rng + ?Sized>(
    rng: &mut R,
    cond: Option<usize>,
    prior: &ConditionalPrior,
) -> Result<Vec<f64>> {
    prior.sample(rng, cond)
}

fn pick_index<R: Rng + ?Sized>(rng: &mut R, weights: impl Iterator<Item = f64> + Clone) -> usize {
    let total: f64 = weights.clone().sum();
    let u: f64 = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (i, w) in weights.enumerate() {
        acc += w;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

/// Per-component noised variances and normalised responsibilities.
fn noised_log_weights(
    comps: &[MixtureComponent],
    z: &[f64],
    a: f64,
    b: f64,
) -> (Vec<f64>, Vec<f64>) {
    let sqrt_a = a.sqrt();
    let vars: Vec<f64> = comps.iter().map(|c| a * c.sdev * c.sdev + b).collect();
    let logs: Vec<f64> = comps
        .iter()
        .zip(&vars)
        .map(|(c, v)| c.weight.ln() + gaussian_log_pdf(z, &c.mean, sqrt_a, *v))
        .collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut resp: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = resp.iter().sum();
    resp.iter_mut().for_each(|r| *r /= total);
    (vars, resp)
}

/// `log N(z; scale·mean, var·I)`.
fn gaussian_log_pdf(z: &[f64], mean: &[f64], scale: f64, var: f64) -> f64 {
    let sq: f64 = z
        .iter()
        .zip(mean)
        .map(|(zi, mi)| {
            let d = zi - scale * mi;
            d * d
        })
        .sum();
    -0.5 * z.len() as f64 * (LN_2PI + var.ln()) - 0.5 * sq / var
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}
