//! A two-hidden-layer tanh network predicting ε, trained with condition
//! dropout so one set of weights serves both the conditional and the null
//! prediction.
//!
//! Input: `[z (D), time features (8), one-hot condition (n_cond)]`. The null
//! condition is the all-zero one-hot. Time features are
//! `sin(2ᵏπ t/T), cos(2ᵏπ t/T)` for `k = 0..4`.
//!
//! Initialization: weights `N(0, 1/fan_in)`, biases zero, and the condition
//! columns of the first layer zero so an untrained model ignores the label.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{check_dim, Error, Result};
use crate::optimize::{AdamConfig, AdamState};
use crate::prior::ConditionalPrior;
use crate::schedule::{forward_noise, NoiseSchedule};
use crate::{standard_normal, EpsilonModel};

pub const TIME_FEATURES: usize = 8;
pub const DEFAULT_WIDTHS: (usize, usize) = (64, 64);
pub const DEFAULT_P_UNCOND: f64 = 0.1;

const MAGIC: &[u8; 4] = b"MLPD";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct MlpDenoiser {
    dim: usize,
    widths: (usize, usize),
    num_conditions: usize,
    p_uncond: f64,
    params: Vec<f64>,
}

/// One training example: predict `eps` from `z` at `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub z: Vec<f64>,
    pub t: usize,
    pub cond: Option<usize>,
    pub eps: Vec<f64>,
}

/// Offsets of each block inside the flat parameter vector.
#[derive(Debug, Clone, Copy)]
struct Layout {
    input: usize,
    h1: usize,
    h2: usize,
    out: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    w3: usize,
    b3: usize,
    len: usize,
}

impl Layout {
    fn new(dim: usize, num_conditions: usize, (h1, h2): (usize, usize)) -> Self {
        let input = dim + TIME_FEATURES + num_conditions;
        let w1 = 0;
        let b1 = w1 + h1 * input;
        let w2 = b1 + h1;
        let b2 = w2 + h2 * h1;
        let w3 = b2 + h2;
        let b3 = w3 + dim * h2;
        Self {
            input,
            h1,
            h2,
            out: dim,
            w1,
            b1,
            w2,
            b2,
            w3,
            b3,
            len: b3 + dim,
        }
    }
}

/// Activations kept for the backward pass.
struct Trace {
    input: Vec<f64>,
    h1: Vec<f64>,
    h2: Vec<f64>,
    out: Vec<f64>,
}

/// Per-step training losses.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossCurve {
    pub losses: Vec<f64>,
}

impl MlpDenoiser {
    /// Closed-form parameter count for the given shape.
    pub fn param_count(dim: usize, num_conditions: usize, widths: (usize, usize)) -> usize {
        Layout::new(dim, num_conditions, widths).len
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn widths(&self) -> (usize, usize) {
        self.widths
    }

    pub fn p_uncond(&self) -> f64 {
        self.p_uncond
    }

    pub fn num_conditions(&self) -> usize {
        self.num_conditions
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        check_dim(self.params.len(), params.len())?;
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::ModelFormat("non-finite parameter".into()));
        }
        self.params = params;
        Ok(())
    }

    fn layout(&self) -> Layout {
        Layout::new(self.dim, self.num_conditions, self.widths)
    }

    fn encode(&self, z: &[f64], t: usize, cond: Option<usize>, steps: usize) -> Vec<f64> {
        let mut input = Vec::with_capacity(self.layout().input);
        input.extend_from_slice(z);
        let phase = std::f64::consts::PI * t as f64 / steps as f64;
        for k in 0..TIME_FEATURES / 2 {
            let (s, c) = (phase * (1u32 << k) as f64).sin_cos();
            input.push(s);
            input.push(c);
        }
        input.extend((0..self.num_conditions).map(|i| if Some(i) == cond { 1.0 } else { 0.0 }));
        input
    }

    fn forward_trace(&self, input: Vec<f64>) -> Trace {
        let l = self.layout();
        let p = &self.params;
        let h1 = affine(&p[l.w1..l.b1], &p[l.b1..l.w2], &input, l.h1)
            .into_iter()
            .map(f64::tanh)
            .collect::<Vec<_>>();
        let h2 = affine(&p[l.w2..l.b2], &p[l.b2..l.w3], &h1, l.h2)
            .into_iter()
            .map(f64::tanh)
            .collect::<Vec<_>>();
        let out = affine(&p[l.w3..l.b3], &p[l.b3..l.len], &h2, l.out);
        Trace { input, h1, h2, out }
    }

    fn check_cond(&self, cond: Option<usize>) -> Result<()> {
        match cond {
            Some(c) if c >= self.num_conditions => Err(Error::UnknownCondition(format!("index {c}"))),
            _ => Ok(()),
        }
    }

    /// Mean squared error over all batch entries and coordinates, and its
    /// gradient with respect to the parameters.
    pub fn loss_and_grad(&self, batch: &[Example], steps: usize) -> Result<(f64, Vec<f64>)> {
        let l = self.layout();
        let p = &self.params;
        let mut grad = vec![0.0; l.len];
        let mut loss = 0.0;
        let scale = 1.0 / (batch.len().max(1) * self.dim) as f64;
        for ex in batch {
            check_dim(self.dim, ex.z.len())?;
            check_dim(self.dim, ex.eps.len())?;
            self.check_cond(ex.cond)?;
            let tr = self.forward_trace(self.encode(&ex.z, ex.t, ex.cond, steps));
            let d_out: Vec<f64> = tr
                .out
                .iter()
                .zip(&ex.eps)
                .map(|(o, e)| {
                    loss += (o - e) * (o - e) * scale;
                    2.0 * (o - e) * scale
                })
                .collect();
            accumulate(&mut grad[l.w3..l.len], &d_out, &tr.h2);
            let d_h2 = back(&p[l.w3..l.b3], &d_out, l.h2, &tr.h2);
            accumulate(&mut grad[l.w2..l.w3], &d_h2, &tr.h1);
            let d_h1 = back(&p[l.w2..l.b2], &d_h2, l.h1, &tr.h1);
            accumulate(&mut grad[l.w1..l.w2], &d_h1, &tr.input);
        }
        Ok((loss, grad))
    }
}

/// `W x + b` with `W` row-major `rows × x.len()`.
fn affine(w: &[f64], b: &[f64], x: &[f64], rows: usize) -> Vec<f64> {
    let cols = x.len();
    (0..rows)
        .map(|r| b[r] + w[r * cols..(r + 1) * cols].iter().zip(x).map(|(a, v)| a * v).sum::<f64>())
        .collect()
}

/// Add `δ ⊗ x` to the weight block and `δ` to the bias block that follows it.
fn accumulate(block: &mut [f64], delta: &[f64], x: &[f64]) {
    let cols = x.len();
    let (w, b) = block.split_at_mut(delta.len() * cols);
    for (r, d) in delta.iter().enumerate() {
        for (g, v) in w[r * cols..(r + 1) * cols].iter_mut().zip(x) {
            *g += d * v;
        }
        b[r] += d;
    }
}

/// `(Wᵀ δ) ⊙ (1 − h²)` for the tanh layer feeding `W`.
fn back(w: &[f64], delta: &[f64], cols: usize, h: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for (r, d) in delta.iter().enumerate() {
        for (o, a) in out.iter_mut().zip(&w[r * cols..(r + 1) * cols]) {
            *o += d * a;
        }
    }
    out.iter_mut().zip(h).for_each(|(o, h)| *o *= 1.0 - h * h);
    out
}

/// Fresh network with `num_conditions` label slots.
pub fn init_denoiser<R: Rng + ?Sized>(
    rng: &mut R,
    dim: usize,
    num_conditions: usize,
    widths: (usize, usize),
    p_uncond: f64,
) -> Result<MlpDenoiser> {
    if dim == 0 || widths.0 == 0 || widths.1 == 0 {
        return Err(Error::Config(format!(
            "network dimensions must be positive (dim {dim}, widths {widths:?})"
        )));
    }
    if !(0.0..=1.0).contains(&p_uncond) {
        return Err(Error::Config(format!("p_uncond {p_uncond} outside [0, 1]")));
    }
    let l = Layout::new(dim, num_conditions, widths);
    let mut params = vec![0.0; l.len];
    let cond_start = dim + TIME_FEATURES;
    let mut fill = |block: &mut [f64], cols: usize, skip_from: usize| {
        let scale = 1.0 / (cols as f64).sqrt();
        for (k, w) in block.iter_mut().enumerate() {
            let draw: f64 = rng.sample(StandardNormal);
            if k % cols < skip_from {
                *w = scale * draw;
            }
        }
    };
    fill(&mut params[l.w1..l.b1], l.input, cond_start);
    fill(&mut params[l.w2..l.b2], l.h1, l.h1);
    fill(&mut params[l.w3..l.b3], l.h2, l.h2);
    Ok(MlpDenoiser {
        dim,
        widths,
        num_conditions,
        p_uncond,
        params,
    })
}

/// Forward-noised training batch drawn from `prior`, with condition dropout.
pub fn draw_batch<R: Rng + ?Sized>(
    prior: &ConditionalPrior,
    sched: &NoiseSchedule,
    p_uncond: f64,
    batch: usize,
    rng: &mut R,
) -> Result<Vec<Example>> {
    (0..batch)
        .map(|_| {
            let cond = prior.sample_condition(rng);
            let x = prior.sample(rng, Some(cond))?;
            let t = rng.random_range(1..=sched.steps());
            let eps = standard_normal(rng, prior.dim());
            let z = forward_noise(&x, t, &eps, sched)?;
            let dropped = rng.random::<f64>() < p_uncond;
            Ok(Example {
                z,
                t,
                cond: if dropped { None } else { Some(cond) },
                eps,
            })
        })
        .collect()
}

/// Adam on the ε-prediction objective; one loss entry per step.
pub fn train_denoiser<R: Rng + ?Sized>(
    model: &mut MlpDenoiser,
    prior: &ConditionalPrior,
    sched: &NoiseSchedule,
    rng: &mut R,
    steps: usize,
    batch: usize,
    lr: f64,
) -> Result<LossCurve> {
    check_dim(model.dim, prior.dim())?;
    if prior.num_conditions() > model.num_conditions {
        return Err(Error::Config(format!(
            "prior has {} conditions, model {}",
            prior.num_conditions(),
            model.num_conditions
        )));
    }
    if batch == 0 {
        return Err(Error::Config("batch must be positive".into()));
    }
    let mut adam = AdamState::new(
        model.params.len(),
        AdamConfig {
            lr,
            ..AdamConfig::default()
        },
    );
    let mut curve = LossCurve::default();
    for step in 0..steps {
        let examples = draw_batch(prior, sched, model.p_uncond, batch, rng)?;
        let (loss, grad) = model.loss_and_grad(&examples, sched.steps())?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        adam.update(&mut model.params, &grad)?;
        curve.losses.push(loss);
    }
    Ok(curve)
}

/// Mean squared ε error of `model` over `examples`.
pub fn epsilon_mse(model: &dyn EpsilonModel, examples: &[Example], sched: &NoiseSchedule) -> Result<f64> {
    let mut total = 0.0;
    for ex in examples {
        let pred = model.predict(&ex.z, ex.t, ex.cond, sched)?;
        total += pred.iter().zip(&ex.eps).map(|(p, e)| (p - e) * (p - e)).sum::<f64>();
    }
    Ok(total / (examples.len() * model.dim()) as f64)
}

/// Deterministic forward pass.
pub fn epsilon_mlp(
    model: &MlpDenoiser,
    z: &[f64],
    t: usize,
    cond: Option<usize>,
    sched: &NoiseSchedule,
) -> Result<Vec<f64>> {
    check_dim(model.dim, z.len())?;
    sched.check_t(t, 1)?;
    model.check_cond(cond)?;
    Ok(model.forward_trace(model.encode(z, t, cond, sched.steps())).out)
}

impl EpsilonModel for MlpDenoiser {
    fn dim(&self) -> usize {
        self.dim
    }

    fn num_conditions(&self) -> usize {
        self.num_conditions
    }

    fn predict(&self, z: &[f64], t: usize, cond: Option<usize>, sched: &NoiseSchedule) -> Result<Vec<f64>> {
        epsilon_mlp(self, z, t, cond, sched)
    }
}

impl MlpDenoiser {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 4 + 8 * (6 + self.params.len()));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        for v in [self.dim, self.widths.0, self.widths.1, self.num_conditions] {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        out.extend_from_slice(&self.p_uncond.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::ModelFormat("bad magic bytes".into()));
        }
        let mut v = [0u8; 4];
        read_exact(&mut r, &mut v)?;
        let version = u32::from_le_bytes(v);
        if version != FORMAT_VERSION {
            return Err(Error::ModelFormat(format!("unsupported version {version}")));
        }
        let dim = read_u64(&mut r)? as usize;
        let h1 = read_u64(&mut r)? as usize;
        let h2 = read_u64(&mut r)? as usize;
        let num_conditions = read_u64(&mut r)? as usize;
        let p_uncond = read_f64(&mut r)?;
        let n = read_u64(&mut r)? as usize;
        let expected = MlpDenoiser::param_count(dim, num_conditions, (h1, h2));
        if n != expected || dim == 0 || h1 == 0 || h2 == 0 {
            return Err(Error::ModelFormat(format!(
                "parameter count {n} does not match shape ({expected} expected)"
            )));
        }
        if r.len() != 8 * n {
            return Err(Error::ModelFormat(format!("expected {} parameter bytes, found {}", 8 * n, r.len())));
        }
        let params = (0..n).map(|_| read_f64(&mut r)).collect::<Result<Vec<_>>>()?;
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::ModelFormat("non-finite parameter".into()));
        }
        Ok(Self {
            dim,
            widths: (h1, h2),
            num_conditions,
            p_uncond,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::ModelFormat("truncated model file".into()))
}

fn read_u64(r: &mut &[u8]) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut &[u8]) -> Result<f64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(f64::from_le_bytes(b))
}
