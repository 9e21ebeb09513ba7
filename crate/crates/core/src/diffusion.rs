//! Variance schedules, forward noising and reverse samplers.
//!
//! Samplers are generic over the noise predictor so the same recursion runs
//! with the U-Net, with analytic oracles, or with stubs.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    #[default]
    Cosine,
    Linear,
}

/// Reverse-step noise scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SigmaKind {
    /// `σ_k² = β_k`
    #[default]
    Beta,
    /// `σ_k² = β_k (1 - ᾱ_{k-1}) / (1 - ᾱ_k)`
    Posterior,
}

const COSINE_OFFSET: f64 = 0.008;
const MAX_BETA: f64 = 0.999;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    kind: ScheduleKind,
    sigma_kind: SigmaKind,
    /// `betas[k - 1]` is `β_k`.
    betas: Vec<f64>,
    /// `alpha_bars[k]`, with `alpha_bars[0] = 1`.
    alpha_bars: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn new(kind: ScheduleKind, steps: usize) -> Result<Self> {
        Self::with_sigma(kind, steps, SigmaKind::Beta)
    }

    pub fn with_sigma(kind: ScheduleKind, steps: usize, sigma_kind: SigmaKind) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidArgument("diffusion needs at least one step".into()));
        }
        let k = steps as f64;
        let betas: Vec<f64> = match kind {
            ScheduleKind::Cosine => {
                let f = |s: f64| (((s / k + COSINE_OFFSET) / (1.0 + COSINE_OFFSET)) * std::f64::consts::FRAC_PI_2).cos().powi(2);
                (1..=steps)
                    .map(|s| (1.0 - f(s as f64) / f(s as f64 - 1.0)).min(MAX_BETA))
                    .collect()
            }
            ScheduleKind::Linear => {
                let scale = 1000.0 / k;
                let (lo, hi) = (1e-4 * scale, 0.02 * scale);
                (0..steps)
                    .map(|i| {
                        let frac = if steps == 1 { 0.0 } else { i as f64 / (k - 1.0) };
                        (lo + (hi - lo) * frac).min(MAX_BETA)
                    })
                    .collect()
            }
        };
        let mut alpha_bars = Vec::with_capacity(steps + 1);
        alpha_bars.push(1.0);
        for b in &betas {
            let prev = *alpha_bars.last().unwrap();
            alpha_bars.push(prev * (1.0 - b));
        }
        Ok(Self { kind, sigma_kind, betas, alpha_bars })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn sigma_kind(&self) -> SigmaKind {
        self.sigma_kind
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, k: usize) -> f64 {
        self.betas[k - 1]
    }

    pub fn alpha(&self, k: usize) -> f64 {
        1.0 - self.betas[k - 1]
    }

    pub fn alpha_bar(&self, k: usize) -> f64 {
        self.alpha_bars[k]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn sigma(&self, k: usize) -> f64 {
        let beta = self.beta(k);
        match self.sigma_kind {
            SigmaKind::Beta => beta.sqrt(),
            SigmaKind::Posterior => (beta * (1.0 - self.alpha_bar(k - 1)) / (1.0 - self.alpha_bar(k))).sqrt(),
        }
    }

    fn check(&self, k: usize, min: usize) -> Result<()> {
        if k < min || k > self.steps() {
            Err(Error::StepOutOfRange { k, min, max: self.steps() })
        } else {
            Ok(())
        }
    }
}

/// `y_k = sqrt(ᾱ_k) y0 + sqrt(1 - ᾱ_k) ε`
pub fn q_sample(y0: &[f64], k: usize, eps: &[f64], sched: &DiffusionSchedule) -> Result<Vec<f64>> {
    sched.check(k, 0)?;
    if y0.len() != eps.len() {
        return Err(Error::Shape(format!("signal has {} values, noise {}", y0.len(), eps.len())));
    }
    let ab = sched.alpha_bar(k);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(y0.iter().zip(eps).map(|(y, e)| a * y + b * e).collect())
}

/// `ŷ0 = (y_k - sqrt(1 - ᾱ_k) ε̂) / sqrt(ᾱ_k)`
pub fn predict_x0(yk: &[f64], k: usize, eps_hat: &[f64], sched: &DiffusionSchedule) -> Result<Vec<f64>> {
    sched.check(k, 1)?;
    if yk.len() != eps_hat.len() {
        return Err(Error::Shape(format!("signal has {} values, noise {}", yk.len(), eps_hat.len())));
    }
    let ab = sched.alpha_bar(k);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(yk.iter().zip(eps_hat).map(|(y, e)| (y - b * e) / a).collect())
}

pub fn standard_normal<R: Rng>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Ancestral sampling over all `K` steps from fresh `N(0, I)` noise.
pub fn ancestral_sample<F, R>(mut eps_fn: F, n: usize, sched: &DiffusionSchedule, rng: &mut R) -> Vec<f64>
where
    F: FnMut(&[f64], usize) -> Vec<f64>,
    R: Rng,
{
    let mut y = standard_normal(n, rng);
    for k in (1..=sched.steps()).rev() {
        let eps_hat = eps_fn(&y, k);
        let alpha = sched.alpha(k);
        let coef = (1.0 - alpha) / (1.0 - sched.alpha_bar(k)).sqrt();
        let inv = 1.0 / alpha.sqrt();
        for (v, e) in y.iter_mut().zip(&eps_hat) {
            *v = inv * (*v - coef * e);
        }
        if k > 1 {
            let sigma = sched.sigma(k);
            for v in y.iter_mut() {
                let z: f64 = StandardNormal.sample(rng);
                *v += sigma * z;
            }
        }
    }
    y
}

/// Evenly spaced subsequence `τ_1 < ... < τ_S = K` of diffusion steps.
pub fn ddim_timesteps(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > total {
        return Err(Error::InvalidArgument(format!("DDIM steps must lie in [1, {total}], got {steps}")));
    }
    Ok((1..=steps)
        .map(|i| ((i * total) as f64 / steps as f64).round() as usize)
        .collect())
}

/// DDIM from fresh noise.
pub fn ddim_sample<F, R>(
    eps_fn: F,
    n: usize,
    sched: &DiffusionSchedule,
    steps: usize,
    eta: f64,
    clip: Option<f64>,
    rng: &mut R,
) -> Result<Vec<f64>>
where
    F: FnMut(&[f64], usize) -> Vec<f64>,
    R: Rng,
{
    ddim_timesteps(sched.steps(), steps)?;
    let init = standard_normal(n, rng);
    ddim_from(eps_fn, init, sched, steps, eta, clip, rng)
}

/// DDIM starting from a given `y_K`. With `eta = 0` no randomness is drawn.
/// With `clip = Some(b)` each `ŷ0` estimate is clamped to `[-b, b]` and the
/// noise estimate is re-derived from the clamped value.
pub fn ddim_from<F, R>(
    mut eps_fn: F,
    init: Vec<f64>,
    sched: &DiffusionSchedule,
    steps: usize,
    eta: f64,
    clip: Option<f64>,
    rng: &mut R,
) -> Result<Vec<f64>>
where
    F: FnMut(&[f64], usize) -> Vec<f64>,
    R: Rng,
{
    let taus = ddim_timesteps(sched.steps(), steps)?;
    let mut y = init;
    for i in (0..taus.len()).rev() {
        let k = taus[i];
        let prev = if i == 0 { 0 } else { taus[i - 1] };
        let mut eps_hat = eps_fn(&y, k);
        let mut x0 = predict_x0(&y, k, &eps_hat, sched)?;
        let (ab, ab_prev) = (sched.alpha_bar(k), sched.alpha_bar(prev));
        if let Some(b) = clip {
            for ((x, e), v) in x0.iter_mut().zip(eps_hat.iter_mut()).zip(&y) {
                *x = x.clamp(-b, b);
                *e = (v - ab.sqrt() * *x) / (1.0 - ab).sqrt();
            }
        }
        let sigma = eta * ((1.0 - ab_prev) / (1.0 - ab)).sqrt() * (1.0 - ab / ab_prev).sqrt();
        let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
        for ((v, x), e) in y.iter_mut().zip(&x0).zip(&eps_hat) {
            *v = ab_prev.sqrt() * x + dir * e;
        }
        if sigma > 0.0 {
            for v in y.iter_mut() {
                let z: f64 = StandardNormal.sample(rng);
                *v += sigma * z;
            }
        }
    }
    Ok(y)
}
