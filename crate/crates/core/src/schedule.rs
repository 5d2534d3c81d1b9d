//! Diffusion noise schedules and the coefficients sampling is built from.
//!
//! Steps are 1-based: `beta(t)` for `t ∈ 1..=T`, and `alpha_bar(0) = 1`.

use serde::{Deserialize, Serialize};

use crate::error::{GmdError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// How a schedule was built; this is all a checkpoint stores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScheduleKind {
    Cosine,
    /// Evenly spaced betas from `beta_start` to `beta_end` (inclusive).
    Linear { beta_start: f64, beta_end: f64 },
    /// Explicit betas, for tests.
    Explicit { betas: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleDescriptor {
    #[serde(flatten)]
    pub kind: ScheduleKind,
    pub steps: usize,
}

/// Immutable after construction.
#[derive(Clone, Debug)]
pub struct NoiseSchedule {
    descriptor: ScheduleDescriptor,
    /// `beta[t-1]` for t in 1..=T.
    beta: Vec<f64>,
    /// `alpha_bar[t]` for t in 0..=T.
    alpha_bar: Vec<f64>,
}

/// Coefficients of the posterior mean `mu = a * x0 + b * x_t` and its variance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PosteriorCoefficients {
    pub a: f64,
    pub b: f64,
    pub sigma2: f64,
}

/// Coefficients of the same mean written for an ε prediction: `mu = c * x_t - d * ε`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpsilonCoefficients {
    pub c: f64,
    pub d: f64,
}

/// One row of [`NoiseSchedule::contribution_shares`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShareRow {
    pub t: usize,
    /// `a / (a + b)`: weight of an x0 prediction in the mean.
    pub x0_share: f64,
    /// `d / (c + d)`: weight of an ε prediction in the mean.
    pub eps_share: f64,
}

const COSINE_OFFSET: f64 = 0.008;
const MAX_BETA: f64 = 0.999;

fn cosine_f(t: f64, steps: f64) -> f64 {
    let arg = (t / steps + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2;
    arg.cos().powi(2)
}

impl NoiseSchedule {
    pub fn build(kind: ScheduleKind, steps: usize) -> Result<Self> {
        if steps < 1 {
            return Err(GmdError::invalid("schedule needs at least one step"));
        }
        let beta: Vec<f64> = match &kind {
            ScheduleKind::Cosine => {
                let f0 = cosine_f(0.0, steps as f64);
                let ab = |t: usize| cosine_f(t as f64, steps as f64) / f0;
                (1..=steps).map(|t| (1.0 - ab(t) / ab(t - 1)).min(MAX_BETA)).collect()
            }
            ScheduleKind::Linear { beta_start, beta_end } => {
                if steps == 1 {
                    vec![*beta_start]
                } else {
                    (0..steps)
                        .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
                        .collect()
                }
            }
            ScheduleKind::Explicit { betas } => {
                if betas.len() != steps {
                    return Err(GmdError::invalid(format!("{} explicit betas for {steps} steps", betas.len())));
                }
                betas.clone()
            }
        };
        if let Some(b) = beta.iter().find(|&&b| !(b > 0.0 && b < 1.0)) {
            return Err(GmdError::invalid(format!("beta {b} outside (0, 1)")));
        }
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        alpha_bar.push(1.0);
        for b in &beta {
            let prev = *alpha_bar.last().unwrap();
            alpha_bar.push(prev * (1.0 - b));
        }
        Ok(NoiseSchedule { descriptor: ScheduleDescriptor { kind, steps }, beta, alpha_bar })
    }

    pub fn cosine(steps: usize) -> Result<Self> {
        Self::build(ScheduleKind::Cosine, steps)
    }

    pub fn from_descriptor(d: &ScheduleDescriptor) -> Result<Self> {
        Self::build(d.kind.clone(), d.steps)
    }

    pub fn descriptor(&self) -> &ScheduleDescriptor {
        &self.descriptor
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.steps() {
            return Err(GmdError::invalid(format!("step {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }

    /// `beta_t`, `t ∈ 1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    /// `alpha_bar_t`, `t ∈ 0..=T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn posterior_coefficients(&self, t: usize) -> Result<PosteriorCoefficients> {
        self.check_step(t)?;
        let (ab, ab_prev, beta) = (self.alpha_bar[t], self.alpha_bar[t - 1], self.beta(t));
        Ok(PosteriorCoefficients {
            a: ab_prev.sqrt() * beta / (1.0 - ab),
            b: (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab),
            sigma2: (1.0 - ab_prev) / (1.0 - ab) * beta,
        })
    }

    /// Substitutes `x0 = (x_t − √(1−ᾱ_t) ε) / √ᾱ_t` into the posterior mean.
    pub fn epsilon_coefficients(&self, t: usize) -> Result<EpsilonCoefficients> {
        let p = self.posterior_coefficients(t)?;
        let ab = self.alpha_bar[t];
        Ok(EpsilonCoefficients { c: p.a / ab.sqrt() + p.b, d: p.a * (1.0 - ab).sqrt() / ab.sqrt() })
    }

    /// Share of the x0 and ε predictions in the sampling mean at every step.
    pub fn contribution_shares(&self) -> Vec<ShareRow> {
        (1..=self.steps())
            .map(|t| {
                let p = self.posterior_coefficients(t).expect("t in range");
                let e = self.epsilon_coefficients(t).expect("t in range");
                ShareRow { t, x0_share: p.a / (p.a + p.b), eps_share: e.d / (e.c + e.d) }
            })
            .collect()
    }

    /// `√ᾱ_t · x0 + √(1−ᾱ_t) · noise`. `t = 0` returns `x0`.
    pub fn q_sample<T: Scalar>(&self, x0: &Tensor<T>, t: usize, noise: &Tensor<T>) -> Result<Tensor<T>> {
        if t > self.steps() {
            return Err(GmdError::invalid(format!("step {t} outside 0..={}", self.steps())));
        }
        let ab = self.alpha_bar[t];
        x0.lin_comb(T::of(ab.sqrt()), noise, T::of((1.0 - ab).sqrt()))
    }
}
