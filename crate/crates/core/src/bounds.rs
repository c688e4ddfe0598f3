//! Convergence-bound calculators for noisy local SGD with periodic averaging.
//!
//! Both bounds are reporting tools. A violated learning-rate condition is
//! logged, never enforced.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::EncodedDataset;
use crate::error::{invalid, Result};
use crate::model::{self, Example, ModelParams};
use crate::streams;

/// Constants and run parameters the bounds are stated in.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    /// Smoothness constant `L`.
    pub smoothness: f64,
    /// Per-example gradient variance bound `β²`.
    pub grad_variance: f64,
    /// Strong-convexity constant `λ`; only the convex bound reads it.
    pub strong_convexity: f64,
    /// `f(θ⁰) − f*`.
    pub f0_gap: f64,
    /// `η`.
    pub stepsize: f64,
    /// Total local iterations `K = T·τ`.
    pub iterations: usize,
    /// `τ`.
    pub local_period: usize,
    /// `γ`.
    pub batch_size: usize,
    /// `σ²`.
    pub noise_var: f64,
    /// Model dimension `d`.
    pub dim: usize,
    /// `r`.
    pub devices_per_round: usize,
    /// `n`.
    pub total_devices: usize,
}

fn positive(name: &str, v: f64) -> Result<()> {
    if !(v.is_finite() && v > 0.0) {
        return Err(invalid(format!("{name} must be positive, got {v}")));
    }
    Ok(())
}

fn nonnegative(name: &str, v: f64) -> Result<()> {
    if !(v.is_finite() && v >= 0.0) {
        return Err(invalid(format!("{name} must be nonnegative, got {v}")));
    }
    Ok(())
}

impl BoundInputs {
    fn validate(&self) -> Result<()> {
        positive("smoothness", self.smoothness)?;
        positive("stepsize", self.stepsize)?;
        nonnegative("gradient variance", self.grad_variance)?;
        nonnegative("initial gap", self.f0_gap)?;
        nonnegative("noise variance", self.noise_var)?;
        for (name, v) in [
            ("iterations", self.iterations),
            ("local period", self.local_period),
            ("batch size", self.batch_size),
            ("dimension", self.dim),
            ("devices per round", self.devices_per_round),
            ("total devices", self.total_devices),
        ] {
            if v == 0 {
                return Err(invalid(format!("{name} must be at least 1")));
            }
        }
        if self.devices_per_round > self.total_devices {
            return Err(invalid("devices per round cannot exceed total devices"));
        }
        let lr = lr_condition(self.stepsize, self.smoothness, self.local_period);
        if !lr.satisfied {
            log::warn!("learning-rate condition violated (slack {:.4}); the bound may not hold", lr.slack);
        }
        Ok(())
    }

    /// `(τ−1)(2τ−1)`, the factor every local-drift term carries.
    pub fn drift_factor(&self) -> f64 {
        let t = self.local_period as f64;
        (t - 1.0) * (2.0 * t - 1.0)
    }
}

/// Bound on the average expected squared gradient norm of the averaged
/// model over `K` iterations, for smooth (possibly nonconvex) objectives.
pub fn bound_nonconvex(b: &BoundInputs) -> Result<f64> {
    b.validate()?;
    let (l, eta, k) = (b.smoothness, b.stepsize, b.iterations as f64);
    let (beta2, gamma, s2) = (b.grad_variance, b.batch_size as f64, b.noise_var);
    let (d, r) = (b.dim as f64, b.devices_per_round as f64);
    Ok(2.0 * b.f0_gap / (eta * k)
        + eta * l * beta2 / (2.0 * gamma)
        + eta * l * d * s2 / (2.0 * r)
        + b.drift_factor()
            * (2.0 * eta * eta * l * l * beta2 / (3.0 * gamma)
                + eta * eta * l * l * d * s2 * (r + 1.0) / (3.0 * r)))
}

/// Bound on the average expected optimality gap for `λ`-strongly convex
/// objectives. Requires `0 < λ ≤ L` and `ηλ < 1`.
pub fn bound_convex(b: &BoundInputs) -> Result<f64> {
    b.validate()?;
    let lam = b.strong_convexity;
    positive("strong convexity", lam)?;
    if lam > b.smoothness {
        return Err(invalid(format!("strong convexity {lam} exceeds smoothness {}", b.smoothness)));
    }
    let (l, eta, k) = (b.smoothness, b.stepsize, b.iterations as f64);
    if eta * lam >= 1.0 {
        return Err(invalid(format!("stepsize times strong convexity must be below 1, got {}", eta * lam)));
    }
    let (beta2, gamma, s2) = (b.grad_variance, b.batch_size as f64, b.noise_var);
    let (d, r) = (b.dim as f64, b.devices_per_round as f64);
    Ok((1.0 - eta * lam) / (k * eta * lam) * b.f0_gap
        + eta * l * beta2 / (4.0 * lam * gamma)
        + eta * l * d * s2 / (4.0 * r * lam)
        + eta * eta * l * l
            * b.drift_factor()
            * (beta2 / (3.0 * lam * gamma) + d * s2 * (r + 1.0) / (6.0 * r * lam)))
}

/// Whether `5ηL + 3τ²η²L² ≤ 1`, with `slack = 1 − (5ηL + 3τ²η²L²)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrCondition {
    pub satisfied: bool,
    pub slack: f64,
}

pub fn lr_condition(stepsize: f64, smoothness: f64, local_period: usize) -> LrCondition {
    let el = stepsize * smoothness;
    let t = local_period as f64;
    let slack = 1.0 - (5.0 * el + 3.0 * t * t * el * el);
    LrCondition { satisfied: slack >= 0.0, slack }
}

/// Knobs of [`estimate_bound_inputs`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimateOptions {
    /// Random point pairs for the smoothness estimate.
    pub pairs: usize,
    /// Radius of the ball around `θ⁰` the pairs are drawn from.
    pub radius: f64,
    /// Training examples (a fixed random subset) used for the smoothness
    /// estimate; gradient differences over the full union are rarely worth
    /// the cost.
    pub max_examples: usize,
    pub seed: u64,
}

impl Default for EstimateOptions {
    fn default() -> Self {
        EstimateOptions { pairs: 1000, radius: 1.0, max_examples: 2048, seed: 0 }
    }
}

/// Heuristic constants measured on a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimates {
    /// Max gradient-difference ratio seen, a lower bound on `L`.
    pub smoothness: f64,
    /// Max over devices of the per-example gradient variance at `θ⁰`.
    pub grad_variance: f64,
    /// `f(θ⁰)` on the training union. Cross-entropy is nonnegative, so this
    /// upper-bounds `f(θ⁰) − f*`.
    pub f0: f64,
    pub dim: usize,
}

/// Largest `‖∇f(x) − ∇f(y)‖ / ‖x − y‖` over `pairs` pairs drawn uniformly
/// from the ball of `radius` around `center`.
pub fn estimate_smoothness<R, F>(mut grad: F, center: &[f64], radius: f64, pairs: usize, rng: &mut R) -> Result<f64>
where
    R: Rng,
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    positive("radius", radius)?;
    let d = center.len();
    let point = |rng: &mut R| -> Vec<f64> {
        let dir: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        let u: f64 = rng.random();
        let scale = radius * u.powf(1.0 / d as f64) / norm;
        center.iter().zip(dir).map(|(c, v)| c + scale * v).collect()
    };
    let mut best: f64 = 0.0;
    for _ in 0..pairs {
        let x = point(rng);
        let y = point(rng);
        let dist = x.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        if dist == 0.0 {
            continue;
        }
        let (gx, gy) = (grad(&x)?, grad(&y)?);
        let diff = gx.iter().zip(&gy).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        best = best.max(diff / dist);
    }
    Ok(best)
}

/// Measures `L`, `β²` and `f(θ⁰)` for a model on a dataset. These are
/// heuristics used to make the bound calculators runnable, not certified
/// constants.
pub fn estimate_bound_inputs(dataset: &EncodedDataset, theta0: &ModelParams, opts: EstimateOptions) -> Result<Estimates> {
    let train = dataset.train_union();
    if train.is_empty() {
        return Err(invalid("dataset has no training examples"));
    }
    let mut rng = streams::stream(opts.seed, streams::ESTIMATE, &[]);
    let subset: Vec<&Example> = if train.len() > opts.max_examples {
        rand::seq::index::sample(&mut rng, train.len(), opts.max_examples).iter().map(|k| train[k]).collect()
    } else {
        train.clone()
    };
    let smoothness = estimate_smoothness(
        |x| model::gradient(&theta0.with_values(x.to_vec())?, &subset),
        theta0.values(),
        opts.radius,
        opts.pairs,
        &mut rng,
    )?;
    let mut grad_variance: f64 = 0.0;
    for dev in &dataset.devices {
        if !dev.train.is_empty() {
            grad_variance = grad_variance.max(model::gradient_variance(theta0, &dev.train)?);
        }
    }
    Ok(Estimates { smoothness, grad_variance, f0: model::loss(theta0, &train)?, dim: theta0.dim() })
}
