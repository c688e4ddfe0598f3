//! zCDP accounting for noisy local SGD with secure aggregation.
//!
//! One local iteration releases a minibatch gradient of sensitivity `2G/γ`
//! through the Gaussian mechanism. Within an epoch the shuffled minibatches
//! partition the local dataset, so the iterations of one epoch compose in
//! parallel (the maximum, not the sum, of their budgets); epochs compose
//! additively. Because the server only sees the sum of `r` local models, the
//! Gaussian noise protecting a single device's contribution is the noise of
//! all `r` summands while the sensitivity is unchanged, dividing the per-round
//! budget by `r`. Rounds then compose additively over the `C_i` rounds a device
//! actually participates in, and the total converts to `(ε, δ)`-DP.
//!
//! Every function here is pure and works on `f64`.

use std::iter::Sum;
use std::ops::Add;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// All the symbols the accountant needs, in one place.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyParams {
    /// Per-example gradient L2 bound `G`.
    pub clip_norm: f64,
    /// Minibatch size `γ`.
    pub batch_size: usize,
    /// Local training set size `m`.
    pub local_dataset_size: usize,
    /// Local iterations per round `τ`.
    pub local_period: usize,
    /// Devices selected per round `r`.
    pub devices_per_round: usize,
    /// Total devices `n`.
    pub total_devices: usize,
    /// Per-coordinate Gaussian noise std `σ` added to each minibatch gradient.
    pub noise_std: f64,
    /// Failure probability `δ` of the `(ε, δ)` guarantee.
    pub delta: f64,
    /// Stepsize `η`.
    pub stepsize: f64,
}

impl PrivacyParams {
    /// Checks positivity and range constraints plus `m mod γ = 0`.
    ///
    /// The stricter epoch condition (`τ` a multiple of `m/γ`) is checked by
    /// [`PrivacyParams::check_epoch_alignment`], which every round-level
    /// accounting function calls.
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_norm.is_finite() && self.clip_norm > 0.0) {
            return Err(invalid(format!("clip norm must be positive, got {}", self.clip_norm)));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch size must be at least 1"));
        }
        if self.local_dataset_size == 0 {
            return Err(invalid("local dataset size must be at least 1"));
        }
        if self.local_period == 0 {
            return Err(invalid("local period must be at least 1"));
        }
        if self.total_devices == 0 {
            return Err(invalid("total devices must be at least 1"));
        }
        if self.devices_per_round == 0 || self.devices_per_round > self.total_devices {
            return Err(invalid(format!(
                "devices per round must lie in [1, {}], got {}",
                self.total_devices, self.devices_per_round
            )));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(invalid(format!("noise std must be nonnegative, got {}", self.noise_std)));
        }
        check_delta(self.delta)?;
        if !(self.stepsize.is_finite() && self.stepsize > 0.0) {
            return Err(invalid(format!("stepsize must be positive, got {}", self.stepsize)));
        }
        if self.local_dataset_size % self.batch_size != 0 {
            return Err(invalid(format!(
                "local dataset size {} is not a multiple of batch size {}",
                self.local_dataset_size, self.batch_size
            )));
        }
        Ok(())
    }

    /// Number of minibatches in one pass over the local dataset, `m/γ`.
    pub fn batches_per_epoch(&self) -> usize {
        self.local_dataset_size / self.batch_size
    }

    /// Requires `τ` to be a whole number of epochs, i.e. `τ mod (m/γ) = 0`.
    pub fn check_epoch_alignment(&self) -> Result<()> {
        self.validate()?;
        let per_epoch = self.batches_per_epoch();
        if self.local_period % per_epoch != 0 {
            return Err(invalid(format!(
                "local period {} is not a multiple of m/γ = {}",
                self.local_period, per_epoch
            )));
        }
        Ok(())
    }

    /// Number of passes over the local dataset per round, `τγ/m`.
    pub fn epochs_per_round(&self) -> usize {
        self.local_period / self.batches_per_epoch()
    }

    pub fn with_noise_std(self, noise_std: f64) -> Self {
        Self { noise_std, ..self }
    }
}

/// A zero-concentrated DP budget `ρ ≥ 0`. Budgets compose by addition.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Default, Serialize, Deserialize)]
pub struct ZcdpBudget(f64);

impl ZcdpBudget {
    pub const ZERO: ZcdpBudget = ZcdpBudget(0.0);

    pub fn new(rho: f64) -> Result<Self> {
        if rho.is_nan() || rho < 0.0 {
            return Err(invalid(format!("rho must be nonnegative, got {rho}")));
        }
        Ok(ZcdpBudget(rho))
    }

    pub fn rho(self) -> f64 {
        self.0
    }

    /// `k`-fold sequential composition of this budget.
    pub fn times(self, k: f64) -> Result<Self> {
        ZcdpBudget::new(self.0 * k)
    }
}

impl Add for ZcdpBudget {
    type Output = ZcdpBudget;

    fn add(self, rhs: Self) -> Self {
        ZcdpBudget(self.0 + rhs.0)
    }
}

impl Sum for ZcdpBudget {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(ZcdpBudget::ZERO, Add::add)
    }
}

/// An `(ε, δ)`-DP guarantee.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpGuarantee {
    pub epsilon: f64,
    pub delta: f64,
}

/// What an observer of one round gets to see.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Release {
    /// Only the sum of the `r` selected local models (secure aggregation).
    SecureSum,
    /// Every local model individually.
    Individual,
}

fn check_delta(delta: f64) -> Result<()> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(invalid(format!("delta must lie in (0, 1), got {delta}")));
    }
    Ok(())
}

fn check_positive(name: &str, v: f64) -> Result<()> {
    if !(v.is_finite() && v > 0.0) {
        return Err(invalid(format!("{name} must be positive, got {v}")));
    }
    Ok(())
}

/// L2 sensitivity of a minibatch-mean gradient whose per-example terms are
/// bounded by `clip_norm`: `2G/γ`.
pub fn gradient_sensitivity(clip_norm: f64, batch_size: usize) -> Result<f64> {
    check_positive("clip norm", clip_norm)?;
    if batch_size == 0 {
        return Err(invalid("batch size must be at least 1"));
    }
    Ok(2.0 * clip_norm / batch_size as f64)
}

/// L2 sensitivity of a local model after `τ` steps: `2ητG/γ`.
pub fn local_model_sensitivity(
    stepsize: f64,
    local_period: usize,
    clip_norm: f64,
    batch_size: usize,
) -> Result<f64> {
    check_positive("stepsize", stepsize)?;
    if local_period == 0 {
        return Err(invalid("local period must be at least 1"));
    }
    Ok(stepsize * local_period as f64 * gradient_sensitivity(clip_norm, batch_size)?)
}

/// Gaussian mechanism: `Δ²/(2σ²)`-zCDP.
pub fn gaussian_rho(sensitivity: f64, sigma: f64) -> Result<ZcdpBudget> {
    if sensitivity.is_nan() || sensitivity < 0.0 {
        return Err(invalid(format!("sensitivity must be nonnegative, got {sensitivity}")));
    }
    check_positive("sigma", sigma)?;
    ZcdpBudget::new(sensitivity * sensitivity / (2.0 * sigma * sigma))
}

/// Sequential composition: budgets add.
pub fn compose<I: IntoIterator<Item = ZcdpBudget>>(budgets: I) -> ZcdpBudget {
    budgets.into_iter().sum()
}

/// Parallel composition over disjoint parts of a randomly partitioned
/// dataset: the maximum budget.
pub fn compose_parallel<I: IntoIterator<Item = ZcdpBudget>>(budgets: I) -> ZcdpBudget {
    budgets
        .into_iter()
        .fold(ZcdpBudget::ZERO, |a, b| if b.0 > a.0 { b } else { a })
}

/// Budget of one local iteration for the device whose minibatch is used.
pub fn iteration_rho(p: &PrivacyParams) -> Result<ZcdpBudget> {
    p.validate()?;
    gaussian_rho(gradient_sensitivity(p.clip_norm, p.batch_size)?, p.noise_std)
}

/// Budget of one uploaded local model (one round, no aggregation hiding).
pub fn local_model_rho(p: &PrivacyParams) -> Result<ZcdpBudget> {
    p.check_epoch_alignment()?;
    let per_iter = iteration_rho(p)?;
    let epoch = compose_parallel(std::iter::repeat_n(per_iter, p.batches_per_epoch()));
    Ok(compose(std::iter::repeat_n(epoch, p.epochs_per_round())))
}

/// Per-round budget of a participating device under the given release.
///
/// For [`Release::SecureSum`] the local-model budget is re-expressed as a
/// Gaussian mechanism with sensitivity `2ητG/γ` and the equivalent noise
/// variance `Δ²/(2ρ)`; the sum of `r` independent models carries `r` times
/// that variance at the same sensitivity.
pub fn round_rho(p: &PrivacyParams, release: Release) -> Result<ZcdpBudget> {
    let local = local_model_rho(p)?;
    match release {
        Release::Individual => Ok(local),
        Release::SecureSum => {
            let sens =
                local_model_sensitivity(p.stepsize, p.local_period, p.clip_norm, p.batch_size)?;
            let local_var = sens * sens / (2.0 * local.rho());
            let sum_var = p.devices_per_round as f64 * local_var;
            gaussian_rho(sens, sum_var.sqrt())
        }
    }
}

/// Per-round budget with secure aggregation: `2τG²/(r m γ σ²)`.
pub fn round_rho_per_device(p: &PrivacyParams) -> Result<ZcdpBudget> {
    round_rho(p, Release::SecureSum)
}

/// Closed form `2τG²/(r m γ σ²)` with no precondition checks.
pub fn round_rho_closed_form(p: &PrivacyParams) -> f64 {
    2.0 * p.local_period as f64 * p.clip_norm * p.clip_norm
        / (p.devices_per_round as f64
            * p.local_dataset_size as f64
            * p.batch_size as f64
            * p.noise_std
            * p.noise_std)
}

/// `ρ`-zCDP implies `(ρ + 2√(ρ ln(1/δ)), δ)`-DP.
pub fn zcdp_to_dp(rho: ZcdpBudget, delta: f64) -> Result<DpGuarantee> {
    check_delta(delta)?;
    let r = rho.rho();
    let epsilon = r + 2.0 * (r * (1.0 / delta).ln()).sqrt();
    Ok(DpGuarantee { epsilon, delta })
}

/// Largest `ρ` whose conversion at `delta` does not exceed `epsilon`.
pub fn rho_for_epsilon(epsilon: f64, delta: f64) -> Result<ZcdpBudget> {
    check_positive("epsilon", epsilon)?;
    check_delta(delta)?;
    let l = (1.0 / delta).ln();
    // √(l+ε) − √l, written to avoid cancellation for small ε
    let root = epsilon / ((l + epsilon).sqrt() + l.sqrt());
    ZcdpBudget::new(root * root)
}

/// Guarantee of device `i` after participating in `participation` rounds
/// under the given release. `participation` may be a realized count or the
/// expectation `Tr/n`.
pub fn total_epsilon_for(
    p: &PrivacyParams,
    participation: f64,
    release: Release,
) -> Result<DpGuarantee> {
    if participation.is_nan() || participation < 0.0 {
        return Err(invalid(format!("participation must be nonnegative, got {participation}")));
    }
    let total = round_rho(p, release)?.times(participation)?;
    zcdp_to_dp(total, p.delta)
}

/// `(ε_i, δ)` of a device that took part in `participation` rounds with
/// secure aggregation.
pub fn total_epsilon(p: &PrivacyParams, participation: f64) -> Result<DpGuarantee> {
    total_epsilon_for(p, participation, Release::SecureSum)
}

/// Expected participation `T·r/n` under uniform selection.
pub fn expected_participation(rounds: usize, devices_per_round: usize, total_devices: usize) -> Result<f64> {
    if devices_per_round == 0 || devices_per_round > total_devices {
        return Err(invalid(format!(
            "devices per round must lie in [1, {total_devices}], got {devices_per_round}"
        )));
    }
    Ok(rounds as f64 * devices_per_round as f64 / total_devices as f64)
}

/// Noise std that makes [`total_epsilon_for`] equal `epsilon`.
///
/// `p.noise_std` is ignored. Inverts the conversion to the target `ρ*` and
/// then solves the per-round budget for `σ`.
pub fn calibrate_sigma_for(
    epsilon: f64,
    delta: f64,
    participation: f64,
    p: &PrivacyParams,
    release: Release,
) -> Result<f64> {
    check_positive("participation", participation)?;
    let target = rho_for_epsilon(epsilon, delta)?;
    // round_rho scales as 1/σ², so evaluate it at σ = 1 and rescale
    let unit = round_rho(&p.with_noise_std(1.0), release)?;
    Ok((participation * unit.rho() / target.rho()).sqrt())
}

/// [`calibrate_sigma_for`] with secure aggregation.
pub fn calibrate_sigma(epsilon: f64, delta: f64, participation: f64, p: &PrivacyParams) -> Result<f64> {
    calibrate_sigma_for(epsilon, delta, participation, p, Release::SecureSum)
}

/// Guarantee used to calibrate the DP-SGD baseline:
/// `ρ = 2 C G² / (n γ² σ²)` converted at `delta`.
pub fn dpsgd_epsilon(
    clip_norm: f64,
    total_devices: usize,
    batch_size: usize,
    sigma: f64,
    delta: f64,
    participation: f64,
) -> Result<DpGuarantee> {
    check_positive("clip norm", clip_norm)?;
    check_positive("sigma", sigma)?;
    check_positive("participation", participation)?;
    if total_devices == 0 || batch_size == 0 {
        return Err(invalid("device count and batch size must be at least 1"));
    }
    let rho = 2.0 * participation * clip_norm * clip_norm
        / (total_devices as f64 * (batch_size * batch_size) as f64 * sigma * sigma);
    zcdp_to_dp(ZcdpBudget::new(rho)?, delta)
}

/// Inverse of [`dpsgd_epsilon`] in `sigma`.
pub fn calibrate_dpsgd_sigma(
    epsilon: f64,
    delta: f64,
    participation: f64,
    clip_norm: f64,
    total_devices: usize,
    batch_size: usize,
) -> Result<f64> {
    check_positive("clip norm", clip_norm)?;
    check_positive("participation", participation)?;
    if total_devices == 0 || batch_size == 0 {
        return Err(invalid("device count and batch size must be at least 1"));
    }
    let target = rho_for_epsilon(epsilon, delta)?;
    Ok((2.0 * participation * clip_norm * clip_norm
        / (total_devices as f64 * (batch_size * batch_size) as f64 * target.rho()))
    .sqrt())
}
