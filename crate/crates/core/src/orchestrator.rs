//! Federated training loop: device selection, noisy local SGD, aggregation
//! and participation tracking.
//!
//! A [`Federation`] owns the per-device state and the global model. Each
//! round it selects `r` devices, lets every selected device run `τ` steps of
//!
//! ```text
//! θ ← θ − η (ḡ + b),   ḡ = (1/γ) Σ clip(∇ℓ(θ; ξ), G),   b ~ N(0, σ² I)
//! ```
//!
//! and replaces the global model with the average of the returned local
//! models, either in the clear or through the masked fixed-point protocol in
//! [`crate::secagg`].

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::accountant::{self, DpGuarantee, PrivacyParams, Release};
use crate::data::{DeviceData, EncodedDataset};
use crate::error::{invalid, Error, Result};
use crate::model::{self, Example, ModelKind, ModelParams};
use crate::secagg::{self, FixedPointCodec, Modulus, RoundAggregator, SeedTable};
use crate::streams;

/// Which training scheme to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Clipped noisy local SGD, averaged through secure aggregation.
    PrivateSecure,
    /// Same local updates, averaged in the clear.
    PrivatePlain,
    /// Plain local SGD: no clipping, no noise.
    #[serde(rename = "fedavg")]
    FedAvg,
    /// One clipped noisy step per round, averaged in the clear.
    #[serde(rename = "dpsgd")]
    DpSgd,
}

impl Mode {
    pub fn is_private(self) -> bool {
        !matches!(self, Mode::FedAvg)
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::PrivateSecure => "private_secure",
            Mode::PrivatePlain => "private_plain",
            Mode::FedAvg => "fedavg",
            Mode::DpSgd => "dpsgd",
        }
    }
}

/// How the noise level is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Noise {
    /// Fixed per-coordinate std.
    Sigma(f64),
    /// Calibrate σ so that the most-selected device ends at this `ε`.
    Epsilon(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: Mode,
    /// Communication rounds `T`.
    pub rounds: usize,
    /// Local iterations per round `τ`.
    pub local_period: usize,
    /// Devices selected per round `r`.
    pub devices_per_round: usize,
    /// `η`.
    pub stepsize: f64,
    /// `γ`.
    pub batch_size: usize,
    /// `G`.
    pub clip_norm: f64,
    pub noise: Noise,
    pub delta: f64,
    pub seed: u64,
    /// Fractional bits of the fixed-point codec used by secure aggregation.
    pub frac_bits: u32,
    /// Evaluate loss and gradient norm on the training union after every
    /// round. Test accuracy is always recorded.
    pub track_train_metrics: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::PrivateSecure,
            rounds: 20,
            local_period: 10,
            devices_per_round: 10,
            stepsize: 0.1,
            batch_size: 244,
            clip_norm: 1.0,
            noise: Noise::Epsilon(10.0),
            delta: 1e-4,
            seed: 0,
            frac_bits: FixedPointCodec::DEFAULT_FRAC_BITS,
            track_train_metrics: true,
        }
    }
}

impl TrainConfig {
    /// Checks everything that does not depend on the dataset.
    pub fn validate(&self) -> Result<()> {
        if self.local_period == 0 {
            return Err(invalid("local period must be at least 1"));
        }
        if self.devices_per_round == 0 {
            return Err(invalid("devices per round must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch size must be at least 1"));
        }
        if !(self.stepsize.is_finite() && self.stepsize >= 0.0) {
            return Err(invalid(format!("stepsize must be nonnegative, got {}", self.stepsize)));
        }
        if self.mode == Mode::DpSgd && self.local_period != 1 {
            return Err(invalid(format!("dpsgd runs one local step per round, got local period {}", self.local_period)));
        }
        if self.mode.is_private() {
            if !(self.clip_norm.is_finite() && self.clip_norm > 0.0) {
                return Err(invalid(format!("clip norm must be positive, got {}", self.clip_norm)));
            }
            if !(self.delta > 0.0 && self.delta < 1.0) {
                return Err(invalid(format!("delta must lie in (0, 1), got {}", self.delta)));
            }
        }
        match self.noise {
            Noise::Sigma(s) if !(s.is_finite() && s >= 0.0) => {
                return Err(invalid(format!("noise std must be nonnegative, got {s}")));
            }
            Noise::Epsilon(e) if !(e.is_finite() && e > 0.0) => {
                return Err(invalid(format!("target epsilon must be positive, got {e}")));
            }
            Noise::Epsilon(_) if !self.mode.is_private() => {
                return Err(invalid("fedavg has no privacy target; use a fixed sigma"));
            }
            _ => {}
        }
        Ok(())
    }

    /// Accountant inputs for `n` devices holding `m` training examples each.
    pub fn privacy_params(&self, n: usize, m: usize, sigma: f64) -> PrivacyParams {
        PrivacyParams {
            clip_norm: self.clip_norm,
            batch_size: self.batch_size,
            local_dataset_size: m,
            local_period: self.local_period,
            devices_per_round: self.devices_per_round,
            total_devices: n,
            noise_std: sigma,
            delta: self.delta,
            stepsize: self.stepsize,
        }
    }
}

/// One device's data, shuffling state and random streams.
#[derive(Debug, Clone)]
pub struct DeviceState {
    pub id: usize,
    pub data: DeviceData,
    permutation: Vec<usize>,
    cursor: usize,
    /// Completed rounds this device was selected for (`C_i`).
    pub participation: usize,
    shuffle_rng: ChaCha20Rng,
    noise_rng: ChaCha20Rng,
}

impl DeviceState {
    /// Device `id` with streams derived from the master seed. The training
    /// split is cut down to a multiple of `batch_size`.
    pub fn new(id: usize, mut data: DeviceData, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 || batch_size > data.train.len() {
            return Err(invalid(format!(
                "batch size {batch_size} does not fit device {id} with {} training examples",
                data.train.len()
            )));
        }
        let keep = data.train.len() / batch_size * batch_size;
        if keep < data.train.len() {
            log::debug!("device {id}: dropping {} training examples to fit batch size", data.train.len() - keep);
            data.train.truncate(keep);
        }
        Ok(DeviceState {
            id,
            permutation: (0..keep).collect(),
            cursor: 0,
            participation: 0,
            shuffle_rng: streams::stream(seed, streams::SHUFFLE, &[id as u64]),
            noise_rng: streams::stream(seed, streams::NOISE, &[id as u64]),
            data,
        })
    }

    /// Training examples actually used, `m`.
    pub fn train_len(&self) -> usize {
        self.permutation.len()
    }

    /// Position of the next minibatch within the current epoch.
    pub fn cursor(&self) -> usize {
        self.cursor
    }

    /// Next block of the current shuffled order; a fresh permutation is drawn
    /// whenever the cursor is back at the start of an epoch.
    pub fn next_minibatch(&mut self, batch_size: usize) -> Result<Vec<&Example>> {
        let m = self.permutation.len();
        if batch_size == 0 || m % batch_size != 0 {
            return Err(invalid(format!("batch size {batch_size} does not divide local dataset size {m}")));
        }
        if self.cursor == 0 {
            self.permutation.shuffle(&mut self.shuffle_rng);
        }
        let start = self.cursor * batch_size;
        self.cursor = (self.cursor + 1) % (m / batch_size);
        Ok(self.permutation[start..start + batch_size].iter().map(|&k| &self.data.train[k]).collect())
    }

    /// `τ` steps of clipped, noisy minibatch SGD from `theta`.
    ///
    /// `clip_norm = None` skips clipping. `round` is only used to label a
    /// divergence.
    #[allow(clippy::too_many_arguments)]
    pub fn local_update(
        &mut self,
        theta: &ModelParams,
        local_period: usize,
        stepsize: f64,
        batch_size: usize,
        clip_norm: Option<f64>,
        sigma: f64,
        round: usize,
    ) -> Result<ModelParams> {
        if !theta.is_finite() {
            return Err(Error::Diverged { round });
        }
        let mut local = theta.clone();
        for _ in 0..local_period {
            let step = {
                let batch = self.next_minibatch(batch_size)?;
                model::clipped_gradient(&local, &batch, clip_norm)?
            };
            if !step.loss.is_finite() {
                return Err(Error::Diverged { round });
            }
            for (w, g) in local.values_mut().iter_mut().zip(step.gradient) {
                let b = if sigma > 0.0 { sigma * self.noise_rng.sample::<f64, _>(StandardNormal) } else { 0.0 };
                *w -= stepsize * (g + b);
            }
            if !local.is_finite() {
                return Err(Error::Diverged { round });
            }
        }
        Ok(local)
    }
}

/// `r` distinct devices out of `n`, uniformly, in increasing order.
pub fn select_devices<R: Rng>(n: usize, r: usize, rng: &mut R) -> Result<Vec<usize>> {
    if r == 0 || r > n {
        return Err(invalid(format!("cannot select {r} of {n} devices")));
    }
    let mut omega = index::sample(rng, n, r).into_vec();
    omega.sort_unstable();
    Ok(omega)
}

/// Selection for round `t` (0-based) of a run seeded with `seed`.
pub fn round_selection(seed: u64, t: usize, n: usize, r: usize) -> Result<Vec<usize>> {
    select_devices(n, r, &mut streams::stream(seed, streams::SELECTION, &[t as u64]))
}

/// Per-device participation counts after `rounds` rounds.
pub fn participation_counts(seed: u64, rounds: usize, n: usize, r: usize) -> Result<Vec<usize>> {
    let mut counts = vec![0; n];
    for t in 0..rounds {
        for i in round_selection(seed, t, n, r)? {
            counts[i] += 1;
        }
    }
    Ok(counts)
}

/// Coordinate-wise mean of equally long vectors.
pub fn plain_average(locals: &[ModelParams]) -> Result<Vec<f64>> {
    let first = locals.first().ok_or_else(|| invalid("nothing to average"))?;
    let mut sum = vec![0.0; first.dim()];
    for l in locals {
        if l.dim() != sum.len() {
            return Err(Error::DimensionMismatch { expected: sum.len(), got: l.dim() });
        }
        for (s, v) in sum.iter_mut().zip(l.values()) {
            *s += v;
        }
    }
    let r = locals.len() as f64;
    sum.iter_mut().for_each(|s| *s /= r);
    Ok(sum)
}

/// Mean of the local models of `omega` computed through encode, mask,
/// encrypt, aggregate and decode. Only the aggregate is ever unmasked.
pub fn secure_average(
    omega: &[usize],
    locals: &[ModelParams],
    round: u64,
    seeds: &SeedTable,
    codec: &FixedPointCodec,
) -> Result<Vec<f64>> {
    if omega.len() != locals.len() {
        return Err(Error::DimensionMismatch { expected: omega.len(), got: locals.len() });
    }
    let d = locals.first().ok_or_else(|| invalid("nothing to average"))?.dim();
    let modulus = codec.modulus();
    let masks = secagg::compute_round_masks(omega, round, seeds, d, modulus)?;
    let mut server = RoundAggregator::new(round, omega, modulus);
    for ((&i, local), mask) in omega.iter().zip(locals).zip(&masks) {
        if local.dim() != d {
            return Err(Error::DimensionMismatch { expected: d, got: local.dim() });
        }
        let encoded = codec.encode(local.values());
        if encoded.saturated > 0 {
            return Err(Error::Protocol(format!(
                "device {i}: {} coordinates outside the codec range ±{}",
                encoded.saturated,
                codec.clip_range()
            )));
        }
        server.submit(secagg::encrypt(&encoded.values, mask, modulus, round, i)?)?;
    }
    let sum = server.finish()?;
    Ok(codec.decode_sum(&sum, omega.len()))
}

/// Metrics logged after one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    /// 1-based round number.
    pub round: usize,
    /// Mean loss over the training union at the averaged model (`NaN` when
    /// train metrics are off).
    pub train_loss: f64,
    /// `‖∇f(θ̂)‖²` on the training union (`NaN` when train metrics are off).
    pub grad_norm_sq: f64,
    pub test_accuracy: f64,
    /// Selected devices, sorted.
    pub selected: Vec<usize>,
    /// `C_i` of every device after this round.
    pub participation: Vec<usize>,
    /// Largest per-device `ε` accrued so far (0 for fedavg).
    pub epsilon: f64,
}

/// Simulation state for one run.
#[derive(Debug, Clone)]
pub struct Federation {
    config: TrainConfig,
    devices: Vec<DeviceState>,
    test: Vec<Example>,
    theta: ModelParams,
    sigma: f64,
    rounds_done: usize,
    protocol: Option<(SeedTable, FixedPointCodec)>,
    /// Accountant inputs; `None` for fedavg.
    privacy: Option<PrivacyParams>,
}

impl Federation {
    /// Sets up devices, calibrates `σ` if needed, and prepares the protocol.
    pub fn new(config: TrainConfig, dataset: &EncodedDataset, theta: ModelParams) -> Result<Self> {
        config.validate()?;
        let n = dataset.devices.len();
        if config.devices_per_round > n {
            return Err(invalid(format!("cannot select {} of {n} devices", config.devices_per_round)));
        }
        if theta.input_dim() != dataset.feature_dim {
            return Err(Error::DimensionMismatch { expected: dataset.feature_dim, got: theta.input_dim() });
        }
        let devices = dataset
            .devices
            .iter()
            .enumerate()
            .map(|(i, d)| DeviceState::new(i, d.clone(), config.batch_size, config.seed))
            .collect::<Result<Vec<_>>>()?;
        let m = devices[0].train_len();
        if devices.iter().any(|d| d.train_len() != m) {
            return Err(invalid("all devices must hold the same number of training examples"));
        }

        let (sigma, privacy) = if config.mode.is_private() {
            let p = config.privacy_params(n, m, 0.0);
            if config.mode != Mode::DpSgd {
                p.with_noise_std(1.0).validate()?;
                p.check_epoch_alignment()?;
            }
            let sigma = match config.noise {
                Noise::Sigma(s) => s,
                Noise::Epsilon(eps) => {
                    let counts = participation_counts(config.seed, config.rounds, n, config.devices_per_round)?;
                    let c = counts.into_iter().max().unwrap_or(0) as f64;
                    if c == 0.0 {
                        0.0
                    } else {
                        match config.mode {
                            Mode::PrivateSecure => {
                                accountant::calibrate_sigma_for(eps, config.delta, c, &p, Release::SecureSum)?
                            }
                            Mode::PrivatePlain => {
                                accountant::calibrate_sigma_for(eps, config.delta, c, &p, Release::Individual)?
                            }
                            Mode::DpSgd => accountant::calibrate_dpsgd_sigma(
                                eps,
                                config.delta,
                                c,
                                config.clip_norm,
                                n,
                                config.batch_size,
                            )?,
                            Mode::FedAvg => unreachable!("validated above"),
                        }
                    }
                }
            };
            (sigma, Some(p.with_noise_std(sigma)))
        } else {
            match config.noise {
                Noise::Sigma(s) => (s, None),
                Noise::Epsilon(_) => unreachable!("validated above"),
            }
        };
        log::info!("{} run: n = {n}, m = {m}, sigma = {sigma:.6e}", config.mode.name());

        let protocol = if config.mode == Mode::PrivateSecure {
            let master = streams::derive_seed(config.seed, streams::PROTOCOL, &[]);
            let seeds = secagg::init_seeds(n.max(2), &master)?;
            let codec = FixedPointCodec::new(
                config.frac_bits,
                Modulus::pow2(FixedPointCodec::DEFAULT_MODULUS_BITS)?,
                FixedPointCodec::DEFAULT_CLIP_RANGE,
                config.devices_per_round,
            )?;
            Some((seeds, codec))
        } else {
            None
        };

        Ok(Federation {
            test: dataset.test_union().into_iter().cloned().collect(),
            config,
            devices,
            theta,
            sigma,
            rounds_done: 0,
            protocol,
            privacy,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Noise std in use (calibrated or fixed).
    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn theta(&self) -> &ModelParams {
        &self.theta
    }

    pub fn devices(&self) -> &[DeviceState] {
        &self.devices
    }

    pub fn rounds_done(&self) -> usize {
        self.rounds_done
    }

    /// Devices selected for the next round.
    pub fn next_selection(&self) -> Result<Vec<usize>> {
        round_selection(self.config.seed, self.rounds_done, self.devices.len(), self.config.devices_per_round)
    }

    /// Runs local training on the devices in `omega` from the current global
    /// model without changing it.
    pub fn local_models(&mut self, omega: &[usize]) -> Result<Vec<ModelParams>> {
        let c = &self.config;
        let clip = c.mode.is_private().then_some(c.clip_norm);
        let sigma = if c.mode.is_private() { self.sigma } else { 0.0 };
        let round = self.rounds_done + 1;
        omega
            .iter()
            .map(|&i| {
                self.devices[i].local_update(&self.theta, c.local_period, c.stepsize, c.batch_size, clip, sigma, round)
            })
            .collect()
    }

    /// Combines local models with the aggregation this mode prescribes.
    pub fn aggregate(&self, omega: &[usize], locals: &[ModelParams]) -> Result<Vec<f64>> {
        match &self.protocol {
            Some((seeds, codec)) => secure_average(omega, locals, self.rounds_done as u64, seeds, codec),
            None => plain_average(locals),
        }
    }

    /// Installs `next` as the global model, credits the participants, and
    /// records metrics.
    pub fn commit(&mut self, omega: &[usize], next: Vec<f64>) -> Result<RoundRecord> {
        let round = self.rounds_done + 1;
        let theta = self.theta.with_values(next).map_err(|_| Error::Diverged { round })?;
        self.theta = theta;
        for &i in omega {
            self.devices[i].participation += 1;
        }
        self.rounds_done = round;

        let (train_loss, grad_norm_sq) = if self.config.track_train_metrics {
            let train: Vec<&Example> = self.devices.iter().flat_map(|d| &d.data.train).collect();
            let eval = model::evaluate(&self.theta, &train)?;
            if !eval.loss.is_finite() {
                return Err(Error::Diverged { round });
            }
            (eval.loss, eval.grad_norm_sq())
        } else {
            (f64::NAN, f64::NAN)
        };
        let test_accuracy = if self.test.is_empty() { f64::NAN } else { model::accuracy(&self.theta, &self.test)? };
        Ok(RoundRecord {
            round,
            train_loss,
            grad_norm_sq,
            test_accuracy,
            selected: omega.to_vec(),
            participation: self.devices.iter().map(|d| d.participation).collect(),
            epsilon: self.guarantees()?.iter().map(|g| g.epsilon).fold(0.0, f64::max),
        })
    }

    /// One full round: select, train locally, aggregate, commit.
    pub fn run_round(&mut self) -> Result<RoundRecord> {
        let omega = self.next_selection()?;
        let locals = self.local_models(&omega)?;
        let next = self.aggregate(&omega, &locals)?;
        self.commit(&omega, next)
    }

    /// `(ε_i, δ)` of every device given its participation so far. Fedavg
    /// offers no guarantee and reports `ε = ∞` for devices that took part.
    pub fn guarantees(&self) -> Result<Vec<DpGuarantee>> {
        let c = &self.config;
        self.devices
            .iter()
            .map(|d| {
                let count = d.participation as f64;
                match (&self.privacy, c.mode) {
                    (_, _) if d.participation == 0 => Ok(DpGuarantee { epsilon: 0.0, delta: c.delta }),
                    (_, _) if self.sigma == 0.0 => Ok(DpGuarantee { epsilon: f64::INFINITY, delta: c.delta }),
                    (Some(p), Mode::PrivateSecure) => accountant::total_epsilon_for(p, count, Release::SecureSum),
                    (Some(p), Mode::PrivatePlain) => accountant::total_epsilon_for(p, count, Release::Individual),
                    (Some(p), Mode::DpSgd) => accountant::dpsgd_epsilon(
                        p.clip_norm,
                        p.total_devices,
                        p.batch_size,
                        self.sigma,
                        p.delta,
                        count,
                    ),
                    _ => Ok(DpGuarantee { epsilon: f64::INFINITY, delta: c.delta }),
                }
            })
            .collect()
    }
}

/// Outcome of [`run_training`].
#[derive(Debug, Clone)]
pub struct TrainingReport {
    /// One record per completed round.
    pub records: Vec<RoundRecord>,
    /// Final `(ε_i, δ)` per device.
    pub guarantees: Vec<DpGuarantee>,
    pub sigma: f64,
    /// Round at which the run diverged, if it did. Records stop before it.
    pub diverged_at: Option<usize>,
    pub final_model: ModelParams,
}

/// Builds the initial model of `kind` from the run seed and trains for
/// `config.rounds` rounds. A divergence ends the run early and is reported in
/// [`TrainingReport::diverged_at`]; every other error is returned.
pub fn run_training(config: &TrainConfig, kind: ModelKind, dataset: &EncodedDataset) -> Result<TrainingReport> {
    let theta = kind.init(dataset.feature_dim, dataset.classes, &mut streams::stream(config.seed, streams::INIT, &[]));
    run_training_from(config, dataset, theta)
}

/// [`run_training`] from a given initial model.
pub fn run_training_from(config: &TrainConfig, dataset: &EncodedDataset, theta: ModelParams) -> Result<TrainingReport> {
    let mut fed = Federation::new(config.clone(), dataset, theta)?;
    let mut records = Vec::with_capacity(config.rounds);
    let mut diverged_at = None;
    for _ in 0..config.rounds {
        match fed.run_round() {
            Ok(rec) => records.push(rec),
            Err(Error::Diverged { round }) => {
                log::warn!("run diverged at round {round}");
                diverged_at = Some(round);
                break;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(TrainingReport {
        records,
        guarantees: fed.guarantees()?,
        sigma: fed.sigma(),
        diverged_at,
        final_model: fed.theta().clone(),
    })
}
