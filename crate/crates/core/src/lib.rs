//! Private federated learning with concentrated differential privacy.
//!
//! Devices run several steps of local SGD on clipped, Gaussian-perturbed
//! gradients and upload their local models through a pairwise-mask secure
//! aggregation protocol, so the server only ever learns the average. The
//! accounting in [`accountant`] turns that into a per-device zCDP budget
//! (amplified by the number of devices summed per round) and an
//! `(epsilon, delta)` guarantee.
//!
//! The crate is organised by subsystem:
//!
//! * [`accountant`]: sensitivities, Gaussian-mechanism zCDP, composition,
//!   conversion to `(epsilon, delta)` and noise calibration.
//! * [`secagg`]: seed setup, PRF mask streams, fixed-point codec and
//!   server-side sum recovery.
//! * [`model`]: multinomial logistic regression and a ReLU network with
//!   softmax cross-entropy, hand-derived gradients and per-example clipping.
//! * [`orchestrator`]: device selection, local updates, rounds and whole
//!   training runs for the private, FedAvg and DP-SGD modes.
//! * [`data`]: Adult census ingestion, encoding and partitioning, plus
//!   synthetic datasets.
//! * [`experiment`] and [`bounds`]: the config-driven experiment runner and
//!   the convergence-bound calculators.

pub mod accountant;
pub mod bounds;
pub mod data;
mod error;
pub mod experiment;
pub mod model;
pub mod orchestrator;
pub mod secagg;
pub mod streams;

pub use error::{Error, Result};
