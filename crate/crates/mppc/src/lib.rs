//! Modeling toolkit for multi-pixel photon counters.
//!
//! Multi-pixel detectors resolve photon number by summing the avalanches of
//! many APD pixels, at the cost of loss, dark counts, and optical cross-talk
//! between pixels. This crate models that detection chain end to end:
//!
//! - [`model`]: loss/dark/cross-talk transfer matrices, their composition,
//!   and the detector POVM they induce;
//! - [`sources`]: photon-number statistics of coherent, photon-pair, and
//!   Fock sources;
//! - [`calibrate`]: cross-talk and dark-probability estimation from
//!   coherent-state click histograms;
//! - [`reconstruct`]: photon-number reconstruction by exact matrix inversion
//!   or by maximum-likelihood forward fitting;
//! - [`sim`]: a generative Monte Carlo simulator of the per-pulse process,
//!   used as an independent cross-check on every matrix prediction;
//! - [`herald`]: heralded-state preparation fidelity against reference
//!   detectors;
//! - [`waveform`]: digitizer trace post-selection, pulse-height binning, and
//!   synthetic waveform generation.

pub mod calibrate;
pub mod dist;
pub mod error;
pub mod herald;
pub mod matrix;
pub mod model;
pub mod reconstruct;
pub mod sim;
pub mod sources;
pub mod waveform;

pub use calibrate::{
    calibrate_xt, calibrate_xt_from_rates, correct_dark, dark_prime_from_run, pool_calibrations,
    CalibrationPool, CalibrationResult, RunSummary,
};
pub use dist::ProbDist;
pub use error::{Error, Result};
pub use herald::{fidelity_q, fidelity_sweep, reference_povm, FidelityCurve, ReferenceDetector};
pub use matrix::TransferMatrix;
pub use model::{
    apply_forward, build_povm, dark_matrix, loss_matrix, total_matrix, xt_matrix, DetectorParams,
    Povm, XtVariant, DEFAULT_N_MAX,
};
pub use reconstruct::{
    fit_source, invert_transfer, reconstruct_direct, stabilize, FitFamily, ReconMethod,
    ReconstructionReport,
};
pub use sim::{simulate_heralded, simulate_pulse, simulate_run, HeraldSim, SimConfig, SimRun};
pub use sources::{mean_to_r, photon_distribution, SourceModel};
