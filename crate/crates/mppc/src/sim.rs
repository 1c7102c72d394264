//! Generative Monte Carlo simulation of the per-pulse detection process.
//!
//! Each pulse draws a photon number from the source, thins it binomially by
//! the detection efficiency, injects at most one dark avalanche, and then
//! lets every avalanche seed a geometric chain of induced cross-talk
//! avalanches (each avalanche spawns a successor with probability `eps_xt`,
//! and successors may spawn further). This is the stochastic process whose
//! transition law is exactly the `GeometricChain` matrix model, which makes
//! the simulator an independent brute-force check on every matrix
//! prediction. No generative process exists for the super-normalized
//! `Paper` variant, so it is rejected here.
//!
//! Randomness is counter-based: pulse `i` of a run seeded with `s` draws
//! from its own ChaCha stream `(s, i)`, so histograms are bit-identical
//! regardless of how pulses are scheduled across workers.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibrate::RunSummary;
use crate::error::{Error, Result};
use crate::model::{DetectorParams, XtVariant};
use crate::sources::SourceModel;

/// Full configuration of a simulated run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub params: DetectorParams,
    pub source: SourceModel,
    pub pulses: u64,
    pub seed: u64,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        self.source.validate()?;
        if self.pulses == 0 {
            return Err(Error::InvalidRun("pulses must be >= 1".into()));
        }
        Ok(())
    }
}

/// A simulated run: the click histogram plus how many pulses were capped at
/// the truncation `n_max`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimRun {
    pub summary: RunSummary,
    pub capped_pulses: u64,
}

/// Heralded-preparation statistics from a two-mode simulation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeraldSim {
    /// Fraction of heralded pulses whose idler photon number equaled the
    /// click count; absent when no pulse heralded.
    pub fidelity: Option<f64>,
    /// Pulses with exactly the requested click count.
    pub herald_events: u64,
    /// Heralded pulses with the matching photon number.
    pub successes: u64,
    pub pulses: u64,
}

fn pulse_rng(seed: u64, pulse_index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(pulse_index);
    rng
}

fn sample_photons(source: &SourceModel, rng: &mut ChaCha8Rng) -> u64 {
    match *source {
        SourceModel::Coherent { mean } => {
            if mean == 0.0 {
                0
            } else {
                Poisson::new(mean).expect("validated mean").sample(rng) as u64
            }
        }
        SourceModel::TwoModeSqueezed { .. } => {
            let mean = source.mean();
            let ratio = mean / (1.0 + mean);
            let mut n = 0;
            while rng.random::<f64>() < ratio {
                n += 1;
            }
            n
        }
        SourceModel::Fock { n } => n as u64,
    }
}

/// Avalanche count for `photons` incident photons: loss thinning, one
/// possible dark avalanche, then a geometric cross-talk chain per avalanche.
fn detect(photons: u64, params: &DetectorParams, rng: &mut ChaCha8Rng) -> (u32, bool) {
    let mut avalanches: u64 = if params.eta >= 1.0 {
        photons
    } else if params.eta <= 0.0 {
        0
    } else {
        (0..photons)
            .filter(|_| rng.random::<f64>() < params.eta)
            .count() as u64
    };
    if params.eps_d > 0.0 && rng.random::<f64>() < params.eps_d {
        avalanches += 1;
    }
    let mut clicks: u64 = avalanches;
    if params.eps_xt > 0.0 {
        for _ in 0..avalanches {
            while rng.random::<f64>() < params.eps_xt {
                clicks += 1;
            }
        }
    }
    let cap = params.n_max as u64;
    if clicks > cap {
        (cap as u32, true)
    } else {
        (clicks as u32, false)
    }
}

fn require_chain(params: &DetectorParams) -> Result<()> {
    if params.xt_variant != XtVariant::GeometricChain {
        return Err(Error::UnsupportedVariant(
            params.xt_variant.label(),
            "only the geometric-chain cross-talk model has a generative sampling process",
        ));
    }
    Ok(())
}

/// Simulate one pulse; returns the click count and whether it was capped at
/// `n_max`. Deterministic in `(seed, pulse_index)`.
pub fn simulate_pulse(
    params: &DetectorParams,
    source: &SourceModel,
    pulse_index: u64,
    seed: u64,
) -> Result<(u32, bool)> {
    params.validate()?;
    source.validate()?;
    require_chain(params)?;
    let mut rng = pulse_rng(seed, pulse_index);
    let photons = sample_photons(source, &mut rng);
    Ok(detect(photons, params, &mut rng))
}

/// Simulate a full run in parallel. The histogram is identical to a
/// sequential run for any worker count.
pub fn simulate_run(config: &SimConfig) -> Result<SimRun> {
    config.validate()?;
    require_chain(&config.params)?;
    let params = config.params;
    let source = config.source;
    let seed = config.seed;

    let cap = params.n_max + 1;
    let (hist, capped) = (0..config.pulses)
        .into_par_iter()
        .fold(
            || (vec![0u64; cap], 0u64),
            |(mut hist, mut capped), pulse_index| {
                let mut rng = pulse_rng(seed, pulse_index);
                let photons = sample_photons(&source, &mut rng);
                let (clicks, was_capped) = detect(photons, &params, &mut rng);
                hist[clicks as usize] += 1;
                capped += was_capped as u64;
                (hist, capped)
            },
        )
        .reduce(
            || (vec![0u64; cap], 0u64),
            |(mut a, ca), (b, cb)| {
                for (x, y) in a.iter_mut().zip(&b) {
                    *x += y;
                }
                (a, ca + cb)
            },
        );

    let counts = hist
        .into_iter()
        .enumerate()
        .filter(|(_, n)| *n > 0)
        .map(|(clicks, n)| (clicks as u32, n))
        .collect();
    Ok(SimRun {
        summary: RunSummary::new(counts, config.pulses)?,
        capped_pulses: capped,
    })
}

/// Simulate heralded state preparation on a two-mode squeezed source.
///
/// Both modes share the photon number drawn per pulse; the signal mode is
/// detected and pulses with exactly `k` clicks herald the idler. Returns the
/// empirical fidelity (fraction of heralds whose idler really holds `k`
/// photons) together with the conditioning counts.
pub fn simulate_heralded(
    r: f64,
    params: &DetectorParams,
    k: u32,
    pulses: u64,
    seed: u64,
) -> Result<HeraldSim> {
    params.validate()?;
    require_chain(params)?;
    if k as usize > params.n_max {
        return Err(Error::FockAboveTruncation {
            n: k as usize,
            n_max: params.n_max,
        });
    }
    let source = SourceModel::two_mode_squeezed(r)?;
    let params = *params;

    let (herald_events, successes) = (0..pulses)
        .into_par_iter()
        .fold(
            || (0u64, 0u64),
            |(mut heralds, mut hits), pulse_index| {
                let mut rng = pulse_rng(seed, pulse_index);
                let photons = sample_photons(&source, &mut rng);
                let (clicks, _) = detect(photons, &params, &mut rng);
                if clicks == k {
                    heralds += 1;
                    hits += (photons == k as u64) as u64;
                }
                (heralds, hits)
            },
        )
        .reduce(|| (0, 0), |(a, b), (c, d)| (a + c, b + d));

    Ok(HeraldSim {
        fidelity: (herald_events > 0).then(|| successes as f64 / herald_events as f64),
        herald_events,
        successes,
        pulses,
    })
}
