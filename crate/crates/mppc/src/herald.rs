//! Heralded-state preparation fidelity.
//!
//! A two-mode photon-pair source carries identical photon numbers in its two
//! modes. Measuring `k` clicks on mode `a` heralds a `k`-photon state in
//! mode `b`; the quality of that preparation is
//!
//! ```text
//! Q(k|k) = theta_k(k) |C_k|^2 / sum_i theta_i(k) |C_i|^2
//! ```
//!
//! where `|C_i|^2` is the pair-number distribution and `theta_i(k)` the
//! heralding detector's POVM. Reference detectors for comparison: a single
//! on/off APD, and two APDs behind a balanced beamsplitter (both dark-count
//! free).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Povm;
use crate::sources::mean_to_r;

/// Non-photon-number-resolving reference detectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReferenceDetector {
    /// One on/off APD: outcomes 0 and 1.
    SingleApd,
    /// Two on/off APDs behind a 50/50 beamsplitter: outcomes 0, 1, 2.
    TwoApdBeamsplitter,
}

/// POVM of a reference detector with efficiency `eta` and no dark counts.
///
/// For `i` incident photons each is detected independently with probability
/// `eta`; the beamsplitter routes detected photons to either APD with equal
/// probability, so by inclusion-exclusion
/// `theta_i(2) = 1 - 2 (1 - eta/2)^i + (1 - eta)^i`.
pub fn reference_povm(kind: ReferenceDetector, eta: f64, n_max: usize) -> Result<Povm> {
    if !eta.is_finite() || !(0.0..=1.0).contains(&eta) {
        return Err(Error::ParamOutOfRange {
            name: "eta",
            value: eta,
            requirement: "0 <= eta <= 1",
        });
    }
    let dim = n_max + 1;
    let mut rows = Vec::with_capacity(dim);
    for i in 0..dim {
        let mut row = vec![0.0; dim];
        let silent = (1.0 - eta).powi(i as i32);
        match kind {
            ReferenceDetector::SingleApd => {
                row[0] = silent;
                row[1] = 1.0 - silent;
            }
            ReferenceDetector::TwoApdBeamsplitter => {
                let one_silent = (1.0 - eta / 2.0).powi(i as i32);
                row[0] = silent;
                row[2] = 1.0 - 2.0 * one_silent + silent;
                row[1] = 1.0 - row[0] - row[2];
            }
        }
        rows.push(row);
    }
    Povm::from_rows(rows, false)
}

/// Heralding fidelity `Q(k|k)` for a detector POVM and a pair source with
/// squeeze parameter `r`.
///
/// The sum over pair numbers is truncated at the POVM dimension; the
/// neglected tail is bounded by `ratio^(n_max+1) / (1 - ratio)` with
/// `ratio = mean / (1 + mean)`, negligible for the means used here.
pub fn fidelity_q(povm: &Povm, r: f64, k: usize) -> Result<f64> {
    if !r.is_finite() || r < 0.0 {
        return Err(Error::ParamOutOfRange {
            name: "r",
            value: r,
            requirement: "r >= 0",
        });
    }
    let n_max = povm.dim() - 1;
    if k > n_max {
        return Err(Error::FockAboveTruncation { n: k, n_max });
    }
    let mean = r.sinh().powi(2);
    let ratio = mean / (1.0 + mean);
    let mut pair_prob = 1.0 / (1.0 + mean);
    let mut numerator = 0.0;
    let mut denominator = 0.0;
    for i in 0..=n_max {
        let weight = povm.theta(i, k) * pair_prob;
        denominator += weight;
        if i == k {
            numerator = weight;
        }
        pair_prob *= ratio;
    }
    if denominator <= 0.0 {
        return Err(Error::ZeroHeraldProbability { k });
    }
    Ok(numerator / denominator)
}

/// Fidelity of one detector across a grid of source brightnesses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityCurve {
    pub detector_label: String,
    pub k: usize,
    /// `(per-mode mean, Q(k|k))`, means strictly increasing.
    pub points: Vec<(f64, f64)>,
}

/// Grid spacing for [`fidelity_sweep`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepScale {
    Log,
    Linear,
}

/// Mean-photon-number grid mapped through the squeeze parameter.
pub fn mean_grid(
    mean_min: f64,
    mean_max: f64,
    points: usize,
    scale: SweepScale,
) -> Result<Vec<f64>> {
    if !(mean_min.is_finite() && mean_max.is_finite()) || mean_min <= 0.0 || mean_min >= mean_max {
        return Err(Error::InvalidBracket {
            lo: mean_min,
            hi: mean_max,
        });
    }
    if points < 2 {
        return Err(Error::ParamOutOfRange {
            name: "points",
            value: points as f64,
            requirement: "points >= 2",
        });
    }
    let n = points as f64 - 1.0;
    Ok((0..points)
        .map(|i| {
            let t = i as f64 / n;
            match scale {
                SweepScale::Log => (mean_min.ln() + t * (mean_max.ln() - mean_min.ln())).exp(),
                SweepScale::Linear => mean_min + t * (mean_max - mean_min),
            }
        })
        .collect())
}

/// Sweep `Q(k|k)` over source brightness for a set of labeled detectors.
pub fn fidelity_sweep(
    detectors: &[(String, Povm)],
    k: usize,
    mean_min: f64,
    mean_max: f64,
    points: usize,
    scale: SweepScale,
) -> Result<Vec<FidelityCurve>> {
    let grid = mean_grid(mean_min, mean_max, points, scale)?;
    detectors
        .iter()
        .map(|(label, povm)| {
            let points = grid
                .iter()
                .map(|&mean| Ok((mean, fidelity_q(povm, mean_to_r(mean)?, k)?)))
                .collect::<Result<Vec<_>>>()?;
            Ok(FidelityCurve {
                detector_label: label.clone(),
                k,
                points,
            })
        })
        .collect()
}
