//! Photon-number distributions of the light sources used with these detectors.

use serde::{Deserialize, Serialize};

use crate::dist::ProbDist;
use crate::error::{Error, Result};

/// A photon-number source.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SourceModel {
    /// Pulsed-laser light: Poissonian statistics with the given mean.
    Coherent { mean: f64 },
    /// One mode of a two-mode squeezed (photon-pair) state with squeeze
    /// parameter `r`; the per-mode mean is `sinh^2 r` and the marginal is
    /// thermal (geometric).
    TwoModeSqueezed { r: f64 },
    /// Exactly `n` photons.
    Fock { n: usize },
}

impl SourceModel {
    pub fn coherent(mean: f64) -> Result<Self> {
        if !mean.is_finite() || mean < 0.0 {
            return Err(Error::ParamOutOfRange {
                name: "mean",
                value: mean,
                requirement: "mean >= 0",
            });
        }
        Ok(SourceModel::Coherent { mean })
    }

    pub fn two_mode_squeezed(r: f64) -> Result<Self> {
        if !r.is_finite() || r < 0.0 {
            return Err(Error::ParamOutOfRange {
                name: "r",
                value: r,
                requirement: "r >= 0",
            });
        }
        Ok(SourceModel::TwoModeSqueezed { r })
    }

    /// Two-mode squeezed source specified by its per-mode mean.
    pub fn spdc_with_mean(mean: f64) -> Result<Self> {
        Ok(SourceModel::TwoModeSqueezed {
            r: mean_to_r(mean)?,
        })
    }

    pub fn fock(n: usize) -> Self {
        SourceModel::Fock { n }
    }

    /// Mean photon number of the source (per mode for the squeezed state).
    pub fn mean(&self) -> f64 {
        match *self {
            SourceModel::Coherent { mean } => mean,
            SourceModel::TwoModeSqueezed { r } => r.sinh().powi(2),
            SourceModel::Fock { n } => n as f64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            SourceModel::Coherent { mean } => Self::coherent(mean).map(|_| ()),
            SourceModel::TwoModeSqueezed { r } => Self::two_mode_squeezed(r).map(|_| ()),
            SourceModel::Fock { .. } => Ok(()),
        }
    }

    /// Parse a compact CLI spec: `coherent:1.66`, `spdc-mean:0.5`,
    /// `spdc-r:0.88`, or `fock:3`.
    pub fn parse(spec: &str) -> Result<Self> {
        let bad = || Error::SourceSpec(spec.to_string());
        let (kind, value) = spec.split_once(':').ok_or_else(bad)?;
        match kind {
            "coherent" => Self::coherent(value.parse().map_err(|_| bad())?),
            "spdc-mean" => Self::spdc_with_mean(value.parse().map_err(|_| bad())?),
            "spdc-r" => Self::two_mode_squeezed(value.parse().map_err(|_| bad())?),
            "fock" => Ok(Self::fock(value.parse().map_err(|_| bad())?)),
            _ => Err(bad()),
        }
    }
}

impl std::fmt::Display for SourceModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match *self {
            SourceModel::Coherent { mean } => write!(f, "coherent:{mean}"),
            SourceModel::TwoModeSqueezed { r } => write!(f, "spdc-r:{r}"),
            SourceModel::Fock { n } => write!(f, "fock:{n}"),
        }
    }
}

/// Squeeze parameter giving a per-mode mean of `mean`: `r = asinh(sqrt(mean))`.
pub fn mean_to_r(mean: f64) -> Result<f64> {
    if !mean.is_finite() || mean < 0.0 {
        return Err(Error::ParamOutOfRange {
            name: "mean",
            value: mean,
            requirement: "mean >= 0",
        });
    }
    Ok(mean.sqrt().asinh())
}

/// Truncated photon-number distribution of a source.
///
/// Coherent states are Poissonian; one mode of a squeezed pair is geometric
/// with ratio `mean / (1 + mean)` (squeeze phases drop out of all click
/// statistics and are ignored throughout).
pub fn photon_distribution(source: &SourceModel, n_max: usize) -> Result<ProbDist> {
    source.validate()?;
    match *source {
        SourceModel::Coherent { mean } => {
            let mut values = vec![0.0; n_max + 1];
            let mut p = (-mean).exp();
            values[0] = p;
            for k in 0..n_max {
                p = p * mean / (k + 1) as f64;
                values[k + 1] = p;
            }
            ProbDist::new(values)
        }
        SourceModel::TwoModeSqueezed { .. } => {
            let mean = source.mean();
            let ratio = mean / (1.0 + mean);
            let mut values = vec![0.0; n_max + 1];
            let mut p = 1.0 / (1.0 + mean);
            values[0] = p;
            for k in 0..n_max {
                p *= ratio;
                values[k + 1] = p;
            }
            ProbDist::new(values)
        }
        SourceModel::Fock { n } => ProbDist::point_mass(n, n_max),
    }
}
