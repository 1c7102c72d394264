//! Truncated distributions over photon or click number.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on the total probability of a distribution exceeding 1.
pub const SUM_SLACK: f64 = 1e-9;

/// A truncated probability distribution over counts `0..=n_max`.
///
/// Entries are non-negative. The total may fall below 1 because of truncation
/// leakage; [`ProbDist::deficit`] reports `1 - sum`. Applying a
/// super-normalized transfer variant (see [`crate::model::XtVariant::Paper`])
/// can push the total above 1, in which case the deficit is negative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbDist {
    values: Vec<f64>,
}

impl ProbDist {
    /// Validate and wrap a vector of probabilities.
    ///
    /// Rejects empty input, negative or non-finite entries, and totals
    /// above `1 + SUM_SLACK`.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::DimensionMismatch("empty distribution".into()));
        }
        for (index, &value) in values.iter().enumerate() {
            if !value.is_finite() || value < 0.0 {
                return Err(Error::InvalidDistribution { index, value });
            }
        }
        let sum: f64 = values.iter().sum();
        if sum > 1.0 + SUM_SLACK {
            return Err(Error::SuperUnitSum { sum });
        }
        Ok(Self { values })
    }

    /// Wrap values whose entries the caller has already checked for negativity.
    /// The unit-sum bound is not enforced; this is the escape hatch for
    /// super-normalized transfer variants.
    pub(crate) fn from_raw(values: Vec<f64>) -> Self {
        Self { values }
    }

    /// Point mass at `n` on the ladder `0..=n_max`.
    pub fn point_mass(n: usize, n_max: usize) -> Result<Self> {
        if n > n_max {
            return Err(Error::FockAboveTruncation { n, n_max });
        }
        let mut values = vec![0.0; n_max + 1];
        values[n] = 1.0;
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Largest count index carried by this distribution.
    pub fn n_max(&self) -> usize {
        self.values.len() - 1
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Probability mass lost to truncation: `1 - sum`.
    /// Negative when the distribution is super-normalized.
    pub fn deficit(&self) -> f64 {
        1.0 - self.sum()
    }

    /// Mean count of the truncated distribution.
    pub fn mean(&self) -> f64 {
        self.values
            .iter()
            .enumerate()
            .map(|(n, p)| n as f64 * p)
            .sum()
    }
}

impl std::ops::Index<usize> for ProbDist {
    type Output = f64;

    fn index(&self, n: usize) -> &f64 {
        &self.values[n]
    }
}

/// Total variation distance between two distributions of equal length.
pub fn total_variation(a: &ProbDist, b: &ProbDist) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch(format!(
            "total variation between lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(0.5
        * a.values
            .iter()
            .zip(&b.values)
            .map(|(x, y)| (x - y).abs())
            .sum::<f64>())
}
