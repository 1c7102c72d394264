//! Detector transfer model: loss, dark counts, pixel cross-talk, and the POVM.
//!
//! A multi-pixel counter maps an incident photon-number distribution `p` to a
//! measured avalanche-count distribution `p'` through three factor matrices,
//!
//! ```text
//! p' = M_XT * M_D * M_L * p
//! ```
//!
//! Loss (`M_L`) thins photons binomially, dark counts (`M_D`) inject at most
//! one extra avalanche per pulse, and cross-talk (`M_XT`) lets each avalanche
//! trigger further avalanches in neighboring pixels. Cross-talk is applied
//! last so that dark avalanches also seed cross-talk chains.
//!
//! Reading the total matrix along the other axis yields the detector POVM:
//! `theta_k(n)`, the probability of `n` clicks given a `k`-photon Fock input,
//! is the `(n, k)` entry of the total matrix.

use serde::{Deserialize, Serialize};

use crate::dist::ProbDist;
use crate::error::{Error, Result};
use crate::matrix::TransferMatrix;

/// Default truncation for distributions and matrices. The detectors modeled
/// here resolve around ten clicks on coherent inputs with means below four,
/// so 40 leaves ample tail margin.
pub const DEFAULT_N_MAX: usize = 40;

/// Negative entries above this magnitude in a forward product are treated as
/// an error rather than clipped.
const NEG_TOL: f64 = 1e-12;

/// A POVM row whose raw sum deviates from 1 by more than this is flagged.
const LEAK_TOL: f64 = 1e-6;

/// Cross-talk matrix variants.
///
/// The variants share row 0, the diagonal, and an identity column 0; they
/// differ in how probability spreads to higher click numbers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum XtVariant {
    /// The printed closed form: entry `(n, m) = C(n, n-m) eps^(n-m) (1-eps)^m`
    /// for `n >= m >= 1`. Its columns sum to `1/(1-eps)`, not 1, so it is not
    /// a stochastic map; it is kept for reproducing published curves.
    Paper,
    /// Each avalanche independently seeds a geometric chain of induced
    /// avalanches: entry `(n, m) = C(n-1, n-m) eps^(n-m) (1-eps)^m`. Columns
    /// sum to 1 up to truncation; this is the variant with a well-defined
    /// generative process and the default for simulation cross-checks.
    GeometricChain,
    /// Diagonal and first sub-diagonal of [`XtVariant::Paper`] only:
    /// at most one induced avalanche per pulse.
    FirstOrder,
}

impl XtVariant {
    /// CLI-facing name.
    pub fn label(&self) -> &'static str {
        match self {
            XtVariant::Paper => "paper",
            XtVariant::GeometricChain => "chain",
            XtVariant::FirstOrder => "first-order",
        }
    }
}

impl std::str::FromStr for XtVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(XtVariant::Paper),
            "chain" => Ok(XtVariant::GeometricChain),
            "first-order" => Ok(XtVariant::FirstOrder),
            _ => Err(Error::Format(format!(
                "unknown cross-talk variant '{s}' (expected paper, chain, or first-order)"
            ))),
        }
    }
}

impl std::fmt::Display for XtVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// Full parameter set of the detector model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorParams {
    /// Photon detection efficiency, in `[0, 1]`.
    pub eta: f64,
    /// Per-pulse probability of a single dark avalanche (cross-talk removed), in `[0, 1)`.
    pub eps_d: f64,
    /// Probability that an avalanche induces a cross-talk avalanche, in `[0, 1)`.
    pub eps_xt: f64,
    /// Cross-talk model variant.
    pub xt_variant: XtVariant,
    /// Truncation: distributions and matrices are indexed `0..=n_max`.
    pub n_max: usize,
}

impl DetectorParams {
    pub fn new(
        eta: f64,
        eps_d: f64,
        eps_xt: f64,
        xt_variant: XtVariant,
        n_max: usize,
    ) -> Result<Self> {
        let params = Self {
            eta,
            eps_d,
            eps_xt,
            xt_variant,
            n_max,
        };
        params.validate()?;
        Ok(params)
    }

    /// Lossless, noiseless detector.
    pub fn ideal(n_max: usize) -> Self {
        Self {
            eta: 1.0,
            eps_d: 0.0,
            eps_xt: 0.0,
            xt_variant: XtVariant::GeometricChain,
            n_max,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_probability("eta", self.eta, true)?;
        check_probability("eps_d", self.eps_d, false)?;
        check_probability("eps_xt", self.eps_xt, false)?;
        if self.n_max < 1 {
            return Err(Error::ParamOutOfRange {
                name: "n_max",
                value: self.n_max as f64,
                requirement: "n_max >= 1",
            });
        }
        Ok(())
    }
}

fn check_probability(name: &'static str, value: f64, one_allowed: bool) -> Result<()> {
    let ok = value.is_finite()
        && value >= 0.0
        && if one_allowed {
            value <= 1.0
        } else {
            value < 1.0
        };
    if ok {
        Ok(())
    } else {
        Err(Error::ParamOutOfRange {
            name,
            value,
            requirement: if one_allowed {
                "0 <= p <= 1"
            } else {
                "0 <= p < 1"
            },
        })
    }
}

/// Binomial loss matrix: entry `(n, m) = C(m, n) eta^n (1-eta)^(m-n)` for
/// `n <= m`. Each column is a binomial distribution and sums to 1 exactly.
pub fn loss_matrix(eta: f64, n_max: usize) -> Result<TransferMatrix> {
    check_probability("eta", eta, true)?;
    let dim = n_max + 1;
    let mut matrix = TransferMatrix::zeros(dim);
    if eta == 1.0 {
        return Ok(TransferMatrix::identity(dim));
    }
    if eta == 0.0 {
        for m in 0..dim {
            matrix.set_entry(0, m, 1.0);
        }
        return Ok(matrix);
    }
    let ratio = eta / (1.0 - eta);
    for m in 0..dim {
        // Binomial pmf over surviving photons n, built by upward recurrence.
        let mut p = (1.0 - eta).powi(m as i32);
        matrix.set_entry(0, m, p);
        for n in 0..m {
            p = p * ratio * (m - n) as f64 / (n + 1) as f64;
            matrix.set_entry(n + 1, m, p);
        }
    }
    Ok(matrix)
}

/// Dark-count matrix: diagonal `1 - eps_d`, first sub-diagonal `eps_d`.
/// At most one dark avalanche per pulse. Column `n_max` loses the shifted
/// mass to truncation and sums to `1 - eps_d`.
pub fn dark_matrix(eps_d: f64, n_max: usize) -> Result<TransferMatrix> {
    check_probability("eps_d", eps_d, false)?;
    let dim = n_max + 1;
    let mut matrix = TransferMatrix::zeros(dim);
    for m in 0..dim {
        matrix.set_entry(m, m, 1.0 - eps_d);
        if m + 1 < dim {
            matrix.set_entry(m + 1, m, eps_d);
        }
    }
    Ok(matrix)
}

/// Cross-talk matrix for the chosen [`XtVariant`].
///
/// All variants map zero avalanches to zero clicks (column 0 is the identity
/// column) and leave the diagonal at `(1-eps)^m`.
pub fn xt_matrix(eps_xt: f64, n_max: usize, variant: XtVariant) -> Result<TransferMatrix> {
    check_probability("eps_xt", eps_xt, false)?;
    let dim = n_max + 1;
    let mut matrix = TransferMatrix::zeros(dim);
    matrix.set_entry(0, 0, 1.0);
    for m in 1..dim {
        let diag = (1.0 - eps_xt).powi(m as i32);
        match variant {
            XtVariant::Paper => {
                let mut t = diag;
                matrix.set_entry(m, m, t);
                for n in m..n_max {
                    t = t * eps_xt * (n + 1) as f64 / (n + 1 - m) as f64;
                    matrix.set_entry(n + 1, m, t);
                }
            }
            XtVariant::GeometricChain => {
                let mut t = diag;
                matrix.set_entry(m, m, t);
                for n in m..n_max {
                    t = t * eps_xt * n as f64 / (n + 1 - m) as f64;
                    matrix.set_entry(n + 1, m, t);
                }
            }
            XtVariant::FirstOrder => {
                matrix.set_entry(m, m, diag);
                if m + 1 < dim {
                    // same operation order as the Paper recurrence at n = m,
                    // so the band agrees bit for bit
                    matrix.set_entry(m + 1, m, diag * eps_xt * (m + 1) as f64);
                }
            }
        }
    }
    Ok(matrix)
}

/// Total detector matrix `M_XT * M_D * M_L`.
pub fn total_matrix(params: &DetectorParams) -> Result<TransferMatrix> {
    params.validate()?;
    let loss = loss_matrix(params.eta, params.n_max)?;
    let dark = dark_matrix(params.eps_d, params.n_max)?;
    let xt = xt_matrix(params.eps_xt, params.n_max, params.xt_variant)?;
    xt.matmul(&dark)?.matmul(&loss)
}

/// Apply a forward transfer matrix to a distribution: `p' = M * p`.
///
/// Entries more negative than `-1e-12` are rejected (they indicate an inverse
/// matrix was passed where a forward one belongs); smaller negative dust is
/// clipped to zero. The output sum may exceed 1 under the super-normalized
/// [`XtVariant::Paper`]; see [`ProbDist::deficit`].
pub fn apply_forward(matrix: &TransferMatrix, p: &ProbDist) -> Result<ProbDist> {
    let mut out = matrix.mul_vec(p.values())?;
    for (index, value) in out.iter_mut().enumerate() {
        if *value < -NEG_TOL {
            return Err(Error::NegativeOutput {
                index,
                value: *value,
            });
        }
        if *value < 0.0 {
            *value = 0.0;
        }
    }
    Ok(ProbDist::from_raw(out))
}

/// Detector POVM in the Fock basis: `theta(k, n)` is the probability of `n`
/// clicks given a `k`-photon input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Povm {
    dim: usize,
    /// Row-major over Fock rows `k`.
    theta: Vec<f64>,
    /// Whether rows were renormalized to unit sum.
    normalized: bool,
    /// Rows whose raw sum deviated from 1 by more than `1e-6` before any
    /// renormalization: truncation leakage near `n_max`, or a
    /// super-normalized cross-talk variant.
    leaky_rows: Vec<usize>,
}

impl Povm {
    /// Build from explicit rows. Rows must be non-negative and of equal length.
    pub fn from_rows(rows: Vec<Vec<f64>>, normalize: bool) -> Result<Self> {
        let dim = rows.len();
        let mut theta = Vec::with_capacity(dim * dim);
        for row in &rows {
            if row.len() != dim {
                return Err(Error::DimensionMismatch(format!(
                    "POVM row length {} in a {}-row POVM",
                    row.len(),
                    dim
                )));
            }
            for (index, &value) in row.iter().enumerate() {
                if !value.is_finite() || value < 0.0 {
                    return Err(Error::InvalidDistribution { index, value });
                }
            }
            theta.extend_from_slice(row);
        }
        Ok(Self::finish(dim, theta, normalize))
    }

    fn finish(dim: usize, mut theta: Vec<f64>, normalize: bool) -> Self {
        let mut leaky_rows = Vec::new();
        for k in 0..dim {
            let row = &mut theta[k * dim..(k + 1) * dim];
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > LEAK_TOL {
                leaky_rows.push(k);
            }
            if normalize && sum > 0.0 {
                for value in row.iter_mut() {
                    *value /= sum;
                }
            }
        }
        Self {
            dim,
            theta,
            normalized: normalize,
            leaky_rows,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Probability of `n` clicks given `k` photons.
    pub fn theta(&self, k: usize, n: usize) -> f64 {
        self.theta[k * self.dim + n]
    }

    /// Outcome distribution for the Fock input `k`.
    pub fn row(&self, k: usize) -> &[f64] {
        &self.theta[k * self.dim..(k + 1) * self.dim]
    }

    pub fn normalized(&self) -> bool {
        self.normalized
    }

    pub fn leaky_rows(&self) -> &[usize] {
        &self.leaky_rows
    }

    /// Fock index maximizing the probability of outcome `n`.
    ///
    /// At rational efficiencies the maximum is often attained at two adjacent
    /// Fock numbers exactly (at 50% efficiency, `2n - 1` and `2n`), so values
    /// within a relative `1e-9` of the maximum count as tied and the smallest
    /// tied index is returned.
    pub fn argmax_fock(&self, n: usize) -> usize {
        let max_value = (0..self.dim)
            .map(|k| self.theta(k, n))
            .fold(0.0_f64, f64::max);
        if max_value <= 0.0 {
            return 0;
        }
        let threshold = max_value * (1.0 - 1e-9);
        (0..self.dim)
            .find(|&k| self.theta(k, n) >= threshold)
            .expect("max attained")
    }

    /// One CSV line per Fock row.
    pub fn write_csv<W: std::io::Write>(&self, w: &mut W) -> Result<()> {
        for k in 0..self.dim {
            let line = self
                .row(k)
                .iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",");
            writeln!(w, "{line}")?;
        }
        Ok(())
    }
}

/// POVM of the detector model: the transpose read-out of [`total_matrix`].
///
/// With `normalize` set, each Fock row is divided by its sum so rows sum to 1
/// exactly; rows that needed more than a trivial correction are listed in
/// [`Povm::leaky_rows`].
pub fn build_povm(params: &DetectorParams, normalize: bool) -> Result<Povm> {
    let total = total_matrix(params)?;
    let dim = total.dim();
    let mut theta = vec![0.0; dim * dim];
    for k in 0..dim {
        for n in 0..dim {
            theta[k * dim + n] = total.entry(n, k);
        }
    }
    Ok(Povm::finish(dim, theta, normalize))
}
