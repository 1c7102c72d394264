//! Error type shared by all modules.

use thiserror::Error;

/// Errors produced by the detector model, calibration, reconstruction,
/// simulation, and waveform pipelines.
#[derive(Debug, Error)]
pub enum Error {
    /// A probability or other numeric parameter is outside its admissible range.
    #[error("{name} = {value} out of range ({requirement})")]
    ParamOutOfRange {
        name: &'static str,
        value: f64,
        requirement: &'static str,
    },

    /// Vector/matrix shapes do not agree.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// A distribution entry is negative or non-finite where a probability is required.
    #[error("invalid distribution entry {value:e} at index {index}")]
    InvalidDistribution { index: usize, value: f64 },

    /// A distribution sums to more than 1 beyond tolerance.
    #[error("distribution sums to {sum} (> 1 beyond tolerance)")]
    SuperUnitSum { sum: f64 },

    /// A forward matrix application produced a materially negative entry,
    /// typically because an inverse matrix was passed where a forward one was expected.
    #[error("materially negative output {value:e} at index {index}; was an inverse matrix applied forward?")]
    NegativeOutput { index: usize, value: f64 },

    /// A matrix expected to be triangular has entries on both sides of the diagonal.
    #[error("matrix is not triangular")]
    NotTriangular,

    /// A triangular matrix has a zero diagonal entry and cannot be inverted.
    #[error("zero diagonal entry at index {0}; matrix is singular at this truncation")]
    SingularMatrix(usize),

    /// A run summary is empty or internally inconsistent.
    #[error("invalid run summary: {0}")]
    InvalidRun(String),

    /// The calibration equations have no root in the search bracket:
    /// the two-parameter model cannot explain the measured click rates.
    #[error("no root in [{lo}, {hi}] (f(lo) = {f_lo:e}, f(hi) = {f_hi:e}); the model cannot explain the data")]
    NoBracket {
        lo: f64,
        hi: f64,
        f_lo: f64,
        f_hi: f64,
    },

    /// Measured zero-click rate implies a vacuum probability >= 1, i.e. a negative mean.
    #[error("measured p'_0 = {p0_meas} implies p_0 = {p0} >= 1 (negative mean)")]
    ImpliedNegativeMean { p0_meas: f64, p0: f64 },

    /// Stabilization removed all probability mass.
    #[error("distribution is all zero after clipping negatives")]
    AllZeroAfterClipping,

    /// An optimization bracket is empty or inverted.
    #[error("invalid bracket [{lo}, {hi}]")]
    InvalidBracket { lo: f64, hi: f64 },

    /// The requested operation is not defined for this cross-talk variant.
    #[error("operation not supported for cross-talk variant {0}: {1}")]
    UnsupportedVariant(&'static str, &'static str),

    /// Heralding probability vanishes; the conditional fidelity is undefined.
    #[error("herald outcome {k} has zero probability under this source")]
    ZeroHeraldProbability { k: usize },

    /// A source specification string could not be parsed.
    #[error("invalid source spec '{0}' (expected coherent:<mean>, spdc-mean:<mean>, spdc-r:<r>, or fock:<n>)")]
    SourceSpec(String),

    /// A Fock input exceeds the configured truncation.
    #[error("Fock number {n} exceeds truncation n_max = {n_max}")]
    FockAboveTruncation { n: usize, n_max: usize },

    /// A waveform record does not span the offsets the acquisition config requires.
    #[error("waveform record too short: {0}")]
    RecordTooShort(String),

    /// Pulse-height analysis found fewer than two peaks.
    #[error("found {found} pulse-height peak(s); at least 2 are required to estimate the gain")]
    TooFewPeaks { found: usize },

    /// A serialized artifact could not be decoded.
    #[error("format error: {0}")]
    Format(String),

    /// Underlying I/O failure.
    #[error(transparent)]
    Io(#[from] std::io::Error),

    /// JSON encode/decode failure.
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
