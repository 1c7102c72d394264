//! Cross-talk and dark-count calibration from coherent-state click statistics.
//!
//! The procedure needs two runs: a dark run (source blocked) giving the raw
//! single-avalanche dark probability `eps_d'`, and a light run at unknown
//! coherent mean. Loss is deliberately ignored: it maps one coherent state to
//! another, so it cannot be calibrated without a reference detector, and it
//! drops out of the two equations solved here. With
//! `eps_d = eps_d' / (1 - eps_xt)` the first two click probabilities of a
//! coherent input obey
//!
//! ```text
//! p'_0 = p_0 (1 - eps_d)
//! p'_1 = (p_1 (1 - eps_d) + p_0 eps_d) (1 - eps_xt)
//! ```
//!
//! with `p_0 = exp(-mean)` and `p_1 = mean * p_0`, which pins down both
//! `eps_xt` and the mean.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Upper end of the cross-talk search bracket.
const XT_BRACKET_HI: f64 = 0.5;
/// Bisection tolerance on `eps_xt`.
const XT_TOL: f64 = 1e-10;
/// Bisection iteration cap.
const XT_MAX_ITERS: u32 = 200;
/// Residuals at a bracket endpoint below this count as an exact root.
const ENDPOINT_ZERO: f64 = 1e-14;

/// Histogram of clicks per accepted pulse.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSummary {
    /// Total accepted pulses.
    pub pulses: u64,
    /// Pulse count per click number.
    pub counts: BTreeMap<u32, u64>,
}

impl RunSummary {
    pub fn new(counts: BTreeMap<u32, u64>, pulses: u64) -> Result<Self> {
        let run = Self { pulses, counts };
        run.validate()?;
        Ok(run)
    }

    /// Build from counts alone; `pulses` is their sum.
    pub fn from_counts(counts: BTreeMap<u32, u64>) -> Self {
        let pulses = counts.values().sum();
        Self { pulses, counts }
    }

    pub fn validate(&self) -> Result<()> {
        if self.pulses == 0 {
            return Err(Error::InvalidRun("no pulses recorded".into()));
        }
        let sum: u64 = self.counts.values().sum();
        if sum != self.pulses {
            return Err(Error::InvalidRun(format!(
                "counts sum to {sum} but pulses = {}",
                self.pulses
            )));
        }
        Ok(())
    }

    /// Observed frequency of exactly `clicks` clicks.
    pub fn frequency(&self, clicks: u32) -> f64 {
        *self.counts.get(&clicks).unwrap_or(&0) as f64 / self.pulses as f64
    }

    /// Pulses with two or more clicks. In a dark run these are the
    /// higher-order dark events the single-avalanche model neglects; they are
    /// reported as a diagnostic rather than folded into `eps_d'`.
    pub fn multi_click_pulses(&self) -> u64 {
        self.counts
            .iter()
            .filter(|(&clicks, _)| clicks >= 2)
            .map(|(_, &n)| n)
            .sum()
    }

    pub fn max_clicks(&self) -> u32 {
        self.counts.keys().next_back().copied().unwrap_or(0)
    }

    /// Click-number distribution on the ladder `0..=n_max`.
    pub fn to_dist(&self, n_max: usize) -> Result<crate::dist::ProbDist> {
        self.validate()?;
        if self.max_clicks() as usize > n_max {
            return Err(Error::DimensionMismatch(format!(
                "run contains {} clicks but n_max = {n_max}; raise the truncation",
                self.max_clicks()
            )));
        }
        let mut values = vec![0.0; n_max + 1];
        for (&clicks, &n) in &self.counts {
            values[clicks as usize] = n as f64 / self.pulses as f64;
        }
        crate::dist::ProbDist::new(values)
    }
}

/// Raw single-avalanche dark probability from a dark run:
/// the frequency of exactly one click.
pub fn dark_prime_from_run(dark: &RunSummary) -> Result<f64> {
    dark.validate()?;
    Ok(dark.frequency(1))
}

/// Remove cross-talk inflation from the measured dark probability:
/// `eps_d = eps_d' / (1 - eps_xt)`.
pub fn correct_dark(eps_d_prime: f64, eps_xt: f64) -> Result<f64> {
    for (name, value) in [("eps_d_prime", eps_d_prime), ("eps_xt", eps_xt)] {
        if !value.is_finite() || !(0.0..1.0).contains(&value) {
            return Err(Error::ParamOutOfRange {
                name,
                value,
                requirement: "0 <= p < 1",
            });
        }
    }
    let eps_d = eps_d_prime / (1.0 - eps_xt);
    if eps_d >= 1.0 {
        return Err(Error::ParamOutOfRange {
            name: "eps_d",
            value: eps_d,
            requirement: "eps_d' / (1 - eps_xt) < 1",
        });
    }
    Ok(eps_d)
}

/// Solver diagnostics for a calibration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationDiagnostics {
    /// Residual of the click-rate equation at the returned root.
    pub residual: f64,
    /// Bisection iterations used.
    pub iterations: u32,
}

/// Result of a cross-talk calibration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    /// Estimated cross-talk probability.
    pub eps_xt: f64,
    /// Estimated coherent mean of the light run.
    pub mean: f64,
    /// Measured dark probability fed in.
    pub eps_d_prime: f64,
    /// Dark probability with cross-talk removed: `eps_d' / (1 - eps_xt)`.
    pub eps_d: f64,
    pub diagnostics: CalibrationDiagnostics,
}

struct ResidualPoint {
    mean: f64,
    residual: f64,
}

/// Predicted-minus-measured single-click rate at a trial cross-talk value.
fn residual_at(eps_xt: f64, p0_meas: f64, p1_meas: f64, eps_d_prime: f64) -> Result<ResidualPoint> {
    let eps_d = correct_dark(eps_d_prime, eps_xt)?;
    let p0 = p0_meas / (1.0 - eps_d);
    if p0 >= 1.0 {
        return Err(Error::ImpliedNegativeMean { p0_meas, p0 });
    }
    let mean = -p0.ln();
    let p1 = mean * p0;
    let predicted = (p1 * (1.0 - eps_d) + p0 * eps_d) * (1.0 - eps_xt);
    Ok(ResidualPoint {
        mean,
        residual: predicted - p1_meas,
    })
}

/// Estimate the cross-talk probability and coherent mean from a light run.
///
/// Solves the single-click equation for `eps_xt` by bisection on
/// `[0, 0.5]`; the measured `eps_d'` comes from a separate dark run (see
/// [`dark_prime_from_run`]).
pub fn calibrate_xt(light: &RunSummary, eps_d_prime: f64) -> Result<CalibrationResult> {
    light.validate()?;
    calibrate_xt_from_rates(light.frequency(0), light.frequency(1), eps_d_prime)
}

/// [`calibrate_xt`] on the measured 0- and 1-click rates directly.
pub fn calibrate_xt_from_rates(
    p0_meas: f64,
    p1_meas: f64,
    eps_d_prime: f64,
) -> Result<CalibrationResult> {
    if p0_meas <= 0.0 || p1_meas <= 0.0 {
        return Err(Error::InvalidRun(format!(
            "calibration needs nonzero 0- and 1-click rates (p'_0 = {p0_meas}, p'_1 = {p1_meas})"
        )));
    }

    let lo = 0.0;
    // Stay strictly inside the region where the implied vacuum probability
    // is below 1; beyond it the model has no solution at all.
    let feasible = 1.0 - eps_d_prime / (1.0 - p0_meas);
    let hi = XT_BRACKET_HI.min(feasible - 1e-9);
    let f_lo = residual_at(lo, p0_meas, p1_meas, eps_d_prime)?;
    if f_lo.residual.abs() <= ENDPOINT_ZERO {
        return Ok(finish(lo, f_lo, eps_d_prime, 0));
    }
    if hi <= lo {
        return Err(Error::NoBracket {
            lo,
            hi,
            f_lo: f_lo.residual,
            f_hi: f64::NAN,
        });
    }
    let f_hi = residual_at(hi, p0_meas, p1_meas, eps_d_prime)?;
    if f_hi.residual.abs() <= ENDPOINT_ZERO {
        return Ok(finish(hi, f_hi, eps_d_prime, 0));
    }
    if f_lo.residual.signum() == f_hi.residual.signum() {
        return Err(Error::NoBracket {
            lo,
            hi,
            f_lo: f_lo.residual,
            f_hi: f_hi.residual,
        });
    }

    let (mut a, mut fa) = (lo, f_lo.residual);
    let mut b = hi;
    let mut best = f_lo;
    let mut root = lo;
    let mut iterations = 0;
    while iterations < XT_MAX_ITERS && (b - a) > XT_TOL {
        let mid = 0.5 * (a + b);
        let fm = residual_at(mid, p0_meas, p1_meas, eps_d_prime)?;
        iterations += 1;
        root = mid;
        if fm.residual == 0.0 {
            best = fm;
            break;
        }
        if fm.residual.signum() == fa.signum() {
            a = mid;
            fa = fm.residual;
        } else {
            b = mid;
        }
        best = fm;
    }
    Ok(finish(root, best, eps_d_prime, iterations))
}

fn finish(
    eps_xt: f64,
    point: ResidualPoint,
    eps_d_prime: f64,
    iterations: u32,
) -> CalibrationResult {
    CalibrationResult {
        eps_xt,
        mean: point.mean,
        eps_d_prime,
        eps_d: eps_d_prime / (1.0 - eps_xt),
        diagnostics: CalibrationDiagnostics {
            residual: point.residual.abs(),
            iterations,
        },
    }
}

/// Pooled statistics over repeated calibrations. The scatter is reported both
/// as a sample standard deviation and as the full min-to-max spread.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationPool {
    pub n: usize,
    pub mean: f64,
    pub std_dev: f64,
    pub min: f64,
    pub max: f64,
    pub spread: f64,
}

/// Pool the cross-talk estimates of two or more calibrations.
pub fn pool_calibrations(results: &[CalibrationResult]) -> Result<CalibrationPool> {
    if results.len() < 2 {
        return Err(Error::InvalidRun(format!(
            "pooling needs at least 2 results, got {}",
            results.len()
        )));
    }
    let n = results.len();
    let values: Vec<f64> = results.iter().map(|r| r.eps_xt).collect();
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(CalibrationPool {
        n,
        mean,
        std_dev: var.sqrt(),
        min,
        max,
        spread: max - min,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{dark_matrix, xt_matrix, XtVariant};
    use crate::sources::{photon_distribution, SourceModel};

    fn run(counts: &[(u32, u64)]) -> RunSummary {
        RunSummary::from_counts(counts.iter().copied().collect())
    }

    /// Noiseless measured click rates: the coherent distribution pushed
    /// through dark and cross-talk matrices (loss deliberately absent).
    fn forward_p01(mean: f64, eps_xt: f64, eps_d_prime: f64, variant: XtVariant) -> (f64, f64) {
        let n_max = 40;
        let eps_d = eps_d_prime / (1.0 - eps_xt);
        let p = photon_distribution(&SourceModel::Coherent { mean }, n_max).unwrap();
        let m = xt_matrix(eps_xt, n_max, variant)
            .unwrap()
            .matmul(&dark_matrix(eps_d, n_max).unwrap())
            .unwrap();
        let out = m.mul_vec(p.values()).unwrap();
        (out[0], out[1])
    }

    #[test]
    fn dark_prime_examples() {
        assert_eq!(dark_prime_from_run(&run(&[(0, 1000)])).unwrap(), 0.0);
        let device = run(&[(0, 997_700), (1, 2_300)]);
        assert!((dark_prime_from_run(&device).unwrap() - 2.3e-3).abs() < 1e-15);
        assert_eq!(dark_prime_from_run(&run(&[(0, 99), (1, 1)])).unwrap(), 0.01);
        assert!(dark_prime_from_run(&RunSummary {
            pulses: 0,
            counts: BTreeMap::new()
        })
        .is_err());
    }

    #[test]
    fn multi_click_dark_pulses_are_a_diagnostic_not_part_of_the_rate() {
        let dark = run(&[(0, 9_000), (1, 900), (2, 90), (3, 10)]);
        assert!((dark_prime_from_run(&dark).unwrap() - 0.09).abs() < 1e-15);
        assert_eq!(dark.multi_click_pulses(), 100);
    }

    #[test]
    fn correct_dark_examples() {
        assert_eq!(correct_dark(0.004, 0.0).unwrap(), 0.004);
        assert!((correct_dark(2.3e-3, 0.0975).unwrap() - 2.5485e-3).abs() < 1e-7);
        assert_eq!(correct_dark(0.0, 0.3).unwrap(), 0.0);
        assert!(correct_dark(0.9, 0.5).is_err()); // quotient >= 1
        assert!(correct_dark(0.1, 1.0).is_err());
    }

    #[test]
    fn calibration_recovers_noiseless_forward_data() {
        for variant in [XtVariant::GeometricChain, XtVariant::Paper] {
            let (p0, p1) = forward_p01(1.66, 0.0975, 2.3e-3, variant);
            let result = calibrate_xt_from_rates(p0, p1, 2.3e-3).unwrap();
            assert!(
                (result.eps_xt - 0.0975).abs() < 1e-8,
                "{variant:?}: {}",
                result.eps_xt
            );
            assert!((result.mean - 1.66).abs() < 1e-8);
            assert!((result.eps_d - 2.3e-3 / (1.0 - result.eps_xt)).abs() < 1e-15);
        }
    }

    #[test]
    fn calibration_from_a_histogram_run() {
        let (p0, p1) = forward_p01(1.66, 0.0975, 2.3e-3, XtVariant::GeometricChain);
        let pulses: u64 = 1_000_000_000_000;
        let n0 = (p0 * pulses as f64).round() as u64;
        let n1 = (p1 * pulses as f64).round() as u64;
        let light = run(&[(0, n0), (1, n1), (2, pulses - n0 - n1)]);
        let result = calibrate_xt(&light, 2.3e-3).unwrap();
        assert!((result.eps_xt - 0.0975).abs() < 1e-8);
        assert!((result.mean - 1.66).abs() < 1e-8);
    }

    #[test]
    fn zero_cross_talk_world_yields_degenerate_root() {
        let (p0, p1) = forward_p01(1.2, 0.0, 3.0e-3, XtVariant::GeometricChain);
        let result = calibrate_xt_from_rates(p0, p1, 3.0e-3).unwrap();
        assert!(result.eps_xt.abs() < 1e-8, "eps_xt = {}", result.eps_xt);
        assert!((result.mean - 1.2).abs() < 1e-6);
    }

    #[test]
    fn noiseless_grid_round_trip() {
        for &mean in &[0.1, 0.86, 1.66, 2.3, 4.0] {
            for &eps_xt in &[0.0, 0.05, 0.0975, 0.3] {
                for &eps_d_prime in &[0.0, 2.3e-3, 0.01] {
                    let (p0, p1) =
                        forward_p01(mean, eps_xt, eps_d_prime, XtVariant::GeometricChain);
                    let result = calibrate_xt_from_rates(p0, p1, eps_d_prime).unwrap();
                    assert!(
                        (result.eps_xt - eps_xt).abs() < 1e-7,
                        "mean={mean} xt={eps_xt} d'={eps_d_prime}: got {}",
                        result.eps_xt
                    );
                    assert!(
                        (result.mean - mean).abs() < 1e-7,
                        "mean={mean} xt={eps_xt} d'={eps_d_prime}: got mean {}",
                        result.mean
                    );
                }
            }
        }
    }

    #[test]
    fn residual_changes_sign_across_the_bracket() {
        // the bisection bracket genuinely straddles the root on the same grid
        for &mean in &[0.1, 1.66, 4.0] {
            for &eps_xt in &[0.01, 0.0975, 0.3] {
                let (p0, p1) = forward_p01(mean, eps_xt, 2.3e-3, XtVariant::GeometricChain);
                let f0 = residual_at(0.0, p0, p1, 2.3e-3).unwrap().residual;
                let f1 = residual_at(0.45, p0, p1, 2.3e-3).unwrap().residual;
                assert!(
                    f0 > 0.0 && f1 < 0.0,
                    "mean={mean} xt={eps_xt}: f(0)={f0} f(0.45)={f1}"
                );
            }
        }
    }

    #[test]
    fn unexplainable_data_reports_no_bracket() {
        // a 1-click rate far above anything the model can produce
        let bad = run(&[(0, 100_000), (1, 899_000), (2, 1_000)]);
        assert!(matches!(
            calibrate_xt(&bad, 2.3e-3),
            Err(Error::NoBracket { .. })
        ));
    }

    #[test]
    fn missing_click_rates_are_rejected() {
        assert!(calibrate_xt(&run(&[(0, 1000)]), 1e-3).is_err());
        assert!(calibrate_xt(&run(&[(1, 1000)]), 1e-3).is_err());
    }

    #[test]
    fn pooling_reports_mean_std_and_spread() {
        let fake = |eps_xt: f64| CalibrationResult {
            eps_xt,
            mean: 1.0,
            eps_d_prime: 0.0,
            eps_d: 0.0,
            diagnostics: CalibrationDiagnostics {
                residual: 0.0,
                iterations: 0,
            },
        };
        let table = [0.0960, 0.0985, 0.0965, 0.0965].map(fake);
        let pool = pool_calibrations(&table).unwrap();
        assert!((pool.mean - 0.096875).abs() < 1e-12);
        // the pooled estimate sits inside the published +-0.0015 band around 0.0975
        assert!((pool.mean - 0.0975).abs() <= 0.0015);
        assert!((pool.std_dev - 0.0011086778913041737).abs() < 1e-12);
        assert!((pool.spread - 0.0025).abs() < 1e-12);

        let twin = [fake(0.09), fake(0.11)];
        let pool = pool_calibrations(&twin).unwrap();
        assert!((pool.mean - 0.10).abs() < 1e-12);
        assert!((pool.std_dev - 0.0002f64.sqrt()).abs() < 1e-12);

        let same = [fake(0.1), fake(0.1), fake(0.1)];
        let pool = pool_calibrations(&same).unwrap();
        assert!(pool.std_dev < 1e-15);
        assert_eq!(pool.spread, 0.0);

        assert!(pool_calibrations(&[fake(0.1)]).is_err());
    }

    #[test]
    fn run_summary_validation() {
        assert!(RunSummary::new([(0u32, 5u64)].into_iter().collect(), 6).is_err());
        let ok = RunSummary::new([(0u32, 5u64), (2, 1)].into_iter().collect(), 6).unwrap();
        assert_eq!(ok.max_clicks(), 2);
        assert!((ok.frequency(0) - 5.0 / 6.0).abs() < 1e-15);
        let dist = ok.to_dist(4).unwrap();
        assert!((dist[2] - 1.0 / 6.0).abs() < 1e-15);
        assert!(ok.to_dist(1).is_err());
    }
}
