//! Digitizer waveform ingestion, post-selection, pulse-height binning, and
//! synthetic waveform generation for end-to-end tests.
//!
//! Records are short traces captured around a trigger in pre-trigger mode.
//! Two-step post-selection rejects dark-contaminated pulses:
//!
//! 1. if the trace is away from the digitizer zero level shortly before the
//!    trigger, an earlier avalanche is still decaying across the window and
//!    the pulse is discarded;
//! 2. otherwise, a rising edge inside a small window after the trigger marks
//!    a real detection and the trace value near its peak is saved as the
//!    pulse height; with no edge the pulse counts as a zero-click event.
//!
//! Accepted heights fall into equally spaced peaks, one per click number;
//! [`heights_to_counts`] bins them with a fixed gain/offset and
//! [`estimate_gain`] recovers that spacing from the height histogram.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};

use crate::calibrate::RunSummary;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"MPXW";
const FORMAT_VERSION: u16 = 1;

/// One digitizer trace with trigger metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaveformRecord {
    /// Voltage samples.
    pub samples: Vec<f32>,
    /// Time per sample in nanoseconds (1 ns at a 1 GS/s digitizer).
    pub sample_period_ns: f64,
    /// Sample index of trigger arrival.
    pub trigger_index: u32,
}

impl WaveformRecord {
    pub fn new(samples: Vec<f32>, sample_period_ns: f64, trigger_index: u32) -> Result<Self> {
        let record = Self {
            samples,
            sample_period_ns,
            trigger_index,
        };
        record.validate()?;
        Ok(record)
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples.is_empty() || self.trigger_index as usize >= self.samples.len() {
            return Err(Error::RecordTooShort(format!(
                "trigger index {} in a record of {} samples",
                self.trigger_index,
                self.samples.len()
            )));
        }
        if !(self.sample_period_ns.is_finite() && self.sample_period_ns > 0.0) {
            return Err(Error::ParamOutOfRange {
                name: "sample_period_ns",
                value: self.sample_period_ns,
                requirement: "> 0",
            });
        }
        if let Some(bad) = self.samples.iter().find(|s| !s.is_finite()) {
            return Err(Error::RecordTooShort(format!("non-finite sample {bad}")));
        }
        Ok(())
    }

    fn sample_at(&self, index: usize) -> f64 {
        self.samples[index] as f64
    }
}

/// Post-selection parameters, all in volts and nanoseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionConfig {
    /// |v|`s up to this count as the digitizer zero level.
    pub zero_tolerance: f64,
    /// How long before the trigger the zero-level check looks.
    pub pre_check_offset_ns: f64,
    /// Length of the rising-edge search window after the trigger.
    pub edge_window_ns: f64,
    /// Where after the trigger the pulse height is read (near the peak).
    pub peak_offset_ns: f64,
    /// Forward slope defining a rising edge, volts per nanosecond.
    pub edge_slope_threshold: f64,
}

impl AcquisitionConfig {
    /// Defaults scaled to a known single-pixel pulse amplitude: the zero
    /// level is 0.2x the amplitude and a rising edge is 0.3x amplitude/ns.
    pub fn for_amplitude(single_pixel_volts: f64) -> Self {
        Self {
            zero_tolerance: 0.2 * single_pixel_volts,
            pre_check_offset_ns: 1.0,
            edge_window_ns: 3.0,
            peak_offset_ns: 5.0,
            edge_slope_threshold: 0.3 * single_pixel_volts,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, value) in [
            ("zero_tolerance", self.zero_tolerance),
            ("pre_check_offset_ns", self.pre_check_offset_ns),
            ("edge_window_ns", self.edge_window_ns),
            ("peak_offset_ns", self.peak_offset_ns),
            ("edge_slope_threshold", self.edge_slope_threshold),
        ] {
            if !value.is_finite() || value <= 0.0 {
                return Err(Error::ParamOutOfRange {
                    name,
                    value,
                    requirement: "> 0",
                });
            }
        }
        Ok(())
    }
}

/// Classification of one waveform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum PulseOutcome {
    /// Discarded: the trace was not at zero level before the trigger.
    Rejected,
    /// No rising edge in the window: a zero-click event.
    Zero,
    /// A detection; `height` is the trace value near the pulse peak.
    Accepted { height: f64 },
}

/// Apply the two-step post-selection to one record.
pub fn post_select(record: &WaveformRecord, cfg: &AcquisitionConfig) -> Result<PulseOutcome> {
    record.validate()?;
    cfg.validate()?;
    let period = record.sample_period_ns;
    let steps = |ns: f64| (ns / period).round() as usize;
    let trigger = record.trigger_index as usize;

    let pre_steps = steps(cfg.pre_check_offset_ns);
    let edge_steps = steps(cfg.edge_window_ns);
    let peak_steps = steps(cfg.peak_offset_ns);
    let last_needed = trigger + edge_steps.max(peak_steps);
    if pre_steps > trigger || last_needed >= record.samples.len() {
        return Err(Error::RecordTooShort(format!(
            "record spans [{}..{}] samples around trigger {trigger}, but offsets need [-{pre_steps}..+{}]",
            0,
            record.samples.len() - 1,
            edge_steps.max(peak_steps),
        )));
    }

    // Step 1: zero-level check before the trigger.
    if record.sample_at(trigger - pre_steps).abs() > cfg.zero_tolerance {
        return Ok(PulseOutcome::Rejected);
    }

    // Step 2: first rising edge within the window after the trigger.
    let slope_per_step = cfg.edge_slope_threshold * period;
    let edge_found = (trigger..trigger + edge_steps)
        .any(|i| record.sample_at(i + 1) - record.sample_at(i) > slope_per_step);
    if !edge_found {
        return Ok(PulseOutcome::Zero);
    }
    let height = record.sample_at(trigger + peak_steps);
    if height <= 0.0 {
        // an "edge" with nothing at the readout point is noise
        return Ok(PulseOutcome::Zero);
    }
    Ok(PulseOutcome::Accepted { height })
}

/// Batch post-selection tallies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchOutcome {
    /// Heights of accepted pulses, in record order.
    pub heights: Vec<f64>,
    pub zero_pulses: u64,
    pub rejected_pulses: u64,
}

impl BatchOutcome {
    /// Accepted pulses including zero-click events.
    pub fn kept_pulses(&self) -> u64 {
        self.heights.len() as u64 + self.zero_pulses
    }
}

/// Post-select a batch of records. Records are independent, so the batch
/// runs in parallel; the returned heights keep record order.
pub fn process_records(
    records: &[WaveformRecord],
    cfg: &AcquisitionConfig,
) -> Result<BatchOutcome> {
    let outcomes: Vec<PulseOutcome> = records
        .par_iter()
        .map(|record| post_select(record, cfg))
        .collect::<Result<_>>()?;
    let mut batch = BatchOutcome {
        heights: Vec::new(),
        zero_pulses: 0,
        rejected_pulses: 0,
    };
    for outcome in outcomes {
        match outcome {
            PulseOutcome::Rejected => batch.rejected_pulses += 1,
            PulseOutcome::Zero => batch.zero_pulses += 1,
            PulseOutcome::Accepted { height } => batch.heights.push(height),
        }
    }
    Ok(batch)
}

/// Bin accepted pulse heights into click counts with midpoint thresholds:
/// `clicks = round((height - offset) / gain)`, clamped at zero.
/// `zero_pulses` zero-click events are added to the 0 bin.
pub fn heights_to_counts(
    heights: &[f64],
    zero_pulses: u64,
    gain: f64,
    offset: f64,
) -> Result<RunSummary> {
    if !gain.is_finite() || gain <= 0.0 {
        return Err(Error::ParamOutOfRange {
            name: "gain",
            value: gain,
            requirement: "> 0",
        });
    }
    let mut counts: BTreeMap<u32, u64> = BTreeMap::new();
    if zero_pulses > 0 {
        counts.insert(0, zero_pulses);
    }
    for &height in heights {
        let clicks = ((height - offset) / gain).round().max(0.0) as u32;
        *counts.entry(clicks).or_insert(0) += 1;
    }
    RunSummary::new(counts, heights.len() as u64 + zero_pulses)
}

/// Gain/offset estimate from the pulse-height histogram.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainEstimate {
    /// Median spacing between adjacent height peaks: volts per click.
    pub gain: f64,
    /// Location of the first peak.
    pub offset: f64,
    /// All detected peak positions, ascending.
    pub peaks: Vec<f64>,
}

const GAIN_BINS: usize = 512;
const GAIN_KERNEL_SIGMA: f64 = 4.0;
const GAIN_REL_FLOOR: f64 = 0.05;
const GAIN_VALLEY_FRAC: f64 = 0.5;
const GAIN_MIN_Z: f64 = 5.0;

/// Estimate the per-click gain from raw accepted heights.
///
/// The height histogram is smoothed with a fixed-width Gaussian kernel and
/// local maxima are kept only when they are separated by a valley that is
/// both deep (below half the smaller peak) and statistically significant
/// against Poisson bin noise. Needs at least 100 heights spanning at least
/// two distinct peaks.
pub fn estimate_gain(heights: &[f64]) -> Result<GainEstimate> {
    if heights.len() < 100 {
        return Err(Error::InvalidRun(format!(
            "gain estimation needs at least 100 accepted heights, got {}",
            heights.len()
        )));
    }
    let lo0 = heights.iter().copied().fold(f64::INFINITY, f64::min);
    let hi0 = heights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(lo0.is_finite() && hi0.is_finite()) || hi0 <= lo0 {
        return Err(Error::TooFewPeaks { found: 1 });
    }

    let width = (hi0 - lo0) / GAIN_BINS as f64;
    let pad = (4.0 * GAIN_KERNEL_SIGMA) as usize + 2;
    let lo = lo0 - pad as f64 * width;
    let total = GAIN_BINS + 2 * pad;

    let mut hist = vec![0.0f64; total];
    for &h in heights {
        let bin = (((h - lo) / width) as usize).min(total - 1);
        hist[bin] += 1.0;
    }

    // fixed-width Gaussian smoothing, truncated at 4 sigma
    let half = (4.0 * GAIN_KERNEL_SIGMA) as usize;
    let kernel: Vec<f64> = (0..=2 * half)
        .map(|j| {
            let x = j as f64 - half as f64;
            (-0.5 * (x / GAIN_KERNEL_SIGMA).powi(2)).exp()
        })
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let kernel_sq: f64 = kernel.iter().map(|k| k * k).sum();

    let smoothed: Vec<f64> = (0..total)
        .map(|i| {
            kernel
                .iter()
                .enumerate()
                .filter_map(|(j, &k)| {
                    let idx = i as isize + j as isize - half as isize;
                    (idx >= 0 && (idx as usize) < total).then(|| k * hist[idx as usize])
                })
                .sum()
        })
        .collect();

    let floor = GAIN_REL_FLOOR * smoothed.iter().copied().fold(0.0, f64::max);
    let mut candidates: Vec<usize> = (1..total - 1)
        .filter(|&i| {
            smoothed[i] >= floor && smoothed[i] > smoothed[i - 1] && smoothed[i] >= smoothed[i + 1]
        })
        .collect();
    candidates.sort_by(|&a, &b| smoothed[b].total_cmp(&smoothed[a]));

    let mut accepted: Vec<usize> = Vec::new();
    'next: for &i in &candidates {
        for &j in &accepted {
            let (a, b) = (i.min(j), i.max(j));
            let valley = smoothed[a..=b]
                .iter()
                .copied()
                .fold(f64::INFINITY, f64::min);
            let lower = smoothed[i].min(smoothed[j]);
            let deep = valley < GAIN_VALLEY_FRAC * lower;
            let z = (lower - valley) / ((lower + valley).max(1.0) * kernel_sq).sqrt();
            if !(deep && z > GAIN_MIN_Z) {
                continue 'next;
            }
        }
        accepted.push(i);
    }
    if accepted.len() < 2 {
        return Err(Error::TooFewPeaks {
            found: accepted.len(),
        });
    }
    accepted.sort_unstable();

    // sub-bin refinement by parabolic interpolation
    let peaks: Vec<f64> = accepted
        .iter()
        .map(|&i| {
            let denom = smoothed[i - 1] - 2.0 * smoothed[i] + smoothed[i + 1];
            let shift = if denom.abs() > 1e-300 {
                (0.5 * (smoothed[i - 1] - smoothed[i + 1]) / denom).clamp(-0.5, 0.5)
            } else {
                0.0
            };
            lo + (i as f64 + 0.5 + shift) * width
        })
        .collect();

    let mut spacings: Vec<f64> = peaks.windows(2).map(|w| w[1] - w[0]).collect();
    spacings.sort_by(f64::total_cmp);
    let gain = if spacings.len() % 2 == 1 {
        spacings[spacings.len() / 2]
    } else {
        0.5 * (spacings[spacings.len() / 2 - 1] + spacings[spacings.len() / 2])
    };
    Ok(GainEstimate {
        gain,
        offset: peaks[0],
        peaks,
    })
}

/// Single-pixel pulse shape: a difference of exponentials,
/// `amplitude * (exp(-t/fall) - exp(-t/rise)) / peak`, zero before onset.
///
/// The defaults (1 ns rise, 24 ns fall) give a full width at half maximum of
/// about 20 ns.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PulseTemplate {
    /// Peak voltage of a single-pixel pulse.
    pub amplitude: f64,
    pub rise_ns: f64,
    pub fall_ns: f64,
}

impl PulseTemplate {
    pub fn standard(amplitude: f64) -> Self {
        Self {
            amplitude,
            rise_ns: 1.0,
            fall_ns: 24.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.amplitude.is_finite() && self.amplitude > 0.0) {
            return Err(Error::ParamOutOfRange {
                name: "amplitude",
                value: self.amplitude,
                requirement: "> 0",
            });
        }
        if !(self.rise_ns > 0.0 && self.fall_ns > self.rise_ns) {
            return Err(Error::ParamOutOfRange {
                name: "rise_ns/fall_ns",
                value: self.rise_ns,
                requirement: "0 < rise < fall",
            });
        }
        Ok(())
    }

    fn raw(&self, t_ns: f64) -> f64 {
        if t_ns <= 0.0 {
            0.0
        } else {
            (-t_ns / self.fall_ns).exp() - (-t_ns / self.rise_ns).exp()
        }
    }

    /// Time of the pulse maximum after onset.
    pub fn peak_time_ns(&self) -> f64 {
        let ratio = self.fall_ns / self.rise_ns;
        ratio.ln() * self.rise_ns * self.fall_ns / (self.fall_ns - self.rise_ns)
    }

    /// Voltage contribution of one pixel `t_ns` after its onset.
    pub fn value(&self, t_ns: f64) -> f64 {
        self.amplitude * self.raw(t_ns) / self.raw(self.peak_time_ns())
    }
}

/// Geometry and noise of synthesized records.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub template: PulseTemplate,
    /// Trace time before the trigger, ns.
    pub pre_trigger_ns: f64,
    /// Total trace duration, ns.
    pub record_ns: f64,
    pub sample_period_ns: f64,
    /// Gaussian noise standard deviation per sample, volts.
    pub noise_sigma: f64,
}

impl SynthConfig {
    pub fn standard(template: PulseTemplate, noise_sigma: f64) -> Self {
        Self {
            template,
            pre_trigger_ns: 5.0,
            record_ns: 20.0,
            sample_period_ns: 1.0,
            noise_sigma,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.template.validate()?;
        let period_ok = self.sample_period_ns.is_finite() && self.sample_period_ns > 0.0;
        let pre_ok = self.pre_trigger_ns.is_finite() && self.pre_trigger_ns >= 0.0;
        if !period_ok || !pre_ok || self.record_ns < self.pre_trigger_ns + self.sample_period_ns {
            return Err(Error::ParamOutOfRange {
                name: "record_ns",
                value: self.record_ns,
                requirement: "record must cover the pre-trigger plus at least one sample",
            });
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::ParamOutOfRange {
                name: "noise_sigma",
                value: self.noise_sigma,
                requirement: ">= 0",
            });
        }
        Ok(())
    }

    /// Height a single click reads out at the given peak offset; this, not
    /// the template amplitude, is the per-click gain of the pipeline.
    pub fn readout_height_per_click(&self, peak_offset_ns: f64) -> f64 {
        self.template.value(peak_offset_ns)
    }
}

/// Synthesize one record: `clicks` pixels firing at the trigger, plus dark
/// pulses of `(onset time relative to trigger in ns, pixels)` anywhere in or
/// before the window, plus Gaussian sample noise. Deterministic for a given
/// RNG state.
pub fn synthesize_waveform<R: Rng>(
    clicks: u32,
    dark_events: &[(f64, u32)],
    cfg: &SynthConfig,
    rng: &mut R,
) -> Result<WaveformRecord> {
    cfg.validate()?;
    let count = (cfg.record_ns / cfg.sample_period_ns).round() as usize;
    let trigger_index = (cfg.pre_trigger_ns / cfg.sample_period_ns).round() as u32;
    let noise = if cfg.noise_sigma > 0.0 {
        Some(Normal::new(0.0, cfg.noise_sigma).expect("validated sigma"))
    } else {
        None
    };
    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        let t = i as f64 * cfg.sample_period_ns - cfg.pre_trigger_ns;
        let mut v = clicks as f64 * cfg.template.value(t);
        for &(t0, pixels) in dark_events {
            v += pixels as f64 * cfg.template.value(t - t0);
        }
        if let Some(n) = &noise {
            v += n.sample(rng);
        }
        samples.push(v as f32);
    }
    WaveformRecord::new(samples, cfg.sample_period_ns, trigger_index)
}

/// Poisson-process dark events over `window` ns relative to the trigger,
/// one pixel each, at `rate_per_ns`.
pub fn sample_dark_events<R: Rng>(
    rate_per_ns: f64,
    window: (f64, f64),
    rng: &mut R,
) -> Vec<(f64, u32)> {
    let span = window.1 - window.0;
    if rate_per_ns <= 0.0 || span <= 0.0 {
        return Vec::new();
    }
    let count = rand_distr::Poisson::new(rate_per_ns * span)
        .expect("positive rate")
        .sample(rng) as usize;
    (0..count)
        .map(|_| (window.0 + rng.random::<f64>() * span, 1))
        .collect()
}

/// Write records in the binary container format: for each record the magic
/// `MPXW`, a `u16` version, the sample period as an `f64` (ns), the trigger
/// index and sample count as `u32`s, then the samples as `f32`s. All fields
/// little-endian.
pub fn write_records<W: Write>(w: &mut W, records: &[WaveformRecord]) -> Result<()> {
    for record in records {
        record.validate()?;
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&record.sample_period_ns.to_le_bytes())?;
        w.write_all(&record.trigger_index.to_le_bytes())?;
        w.write_all(&(record.samples.len() as u32).to_le_bytes())?;
        for s in &record.samples {
            w.write_all(&s.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Read records until end of stream.
pub fn read_records<R: Read>(r: &mut R) -> Result<Vec<WaveformRecord>> {
    let mut records = Vec::new();
    loop {
        let mut magic = [0u8; 4];
        match read_exact_or_eof(r, &mut magic)? {
            false => break,
            true => {
                if &magic != MAGIC {
                    return Err(Error::Format(format!(
                        "bad magic {magic:02x?}, expected {MAGIC:02x?}"
                    )));
                }
            }
        }
        let mut u16buf = [0u8; 2];
        r.read_exact(&mut u16buf)?;
        let version = u16::from_le_bytes(u16buf);
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported waveform format version {version}"
            )));
        }
        let mut f64buf = [0u8; 8];
        r.read_exact(&mut f64buf)?;
        let sample_period_ns = f64::from_le_bytes(f64buf);
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf)?;
        let trigger_index = u32::from_le_bytes(u32buf);
        r.read_exact(&mut u32buf)?;
        let count = u32::from_le_bytes(u32buf) as usize;
        let mut samples = Vec::with_capacity(count);
        let mut f32buf = [0u8; 4];
        for _ in 0..count {
            r.read_exact(&mut f32buf)?;
            samples.push(f32::from_le_bytes(f32buf));
        }
        records.push(WaveformRecord::new(
            samples,
            sample_period_ns,
            trigger_index,
        )?);
    }
    Ok(records)
}

fn read_exact_or_eof<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<bool> {
    let mut filled = 0;
    while filled < buf.len() {
        let n = r.read(&mut buf[filled..])?;
        if n == 0 {
            if filled == 0 {
                return Ok(false);
            }
            return Err(Error::Format("truncated record header".into()));
        }
        filled += n;
    }
    Ok(true)
}
