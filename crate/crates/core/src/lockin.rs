//! Numerical phase-sensitive detection.
//!
//! The input is AC coupled, mixed with `sin(2π f t + φ)` and passed through a
//! single-pole low-pass. The first five time constants are discarded and the
//! filter output is averaged over a whole number of reference periods. The
//! result is reported as the analog output of an instrument set to the given
//! sensitivity (full scale [`OUTPUT_FULL_SCALE`] volts).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::signal::{point_seed, synthesize_values, ConfigError, ExperimentConfig, SignalModel, Waveforms};
use crate::trace::{ControlUnit, Trace, TraceChannel, TraceError};

/// Analog output full scale of the lock-in, volts.
pub const OUTPUT_FULL_SCALE: f64 = 10.0;

/// Settling time discarded before averaging, in time constants.
pub const SETTLE_TIME_CONSTANTS: f64 = 5.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LockinError {
    #[error("series spans {duration} s but at least {required} s (5 time constants) are needed")]
    InsufficientData { duration: f64, required: f64 },
    #[error("invalid lock-in settings: {0}")]
    InvalidSettings(String),
}

#[derive(Debug, Error)]
pub enum ScanError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Lockin(#[from] LockinError),
    #[error(transparent)]
    Trace(#[from] TraceError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LockinSettings {
    pub reference_freq: f64,
    /// Reference phase, radians.
    pub reference_phase: f64,
    /// Low-pass time constant, s.
    pub time_constant: f64,
    /// Input full scale, V.
    pub sensitivity: f64,
}

impl LockinSettings {
    pub fn new(reference_freq: f64, time_constant: f64, sensitivity: f64) -> Self {
        Self { reference_freq, reference_phase: 0.0, time_constant, sensitivity }
    }

    pub fn validate(&self) -> Result<(), LockinError> {
        if !(self.reference_freq > 0.0) {
            return Err(LockinError::InvalidSettings("reference frequency must be positive".into()));
        }
        if !(self.time_constant >= 3.0 / self.reference_freq) {
            return Err(LockinError::InvalidSettings(format!(
                "time constant {} s is shorter than 3 reference periods",
                self.time_constant
            )));
        }
        if !(self.sensitivity > 0.0) {
            return Err(LockinError::InvalidSettings("sensitivity must be positive".into()));
        }
        if !self.reference_phase.is_finite() {
            return Err(LockinError::InvalidSettings("reference phase must be finite".into()));
        }
        Ok(())
    }

    pub fn gain(&self) -> f64 {
        OUTPUT_FULL_SCALE / self.sensitivity
    }
}

/// Which lock-in reads the photodetector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Channel {
    /// Referenced to the RF modulation (LIA-1).
    Cpt,
    /// Referenced to the field modulation (LIA-2).
    Mm,
}

/// The two lock-ins of the setup.
///
/// Channel presets use a reference phase of π: with that polarity the
/// zero-field feature of a Bz scan in the buffer-gas cell (enhanced
/// absorption) has a negative central slope.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LockinPair {
    pub cpt: LockinSettings,
    pub mm: LockinSettings,
}

impl LockinPair {
    fn with_sensitivities(cpt: f64, mm: f64) -> Self {
        let pi = std::f64::consts::PI;
        Self {
            cpt: LockinSettings { reference_freq: 440.0, reference_phase: pi, time_constant: 0.02, sensitivity: cpt },
            mm: LockinSettings { reference_freq: 39.0, reference_phase: pi, time_constant: 0.08, sensitivity: mm },
        }
    }

    /// 300 μV (CPT) and 1 mV (MM).
    pub fn bf() -> Self {
        Self::with_sensitivities(300e-6, 1e-3)
    }

    /// 100 μV (CPT) and 300 μV (MM).
    pub fn arc() -> Self {
        Self::with_sensitivities(100e-6, 300e-6)
    }
}

/// Demodulator bound to a fixed sample grid.
#[derive(Debug, Clone)]
pub(crate) struct Demodulator {
    reference: Vec<f64>,
    alpha: f64,
    settle: usize,
    average: usize,
    gain: f64,
}

impl Demodulator {
    pub fn new(t: &[f64], settings: &LockinSettings) -> Result<Self, LockinError> {
        settings.validate()?;
        let required = SETTLE_TIME_CONSTANTS * settings.time_constant;
        if t.len() < 2 {
            return Err(LockinError::InsufficientData { duration: 0.0, required });
        }
        let dt = (t[t.len() - 1] - t[0]) / (t.len() - 1) as f64;
        let duration = dt * t.len() as f64;
        if !(dt > 0.0) || duration < required {
            return Err(LockinError::InsufficientData { duration, required });
        }
        let settle = t.iter().position(|&tk| tk - t[0] >= required).unwrap_or(t.len());
        let remaining = t.len() - settle;
        if remaining == 0 {
            return Err(LockinError::InsufficientData { duration, required });
        }
        let periods = (remaining as f64 * dt * settings.reference_freq).floor();
        let average = if periods >= 1.0 {
            ((periods / (settings.reference_freq * dt)).round() as usize).clamp(1, remaining)
        } else {
            remaining
        };
        let w = 2.0 * std::f64::consts::PI * settings.reference_freq;
        let reference = t.iter().map(|&tk| (w * tk + settings.reference_phase).sin()).collect();
        Ok(Self {
            reference,
            alpha: 1.0 - (-dt / settings.time_constant).exp(),
            settle,
            average,
            gain: settings.gain(),
        })
    }

    pub fn apply(&self, values: &[f64]) -> f64 {
        debug_assert_eq!(values.len(), self.reference.len());
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let mut y = 0.0;
        let mut acc = 0.0;
        let end = self.settle + self.average;
        for (k, (&v, &r)) in values.iter().zip(&self.reference).enumerate().take(end) {
            y += self.alpha * ((v - mean) * r - y);
            if k >= self.settle {
                acc += y;
            }
        }
        self.gain * acc / self.average as f64
    }
}

/// Demodulate a uniformly sampled `(t, value)` series.
pub fn demodulate(series: &[(f64, f64)], settings: &LockinSettings) -> Result<f64, LockinError> {
    let t: Vec<f64> = series.iter().map(|s| s.0).collect();
    let v: Vec<f64> = series.iter().map(|s| s.1).collect();
    Ok(Demodulator::new(&t, settings)?.apply(&v))
}

/// Reference phase that maximizes the demodulated output of `series`.
pub fn auto_phase(series: &[(f64, f64)], reference_freq: f64) -> f64 {
    let n = series.len().max(1) as f64;
    let mean = series.iter().map(|s| s.1).sum::<f64>() / n;
    let w = 2.0 * std::f64::consts::PI * reference_freq;
    let (mut in_phase, mut quadrature) = (0.0, 0.0);
    for &(t, v) in series {
        in_phase += (v - mean) * (w * t).sin();
        quadrature += (v - mean) * (w * t).cos();
    }
    // mean(v sin(wt + φ)) = I cos φ + Q sin φ
    quadrature.atan2(in_phase)
}

pub(crate) fn trace_channel(config: &ExperimentConfig, channel: Channel) -> TraceChannel {
    match channel {
        Channel::Cpt => TraceChannel::Cpt,
        Channel::Mm => TraceChannel::mm(config.modulation.b.axis),
    }
}

/// Demodulated values at arbitrary scan values; row `i` uses noise seed `seeds[i]`.
pub(crate) fn measure_points(
    config: &ExperimentConfig,
    values: &[f64],
    seeds: &[u64],
    channels: &[Channel],
) -> Result<Vec<Vec<f64>>, ScanError> {
    config.validate()?;
    let model = SignalModel::new(config);
    let waves = Waveforms::new(config);
    let demods = channels
        .iter()
        .map(|&c| Demodulator::new(&waves.t, config.lockin_for(c)))
        .collect::<Result<Vec<_>, _>>()?;
    let rows: Vec<Vec<f64>> = values
        .par_iter()
        .zip(seeds.par_iter())
        .map(|(&value, &seed)| {
            let series = synthesize_values(config, &model, &waves, value, seed);
            demods.iter().map(|d| d.apply(&series)).collect()
        })
        .collect();
    Ok(rows)
}

/// Synthesize and demodulate every point of the configured scan. Returns one
/// trace per requested channel, in order.
pub fn run_scan(config: &ExperimentConfig, channels: &[Channel]) -> Result<Vec<Trace>, ScanError> {
    let values = config.scan.values();
    let seeds: Vec<u64> = (0..values.len()).map(|i| point_seed(config.seed, i)).collect();
    let rows = measure_points(config, &values, &seeds, channels)?;
    let unit = if config.scan.axis.is_field() { ControlUnit::MicroTesla } else { ControlUnit::KiloHertz };
    channels
        .iter()
        .enumerate()
        .map(|(ci, &c)| {
            let samples = values.iter().zip(&rows).map(|(&x, row)| (x, row[ci])).collect();
            let mut trace = Trace::new(trace_channel(config, c), config.scan.axis, unit, samples)?;
            trace.metadata = Some(config.clone());
            Ok(trace)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::atomic::Axis;

    const FS: f64 = 10_000.0;

    fn tone(amp: f64, f: f64, phase: f64, seconds: f64) -> Vec<(f64, f64)> {
        let n = (seconds * FS) as usize;
        (0..n)
            .map(|k| {
                let t = k as f64 / FS;
                (t, 0.3 + amp * (2.0 * std::f64::consts::PI * f * t + phase).sin())
            })
            .collect()
    }

    #[test]
    fn pure_tone_gives_half_amplitude() {
        let s = LockinSettings::new(440.0, 0.02, 1e-3);
        let out = demodulate(&tone(2e-4, 440.0, 0.0, 0.5), &s).unwrap();
        let expected = 1e-4 * s.gain();
        assert!((out - expected).abs() < 1e-3 * expected, "{out} vs {expected}");
        let s39 = LockinSettings::new(39.0, 0.08, 1e-3);
        let out = demodulate(&tone(2e-4, 39.0, 0.0, 0.6), &s39).unwrap();
        let expected = 1e-4 * s39.gain();
        assert!((out - expected).abs() < 5e-3 * expected, "{out} vs {expected}");
    }

    #[test]
    fn off_frequency_tone_is_rejected() {
        let s = LockinSettings::new(440.0, 0.02, 1e-3);
        let amp = 2e-4;
        for f in [1337.0, 97.3, 1763.1] {
            let out = demodulate(&tone(amp, f, 0.4, 0.5), &s).unwrap();
            let df: f64 = (f - 440.0_f64).abs();
            // Single pole at Δf, then averaging over ≥ 0.4 s.
            let bound = s.gain() * 0.5 * amp / (2.0 * std::f64::consts::PI * df * s.time_constant);
            assert!(out.abs() < bound, "{f}: {out} vs {bound}");
            assert!(out.abs() < 1e-3 * amp * s.gain() / 2.0);
        }
    }

    #[test]
    fn linear_in_amplitude() {
        let s = LockinSettings::new(39.0, 0.08, 1e-3);
        let a = demodulate(&tone(1e-4, 39.0, 0.7, 0.6), &s).unwrap();
        let b = demodulate(&tone(2e-4, 39.0, 0.7, 0.6), &s).unwrap();
        assert!((b - 2.0 * a).abs() < 1e-9 * b.abs());
    }

    #[test]
    fn too_short_series_is_an_error() {
        let s = LockinSettings::new(39.0, 0.08, 1e-3);
        assert!(matches!(
            demodulate(&tone(1e-4, 39.0, 0.0, 0.3), &s),
            Err(LockinError::InsufficientData { .. })
        ));
    }

    #[test]
    fn settings_reject_short_time_constant() {
        assert!(LockinSettings::new(39.0, 0.05, 1e-3).validate().is_err());
        assert!(LockinSettings::new(39.0, 0.08, 0.0).validate().is_err());
    }

    #[test]
    fn auto_phase_recovers_tone_phase() {
        let series = tone(1e-4, 440.0, 1.1, 0.2);
        let phase = auto_phase(&series, 440.0);
        let mut s = LockinSettings::new(440.0, 0.02, 1e-3);
        s.reference_phase = phase;
        let best = demodulate(&series, &s).unwrap();
        s.reference_phase = phase + 0.3;
        assert!(demodulate(&series, &s).unwrap() < best);
        // sin(wt + 1.1) is maximally aligned with a reference phase of 1.1.
        assert!((phase - 1.1).abs() < 0.02, "{phase}");
    }

    #[test]
    fn scan_produces_one_trace_per_channel() {
        let mut c = ExperimentConfig::bf_fig3(Axis::Z);
        c.scan.points = 5;
        let traces = run_scan(&c, &[Channel::Cpt, Channel::Mm]).unwrap();
        assert_eq!(traces.len(), 2);
        assert_eq!(traces[0].channel, TraceChannel::Cpt);
        assert_eq!(traces[1].channel, TraceChannel::MmZ);
        assert_eq!(traces[0].samples.len(), 5);
        assert_eq!(traces[0].metadata.as_ref(), Some(&c));
    }

    #[test]
    fn parallel_and_serial_synthesis_agree() {
        let mut c = ExperimentConfig::bf_fig3(Axis::X);
        c.scan.points = 6;
        let traces = run_scan(&c, &[Channel::Cpt]).unwrap();
        let settings = c.lockin.cpt;
        for i in 0..6 {
            let series = crate::signal::synthesize_timeseries(&c, i).unwrap();
            let v = demodulate(&series, &settings).unwrap();
            assert_eq!(v, traces[0].samples[i].1);
        }
    }
}
