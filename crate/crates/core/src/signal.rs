//! Phenomenological photodetector model.
//!
//! The transmitted light is a baseline depleted by one Lorentzian per
//! two-photon harmonic plus a broad zero-field (population redistribution)
//! term. Harmonic amplitudes are weighted by the polar angle of the field
//! with respect to the light propagation axis (Z): even orders by `cos²θ`,
//! odd orders by a transverse weight peaking near 45°.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::atomic::{AtomSpecies, Axis, FieldVector, HarmonicId, ScanAxis};
use crate::lockin::{LockinPair, LockinSettings};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("invalid value for `{field}`: {reason}")]
    Invalid { field: &'static str, reason: String },
    #[error("scan index {index} out of range (scan has {points} points)")]
    ScanIndex { index: usize, points: usize },
}

fn invalid(field: &'static str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { field, reason: reason.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CellKind {
    /// Buffer-gas filled.
    BF,
    /// Anti-relaxation coated.
    ARC,
}

/// Polarity of the zero-field resonance in the photodetector signal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResponseSign {
    Absorption,
    Transmission,
}

/// Zero-field polarity per scan axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ZeroFieldSigns {
    pub rf: ResponseSign,
    pub bx: ResponseSign,
    pub by: ResponseSign,
    pub bz: ResponseSign,
}

impl ZeroFieldSigns {
    /// Circularly polarized light: absorptive along the beam, transmissive across it.
    pub fn circular() -> Self {
        Self {
            rf: ResponseSign::Absorption,
            bx: ResponseSign::Transmission,
            by: ResponseSign::Transmission,
            bz: ResponseSign::Absorption,
        }
    }

    pub fn get(&self, axis: ScanAxis) -> ResponseSign {
        match axis {
            ScanAxis::RF => self.rf,
            ScanAxis::BX => self.bx,
            ScanAxis::BY => self.by,
            ScanAxis::BZ => self.bz,
        }
    }
}

/// Relative line amplitude per signed harmonic. Serialized with string keys
/// (`"-4" = 0.008`) so it fits TOML tables.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct HarmonicAmplitudes(pub BTreeMap<i32, f64>);

impl HarmonicAmplitudes {
    /// Same amplitude for `+n` and `-n`; `by_order[k]` is the amplitude of `|n| = k`.
    pub fn symmetric(by_order: &[f64]) -> Self {
        let mut map = BTreeMap::new();
        for (k, &a) in by_order.iter().enumerate() {
            let k = k as i32;
            map.insert(k, a);
            map.insert(-k, a);
        }
        Self(map)
    }

    pub fn get(&self, n: HarmonicId) -> f64 {
        self.0.get(&n.0).copied().unwrap_or(0.0)
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self(self.0.iter().map(|(&k, &v)| (k, v * factor)).collect())
    }
}

impl Serialize for HarmonicAmplitudes {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeMap;
        let mut m = s.serialize_map(Some(self.0.len()))?;
        for (k, v) in &self.0 {
            m.serialize_entry(&k.to_string(), v)?;
        }
        m.end()
    }
}

impl<'de> Deserialize<'de> for HarmonicAmplitudes {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = BTreeMap::<String, f64>::deserialize(d)?;
        let mut map = BTreeMap::new();
        for (k, v) in raw {
            let n = k
                .trim_start_matches('+')
                .parse::<i32>()
                .map_err(|_| serde::de::Error::custom(format!("harmonic key `{k}` is not an integer")))?;
            map.insert(n, v);
        }
        Ok(Self(map))
    }
}

/// Vapor-cell line-shape parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellModel {
    pub kind: CellKind,
    /// Intrinsic two-photon half width, kHz.
    pub two_photon_hwhm: f64,
    pub harmonic_amp: HarmonicAmplitudes,
    /// Odd-harmonic weight for a purely transverse field, before normalization.
    pub odd_transverse_floor: f64,
    /// Zero-field resonance half width at zero orthogonal field, μT.
    pub zf_width: f64,
    pub zf_amp: f64,
    /// Fractional width growth per μT of orthogonal field.
    pub zf_width_slope: f64,
    /// Fractional amplitude loss per μT of orthogonal field.
    pub zf_amp_slope: f64,
    pub zf_sign: ZeroFieldSigns,
    pub baseline: f64,
}

impl CellModel {
    /// Buffer-gas cell. The half width gives a 0.53 μT wide n = 4 feature in
    /// the MM channel under 0.14 μT peak-to-peak modulation.
    pub fn bf() -> Self {
        Self {
            kind: CellKind::BF,
            two_photon_hwhm: 8.42,
            harmonic_amp: HarmonicAmplitudes::symmetric(&[0.010, 0.004, 0.010, 0.010, 0.008, 0.010]),
            odd_transverse_floor: 0.4,
            zf_width: 0.8,
            zf_amp: 0.02,
            zf_width_slope: 0.1,
            zf_amp_slope: 0.05,
            zf_sign: ZeroFieldSigns::circular(),
            baseline: 1.0,
        }
    }

    /// Coated cell: weaker lines and zero-field term. The half width keeps
    /// the n = 4 MM feature near 2.3 μT under 2 μT peak-to-peak modulation
    /// without splitting the CPT features.
    pub fn arc() -> Self {
        Self {
            kind: CellKind::ARC,
            two_photon_hwhm: 27.0,
            harmonic_amp: HarmonicAmplitudes::symmetric(&[0.005, 0.002, 0.005, 0.005, 0.004, 0.005]),
            odd_transverse_floor: 0.4,
            zf_width: 0.6,
            zf_amp: 0.03,
            zf_width_slope: 0.1,
            zf_amp_slope: 0.05,
            zf_sign: ZeroFieldSigns::circular(),
            baseline: 1.0,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.two_photon_hwhm > 0.0) {
            return Err(invalid("cell.two_photon_hwhm", "must be positive"));
        }
        if !(self.zf_width > 0.0) {
            return Err(invalid("cell.zf_width", "must be positive"));
        }
        if !(self.zf_amp >= 0.0) {
            return Err(invalid("cell.zf_amp", "must be non-negative"));
        }
        if self.harmonic_amp.0.values().any(|a| !(*a >= 0.0)) {
            return Err(invalid("cell.harmonic_amp", "amplitudes must be non-negative"));
        }
        if !(self.odd_transverse_floor >= 0.0) {
            return Err(invalid("cell.odd_transverse_floor", "must be non-negative"));
        }
        if !(self.zf_width_slope >= 0.0) || !(self.zf_amp_slope >= 0.0) {
            return Err(invalid("cell.zf_width_slope", "slopes must be non-negative"));
        }
        if !(self.baseline > 0.0) {
            return Err(invalid("cell.baseline", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RfModulation {
    /// Sine amplitude of the detuning modulation, kHz.
    pub amplitude: f64,
    pub frequency: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BModulation {
    pub axis: Axis,
    /// Sine amplitude, μT.
    pub amplitude: f64,
    pub frequency: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModulationConfig {
    pub rf: RfModulation,
    pub b: BModulation,
}

impl ModulationConfig {
    pub const RF_FREQUENCY: f64 = 440.0;
    pub const B_FREQUENCY: f64 = 39.0;

    pub fn new(rf_amplitude: f64, b_axis: Axis, b_amplitude: f64) -> Self {
        Self {
            rf: RfModulation { amplitude: rf_amplitude, frequency: Self::RF_FREQUENCY },
            b: BModulation { axis: b_axis, amplitude: b_amplitude, frequency: Self::B_FREQUENCY },
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.rf.frequency > 0.0) {
            return Err(invalid("modulation.rf.frequency", "must be positive"));
        }
        if !(self.b.frequency > 0.0) {
            return Err(invalid("modulation.b.frequency", "must be positive"));
        }
        if self.rf.frequency == self.b.frequency {
            return Err(invalid("modulation.b.frequency", "must differ from the RF modulation frequency"));
        }
        if !(self.rf.amplitude >= 0.0) {
            return Err(invalid("modulation.rf.amplitude", "must be non-negative"));
        }
        if !(self.b.amplitude >= 0.0) {
            return Err(invalid("modulation.b.amplitude", "must be non-negative"));
        }
        Ok(())
    }

    pub fn max_frequency(&self) -> f64 {
        self.rf.frequency.max(self.b.frequency)
    }

    pub fn min_frequency(&self) -> f64 {
        self.rf.frequency.min(self.b.frequency)
    }
}

/// Linear scan. For field axes the values are the coil-applied field along
/// that axis (μT); for RF they are absolute detunings (kHz).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanDef {
    pub axis: ScanAxis,
    pub start: f64,
    pub stop: f64,
    pub points: usize,
}

impl ScanDef {
    pub fn value(&self, index: usize) -> f64 {
        if index == 0 {
            return self.start;
        }
        let step = (self.stop - self.start) / (self.points - 1) as f64;
        self.start + index as f64 * step
    }

    pub fn values(&self) -> Vec<f64> {
        (0..self.points).map(|i| self.value(i)).collect()
    }
}

/// Everything needed to synthesize and demodulate a scan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub species: AtomSpecies,
    pub cell: CellModel,
    /// Static RF detuning for field scans, kHz.
    pub delta_rf: f64,
    pub background: FieldVector,
    pub applied: FieldVector,
    pub scan: ScanDef,
    pub modulation: ModulationConfig,
    pub lockin: LockinPair,
    pub sample_rate: f64,
    pub integration_window: f64,
    pub noise_rms: f64,
    pub seed: u64,
}

impl ExperimentConfig {
    pub const SAMPLE_RATE: f64 = 10_000.0;
    pub const INTEGRATION_WINDOW: f64 = 0.6;

    /// Buffer-gas cell, δ = -58 kHz, compensated background, one field axis.
    pub fn bf_fig3(axis: Axis) -> Self {
        Self {
            species: AtomSpecies::rb85(),
            cell: CellModel::bf(),
            delta_rf: -58.0,
            background: FieldVector::ZERO,
            applied: FieldVector::ZERO,
            scan: ScanDef { axis: axis.scan_axis(), start: -8.0, stop: 8.0, points: 200 },
            modulation: ModulationConfig::new(0.65, axis, 0.07),
            lockin: LockinPair::bf(),
            sample_rate: Self::SAMPLE_RATE,
            integration_window: Self::INTEGRATION_WINDOW,
            noise_rms: 2e-4,
            seed: 1,
        }
    }

    /// Coated cell, δ = +316 kHz, wide scan.
    pub fn arc_fig4(axis: Axis) -> Self {
        Self {
            species: AtomSpecies::rb85(),
            cell: CellModel::arc(),
            delta_rf: 316.0,
            background: FieldVector::ZERO,
            applied: FieldVector::ZERO,
            scan: ScanDef { axis: axis.scan_axis(), start: -40.0, stop: 40.0, points: 1201 },
            modulation: ModulationConfig::new(10.0, axis, 1.0),
            lockin: LockinPair::arc(),
            sample_rate: Self::SAMPLE_RATE,
            integration_window: Self::INTEGRATION_WINDOW,
            noise_rms: 1e-4,
            seed: 1,
        }
    }

    /// Buffer-gas cell, δ = -434 kHz, Bz scan with a transverse field along X.
    pub fn bf_fig2(transverse: f64) -> Self {
        let mut c = Self::bf_fig3(Axis::Z);
        c.delta_rf = -434.0;
        c.applied = FieldVector::new(transverse, 0.0, 0.0);
        c.scan = ScanDef { axis: ScanAxis::BZ, start: -35.0, stop: 35.0, points: 800 };
        c
    }

    /// Conventional RF scan at a fixed applied field.
    pub fn bf_rf_scan(applied: FieldVector) -> Self {
        let mut c = Self::bf_fig3(Axis::Z);
        c.applied = applied;
        let span = 5.5 * c.species.gamma() * applied.magnitude() + 30.0;
        c.scan = ScanDef { axis: ScanAxis::RF, start: -span, stop: span, points: 800 };
        c
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.species
            .validate()
            .map_err(|e| invalid("species", e.to_string()))?;
        self.cell.validate()?;
        self.modulation.validate()?;
        self.lockin.cpt.validate().map_err(|e| invalid("lockin.cpt", e.to_string()))?;
        self.lockin.mm.validate().map_err(|e| invalid("lockin.mm", e.to_string()))?;
        if self.scan.points < 2 {
            return Err(invalid("scan.points", "need at least 2 points"));
        }
        if !self.scan.start.is_finite() || !self.scan.stop.is_finite() || self.scan.start == self.scan.stop {
            return Err(invalid("scan.stop", "scan range must be finite and non-empty"));
        }
        if !(self.sample_rate > 20.0 * self.modulation.max_frequency()) {
            return Err(invalid(
                "sample_rate",
                format!("must exceed 20x the highest modulation frequency ({} Hz)", self.modulation.max_frequency()),
            ));
        }
        if !(self.integration_window >= 5.0 / self.modulation.min_frequency()) {
            return Err(invalid(
                "integration_window",
                "must span at least 5 periods of the slowest modulation",
            ));
        }
        for (name, s) in [("lockin.cpt.time_constant", &self.lockin.cpt), ("lockin.mm.time_constant", &self.lockin.mm)] {
            if !(self.integration_window > 5.0 * s.time_constant) {
                return Err(invalid(name, "integration window must exceed 5 time constants"));
            }
        }
        if !(self.noise_rms >= 0.0) {
            return Err(invalid("noise_rms", "must be non-negative"));
        }
        if !self.delta_rf.is_finite() {
            return Err(invalid("delta_rf", "must be finite"));
        }
        Ok(())
    }

    /// Detuning and static field at a scan value.
    pub fn operating_point(&self, scan_value: f64) -> (f64, FieldVector) {
        match self.scan.axis.field_axis() {
            None => (scan_value, self.background + self.applied),
            Some(axis) => {
                let mut applied = self.applied;
                applied.set(axis, scan_value);
                (self.delta_rf, self.background + applied)
            }
        }
    }

    pub fn samples_per_point(&self) -> usize {
        (self.integration_window * self.sample_rate).round() as usize
    }

    pub fn lockin_for(&self, channel: crate::lockin::Channel) -> &LockinSettings {
        match channel {
            crate::lockin::Channel::Cpt => &self.lockin.cpt,
            crate::lockin::Channel::Mm => &self.lockin.mm,
        }
    }
}

/// Precomputed evaluator for the steady photodetector signal.
#[derive(Debug, Clone)]
pub struct SignalModel {
    lines: Vec<Line>,
    inv_hwhm: f64,
    odd_floor: f64,
    odd_norm: f64,
    zf_axis: Axis,
    zf_sign: ResponseSign,
    zf_amp: f64,
    zf_width: f64,
    zf_width_slope: f64,
    zf_amp_slope: f64,
    baseline: f64,
}

#[derive(Debug, Clone, Copy)]
struct Line {
    /// n * gamma, kHz/μT.
    slope: f64,
    amp: f64,
    even: bool,
}

impl SignalModel {
    pub fn new(config: &ExperimentConfig) -> Self {
        let cell = &config.cell;
        let gamma = config.species.gamma();
        let lines = (-config.species.n_max..=config.species.n_max)
            .map(HarmonicId)
            .filter_map(|n| {
                let amp = cell.harmonic_amp.get(n);
                (amp > 0.0).then_some(Line { slope: n.0 as f64 * gamma, amp, even: n.is_even() })
            })
            .collect();
        // Maximum of floor*s + 4 s (1 - s) over s = sin²θ in [0, 1].
        let eps = cell.odd_transverse_floor;
        let s_peak = ((eps + 4.0) / 8.0).min(1.0);
        let odd_norm = eps * s_peak + 4.0 * s_peak * (1.0 - s_peak);
        Self {
            lines,
            inv_hwhm: 1.0 / cell.two_photon_hwhm,
            odd_floor: eps,
            odd_norm: if odd_norm > 0.0 { odd_norm } else { 1.0 },
            zf_axis: config.scan.axis.field_axis().unwrap_or(Axis::Z),
            zf_sign: cell.zf_sign.get(config.scan.axis),
            zf_amp: cell.zf_amp,
            zf_width: cell.zf_width,
            zf_width_slope: cell.zf_width_slope,
            zf_amp_slope: cell.zf_amp_slope,
            baseline: cell.baseline,
        }
    }

    /// `(even, odd)` angular weights of the harmonic amplitudes.
    pub fn angular_weights(&self, b: &FieldVector) -> (f64, f64) {
        let mag2 = b.bx * b.bx + b.by * b.by + b.bz * b.bz;
        if mag2 == 0.0 {
            return (1.0, 0.0);
        }
        let cos2 = b.bz * b.bz / mag2;
        let sin2 = 1.0 - cos2;
        let odd = (self.odd_floor * sin2 + 4.0 * sin2 * cos2) / self.odd_norm;
        (cos2, odd)
    }

    /// `(amplitude, half width)` of the zero-field term at an orthogonal field.
    pub fn zero_field_shape(&self, perp: f64) -> (f64, f64) {
        let amp = self.zf_amp * (1.0 - self.zf_amp_slope * perp).max(0.0);
        let width = self.zf_width * (1.0 + self.zf_width_slope * perp);
        (amp, width)
    }

    pub fn zero_field(&self, b: &FieldVector) -> f64 {
        let x = b.component(self.zf_axis);
        let (amp, width) = self.zero_field_shape(b.perp(self.zf_axis));
        let u = x / width;
        let z = 1.0 / (1.0 + u * u);
        match self.zf_sign {
            ResponseSign::Absorption => -amp * z,
            ResponseSign::Transmission => -amp * (1.0 - z),
        }
    }

    /// Sum of the two-photon depletion terms (non-negative).
    pub fn two_photon_depletion(&self, nu: f64, b: &FieldVector) -> f64 {
        let mag = b.magnitude();
        let (w_even, w_odd) = self.angular_weights(b);
        let mut total = 0.0;
        for line in &self.lines {
            let w = if line.even { w_even } else { w_odd };
            if w == 0.0 {
                continue;
            }
            let u = (nu - line.slope * mag) * self.inv_hwhm;
            total += line.amp * w / (1.0 + u * u);
        }
        total
    }

    pub fn evaluate(&self, nu: f64, b: &FieldVector) -> f64 {
        self.baseline - self.two_photon_depletion(nu, b) + self.zero_field(b)
    }
}

/// Photodetector level for an instantaneous detuning and field.
pub fn steady_absorption(config: &ExperimentConfig, nu_inst: f64, b_inst: &FieldVector) -> f64 {
    SignalModel::new(config).evaluate(nu_inst, b_inst)
}

/// Zero-field contribution to the photodetector level (independent of detuning).
pub fn zero_field_response(config: &ExperimentConfig, b_inst: &FieldVector) -> f64 {
    SignalModel::new(config).zero_field(b_inst)
}

/// Modulation waveforms shared by every point of a scan.
#[derive(Debug, Clone)]
pub(crate) struct Waveforms {
    pub t: Vec<f64>,
    pub rf: Vec<f64>,
    pub b: Vec<f64>,
}

impl Waveforms {
    pub fn new(config: &ExperimentConfig) -> Self {
        let n = config.samples_per_point();
        let dt = 1.0 / config.sample_rate;
        let two_pi = 2.0 * std::f64::consts::PI;
        let t: Vec<f64> = (0..n).map(|k| k as f64 * dt).collect();
        let rf = t
            .iter()
            .map(|&t| config.modulation.rf.amplitude * (two_pi * config.modulation.rf.frequency * t).sin())
            .collect();
        let b = t
            .iter()
            .map(|&t| config.modulation.b.amplitude * (two_pi * config.modulation.b.frequency * t).sin())
            .collect();
        Self { t, rf, b }
    }
}

/// Seed of the noise stream for one scan point.
pub fn point_seed(seed: u64, index: usize) -> u64 {
    seed ^ index as u64
}

pub(crate) fn synthesize_values(
    config: &ExperimentConfig,
    model: &SignalModel,
    waves: &Waveforms,
    scan_value: f64,
    noise_seed: u64,
) -> Vec<f64> {
    let (nu0, b0) = config.operating_point(scan_value);
    let mod_axis = config.modulation.b.axis;
    let mut out: Vec<f64> = waves
        .rf
        .iter()
        .zip(&waves.b)
        .map(|(&drf, &db)| {
            let mut b = b0;
            b.set(mod_axis, b0.component(mod_axis) + db);
            model.evaluate(nu0 + drf, &b)
        })
        .collect();
    if config.noise_rms > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        for v in &mut out {
            let g: f64 = StandardNormal.sample(&mut rng);
            *v += config.noise_rms * g;
        }
    }
    out
}

/// Time series `(t, PD)` for one scan point over the integration window.
pub fn synthesize_timeseries(config: &ExperimentConfig, scan_index: usize) -> Result<Vec<(f64, f64)>, ConfigError> {
    config.validate()?;
    if scan_index >= config.scan.points {
        return Err(ConfigError::ScanIndex { index: scan_index, points: config.scan.points });
    }
    let model = SignalModel::new(config);
    let waves = Waveforms::new(config);
    let values = synthesize_values(
        config,
        &model,
        &waves,
        config.scan.value(scan_index),
        point_seed(config.seed, scan_index),
    );
    Ok(waves.t.iter().copied().zip(values).collect())
}
