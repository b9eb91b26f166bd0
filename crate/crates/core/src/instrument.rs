//! The abstract instrument consumed by calibration, and an in-process
//! virtual instrument with hidden coil calibration and background field.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::atomic::{AtomSpecies, Axis, FieldVector, ScanAxis};
use crate::lockin::{measure_points, Channel, LockinPair, ScanError};
use crate::signal::{point_seed, CellKind, CellModel, ExperimentConfig, ModulationConfig, ScanDef};
use crate::trace::{ControlUnit, Trace, TraceChannel};

pub const IDENTITY: &str = "cpt-magscan-sim-1";

pub const MAX_COIL_VOLTS: f64 = 500.0;
pub const MAX_DETUNING_KHZ: f64 = 5000.0;
pub const MAX_SCAN_POINTS: usize = 20_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InstrumentError {
    #[error("malformed request: {0}")]
    BadRequest(String),
    #[error("instrument busy: {0}")]
    Busy(String),
    #[error("out of range: {0}")]
    OutOfRange(String),
    #[error("not available: {0}")]
    NotAvailable(String),
    #[error("instrument fault: {0}")]
    Fault(String),
    #[error("connection error: {0}")]
    Connection(String),
    #[error("protocol violation: {message} (line `{line}`)")]
    Protocol { line: String, message: String },
    #[error("session closed")]
    SessionClosed,
}

/// Lock-in amplifier selector: 1 is the CPT channel, 2 the MM channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Lia {
    One,
    Two,
}

impl Lia {
    pub fn channel(self) -> Channel {
        match self {
            Lia::One => Channel::Cpt,
            Lia::Two => Channel::Mm,
        }
    }

    pub fn number(self) -> u8 {
        match self {
            Lia::One => 1,
            Lia::Two => 2,
        }
    }

    pub fn from_number(n: u8) -> Option<Lia> {
        match n {
            1 => Some(Lia::One),
            2 => Some(Lia::Two),
            _ => None,
        }
    }
}

/// What a scan sweeps: one coil's control voltage or the RF detuning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ScanTarget {
    Coil(Axis),
    RfDetuning,
}

impl ScanTarget {
    pub fn scan_axis(self) -> ScanAxis {
        match self {
            ScanTarget::Coil(a) => a.scan_axis(),
            ScanTarget::RfDetuning => ScanAxis::RF,
        }
    }

    pub fn unit(self) -> ControlUnit {
        match self {
            ScanTarget::Coil(_) => ControlUnit::Volts,
            ScanTarget::RfDetuning => ControlUnit::KiloHertz,
        }
    }
}

pub trait Instrument {
    fn identify(&mut self) -> Result<String, InstrumentError>;
    fn set_coil(&mut self, axis: Axis, volts: f64) -> Result<(), InstrumentError>;
    fn set_rf_detuning(&mut self, khz: f64) -> Result<(), InstrumentError>;
    fn set_rf_modulation(&mut self, amplitude: f64, frequency: f64) -> Result<(), InstrumentError>;
    fn set_b_modulation(&mut self, axis: Axis, amplitude: f64, frequency: f64) -> Result<(), InstrumentError>;
    fn read(&mut self, lia: Lia) -> Result<f64, InstrumentError>;
    fn scan(
        &mut self,
        target: ScanTarget,
        start: f64,
        stop: f64,
        points: usize,
        lia: Lia,
    ) -> Result<Trace, InstrumentError>;
}

/// Cell given either by preset name or in full.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CellSpec {
    Preset(CellKind),
    Model(CellModel),
}

impl CellSpec {
    pub fn model(&self) -> CellModel {
        match self {
            CellSpec::Preset(CellKind::BF) => CellModel::bf(),
            CellSpec::Preset(CellKind::ARC) => CellModel::arc(),
            CellSpec::Model(m) => m.clone(),
        }
    }
}

/// Hidden parameters of a virtual instrument. Control voltage `v` on a coil
/// produces `factors[axis] * v` μT along that axis, on top of `background`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstrumentTruth {
    pub cell: CellSpec,
    /// μT per volt, X Y Z.
    pub factors: [f64; 3],
    pub background: FieldVector,
    #[serde(default = "default_noise")]
    pub noise_rms: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "AtomSpecies::rb85")]
    pub species: AtomSpecies,
}

fn default_noise() -> f64 {
    2e-4
}

impl InstrumentTruth {
    /// Buffer-gas cell with the given coils and background.
    pub fn bf(factors: [f64; 3], background: FieldVector, seed: u64) -> Self {
        Self {
            cell: CellSpec::Preset(CellKind::BF),
            factors,
            background,
            noise_rms: default_noise(),
            seed,
            species: AtomSpecies::rb85(),
        }
    }

    /// The bundled demo: coils 0.6, 0.6, 3.1 μT/V and a (-0.3, -2.2, 0) μT background.
    pub fn demo() -> Self {
        Self::bf([0.6, 0.6, 3.1], FieldVector::new(-0.3, -2.2, 0.0), 7)
    }

    pub fn validate(&self) -> Result<(), InstrumentError> {
        for (axis, f) in Axis::ALL.iter().zip(self.factors) {
            if !(f.is_finite() && f != 0.0) {
                return Err(InstrumentError::OutOfRange(format!("coil factor {axis} must be finite and non-zero")));
            }
        }
        let b = self.background;
        if !(b.bx.is_finite() && b.by.is_finite() && b.bz.is_finite()) {
            return Err(InstrumentError::OutOfRange("background must be finite".into()));
        }
        if !(self.noise_rms >= 0.0) {
            return Err(InstrumentError::OutOfRange("noise_rms must be non-negative".into()));
        }
        self.species.validate().map_err(|e| InstrumentError::OutOfRange(e.to_string()))?;
        self.cell.model().validate().map_err(|e| InstrumentError::OutOfRange(e.to_string()))
    }
}

/// Operator-settable state of the instrument.
#[derive(Debug, Clone, PartialEq)]
pub struct InstrumentState {
    pub coils: [f64; 3],
    pub delta_rf: f64,
    pub modulation: ModulationConfig,
}

/// Simulated instrument. Every `read` or `scan` draws a fresh noise stream
/// from the seed and an operation counter, so identical command sequences
/// produce identical data.
#[derive(Debug, Clone)]
pub struct VirtualInstrument {
    truth: InstrumentTruth,
    base: ExperimentConfig,
    state: InstrumentState,
    operations: u64,
}

impl VirtualInstrument {
    pub fn new(truth: InstrumentTruth) -> Result<Self, InstrumentError> {
        truth.validate()?;
        let cell = truth.cell.model();
        let (lockin, modulation) = match cell.kind {
            CellKind::BF => (LockinPair::bf(), ModulationConfig::new(0.65, Axis::Z, 0.07)),
            CellKind::ARC => (LockinPair::arc(), ModulationConfig::new(10.0, Axis::Z, 1.0)),
        };
        let base = ExperimentConfig {
            species: truth.species.clone(),
            cell,
            delta_rf: 0.0,
            background: truth.background,
            applied: FieldVector::ZERO,
            scan: ScanDef { axis: ScanAxis::RF, start: 0.0, stop: 1.0, points: 2 },
            modulation,
            lockin,
            sample_rate: ExperimentConfig::SAMPLE_RATE,
            integration_window: ExperimentConfig::INTEGRATION_WINDOW,
            noise_rms: truth.noise_rms,
            seed: truth.seed,
        };
        let state = InstrumentState { coils: [0.0; 3], delta_rf: 0.0, modulation };
        Ok(Self { truth, base, state, operations: 0 })
    }

    pub fn truth(&self) -> &InstrumentTruth {
        &self.truth
    }

    pub fn state(&self) -> &InstrumentState {
        &self.state
    }

    /// Field produced by the coils at the current settings, excluding background.
    pub fn applied_field(&self) -> FieldVector {
        let c = self.state.coils;
        let f = self.truth.factors;
        FieldVector::new(f[0] * c[0], f[1] * c[1], f[2] * c[2])
    }

    /// Coil voltage that cancels the background along `axis`.
    pub fn true_zero(&self, axis: Axis) -> f64 {
        -self.truth.background.component(axis) / self.truth.factors[axis.index()]
    }

    fn config(&self) -> ExperimentConfig {
        let mut c = self.base.clone();
        c.delta_rf = self.state.delta_rf;
        c.applied = self.applied_field();
        c.modulation = self.state.modulation;
        c.lockin.cpt.reference_freq = c.modulation.rf.frequency;
        c.lockin.mm.reference_freq = c.modulation.b.frequency;
        c
    }

    fn next_seed(&mut self) -> u64 {
        let s = splitmix64(self.truth.seed.wrapping_add(self.operations));
        self.operations += 1;
        s
    }

    fn check_modulation(&self, m: ModulationConfig) -> Result<(), InstrumentError> {
        let mut c = self.config();
        c.modulation = m;
        c.lockin.cpt.reference_freq = m.rf.frequency;
        c.lockin.mm.reference_freq = m.b.frequency;
        c.validate().map_err(|e| InstrumentError::OutOfRange(e.to_string()))
    }

    fn measure(&mut self, config: &ExperimentConfig, values: &[f64], lia: Lia) -> Result<Vec<f64>, InstrumentError> {
        let seed = self.next_seed();
        let seeds: Vec<u64> = (0..values.len()).map(|i| point_seed(seed, i)).collect();
        let rows = measure_points(config, values, &seeds, &[lia.channel()]).map_err(|e| match e {
            ScanError::Config(e) => InstrumentError::OutOfRange(e.to_string()),
            other => InstrumentError::Fault(other.to_string()),
        })?;
        Ok(rows.into_iter().map(|r| r[0]).collect())
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn finite(name: &str, v: f64) -> Result<(), InstrumentError> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(InstrumentError::OutOfRange(format!("{name} must be finite")))
    }
}

impl Instrument for VirtualInstrument {
    fn identify(&mut self) -> Result<String, InstrumentError> {
        Ok(IDENTITY.to_string())
    }

    fn set_coil(&mut self, axis: Axis, volts: f64) -> Result<(), InstrumentError> {
        finite("coil voltage", volts)?;
        if volts.abs() > MAX_COIL_VOLTS {
            return Err(InstrumentError::OutOfRange(format!("|coil voltage| must be <= {MAX_COIL_VOLTS} V")));
        }
        self.state.coils[axis.index()] = volts;
        Ok(())
    }

    fn set_rf_detuning(&mut self, khz: f64) -> Result<(), InstrumentError> {
        finite("RF detuning", khz)?;
        if khz.abs() > MAX_DETUNING_KHZ {
            return Err(InstrumentError::OutOfRange(format!("|RF detuning| must be <= {MAX_DETUNING_KHZ} kHz")));
        }
        self.state.delta_rf = khz;
        Ok(())
    }

    fn set_rf_modulation(&mut self, amplitude: f64, frequency: f64) -> Result<(), InstrumentError> {
        finite("RF modulation", amplitude)?;
        finite("RF modulation frequency", frequency)?;
        let mut m = self.state.modulation;
        m.rf.amplitude = amplitude;
        m.rf.frequency = frequency;
        self.check_modulation(m)?;
        self.state.modulation = m;
        Ok(())
    }

    fn set_b_modulation(&mut self, axis: Axis, amplitude: f64, frequency: f64) -> Result<(), InstrumentError> {
        finite("B modulation", amplitude)?;
        finite("B modulation frequency", frequency)?;
        let mut m = self.state.modulation;
        m.b.axis = axis;
        m.b.amplitude = amplitude;
        m.b.frequency = frequency;
        self.check_modulation(m)?;
        self.state.modulation = m;
        Ok(())
    }

    fn read(&mut self, lia: Lia) -> Result<f64, InstrumentError> {
        let mut config = self.config();
        config.scan = ScanDef { axis: ScanAxis::RF, start: config.delta_rf, stop: config.delta_rf + 1.0, points: 2 };
        let v = self.measure(&config, &[config.delta_rf], lia)?;
        Ok(v[0])
    }

    fn scan(
        &mut self,
        target: ScanTarget,
        start: f64,
        stop: f64,
        points: usize,
        lia: Lia,
    ) -> Result<Trace, InstrumentError> {
        finite("scan start", start)?;
        finite("scan stop", stop)?;
        if !(2..=MAX_SCAN_POINTS).contains(&points) {
            return Err(InstrumentError::OutOfRange(format!("points must be in 2..={MAX_SCAN_POINTS}")));
        }
        if start == stop {
            return Err(InstrumentError::OutOfRange("scan start and stop must differ".into()));
        }
        let (limit, what) = match target {
            ScanTarget::Coil(_) => (MAX_COIL_VOLTS, "coil voltage"),
            ScanTarget::RfDetuning => (MAX_DETUNING_KHZ, "RF detuning"),
        };
        if start.abs() > limit || stop.abs() > limit {
            return Err(InstrumentError::OutOfRange(format!("{what} scan exceeds +/-{limit}")));
        }
        let controls = ScanDef { axis: target.scan_axis(), start, stop, points }.values();
        let mut config = self.config();
        let values: Vec<f64> = match target {
            ScanTarget::Coil(axis) => {
                let f = self.truth.factors[axis.index()];
                config.scan = ScanDef { axis: axis.scan_axis(), start: f * start, stop: f * stop, points };
                controls.iter().map(|v| f * v).collect()
            }
            ScanTarget::RfDetuning => {
                config.scan = ScanDef { axis: ScanAxis::RF, start, stop, points };
                controls.clone()
            }
        };
        let measured = self.measure(&config, &values, lia)?;
        let channel = match lia {
            Lia::One => TraceChannel::Cpt,
            Lia::Two => TraceChannel::mm(config.modulation.b.axis),
        };
        let samples = controls.into_iter().zip(measured).collect();
        Trace::new(channel, target.scan_axis(), target.unit(), samples).map_err(|e| InstrumentError::Fault(e.to_string()))
    }
}
