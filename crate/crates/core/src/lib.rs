//! Simulation, lock-in demodulation, feature detection and coil calibration
//! for a coherent-population-trapping vector magnetometer.
//!
//! [`signal`] synthesizes photodetector time series, [`lockin`] demodulates
//! them into [`Trace`]s, [`detect`] extracts dispersive resonances and
//! [`calib`] turns those into coil calibration factors and background-field
//! estimates, driving any [`instrument::Instrument`].

// `!(x > 0.0)` is how validation rejects NaN along with non-positive values
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod atomic;
pub mod calib;
pub mod detect;
pub mod instrument;
pub mod lockin;
pub mod report;
pub mod signal;
pub mod trace;

pub use atomic::{AtomSpecies, Axis, FieldVector, HarmonicId, ScanAxis};
pub use calib::{auto_calibrate, conventional_calibrate, CalibError, CalibrationPlan, CoilCalibration};
pub use detect::{detect_features, ResonanceFeature};
pub use instrument::{Instrument, InstrumentError, InstrumentTruth, Lia, ScanTarget, VirtualInstrument};
pub use lockin::{demodulate, run_scan, Channel, LockinPair, LockinSettings};
pub use report::CalibrationReport;
pub use signal::{CellKind, CellModel, ExperimentConfig, ModulationConfig, ScanDef};
pub use trace::{ControlUnit, Trace, TraceChannel};
