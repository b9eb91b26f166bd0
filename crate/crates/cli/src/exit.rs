//! Process exit codes, derived from the error chain.

use magscan::calib::CalibError;
use magscan::detect::DetectError;
use magscan::instrument::InstrumentError;
use magscan::lockin::{LockinError, ScanError};
use magscan::signal::ConfigError;
use magscan::trace::TraceError;

pub const OK: u8 = 0;
pub const USAGE: u8 = 2;
pub const IO: u8 = 3;
pub const CONNECTION: u8 = 4;
pub const PROTOCOL: u8 = 5;
pub const CALIBRATION: u8 = 6;
pub const DATA: u8 = 7;

/// Marks an error with an explicit exit code.
#[derive(Debug, thiserror::Error)]
#[error("{message}")]
pub struct Coded {
    pub code: u8,
    pub message: String,
}

pub fn coded(code: u8, message: impl Into<String>) -> anyhow::Error {
    Coded { code, message: message.into() }.into()
}

fn instrument_code(e: &InstrumentError) -> u8 {
    match e {
        InstrumentError::Connection(_) | InstrumentError::SessionClosed => CONNECTION,
        InstrumentError::Protocol { .. } | InstrumentError::BadRequest(_) | InstrumentError::Busy(_) => PROTOCOL,
        InstrumentError::OutOfRange(_) => USAGE,
        InstrumentError::NotAvailable(_) | InstrumentError::Fault(_) => CALIBRATION,
    }
}

pub fn code_for(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(c) = cause.downcast_ref::<Coded>() {
            return c.code;
        }
        if let Some(e) = cause.downcast_ref::<CalibError>() {
            return match e {
                CalibError::Instrument(i) => instrument_code(i),
                _ => CALIBRATION,
            };
        }
        if let Some(e) = cause.downcast_ref::<InstrumentError>() {
            return instrument_code(e);
        }
        if cause.is::<ConfigError>() || cause.is::<LockinError>() || cause.is::<toml::de::Error>() {
            return USAGE;
        }
        if let Some(e) = cause.downcast_ref::<ScanError>() {
            return match e {
                ScanError::Trace(_) => DATA,
                _ => USAGE,
            };
        }
        if let Some(e) = cause.downcast_ref::<TraceError>() {
            return match e {
                TraceError::Io(_) => IO,
                _ => DATA,
            };
        }
        if cause.is::<serde_json::Error>() || cause.is::<DetectError>() {
            return DATA;
        }
        if cause.is::<std::io::Error>() {
            return IO;
        }
    }
    1
}
