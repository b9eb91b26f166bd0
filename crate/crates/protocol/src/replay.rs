//! Instrument backend that serves recorded trace CSVs.

use std::collections::HashMap;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use log::warn;

use magscan::instrument::{Instrument, InstrumentError, Lia, ScanTarget};
use magscan::trace::{Trace, TraceError};
use magscan::{Axis, ScanAxis};

pub const REPLAY_IDENTITY: &str = "cpt-magscan-replay-1";

#[derive(Debug, thiserror::Error)]
pub enum ReplayError {
    #[error("{path}: {source}")]
    Trace { path: PathBuf, source: TraceError },
    #[error("{0}: {1}")]
    Io(PathBuf, std::io::Error),
    #[error("no trace CSVs in {0}")]
    Empty(PathBuf),
}

fn target_of(axis: ScanAxis) -> ScanTarget {
    match axis {
        ScanAxis::RF => ScanTarget::RfDetuning,
        ScanAxis::BX => ScanTarget::Coil(Axis::X),
        ScanAxis::BY => ScanTarget::Coil(Axis::Y),
        ScanAxis::BZ => ScanTarget::Coil(Axis::Z),
    }
}

/// Each scan request returns the next recorded trace with the same target
/// and lock-in, in file-name order, wrapping around. The requested range is
/// not checked against the recording.
#[derive(Debug, Clone)]
pub struct ReplayInstrument {
    traces: HashMap<(ScanTarget, Lia), Vec<Trace>>,
    cursor: HashMap<(ScanTarget, Lia), usize>,
}

impl ReplayInstrument {
    pub fn new(traces: Vec<Trace>) -> Self {
        let mut map: HashMap<(ScanTarget, Lia), Vec<Trace>> = HashMap::new();
        for t in traces {
            let lia = if t.channel.is_mm() { Lia::Two } else { Lia::One };
            map.entry((target_of(t.scan_axis), lia)).or_default().push(t);
        }
        Self { traces: map, cursor: HashMap::new() }
    }

    /// Loads every `*.csv` in `dir`.
    pub fn from_dir(dir: &Path) -> Result<Self, ReplayError> {
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| ReplayError::Io(dir.into(), e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "csv"))
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(ReplayError::Empty(dir.into()));
        }
        let mut traces = Vec::with_capacity(paths.len());
        for p in paths {
            let f = File::open(&p).map_err(|e| ReplayError::Io(p.clone(), e))?;
            let t = Trace::read_csv(BufReader::new(f)).map_err(|source| ReplayError::Trace { path: p.clone(), source })?;
            traces.push(t);
        }
        Ok(Self::new(traces))
    }

    pub fn len(&self) -> usize {
        self.traces.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Instrument for ReplayInstrument {
    fn identify(&mut self) -> Result<String, InstrumentError> {
        Ok(REPLAY_IDENTITY.into())
    }

    // Settings are accepted and ignored: the recording already fixes them.
    fn set_coil(&mut self, _: Axis, _: f64) -> Result<(), InstrumentError> {
        Ok(())
    }

    fn set_rf_detuning(&mut self, _: f64) -> Result<(), InstrumentError> {
        Ok(())
    }

    fn set_rf_modulation(&mut self, _: f64, _: f64) -> Result<(), InstrumentError> {
        Ok(())
    }

    fn set_b_modulation(&mut self, _: Axis, _: f64, _: f64) -> Result<(), InstrumentError> {
        Ok(())
    }

    fn read(&mut self, _: Lia) -> Result<f64, InstrumentError> {
        Err(InstrumentError::NotAvailable("replay serves recorded scans only".into()))
    }

    fn scan(
        &mut self,
        target: ScanTarget,
        start: f64,
        stop: f64,
        points: usize,
        lia: Lia,
    ) -> Result<Trace, InstrumentError> {
        let key = (target, lia);
        let Some(list) = self.traces.get(&key) else {
            return Err(InstrumentError::NotAvailable(format!(
                "no recorded {} trace on lock-in {}",
                target.scan_axis(),
                lia.number()
            )));
        };
        let c = self.cursor.entry(key).or_insert(0);
        let t = list[*c % list.len()].clone();
        *c += 1;
        if t.len() != points {
            warn!("replaying {} points for a {points}-point request ({start} to {stop})", t.len());
        }
        Ok(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use magscan::trace::{ControlUnit, TraceChannel};

    fn trace(axis: ScanAxis, channel: TraceChannel, v: f64) -> Trace {
        Trace::new(channel, axis, ControlUnit::Volts, vec![(0.0, v), (1.0, v)]).unwrap()
    }

    #[test]
    fn cycles_per_key() {
        let mut r = ReplayInstrument::new(vec![
            trace(ScanAxis::BZ, TraceChannel::Cpt, 1.0),
            trace(ScanAxis::BZ, TraceChannel::Cpt, 2.0),
            trace(ScanAxis::BZ, TraceChannel::MmZ, 3.0),
        ]);
        let z = ScanTarget::Coil(Axis::Z);
        let vals: Vec<f64> = (0..3).map(|_| r.scan(z, 0.0, 1.0, 2, Lia::One).unwrap().samples[0].1).collect();
        assert_eq!(vals, [1.0, 2.0, 1.0]);
        assert_eq!(r.scan(z, 0.0, 1.0, 2, Lia::Two).unwrap().channel, TraceChannel::MmZ);
        assert!(matches!(r.scan(ScanTarget::RfDetuning, 0.0, 1.0, 2, Lia::One), Err(InstrumentError::NotAvailable(_))));
        assert!(matches!(r.read(Lia::One), Err(InstrumentError::NotAvailable(_))));
    }
}
