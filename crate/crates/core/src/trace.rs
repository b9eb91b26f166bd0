//! Demodulated traces and their CSV form.
//!
//! ```text
//! # format=magscan-trace
//! # version=1.0
//! # channel=CPT
//! # scan_axis=BZ
//! # control_unit=uT
//! # lockin_filter=single-pole
//! # config={...}
//! control,value
//! -8.0000000000000000e0,1.2345678901234567e-3
//! ```
//!
//! Numbers are written with 17 significant digits and read back bit-exactly.
//! The `config` line is optional (recorded data carries none); other unknown
//! `# key=value` lines are preserved in [`Trace::extra`].

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::atomic::{Axis, ScanAxis};
use crate::signal::ExperimentConfig;

pub const TRACE_FORMAT: &str = "magscan-trace";
pub const TRACE_VERSION: &str = "1.0";

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("unsupported {format} version {found} (this build reads major version {supported})")]
    UnsupportedVersion { format: &'static str, found: String, supported: u32 },
    #[error("control values must be strictly monotone (violated at sample {0})")]
    NotMonotone(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TraceChannel {
    #[serde(rename = "CPT")]
    Cpt,
    #[serde(rename = "MM_x")]
    MmX,
    #[serde(rename = "MM_y")]
    MmY,
    #[serde(rename = "MM_z")]
    MmZ,
}

impl TraceChannel {
    pub fn mm(axis: Axis) -> Self {
        match axis {
            Axis::X => TraceChannel::MmX,
            Axis::Y => TraceChannel::MmY,
            Axis::Z => TraceChannel::MmZ,
        }
    }

    pub fn is_mm(self) -> bool {
        self != TraceChannel::Cpt
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TraceChannel::Cpt => "CPT",
            TraceChannel::MmX => "MM_x",
            TraceChannel::MmY => "MM_y",
            TraceChannel::MmZ => "MM_z",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "CPT" => Some(TraceChannel::Cpt),
            "MM_x" => Some(TraceChannel::MmX),
            "MM_y" => Some(TraceChannel::MmY),
            "MM_z" => Some(TraceChannel::MmZ),
            _ => None,
        }
    }
}

impl fmt::Display for TraceChannel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ControlUnit {
    #[serde(rename = "uT")]
    MicroTesla,
    #[serde(rename = "V")]
    Volts,
    #[serde(rename = "kHz")]
    KiloHertz,
}

impl ControlUnit {
    pub fn as_str(self) -> &'static str {
        match self {
            ControlUnit::MicroTesla => "uT",
            ControlUnit::Volts => "V",
            ControlUnit::KiloHertz => "kHz",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "uT" => Some(ControlUnit::MicroTesla),
            "V" => Some(ControlUnit::Volts),
            "kHz" => Some(ControlUnit::KiloHertz),
            _ => None,
        }
    }
}

/// Ordered `(control, demodulated value)` samples of one channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub channel: TraceChannel,
    pub scan_axis: ScanAxis,
    pub control_unit: ControlUnit,
    pub samples: Vec<(f64, f64)>,
    pub metadata: Option<ExperimentConfig>,
    pub extra: BTreeMap<String, String>,
}

impl Trace {
    pub fn new(
        channel: TraceChannel,
        scan_axis: ScanAxis,
        control_unit: ControlUnit,
        samples: Vec<(f64, f64)>,
    ) -> Result<Self, TraceError> {
        check_monotone(&samples)?;
        Ok(Self { channel, scan_axis, control_unit, samples, metadata: None, extra: BTreeMap::new() })
    }

    pub fn controls(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.0).collect()
    }

    pub fn values(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.1).collect()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Same trace with samples sorted by increasing control value.
    pub fn ascending(&self) -> Trace {
        let mut t = self.clone();
        if t.samples.len() > 1 && t.samples[0].0 > t.samples[1].0 {
            t.samples.reverse();
        }
        t
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<(), TraceError> {
        writeln!(w, "# format={TRACE_FORMAT}")?;
        writeln!(w, "# version={TRACE_VERSION}")?;
        writeln!(w, "# channel={}", self.channel)?;
        writeln!(w, "# scan_axis={}", self.scan_axis)?;
        writeln!(w, "# control_unit={}", self.control_unit.as_str())?;
        writeln!(w, "# lockin_filter=single-pole")?;
        for (k, v) in &self.extra {
            writeln!(w, "# {k}={v}")?;
        }
        if let Some(cfg) = &self.metadata {
            let json = serde_json::to_string(cfg).map_err(std::io::Error::other)?;
            writeln!(w, "# config={json}")?;
        }
        writeln!(w, "control,value")?;
        for &(c, v) in &self.samples {
            writeln!(w, "{},{}", fmt_num(c), fmt_num(v))?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("utf-8")
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Trace, TraceError> {
        let mut header: BTreeMap<String, String> = BTreeMap::new();
        let mut samples = Vec::new();
        let mut seen_columns = false;
        for (idx, line) in r.lines().enumerate() {
            let lineno = idx + 1;
            let line = line?;
            let line = line.trim_end_matches('\r');
            let parse_err = |message: String| TraceError::Parse { line: lineno, message };
            if let Some(rest) = line.strip_prefix('#') {
                if seen_columns {
                    return Err(parse_err("comment header after column row".into()));
                }
                let rest = rest.trim_start();
                let (k, v) = rest
                    .split_once('=')
                    .ok_or_else(|| parse_err(format!("expected `# key=value`, got `{line}`")))?;
                header.insert(k.trim().to_string(), v.to_string());
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            if !seen_columns {
                if line.trim() != "control,value" {
                    return Err(parse_err(format!("expected column row `control,value`, got `{line}`")));
                }
                seen_columns = true;
                if let Some(v) = header.get("version") {
                    check_major(TRACE_FORMAT, v, 1)?;
                }
                continue;
            }
            let (a, b) = line
                .split_once(',')
                .ok_or_else(|| parse_err(format!("expected `control,value`, got `{line}`")))?;
            let c: f64 = a.trim().parse().map_err(|_| parse_err(format!("bad control value `{a}`")))?;
            let v: f64 = b.trim().parse().map_err(|_| parse_err(format!("bad value `{b}`")))?;
            samples.push((c, v));
        }
        if !seen_columns {
            return Err(TraceError::Parse { line: 0, message: "missing `control,value` column row".into() });
        }
        let missing = |k: &str| TraceError::Parse { line: 0, message: format!("missing `# {k}=` header") };
        let bad = |k: &str, v: &str| TraceError::Parse { line: 0, message: format!("bad `{k}` value `{v}`") };
        let channel_s = header.remove("channel").ok_or_else(|| missing("channel"))?;
        let channel = TraceChannel::parse(&channel_s).ok_or_else(|| bad("channel", &channel_s))?;
        let axis_s = header.remove("scan_axis").ok_or_else(|| missing("scan_axis"))?;
        let scan_axis = ScanAxis::parse(&axis_s).ok_or_else(|| bad("scan_axis", &axis_s))?;
        let unit_s = header.remove("control_unit").ok_or_else(|| missing("control_unit"))?;
        let control_unit = ControlUnit::parse(&unit_s).ok_or_else(|| bad("control_unit", &unit_s))?;
        let metadata = match header.remove("config") {
            Some(json) => Some(serde_json::from_str(&json).map_err(|e| TraceError::Parse {
                line: 0,
                message: format!("bad config snapshot: {e}"),
            })?),
            None => None,
        };
        for k in ["format", "version", "lockin_filter"] {
            header.remove(k);
        }
        let mut trace = Trace::new(channel, scan_axis, control_unit, samples)?;
        trace.metadata = metadata;
        trace.extra = header;
        Ok(trace)
    }
}

fn check_monotone(samples: &[(f64, f64)]) -> Result<(), TraceError> {
    if samples.len() < 2 {
        return Ok(());
    }
    let increasing = samples[1].0 > samples[0].0;
    for i in 1..samples.len() {
        let ok = if increasing { samples[i].0 > samples[i - 1].0 } else { samples[i].0 < samples[i - 1].0 };
        if !ok {
            return Err(TraceError::NotMonotone(i));
        }
    }
    Ok(())
}

/// Reject a `major.minor` version string whose major differs from `supported`.
pub fn check_major(format: &'static str, version: &str, supported: u32) -> Result<(), TraceError> {
    let major = version.split('.').next().and_then(|m| m.trim().parse::<u32>().ok());
    if major != Some(supported) {
        return Err(TraceError::UnsupportedVersion { format, found: version.to_string(), supported });
    }
    Ok(())
}

/// Decimal with 17 significant digits; parses back to the same bits.
pub fn fmt_num(v: f64) -> String {
    format!("{v:.16e}")
}

/// Raw `(t, value)` series, as ingested by the `demod` subcommand.
/// `#` lines are comments; an optional `t,value` header row is accepted.
pub fn read_timeseries_csv<R: BufRead>(r: R) -> Result<Vec<(f64, f64)>, TraceError> {
    let mut out = Vec::new();
    for (idx, line) in r.lines().enumerate() {
        let lineno = idx + 1;
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (a, b) = line.split_once(',').ok_or_else(|| TraceError::Parse {
            line: lineno,
            message: format!("expected `t,value`, got `{line}`"),
        })?;
        match (a.trim().parse::<f64>(), b.trim().parse::<f64>()) {
            (Ok(t), Ok(v)) => out.push((t, v)),
            _ if out.is_empty() && a.trim() == "t" => continue,
            _ => return Err(TraceError::Parse { line: lineno, message: format!("non-numeric row `{line}`") }),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample_trace() -> Trace {
        let samples = (0..5).map(|i| (i as f64 * 0.1 - 0.2, (i as f64).sin() * 1e-3)).collect();
        Trace::new(TraceChannel::MmZ, ScanAxis::BZ, ControlUnit::MicroTesla, samples).unwrap()
    }

    #[test]
    fn roundtrip_with_config_snapshot() {
        let mut t = sample_trace();
        t.metadata = Some(ExperimentConfig::bf_fig3(Axis::Z));
        t.extra.insert("operator".into(), "bench-2".into());
        let text = t.to_csv_string();
        assert!(text.starts_with("# format=magscan-trace\n# version=1.0\n"));
        let back = Trace::read_csv(text.as_bytes()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn rejects_unknown_major_version() {
        let text = sample_trace().to_csv_string().replace("version=1.0", "version=2.0");
        assert!(matches!(Trace::read_csv(text.as_bytes()), Err(TraceError::UnsupportedVersion { .. })));
        let minor = sample_trace().to_csv_string().replace("version=1.0", "version=1.3");
        assert!(Trace::read_csv(minor.as_bytes()).is_ok());
    }

    #[test]
    fn errors_name_the_line() {
        let mut text = sample_trace().to_csv_string();
        text.push_str("1.0,abc\n");
        match Trace::read_csv(text.as_bytes()) {
            Err(TraceError::Parse { line, .. }) => assert_eq!(line, 13),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn non_monotone_rejected() {
        let r = Trace::new(
            TraceChannel::Cpt,
            ScanAxis::BX,
            ControlUnit::Volts,
            vec![(0.0, 1.0), (1.0, 1.0), (1.0, 2.0)],
        );
        assert!(matches!(r, Err(TraceError::NotMonotone(2))));
        assert!(Trace::new(TraceChannel::Cpt, ScanAxis::BX, ControlUnit::Volts, vec![(2.0, 0.0), (1.0, 0.0)]).is_ok());
    }

    #[test]
    fn timeseries_reader() {
        let text = "# pure tone\nt,value\n0,1.5\n0.0001,1.25\n";
        assert_eq!(read_timeseries_csv(text.as_bytes()).unwrap(), vec![(0.0, 1.5), (0.0001, 1.25)]);
        assert!(read_timeseries_csv("0,1\nx,y\n".as_bytes()).is_err());
    }

    proptest! {
        #[test]
        fn numbers_roundtrip_bit_exact(v in any::<f64>().prop_filter("finite", |v| v.is_finite())) {
            let back: f64 = fmt_num(v).parse().unwrap();
            prop_assert_eq!(back.to_bits(), v.to_bits());
        }

        #[test]
        fn csv_roundtrip(values in prop::collection::vec(-1e3f64..1e3, 2..40), start in -50.0f64..50.0) {
            let samples: Vec<(f64, f64)> = values.iter().enumerate().map(|(i, &v)| (start + i as f64 * 0.37, v)).collect();
            let t = Trace::new(TraceChannel::Cpt, ScanAxis::RF, ControlUnit::KiloHertz, samples).unwrap();
            let back = Trace::read_csv(t.to_csv_string().as_bytes()).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
