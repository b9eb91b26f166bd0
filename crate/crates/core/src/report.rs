//! Calibration report tables: text, CSV and JSON.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::atomic::Axis;
use crate::calib::{AutoCalibration, CoilCalibration};
use crate::trace::{check_major, fmt_num, TraceError};

pub const REPORT_FORMAT: &str = "magscan-report";
pub const REPORT_VERSION: &str = "1.0";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub format: String,
    pub version: String,
    pub auto: AutoCalibration,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conventional: Option<Vec<CoilCalibration>>,
}

/// One row group of the table: a method and its per-axis values.
struct Row<'a> {
    method: &'a str,
    quantity: &'a str,
    values: [Option<f64>; 3],
}

impl CalibrationReport {
    pub fn new(auto: AutoCalibration, conventional: Option<Vec<CoilCalibration>>) -> Self {
        Self { format: REPORT_FORMAT.into(), version: REPORT_VERSION.into(), auto, conventional }
    }

    pub fn from_json(text: &str) -> Result<Self, TraceError> {
        let r: CalibrationReport = serde_json::from_str(text)
            .map_err(|e| TraceError::Parse { line: e.line(), message: e.to_string() })?;
        check_major(REPORT_FORMAT, &r.version, 1)?;
        Ok(r)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    fn rows(&self) -> Vec<Row<'_>> {
        let per_axis = |cals: &[CoilCalibration], f: fn(&CoilCalibration) -> f64| {
            let mut v = [None; 3];
            for c in cals {
                v[c.axis.index()] = Some(f(c));
            }
            v
        };
        let mut rows = vec![
            Row {
                method: "magnetic scanning",
                quantity: "factor (uT/V)",
                values: per_axis(&self.auto.pair_method, |c| c.factor),
            },
            Row {
                method: "magnetic scanning",
                quantity: "ambient field (uT)",
                values: per_axis(&self.auto.pair_method, |c| c.ambient_field()),
            },
            Row {
                method: "magnetic scanning",
                quantity: "fit residual (uT)",
                values: per_axis(&self.auto.pair_method, |c| c.residual_rms),
            },
        ];
        let mut zf = [None; 3];
        for z in &self.auto.zero_field {
            zf[z.axis.index()] = Some(z.ambient_field);
        }
        rows.push(Row { method: "zero field resonance", quantity: "ambient field (uT)", values: zf });
        if let Some(conv) = &self.conventional {
            rows.push(Row { method: "RF scanning", quantity: "factor (uT/V)", values: per_axis(conv, |c| c.factor) });
            rows.push(Row {
                method: "RF scanning",
                quantity: "ambient field (uT)",
                values: per_axis(conv, |c| c.ambient_field()),
            });
        }
        rows
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<22} {:<20} {:>10} {:>10} {:>10}", "method", "quantity", "Bx", "By", "Bz");
        let mut last = "";
        for r in self.rows() {
            let m = if r.method == last { "" } else { r.method };
            last = r.method;
            let cell = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
            let _ = writeln!(
                out,
                "{:<22} {:<20} {:>10} {:>10} {:>10}",
                m,
                r.quantity,
                cell(r.values[0]),
                cell(r.values[1]),
                cell(r.values[2])
            );
        }
        if let Some(conv) = &self.conventional {
            let weak: Vec<&str> = conv.iter().filter(|c| c.low_confidence).map(|c| c.axis.as_str()).collect();
            if !weak.is_empty() {
                let _ = writeln!(out, "note: RF scanning fit from 2 points only on {}", weak.join(", "));
            }
        }
        let passes = self.auto.iterations.len();
        let _ = writeln!(out, "compensation verified after {passes} pass(es)");
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("# format={REPORT_FORMAT}\n# version={REPORT_VERSION}\nmethod,quantity,x,y,z\n");
        for r in self.rows() {
            let cell = |v: Option<f64>| v.map_or(String::new(), fmt_num);
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.method,
                r.quantity,
                cell(r.values[0]),
                cell(r.values[1]),
                cell(r.values[2])
            );
        }
        out
    }

    pub fn pair_factor(&self, axis: Axis) -> Option<f64> {
        self.auto.pair_method.iter().find(|c| c.axis == axis).map(|c| c.factor)
    }

    /// Largest relative difference between any two numbers of the reports;
    /// `None` if their shape differs.
    pub fn max_relative_difference(&self, other: &CalibrationReport) -> Option<f64> {
        let a = numbers(&serde_json::to_value(self).ok()?);
        let b = numbers(&serde_json::to_value(other).ok()?);
        if a.len() != b.len() {
            return None;
        }
        Some(a.iter().zip(&b).fold(0.0f64, |m, (x, y)| {
            let scale = x.abs().max(y.abs());
            if scale == 0.0 {
                m
            } else {
                m.max((x - y).abs() / scale)
            }
        }))
    }
}

fn numbers(v: &serde_json::Value) -> Vec<f64> {
    let mut out = Vec::new();
    fn walk(v: &serde_json::Value, out: &mut Vec<f64>) {
        match v {
            serde_json::Value::Number(n) => out.push(n.as_f64().unwrap_or(f64::NAN)),
            serde_json::Value::Array(a) => a.iter().for_each(|x| walk(x, out)),
            serde_json::Value::Object(o) => o.values().for_each(|x| walk(x, out)),
            serde_json::Value::String(s) => out.push(s.len() as f64),
            _ => {}
        }
    }
    walk(v, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calib::{IterationRecord, Method, ZeroFieldEstimate};

    fn sample() -> CalibrationReport {
        let cal = |axis, factor: f64, ambient: f64, method| CoilCalibration {
            axis,
            bias_control: -ambient / factor,
            factor,
            residual_rms: 0.01,
            method,
            points: 4,
            low_confidence: false,
        };
        let auto = AutoCalibration {
            pair_method: vec![
                cal(Axis::X, 0.6, -0.3, Method::BScan),
                cal(Axis::Y, 0.6, -2.2, Method::BScan),
                cal(Axis::Z, 3.1, 0.0, Method::BScan),
            ],
            zero_field: vec![ZeroFieldEstimate { axis: Axis::Y, bias_control: 3.5, ambient_field: -2.1 }],
            iterations: vec![IterationRecord { iteration: 1, residual: vec![(Axis::X, 0.01)] }],
            compensation: vec![(Axis::X, 0.5)],
        };
        let mut conv = cal(Axis::Z, 3.0, 0.1, Method::RfScan);
        conv.low_confidence = true;
        CalibrationReport::new(auto, Some(vec![conv]))
    }

    #[test]
    fn text_table_layout() {
        let t = sample().to_text();
        assert!(t.lines().next().unwrap().contains("Bx"));
        assert!(t.contains("zero field resonance"));
        assert!(t.contains("RF scanning"));
        assert!(t.contains("note: RF scanning fit from 2 points only on Z"));
        assert!(t.contains("-2.2000"));
    }

    #[test]
    fn csv_has_version_and_empty_cells() {
        let c = sample().to_csv();
        assert!(c.starts_with("# format=magscan-report\n# version=1.0\n"));
        assert!(c.contains("zero field resonance,ambient field (uT),,"));
    }

    #[test]
    fn json_roundtrip_and_version_check() {
        let r = sample();
        let back = CalibrationReport::from_json(&r.to_json()).unwrap();
        assert_eq!(back, r);
        assert_eq!(r.max_relative_difference(&back), Some(0.0));
        let future = r.to_json().replace("\"version\": \"1.0\"", "\"version\": \"2.0\"");
        assert!(matches!(CalibrationReport::from_json(&future), Err(TraceError::UnsupportedVersion { .. })));
    }
}
