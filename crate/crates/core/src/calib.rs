//! Harmonic assignment, bias estimation, coil-factor regression and the
//! automated scan / compensate / rescan calibration loop.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::atomic::{allowed_for_field, allowed_harmonics, AtomSpecies, Axis, FieldVector, HarmonicId, ScanAxis};
use crate::detect::{detect_features, pair_features, DetectError, PairRelation, ResonanceFeature};
use crate::instrument::{Instrument, InstrumentError, Lia, ScanTarget};
use crate::signal::RfModulation;
use crate::trace::{ControlUnit, Trace};

/// Largest relative deviation from the 1/|n| grid accepted by assignment.
pub const GRID_TOLERANCE: f64 = 0.07;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CalibError {
    #[error("ambiguous harmonic assignment: {0}")]
    Ambiguous(String),
    #[error("bias not estimable: {0}")]
    NotEstimable(String),
    #[error("fit is rank deficient: all points share one control value")]
    RankDeficient,
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("calibration failed on axis {axis} after {iterations} iterations: {diagnostics}")]
    CalibrationFailed { axis: Axis, iterations: usize, diagnostics: String },
    #[error(transparent)]
    Instrument(#[from] InstrumentError),
    #[error(transparent)]
    Detect(#[from] DetectError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Resonance spacing in RF scans at several coil settings.
    RfScan,
    /// Mirrored resonance pairs in a coil scan.
    BScan,
    /// Zero crossing of the zero-field MM feature.
    ZeroField,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoilCalibration {
    pub axis: Axis,
    /// Control value at true zero field along the axis.
    pub bias_control: f64,
    /// μT per control unit.
    pub factor: f64,
    /// μT.
    pub residual_rms: f64,
    pub method: Method,
    pub points: usize,
    #[serde(default)]
    pub low_confidence: bool,
}

impl CoilCalibration {
    /// Ambient field along the axis implied by the fit, μT.
    pub fn ambient_field(&self) -> f64 {
        -self.factor * self.bias_control
    }
}

/// Features with harmonic numbers, plus the pairs they were taken from.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub center: f64,
    pub features: Vec<ResonanceFeature>,
    /// `(low, high)` indices into `features`; the low feature carries `+|n|`.
    pub pairs: Vec<(usize, usize)>,
}

impl Assignment {
    pub fn assigned(&self) -> impl Iterator<Item = &ResonanceFeature> {
        self.features.iter().filter(|f| f.n.is_some())
    }
}

/// Orders `|n|` of the parity class of a scan with zero orthogonal field.
fn parity_orders(scan: ScanAxis, species: &AtomSpecies) -> Vec<u32> {
    let mut v: Vec<u32> = allowed_harmonics(scan, 0.0, species)
        .into_iter()
        .filter(|n| n.0 > 0)
        .map(|n| n.0 as u32)
        .collect();
    v.sort_unstable();
    v.dedup();
    v
}

fn grid_matches(radius: f64, k: f64, orders: &[u32]) -> Vec<u32> {
    orders
        .iter()
        .copied()
        .filter(|&m| (radius * m as f64 / k - 1.0).abs() <= GRID_TOLERANCE)
        .collect()
}

/// Label mirrored CPT pairs with harmonic numbers.
///
/// With control values in μT the grid scale is fixed by `delta_rf`. In other
/// units only ratios between pair half-separations are available, so at
/// least two pairs are needed.
pub fn assign_harmonics(
    features: &[ResonanceFeature],
    delta_rf: f64,
    species: &AtomSpecies,
    scan: ScanAxis,
    unit: ControlUnit,
) -> Result<Assignment, CalibError> {
    let pairing = pair_features(features, PairRelation::Opposite)
        .ok_or_else(|| CalibError::Ambiguous(format!("{} feature(s) but no mirrored pair", features.len())))?;
    let f = features;
    let radii: Vec<f64> = pairing.pairs.iter().map(|&(a, b)| 0.5 * (f[b].center - f[a].center)).collect();
    let orders = parity_orders(scan, species);

    let chosen: Vec<Option<u32>> = if unit == ControlUnit::MicroTesla {
        let k = delta_rf.abs() / species.gamma();
        let mut out = Vec::new();
        for (r, &(a, b)) in radii.iter().zip(&pairing.pairs) {
            let m = grid_matches(*r, k, &orders);
            if m.len() > 1 {
                return Err(CalibError::Ambiguous(format!(
                    "pair at {:.4}/{:.4} matches |n| in {:?}",
                    f[a].center, f[b].center, m
                )));
            }
            out.push(m.first().copied());
        }
        out
    } else {
        if radii.len() < 2 {
            return Err(CalibError::Ambiguous(format!(
                "a single pair fits any |n| in {orders:?} when the control scale is unknown"
            )));
        }
        let mut best: Option<(usize, Vec<Option<u32>>)> = None;
        let mut tied: Vec<Vec<Option<u32>>> = Vec::new();
        for r0 in &radii {
            for &m0 in &orders {
                let k = r0 * m0 as f64;
                let mut labels = Vec::new();
                let mut ok = true;
                for r in &radii {
                    let m = grid_matches(*r, k, &orders);
                    if m.len() > 1 {
                        ok = false;
                        break;
                    }
                    labels.push(m.first().copied());
                }
                let mut seen: Vec<u32> = labels.iter().flatten().copied().collect();
                let count = seen.len();
                seen.sort_unstable();
                seen.dedup();
                if !ok || seen.len() != count || count < 2 {
                    continue;
                }
                match &best {
                    Some((c, l)) if *c > count || (*c == count && *l == labels) => {}
                    Some((c, _)) if *c == count => tied.push(labels),
                    _ => {
                        best = Some((count, labels));
                        tied.clear();
                    }
                }
            }
        }
        let (_, labels) = best.ok_or_else(|| {
            CalibError::Ambiguous(format!("half-separations {radii:?} fit no 1/|n| grid over {orders:?}"))
        })?;
        if let Some(other) = tied.into_iter().find(|t| *t != labels) {
            return Err(CalibError::Ambiguous(format!("grids {labels:?} and {other:?} fit equally well")));
        }
        labels
    };

    let mut out = features.to_vec();
    let mut pairs = Vec::new();
    for (label, &(a, b)) in chosen.iter().zip(&pairing.pairs) {
        if let Some(m) = label {
            out[a].n = Some(HarmonicId(*m as i32));
            out[b].n = Some(HarmonicId(-(*m as i32)));
            pairs.push((a, b));
        }
    }
    if pairs.is_empty() {
        return Err(CalibError::Ambiguous("no pair lies on the harmonic grid".into()));
    }
    Ok(Assignment { center: pairing.center, features: out, pairs })
}

/// Mean midpoint of mirrored pairs with the given slope relation.
pub fn estimate_bias(features: &[ResonanceFeature], relation: PairRelation) -> Result<f64, CalibError> {
    pair_features(features, relation)
        .map(|p| p.center)
        .ok_or_else(|| CalibError::NotEstimable("no mirrored resonance pair".into()))
}

/// Zero crossing of the zero-field feature: the strongest MM feature that is
/// not part of a mirrored pair.
pub fn estimate_zero_field_bias(mm_features: &[ResonanceFeature]) -> Result<f64, CalibError> {
    let unpaired = match pair_features(mm_features, PairRelation::Same) {
        Some(p) => p.unpaired(mm_features.len()),
        None => (0..mm_features.len()).collect(),
    };
    unpaired
        .into_iter()
        .max_by(|&a, &b| mm_features[a].amplitude.total_cmp(&mm_features[b].amplitude))
        .map(|k| mm_features[k].center)
        .ok_or_else(|| CalibError::NotEstimable("no unpaired zero-field feature".into()))
}

/// Ordinary least squares `y = slope * x + intercept`; returns
/// `(slope, intercept, residual_rms)`.
pub fn linear_fit(points: &[(f64, f64)]) -> Result<(f64, f64, f64), CalibError> {
    if points.len() < 2 {
        return Err(CalibError::InsufficientData(format!("{} point(s) for a line fit", points.len())));
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let scale = points.iter().fold(0.0f64, |m, p| m.max(p.0.abs())).max(f64::MIN_POSITIVE);
    if sxx <= 1e-24 * scale * scale * n {
        return Err(CalibError::RankDeficient);
    }
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss: f64 = points.iter().map(|p| (p.1 - slope * p.0 - intercept).powi(2)).sum();
    Ok((slope, intercept, (ss / n).sqrt()))
}

/// Regress the resonance fields `-|δ|/(n γ)` against the assigned feature
/// centers.
pub fn fit_factor(
    axis: Axis,
    features: &[ResonanceFeature],
    delta_rf: f64,
    species: &AtomSpecies,
) -> Result<CoilCalibration, CalibError> {
    let k = delta_rf.abs() / species.gamma();
    let points: Vec<(f64, f64)> =
        features.iter().filter_map(|f| f.n.map(|n| (f.center, -k / n.0 as f64))).collect();
    let positive = points.iter().filter(|p| p.1 < 0.0).count();
    let pairs = positive.min(points.len() - positive);
    if pairs < 2 {
        return Err(CalibError::InsufficientData(format!("{pairs} assigned pair(s); the factor fit needs 2")));
    }
    let (slope, intercept, residual_rms) = linear_fit(&points)?;
    Ok(CoilCalibration {
        axis,
        bias_control: -intercept / slope,
        factor: slope,
        residual_rms,
        method: Method::BScan,
        points: points.len(),
        low_confidence: false,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxisScan {
    pub axis: Axis,
    pub start: f64,
    pub stop: f64,
    pub points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConventionalAxis {
    pub axis: Axis,
    /// Absolute coil settings at which RF scans are taken.
    pub settings: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConventionalPlan {
    pub rf_start: f64,
    pub rf_stop: f64,
    pub points: usize,
    pub axes: Vec<ConventionalAxis>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationPlan {
    /// Detuning held during coil scans, kHz.
    pub delta_rf: f64,
    pub rf_modulation: RfModulation,
    /// Field modulation; its axis follows the scanned coil.
    pub b_modulation_amplitude: f64,
    pub b_modulation_frequency: f64,
    pub axes: Vec<AxisScan>,
    /// Acceptable residual bias after compensation, μT.
    #[serde(default = "default_tolerance")]
    pub bias_tolerance: f64,
    #[serde(default = "default_iterations")]
    pub max_iterations: usize,
    #[serde(default)]
    pub conventional: Option<ConventionalPlan>,
}

fn default_tolerance() -> f64 {
    0.1
}

fn default_iterations() -> usize {
    3
}

impl CalibrationPlan {
    /// Buffer-gas cell at δ = -58 kHz, ranges sized for the demo instrument.
    pub fn demo() -> Self {
        let scan = |axis, half: f64| AxisScan { axis, start: -half, stop: half, points: 200 };
        Self {
            delta_rf: -58.0,
            rf_modulation: RfModulation { amplitude: 0.65, frequency: 440.0 },
            b_modulation_amplitude: 0.07,
            b_modulation_frequency: 39.0,
            axes: vec![scan(Axis::X, 12.0), scan(Axis::Y, 12.0), scan(Axis::Z, 3.0)],
            bias_tolerance: default_tolerance(),
            max_iterations: default_iterations(),
            conventional: Some(ConventionalPlan {
                rf_start: -150.0,
                rf_stop: 150.0,
                points: 1201,
                axes: vec![
                    ConventionalAxis { axis: Axis::X, settings: vec![4.0, 7.0, 10.0] },
                    ConventionalAxis { axis: Axis::Y, settings: vec![7.0, 10.0, 13.0] },
                    ConventionalAxis { axis: Axis::Z, settings: vec![0.8, 1.4, 2.0] },
                ],
            }),
        }
    }

    pub fn validate(&self) -> Result<(), CalibError> {
        let bad = |m: String| Err(CalibError::InsufficientData(m));
        if self.axes.is_empty() {
            return bad("plan names no axes".into());
        }
        for (i, a) in self.axes.iter().enumerate() {
            if self.axes[..i].iter().any(|b| b.axis == a.axis) {
                return bad(format!("axis {} listed twice", a.axis));
            }
            if a.points < crate::detect::MIN_POINTS {
                return bad(format!("axis {} scan needs at least {} points", a.axis, crate::detect::MIN_POINTS));
            }
        }
        if !(self.bias_tolerance > 0.0) || self.max_iterations == 0 {
            return bad("bias_tolerance and max_iterations must be positive".into());
        }
        Ok(())
    }
}

/// Zero-field-method bias on one axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroFieldEstimate {
    pub axis: Axis,
    pub bias_control: f64,
    /// Using the pair-method factor, μT.
    pub ambient_field: f64,
}

/// Residual bias on each axis after one verification pass, μT.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub residual: Vec<(Axis, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutoCalibration {
    pub pair_method: Vec<CoilCalibration>,
    pub zero_field: Vec<ZeroFieldEstimate>,
    pub iterations: Vec<IterationRecord>,
    /// Coil settings that cancel the background, per axis.
    pub compensation: Vec<(Axis, f64)>,
}

impl AutoCalibration {
    pub fn compensation_for(&self, axis: Axis) -> Option<f64> {
        self.compensation.iter().find(|c| c.0 == axis).map(|c| c.1)
    }
}

fn coil_scan(inst: &mut dyn Instrument, plan: &CalibrationPlan, s: &AxisScan, lia: Lia) -> Result<Trace, CalibError> {
    inst.set_b_modulation(s.axis, plan.b_modulation_amplitude, plan.b_modulation_frequency)?;
    Ok(inst.scan(ScanTarget::Coil(s.axis), s.start, s.stop, s.points, lia)?)
}

fn pair_center(trace: &Trace, axis: Axis) -> Result<(Vec<ResonanceFeature>, f64), CalibError> {
    let feats = detect_features(trace)?;
    let c = estimate_bias(&feats, PairRelation::Opposite).map_err(|_| CalibError::CalibrationFailed {
        axis,
        iterations: 0,
        diagnostics: format!("no mirrored CPT pair among {} feature(s)", feats.len()),
    })?;
    Ok((feats, c))
}

/// Scan each axis, cancel its background, verify the residual and fit the
/// coil factors on the compensated rescans; then locate the zero-field MM
/// feature on each axis.
pub fn auto_calibrate(inst: &mut dyn Instrument, plan: &CalibrationPlan) -> Result<AutoCalibration, CalibError> {
    plan.validate()?;
    let species = AtomSpecies::rb85();
    inst.set_rf_detuning(plan.delta_rf)?;
    inst.set_rf_modulation(plan.rf_modulation.amplitude, plan.rf_modulation.frequency)?;
    for s in &plan.axes {
        inst.set_coil(s.axis, 0.0)?;
    }

    // first pass: sequential compensation
    let mut coils: Vec<f64> = Vec::new();
    for s in &plan.axes {
        let trace = coil_scan(inst, plan, s, Lia::One)?;
        let (_, c) = pair_center(&trace, s.axis)?;
        inst.set_coil(s.axis, c)?;
        coils.push(c);
    }

    let mut iterations = Vec::new();
    let mut fits: Vec<CoilCalibration>;
    let mut k = 0;
    loop {
        k += 1;
        fits = Vec::new();
        let mut residual = Vec::new();
        let mut centers = Vec::new();
        for (s, &coil) in plan.axes.iter().zip(&coils) {
            let trace = coil_scan(inst, plan, s, Lia::One)?;
            let feats = detect_features(&trace)?;
            let asg = assign_harmonics(&feats, plan.delta_rf, &species, s.axis.scan_axis(), trace.control_unit)
                .map_err(|e| CalibError::CalibrationFailed {
                    axis: s.axis,
                    iterations: k,
                    diagnostics: format!("assignment on compensated rescan: {e}"),
                })?;
            let fit = fit_factor(s.axis, &asg.features, plan.delta_rf, &species)?;
            residual.push((s.axis, (asg.center - coil) * fit.factor));
            centers.push(asg.center);
            fits.push(fit);
        }
        let worst = residual.iter().fold(0.0f64, |m, r| m.max(r.1.abs()));
        iterations.push(IterationRecord { iteration: k, residual: residual.clone() });
        if worst < plan.bias_tolerance {
            break;
        }
        if k >= plan.max_iterations {
            let (axis, _) = residual.iter().max_by(|a, b| a.1.abs().total_cmp(&b.1.abs())).copied().unwrap();
            let diagnostics = iterations
                .iter()
                .map(|it| {
                    let r: Vec<String> = it.residual.iter().map(|(a, v)| format!("{a}={v:+.3} uT")).collect();
                    format!("pass {}: {}", it.iteration, r.join(" "))
                })
                .collect::<Vec<_>>()
                .join("; ");
            return Err(CalibError::CalibrationFailed { axis, iterations: k, diagnostics });
        }
        for (s, c) in plan.axes.iter().zip(&centers) {
            inst.set_coil(s.axis, *c)?;
        }
        coils = centers;
    }

    let mut zero_field = Vec::new();
    for (s, fit) in plan.axes.iter().zip(&fits) {
        let trace = coil_scan(inst, plan, s, Lia::Two)?;
        let feats = detect_features(&trace)?;
        let b = estimate_zero_field_bias(&feats)?;
        zero_field.push(ZeroFieldEstimate { axis: s.axis, bias_control: b, ambient_field: -fit.factor * b });
    }
    let compensation = plan.axes.iter().zip(&fits).map(|(s, f)| (s.axis, f.bias_control)).collect();
    Ok(AutoCalibration { pair_method: fits, zero_field, iterations, compensation })
}

/// Larmor frequency from an RF-scan feature list: the largest Ω for which the
/// most features sit on `k Ω` with `k` in the allowed set. `None` when no
/// feature sits off zero.
pub fn larmor_from_rf_features(features: &[ResonanceFeature], allowed: &[HarmonicId]) -> Option<(f64, usize)> {
    let ks: Vec<i32> = allowed.iter().map(|n| n.0).collect();
    let on_grid = |p: f64, w: f64, omega: f64| -> Option<i32> {
        ks.iter().copied().filter(|&k| (p - k as f64 * omega).abs() <= 0.5 * w).min_by(|&a, &b| {
            (p - a as f64 * omega).abs().total_cmp(&(p - b as f64 * omega).abs())
        })
    };
    let mut best: Option<(usize, f64)> = None;
    for f in features {
        for &k in ks.iter().filter(|&&k| k != 0) {
            let omega = f.center / k as f64;
            if omega <= 0.0 || f.center.abs() < 0.5 * f.width {
                continue;
            }
            let count = features.iter().filter(|g| on_grid(g.center, g.width, omega).is_some_and(|k| k != 0)).count();
            let better = match best {
                None => true,
                Some((c, o)) => count > c || (count == c && omega > o),
            };
            if better {
                best = Some((count, omega));
            }
        }
    }
    let (_, omega) = best?;
    let (mut skp, mut skk, mut used) = (0.0, 0.0, 0);
    for g in features {
        if let Some(k) = on_grid(g.center, g.width, omega).filter(|&k| k != 0) {
            skp += k as f64 * g.center;
            skk += (k * k) as f64;
            used += 1;
        }
    }
    (used > 0).then(|| (skp / skk, used))
}

/// Baseline method: RF scans at several settings of one coil, the other
/// coils held at `holds`; the fitted Larmor frequency is regressed against
/// the coil setting.
pub fn conventional_calibrate(
    inst: &mut dyn Instrument,
    plan: &CalibrationPlan,
    holds: &[(Axis, f64)],
) -> Result<Vec<CoilCalibration>, CalibError> {
    let conv = plan
        .conventional
        .as_ref()
        .ok_or_else(|| CalibError::InsufficientData("plan has no conventional section".into()))?;
    let species = AtomSpecies::rb85();
    inst.set_rf_modulation(plan.rf_modulation.amplitude, plan.rf_modulation.frequency)?;
    let mut out = Vec::new();
    for ax in &conv.axes {
        for &(a, v) in holds {
            inst.set_coil(a, v)?;
        }
        let allowed = allowed_for_field(&FieldVector::along(ax.axis, 1.0), &species);
        let mut points = Vec::new();
        for &v in &ax.settings {
            inst.set_coil(ax.axis, v)?;
            let trace = inst.scan(ScanTarget::RfDetuning, conv.rf_start, conv.rf_stop, conv.points, Lia::One)?;
            let feats = detect_features(&trace)?;
            if let Some((omega, _)) = larmor_from_rf_features(&feats, &allowed) {
                points.push((v, omega / species.gamma()));
            }
        }
        if points.len() < 2 {
            return Err(CalibError::InsufficientData(format!(
                "axis {}: {} usable RF scan(s), need 2",
                ax.axis,
                points.len()
            )));
        }
        let (slope, intercept, residual_rms) = linear_fit(&points)?;
        let hold = holds.iter().find(|h| h.0 == ax.axis).map(|h| h.1);
        if let Some(h) = hold {
            inst.set_coil(ax.axis, h)?;
        }
        out.push(CoilCalibration {
            axis: ax.axis,
            bias_control: -intercept / slope,
            factor: slope.abs(),
            residual_rms,
            method: Method::RfScan,
            points: points.len(),
            low_confidence: points.len() < 3,
        });
    }
    Ok(out)
}
