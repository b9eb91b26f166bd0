//! Atomic constants and closed-form resonance positions.
//!
//! A two-photon resonance between ground Zeeman sublevels of the two
//! hyperfine levels occurs when the RF detuning equals an integer multiple
//! of the Larmor frequency, `delta_rf = n * gamma * |B|`. Scanning the RF at
//! fixed field gives equally spaced lines; scanning one field component at
//! fixed detuning gives pairs symmetric about zero field along that axis.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Bohr magneton over Planck's constant, kHz/μT.
pub const BOHR_MAGNETON_KHZ_PER_UT: f64 = 13.996245;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AtomicError {
    #[error("field magnitude must be non-negative, got {0} uT")]
    NegativeField(f64),
    #[error("RF frequency must be positive, got {0} kHz")]
    NonPositiveFrequency(f64),
    #[error("zero RF detuning: every magnetically sensitive harmonic collapses onto zero field")]
    DegenerateDetuning,
    #[error("{0} is not a magnetic-field scan axis")]
    NotAFieldAxis(ScanAxis),
    #[error("invalid species parameter: {0}")]
    InvalidSpecies(&'static str),
}

/// Ground-state constants of an alkali species.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtomSpecies {
    pub name: String,
    /// Magnitude of the ground-state g-factor.
    pub g_f: f64,
    /// Ground-state hyperfine splitting, kHz.
    pub hfs_splitting: f64,
    /// Largest harmonic order |n|.
    pub n_max: i32,
}

impl AtomSpecies {
    /// ⁸⁵Rb: g_F = 1/3, Δ_hfs = 3 035 732 kHz, harmonics -5..=5.
    pub fn rb85() -> Self {
        Self {
            name: "Rb85".to_string(),
            g_f: 1.0 / 3.0,
            hfs_splitting: 3_035_732.0,
            n_max: 5,
        }
    }

    /// Larmor slope, kHz/μT.
    pub fn gamma(&self) -> f64 {
        self.g_f * BOHR_MAGNETON_KHZ_PER_UT
    }

    pub fn validate(&self) -> Result<(), AtomicError> {
        if !(self.g_f > 0.0) {
            return Err(AtomicError::InvalidSpecies("g_f must be positive"));
        }
        if !(self.hfs_splitting > 0.0) {
            return Err(AtomicError::InvalidSpecies("hfs_splitting must be positive"));
        }
        if self.n_max < 1 {
            return Err(AtomicError::InvalidSpecies("n_max must be at least 1"));
        }
        Ok(())
    }
}

/// Cartesian coil axis. Light propagates along Z.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];

    pub fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }

    pub fn scan_axis(self) -> ScanAxis {
        match self {
            Axis::X => ScanAxis::BX,
            Axis::Y => ScanAxis::BY,
            Axis::Z => ScanAxis::BZ,
        }
    }

    pub fn parse(s: &str) -> Option<Axis> {
        match s {
            "X" | "x" => Some(Axis::X),
            "Y" | "y" => Some(Axis::Y),
            "Z" | "z" => Some(Axis::Z),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Axis::X => "X",
            Axis::Y => "Y",
            Axis::Z => "Z",
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// What a scan sweeps: the RF detuning (conventional mode) or one field
/// component at fixed detuning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ScanAxis {
    RF,
    BX,
    BY,
    BZ,
}

impl ScanAxis {
    pub fn field_axis(self) -> Option<Axis> {
        match self {
            ScanAxis::RF => None,
            ScanAxis::BX => Some(Axis::X),
            ScanAxis::BY => Some(Axis::Y),
            ScanAxis::BZ => Some(Axis::Z),
        }
    }

    pub fn is_field(self) -> bool {
        self != ScanAxis::RF
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ScanAxis::RF => "RF",
            ScanAxis::BX => "BX",
            ScanAxis::BY => "BY",
            ScanAxis::BZ => "BZ",
        }
    }

    pub fn parse(s: &str) -> Option<ScanAxis> {
        match s.to_ascii_uppercase().as_str() {
            "RF" => Some(ScanAxis::RF),
            "BX" | "X" => Some(ScanAxis::BX),
            "BY" | "Y" => Some(ScanAxis::BY),
            "BZ" | "Z" => Some(ScanAxis::BZ),
            _ => None,
        }
    }
}

impl fmt::Display for ScanAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Three-axis magnetic field, μT.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FieldVector {
    pub bx: f64,
    pub by: f64,
    pub bz: f64,
}

impl FieldVector {
    pub const ZERO: FieldVector = FieldVector { bx: 0.0, by: 0.0, bz: 0.0 };

    pub fn new(bx: f64, by: f64, bz: f64) -> Self {
        Self { bx, by, bz }
    }

    pub fn along(axis: Axis, value: f64) -> Self {
        let mut v = Self::ZERO;
        v.set(axis, value);
        v
    }

    pub fn magnitude(&self) -> f64 {
        (self.bx * self.bx + self.by * self.by + self.bz * self.bz).sqrt()
    }

    pub fn component(&self, axis: Axis) -> f64 {
        match axis {
            Axis::X => self.bx,
            Axis::Y => self.by,
            Axis::Z => self.bz,
        }
    }

    pub fn set(&mut self, axis: Axis, value: f64) {
        match axis {
            Axis::X => self.bx = value,
            Axis::Y => self.by = value,
            Axis::Z => self.bz = value,
        }
    }

    /// Magnitude of the projection orthogonal to `axis`.
    pub fn perp(&self, axis: Axis) -> f64 {
        let (a, b) = match axis {
            Axis::X => (self.by, self.bz),
            Axis::Y => (self.bx, self.bz),
            Axis::Z => (self.bx, self.by),
        };
        a.hypot(b)
    }

    /// Field transverse to the light propagation direction.
    pub fn transverse(&self) -> f64 {
        self.perp(Axis::Z)
    }
}

impl std::ops::Add for FieldVector {
    type Output = FieldVector;
    fn add(self, o: FieldVector) -> FieldVector {
        FieldVector::new(self.bx + o.bx, self.by + o.by, self.bz + o.bz)
    }
}

impl std::ops::Neg for FieldVector {
    type Output = FieldVector;
    fn neg(self) -> FieldVector {
        FieldVector::new(-self.bx, -self.by, -self.bz)
    }
}

/// Signed harmonic index `n` of the resonance condition.
///
/// Labels follow the convention used in the figures: the feature on the
/// negative side of a field scan carries `+|n|`, its mirror `-|n|`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct HarmonicId(pub i32);

impl HarmonicId {
    pub fn order(self) -> i32 {
        self.0.abs()
    }

    pub fn is_even(self) -> bool {
        self.0 % 2 == 0
    }
}

impl fmt::Display for HarmonicId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:+}", self.0)
    }
}

/// Larmor frequency in kHz for a total field in μT.
pub fn larmor_frequency(species: &AtomSpecies, b_total: f64) -> Result<f64, AtomicError> {
    if b_total < 0.0 || b_total.is_nan() {
        return Err(AtomicError::NegativeField(b_total));
    }
    Ok(species.gamma() * b_total)
}

/// `2 * nu_rf - hfs`: the two-photon detuning at zero field, kHz.
pub fn rf_detuning(nu_rf: f64, species: &AtomSpecies) -> Result<f64, AtomicError> {
    if !(nu_rf > 0.0) {
        return Err(AtomicError::NonPositiveFrequency(nu_rf));
    }
    Ok(2.0 * nu_rf - species.hfs_splitting)
}

/// Inverse of [`rf_detuning`].
pub fn rf_frequency_for_detuning(delta_rf: f64, species: &AtomSpecies) -> f64 {
    (delta_rf + species.hfs_splitting) / 2.0
}

fn harmonics_where(species: &AtomSpecies, keep: impl Fn(i32) -> bool) -> Vec<HarmonicId> {
    (-species.n_max..=species.n_max)
        .filter(|&n| keep(n))
        .map(HarmonicId)
        .collect()
}

/// Harmonics observable in a scan along `scan` with the given field
/// orthogonal to the scan axis.
///
/// σ⁺ light with a purely longitudinal field only drives Δm = 0 Λ systems
/// (even n); a transverse scan axis adds π couplings whose odd-n lines
/// dominate. The clock line (n = 0) is only visible when the RF is swept.
pub fn allowed_harmonics(scan: ScanAxis, perp_field: f64, species: &AtomSpecies) -> Vec<HarmonicId> {
    match scan {
        ScanAxis::BZ if perp_field == 0.0 => harmonics_where(species, |n| n != 0 && n % 2 == 0),
        ScanAxis::BZ => harmonics_where(species, |n| n != 0),
        ScanAxis::BX | ScanAxis::BY => harmonics_where(species, |n| n % 2 != 0),
        ScanAxis::RF if perp_field == 0.0 => harmonics_where(species, |n| n % 2 == 0),
        ScanAxis::RF => harmonics_where(species, |_| true),
    }
}

/// Harmonics present for a static field geometry in an RF scan.
pub fn allowed_for_field(field: &FieldVector, species: &AtomSpecies) -> Vec<HarmonicId> {
    let long = field.bz;
    let perp = field.transverse();
    if field.magnitude() == 0.0 || (long != 0.0 && perp != 0.0) {
        harmonics_where(species, |_| true)
    } else if perp == 0.0 {
        harmonics_where(species, |n| n % 2 == 0)
    } else {
        harmonics_where(species, |n| n % 2 != 0)
    }
}

/// A predicted resonance in a field scan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanPrediction {
    pub n: HarmonicId,
    /// Field along the scan axis, μT.
    pub position: f64,
}

/// Resonance positions for a field scan at fixed detuning.
///
/// For each allowed order whose resonant magnitude `|δ|/(|n|γ)` exceeds the
/// orthogonal field, a symmetric pair `±sqrt((δ/(nγ))² - perp²)` is returned,
/// sorted by position.
pub fn predict_scan_positions(
    delta_rf: f64,
    scan: ScanAxis,
    perp_field: f64,
    species: &AtomSpecies,
) -> Result<Vec<ScanPrediction>, AtomicError> {
    if !scan.is_field() {
        return Err(AtomicError::NotAFieldAxis(scan));
    }
    if perp_field < 0.0 || perp_field.is_nan() {
        return Err(AtomicError::NegativeField(perp_field));
    }
    if delta_rf == 0.0 {
        return Err(AtomicError::DegenerateDetuning);
    }
    let gamma = species.gamma();
    let mut out = Vec::new();
    for n in allowed_harmonics(scan, perp_field, species) {
        if n.0 <= 0 {
            continue;
        }
        let b_res = delta_rf.abs() / (n.0 as f64 * gamma);
        if b_res < perp_field {
            continue;
        }
        let x = (b_res * b_res - perp_field * perp_field).sqrt();
        out.push(ScanPrediction { n, position: -x });
        out.push(ScanPrediction { n: HarmonicId(-n.0), position: x });
    }
    out.sort_by(|a, b| a.position.total_cmp(&b.position));
    Ok(out)
}

/// Predicted resonance for a scan, flagged against the scan window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RangedPrediction {
    pub prediction: ScanPrediction,
    pub in_range: bool,
}

/// [`predict_scan_positions`] with each position flagged against `[lo, hi]`
/// (μT along the scan axis, relative to zero field).
pub fn predict_in_window(
    delta_rf: f64,
    scan: ScanAxis,
    perp_field: f64,
    species: &AtomSpecies,
    lo: f64,
    hi: f64,
) -> Result<Vec<RangedPrediction>, AtomicError> {
    Ok(predict_scan_positions(delta_rf, scan, perp_field, species)?
        .into_iter()
        .map(|p| RangedPrediction {
            prediction: p,
            in_range: p.position >= lo && p.position <= hi,
        })
        .collect())
}

/// Resonance detunings `n * gamma * |B|` for a conventional RF scan.
pub fn predict_rf_positions(field: &FieldVector, species: &AtomSpecies) -> Vec<(HarmonicId, f64)> {
    let omega = species.gamma() * field.magnitude();
    allowed_for_field(field, species)
        .into_iter()
        .map(|n| (n, n.0 as f64 * omega))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rb() -> AtomSpecies {
        AtomSpecies::rb85()
    }

    /// Roots of |δ| - |n|γ sqrt(x² + p²) by dense scan plus bisection.
    fn oracle_roots(delta: f64, n: i32, perp: f64, gamma: f64, lo: f64, hi: f64) -> Vec<f64> {
        let g = |x: f64| delta.abs() - (n.abs() as f64) * gamma * (x * x + perp * perp).sqrt();
        let steps = 200_000;
        let h = (hi - lo) / steps as f64;
        let mut roots = Vec::new();
        for i in 0..steps {
            let (mut a, mut b) = (lo + i as f64 * h, lo + (i + 1) as f64 * h);
            if g(a).signum() == g(b).signum() {
                continue;
            }
            for _ in 0..100 {
                let m = 0.5 * (a + b);
                if g(a).signum() == g(m).signum() {
                    a = m;
                } else {
                    b = m;
                }
            }
            roots.push(0.5 * (a + b));
        }
        roots
    }

    #[test]
    fn gamma_from_constants() {
        let s = rb();
        let expected = s.g_f * 13996.245 * 1e-3;
        assert!((s.gamma() - expected).abs() / expected < 1e-6);
        assert!((s.gamma() - 4.665415).abs() < 1e-6);
        assert_eq!(s.n_max, 5);
    }

    #[test]
    fn larmor_examples() {
        let s = rb();
        assert_eq!(larmor_frequency(&s, 0.0).unwrap(), 0.0);
        let at_93 = larmor_frequency(&s, 93.0).unwrap();
        assert!((at_93 - 434.0).abs() / 434.0 < 0.03, "{at_93}");
        let at_12 = larmor_frequency(&s, 12.43).unwrap();
        assert!((at_12 - 58.0).abs() < 0.1, "{at_12}");
        assert!(matches!(larmor_frequency(&s, -1.0), Err(AtomicError::NegativeField(_))));
    }

    #[test]
    fn detuning_examples() {
        let s = rb();
        assert_eq!(rf_detuning(s.hfs_splitting / 2.0, &s).unwrap(), 0.0);
        for d in [-434.0, -58.0, 316.0] {
            let nu = rf_frequency_for_detuning(d, &s);
            assert!((rf_detuning(nu, &s).unwrap() - d).abs() < 1e-6);
        }
        assert!(rf_detuning(0.0, &s).is_err());
    }

    #[test]
    fn parity_sets() {
        let s = rb();
        let ids = |v: Vec<HarmonicId>| v.into_iter().map(|h| h.0).collect::<Vec<_>>();
        assert_eq!(ids(allowed_harmonics(ScanAxis::BZ, 0.0, &s)), vec![-4, -2, 2, 4]);
        assert_eq!(ids(allowed_harmonics(ScanAxis::BX, 0.0, &s)), vec![-5, -3, -1, 1, 3, 5]);
        assert_eq!(ids(allowed_harmonics(ScanAxis::BY, 7.0, &s)), vec![-5, -3, -1, 1, 3, 5]);
        assert_eq!(ids(allowed_harmonics(ScanAxis::RF, 3.0, &s)), (-5..=5).collect::<Vec<_>>());
    }

    #[test]
    fn bz_positions_at_minus_58() {
        let s = rb();
        let p = predict_scan_positions(-58.0, ScanAxis::BZ, 0.0, &s).unwrap();
        let got: Vec<(i32, f64)> = p.iter().map(|q| (q.n.0, q.position)).collect();
        assert_eq!(got.len(), 4);
        assert_eq!(got[0].0, 2);
        assert_eq!(got[1].0, 4);
        assert_eq!(got[2].0, -4);
        assert_eq!(got[3].0, -2);
        assert!((got[1].1 + 3.11).abs() < 0.01);
        assert!((got[0].1 + 6.22).abs() < 0.01);
    }

    #[test]
    fn bz_positions_at_plus_316() {
        let p = predict_scan_positions(316.0, ScanAxis::BZ, 0.0, &rb()).unwrap();
        let inner = p.iter().find(|q| q.n.0 == 4).unwrap();
        let outer = p.iter().find(|q| q.n.0 == 2).unwrap();
        assert!((inner.position + 16.93).abs() < 0.05);
        assert!((outer.position + 33.87).abs() < 0.05);
    }

    #[test]
    fn first_harmonic_absent_when_perp_too_large() {
        let s = rb();
        let p = predict_scan_positions(-58.0, ScanAxis::BX, 20.0, &s).unwrap();
        assert!(p.iter().all(|q| q.n.order() != 1));
        assert!(oracle_roots(-58.0, 1, 20.0, s.gamma(), -60.0, 60.0).is_empty());
    }

    #[test]
    fn degenerate_and_rf_errors() {
        let s = rb();
        assert_eq!(
            predict_scan_positions(0.0, ScanAxis::BZ, 0.0, &s),
            Err(AtomicError::DegenerateDetuning)
        );
        assert!(matches!(
            predict_scan_positions(-58.0, ScanAxis::RF, 0.0, &s),
            Err(AtomicError::NotAFieldAxis(_))
        ));
    }

    #[test]
    fn positions_are_oracle_roots() {
        let s = rb();
        for &(delta, scan, perp) in &[
            (-58.0, ScanAxis::BZ, 0.0),
            (-58.0, ScanAxis::BX, 0.0),
            (-434.0, ScanAxis::BZ, 13.0),
            (316.0, ScanAxis::BY, 4.5),
        ] {
            for p in predict_scan_positions(delta, scan, perp, &s).unwrap() {
                let roots = oracle_roots(delta, p.n.0, perp, s.gamma(), -120.0, 120.0);
                let nearest = roots
                    .iter()
                    .map(|r| (r - p.position).abs())
                    .fold(f64::INFINITY, f64::min);
                assert!(nearest < 1e-6, "{delta} {scan} {perp} {:?} {nearest}", p);
            }
        }
    }

    #[test]
    fn rf_positions() {
        let s = rb();
        for (_, d) in predict_rf_positions(&FieldVector::ZERO, &s) {
            assert_eq!(d, 0.0);
        }
        let b_mag: f64 = 12.43;
        let f = FieldVector::new(b_mag / 2.0_f64.sqrt(), 0.0, b_mag / 2.0_f64.sqrt());
        let lines = predict_rf_positions(&f, &s);
        assert_eq!(lines.len(), 11);
        for w in lines.windows(2) {
            let spacing = w[1].1 - w[0].1;
            assert!((spacing - 58.0).abs() < 0.05, "{spacing}");
            let larmor = larmor_frequency(&s, f.magnitude()).unwrap();
            assert!((spacing - larmor).abs() < 1e-9);
        }
        let transverse_only = predict_rf_positions(&FieldVector::new(5.0, 0.0, 0.0), &s);
        assert!(transverse_only.iter().all(|(n, _)| !n.is_even()));
    }

    #[test]
    fn perp_decomposition() {
        let f = FieldVector::new(1.5, -2.0, 3.25);
        for axis in Axis::ALL {
            let lhs = f.perp(axis).powi(2) + f.component(axis).powi(2);
            let rhs = f.magnitude().powi(2);
            assert!((lhs - rhs).abs() <= 1e-12 * rhs);
        }
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn larmor_is_linear(b in 0.0f64..200.0, a in 0.0f64..10.0) {
            let s = AtomSpecies::rb85();
            let lhs = larmor_frequency(&s, a * b).unwrap();
            let rhs = a * larmor_frequency(&s, b).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-12 * rhs.abs().max(1.0));
        }

        #[test]
        fn pairs_symmetric_and_parity_respected(
            delta in prop_oneof![-500.0f64..-20.0, 20.0f64..500.0],
            perp in 0.0f64..30.0,
            axis in prop_oneof![Just(ScanAxis::BX), Just(ScanAxis::BY), Just(ScanAxis::BZ)],
        ) {
            let s = AtomSpecies::rb85();
            let perp = if axis == ScanAxis::BZ && perp < 5.0 { 0.0 } else { perp };
            let p = predict_scan_positions(delta, axis, perp, &s).unwrap();
            prop_assert_eq!(p.len() % 2, 0);
            for q in &p {
                let mirror = p.iter().find(|r| r.n.0 == -q.n.0).unwrap();
                prop_assert_eq!(mirror.position, -q.position);
                prop_assert_eq!(q.n.0 > 0, q.position < 0.0);
                if axis == ScanAxis::BZ && perp == 0.0 {
                    prop_assert!(q.n.is_even());
                }
                if axis != ScanAxis::BZ {
                    prop_assert!(!q.n.is_even());
                }
            }
        }

        #[test]
        fn positions_compress_as_inverse_order(delta in 20.0f64..500.0) {
            let s = AtomSpecies::rb85();
            let p = predict_scan_positions(-delta, ScanAxis::BZ, 0.0, &s).unwrap();
            let at = |n: i32| p.iter().find(|q| q.n.0 == n).unwrap().position;
            prop_assert!((at(2) - 2.0 * at(4)).abs() <= 1e-12 * at(2).abs());
        }
    }
}
