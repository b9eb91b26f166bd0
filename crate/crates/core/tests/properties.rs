//! Detector and assignment properties on synthetic traces.

use magscan::atomic::predict_scan_positions;
use magscan::calib::{assign_harmonics, estimate_bias, fit_factor};
use magscan::detect::{detect_with, DetectParams, PairRelation};
use magscan::{run_scan, AtomSpecies, Axis, Channel, ControlUnit, ExperimentConfig, FieldVector, ScanAxis, Trace, TraceChannel};
use proptest::prelude::*;
use proptest::test_runner::RngSeed;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};

const GAMMA: f64 = 4.665415;

fn config(cases: u32) -> ProptestConfig {
    ProptestConfig { cases, failure_persistence: None, rng_seed: RngSeed::Fixed(0x6d61_6773), ..ProptestConfig::default() }
}

/// Dispersive Lorentzian `-2u/(1+u^2)^2`, peak-to-peak `3*sqrt(3)/4`.
fn dispersive(x: f64, center: f64, hwhm: f64) -> f64 {
    let u = (x - center) / hwhm;
    -2.0 * u / (1.0 + u * u).powi(2)
}

const DISPERSIVE_PP: f64 = 1.299_038_105_676_658;

struct Oracle {
    center: f64,
    hwhm: f64,
    /// Peak-to-peak, V.
    amplitude: f64,
}

fn oracle_trace(lines: &[Oracle], half: f64, points: usize, noise: f64, seed: u64) -> Trace {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let gauss = Normal::new(0.0, noise).unwrap();
    let samples = (0..points)
        .map(|i| {
            let x = -half + 2.0 * half * i as f64 / (points - 1) as f64;
            let v: f64 = lines.iter().map(|l| l.amplitude / DISPERSIVE_PP * dispersive(x, l.center, l.hwhm)).sum();
            (x, v + gauss.sample(&mut rng))
        })
        .collect();
    Trace::new(TraceChannel::Cpt, ScanAxis::BZ, ControlUnit::MicroTesla, samples).unwrap()
}

proptest! {
    #![proptest_config(config(200))]

    #[test]
    fn detector_honesty(
        delta in prop_oneof![-150.0f64..-40.0, 40.0f64..150.0],
        odd in any::<bool>(),
        spacing in 6.0f64..12.0,
        amps in prop::collection::vec((0.02f64..1.0, any::<bool>()), 6),
        noise in 1e-3f64..1e-2,
        seed in any::<u64>(),
    ) {
        let axis = if odd { ScanAxis::BX } else { ScanAxis::BZ };
        let species = AtomSpecies::rb85();
        // positions for |n| >= 2, so every line sits inside the window
        let preds: Vec<f64> = predict_scan_positions(delta, axis, 0.0, &species)
            .unwrap()
            .into_iter()
            .filter(|p| p.n.0.abs() >= 2)
            .map(|p| p.position)
            .collect();
        let mut sorted = preds.clone();
        sorted.sort_by(f64::total_cmp);
        let min_sep = sorted.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
        let hwhm = min_sep / spacing;
        let lines: Vec<Oracle> = preds
            .iter()
            .zip(&amps)
            .map(|(&c, &(a, flip))| Oracle { center: c, hwhm, amplitude: if flip { -a } else { a } })
            .collect();
        let half = 1.3 * sorted.last().unwrap();
        // about 6 points per half width
        let points = ((2.0 * half / (hwhm / 6.0)) as usize).clamp(200, 6000);
        let trace = oracle_trace(&lines, half, points, noise, seed);
        let det = detect_with(&trace, &DetectParams::default()).unwrap();
        for f in &det.features {
            let near = lines.iter().map(|l| (f.center - l.center).abs()).fold(f64::INFINITY, f64::min);
            prop_assert!(near <= 0.5 * f.width, "feature at {} is {near} from any prediction (width {})", f.center, f.width);
        }
        for l in lines.iter().filter(|l| l.amplitude.abs() > 10.0 * noise) {
            let found = det.features.iter().any(|f| (f.center - l.center).abs() <= 0.5 * f.width);
            prop_assert!(found, "missed line at {} (pp {}, noise {noise}); got {:?}", l.center, l.amplitude, det.features);
        }
    }
}

fn bf_scan(axis: Axis, delta: f64, bias: f64, seed: u64) -> Trace {
    let mut cfg = ExperimentConfig::bf_fig3(axis);
    cfg.delta_rf = delta;
    cfg.background = FieldVector::along(axis, bias);
    let reach = delta.abs() / (2.0 * GAMMA);
    cfg.scan.start = -1.3 * reach - bias;
    cfg.scan.stop = 1.3 * reach - bias;
    cfg.seed = seed;
    run_scan(&cfg, &[Channel::Cpt]).unwrap().remove(0)
}

proptest! {
    #![proptest_config(config(24))]

    #[test]
    fn harmonic_grid_consistency(
        axis in prop_oneof![Just(Axis::X), Just(Axis::Z)],
        delta in prop_oneof![-80.0f64..-45.0, 45.0f64..80.0],
        bias in -1.0f64..1.0,
        seed in any::<u64>(),
    ) {
        let species = AtomSpecies::rb85();
        let trace = bf_scan(axis, delta, bias, seed);
        let det = detect_with(&trace, &DetectParams::default()).unwrap();
        let asg = assign_harmonics(&det.features, delta, &species, trace.scan_axis, trace.control_unit).unwrap();
        let fit = fit_factor(axis, &asg.features, delta, &species).unwrap();
        let mut worst: f64 = 0.0;
        for f in asg.assigned() {
            let n = f.n.unwrap().0.abs() as f64;
            // deviation in μT at the fitted scale and zero
            let x = fit.factor * (f.center - fit.bias_control);
            worst = worst.max((n * GAMMA * x.abs() - delta.abs()).abs() / (n * GAMMA));
        }
        prop_assert!(worst < 3.0 * fit.residual_rms.max(1e-3), "worst {worst} uT vs residual {}", fit.residual_rms);
        prop_assert!((fit.factor - 1.0).abs() < 0.02);
        prop_assert!((fit.ambient_field() - bias).abs() < 0.1);
    }
}

/// Pair-midpoint bias of a -434 kHz scan along `axis` with a transverse field.
fn wide_scan_bias(axis: Axis, bias: f64, transverse: FieldVector, seed: u64) -> f64 {
    let mut cfg = ExperimentConfig::bf_fig2(0.0);
    cfg.scan.axis = axis.scan_axis();
    cfg.modulation.b.axis = axis;
    cfg.background = FieldVector::along(axis, bias);
    cfg.applied = transverse;
    cfg.seed = seed;
    let trace = run_scan(&cfg, &[Channel::Cpt]).unwrap().remove(0);
    let det = detect_with(&trace, &DetectParams::default()).unwrap();
    // control value of zero field is -bias
    -estimate_bias(&det.features, PairRelation::Opposite).unwrap()
}

proptest! {
    #![proptest_config(config(8))]

    #[test]
    fn bias_ignores_orthogonal_fields(
        axis in prop_oneof![Just(Axis::X), Just(Axis::Z)],
        bias in -2.0f64..2.0,
        perp in 0.0f64..13.0,
        angle in 0.0f64..std::f64::consts::TAU,
        seed in any::<u64>(),
    ) {
        let (a, b) = match axis {
            Axis::X => (Axis::Y, Axis::Z),
            Axis::Y => (Axis::Z, Axis::X),
            Axis::Z => (Axis::X, Axis::Y),
        };
        let mut t = FieldVector::along(a, perp * angle.cos());
        t.set(b, perp * angle.sin());
        let plain = wide_scan_bias(axis, bias, FieldVector::ZERO, seed);
        let shifted = wide_scan_bias(axis, bias, t, seed);
        prop_assert!((plain - bias).abs() < 0.1, "{plain} vs injected {bias}");
        prop_assert!((shifted - plain).abs() < 0.1, "perp {perp}: {shifted} vs {plain}");
    }
}
