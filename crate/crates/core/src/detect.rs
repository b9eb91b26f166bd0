//! Dispersive-feature extraction from demodulated traces.
//!
//! A feature is an extremum pair with opposite-signed lobes around a local
//! baseline; its center is the interpolated zero crossing between the lobes,
//! its width the extrema separation.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::atomic::HarmonicId;
use crate::trace::Trace;

pub const MIN_POINTS: usize = 50;

/// Extremum tracking hysteresis as a fraction of the detection threshold.
const HYSTERESIS: f64 = 0.25;

/// A candidate is dropped when the trace swings more than this multiple of
/// its amplitude within one width beside it.
const MAX_FLANK_SWING: f64 = 3.0;

/// Mirrored features may differ in width or swing by at most this factor (as a log).
const MIRROR_LOG_RATIO: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DetectError {
    #[error("trace has {0} points; feature detection needs at least {MIN_POINTS}")]
    TooShort(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SlopeSign {
    #[serde(rename = "+")]
    Positive,
    #[serde(rename = "-")]
    Negative,
}

impl SlopeSign {
    pub fn of(v: f64) -> Self {
        if v >= 0.0 {
            SlopeSign::Positive
        } else {
            SlopeSign::Negative
        }
    }

    pub fn value(self) -> f64 {
        match self {
            SlopeSign::Positive => 1.0,
            SlopeSign::Negative => -1.0,
        }
    }
}

impl fmt::Display for SlopeSign {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SlopeSign::Positive => "+",
            SlopeSign::Negative => "-",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResonanceFeature {
    /// Zero crossing, control units.
    pub center: f64,
    /// Separation of the two extrema, control units.
    pub width: f64,
    /// Peak-to-peak swing of the smoothed trace.
    pub amplitude: f64,
    /// Central slope measured with increasing control value.
    pub slope_sign: SlopeSign,
    /// Central slope estimate, value units per control unit.
    pub slope: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<HarmonicId>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectParams {
    pub min_smooth_points: usize,
    pub threshold_sigma: f64,
    /// Relative floor for noiseless traces, as a fraction of max |value|.
    pub relative_floor: f64,
    pub min_balance: f64,
}

impl Default for DetectParams {
    fn default() -> Self {
        Self { min_smooth_points: 5, threshold_sigma: 5.0, relative_floor: 1e-3, min_balance: 0.3 }
    }
}

/// Detection output together with the statistics it was judged against.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub features: Vec<ResonanceFeature>,
    pub noise_rms: f64,
    pub threshold: f64,
    pub smooth_points: usize,
}

pub fn detect_features(trace: &Trace) -> Result<Vec<ResonanceFeature>, DetectError> {
    Ok(detect_with(trace, &DetectParams::default())?.features)
}

pub fn detect_with(trace: &Trace, params: &DetectParams) -> Result<Detection, DetectError> {
    if trace.len() < MIN_POINTS {
        return Err(DetectError::TooShort(trace.len()));
    }
    let asc = trace.ascending();
    let x = asc.controls();
    let y = asc.values();
    let noise = robust_noise(&y);
    let peak = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let threshold = (params.threshold_sigma * noise).max(params.relative_floor * peak);
    if threshold == 0.0 {
        return Ok(Detection { features: Vec::new(), noise_rms: noise, threshold, smooth_points: params.min_smooth_points });
    }

    let mut window = params.min_smooth_points.max(1);
    let mut features = find_features(&x, &y, window, threshold, params.min_balance);
    if !features.is_empty() {
        let step = (x[x.len() - 1] - x[0]) / (x.len() - 1) as f64;
        let mut widths: Vec<f64> = features.iter().map(|f| f.width).collect();
        widths.sort_by(f64::total_cmp);
        let median = widths[widths.len() / 2];
        let wider = (median / 5.0 / step).round() as usize;
        if wider > window {
            window = wider | 1;
            features = find_features(&x, &y, window, threshold, params.min_balance);
        }
    }
    Ok(Detection { features, noise_rms: noise, threshold, smooth_points: window })
}

fn find_features(x: &[f64], y: &[f64], window: usize, threshold: f64, min_balance: f64) -> Vec<ResonanceFeature> {
    let s = moving_average(y, window);
    // a weak lobe riding on a strong neighbour's tail swings less than the
    // feature's peak-to-peak, so extrema are tracked below the threshold
    let ext = zigzag(&s, threshold * HYSTERESIS);
    let mut candidates = Vec::new();
    for pair in ext.windows(2) {
        let (i, j) = (pair[0], pair[1]);
        if let Some(f) = candidate(x, &s, i, j, min_balance).filter(|f| f.amplitude >= threshold) {
            candidates.push((i, j, f));
        }
    }
    // steep features first; an extremum belongs to at most one feature
    candidates.sort_by(|a, b| (b.2.amplitude / b.2.width).total_cmp(&(a.2.amplitude / a.2.width)));
    let mut taken: Vec<(usize, usize)> = Vec::new();
    let mut out = Vec::new();
    for (i, j, f) in candidates {
        if taken.iter().all(|&(a, b)| j < a || i > b) {
            taken.push((i, j));
            out.push(f);
        }
    }
    out.sort_by(|a, b| a.center.total_cmp(&b.center));
    out
}

fn candidate(x: &[f64], s: &[f64], i: usize, j: usize, min_balance: f64) -> Option<ResonanceFeature> {
    let width = x[j] - x[i];
    if width <= 0.0 {
        return None;
    }
    // one flank may sit on a neighbour's tail, so each flank alone is also
    // tried as the baseline, unless it falls off the trace and got clamped
    let (lo, hi) = (x[i] - width, x[j] + width);
    let (left, right) = (interp(x, s, lo), interp(x, s, hi));
    let mut bases = vec![0.5 * (left + right)];
    if lo >= x[0] {
        bases.push(left);
    }
    if hi <= x[x.len() - 1] {
        bases.push(right);
    }
    let (base, balance) = bases
        .into_iter()
        .filter_map(|base| {
            let (a, b) = (s[i] - base, s[j] - base);
            (a * b < 0.0).then(|| (base, a.abs().min(b.abs()) / a.abs().max(b.abs())))
        })
        .max_by(|p, q| p.1.total_cmp(&q.1))?;
    if balance < min_balance {
        return None;
    }
    let amplitude = (s[j] - s[i]).abs();
    // half of a weak line paired with a distant extremum sits on a much
    // larger swing from the neighbour that hid the other half
    let swing = |from: f64, to: f64| {
        let (a, b) = (x.partition_point(|&v| v < from), x.partition_point(|&v| v <= to));
        let seg = &s[a..b.max(a)];
        seg.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v)) - seg.iter().fold(f64::INFINITY, |m, &v| m.min(v))
    };
    if swing(lo, x[i]).max(swing(x[j], hi)) > MAX_FLANK_SWING * amplitude {
        return None;
    }
    let mut center = None;
    for k in i..j {
        let (u, v) = (s[k] - base, s[k + 1] - base);
        if u == 0.0 {
            center = Some(x[k]);
            break;
        }
        if u * v < 0.0 {
            center = Some(x[k] + (x[k + 1] - x[k]) * u / (u - v));
            break;
        }
    }
    Some(ResonanceFeature {
        center: center?,
        width,
        amplitude,
        slope_sign: SlopeSign::of(s[j] - s[i]),
        slope: (s[j] - s[i]) / width,
        n: None,
    })
}

/// Linear interpolation with clamping at the ends.
fn interp(x: &[f64], y: &[f64], at: f64) -> f64 {
    if at <= x[0] {
        return y[0];
    }
    let last = x.len() - 1;
    if at >= x[last] {
        return y[last];
    }
    let k = x.partition_point(|&v| v <= at).saturating_sub(1).min(last - 1);
    let f = (at - x[k]) / (x[k + 1] - x[k]);
    y[k] + f * (y[k + 1] - y[k])
}

/// Centered moving average; the window shrinks symmetrically near the ends.
pub fn moving_average(y: &[f64], window: usize) -> Vec<f64> {
    let half = window / 2;
    let n = y.len();
    let mut prefix = vec![0.0; n + 1];
    for (k, v) in y.iter().enumerate() {
        prefix[k + 1] = prefix[k] + v;
    }
    (0..n)
        .map(|k| {
            let h = half.min(k).min(n - 1 - k);
            (prefix[k + h + 1] - prefix[k - h]) / (2 * h + 1) as f64
        })
        .collect()
}

/// Alternating extrema whose successive differences exceed `threshold`.
fn zigzag(s: &[f64], threshold: f64) -> Vec<usize> {
    let mut out = Vec::new();
    let mut dir = 0i8;
    let (mut hi, mut lo) = (0usize, 0usize);
    for k in 1..s.len() {
        match dir {
            0 => {
                if s[k] > s[hi] {
                    hi = k;
                }
                if s[k] < s[lo] {
                    lo = k;
                }
                if s[hi] - s[lo] >= threshold {
                    if hi < lo {
                        out.push(hi);
                        dir = -1;
                    } else {
                        out.push(lo);
                        dir = 1;
                    }
                }
            }
            1 => {
                if s[k] > s[hi] {
                    hi = k;
                }
                if s[hi] - s[k] >= threshold {
                    out.push(hi);
                    lo = k;
                    dir = -1;
                }
            }
            _ => {
                if s[k] < s[lo] {
                    lo = k;
                }
                if s[k] - s[lo] >= threshold {
                    out.push(lo);
                    hi = k;
                    dir = 1;
                }
            }
        }
    }
    // the pending extremum counts unless the trace is still running into the edge
    let pending = match dir {
        1 => Some(hi),
        -1 => Some(lo),
        _ => None,
    };
    if let Some(p) = pending.filter(|&p| p + 1 < s.len()) {
        out.push(p);
    }
    out
}

/// Robust white-noise estimate from second differences, which cancel
/// offsets and linear trends: var(y[k+1] - 2y[k] + y[k-1]) = 6 sigma^2.
pub fn robust_noise(y: &[f64]) -> f64 {
    let d2: Vec<f64> = y.windows(3).map(|w| w[2] - 2.0 * w[1] + w[0]).collect();
    1.4826 * median_abs(&d2) / 6f64.sqrt()
}

fn median_abs(v: &[f64]) -> f64 {
    let mut a: Vec<f64> = v.iter().map(|x| x.abs()).collect();
    if a.is_empty() {
        return 0.0;
    }
    a.sort_by(f64::total_cmp);
    let k = a.len() / 2;
    if a.len() % 2 == 1 {
        a[k]
    } else {
        0.5 * (a[k - 1] + a[k])
    }
}

/// How mirrored features relate in slope sign.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairRelation {
    Opposite,
    Same,
    Any,
}

impl PairRelation {
    fn admits(self, a: SlopeSign, b: SlopeSign) -> bool {
        match self {
            PairRelation::Opposite => a != b,
            PairRelation::Same => a == b,
            PairRelation::Any => true,
        }
    }
}

/// Indices `(low, high)` of features mirrored about a common center.
#[derive(Debug, Clone, PartialEq)]
pub struct Pairing {
    pub center: f64,
    pub pairs: Vec<(usize, usize)>,
}

impl Pairing {
    pub fn unpaired(&self, count: usize) -> Vec<usize> {
        (0..count).filter(|k| !self.pairs.iter().any(|&(a, b)| a == *k || b == *k)).collect()
    }
}

/// Find the symmetry center matching the most mirrored pairs. `None` when no
/// two features pair up.
pub fn pair_features(features: &[ResonanceFeature], relation: PairRelation) -> Option<Pairing> {
    let f = features;
    let mut best: Option<(usize, f64, Pairing)> = None;
    for a in 0..f.len() {
        for b in a + 1..f.len() {
            if !relation.admits(f[a].slope_sign, f[b].slope_sign) || dissimilarity(&f[a], &f[b]).is_none() {
                continue;
            }
            let guess = 0.5 * (f[a].center + f[b].center);
            let (pairing, dev) = match_about(f, relation, guess);
            let pairing = {
                // re-center on the matched pairs and match again
                let c = pairing.center;
                let (p2, d2) = match_about(f, relation, c);
                if p2.pairs.len() >= pairing.pairs.len() {
                    (p2, d2)
                } else {
                    (pairing, dev)
                }
            };
            let (p, d) = pairing;
            let better = match &best {
                None => true,
                Some((count, bd, _)) => p.pairs.len() > *count || (p.pairs.len() == *count && d < *bd),
            };
            if better && !p.pairs.is_empty() {
                best = Some((p.pairs.len(), d, p));
            }
        }
    }
    best.map(|b| b.2)
}

/// Mirror images share width and swing; `None` when they are too different
/// to be one resonance seen on both sides.
fn dissimilarity(a: &ResonanceFeature, b: &ResonanceFeature) -> Option<f64> {
    let w = (a.width / b.width).ln().abs();
    let s = (a.amplitude / b.amplitude).ln().abs();
    (w <= MIRROR_LOG_RATIO && s <= MIRROR_LOG_RATIO).then_some(w + s)
}

fn match_about(f: &[ResonanceFeature], relation: PairRelation, center: f64) -> (Pairing, f64) {
    let mut cands = Vec::new();
    for a in 0..f.len() {
        for b in a + 1..f.len() {
            if f[a].center >= center || f[b].center <= center || !relation.admits(f[a].slope_sign, f[b].slope_sign) {
                continue;
            }
            let Some(unlike) = dissimilarity(&f[a], &f[b]) else { continue };
            let mid = 0.5 * (f[a].center + f[b].center);
            let tol = 0.25 * (f[a].width + f[b].width);
            let dev = (mid - center).abs();
            if dev <= tol {
                cands.push((dev / tol + unlike, a, b));
            }
        }
    }
    cands.sort_by(|p, q| p.0.total_cmp(&q.0));
    let mut used = vec![false; f.len()];
    let mut pairs = Vec::new();
    let mut total = 0.0;
    for (score, a, b) in cands {
        if !used[a] && !used[b] {
            used[a] = true;
            used[b] = true;
            pairs.push((a, b));
            total += score;
        }
    }
    pairs.sort_by(|p, q| f[p.0].center.total_cmp(&f[q.0].center));
    let fitted = if pairs.is_empty() {
        center
    } else {
        pairs.iter().map(|&(a, b)| 0.5 * (f[a].center + f[b].center)).sum::<f64>() / pairs.len() as f64
    };
    (Pairing { center: fitted, pairs }, total)
}
