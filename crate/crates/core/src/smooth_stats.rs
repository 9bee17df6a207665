//! Exact order statistics and their softmax-smoothed approximations.
//!
//! Every soft statistic here is a convex combination `sum_n w_n x_n` whose
//! weights are a stabilized softmax. The median variant weights each
//! candidate by `exp(-a * D_n)` where `D_n` is the mean absolute deviation of
//! the set around `x_n`, so large positive `a` concentrates on the candidate
//! with the smallest deviation, which is the median.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Largest `|a|` accepted by the analytic gradient routines. Forward
/// evaluation accepts any finite sharpness because exponentials are always
/// max-subtracted, but beyond this bound finite differences stop being a
/// meaningful check.
pub const GRADIENT_SAFE_SHARPNESS: f64 = 50.0;

/// A validated, non-empty list of finite fusion candidates.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet(Vec<f64>);

impl CandidateSet {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument("candidate set is empty".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("candidate value".into()));
        }
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl AsRef<[f64]> for CandidateSet {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

pub fn exact_mean(g: &[f64]) -> f64 {
    assert!(!g.is_empty(), "empty candidate set");
    g.iter().sum::<f64>() / g.len() as f64
}

pub fn exact_min(g: &[f64]) -> f64 {
    assert!(!g.is_empty(), "empty candidate set");
    g.iter().copied().fold(f64::INFINITY, f64::min)
}

pub fn exact_max(g: &[f64]) -> f64 {
    assert!(!g.is_empty(), "empty candidate set");
    g.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Median; even-sized sets average the two middle order statistics.
pub fn exact_median(g: &[f64]) -> f64 {
    assert!(!g.is_empty(), "empty candidate set");
    let mut s = g.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// `(1/N) sum_n |x - x_n|`.
pub fn mean_abs_deviation(g: &[f64], x: f64) -> f64 {
    g.iter().map(|v| (x - v).abs()).sum::<f64>() / g.len() as f64
}

/// Softmax of `logits` with the maximum subtracted first. Logits are clamped
/// into the finite range so that saturated inputs degrade to a hard selection
/// instead of producing NaN.
pub(crate) fn stable_softmax_into(logits: &mut [f64]) {
    let mut max = f64::NEG_INFINITY;
    for l in logits.iter_mut() {
        *l = l.clamp(-f64::MAX, f64::MAX);
        max = max.max(*l);
    }
    let mut sum = 0.0;
    for l in logits.iter_mut() {
        *l = (*l - max).exp();
        sum += *l;
    }
    for l in logits.iter_mut() {
        *l /= sum;
    }
}

fn checked_weights(g: &[f64], scale: f64) -> Result<Vec<f64>> {
    assert!(!g.is_empty(), "empty candidate set");
    let mut logits: Vec<f64> = g.iter().map(|x| scale * x).collect();
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(Error::NonFinite(format!(
            "exponent a*x overflows for sharpness {scale}"
        )));
    }
    stable_softmax_into(&mut logits);
    Ok(logits)
}

/// Weights `exp(a x_n) / sum_j exp(a x_j)`.
pub fn soft_argmax_weights(g: &[f64], a: f64) -> Result<Vec<f64>> {
    checked_weights(g, a)
}

/// Weights `exp(-a x_n) / sum_j exp(-a x_j)`.
pub fn soft_argmin_weights(g: &[f64], a: f64) -> Result<Vec<f64>> {
    checked_weights(g, -a)
}

fn weighted(g: &[f64], w: &[f64]) -> f64 {
    g.iter().zip(w).map(|(x, w)| x * w).sum()
}

pub fn soft_min(g: &[f64], a: f64) -> Result<f64> {
    Ok(weighted(g, &soft_argmin_weights(g, a)?))
}

pub fn soft_max(g: &[f64], a: f64) -> Result<f64> {
    Ok(weighted(g, &soft_argmax_weights(g, a)?))
}

/// Smooth `|x|` as the soft maximum of `{x, -x}`, which simplifies to `x tanh(a x)`.
#[inline]
pub fn soft_abs(x: f64, a: f64) -> f64 {
    x * (a * x).tanh()
}

/// `D_n = (1/N) sum_j |x_n - b x_j|`.
pub fn mad_profile(g: &[f64], b: f64) -> Vec<f64> {
    let n = g.len() as f64;
    g.iter()
        .map(|&xn| g.iter().map(|&xj| (xn - b * xj).abs()).sum::<f64>() / n)
        .collect()
}

/// Like [`mad_profile`] with `|.|` replaced by [`soft_abs`] at sharpness `a`.
pub fn smooth_mad_profile(g: &[f64], b: f64, a: f64) -> Vec<f64> {
    let n = g.len() as f64;
    g.iter()
        .map(|&xn| g.iter().map(|&xj| soft_abs(xn - b * xj, a)).sum::<f64>() / n)
        .collect()
}

/// `sum_n x_n softmax(-a D)_n` for a precomputed deviation profile `D`.
pub(crate) fn softmin_fuse(g: &[f64], profile: &[f64], a: f64) -> f64 {
    let mut w: Vec<f64> = profile.iter().map(|d| -a * d).collect();
    stable_softmax_into(&mut w);
    weighted(g, &w)
}

/// Soft median with exact absolute deviations.
pub fn soft_median(g: &[f64], a: f64) -> f64 {
    assert!(!g.is_empty(), "empty candidate set");
    softmin_fuse(g, &mad_profile(g, 1.0), a)
}

/// Soft median with [`soft_abs`] inside the deviation profile; smooth everywhere.
pub fn soft_median_smooth(g: &[f64], a: f64) -> f64 {
    assert!(!g.is_empty(), "empty candidate set");
    softmin_fuse(g, &smooth_mad_profile(g, 1.0, a), a)
}

/// Brute-force minimizer of the mean absolute deviation: a dense grid over
/// `[min, max]` followed by ternary refinement inside the best grid cell.
/// Returns `(argmin, MAD(argmin))`.
pub fn median_mad_oracle(g: &[f64]) -> (f64, f64) {
    assert!(!g.is_empty(), "empty candidate set");
    let lo = exact_min(g);
    let hi = exact_max(g);
    let range = hi - lo;
    if range == 0.0 {
        return (lo, 0.0);
    }
    const STEPS: usize = 10_000;
    let step = range / STEPS as f64;
    let mut best = (lo, mean_abs_deviation(g, lo));
    for i in 1..=STEPS {
        let x = if i == STEPS { hi } else { lo + step * i as f64 };
        let m = mean_abs_deviation(g, x);
        if m < best.1 {
            best = (x, m);
        }
    }
    // The objective is convex, so the true minimizer is within one cell of
    // the best grid point.
    let (mut l, mut r) = ((best.0 - step).max(lo), (best.0 + step).min(hi));
    for _ in 0..200 {
        let m1 = l + (r - l) / 3.0;
        let m2 = r - (r - l) / 3.0;
        if mean_abs_deviation(g, m1) <= mean_abs_deviation(g, m2) {
            r = m2;
        } else {
            l = m1;
        }
    }
    let x = 0.5 * (l + r);
    let m = mean_abs_deviation(g, x);
    if m <= best.1 {
        (x, m)
    } else {
        best
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StatKind {
    Min,
    Max,
    Median,
}

impl StatKind {
    pub const ALL: [StatKind; 3] = [StatKind::Min, StatKind::Max, StatKind::Median];

    /// Forward value whose derivative [`soft_stat_grad`] returns.
    pub fn evaluate(self, g: &[f64], a: f64) -> Result<f64> {
        match self {
            StatKind::Min => soft_min(g, a),
            StatKind::Max => soft_max(g, a),
            StatKind::Median => Ok(soft_median_smooth(g, a)),
        }
    }
}

impl fmt::Display for StatKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StatKind::Min => "min",
            StatKind::Max => "max",
            StatKind::Median => "median",
        })
    }
}

impl FromStr for StatKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "min" => Ok(StatKind::Min),
            "max" => Ok(StatKind::Max),
            "median" => Ok(StatKind::Median),
            other => Err(Error::UnknownKind(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StatGrad {
    pub value: f64,
    pub d_x: Vec<f64>,
    pub d_a: f64,
}

pub(crate) fn check_gradient_sharpness(a: f64) -> Result<()> {
    if !a.is_finite() || a.abs() > GRADIENT_SAFE_SHARPNESS {
        return Err(Error::InvalidArgument(format!(
            "|a| = {} exceeds the gradient-safe bound {GRADIENT_SAFE_SHARPNESS}",
            a.abs()
        )));
    }
    Ok(())
}

/// Analytic gradient of the smooth gated filter
/// `V = sum_n x_n softmax(-a D)_n`, `D_n = (1/N) sum_j soft_abs(x_n - b x_j, a)`.
/// Returns `(V, dV/dx, dV/da, dV/db)`.
pub(crate) fn gated_filter_grad(g: &[f64], a: f64, b: f64) -> (f64, Vec<f64>, f64, f64) {
    let n = g.len();
    let inv_n = 1.0 / n as f64;
    // per-pair derivatives of soft_abs(u, a): d/du and d/da
    let mut ds_du = vec![0.0; n * n];
    let mut ds_da = vec![0.0; n * n];
    let mut profile = vec![0.0; n];
    for i in 0..n {
        let mut acc = 0.0;
        for j in 0..n {
            let u = g[i] - b * g[j];
            let t = (a * u).tanh();
            let sech2 = 1.0 - t * t;
            acc += u * t;
            ds_du[i * n + j] = t + a * u * sech2;
            ds_da[i * n + j] = u * u * sech2;
        }
        profile[i] = acc * inv_n;
    }
    let mut w: Vec<f64> = profile.iter().map(|d| -a * d).collect();
    stable_softmax_into(&mut w);
    let value = weighted(g, &w);
    let r: Vec<f64> = w.iter().zip(g).map(|(w, x)| w * (x - value)).collect();

    let mut d_x = w.clone();
    for (k, dk) in d_x.iter_mut().enumerate() {
        let row: f64 = (0..n).map(|j| ds_du[k * n + j]).sum();
        let col: f64 = (0..n).map(|i| r[i] * ds_du[i * n + k]).sum();
        *dk -= a * inv_n * (r[k] * row - b * col);
    }
    let d_a = -(0..n)
        .map(|i| {
            let sa: f64 = (0..n).map(|j| ds_da[i * n + j]).sum();
            r[i] * (profile[i] + a * inv_n * sa)
        })
        .sum::<f64>();
    let d_b = a
        * inv_n
        * (0..n)
            .map(|i| r[i] * (0..n).map(|j| ds_du[i * n + j] * g[j]).sum::<f64>())
            .sum::<f64>();
    (value, d_x, d_a, d_b)
}

/// Analytic gradients of a soft statistic with respect to the candidates and
/// the sharpness. The median kind differentiates [`soft_median_smooth`].
pub fn soft_stat_grad(kind: StatKind, g: &[f64], a: f64) -> Result<StatGrad> {
    if g.is_empty() {
        return Err(Error::InvalidArgument("candidate set is empty".into()));
    }
    check_gradient_sharpness(a)?;
    match kind {
        StatKind::Min | StatKind::Max => {
            // softmax(sign * a * x), sign = -1 for min
            let sign = if kind == StatKind::Max { 1.0 } else { -1.0 };
            let w = checked_weights(g, sign * a)?;
            let value = weighted(g, &w);
            let r: Vec<f64> = w.iter().zip(g).map(|(w, x)| w * (x - value)).collect();
            let d_x = w.iter().zip(&r).map(|(w, r)| w + sign * a * r).collect();
            let d_a = sign * r.iter().zip(g).map(|(r, x)| r * x).sum::<f64>();
            Ok(StatGrad { value, d_x, d_a })
        }
        StatKind::Median => {
            let (value, d_x, d_a, _) = gated_filter_grad(g, a, 1.0);
            Ok(StatGrad { value, d_x, d_a })
        }
    }
}
