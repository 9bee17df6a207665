//! Central finite-difference checks of the analytic soft-statistic and DSF
//! gradients.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dsf::{dsf_grad, dsf_scalar_smooth, DsfGrad};
use crate::error::{Error, Result};
use crate::smooth_stats::{soft_stat_grad, StatGrad, StatKind};

/// Relative errors use `max(|analytic|, |numeric|, REL_ERROR_FLOOR)` as the
/// denominator so that components that vanish analytically are compared on
/// an absolute scale instead of dividing round-off by round-off.
pub const REL_ERROR_FLOOR: f64 = 1e-3;

/// Supplies the gradients under test. [`Analytic`] is the library
/// implementation; tests substitute faulty sources to make sure the harness
/// catches them.
pub trait GradientSource {
    fn stat_grad(&self, kind: StatKind, g: &[f64], a: f64) -> Result<StatGrad>;
    fn dsf_grad(&self, g: &[f64], a: f64, b: f64) -> Result<DsfGrad>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Analytic;

impl GradientSource for Analytic {
    fn stat_grad(&self, kind: StatKind, g: &[f64], a: f64) -> Result<StatGrad> {
        soft_stat_grad(kind, g, a)
    }

    fn dsf_grad(&self, g: &[f64], a: f64, b: f64) -> Result<DsfGrad> {
        dsf_grad(g, a, b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub trials: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Sharpness is drawn uniformly from `[-max_sharpness, max_sharpness]`.
    pub max_sharpness: f64,
    pub min_candidates: usize,
    pub max_candidates: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            trials: 200,
            step: 1e-5,
            tolerance: 1e-4,
            max_sharpness: 20.0,
            min_candidates: 3,
            max_candidates: 9,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckedKind {
    Stat(StatKind),
    Dsf,
}

impl fmt::Display for CheckedKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckedKind::Stat(k) => write!(f, "soft_{k}"),
            CheckedKind::Dsf => f.write_str("dsf"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KindReport {
    pub kind: CheckedKind,
    pub trials: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub kinds: Vec<KindReport>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.kinds.iter().all(|k| k.passed)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
    (analytic - numeric).abs() / denom
}

fn central<F: Fn(f64) -> Result<f64>>(f: F, x: f64, h: f64) -> Result<f64> {
    Ok((f(x + h)? - f(x - h)?) / (2.0 * h))
}

fn perturbed(g: &[f64], k: usize, d: f64) -> Vec<f64> {
    let mut p = g.to_vec();
    p[k] += d;
    p
}

fn check_stat(
    source: &dyn GradientSource,
    kind: StatKind,
    g: &[f64],
    a: f64,
    h: f64,
) -> Result<f64> {
    let analytic = source.stat_grad(kind, g, a)?;
    let mut worst = 0.0f64;
    for k in 0..g.len() {
        let fd = central(|d| kind.evaluate(&perturbed(g, k, d), a), 0.0, h)?;
        worst = worst.max(relative_error(analytic.d_x[k], fd));
    }
    let fd = central(|s| kind.evaluate(g, s), a, h)?;
    Ok(worst.max(relative_error(analytic.d_a, fd)))
}

fn check_dsf(source: &dyn GradientSource, g: &[f64], a: f64, b: f64, h: f64) -> Result<f64> {
    let analytic = source.dsf_grad(g, a, b)?;
    let mut worst = 0.0f64;
    for k in 0..g.len() {
        let fd = central(|d| Ok(dsf_scalar_smooth(&perturbed(g, k, d), a, b)), 0.0, h)?;
        worst = worst.max(relative_error(analytic.d_x[k], fd));
    }
    let fd_a = central(|s| Ok(dsf_scalar_smooth(g, s, b)), a, h)?;
    let fd_b = central(|s| Ok(dsf_scalar_smooth(g, a, s)), b, h)?;
    Ok(worst
        .max(relative_error(analytic.d_a, fd_a))
        .max(relative_error(analytic.d_b, fd_b)))
}

/// Runs `cfg.trials` random instances for each of soft min, soft max, soft
/// median and the DSF, reporting the worst relative error per kind.
pub fn run_gradcheck(cfg: &GradCheckConfig, source: &dyn GradientSource) -> Result<GradCheckReport> {
    if cfg.trials == 0 {
        return Err(Error::InvalidArgument("no trials".into()));
    }
    if cfg.min_candidates == 0 || cfg.min_candidates > cfg.max_candidates {
        return Err(Error::InvalidArgument(format!(
            "candidate count range {}..={} is empty",
            cfg.min_candidates, cfg.max_candidates
        )));
    }
    let kinds = [
        CheckedKind::Stat(StatKind::Min),
        CheckedKind::Stat(StatKind::Max),
        CheckedKind::Stat(StatKind::Median),
        CheckedKind::Dsf,
    ];
    let mut reports = Vec::with_capacity(kinds.len());
    for (ki, kind) in kinds.into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(ki as u64));
        let mut max_rel_error = 0.0f64;
        for _ in 0..cfg.trials {
            let n = rng.gen_range(cfg.min_candidates..=cfg.max_candidates);
            let g: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
            let a = rng.gen_range(-cfg.max_sharpness..=cfg.max_sharpness);
            let err = match kind {
                CheckedKind::Stat(k) => check_stat(source, k, &g, a, cfg.step)?,
                CheckedKind::Dsf => {
                    let b = rng.gen_range(0.0..=1.5);
                    check_dsf(source, &g, a, b, cfg.step)?
                }
            };
            max_rel_error = max_rel_error.max(err);
        }
        reports.push(KindReport {
            kind,
            trials: cfg.trials,
            max_rel_error,
            passed: max_rel_error < cfg.tolerance,
        });
    }
    Ok(GradCheckReport { kinds: reports })
}
