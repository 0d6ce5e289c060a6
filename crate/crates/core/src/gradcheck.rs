//! Analytic-versus-numerical gradient verification for the losses.
//!
//! Random batches are drawn, rejected while any hinge argument or Huber
//! residual sits within `kink_distance` of a non-differentiable point, and the
//! analytic gradient is compared to central finite differences.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::loss::{
    combined_loss, huber_loss, margin_ranking_loss, qamro_loss, LossConfig, LossOutput, RankingTerm,
};
use crate::pairing::{build_pair_set, PairSet, DEFAULT_TIE_TOLERANCE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Mr,
    Qamro,
    Huber,
    Combined,
}

impl LossKind {
    pub const ALL: [LossKind; 4] = [
        LossKind::Mr,
        LossKind::Qamro,
        LossKind::Huber,
        LossKind::Combined,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Mr => "mr",
            LossKind::Qamro => "qamro",
            LossKind::Huber => "huber",
            LossKind::Combined => "combined",
        }
    }

    fn evaluate(
        self,
        y_true: &[f64],
        y_pred: &[f64],
        pairs: &PairSet,
        cfg: &LossConfig,
    ) -> Result<LossOutput> {
        match self {
            LossKind::Mr => margin_ranking_loss(y_true, y_pred, pairs, cfg.fixed_margin),
            LossKind::Qamro => qamro_loss(y_true, y_pred, pairs, cfg),
            LossKind::Huber => huber_loss(y_true, y_pred, cfg.huber_delta),
            LossKind::Combined => Ok(combined_loss(y_true, y_pred, pairs, cfg)?.total),
        }
    }

    /// Smallest distance from a non-differentiable point of this loss.
    fn kink_distance(
        self,
        y_true: &[f64],
        y_pred: &[f64],
        pairs: &PairSet,
        cfg: &LossConfig,
    ) -> f64 {
        let hinge = |margin: &dyn Fn(f64) -> f64| {
            pairs
                .iter()
                .map(|p| (-p.sign * (y_pred[p.i] - y_pred[p.j]) + margin(p.gap)).abs())
                .fold(f64::INFINITY, f64::min)
        };
        let huber = || {
            y_true
                .iter()
                .zip(y_pred)
                .map(|(t, p)| ((p - t).abs() - cfg.huber_delta).abs())
                .fold(f64::INFINITY, f64::min)
        };
        match self {
            LossKind::Mr => hinge(&|_| cfg.fixed_margin),
            LossKind::Qamro => hinge(&|gap| cfg.alpha * gap),
            LossKind::Huber => huber(),
            LossKind::Combined => {
                let rank = match cfg.ranking {
                    RankingTerm::Qamro => hinge(&|gap| cfg.alpha * gap),
                    RankingTerm::FixedMargin => hinge(&|_| cfg.fixed_margin),
                };
                rank.min(huber())
            }
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                Error::domain(format!(
                    "unknown loss {s:?}; expected mr, qamro, huber or combined"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Maximum accepted relative error.
    pub tolerance: f64,
    /// Minimum distance of every hinge argument / Huber residual from its kink.
    pub kink_distance: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-5,
            kink_distance: 1e-3,
        }
    }
}

/// One sampled configuration whose gradients disagreed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckFailure {
    pub trial: usize,
    pub rel_error: f64,
    pub y_true: Vec<f64>,
    pub y_pred: Vec<f64>,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub alpha: f64,
    pub beta: f64,
    pub fixed_margin: f64,
    pub huber_delta: f64,
    pub lambda_rank: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub loss: LossKind,
    pub trials: usize,
    pub max_rel_error: f64,
    pub failures: Vec<GradCheckFailure>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// `||a - b|| / max(||a||, ||b||)`, zero when both vectors vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, b)| a - b));
    let scale = norm(&mut analytic.iter().copied()).max(norm(&mut numeric.iter().copied()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Central finite-difference gradient of `f` at `x`.
pub fn numeric_gradient<F>(x: &[f64], step: f64, mut f: F) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for k in 0..x.len() {
        probe[k] = x[k] + step;
        let plus = f(&probe)?;
        probe[k] = x[k] - step;
        let minus = f(&probe)?;
        probe[k] = x[k];
        grad.push((plus - minus) / (2.0 * step));
    }
    Ok(grad)
}

fn sample_config(rng: &mut ChaCha8Rng, kind: LossKind) -> LossConfig {
    LossConfig {
        alpha: rng.random_range(0.0..0.5),
        beta: rng.random_range(1.0..10.0),
        fixed_margin: rng.random_range(0.0..1.0),
        huber_delta: rng.random_range(0.2..2.0),
        lambda_rank: rng.random_range(0.0..2.0),
        ranking: if kind == LossKind::Combined && rng.random_bool(0.5) {
            RankingTerm::FixedMargin
        } else {
            RankingTerm::Qamro
        },
        ..LossConfig::default()
    }
}

const MAX_REDRAWS: usize = 10_000;

/// Runs `trials` randomized gradient checks of one loss.
pub fn grad_check(
    kind: LossKind,
    trials: usize,
    seed: u64,
    check: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        loss: kind,
        trials,
        max_rel_error: 0.0,
        failures: Vec::new(),
    };
    for trial in 0..trials {
        let cfg = sample_config(&mut rng, kind);
        let n = rng.random_range(2..=10);
        // quarter-point grid so some batches contain tied ratings
        let y_true: Vec<f64> = (0..n)
            .map(|_| (rng.random_range(cfg.scale_min..=cfg.scale_max) * 4.0).round() / 4.0)
            .collect();
        let pairs = build_pair_set(&y_true, DEFAULT_TIE_TOLERANCE);
        let mut y_pred: Vec<f64> = Vec::new();
        let mut redraws = 0;
        loop {
            y_pred.clear();
            y_pred.extend((0..n).map(|_| rng.random_range(0.0..6.0)));
            if kind.kink_distance(&y_true, &y_pred, &pairs, &cfg) > check.kink_distance {
                break;
            }
            redraws += 1;
            if redraws >= MAX_REDRAWS {
                return Err(Error::domain(format!(
                    "trial {trial}: could not sample predictions away from loss kinks"
                )));
            }
        }
        let analytic = kind.evaluate(&y_true, &y_pred, &pairs, &cfg)?.grad;
        let numeric = numeric_gradient(&y_pred, check.step, |p| {
            Ok(kind.evaluate(&y_true, p, &pairs, &cfg)?.value)
        })?;
        let rel = relative_error(&analytic, &numeric);
        report.max_rel_error = report.max_rel_error.max(rel);
        if !(rel < check.tolerance) {
            report.failures.push(GradCheckFailure {
                trial,
                rel_error: rel,
                y_true,
                y_pred,
                analytic,
                numeric,
                alpha: cfg.alpha,
                beta: cfg.beta,
                fixed_margin: cfg.fixed_margin,
                huber_delta: cfg.huber_delta,
                lambda_rank: cfg.lambda_rank,
            });
        }
    }
    Ok(report)
}
