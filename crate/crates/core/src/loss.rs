//! Ranking and regression losses over a vector of predictions.
//!
//! Every loss returns its value together with the exact gradient (a
//! subgradient at hinge kinks, where the hinge is treated as inactive) with
//! respect to each prediction. Ranking losses are means over the pair set of
//! the batch; the Huber loss is a mean over samples.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pairing::{normalize_scores, PairSet};

/// Which pairwise term enters the combined objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RankingTerm {
    /// Quality-weighted hinge with margin `alpha * |y_i - y_j|`.
    #[default]
    Qamro,
    /// Unweighted hinge with the constant margin `fixed_margin`.
    FixedMargin,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    /// Scales the per-pair margin with the ground-truth gap.
    pub alpha: f64,
    /// Preference factor of the quality weight; `1.0` disables weighting.
    pub beta: f64,
    /// Margin of the fixed-margin ranking loss, in score units.
    pub fixed_margin: f64,
    /// Residual magnitude at which the Huber loss turns linear.
    pub huber_delta: f64,
    /// Weight of the ranking term relative to the Huber term.
    pub lambda_rank: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    #[serde(default)]
    pub ranking: RankingTerm,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.2,
            beta: 7.0,
            fixed_margin: 0.5,
            huber_delta: 1.0,
            lambda_rank: 1.0,
            scale_min: 1.0,
            scale_max: 5.0,
            ranking: RankingTerm::Qamro,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.alpha >= 0.0, "alpha must be >= 0"),
            (self.beta >= 1.0, "beta must be >= 1"),
            (self.fixed_margin >= 0.0, "fixed_margin must be >= 0"),
            (self.huber_delta > 0.0, "huber_delta must be > 0"),
            (self.lambda_rank >= 0.0, "lambda_rank must be >= 0"),
            (
                self.scale_min < self.scale_max,
                "scale_min must be < scale_max",
            ),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::domain(msg));
            }
        }
        let all_finite = [
            self.alpha,
            self.beta,
            self.fixed_margin,
            self.huber_delta,
            self.lambda_rank,
            self.scale_min,
            self.scale_max,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !all_finite {
            return Err(Error::domain(
                "loss configuration contains non-finite values",
            ));
        }
        Ok(())
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.scale_min + self.scale_max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    /// d(value)/d(prediction), one entry per prediction.
    pub grad: Vec<f64>,
    /// Set when the pair set was empty and the ranking term is vacuous.
    pub degenerate: bool,
}

impl LossOutput {
    fn zero(n: usize, degenerate: bool) -> Self {
        Self {
            value: 0.0,
            grad: vec![0.0; n],
            degenerate,
        }
    }
}

/// Result of [`combined_loss`] with its components kept for logging.
#[derive(Debug, Clone, PartialEq)]
pub struct CombinedOutput {
    pub total: LossOutput,
    pub huber: f64,
    /// Unweighted ranking-term value (before `lambda_rank`).
    pub ranking: f64,
}

/// Per-pair weight `1 + (beta - 1) * max(y_norm_i, y_norm_j)`.
pub fn quality_weight(y_norm_i: f64, y_norm_j: f64, beta: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&y_norm_i) || !(0.0..=1.0).contains(&y_norm_j) {
        return Err(Error::domain(format!(
            "normalized scores ({y_norm_i}, {y_norm_j}) must lie in [0, 1]"
        )));
    }
    if !(beta >= 1.0) {
        return Err(Error::domain(format!("beta = {beta} must be >= 1")));
    }
    Ok(1.0 + (beta - 1.0) * y_norm_i.max(y_norm_j))
}

fn check_shapes(y_true: &[f64], y_pred: &[f64], pairs: &PairSet) -> Result<()> {
    if y_true.len() != y_pred.len() {
        return Err(Error::domain(format!(
            "y_true has {} entries but y_pred has {}",
            y_true.len(),
            y_pred.len()
        )));
    }
    if let Some(max) = pairs.max_index() {
        if max >= y_true.len() {
            return Err(Error::domain(format!(
                "pair index {max} out of range for batch of {}",
                y_true.len()
            )));
        }
    }
    Ok(())
}

/// Shared hinge accumulation: `mean_k w_k * max(0, -s_k (p_i - p_j) + margin_k)`.
fn weighted_hinge<W, M>(y_pred: &[f64], pairs: &PairSet, weight: W, margin: M) -> LossOutput
where
    W: Fn(usize, usize) -> f64,
    M: Fn(f64) -> f64,
{
    let n = y_pred.len();
    if pairs.is_empty() {
        return LossOutput::zero(n, true);
    }
    let inv = 1.0 / pairs.len() as f64;
    let mut value = 0.0;
    let mut grad = vec![0.0; n];
    for p in pairs {
        let hinge = -p.sign * (y_pred[p.i] - y_pred[p.j]) + margin(p.gap);
        if hinge > 0.0 {
            let w = weight(p.i, p.j);
            value += w * hinge;
            let g = w * p.sign * inv;
            grad[p.i] -= g;
            grad[p.j] += g;
        }
    }
    LossOutput {
        value: value * inv,
        grad,
        degenerate: false,
    }
}

/// Fixed-margin pairwise hinge, all pairs weighted equally.
pub fn margin_ranking_loss(
    y_true: &[f64],
    y_pred: &[f64],
    pairs: &PairSet,
    margin: f64,
) -> Result<LossOutput> {
    check_shapes(y_true, y_pred, pairs)?;
    if !(margin >= 0.0) {
        return Err(Error::domain(format!("margin {margin} must be >= 0")));
    }
    Ok(weighted_hinge(y_pred, pairs, |_, _| 1.0, |_| margin))
}

/// Quality-aware adaptive-margin ranking loss.
///
/// Each pair needs a predicted separation of at least `alpha * |y_i - y_j|`
/// and violations are scaled by [`quality_weight`] of the two normalized
/// ground-truth scores.
pub fn qamro_loss(
    y_true: &[f64],
    y_pred: &[f64],
    pairs: &PairSet,
    config: &LossConfig,
) -> Result<LossOutput> {
    check_shapes(y_true, y_pred, pairs)?;
    let y_norm = normalize_scores(y_true, config.scale_min, config.scale_max)?;
    if !(config.beta >= 1.0) {
        return Err(Error::domain(format!(
            "beta = {} must be >= 1",
            config.beta
        )));
    }
    let beta_minus_one = config.beta - 1.0;
    let alpha = config.alpha;
    Ok(weighted_hinge(
        y_pred,
        pairs,
        |i, j| 1.0 + beta_minus_one * y_norm[i].max(y_norm[j]),
        |gap| alpha * gap,
    ))
}

/// Mean Huber loss of the residuals `y_pred - y_true`.
pub fn huber_loss(y_true: &[f64], y_pred: &[f64], delta: f64) -> Result<LossOutput> {
    if y_true.is_empty() || y_true.len() != y_pred.len() {
        return Err(Error::domain(format!(
            "huber loss needs equal nonzero lengths, got {} and {}",
            y_true.len(),
            y_pred.len()
        )));
    }
    if !(delta > 0.0) {
        return Err(Error::domain(format!("huber delta {delta} must be > 0")));
    }
    let inv = 1.0 / y_true.len() as f64;
    let mut value = 0.0;
    let grad = y_true
        .iter()
        .zip(y_pred)
        .map(|(&t, &p)| {
            let r = p - t;
            if r.abs() <= delta {
                value += 0.5 * r * r;
                r * inv
            } else {
                value += delta * (r.abs() - 0.5 * delta);
                delta * r.signum() * inv
            }
        })
        .collect();
    Ok(LossOutput {
        value: value * inv,
        grad,
        degenerate: false,
    })
}

/// `huber + lambda_rank * ranking`, where the ranking term is selected by
/// [`LossConfig::ranking`].
pub fn combined_loss(
    y_true: &[f64],
    y_pred: &[f64],
    pairs: &PairSet,
    config: &LossConfig,
) -> Result<CombinedOutput> {
    let huber = huber_loss(y_true, y_pred, config.huber_delta)?;
    let ranking = match config.ranking {
        RankingTerm::Qamro => qamro_loss(y_true, y_pred, pairs, config)?,
        RankingTerm::FixedMargin => {
            margin_ranking_loss(y_true, y_pred, pairs, config.fixed_margin)?
        }
    };
    let lambda = config.lambda_rank;
    let mut total = huber.clone();
    if lambda != 0.0 {
        total.value += lambda * ranking.value;
        for (g, r) in total.grad.iter_mut().zip(&ranking.grad) {
            *g += lambda * r;
        }
    }
    total.degenerate = ranking.degenerate;
    Ok(CombinedOutput {
        total,
        huber: huber.value,
        ranking: ranking.value,
    })
}
