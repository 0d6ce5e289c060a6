//! Training runs, the loss ablation grid and the preference-factor sweep.
//!
//! Independent runs may execute on a thread pool; every run is itself
//! single-threaded and seeded, and results are always emitted in a canonical
//! order so output files do not depend on scheduling.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::data::{
    dimension_names, feature_matrix, score_vectors, split_dataset, RatedSample, RatingScale,
};
use crate::error::{Error, Result};
use crate::loss::{LossConfig, RankingTerm};
use crate::metrics::{system_level_metrics, DimensionMetrics, MetricsReport};
use crate::regressor::{train, Batch, Regressor, TrainLog};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Full objective: quality weighting and adaptive margin.
    Qamro,
    /// Adaptive margin only (`beta = 1`).
    NoWeighting,
    /// Fixed-margin ranking loss, no weighting.
    FixedMargin,
    /// Huber regression alone (`lambda_rank = 0`).
    RegressionOnly,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Qamro,
        Variant::NoWeighting,
        Variant::FixedMargin,
        Variant::RegressionOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Qamro => "qamro",
            Variant::NoWeighting => "no_weighting",
            Variant::FixedMargin => "fixed_margin",
            Variant::RegressionOnly => "regression_only",
        }
    }

    /// Loss configuration of this variant derived from the full objective's.
    pub fn apply(self, base: &LossConfig) -> LossConfig {
        let mut cfg = LossConfig {
            ranking: RankingTerm::Qamro,
            ..*base
        };
        match self {
            Variant::Qamro => {}
            Variant::NoWeighting => cfg.beta = 1.0,
            Variant::FixedMargin => {
                cfg.beta = 1.0;
                cfg.ranking = RankingTerm::FixedMargin;
            }
            Variant::RegressionOnly => cfg.lambda_rank = 0.0,
        }
        cfg
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::domain(format!("unknown variant {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrainSummary {
    pub best_epoch: usize,
    pub stopped_epoch: usize,
    pub best_val_loss: f64,
}

impl From<&TrainLog> for TrainSummary {
    fn from(log: &TrainLog) -> Self {
        Self {
            best_epoch: log.best_epoch,
            stopped_epoch: log.stopped_epoch,
            best_val_loss: log.best_val_loss().unwrap_or(f64::NAN),
        }
    }
}

/// A trained model with its log and validation-split metrics.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub regressor: Regressor,
    pub log: TrainLog,
    pub report: MetricsReport,
}

/// Owned feature matrix and targets of a sample set, ordered by `dims`.
struct Tensors {
    features: ndarray::Array2<f64>,
    targets: Vec<Vec<f64>>,
}

impl Tensors {
    fn new(samples: &[RatedSample], dims: &[String]) -> Self {
        Self {
            features: feature_matrix(samples),
            targets: score_vectors(samples, dims),
        }
    }

    fn batch(&self) -> Result<Batch<'_>> {
        Batch::new(self.features.view(), &self.targets)
    }
}

/// System-level metrics of a model on a sample set, one entry per head.
/// Predictions are clamped to the rating scale before aggregation.
pub fn evaluate(
    reg: &Regressor,
    samples: &[RatedSample],
    scale: RatingScale,
) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::domain("cannot evaluate on an empty dataset"));
    }
    let dims = dimension_names(samples);
    for head in reg.head_names() {
        if !dims.iter().any(|d| d == head) {
            return Err(Error::domain(format!(
                "dataset has no scores for head {head:?}"
            )));
        }
    }
    let preds = reg.forward(feature_matrix(samples).view())?;
    let systems: Vec<&str> = samples.iter().map(|s| s.system_id.as_str()).collect();
    let mut per_dimension = Vec::with_capacity(reg.heads.len());
    let mut n_systems = 0;
    for (head, pred) in reg.heads.iter().zip(&preds) {
        let truth: Vec<f64> = samples.iter().map(|s| s.scores[&head.name]).collect();
        let pred = pred.as_slice().expect("contiguous predictions");
        let (m, n) = system_level_metrics(&systems, &truth, pred, Some((scale.min, scale.max)))?;
        per_dimension.push((head.name.clone(), m));
        n_systems = n;
    }
    Ok(MetricsReport {
        per_dimension,
        n_systems,
    })
}

/// Clip-level metrics (no system aggregation), for debugging only.
pub fn evaluate_clip_level(
    reg: &Regressor,
    samples: &[RatedSample],
    scale: RatingScale,
) -> Result<Vec<(String, DimensionMetrics)>> {
    let preds = reg.forward(feature_matrix(samples).view())?;
    reg.heads
        .iter()
        .zip(&preds)
        .map(|(head, pred)| {
            let truth: Vec<f64> = samples.iter().map(|s| s.scores[&head.name]).collect();
            let pred: Vec<f64> = pred.iter().map(|p| p.clamp(scale.min, scale.max)).collect();
            Ok((head.name.clone(), DimensionMetrics::compute(&truth, &pred)?))
        })
        .collect()
}

/// Splits, trains one model and evaluates it on the validation split.
pub fn run_single(samples: &[RatedSample], cfg: &ExperimentConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::domain("empty dataset"));
    }
    let dims = dimension_names(samples);
    let (train_set, val_set) = split_dataset(
        samples,
        cfg.val_fraction,
        cfg.train.seed,
        cfg.by_system_split,
    )?;
    let input_dim = samples[0].features.len();
    let reg = Regressor::new(
        input_dim,
        &dims,
        cfg.hidden_dims,
        cfg.scale().midpoint(),
        cfg.train.seed,
    )?;
    let tr = Tensors::new(&train_set, &dims);
    let va = Tensors::new(&val_set, &dims);
    let (regressor, log) = train(reg, &tr.batch()?, &va.batch()?, &cfg.train)?;
    let report = evaluate(&regressor, &val_set, cfg.scale())?;
    Ok(RunOutcome {
        regressor,
        log,
        report,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentResult {
    pub variant: Variant,
    pub seed: u64,
    pub report: MetricsReport,
    pub summary: TrainSummary,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepResult {
    pub beta: f64,
    pub seed: u64,
    pub report: MetricsReport,
    pub summary: TrainSummary,
}

fn with_pool<T: Send>(threads: usize, job: impl FnOnce() -> T + Send) -> Result<T> {
    if threads == 0 {
        return Ok(job());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::domain(format!("thread pool: {e}")))?;
    Ok(pool.install(job))
}

/// Trains every ablation variant for every seed. Results are ordered by
/// variant, then seed. `threads = 0` uses the global pool.
pub fn run_ablation(
    samples: &[RatedSample],
    base: &ExperimentConfig,
    seeds: &[u64],
    threads: usize,
) -> Result<Vec<ExperimentResult>> {
    if seeds.is_empty() {
        return Err(Error::domain("at least one seed is required"));
    }
    let jobs: Vec<(Variant, u64)> = Variant::ALL
        .iter()
        .flat_map(|&v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    let results = with_pool(threads, || {
        jobs.par_iter()
            .map(|&(variant, seed)| {
                let mut cfg = base.with_seed(seed);
                cfg.train.loss = variant.apply(&base.train.loss);
                let out = run_single(samples, &cfg)?;
                log::info!("{variant} seed {seed}: best epoch {}", out.log.best_epoch);
                Ok(ExperimentResult {
                    variant,
                    seed,
                    summary: TrainSummary::from(&out.log),
                    report: out.report,
                })
            })
            .collect::<Result<Vec<_>>>()
    })??;
    Ok(results)
}

/// Trains the full objective for every `(beta, seed)`; ordered by the
/// requested beta order, then seed.
pub fn run_beta_sweep(
    samples: &[RatedSample],
    base: &ExperimentConfig,
    betas: &[f64],
    seeds: &[u64],
    threads: usize,
) -> Result<Vec<SweepResult>> {
    if seeds.is_empty() || betas.is_empty() {
        return Err(Error::domain("at least one beta and one seed are required"));
    }
    if let Some(b) = betas.iter().find(|b| !(**b >= 1.0)) {
        return Err(Error::domain(format!("beta {b} must be >= 1")));
    }
    let jobs: Vec<(f64, u64)> = betas
        .iter()
        .flat_map(|&b| seeds.iter().map(move |&s| (b, s)))
        .collect();
    with_pool(threads, || {
        jobs.par_iter()
            .map(|&(beta, seed)| {
                let mut cfg = base.with_seed(seed);
                cfg.train.loss = LossConfig {
                    beta,
                    ranking: RankingTerm::Qamro,
                    ..base.train.loss
                };
                let out = run_single(samples, &cfg)?;
                Ok(SweepResult {
                    beta,
                    seed,
                    summary: TrainSummary::from(&out.log),
                    report: out.report,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?
}

/// Median of a nonempty slice (mean of the two middle values for even length).
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    })
}

fn metric_of(report: &MetricsReport, dimension: &str, metric: &str) -> Option<f64> {
    report.dimension(dimension).and_then(|m| m.get(metric))
}

/// Median of one metric over the seeds of one ablation variant.
pub fn ablation_median(
    results: &[ExperimentResult],
    variant: Variant,
    dimension: &str,
    metric: &str,
) -> Option<f64> {
    let values: Vec<f64> = results
        .iter()
        .filter(|r| r.variant == variant)
        .filter_map(|r| metric_of(&r.report, dimension, metric))
        .collect();
    median(&values)
}

/// Median of one metric over the seeds of one beta value.
pub fn sweep_median(
    results: &[SweepResult],
    beta: f64,
    dimension: &str,
    metric: &str,
) -> Option<f64> {
    let values: Vec<f64> = results
        .iter()
        .filter(|r| r.beta == beta)
        .filter_map(|r| metric_of(&r.report, dimension, metric))
        .collect();
    median(&values)
}

pub const ABLATION_HEADER: [&str; 8] = [
    "variant",
    "seed",
    "dimension",
    "metric",
    "value",
    "n_systems",
    "best_epoch",
    "stopped_epoch",
];

pub const SWEEP_HEADER: [&str; 8] = [
    "beta",
    "seed",
    "dimension",
    "metric",
    "value",
    "n_systems",
    "best_epoch",
    "stopped_epoch",
];

fn metric_rows<'a>(
    report: &'a MetricsReport,
    summary: &'a TrainSummary,
) -> impl Iterator<Item = [String; 6]> + 'a {
    report.per_dimension.iter().flat_map(move |(dim, m)| {
        m.entries().into_iter().map(move |(metric, value)| {
            [
                dim.clone(),
                metric.to_string(),
                value.to_string(),
                report.n_systems.to_string(),
                summary.best_epoch.to_string(),
                summary.stopped_epoch.to_string(),
            ]
        })
    })
}

/// One row per (variant, seed, dimension, metric).
pub fn write_ablation_csv<W: Write>(results: &[ExperimentResult], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(ABLATION_HEADER)?;
    for r in results {
        for row in metric_rows(&r.report, &r.summary) {
            w.write_record(
                [r.variant.name().to_string(), r.seed.to_string()]
                    .iter()
                    .chain(&row),
            )?;
        }
    }
    w.flush().map_err(|e| Error::io("<csv>", e))
}

/// One row per (beta, seed, dimension, metric).
pub fn write_sweep_csv<W: Write>(results: &[SweepResult], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(SWEEP_HEADER)?;
    for r in results {
        for row in metric_rows(&r.report, &r.summary) {
            w.write_record([r.beta.to_string(), r.seed.to_string()].iter().chain(&row))?;
        }
    }
    w.flush().map_err(|e| Error::io("<csv>", e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SynthSpec};
    use crate::regressor::TrainConfig;

    fn tiny() -> (Vec<RatedSample>, ExperimentConfig) {
        let samples = generate_synthetic(&SynthSpec {
            n_systems: 5,
            clips_per_system: 8,
            feature_dim: 4,
            ..Default::default()
        })
        .unwrap()
        .samples;
        let base = ExperimentConfig::default();
        let cfg = ExperimentConfig {
            hidden_dims: [6, 4],
            val_fraction: 0.25,
            train: TrainConfig {
                max_epochs: 5,
                batch_size: 16,
                learning_rate: 0.01,
                ..base.train
            },
            ..base
        };
        (samples, cfg)
    }

    #[test]
    fn variants_map_to_loss_presets() {
        let base = LossConfig::default();
        assert_eq!(Variant::Qamro.apply(&base), base);
        assert_eq!(Variant::NoWeighting.apply(&base).beta, 1.0);
        let fm = Variant::FixedMargin.apply(&base);
        assert_eq!((fm.beta, fm.ranking), (1.0, RankingTerm::FixedMargin));
        assert_eq!(Variant::RegressionOnly.apply(&base).lambda_rank, 0.0);
        assert_eq!(
            "no_weighting".parse::<Variant>().unwrap(),
            Variant::NoWeighting
        );
    }

    #[test]
    fn ablation_row_count() {
        let (samples, cfg) = tiny();
        let results = run_ablation(&samples, &cfg, &[3], 0).unwrap();
        assert_eq!(results.len(), 4);
        let mut buf = Vec::new();
        write_ablation_csv(&results, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + 4 * 2 * 4);
    }

    #[test]
    fn no_weighting_equals_full_run_with_beta_one() {
        let (samples, cfg) = tiny();
        let results = run_ablation(&samples, &cfg, &[2], 0).unwrap();
        let mut beta_one = cfg.with_seed(2);
        beta_one.train.loss.beta = 1.0;
        let direct = run_single(&samples, &beta_one).unwrap();
        let nw = results
            .iter()
            .find(|r| r.variant == Variant::NoWeighting)
            .unwrap();
        assert_eq!(nw.report, direct.report);
    }

    #[test]
    fn sweep_echoes_betas() {
        let (samples, cfg) = tiny();
        let betas = [1.0, 3.0, 5.0, 7.0, 9.0];
        let results = run_beta_sweep(&samples, &cfg, &betas, &[0], 0).unwrap();
        let got: Vec<f64> = results.iter().map(|r| r.beta).collect();
        assert_eq!(got, betas);
        let mut buf = Vec::new();
        write_sweep_csv(&results, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let srcc_rows = text.lines().filter(|l| l.contains(",MI,srcc,")).count();
        assert_eq!(srcc_rows, 5);
        assert!(run_beta_sweep(&samples, &cfg, &[0.5], &[0], 0).is_err());
    }

    #[test]
    fn median_examples() {
        assert_eq!(median(&[]), None);
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
    }
}
