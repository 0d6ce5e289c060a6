//! System-level evaluation.
//!
//! Clip predictions are first averaged per generating system; MSE and the
//! three correlation coefficients are then computed between the per-system
//! predicted and ground-truth means.

use std::collections::BTreeMap;
use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};

/// Per-system mean of predicted and ground-truth scores.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SystemAggregate {
    pub system_id: String,
    pub mean_pred: f64,
    pub mean_true: f64,
    pub clip_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DimensionMetrics {
    pub mse: f64,
    pub lcc: f64,
    pub srcc: f64,
    pub ktau: f64,
}

impl DimensionMetrics {
    pub const NAMES: [&'static str; 4] = ["mse", "lcc", "srcc", "ktau"];

    /// `(name, value)` in the fixed report order.
    pub fn entries(&self) -> [(&'static str, f64); 4] {
        [
            ("mse", self.mse),
            ("lcc", self.lcc),
            ("srcc", self.srcc),
            ("ktau", self.ktau),
        ]
    }

    pub fn get(&self, metric: &str) -> Option<f64> {
        self.entries()
            .into_iter()
            .find(|(name, _)| *name == metric)
            .map(|(_, v)| v)
    }

    /// All four metrics computed directly on paired vectors.
    pub fn compute(truth: &[f64], pred: &[f64]) -> Result<Self> {
        Ok(Self {
            mse: mse(truth, pred)?,
            lcc: lcc(truth, pred)?,
            srcc: srcc(truth, pred)?,
            ktau: ktau(truth, pred)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    /// Dimension name and its metrics, in head order.
    pub per_dimension: Vec<(String, DimensionMetrics)>,
    pub n_systems: usize,
}

impl MetricsReport {
    pub fn dimension(&self, name: &str) -> Option<&DimensionMetrics> {
        self.per_dimension
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
    }

    /// Writes `dimension,metric,value,n_systems`, one row per metric.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["dimension", "metric", "value", "n_systems"])?;
        for (dim, m) in &self.per_dimension {
            for (metric, value) in m.entries() {
                w.write_record([
                    dim.as_str(),
                    metric,
                    &value.to_string(),
                    &self.n_systems.to_string(),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

/// Groups clips by system and averages their scores. Output is sorted by
/// system id, so it does not depend on clip order.
pub fn aggregate_by_system<S: AsRef<str>>(clips: &[(S, f64, f64)]) -> Result<Vec<SystemAggregate>> {
    if clips.is_empty() {
        return Err(Error::domain("cannot aggregate an empty set of clips"));
    }
    let mut groups: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();
    for (sys, t, p) in clips {
        groups.entry(sys.as_ref()).or_default().push((*t, *p));
    }
    Ok(groups
        .into_iter()
        .map(|(sys, mut scores)| {
            // fixed summation order regardless of clip order
            scores.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
            let n = scores.len() as f64;
            SystemAggregate {
                system_id: sys.to_string(),
                mean_true: scores.iter().map(|s| s.0).sum::<f64>() / n,
                mean_pred: scores.iter().map(|s| s.1).sum::<f64>() / n,
                clip_count: scores.len(),
            }
        })
        .collect())
}

/// System-level metrics for one score dimension.
///
/// When `clamp` is given, clip predictions are clipped to that rating range
/// before aggregation.
pub fn system_level_metrics<S: AsRef<str>>(
    system_ids: &[S],
    y_true: &[f64],
    y_pred: &[f64],
    clamp: Option<(f64, f64)>,
) -> Result<(DimensionMetrics, usize)> {
    if system_ids.len() != y_true.len() || y_true.len() != y_pred.len() {
        return Err(Error::domain(
            "system ids, truths and predictions differ in length",
        ));
    }
    let clips: Vec<(&str, f64, f64)> = system_ids
        .iter()
        .zip(y_true.iter().zip(y_pred))
        .map(|(s, (&t, &p))| {
            let p = match clamp {
                Some((lo, hi)) => p.clamp(lo, hi),
                None => p,
            };
            (s.as_ref(), t, p)
        })
        .collect();
    let systems = aggregate_by_system(&clips)?;
    let truth: Vec<f64> = systems.iter().map(|s| s.mean_true).collect();
    let pred: Vec<f64> = systems.iter().map(|s| s.mean_pred).collect();
    Ok((DimensionMetrics::compute(&truth, &pred)?, systems.len()))
}

fn check_pair(a: &[f64], b: &[f64], min_len: usize) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::domain(format!(
            "length mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < min_len {
        return Err(Error::domain(format!(
            "need at least {min_len} values, got {}",
            a.len()
        )));
    }
    Ok(())
}

fn check_not_constant(a: &[f64], b: &[f64]) -> Result<()> {
    for (name, v) in [("first", a), ("second", b)] {
        if v.iter().all(|&x| x == v[0]) {
            return Err(Error::UndefinedCorrelation(format!(
                "{name} argument is constant"
            )));
        }
    }
    Ok(())
}

pub fn mse(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair(a, b, 1)?;
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

fn pearson_unchecked(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    (sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0)
}

/// Pearson linear correlation coefficient.
pub fn lcc(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair(a, b, 2)?;
    check_not_constant(a, b)?;
    Ok(pearson_unchecked(a, b))
}

/// 1-based fractional ranks; tied values share the mean of their ranks.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // positions start..end hold ranks start+1..=end
        let rank = (start + 1 + end) as f64 / 2.0;
        for &k in &order[start..end] {
            ranks[k] = rank;
        }
        start = end;
    }
    ranks
}

/// Spearman rank correlation: Pearson correlation of average ranks.
pub fn srcc(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair(a, b, 2)?;
    check_not_constant(a, b)?;
    Ok(pearson_unchecked(&average_ranks(a), &average_ranks(b)))
}

/// Number of tied pairs `sum t(t-1)/2` over runs of equal keys in a sorted sequence.
fn tied_pairs<T: PartialEq>(sorted: &[T]) -> u64 {
    let mut total = 0u64;
    let mut run = 1u64;
    for w in sorted.windows(2) {
        if w[0] == w[1] {
            run += 1;
        } else {
            total += run * (run - 1) / 2;
            run = 1;
        }
    }
    total + run * (run - 1) / 2
}

/// Stable merge sort that returns the number of strict inversions.
fn merge_sort_count(v: &mut [f64], buf: &mut Vec<f64>) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = merge_sort_count(&mut v[..mid], buf) + merge_sort_count(&mut v[mid..], buf);
    buf.clear();
    let (mut i, mut j) = (0, mid);
    while i < mid && j < n {
        if v[j] < v[i] {
            swaps += (mid - i) as u64;
            buf.push(v[j]);
            j += 1;
        } else {
            buf.push(v[i]);
            i += 1;
        }
    }
    buf.extend_from_slice(&v[i..mid]);
    buf.extend_from_slice(&v[j..n]);
    v.copy_from_slice(buf);
    swaps
}

/// Kendall rank correlation, tau-b variant, in O(n log n).
pub fn ktau(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair(a, b, 2)?;
    check_not_constant(a, b)?;
    let n = a.len() as u64;
    let n0 = n * (n - 1) / 2;

    let mut order: Vec<usize> = (0..a.len()).collect();
    order.sort_by(|&i, &j| a[i].total_cmp(&a[j]).then(b[i].total_cmp(&b[j])));
    let a_sorted: Vec<f64> = order.iter().map(|&k| a[k]).collect();
    let joint: Vec<(f64, f64)> = order.iter().map(|&k| (a[k], b[k])).collect();
    let ties_a = tied_pairs(&a_sorted);
    let ties_joint = tied_pairs(&joint);

    let mut b_sorted: Vec<f64> = order.iter().map(|&k| b[k]).collect();
    let discordant = merge_sort_count(&mut b_sorted, &mut Vec::with_capacity(a.len()));
    let ties_b = tied_pairs(&b_sorted);

    let numer =
        n0 as f64 - ties_a as f64 - ties_b as f64 + ties_joint as f64 - 2.0 * discordant as f64;
    let denom = ((n0 - ties_a) as f64 * (n0 - ties_b) as f64).sqrt();
    Ok((numer / denom).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mse_examples() {
        assert_eq!(mse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mse(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(mse(&[1.0, 2.0, 3.0], &[1.5, 2.5, 2.0]).unwrap(), 0.5);
        assert!(mse(&[1.0], &[1.0, 2.0]).is_err());
        assert!(mse(&[], &[]).is_err());
    }

    #[test]
    fn lcc_examples() {
        let a = [0.3, 1.2, -0.7, 2.5, 0.0];
        let affine: Vec<f64> = a.iter().map(|x| 2.0 * x + 1.0).collect();
        let neg: Vec<f64> = a.iter().map(|x| -x).collect();
        assert!((lcc(&a, &affine).unwrap() - 1.0).abs() < 1e-12);
        assert!((lcc(&a, &neg).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_vectors_are_undefined() {
        for f in [lcc, srcc, ktau] {
            let err = f(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).unwrap_err();
            assert!(matches!(err, Error::UndefinedCorrelation(_)));
            let err = f(&[1.0, 2.0, 3.0], &[0.1, 0.1, 0.1]).unwrap_err();
            assert!(matches!(err, Error::UndefinedCorrelation(_)));
            assert!(matches!(f(&[1.0], &[2.0]).unwrap_err(), Error::Domain(_)));
        }
    }

    #[test]
    fn average_ranks_handles_ties() {
        assert_eq!(
            average_ranks(&[1.0, 2.0, 2.0, 3.0]),
            vec![1.0, 2.5, 2.5, 4.0]
        );
        assert_eq!(average_ranks(&[5.0, 5.0, 5.0]), vec![2.0, 2.0, 2.0]);
        assert_eq!(average_ranks(&[3.0, 1.0, 2.0]), vec![3.0, 1.0, 2.0]);
    }

    #[test]
    fn srcc_examples() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let cubed: Vec<f64> = a.iter().map(|x: &f64| x.powi(3) + 7.0).collect();
        assert!((srcc(&a, &cubed).unwrap() - 1.0).abs() < 1e-12);
        let tied = srcc(&a, &[1.0, 2.0, 2.0, 3.0]).unwrap();
        assert!((tied - 4.5 / 22.5f64.sqrt()).abs() < 1e-12);
        assert_eq!(format!("{tied:.4}"), "0.9487");
        assert!((srcc(&a, &[4.0, 3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn ktau_examples() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(ktau(&a, &a).unwrap(), 1.0);
        assert_eq!(ktau(&a, &[5.0, 4.0, 3.0, 2.0, 1.0]).unwrap(), -1.0);
        // one discordant pair among ten
        assert!((ktau(&a, &[1.0, 3.0, 2.0, 4.0, 5.0]).unwrap() - 0.8).abs() < 1e-12);
        // tau-b with a tie in b: C=5, D=0, n0=6, ties_b=1
        let t = ktau(&[1.0, 2.0, 3.0, 4.0], &[1.0, 2.0, 2.0, 3.0]).unwrap();
        assert!((t - 5.0 / (6.0f64 * 5.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn aggregate_examples() {
        let agg = aggregate_by_system(&[("a", 3.0, 3.0), ("a", 4.0, 4.0)]).unwrap();
        assert_eq!(agg.len(), 1);
        assert_eq!(
            (agg[0].mean_true, agg[0].mean_pred, agg[0].clip_count),
            (3.5, 3.5, 2)
        );

        let agg = aggregate_by_system(&[("b", 2.0, 2.5), ("a", 1.0, 1.5)]).unwrap();
        assert_eq!(agg[0].system_id, "a");
        assert_eq!((agg[1].mean_true, agg[1].mean_pred), (2.0, 2.5));

        assert!(aggregate_by_system::<&str>(&[]).is_err());
    }

    #[test]
    fn aggregate_hand_summed_table() {
        // 3 systems x 4 clips
        let clips = [
            ("s1", 1.0, 1.5),
            ("s1", 2.0, 2.0),
            ("s1", 1.5, 1.0),
            ("s1", 2.5, 2.5),
            ("s2", 3.0, 2.0),
            ("s2", 3.5, 3.0),
            ("s2", 4.0, 3.5),
            ("s2", 2.5, 3.5),
            ("s3", 5.0, 4.0),
            ("s3", 4.5, 4.5),
            ("s3", 4.0, 5.0),
            ("s3", 4.5, 4.5),
        ];
        let agg = aggregate_by_system(&clips).unwrap();
        let got: Vec<(f64, f64)> = agg.iter().map(|s| (s.mean_true, s.mean_pred)).collect();
        assert_eq!(got, vec![(1.75, 1.75), (3.25, 3.0), (4.5, 4.5)]);
    }

    #[test]
    fn report_csv_layout() {
        let ids = ["a", "a", "b", "c"];
        let truth = [1.0, 2.0, 3.0, 4.0];
        let pred = [1.0, 9.0, 3.0, 3.5];
        let (m, n) = system_level_metrics(&ids, &truth, &pred, Some((1.0, 5.0))).unwrap();
        assert_eq!(n, 3);
        // clamped: a -> (1.5, 3.0), b -> (3, 3), c -> (4, 3.5)
        assert!((m.mse - (2.25 + 0.0 + 0.25) / 3.0).abs() < 1e-12);
        let report = MetricsReport {
            per_dimension: vec![("MI".into(), m)],
            n_systems: n,
        };
        let mut buf = Vec::new();
        report.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "dimension,metric,value,n_systems");
        assert_eq!(lines.len(), 5);
        assert!(lines[3].starts_with("MI,srcc,"));
    }
}
