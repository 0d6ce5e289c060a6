//! Brute-force reference implementations shared by the integration tests.
#![allow(dead_code)]

use std::path::PathBuf;

/// 1-based average rank by direct counting: `1 + #less + (#equal - 1) / 2`.
pub fn rank_by_counting(v: &[f64]) -> Vec<f64> {
    v.iter()
        .map(|&x| {
            let less = v.iter().filter(|&&o| o < x).count() as f64;
            let equal = v.iter().filter(|&&o| o == x).count() as f64;
            1.0 + less + (equal - 1.0) / 2.0
        })
        .collect()
}

/// Two-pass Pearson correlation; `None` when either side is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    (saa > 0.0 && sbb > 0.0).then(|| sab / (saa * sbb).sqrt())
}

pub fn spearman_oracle(a: &[f64], b: &[f64]) -> Option<f64> {
    pearson(&rank_by_counting(a), &rank_by_counting(b))
}

/// Classical `1 - 6 sum d^2 / (n (n^2 - 1))`, valid only without ties.
pub fn spearman_no_ties(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (rank_by_counting(a), rank_by_counting(b));
    let n = a.len() as f64;
    let d2: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - y).powi(2)).sum();
    1.0 - 6.0 * d2 / (n * (n * n - 1.0))
}

/// Tau-b from O(n^2) pair classification.
pub fn kendall_tau_b_oracle(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len();
    let (mut concordant, mut discordant, mut tie_a, mut tie_b) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..n {
        for j in i + 1..n {
            let da = a[i] - a[j];
            let db = b[i] - b[j];
            if da == 0.0 {
                tie_a += 1;
            }
            if db == 0.0 {
                tie_b += 1;
            }
            if da != 0.0 && db != 0.0 {
                if (da > 0.0) == (db > 0.0) {
                    concordant += 1;
                } else {
                    discordant += 1;
                }
            }
        }
    }
    let n0 = (n * (n - 1) / 2) as i64;
    let denom = ((n0 - tie_a) as f64 * (n0 - tie_b) as f64).sqrt();
    (denom > 0.0).then(|| (concordant - discordant) as f64 / denom)
}

pub fn workspace_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

/// Training preset for the bundled synthetic dataset.
pub fn synthetic_preset() -> PathBuf {
    workspace_root().join("configs/synthetic.toml")
}
