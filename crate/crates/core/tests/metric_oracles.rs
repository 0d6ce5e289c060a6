mod common;

use proptest::prelude::*;

use qamro::metrics::{aggregate_by_system, average_ranks, ktau, lcc, srcc, system_level_metrics};
use qamro::Error;

use common::{kendall_tau_b_oracle, pearson, rank_by_counting, spearman_no_ties, spearman_oracle};

fn tied_vectors() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (2usize..40).prop_flat_map(|n| {
        let v = || prop::collection::vec((0u8..6).prop_map(|k| f64::from(k) * 0.5), n);
        (v(), v())
    })
}

proptest! {
    #[test]
    fn ranks_match_counting(v in prop::collection::vec(-5i32..5, 1..50)) {
        let v: Vec<f64> = v.into_iter().map(f64::from).collect();
        prop_assert_eq!(average_ranks(&v), rank_by_counting(&v));
    }

    #[test]
    fn srcc_and_ktau_match_brute_force((a, b) in tied_vectors()) {
        match (spearman_oracle(&a, &b), kendall_tau_b_oracle(&a, &b)) {
            (Some(s), Some(k)) => {
                prop_assert!((srcc(&a, &b).unwrap() - s).abs() <= 1e-12);
                prop_assert!((ktau(&a, &b).unwrap() - k).abs() <= 1e-12);
            }
            _ => {
                prop_assert!(matches!(srcc(&a, &b), Err(Error::UndefinedCorrelation(_))));
                prop_assert!(matches!(ktau(&a, &b), Err(Error::UndefinedCorrelation(_))));
            }
        }
    }

    #[test]
    fn spearman_matches_classical_formula_without_ties(
        perm in Just((0..25).map(f64::from).collect::<Vec<_>>()).prop_shuffle(),
    ) {
        let base: Vec<f64> = (0..25).map(f64::from).collect();
        prop_assert!((srcc(&base, &perm).unwrap() - spearman_no_ties(&base, &perm)).abs() <= 1e-12);
    }

    #[test]
    fn correlations_are_symmetric_and_bounded((a, b) in tied_vectors()) {
        if let (Ok(s), Ok(k), Ok(r)) = (srcc(&a, &b), ktau(&a, &b), lcc(&a, &b)) {
            for v in [s, k, r] {
                prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&v));
            }
            prop_assert!((srcc(&b, &a).unwrap() - s).abs() <= 1e-12);
            prop_assert!((ktau(&b, &a).unwrap() - k).abs() <= 1e-12);
            prop_assert!((r - pearson(&a, &b).unwrap()).abs() <= 1e-12);
        }
    }

    #[test]
    fn system_aggregation_is_order_independent(
        clips in prop::collection::vec((0usize..5, 1.0f64..5.0, 0.0f64..6.0), 1..60),
        seed in any::<u64>(),
    ) {
        let named: Vec<(String, f64, f64)> =
            clips.iter().map(|&(s, t, p)| (format!("s{s}"), t, p)).collect();
        let mut shuffled = named.clone();
        let k = (seed as usize) % shuffled.len();
        shuffled.rotate_left(k);
        shuffled.reverse();
        let a = aggregate_by_system(&named).unwrap();
        let b = aggregate_by_system(&shuffled).unwrap();
        prop_assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            prop_assert_eq!(&x.system_id, &y.system_id);
            prop_assert!((x.mean_true - y.mean_true).abs() <= 1e-12);
            prop_assert!((x.mean_pred - y.mean_pred).abs() <= 1e-12);
        }
    }
}

#[test]
fn system_level_metrics_use_clamped_means() {
    let ids = ["a", "a", "b", "b", "c"];
    let truth = [1.0, 2.0, 3.0, 3.0, 5.0];
    let pred = [0.0, 1.0, 2.5, 3.5, 9.0];
    let (m, n) = system_level_metrics(&ids, &truth, &pred, Some((1.0, 5.0))).unwrap();
    assert_eq!(n, 3);
    // clamped means: a -> 1.0, b -> 3.0, c -> 5.0 against truth 1.5, 3.0, 5.0
    assert!((m.mse - 0.25 / 3.0).abs() < 1e-12);
    assert!((m.srcc - 1.0).abs() < 1e-12 && (m.ktau - 1.0).abs() < 1e-12);
}
