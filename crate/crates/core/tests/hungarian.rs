mod support;

use proptest::prelude::*;
use voxfuse::training::hungarian_match;

#[test]
fn agrees_with_enumeration() {
    for i in 0..1000 {
        let cost = support::random_cost_matrix(i, 5);
        let got = hungarian_match(&cost).unwrap();
        let want = support::brute_force_cost(&cost);
        if i % 2 == 0 {
            assert_eq!(got.total_cost, want, "matrix {i}: {cost:?}");
        } else {
            assert!((got.total_cost - want).abs() <= 1e-12 * want.max(1.0), "matrix {i}");
        }
        assert_eq!(got.pairs.len(), cost.len().min(cost[0].len()));
    }
}

#[test]
fn all_zero_matrix_prefers_identity() {
    for (n, m) in [(3, 3), (2, 5), (5, 2)] {
        let a = hungarian_match(&vec![vec![0.0; m]; n]).unwrap();
        let want: Vec<(usize, usize)> = (0..n.min(m)).map(|i| (i, i)).collect();
        assert_eq!(a.pairs, want);
        assert_eq!(a.unmatched_predictions, (n.min(m)..n).collect::<Vec<_>>());
    }
}

proptest! {
    #[test]
    fn pairs_are_one_to_one_and_cost_is_consistent(cost in prop::collection::vec(prop::collection::vec(0.0f64..5.0, 4), 1..7)) {
        let a = hungarian_match(&cost).unwrap();
        let mut cols: Vec<usize> = a.pairs.iter().map(|p| p.1).collect();
        cols.sort();
        cols.dedup();
        prop_assert_eq!(cols.len(), a.pairs.len());
        let sum: f64 = a.pairs.iter().map(|&(r, c)| cost[r][c]).sum();
        prop_assert!((sum - a.total_cost).abs() < 1e-9);
    }

    #[test]
    fn row_shift_shifts_cost(seed in 0u64..500, shift in -3.0f64..3.0) {
        let cost = support::random_cost_matrix(seed * 2 + 1, 9);
        let (n, m) = (cost.len(), cost[0].len());
        prop_assume!(n <= m);
        let shifted: Vec<Vec<f64>> = cost.iter().map(|r| r.iter().map(|c| c + shift).collect()).collect();
        let a = hungarian_match(&cost).unwrap().total_cost;
        let b = hungarian_match(&shifted).unwrap().total_cost;
        prop_assert!((b - a - shift * n as f64).abs() < 1e-9);
    }
}
