//! Property tests for the library invariants.

mod common;

use common::brute_force_lsap;
use proptest::prelude::*;
use sigver::embed::triplet_loss;
use sigver::eval::compute_eer;
use sigver::ged::{compare_graphs, CostParams};
use sigver::graph::KeypointGraph;
use sigver::lsap::{solve, CostMatrix};

fn small_graph() -> impl Strategy<Value = KeypointGraph> {
    (1usize..6)
        .prop_flat_map(|n| {
            (
                proptest::collection::vec((-40.0..40.0f64, -40.0..40.0f64), n),
                proptest::collection::vec(any::<bool>(), n * n),
            )
        })
        .prop_map(|(labels, adjacency)| {
            let n = labels.len();
            let mut edges = Vec::new();
            for a in 0..n {
                for b in a + 1..n {
                    if adjacency[a * n + b] {
                        edges.push((a, b));
                    }
                }
            }
            KeypointGraph::new(labels, edges)
        })
}

proptest! {
    #[test]
    fn lsap_matches_brute_force(
        n in 1usize..6,
        seed_entries in proptest::collection::vec(0.0..100.0f64, 36),
    ) {
        let entries: Vec<f64> = seed_entries.into_iter().take(n * n).collect();
        prop_assume!(entries.len() == n * n);
        let matrix = CostMatrix::new(n, entries).unwrap();
        let assignment = solve(&matrix).unwrap();
        let expected = brute_force_lsap(&matrix);
        prop_assert!((assignment.total_cost - expected).abs() <= 1e-9 * expected.max(1.0));
    }

    #[test]
    fn graph_labels_are_always_centered(
        labels in proptest::collection::vec((-1000.0..1000.0f64, -1000.0..1000.0f64), 1..40),
    ) {
        let n = labels.len() as f64;
        let g = KeypointGraph::new(labels, vec![]);
        let (sx, sy) = g
            .labels()
            .iter()
            .fold((0.0, 0.0), |(sx, sy), &(x, y)| (sx + x, sy + y));
        prop_assert!((sx / n).abs() <= 1e-9);
        prop_assert!((sy / n).abs() <= 1e-9);
    }

    #[test]
    fn hinge_nonnegative_and_zero_iff_separated(
        dp in 0.0..10.0f64,
        dn in 0.0..10.0f64,
        margin in 0.001..5.0f64,
    ) {
        let loss = triplet_loss(dp, dn, margin);
        prop_assert!(loss >= 0.0);
        prop_assert_eq!(loss == 0.0, dn >= dp + margin);
    }

    #[test]
    fn eer_is_bounded_and_order_invariant(
        genuine in proptest::collection::vec(-5.0..5.0f64, 1..30),
        forgery in proptest::collection::vec(-5.0..5.0f64, 1..30),
        rotation in 0usize..30,
    ) {
        let (eer, _, _) = compute_eer(&genuine, &forgery).unwrap();
        prop_assert!((0.0..=1.0).contains(&eer));

        let mut rotated = genuine.clone();
        rotated.rotate_left(rotation % genuine.len());
        let (eer2, _, _) = compute_eer(&rotated, &forgery).unwrap();
        prop_assert_eq!(eer, eer2);
    }

    #[test]
    fn normalized_ged_in_unit_interval_and_symmetric(
        g1 in small_graph(),
        g2 in small_graph(),
    ) {
        let params = CostParams::default();
        let ab = compare_graphs(&g1, &g2, &params);
        let ba = compare_graphs(&g2, &g1, &params);
        prop_assert!((0.0..=1.0).contains(&ab.normalized));
        prop_assert!((ab.normalized - ba.normalized).abs() <= 1e-9);
        prop_assert!(ab.lower_bound <= ab.max_ged + 1e-9);
    }

    #[test]
    fn self_distance_is_zero(g in small_graph()) {
        let r = compare_graphs(&g, &g, &CostParams::default());
        prop_assert_eq!(r.normalized, 0.0);
    }
}
