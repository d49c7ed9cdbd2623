mod common;

use mfggp::reference::point_evals;
use mfggp::stationary::{Observations, TorusDomain};
use proptest::prelude::*;

fn point(dim: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-0.5f64..0.5, dim)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn kernel_derivatives_match_finite_differences(x in point(2), y in point(2), l in 0.5f64..2.0, d in 0usize..2) {
        prop_assert_eq!(common::kernel_derivatives(&x, &y, l, d), Ok(()));
    }

    #[test]
    fn kernel_derivatives_in_one_dimension(x in point(1), y in point(1), l in 0.5f64..2.0) {
        prop_assert_eq!(common::kernel_derivatives(&x, &y, l, 0), Ok(()));
    }

    #[test]
    fn gram_is_symmetric_and_positive_definite_after_nugget(seed in 0u64..1000, n in 3usize..12, l in 0.3f64..1.5) {
        prop_assert_eq!(common::gram_symmetric_positive_definite(seed, n, l), Ok(()));
    }

    #[test]
    fn representer_interpolates_data(seed in 0u64..1000, n in 2usize..10) {
        prop_assert_eq!(common::representer_interpolates(seed, n), Ok(()));
    }

    #[test]
    fn gauge_shift_leaves_residuals_unchanged(seed in 0u64..1000, c in -3.0f64..3.0) {
        prop_assert_eq!(common::gauge_invariance(seed, c), Ok(()));
    }

    #[test]
    fn objective_gradient_matches_finite_differences(seed in 0u64..1000) {
        prop_assert_eq!(common::gradient_matches_finite_differences(seed), Ok(()));
    }

    #[test]
    fn residuals_vanish_at_exact_1d_solution(seed in 0u64..1000) {
        prop_assert_eq!(common::residuals_vanish_at_exact_1d_solution(seed), Ok(()));
    }
}

#[test]
fn gauss_newton_objective_is_monotone() {
    for seed in 0..4 {
        assert_eq!(common::gauss_newton_monotone(seed), Ok(()), "seed {seed}");
    }
}

#[test]
fn quadratic_problems_converge_in_one_iteration() {
    for seed in 0..5 {
        assert_eq!(common::quadratic_one_iteration(seed), Ok(()), "seed {seed}");
    }
}

#[test]
fn observations_round_trip_through_json() {
    let pts = TorusDomain::centered(2).sample_uniform(4, 9);
    let o = Observations::new(point_evals(&pts), vec![1.0, 2.0, 3.0, 4.0], 1e-3);
    let text = serde_json::to_string(&o).unwrap();
    let back: Observations = serde_json::from_str(&text).unwrap();
    assert_eq!(back, o);
}
