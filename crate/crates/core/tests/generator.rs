mod common;

use common::invariants;
use longstyle::generator::SwapPlan;
use proptest::prelude::*;

#[test]
fn swap_multiset_and_rate() {
    invariants::swap_multiset_and_rate().unwrap();
}

#[test]
fn causal_mask_law() {
    invariants::causal_law().unwrap();
}

#[test]
fn nar_decodes_in_parallel() {
    invariants::nar_parallel().unwrap();
}

#[test]
fn nar_unused_at_inference() {
    invariants::nar_absent_at_inference().unwrap();
}

#[test]
fn fusion_row_zero_is_the_style() {
    invariants::fuse_row_zero().unwrap();
}

proptest! {
    #[test]
    fn swap_plan_is_a_permutation(n in 1usize..40, p in 0.0f64..=1.0, k in 1usize..4, seed in any::<u64>()) {
        let plan = SwapPlan::sample(n, p, k, &mut common::rng(seed));
        let mut o = plan.order.clone();
        o.sort_unstable();
        prop_assert_eq!(o, (0..n).collect::<Vec<_>>());
        prop_assert!(plan.swaps <= n);
    }

    #[test]
    fn zero_rate_is_identity(n in 1usize..40, k in 1usize..4, seed in any::<u64>()) {
        let plan = SwapPlan::sample(n, 0.0, k, &mut common::rng(seed));
        prop_assert_eq!(plan.order, (0..n).collect::<Vec<_>>());
    }
}
