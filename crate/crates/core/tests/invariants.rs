mod common;

use common::properties as p;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn routing_distributions_are_stochastic(seed in any::<u64>()) {
        p::routing_distributions_are_stochastic(seed)?;
    }

    #[test]
    fn source_routing_ignores_token_scale(seed in any::<u64>()) {
        p::source_routing_ignores_token_scale(seed)?;
    }

    #[test]
    fn centroids_stay_unit_norm(seed in any::<u64>()) {
        p::centroids_stay_unit_norm(seed)?;
    }

    #[test]
    fn healthy_bank_maintenance_is_noop(seed in any::<u64>()) {
        p::healthy_bank_maintenance_is_noop(seed)?;
    }

    #[test]
    fn logits_are_causal(seed in any::<u64>()) {
        p::logits_are_causal(seed)?;
    }

    #[test]
    fn frozen_forward_is_pure(seed in any::<u64>()) {
        p::frozen_forward_is_pure(seed)?;
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact(seed in any::<u64>()) {
        p::checkpoint_round_trip_is_bit_exact(seed)?;
    }

    #[test]
    fn optimizer_updates_keep_unit_centroids(seed in any::<u64>()) {
        p::optimizer_updates_keep_unit_centroids(seed)?;
    }
}
