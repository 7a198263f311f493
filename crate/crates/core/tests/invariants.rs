use cmfn_core::invariants::{blackout_case, normalization_case};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn attention_rows_gate_and_fusion_hull(seed in any::<u64>()) {
        let c = normalization_case(seed).unwrap();
        prop_assert!(c.spatial_row_error <= 1e-9, "{c:?}");
        prop_assert!(c.language_row_error <= 1e-9, "{c:?}");
        prop_assert!(c.gate_min > 0.0 && c.gate_max < 1.0, "{c:?}");
        prop_assert!(c.hull_excess <= 1e-12, "{c:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn own_row_never_reaches_its_logits(seed in any::<u64>()) {
        let c = blackout_case(seed).unwrap();
        prop_assert!(c.own_row_change <= 1e-12, "{c:?}");
        prop_assert!(c.other_rows_change > 0.0, "{c:?}");
    }
}
