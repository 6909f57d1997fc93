mod common;

use common::invariants::*;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig { cases: 200, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn gate_outputs_stay_open(case in model_cases()) {
        gates_open(case)?;
    }

    #[test]
    fn fused_outputs_stay_between_inputs(case in blend_cases()) {
        blend_bounded(case)?;
    }

    #[test]
    fn attention_rows_are_distributions(case in attention_cases()) {
        attention_normalized(case)?;
    }

    #[test]
    fn features_ignore_future_turns(case in causal_cases()) {
        causal(case)?;
    }

    #[test]
    fn training_never_moves_the_fixed_encoder(case in frozen_cases()) {
        frozen_stable(case)?;
    }
}
