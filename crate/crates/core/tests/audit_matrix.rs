use mobiletl::model::{conv_96, irb_v2_96, irb_v3_96, BlockKind, ModelSpec};
use mobiletl::policy::TrainPolicy;
use mobiletl::profiler::{audit_against_tape, profile_model};

fn policies() -> Vec<TrainPolicy> {
    vec![
        TrainPolicy::ft_all(),
        TrainPolicy::ft_bn(),
        TrainPolicy::ft_bias(),
        TrainPolicy::ft_last(),
        TrainPolicy::mobiletl(1),
    ]
}

fn with_expansion(mut spec: ModelSpec, e: usize) -> ModelSpec {
    if spec.blocks[0].kind != BlockKind::ConvBlock {
        spec.blocks[0].expansion = e;
    }
    spec
}

#[test]
fn every_block_policy_and_expansion_matches_the_tape() {
    let mut checked = 0;
    for base in [conv_96(), irb_v2_96(), irb_v3_96()] {
        for e in [1, 6] {
            let spec = with_expansion(base.clone(), e);
            for p in policies() {
                let r = audit_against_tape(&spec, &p, spec.input_shape, 17)
                    .unwrap_or_else(|err| panic!("{:?} exp {e} {p}: {err}", spec.blocks[0].kind));
                assert_eq!(r.predicted_total, r.observed_total);
                checked += 1;
            }
        }
    }
    assert_eq!(checked, 30);
}

#[test]
fn audit_totals_equal_profiled_totals() {
    let spec = with_expansion(irb_v3_96(), 6);
    for p in policies() {
        let r = audit_against_tape(&spec, &p, spec.input_shape, 2).unwrap();
        let prof = profile_model(&spec, &p, spec.input_shape).unwrap();
        assert_eq!(r.observed_total, prof.totals.saved_act_bytes, "{p}");
    }
}

#[test]
fn quantized_frozen_blocks_still_audit() {
    let spec = mobiletl::model::bundled_spec("toy_4block").unwrap();
    for k in 0..=4 {
        let p = TrainPolicy::mobiletl(k).with_quantize_frozen(true);
        audit_against_tape(&spec, &p, spec.input_shape, 5).unwrap();
    }
}
