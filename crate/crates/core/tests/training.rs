use mobiletl::model::{build_model, bundled_spec};
use mobiletl::params::ParamValue;
use mobiletl::policy::{apply_policy, TrainPolicy};
use mobiletl::profiler::profile_model;
use mobiletl::trainer::{synthetic, train, OptimizerCfg, SyntheticSpec, TrainConfig};

#[test]
fn quantized_bottom_stays_fixed_while_top_learns() {
    let spec = bundled_spec("toy_4block").unwrap();
    let data = synthetic(&SyntheticSpec::new(80, 2, 8)).unwrap();
    let policy = TrainPolicy::mobiletl(2).with_quantize_frozen(true);
    let mut pm = apply_policy(build_model::<f32>(&spec, 8).unwrap(), &policy).unwrap();
    let before = pm.model.params().clone();
    let r = train(&mut pm, &data, &TrainConfig::steps(OptimizerCfg::adam(1e-2), 30), 8).unwrap();
    assert_eq!(r.steps, 30);
    let mut moved = 0;
    for (id, p) in pm.model.params().iter() {
        let old = before.get(id).unwrap();
        match (&p.value, &old.value) {
            (ParamValue::Quantized(a), ParamValue::Quantized(b)) => assert_eq!(a, b, "{id}"),
            (ParamValue::Dense(a), ParamValue::Dense(b)) if p.trainable => moved += usize::from(a != b),
            (ParamValue::Dense(a), ParamValue::Dense(b))
                if id.as_str().starts_with("b0.") || id.as_str().starts_with("b1.") =>
            {
                assert_eq!(a, b, "{id}")
            }
            _ => {}
        }
    }
    assert!(moved > 0);
    let prof = profile_model(&spec, &policy, spec.input_shape).unwrap();
    assert_eq!(r.peak_tape_bytes, prof.totals.saved_act_bytes);
}

#[test]
fn mobiletl_tape_is_smaller_than_full_fine_tuning() {
    let spec = bundled_spec("toy_4block").unwrap();
    let data = synthetic(&SyntheticSpec::new(48, 2, 1)).unwrap();
    let cfg = TrainConfig::steps(OptimizerCfg::adam(1e-3), 4);
    let peak = |p: TrainPolicy| {
        let mut pm = apply_policy(build_model::<f32>(&spec, 1).unwrap(), &p).unwrap();
        train(&mut pm, &data, &cfg, 1).unwrap().peak_tape_bytes
    };
    let full = peak(TrainPolicy::ft_all());
    let mtl = peak(TrainPolicy::mobiletl(2));
    let head = peak(TrainPolicy::mobiletl(0));
    assert!(head < mtl && mtl < full, "{head} {mtl} {full}");
}
