//! Parameters, training FLOPs and stored activations of the three single
//! blocks at input (8, 96, 7, 7).

use mobiletl::model::{conv_96, irb_v2_96, irb_v3_96, spec_param_count};
use mobiletl::policy::TrainPolicy;
use mobiletl::profiler::profile_model;

fn main() -> mobiletl::Result<()> {
    println!(
        "{:<10} {:>10} {:>14} {:>12}",
        "block", "params", "train MFLOPs", "stored MB"
    );
    for (name, spec) in [("conv", conv_96()), ("irb_v2", irb_v2_96()), ("irb_v3", irb_v3_96())] {
        let r = profile_model(&spec, &TrainPolicy::ft_all(), spec.input_shape)?;
        println!(
            "{:<10} {:>10} {:>14.2} {:>12.3}",
            name,
            spec_param_count(&spec)?,
            r.totals.train_flops() as f64 / 1e6,
            r.totals.saved_act_bytes as f64 / 1e6
        );
    }
    Ok(())
}
