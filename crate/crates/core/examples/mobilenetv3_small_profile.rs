//! Whole-model cost of MobileNetV3-Small (batch 8, 224x224) under full
//! fine-tuning, printed as a per-layer table.

use mobiletl::model::mobilenet_v3_small;
use mobiletl::policy::TrainPolicy;
use mobiletl::profiler::{profile_model, report_table};

fn main() -> mobiletl::Result<()> {
    let spec = mobilenet_v3_small();
    let r = profile_model(&spec, &TrainPolicy::ft_all(), spec.input_shape)?;
    print!("{}", report_table(&r));
    let t = &r.totals;
    println!(
        "\nforward {:.1} MFLOPs, backward {:.1} MFLOPs (x{:.2}), stored {:.1} MB",
        t.fwd_flops as f64 / 1e6,
        t.bwd_flops as f64 / 1e6,
        t.bwd_flops as f64 / t.fwd_flops as f64,
        t.saved_act_bytes as f64 / 1e6
    );
    Ok(())
}
