//! Fine-tunes the 4-block toy model on synthetic blobs with full fine-tuning
//! and with MobileTL on the top two blocks.

use mobiletl::model::{build_model, bundled_spec};
use mobiletl::policy::{apply_policy, TrainPolicy};
use mobiletl::trainer::{synthetic, train, OptimizerCfg, SyntheticSpec, TrainConfig};

fn main() -> mobiletl::Result<()> {
    let spec = bundled_spec("toy_4block")?;
    let data = synthetic(&SyntheticSpec::new(400, 2, 5))?;
    let cfg = TrainConfig::steps(OptimizerCfg::adam(1e-2), 200);
    for policy in [TrainPolicy::ft_all(), TrainPolicy::mobiletl(2)] {
        let mut pm = apply_policy(build_model::<f32>(&spec, 1)?, &policy)?;
        let trainable = pm.trainable_param_count();
        let r = train(&mut pm, &data, &cfg, 1)?;
        println!(
            "{:<16} trainable {:>5}  accuracy {:.3}  peak tape {:>7} B  {:.1} s",
            r.policy, trainable, r.final_accuracy, r.peak_tape_bytes, r.wall_time_s
        );
    }
    Ok(())
}
