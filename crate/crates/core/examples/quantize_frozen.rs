//! Int8 storage of the frozen bottom blocks and what it saves.

use mobiletl::model::{build_model, bundled_spec};
use mobiletl::params::ParamValue;
use mobiletl::policy::{apply_policy, TrainPolicy};

fn main() -> mobiletl::Result<()> {
    let spec = bundled_spec("toy_4block")?;
    for quantize in [false, true] {
        let policy = TrainPolicy::mobiletl(2).with_quantize_frozen(quantize);
        let pm = apply_policy(build_model::<f32>(&spec, 4)?, &policy)?;
        let params = pm.model.params();
        let bytes: usize = params.iter().map(|(_, p)| p.byte_len()).sum();
        let int8 = params
            .iter()
            .filter(|(_, p)| matches!(p.value, ParamValue::Quantized(_)))
            .count();
        println!("quantize_frozen={quantize}: {int8} int8 tensors, {bytes} parameter bytes");
    }
    Ok(())
}
