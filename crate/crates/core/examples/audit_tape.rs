//! Runs a real forward pass and checks every layer's saved bytes against the
//! analytical profile.

use mobiletl::model::bundled_spec;
use mobiletl::policy::TrainPolicy;
use mobiletl::profiler::audit_against_tape;

fn main() -> mobiletl::Result<()> {
    let spec = bundled_spec("toy_4block")?;
    for policy in [TrainPolicy::ft_all(), TrainPolicy::ft_bias(), TrainPolicy::mobiletl(2)] {
        let r = audit_against_tape(&spec, &policy, spec.input_shape, 3)?;
        println!(
            "{policy}: {} layers, {} bytes on the tape, all match",
            r.rows.len(),
            r.observed_total
        );
    }
    Ok(())
}
