//! Stored-activation savings of MobileTL over full fine-tuning for a single
//! inverted residual block at expansion 6.

use mobiletl::model::{BlockSpec, ModelSpec};
use mobiletl::profiler::profile_reduction;

fn main() -> mobiletl::Result<()> {
    let shape = [8, 96, 7, 7];
    for (name, block) in [
        ("irb_v2", BlockSpec::irb_v2(96, 96, 6, 5, 1)),
        ("irb_v3", BlockSpec::irb_v3(96, 96, 6, 5, 1)),
    ] {
        let mut spec = ModelSpec::new(shape, 10, vec![block]);
        spec.input_requires_grad = true;
        let r = profile_reduction(&spec, shape)?;
        println!(
            "{name}: FT_All {:.3} MB, MobileTL {:.3} MB, reduction {:.1}%",
            r.ft_all_bytes as f64 / 1e6,
            r.mobiletl_bytes as f64 / 1e6,
            r.percent
        );
    }
    Ok(())
}
