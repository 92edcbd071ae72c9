//! Memory and compute of the fine-tuning presets on MobileNetV3-Small.

use mobiletl::model::mobilenet_v3_small;
use mobiletl::policy::TrainPolicy;
use mobiletl::profiler::{compare_strategies, comparison_table};

fn main() -> mobiletl::Result<()> {
    let spec = mobilenet_v3_small();
    let policies = [
        TrainPolicy::ft_all(),
        TrainPolicy::ft_bn(),
        TrainPolicy::ft_bias(),
        TrainPolicy::ft_last(),
        TrainPolicy::ft_kblks(3),
        TrainPolicy::mobiletl(3),
    ];
    let rows = compare_strategies(&spec, &policies, spec.input_shape)?;
    print!("{}", comparison_table(&rows));
    Ok(())
}
