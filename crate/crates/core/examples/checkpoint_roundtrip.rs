//! Saves a briefly trained model and reloads it with identical predictions.

use mobiletl::model::{build_model, bundled_spec, load_checkpoint, save_checkpoint};
use mobiletl::policy::{apply_policy, TrainPolicy};
use mobiletl::trainer::{synthetic, train, OptimizerCfg, SyntheticSpec, TrainConfig};

fn main() -> mobiletl::Result<()> {
    let spec = bundled_spec("toy_4block")?;
    let data = synthetic(&SyntheticSpec::new(80, 2, 2))?;
    let mut pm = apply_policy(build_model::<f32>(&spec, 2)?, &TrainPolicy::ft_last())?;
    train(&mut pm, &data, &TrainConfig::steps(OptimizerCfg::adam(1e-2), 20), 2)?;
    let mut model = pm.into_model();

    let path = std::env::temp_dir().join("mobiletl_example.ckpt");
    save_checkpoint(&model, &path)?;
    let mut restored = load_checkpoint::<f32>(&path, &spec)?;
    let (x, _) = data.batch::<f32>(&(0..8).collect::<Vec<_>>())?;
    let same = model.predict(&x)? == restored.predict(&x)?;
    println!(
        "{} bytes written, predictions match: {same}",
        std::fs::metadata(&path).map_or(0, |m| m.len())
    );
    let _ = std::fs::remove_file(&path);
    Ok(())
}
