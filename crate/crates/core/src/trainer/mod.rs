//! Optimizers, datasets and the training/evaluation loops.

mod data;
mod optim;

pub use data::{
    decode_tlds, encode_tlds, load_dataset, read_tlds, synthetic, write_tlds, DataSpec, Dataset, DatasetSource,
    SyntheticSpec, TLDS_MAGIC, TLDS_VERSION,
};
pub use optim::{cosine_lr, Optimizer, OptimizerCfg, OptimizerKind, Schedule};

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::Phase;
use crate::model::{mix_seed, Model};
use crate::policy::PartitionedModel;
use crate::tape::Tape;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: OptimizerCfg,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stops after this many updates, running as many epochs as needed.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerCfg::adam(1e-3),
            batch_size: 8,
            epochs: 50,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn steps(optimizer: OptimizerCfg, steps: usize) -> Self {
        TrainConfig {
            optimizer,
            max_steps: Some(steps),
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepStats {
    pub loss: f64,
    pub grad_norm: f64,
    pub saved_bytes: u64,
}

/// Forward, backward and one optimizer update on a single batch.
pub fn train_step<T: Scalar>(
    model: &mut Model<T>,
    opt: &mut Optimizer,
    x: &Tensor<T>,
    labels: &[usize],
    step: usize,
) -> Result<StepStats> {
    let mut tape = Tape::new();
    let loss = model.loss(&mut tape, x, labels, Phase::Train)?;
    let value = loss.item()?.as_f64();
    if !value.is_finite() {
        return Err(Error::Diverged {
            step,
            detail: format!("loss is {value}"),
        });
    }
    let saved_bytes = tape.saved_bytes() as u64;
    let grads = tape.backward(&loss, model.params())?;
    let grad_norm = grads.norm();
    if !grad_norm.is_finite() {
        return Err(Error::Diverged {
            step,
            detail: "non-finite gradient".into(),
        });
    }
    opt.step(model.params_mut(), &grads)?;
    Ok(StepStats {
        loss: value,
        grad_norm,
        saved_bytes,
    })
}

/// Top-1 accuracy in evaluation phase.
pub fn evaluate<T: Scalar>(model: &mut Model<T>, data: &Dataset, indices: &[usize], batch_size: usize) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    let mut correct = 0;
    for chunk in indices.chunks(batch_size.max(1)) {
        let (x, labels) = data.batch::<T>(chunk)?;
        let pred = model.predict(&x)?;
        correct += pred.iter().zip(&labels).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / indices.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    pub policy: String,
    pub steps: usize,
    pub step_losses: Vec<f64>,
    pub epochs: Vec<EpochStats>,
    pub final_accuracy: f64,
    pub peak_tape_bytes: u64,
    pub wall_time_s: f64,
}

fn check_compatible<T: Scalar>(model: &Model<T>, data: &Dataset, cfg: &TrainConfig) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Config("dataset is empty; nothing to train on".into()));
    }
    if !model.has_head() {
        return Err(Error::spec("training needs a model with a classification head"));
    }
    let spec = model.spec();
    if data.num_classes() != spec.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, model head has {}",
            data.num_classes(),
            spec.num_classes
        )));
    }
    if data.sample_shape()[..] != spec.input_shape[1..] {
        return Err(Error::Config(format!(
            "dataset samples are {:?}, model expects {:?}",
            data.sample_shape(),
            &spec.input_shape[1..]
        )));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    Ok(())
}

/// Trains on the first 80% of a seeded shuffle and reports accuracy on the
/// remaining 20% after each epoch. Incomplete final batches are dropped.
pub fn train<T: Scalar>(
    pm: &mut PartitionedModel<T>,
    data: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainReport> {
    let start = Instant::now();
    check_compatible(&pm.model, data, cfg)?;
    let (train_idx, test_idx) = data.split(seed);
    let per_epoch = train_idx.len() / cfg.batch_size;
    if per_epoch == 0 || test_idx.is_empty() {
        return Err(Error::Config(format!(
            "{} samples are too few for batch size {} and a held-out split",
            data.len(),
            cfg.batch_size
        )));
    }
    let total = cfg.max_steps.unwrap_or(cfg.epochs * per_epoch);
    let mut ocfg = cfg.optimizer.clone();
    ocfg.total_steps = total;
    let mut opt = Optimizer::new(ocfg)?;

    let mut report = TrainReport {
        policy: pm.policy.to_string(),
        steps: 0,
        step_losses: Vec::with_capacity(total),
        epochs: Vec::new(),
        final_accuracy: 0.0,
        peak_tape_bytes: 0,
        wall_time_s: 0.0,
    };
    let mut epoch = 0;
    while report.steps < total {
        let mut order = train_idx.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(seed, epoch as u64 + 1)));
        let mut losses = Vec::new();
        for batch in order.chunks_exact(cfg.batch_size) {
            if report.steps == total {
                break;
            }
            let (x, labels) = data.batch::<T>(batch)?;
            let st = train_step(&mut pm.model, &mut opt, &x, &labels, report.steps)?;
            report.peak_tape_bytes = report.peak_tape_bytes.max(st.saved_bytes);
            report.step_losses.push(st.loss);
            losses.push(st.loss);
            report.steps += 1;
        }
        let accuracy = evaluate(&mut pm.model, data, &test_idx, cfg.batch_size)?;
        report.epochs.push(EpochStats {
            epoch,
            mean_loss: losses.iter().sum::<f64>() / losses.len() as f64,
            accuracy,
        });
        epoch += 1;
    }
    report.final_accuracy = match report.epochs.last() {
        Some(e) => e.accuracy,
        None => evaluate(&mut pm.model, data, &test_idx, cfg.batch_size)?,
    };
    report.wall_time_s = start.elapsed().as_secs_f64();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, bundled_spec};
    use crate::policy::{apply_policy, TrainPolicy};
    use crate::profiler::profile_model;

    fn setup(policy: TrainPolicy) -> (PartitionedModel<f32>, Dataset) {
        let spec = bundled_spec("toy_4block").unwrap();
        let pm = apply_policy(build_model::<f32>(&spec, 11).unwrap(), &policy).unwrap();
        let data = synthetic(&SyntheticSpec::new(80, 2, 7)).unwrap();
        (pm, data)
    }

    #[test]
    fn head_only_training_separates_blobs() {
        let (mut pm, data) = setup(TrainPolicy::mobiletl(0));
        let cfg = TrainConfig::steps(OptimizerCfg::adam(1e-2), 200);
        let r = train(&mut pm, &data, &cfg, 1).unwrap();
        assert_eq!(r.steps, 200);
        assert!(r.final_accuracy >= 0.95, "{}", r.final_accuracy);
    }

    #[test]
    fn zero_lr_leaves_parameters_alone() {
        let (mut pm, data) = setup(TrainPolicy::ft_all());
        let before = pm.model.params().trainable_vector();
        let cfg = TrainConfig::steps(OptimizerCfg::sgd(0.0), 5);
        train(&mut pm, &data, &cfg, 1).unwrap();
        assert_eq!(pm.model.params().trainable_vector(), before);
    }

    #[test]
    fn frozen_parameters_are_bitwise_unchanged() {
        let (mut pm, data) = setup(TrainPolicy::mobiletl(2));
        let frozen = |m: &Model<f32>| -> Vec<u32> {
            m.params()
                .iter()
                .filter(|(_, p)| !p.trainable && p.kind.is_learnable())
                .flat_map(|(id, _)| {
                    m.params()
                        .dense(id)
                        .unwrap()
                        .data()
                        .iter()
                        .map(|v| v.to_bits())
                        .collect::<Vec<_>>()
                })
                .collect()
        };
        let before = frozen(&pm.model);
        let cfg = TrainConfig::steps(OptimizerCfg::adam(1e-2), 20);
        train(&mut pm, &data, &cfg, 3).unwrap();
        assert_eq!(frozen(&pm.model), before);
    }

    #[test]
    fn training_is_deterministic() {
        let run = || {
            let (mut pm, data) = setup(TrainPolicy::mobiletl(2));
            let cfg = TrainConfig::steps(OptimizerCfg::adam(1e-2), 15);
            let mut r = train(&mut pm, &data, &cfg, 5).unwrap();
            r.wall_time_s = 0.0;
            (r, pm.model.params().trainable_vector())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn peak_tape_matches_profile() {
        let policy = TrainPolicy::mobiletl(2);
        let (mut pm, data) = setup(policy.clone());
        let cfg = TrainConfig::steps(OptimizerCfg::adam(1e-3), 3);
        let r = train(&mut pm, &data, &cfg, 1).unwrap();
        let spec = pm.model.spec().clone();
        let p = profile_model(&spec, &policy, spec.input_shape).unwrap();
        assert_eq!(r.peak_tape_bytes, p.totals.saved_act_bytes);
    }

    #[test]
    fn small_lr_loss_decreases_on_a_fixed_batch() {
        let (mut pm, data) = setup(TrainPolicy::ft_all());
        let mut opt = Optimizer::new(OptimizerCfg::sgd(1e-3)).unwrap();
        let (x, labels) = data.batch::<f32>(&(0..8).collect::<Vec<_>>()).unwrap();
        let mut prev = f64::INFINITY;
        for step in 0..10 {
            let st = train_step(&mut pm.model, &mut opt, &x, &labels, step).unwrap();
            assert!(st.loss <= prev + 1e-6, "step {step}: {} after {prev}", st.loss);
            prev = st.loss;
        }
    }

    #[test]
    fn refuses_empty_or_mismatched_data() {
        let (mut pm, _) = setup(TrainPolicy::ft_all());
        let empty = Dataset::new([3, 16, 16], 2, vec![], vec![]).unwrap();
        assert!(matches!(
            train(&mut pm, &empty, &TrainConfig::default(), 0),
            Err(Error::Config(_))
        ));
        let wrong = synthetic(&SyntheticSpec::new(40, 3, 1)).unwrap();
        assert!(matches!(
            train(&mut pm, &wrong, &TrainConfig::default(), 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn divergence_is_reported() {
        let (mut pm, data) = setup(TrainPolicy::ft_all());
        let cfg = TrainConfig::steps(OptimizerCfg::sgd(1e30), 50);
        let r = train(&mut pm, &data, &cfg, 0);
        assert!(matches!(r, Err(Error::Diverged { .. })), "{r:?}");
    }
}
