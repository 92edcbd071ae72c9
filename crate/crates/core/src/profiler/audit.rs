use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::profile_model;
use crate::error::{Error, Result};
use crate::layers::Phase;
use crate::model::{build_model, ModelSpec};
use crate::policy::{apply_policy, TrainPolicy};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AuditRow {
    pub layer_id: String,
    pub predicted: u64,
    pub observed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AuditReport {
    pub policy: String,
    pub rows: Vec<AuditRow>,
    pub predicted_total: u64,
    pub observed_total: u64,
}

impl AuditReport {
    pub fn mismatches(&self) -> impl Iterator<Item = &AuditRow> {
        self.rows.iter().filter(|r| r.predicted != r.observed)
    }

    pub fn passed(&self) -> bool {
        self.mismatches().next().is_none()
    }
}

/// Runs one real f32 forward pass in training phase and compares the bytes
/// each layer saved on the tape with the profiler's prediction.
///
/// Returns [`Error::Audit`] listing every layer whose bytes differ.
pub fn audit_against_tape(
    spec: &ModelSpec,
    policy: &TrainPolicy,
    input_shape: [usize; 4],
    seed: u64,
) -> Result<AuditReport> {
    let report = observe(spec, policy, input_shape, seed)?;
    if report.passed() {
        Ok(report)
    } else {
        Err(Error::Audit(
            report
                .mismatches()
                .map(|r| format!("{}: predicted {} B, tape {} B", r.layer_id, r.predicted, r.observed))
                .collect(),
        ))
    }
}

/// The comparison without turning mismatches into an error.
pub(crate) fn observe(
    spec: &ModelSpec,
    policy: &TrainPolicy,
    input_shape: [usize; 4],
    seed: u64,
) -> Result<AuditReport> {
    let profile = profile_model(spec, policy, input_shape)?;
    let mut spec = spec.clone();
    spec.input_shape = input_shape;
    let mut model = apply_policy(build_model::<f32>(&spec, seed)?, policy)?.into_model();
    let x = Tensor::<f32>::rand_normal(&input_shape, seed ^ 0x5eed, 0.0, 1.0)?;
    let mut tape = Tape::new();
    if model.has_head() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<usize> = (0..input_shape[0])
            .map(|_| rng.random_range(0..spec.num_classes))
            .collect();
        model.loss(&mut tape, &x, &labels, Phase::Train)?;
    } else {
        model.probe_objective(&mut tape, &x, Phase::Train, seed)?;
    }
    let mut layers: BTreeMap<String, (u64, u64)> = BTreeMap::new();
    for r in &profile.rows {
        layers.entry(r.layer_id.clone()).or_default().0 += r.saved_act_bytes;
    }
    for (layer, bytes) in tape.saved_bytes_by_layer() {
        layers.entry(layer).or_default().1 += bytes as u64;
    }
    let order: Vec<String> = profile
        .rows
        .iter()
        .map(|r| r.layer_id.clone())
        .chain(layers.keys().filter(|k| profile.row(k).is_none()).cloned())
        .collect();
    let rows: Vec<AuditRow> = order
        .into_iter()
        .map(|layer_id| {
            let (predicted, observed) = layers[&layer_id];
            AuditRow {
                layer_id,
                predicted,
                observed,
            }
        })
        .collect();
    Ok(AuditReport {
        policy: profile.policy,
        predicted_total: rows.iter().map(|r| r.predicted).sum(),
        observed_total: rows.iter().map(|r| r.observed).sum(),
        rows,
    })
}
