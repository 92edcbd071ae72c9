//! Fine-tuning policies: which blocks train, how their batch norms and
//! activations behave, and int8 freezing of the blocks below the boundary.

mod quant;

pub use quant::{quantize_per_tensor_i8, QuantizedTensor};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{ActBackwardMode, BnMode, ParamDecl};
use crate::model::{Block, Model};
use crate::params::{ParamId, ParamKind, ParamValue};
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Preset {
    #[serde(rename = "ft_all")]
    FtAll,
    #[serde(rename = "ft_bn")]
    FtBn,
    #[serde(rename = "ft_bias")]
    FtBias,
    #[serde(rename = "ft_last")]
    FtLast,
    #[serde(rename = "ft_kblks")]
    FtKBlks,
    #[serde(rename = "mobiletl_kblks", alias = "mobiletl")]
    MobileTlKBlks,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainPolicy {
    pub preset: Preset,
    /// Trainable top blocks for the `*_kblks` presets.
    #[serde(default)]
    pub k_blocks: usize,
    /// Activation backward rule inside trainable blocks. Defaults to the
    /// signed approximation for MobileTL and exact otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub act_backward: Option<ActBackwardMode>,
    #[serde(default)]
    pub quantize_frozen: bool,
    #[serde(default = "yes")]
    pub train_head: bool,
}

impl TrainPolicy {
    fn preset(preset: Preset, k_blocks: usize) -> Self {
        TrainPolicy {
            preset,
            k_blocks,
            act_backward: None,
            quantize_frozen: false,
            train_head: true,
        }
    }

    pub fn ft_all() -> Self {
        Self::preset(Preset::FtAll, 0)
    }

    pub fn ft_bn() -> Self {
        Self::preset(Preset::FtBn, 0)
    }

    pub fn ft_bias() -> Self {
        Self::preset(Preset::FtBias, 0)
    }

    pub fn ft_last() -> Self {
        Self::preset(Preset::FtLast, 0)
    }

    pub fn ft_kblks(k: usize) -> Self {
        Self::preset(Preset::FtKBlks, k)
    }

    pub fn mobiletl(k: usize) -> Self {
        Self::preset(Preset::MobileTlKBlks, k)
    }

    pub fn with_act_backward(mut self, mode: ActBackwardMode) -> Self {
        self.act_backward = Some(mode);
        self
    }

    pub fn with_quantize_frozen(mut self, on: bool) -> Self {
        self.quantize_frozen = on;
        self
    }

    pub fn with_train_head(mut self, on: bool) -> Self {
        self.train_head = on;
        self
    }

    pub fn act_mode(&self) -> ActBackwardMode {
        self.act_backward.unwrap_or(match self.preset {
            Preset::MobileTlKBlks => ActBackwardMode::ApproxSigned,
            _ => ActBackwardMode::Exact,
        })
    }

    /// Index of the first block that receives gradients.
    pub fn boundary(&self, body_len: usize) -> Result<usize> {
        match self.preset {
            Preset::FtAll | Preset::FtBn | Preset::FtBias => Ok(0),
            Preset::FtLast => Ok(body_len),
            Preset::FtKBlks | Preset::MobileTlKBlks => {
                if self.k_blocks > body_len {
                    Err(Error::Policy(format!(
                        "k_blocks {} exceeds the {body_len} blocks of the model",
                        self.k_blocks
                    )))
                } else {
                    Ok(body_len - self.k_blocks)
                }
            }
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Policy(format!("invalid policy: {e}")))
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Parses `ft_all`, `ft_bn`, `ft_bias`, `ft_last`, `ft_kblks:K` or
    /// `mobiletl:K` (alias `mobiletl_kblks:K`).
    pub fn from_shorthand(text: &str) -> Result<Self> {
        let (name, k) = match text.split_once(':') {
            Some((n, k)) => (
                n,
                Some(
                    k.parse::<usize>()
                        .map_err(|_| Error::Policy(format!("bad block count in {text:?}")))?,
                ),
            ),
            None => (text, None),
        };
        let p = match (name, k) {
            ("ft_all", None) => Self::ft_all(),
            ("ft_bn", None) => Self::ft_bn(),
            ("ft_bias", None) => Self::ft_bias(),
            ("ft_last", None) => Self::ft_last(),
            ("ft_kblks", Some(k)) => Self::ft_kblks(k),
            ("mobiletl" | "mobiletl_kblks", Some(k)) => Self::mobiletl(k),
            _ => return Err(Error::Policy(format!("unknown policy {text:?}"))),
        };
        Ok(p)
    }

    /// Identical apart from `act_backward`.
    pub fn differs_only_in_act_backward(&self, other: &TrainPolicy) -> bool {
        let mut a = self.clone();
        a.act_backward = other.act_backward;
        a == *other
    }
}

impl fmt::Display for TrainPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.preset {
            Preset::FtAll => write!(f, "FT_All"),
            Preset::FtBn => write!(f, "FT_BN"),
            Preset::FtBias => write!(f, "FT_Bias"),
            Preset::FtLast => write!(f, "FT_Last"),
            Preset::FtKBlks => write!(f, "FT_{}BLKs", self.k_blocks),
            Preset::MobileTlKBlks => write!(f, "MobileTL_{}BLKs", self.k_blocks),
        }
    }
}

/// Per-layer configuration a policy resolves to.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PolicyPlan {
    pub boundary: usize,
    pub input_requires_grad: bool,
    pub trainable: BTreeSet<ParamId>,
    pub bn_modes: BTreeMap<String, BnMode>,
    pub act_modes: BTreeMap<String, ActBackwardMode>,
    pub quantize: BTreeSet<ParamId>,
}

impl PolicyPlan {
    pub fn trainable_count(&self, decls: &[ParamDecl]) -> usize {
        decls
            .iter()
            .filter(|d| self.trainable.contains(&d.id))
            .map(ParamDecl::numel)
            .sum()
    }

    /// Copies the batch-norm and activation modes onto layer descriptors.
    pub fn configure(&self, blocks: &mut [Block]) {
        for b in blocks {
            for bn in b.batch_norms_mut() {
                bn.mode = self.bn_modes.get(&bn.id).copied().unwrap_or(BnMode::Frozen);
            }
            for a in b.activations_mut() {
                a.mode = self.act_modes.get(&a.id).copied().unwrap_or_default();
            }
        }
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Role {
    Frozen,
    Full,
    MobileTl,
    BnOnly,
    BiasOnly,
    HeadLinearsOnly,
}

/// Resolves a policy against a block list.
pub fn plan_policy(blocks: &[Block], spec_input_requires_grad: bool, policy: &TrainPolicy) -> Result<PolicyPlan> {
    let mut blocks = blocks.to_vec();
    let body_len = blocks.iter().filter(|b| !b.is_head()).count();
    let boundary = policy.boundary(body_len)?;
    let mut plan = PolicyPlan {
        boundary,
        input_requires_grad: spec_input_requires_grad && boundary == 0,
        ..PolicyPlan::default()
    };
    let act = policy.act_mode();
    for (i, block) in blocks.iter_mut().enumerate() {
        let role = if block.is_head() {
            match (policy.train_head, policy.preset) {
                (false, _) => Role::Frozen,
                (true, Preset::FtLast) => Role::HeadLinearsOnly,
                (true, _) => Role::Full,
            }
        } else {
            match policy.preset {
                Preset::FtAll => Role::Full,
                Preset::FtBn => Role::BnOnly,
                Preset::FtBias => Role::BiasOnly,
                Preset::FtLast => Role::Frozen,
                Preset::FtKBlks if i >= boundary => Role::Full,
                Preset::MobileTlKBlks if i >= boundary => Role::MobileTl,
                _ => Role::Frozen,
            }
        };
        let block_act = if block.is_head() { ActBackwardMode::Exact } else { act };
        let decls = block.params();
        let learnable = decls.iter().filter(|d| d.kind.is_learnable());
        let is_se = |d: &ParamDecl| d.id.as_str().contains(".se.");
        let mut train = |d: &ParamDecl| {
            plan.trainable.insert(d.id.clone());
        };
        let bns = block.batch_norms_mut();
        let last_bn = bns.last().map(|b| b.id.clone());
        let bn_ids: Vec<String> = bns.iter().map(|b| b.id.clone()).collect();
        let bn_mode = |id: &str| -> BnMode {
            match role {
                Role::Full | Role::BnOnly => BnMode::Full,
                Role::BiasOnly => BnMode::ShiftOnly,
                Role::MobileTl if Some(id) == last_bn.as_deref() => BnMode::Full,
                Role::MobileTl => BnMode::ShiftOnly,
                Role::Frozen | Role::HeadLinearsOnly => BnMode::Frozen,
            }
        };
        let modes: BTreeMap<String, BnMode> = bn_ids.iter().map(|id| (id.clone(), bn_mode(id))).collect();
        for d in learnable {
            let owner_bn = bn_ids.iter().find(|b| d.id.as_str().starts_with(&format!("{b}.")));
            let on = match (owner_bn, d.kind) {
                (Some(b), ParamKind::Scale) => modes[b] == BnMode::Full,
                (Some(b), ParamKind::Shift) => modes[b] != BnMode::Frozen,
                (Some(_), _) => false,
                (None, kind) => match role {
                    Role::Full | Role::MobileTl => true,
                    Role::BiasOnly => kind == ParamKind::Bias && is_se(d),
                    Role::HeadLinearsOnly => d.shape.len() == 2 || kind == ParamKind::Bias,
                    Role::Frozen | Role::BnOnly => false,
                },
            };
            if on {
                train(d);
            }
        }
        plan.bn_modes.extend(modes);
        let trainable_block = role != Role::Frozen;
        for a in block.activations_mut() {
            let mode = if trainable_block && role != Role::HeadLinearsOnly {
                block_act
            } else {
                ActBackwardMode::Exact
            };
            plan.act_modes.insert(a.id.clone(), mode);
        }
        if policy.quantize_frozen && !block.is_head() && i < boundary {
            for d in block.params() {
                if d.kind == ParamKind::Weight {
                    plan.quantize.insert(d.id.clone());
                }
            }
        }
    }
    Ok(plan)
}

/// Number of parameters that receive gradients under `policy`.
pub fn policy_trainable_param_count<T: Scalar>(model: &Model<T>, policy: &TrainPolicy) -> Result<usize> {
    let plan = plan_policy(model.blocks(), model.spec().input_requires_grad, policy)?;
    let decls: Vec<ParamDecl> = model.blocks().iter().flat_map(Block::params).collect();
    Ok(plan.trainable_count(&decls))
}

/// A model split at `boundary`: blocks below it are frozen (and optionally
/// int8), blocks from it upward train under the policy's rules.
#[derive(Debug, Clone)]
pub struct PartitionedModel<T: Scalar> {
    pub model: Model<T>,
    pub policy: TrainPolicy,
    pub boundary: usize,
}

impl<T: Scalar> PartitionedModel<T> {
    pub fn trainable_param_count(&self) -> usize {
        self.model.trainable_param_count()
    }

    pub fn into_model(self) -> Model<T> {
        self.model
    }
}

/// Applies `policy`, replacing any earlier policy. Weights quantized by an
/// earlier policy are restored to their dequantized values first.
pub fn apply_policy<T: Scalar>(mut model: Model<T>, policy: &TrainPolicy) -> Result<PartitionedModel<T>> {
    let plan = plan_policy(model.blocks(), model.spec().input_requires_grad, policy)?;
    let quantized: Vec<ParamId> = model
        .params()
        .iter()
        .filter(|(_, p)| matches!(p.value, ParamValue::Quantized(_)))
        .map(|(id, _)| id.clone())
        .collect();
    let (blocks, params) = model.parts_mut();
    for id in quantized {
        let dense = params.dense(&id)?.into_owned();
        params.replace_value(&id, ParamValue::Dense(dense))?;
    }
    params.freeze_all();
    for id in &plan.trainable {
        params.set_trainable(id, true)?;
    }
    for id in &plan.quantize {
        let q = quantize_per_tensor_i8(params.dense(id)?.as_ref())?;
        params.replace_value(id, ParamValue::Quantized(q))?;
    }
    plan.configure(blocks);
    model.set_input_requires_grad(plan.input_requires_grad);
    Ok(PartitionedModel {
        model,
        policy: policy.clone(),
        boundary: plan.boundary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::Phase;
    use crate::model::{build_model, irb_v2_96, BlockActivation, BlockSpec, ModelSpec};
    use crate::tape::Tape;
    use crate::tensor::Tensor;

    fn toy5() -> ModelSpec {
        ModelSpec::new(
            [2, 3, 16, 16],
            3,
            vec![
                BlockSpec::conv(3, 8, 3, 2).with_activation(BlockActivation::HardSwish),
                BlockSpec::irb_v2(8, 8, 2, 3, 1),
                BlockSpec::irb_v3(8, 16, 2, 3, 2),
                BlockSpec::irb_v3(16, 16, 2, 3, 1),
                BlockSpec::irb_v2(16, 16, 1, 3, 1),
                BlockSpec::head(16, 3),
            ],
        )
    }

    #[test]
    fn ft_all_trains_everything() {
        let m = build_model::<f32>(&toy5(), 0).unwrap();
        let total = m.param_count();
        let pm = apply_policy(m, &TrainPolicy::ft_all()).unwrap();
        assert_eq!(pm.trainable_param_count(), total);
        for b in pm.model.clone().blocks_mut() {
            assert!(b.batch_norms_mut().iter().all(|bn| bn.mode == BnMode::Full));
            assert!(b.activations_mut().iter().all(|a| a.mode == ActBackwardMode::Exact));
        }
    }

    #[test]
    fn mobiletl_on_irb_v2_96() {
        let m = build_model::<f32>(&irb_v2_96(), 0).unwrap();
        let n = policy_trainable_param_count(&m, &TrainPolicy::mobiletl(1)).unwrap();
        assert_eq!(n, 9216 + 96 + 2400 + 96 + 9216 + 192);
        assert_eq!(n, 21216);
    }

    #[test]
    fn mobiletl_k0_trains_head_only() {
        let m = build_model::<f32>(&toy5(), 0).unwrap();
        let pm = apply_policy(m, &TrainPolicy::mobiletl(0)).unwrap();
        assert_eq!(pm.boundary, 5);
        assert_eq!(pm.trainable_param_count(), 16 * 3 + 3);
    }

    #[test]
    fn mobiletl_three_of_five() {
        let m = build_model::<f32>(&toy5(), 0).unwrap();
        let mut pm = apply_policy(m, &TrainPolicy::mobiletl(3).with_quantize_frozen(true)).unwrap();
        assert_eq!(pm.boundary, 2);
        let params = pm.model.params();
        for (id, p) in params.iter() {
            let block: usize = id.as_str()[1..].split('.').next().unwrap().parse().unwrap();
            let quantized = matches!(p.value, ParamValue::Quantized(_));
            if block < 2 {
                assert!(!p.trainable, "{id}");
                assert_eq!(quantized, p.kind == ParamKind::Weight, "{id}");
            } else {
                assert!(!quantized);
            }
        }
        let blocks = pm.model.blocks_mut();
        let bns: Vec<BnMode> = blocks[2].batch_norms_mut().iter().map(|b| b.mode).collect();
        assert_eq!(bns, vec![BnMode::ShiftOnly, BnMode::ShiftOnly, BnMode::Full]);
        assert!(blocks[3]
            .activations_mut()
            .iter()
            .all(|a| a.mode == ActBackwardMode::ApproxSigned));
        assert!(blocks[0].batch_norms_mut().iter().all(|b| b.mode == BnMode::Frozen));

        let x = Tensor::rand_normal(&[2, 3, 16, 16], 1, 0.0, 1.0).unwrap();
        let mut tape = Tape::new();
        let y1 = pm.model.forward(&mut tape, &x, Phase::Eval).unwrap();
        assert!(tape
            .node_layers()
            .iter()
            .all(|(l, _)| !l.starts_with("b0.") && !l.starts_with("b1.")));
        let y2 = pm.model.forward(&mut Tape::new(), &x, Phase::Eval).unwrap();
        assert_eq!(y1, y2);
    }

    #[test]
    fn too_many_blocks_is_policy_error() {
        let m = build_model::<f32>(&toy5(), 0).unwrap();
        assert!(matches!(
            apply_policy(m, &TrainPolicy::mobiletl(6)),
            Err(Error::Policy(_))
        ));
    }

    #[test]
    fn presets_ordering_of_counts() {
        let m = build_model::<f32>(&toy5(), 0).unwrap();
        let count = |p: TrainPolicy| policy_trainable_param_count(&m, &p).unwrap();
        let all = count(TrainPolicy::ft_all());
        assert_eq!(all, m.param_count());
        for p in [
            TrainPolicy::ft_bn(),
            TrainPolicy::ft_bias(),
            TrainPolicy::ft_last(),
            TrainPolicy::ft_kblks(3),
            TrainPolicy::mobiletl(3),
        ] {
            assert!(count(p) < all);
        }
        assert!(count(TrainPolicy::ft_bias()) < count(TrainPolicy::ft_bn()));
        assert!(count(TrainPolicy::mobiletl(3)) < count(TrainPolicy::ft_kblks(3)));
    }

    #[test]
    fn json_and_shorthand() {
        let p = TrainPolicy::from_json(
            r#"{"preset":"mobiletl_kblks","k_blocks":3,"act_backward":"approx","quantize_frozen":true}"#,
        )
        .unwrap();
        assert_eq!(
            p,
            TrainPolicy::mobiletl(3)
                .with_act_backward(ActBackwardMode::ApproxSigned)
                .with_quantize_frozen(true)
        );
        assert_eq!(p.to_string(), "MobileTL_3BLKs");
        assert_eq!(
            TrainPolicy::from_shorthand("ft_kblks:2").unwrap(),
            TrainPolicy::ft_kblks(2)
        );
        assert!(TrainPolicy::from_shorthand("ft_all:2").is_err());
        assert!(TrainPolicy::from_json(r#"{"preset":"nope"}"#).is_err());
        assert!(p.differs_only_in_act_backward(&TrainPolicy::mobiletl(3).with_quantize_frozen(true)));
        assert!(!p.differs_only_in_act_backward(&TrainPolicy::mobiletl(2)));
    }
}
