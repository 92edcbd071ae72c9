//! Declarative model specs and the layer graphs built from them.

mod arch;
mod bundled;
mod checkpoint;
mod spec;

pub use arch::{Block, Head, Irb, Stage};
pub use bundled::{bundled_names, bundled_spec, conv_96, irb_v2_96, irb_v3_96, mobilenet_v3_small};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use spec::{BlockActivation, BlockKind, BlockSpec, ModelSpec};

use crate::error::{Error, Result};
use crate::layers::{softmax_cross_entropy, weighted_sum, ParamDecl, Phase, Session};
use crate::params::{ParamKind, ParamStore};
use crate::tape::Tape;
use crate::tensor::{Scalar, Tensor};

/// Layer descriptors for every block of a valid spec.
pub fn architecture(spec: &ModelSpec) -> Result<Vec<Block>> {
    spec.validate()?;
    spec.blocks
        .iter()
        .enumerate()
        .map(|(i, b)| Block::from_spec(i, b, spec.num_classes))
        .collect()
}

/// Learnable parameter count of a spec (running statistics excluded).
pub fn spec_param_count(spec: &ModelSpec) -> Result<usize> {
    Ok(architecture(spec)?
        .iter()
        .flat_map(Block::params)
        .filter(|d| d.kind.is_learnable())
        .map(|d| d.numel())
        .sum())
}

pub fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn init_param<T: Scalar>(d: &ParamDecl, seed: u64) -> Result<Tensor<T>> {
    match d.kind {
        ParamKind::Weight => {
            let fan_in: usize = d.shape[1..].iter().product();
            let std = if d.shape.len() == 4 {
                (2.0 / fan_in as f64).sqrt()
            } else {
                (1.0 / fan_in as f64).sqrt()
            };
            Tensor::rand_normal(&d.shape, seed, 0.0, std)
        }
        ParamKind::Scale | ParamKind::RunningVar => Tensor::full(&d.shape, T::one()),
        ParamKind::Bias | ParamKind::Shift | ParamKind::RunningMean => Tensor::zeros(&d.shape),
    }
}

/// A layer graph plus its parameters.
#[derive(Debug, Clone)]
pub struct Model<T: Scalar> {
    spec: ModelSpec,
    blocks: Vec<Block>,
    params: ParamStore<T>,
    input_requires_grad: bool,
}

/// Builds a model with He-normal conv weights, `N(0, 1/fan_in)` linear
/// weights, zero biases and identity batch norms. Every learnable parameter
/// starts trainable with full batch norms and exact activations.
pub fn build_model<T: Scalar>(spec: &ModelSpec, seed: u64) -> Result<Model<T>> {
    let blocks = architecture(spec)?;
    let mut params = ParamStore::new();
    let decls: Vec<ParamDecl> = blocks.iter().flat_map(Block::params).collect();
    for (i, d) in decls.iter().enumerate() {
        params.insert(d.id.clone(), d.kind, init_param(d, mix_seed(seed, i as u64))?);
        if d.kind.is_learnable() {
            params.set_trainable(&d.id, true)?;
        }
    }
    Ok(Model {
        spec: spec.clone(),
        blocks,
        params,
        input_requires_grad: spec.input_requires_grad,
    })
}

impl<T: Scalar> Model<T> {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    #[cfg(test)]
    pub(crate) fn blocks_mut(&mut self) -> &mut [Block] {
        &mut self.blocks
    }

    pub(crate) fn parts_mut(&mut self) -> (&mut [Block], &mut ParamStore<T>) {
        (&mut self.blocks, &mut self.params)
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn has_head(&self) -> bool {
        self.blocks.last().is_some_and(Block::is_head)
    }

    /// Number of non-head blocks.
    pub fn body_len(&self) -> usize {
        self.blocks.iter().filter(|b| !b.is_head()).count()
    }

    pub fn input_requires_grad(&self) -> bool {
        self.input_requires_grad
    }

    pub fn set_input_requires_grad(&mut self, on: bool) {
        self.input_requires_grad = on;
    }

    pub fn param_count(&self) -> usize {
        self.params.param_count()
    }

    pub fn trainable_param_count(&self) -> usize {
        self.params.trainable_count()
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let want = &self.spec.input_shape[1..];
        if x.shape().len() != 4 || &x.shape()[1..] != want {
            return Err(Error::shape(format!(
                "model expects [B, {}, {}, {}], got {:?}",
                want[0],
                want[1],
                want[2],
                x.shape()
            )));
        }
        Ok(())
    }

    /// Runs every block, recording onto `tape`.
    pub fn forward(&mut self, tape: &mut Tape<T>, x: &Tensor<T>, phase: Phase) -> Result<Tensor<T>> {
        self.check_input(x)?;
        if self.input_requires_grad {
            tape.watch(x);
        }
        let mut s = Session::new(&mut self.params, tape, phase);
        let mut h = x.clone();
        for b in &self.blocks {
            h = b.forward(&mut s, &h)?;
        }
        Ok(h)
    }

    /// Mean cross-entropy of the head's logits.
    pub fn loss(&mut self, tape: &mut Tape<T>, x: &Tensor<T>, labels: &[usize], phase: Phase) -> Result<Tensor<T>> {
        if !self.has_head() {
            return Err(Error::spec("cross-entropy loss needs a head block"));
        }
        let logits = self.forward(tape, x, phase)?;
        let mut s = Session::new(&mut self.params, tape, phase);
        softmax_cross_entropy(&mut s, &logits, labels)
    }

    /// `sum(f(x) * r)` with `r ~ N(0, 1)` drawn from `seed`; a loss for
    /// models without a head.
    pub fn probe_objective(&mut self, tape: &mut Tape<T>, x: &Tensor<T>, phase: Phase, seed: u64) -> Result<Tensor<T>> {
        let y = self.forward(tape, x, phase)?;
        let r = Tensor::rand_normal(y.shape(), seed, 0.0, 1.0)?;
        let mut s = Session::new(&mut self.params, tape, phase);
        weighted_sum(&mut s, &y, &r)
    }

    /// Arg-max class per sample using running statistics.
    pub fn predict(&mut self, x: &Tensor<T>) -> Result<Vec<usize>> {
        if !self.has_head() {
            return Err(Error::spec("prediction needs a head block"));
        }
        let mut tape = Tape::new();
        let logits = self.forward(&mut tape, x, Phase::Eval)?;
        let k = logits.shape()[1];
        Ok(logits
            .data()
            .chunks(k)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold(
                        (0, T::neg_infinity()),
                        |best, (i, &v)| if v > best.1 { (i, v) } else { best },
                    )
                    .0
            })
            .collect())
    }
}

/// Learnable parameter count of a model.
pub fn param_count<T: Scalar>(model: &Model<T>) -> usize {
    model.param_count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toy() -> ModelSpec {
        ModelSpec::new(
            [2, 3, 8, 8],
            4,
            vec![
                BlockSpec::conv(3, 8, 3, 2).with_activation(BlockActivation::HardSwish),
                BlockSpec::irb_v2(8, 8, 2, 3, 1),
                BlockSpec::head(8, 4),
            ],
        )
    }

    #[test]
    fn block_96_counts() {
        assert_eq!(spec_param_count(&conv_96()).unwrap(), 230592);
        assert_eq!(spec_param_count(&irb_v2_96()).unwrap(), 21408);
        assert_eq!(spec_param_count(&irb_v3_96()).unwrap(), 26136);
        let m = build_model::<f32>(&irb_v2_96(), 0).unwrap();
        assert_eq!(param_count(&m), 21408);
    }

    #[test]
    fn head_only_model_is_linear_classifier() {
        let spec = ModelSpec::new([2, 5, 3, 3], 3, vec![BlockSpec::head(5, 3)]);
        let mut m = build_model::<f32>(&spec, 1).unwrap();
        assert_eq!(m.param_count(), 5 * 3 + 3);
        let x = Tensor::zeros(&[2, 5, 3, 3]).unwrap();
        let y = m.forward(&mut Tape::new(), &x, Phase::Eval).unwrap();
        assert_eq!(y.shape(), &[2, 3]);
    }

    #[test]
    fn forward_on_zeros_is_finite() {
        let mut m = build_model::<f32>(&toy(), 3).unwrap();
        let x = Tensor::zeros(&[2, 3, 8, 8]).unwrap();
        let y = m.forward(&mut Tape::new(), &x, Phase::Train).unwrap();
        assert_eq!(y.shape(), &[2, 4]);
        assert!(y.is_finite());
        assert!(m
            .forward(&mut Tape::new(), &Tensor::zeros(&[2, 4, 8, 8]).unwrap(), Phase::Train)
            .is_err());
    }

    #[test]
    fn same_seed_same_params() {
        let a = build_model::<f32>(&toy(), 11).unwrap();
        let b = build_model::<f32>(&toy(), 11).unwrap();
        let c = build_model::<f32>(&toy(), 12).unwrap();
        assert_eq!(a.params().trainable_vector(), b.params().trainable_vector());
        assert_ne!(a.params().trainable_vector(), c.params().trainable_vector());
    }

    /// Independent closed-form count.
    fn closed_form(b: &BlockSpec, classes: usize) -> usize {
        let bn = |c: usize| 2 * c;
        match b.kind {
            BlockKind::ConvBlock => b.kernel * b.kernel * b.in_ch * b.out_ch + bn(b.out_ch),
            BlockKind::IrbV2 | BlockKind::IrbV3 => {
                let e = b.exp_channels();
                let expand = if b.has_expand_conv() { b.in_ch * e + bn(e) } else { 0 };
                let dw = b.kernel * b.kernel * e + bn(e);
                let se = if b.use_se {
                    let r = b.se_channels().unwrap();
                    e * r + r + r * e + e
                } else {
                    0
                };
                expand + dw + se + e * b.out_ch + bn(b.out_ch)
            }
            BlockKind::Head => {
                let mut w = b.in_ch;
                let mut n = 0;
                if let Some(f) = b.fusion_ch {
                    n += w * f + bn(f);
                    w = f;
                }
                if let Some(h) = b.hidden {
                    n += w * h + h;
                    w = h;
                }
                n + w * classes + classes
            }
        }
    }

    proptest! {
        #[test]
        fn param_count_matches_closed_form(
            kind in 0usize..3,
            cin in 1usize..5,
            cout in 1usize..5,
            exp in 1usize..4,
            k in prop::sample::select(vec![1usize, 3, 5]),
            stride in 1usize..3,
            residual in any::<bool>(),
        ) {
            let cin = cin * 4;
            let cout = if residual && stride == 1 { cin } else { cout * 4 };
            let b = match kind {
                0 => BlockSpec::conv(cin, cout, k, stride),
                1 => BlockSpec::irb_v2(cin, cout, exp, k, stride),
                _ => BlockSpec::irb_v3(cin, cout, exp, k, stride),
            };
            let spec = ModelSpec::new([1, cin, 9, 9], 3, vec![b.clone(), BlockSpec::head(cout, 3).with_hidden(5)]);
            let want = closed_form(&b, 3) + closed_form(&spec.blocks[1], 3);
            prop_assert_eq!(spec_param_count(&spec).unwrap(), want);
            let no_res = ModelSpec::new(spec.input_shape, 3, vec![b.clone().with_residual(false), spec.blocks[1].clone()]);
            prop_assert_eq!(spec_param_count(&no_res).unwrap(), want);
            let m = build_model::<f32>(&spec, 0).unwrap();
            let y = m.clone().forward(&mut Tape::new(), &Tensor::zeros(&[1, cin, 9, 9]).unwrap(), Phase::Train).unwrap();
            prop_assert_eq!(y.shape(), &[1, 3]);
        }

        #[test]
        fn output_shape_follows_conv_arithmetic(h in 1usize..12, stride in 1usize..3, k in prop::sample::select(vec![1usize, 3, 5])) {
            let spec = ModelSpec::new([1, 4, h, h], 2, vec![BlockSpec::irb_v2(4, 8, 2, k, stride)]);
            let mut m = build_model::<f32>(&spec, 0).unwrap();
            let y = m.forward(&mut Tape::new(), &Tensor::zeros(&[1, 4, h, h]).unwrap(), Phase::Eval).unwrap();
            let o = (h + 2 * (k / 2) - k) / stride + 1;
            prop_assert_eq!(y.shape(), &[1, 8, o, o]);
        }
    }
}
