use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{se_squeeze_channels, ActKind, ConvGeometry};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BlockKind {
    #[serde(rename = "conv", alias = "conv_block")]
    ConvBlock,
    #[serde(rename = "irb_v2")]
    IrbV2,
    #[serde(rename = "irb_v3")]
    IrbV3,
    #[serde(rename = "head")]
    Head,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BlockActivation {
    #[serde(rename = "relu6")]
    Relu6,
    #[serde(rename = "hswish", alias = "hardswish")]
    HardSwish,
    #[serde(rename = "none")]
    None,
}

impl BlockActivation {
    pub fn kind(self) -> Option<ActKind> {
        match self {
            BlockActivation::Relu6 => Some(ActKind::Relu6),
            BlockActivation::HardSwish => Some(ActKind::HardSwish),
            BlockActivation::None => None,
        }
    }
}

fn one() -> usize {
    1
}

fn three() -> usize {
    3
}

fn four() -> usize {
    4
}

fn is_false(b: &bool) -> bool {
    !*b
}

/// One entry of a model's block list.
///
/// Only `kind` and `in_ch` are always required. `out_ch` of a head defaults
/// to the model's class count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub in_ch: usize,
    #[serde(default)]
    pub out_ch: usize,
    #[serde(default = "one")]
    pub expansion: usize,
    #[serde(default = "three")]
    pub kernel: usize,
    #[serde(default = "one")]
    pub stride: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub activation: Option<BlockActivation>,
    #[serde(default, skip_serializing_if = "is_false")]
    pub use_se: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub use_residual: Option<bool>,
    /// Expanded width; overrides `in_ch * expansion`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exp_ch: Option<usize>,
    /// Whether the 1x1 expansion conv exists (requires `exp_ch == in_ch` when false).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expand_conv: Option<bool>,
    /// SE bottleneck width; overrides `exp_ch / se_ratio`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub se_ch: Option<usize>,
    #[serde(default = "four")]
    pub se_ratio: usize,
    /// Head: 1x1 conv + BN + activation before pooling.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fusion_ch: Option<usize>,
    /// Head: hidden linear layer + activation before the classifier.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden: Option<usize>,
}

impl BlockSpec {
    fn base(kind: BlockKind, in_ch: usize, out_ch: usize) -> Self {
        BlockSpec {
            kind,
            in_ch,
            out_ch,
            expansion: 1,
            kernel: 3,
            stride: 1,
            activation: None,
            use_se: false,
            use_residual: None,
            exp_ch: None,
            expand_conv: None,
            se_ch: None,
            se_ratio: 4,
            fusion_ch: None,
            hidden: None,
        }
    }

    /// `conv -> BN`, same padding.
    pub fn conv(in_ch: usize, out_ch: usize, kernel: usize, stride: usize) -> Self {
        BlockSpec {
            kernel,
            stride,
            ..Self::base(BlockKind::ConvBlock, in_ch, out_ch)
        }
    }

    pub fn irb_v2(in_ch: usize, out_ch: usize, expansion: usize, kernel: usize, stride: usize) -> Self {
        BlockSpec {
            expansion,
            kernel,
            stride,
            ..Self::base(BlockKind::IrbV2, in_ch, out_ch)
        }
    }

    /// Hard-Swish IRB with an SE gate.
    pub fn irb_v3(in_ch: usize, out_ch: usize, expansion: usize, kernel: usize, stride: usize) -> Self {
        BlockSpec {
            expansion,
            kernel,
            stride,
            use_se: true,
            ..Self::base(BlockKind::IrbV3, in_ch, out_ch)
        }
    }

    pub fn head(in_ch: usize, num_classes: usize) -> Self {
        Self::base(BlockKind::Head, in_ch, num_classes)
    }

    pub fn with_activation(mut self, act: BlockActivation) -> Self {
        self.activation = Some(act);
        self
    }

    pub fn with_se(mut self, use_se: bool) -> Self {
        self.use_se = use_se;
        self
    }

    pub fn with_residual(mut self, residual: bool) -> Self {
        self.use_residual = Some(residual);
        self
    }

    pub fn with_fusion(mut self, channels: usize) -> Self {
        self.fusion_ch = Some(channels);
        self
    }

    pub fn with_hidden(mut self, units: usize) -> Self {
        self.hidden = Some(units);
        self
    }

    pub fn is_head(&self) -> bool {
        self.kind == BlockKind::Head
    }

    pub fn activation_or_default(&self) -> BlockActivation {
        self.activation.unwrap_or(match self.kind {
            BlockKind::ConvBlock => BlockActivation::None,
            BlockKind::IrbV2 => BlockActivation::Relu6,
            BlockKind::IrbV3 | BlockKind::Head => BlockActivation::HardSwish,
        })
    }

    pub fn exp_channels(&self) -> usize {
        self.exp_ch.unwrap_or(self.in_ch * self.expansion)
    }

    pub fn has_expand_conv(&self) -> bool {
        self.expand_conv.unwrap_or(true)
    }

    pub fn residual(&self) -> bool {
        self.use_residual
            .unwrap_or(self.stride == 1 && self.in_ch == self.out_ch)
    }

    pub fn se_channels(&self) -> Result<usize> {
        match self.se_ch {
            Some(s) if s > 0 => Ok(s),
            Some(_) => Err(Error::spec("se_ch must be >= 1")),
            None => se_squeeze_channels(self.exp_channels(), self.se_ratio).map_err(|e| Error::spec(e.to_string())),
        }
    }

    fn validate(&self, index: usize, num_classes: usize) -> Result<()> {
        let fail = |msg: String| Err(Error::spec(format!("block {index}: {msg}")));
        if self.in_ch == 0 {
            return fail("in_ch must be >= 1".into());
        }
        if self.is_head() {
            if self.out_ch != 0 && self.out_ch != num_classes {
                return fail(format!(
                    "head out_ch {} differs from num_classes {num_classes}",
                    self.out_ch
                ));
            }
            if self.fusion_ch == Some(0) || self.hidden == Some(0) {
                return fail("head widths must be >= 1".into());
            }
            if self.activation_or_default() == BlockActivation::None
                && (self.fusion_ch.is_some() || self.hidden.is_some())
            {
                return fail("head fusion/hidden layers need an activation".into());
            }
            return Ok(());
        }
        if self.out_ch == 0 {
            return fail("out_ch must be >= 1".into());
        }
        if self.kernel % 2 == 0 {
            return fail(format!("kernel {} must be odd", self.kernel));
        }
        if !(self.stride == 1 || self.stride == 2) {
            return fail(format!("stride {} must be 1 or 2", self.stride));
        }
        if self.use_residual == Some(true) && !(self.stride == 1 && self.in_ch == self.out_ch) {
            return fail("residual needs stride 1 and in_ch == out_ch".into());
        }
        match self.kind {
            BlockKind::ConvBlock => {
                if self.use_se {
                    return fail("conv blocks have no SE".into());
                }
            }
            BlockKind::IrbV2 | BlockKind::IrbV3 => {
                if self.expansion == 0 || self.exp_channels() == 0 {
                    return fail("expansion must be >= 1".into());
                }
                if !self.has_expand_conv() && self.exp_channels() != self.in_ch {
                    return fail("a block without expansion conv needs exp_ch == in_ch".into());
                }
                if self.activation_or_default() == BlockActivation::None {
                    return fail("inverted residual blocks need an activation".into());
                }
                if self.use_se {
                    if self.kind == BlockKind::IrbV2 {
                        return fail("SE is only available on irb_v3".into());
                    }
                    self.se_channels()
                        .map_err(|e| Error::spec(format!("block {index}: {e}")))?;
                }
            }
            BlockKind::Head => unreachable!(),
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_shape: [usize; 4],
    pub num_classes: usize,
    pub blocks: Vec<BlockSpec>,
    /// Whether the first layer also computes a gradient for the model input.
    #[serde(default, skip_serializing_if = "is_false")]
    pub input_requires_grad: bool,
}

impl ModelSpec {
    pub fn new(input_shape: [usize; 4], num_classes: usize, blocks: Vec<BlockSpec>) -> Self {
        ModelSpec {
            input_shape,
            num_classes,
            blocks,
            input_requires_grad: false,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: ModelSpec =
            serde_json::from_str(text).map_err(|e| Error::spec(format!("invalid model spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serializes")
    }

    pub fn batch(&self) -> usize {
        self.input_shape[0]
    }

    pub fn with_batch(mut self, batch: usize) -> Self {
        self.input_shape[0] = batch;
        self
    }

    pub fn head(&self) -> Option<&BlockSpec> {
        self.blocks.last().filter(|b| b.is_head())
    }

    /// Number of non-head blocks.
    pub fn body_len(&self) -> usize {
        self.blocks.iter().filter(|b| !b.is_head()).count()
    }

    /// Checks channel chaining, spatial extents and per-block rules.
    pub fn validate(&self) -> Result<()> {
        if self.input_shape.contains(&0) {
            return Err(Error::spec(format!(
                "input shape {:?} has a zero dimension",
                self.input_shape
            )));
        }
        if self.num_classes == 0 {
            return Err(Error::spec("num_classes must be >= 1"));
        }
        let [_, mut ch, mut h, mut w] = self.input_shape;
        for (i, b) in self.blocks.iter().enumerate() {
            if b.is_head() && i + 1 != self.blocks.len() {
                return Err(Error::spec(format!("block {i}: the head must be the last block")));
            }
            if b.in_ch != ch {
                return Err(Error::spec(format!(
                    "block {i}: in_ch {} does not chain from {ch}",
                    b.in_ch
                )));
            }
            b.validate(i, self.num_classes)?;
            if !b.is_head() {
                let g = ConvGeometry::dense(b.in_ch, b.out_ch, b.kernel, b.stride)
                    .map_err(|e| Error::spec(e.to_string()))?;
                (h, w) = g.out_hw(h, w).map_err(|e| Error::spec(format!("block {i}: {e}")))?;
                ch = b.out_ch;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip_and_defaults() {
        let text = r#"{"input_shape":[8,96,7,7],"num_classes":10,
            "blocks":[{"kind":"irb_v3","in_ch":96,"out_ch":96,"expansion":1,"kernel":5,"stride":1,"activation":"hswish","use_se":true}]}"#;
        let spec = ModelSpec::from_json(text).unwrap();
        let b = &spec.blocks[0];
        assert!(b.residual());
        assert_eq!(b.se_channels().unwrap(), 24);
        let again = ModelSpec::from_json(&spec.to_json()).unwrap();
        assert_eq!(again, spec);
    }

    #[test]
    fn chain_mismatch_is_rejected() {
        let spec = ModelSpec::new(
            [1, 3, 8, 8],
            2,
            vec![BlockSpec::conv(3, 8, 3, 1), BlockSpec::irb_v2(16, 16, 1, 3, 1)],
        );
        assert!(matches!(spec.validate(), Err(Error::Spec(_))));
    }

    #[test]
    fn invalid_blocks_are_rejected() {
        let bad = [
            BlockSpec::conv(3, 3, 4, 1),
            BlockSpec::conv(3, 3, 3, 3),
            BlockSpec::irb_v2(3, 6, 1, 3, 1).with_residual(true),
            BlockSpec::irb_v2(3, 3, 1, 3, 1).with_se(true),
            BlockSpec::irb_v3(6, 6, 1, 3, 1),
        ];
        for b in bad {
            let spec = ModelSpec::new([1, b.in_ch, 8, 8], 2, vec![b.clone()]);
            assert!(spec.validate().is_err(), "{b:?}");
        }
        let head_first = ModelSpec::new(
            [1, 3, 8, 8],
            2,
            vec![BlockSpec::head(3, 2), BlockSpec::conv(3, 3, 3, 1)],
        );
        assert!(head_first.validate().is_err());
    }
}
