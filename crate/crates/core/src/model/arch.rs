use crate::error::Result;
use crate::layers::{
    ActKind, Activation, BatchNorm, Conv2d, ConvGeometry, GlobalAvgPool, Linear, ParamDecl, ResidualAdd, Session,
    SqueezeExcite,
};
use crate::tensor::{Scalar, Tensor};

use super::spec::{BlockKind, BlockSpec};

/// `conv -> BN -> activation`.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    pub conv: Conv2d,
    pub bn: BatchNorm,
    pub act: Option<Activation>,
}

impl Stage {
    fn new(prefix: &str, geom: ConvGeometry, act: Option<ActKind>) -> Self {
        Stage {
            conv: Conv2d::new(prefix, geom),
            bn: BatchNorm::new(format!("{prefix}_bn"), geom.cout),
            act: act.map(|k| Activation::new(format!("{prefix}_act"), k)),
        }
    }

    fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.conv.forward(s, x)?;
        let y = self.bn.forward(s, &y)?;
        match &self.act {
            Some(a) => a.forward(s, &y),
            None => Ok(y),
        }
    }

    fn params(&self) -> Vec<ParamDecl> {
        let mut v = self.conv.params();
        v.extend(self.bn.params());
        v
    }
}

/// Inverted residual block: expand, depthwise, optional SE, project.
#[derive(Debug, Clone, PartialEq)]
pub struct Irb {
    pub expand: Option<Stage>,
    pub depthwise: Stage,
    pub se: Option<SqueezeExcite>,
    pub project: Conv2d,
    pub project_bn: BatchNorm,
    pub residual: Option<ResidualAdd>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub fusion: Option<Stage>,
    pub pool: GlobalAvgPool,
    pub hidden: Option<(Linear, Activation)>,
    pub classifier: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Block {
    Conv(Stage),
    Irb(Irb),
    Head(Head),
}

impl Block {
    /// Builds the layer descriptors of block `index`; the spec must be valid.
    pub fn from_spec(index: usize, b: &BlockSpec, num_classes: usize) -> Result<Block> {
        let p = format!("b{index}");
        let act = b.activation_or_default().kind();
        Ok(match b.kind {
            BlockKind::ConvBlock => Block::Conv(Stage::new(
                &format!("{p}.conv"),
                ConvGeometry::dense(b.in_ch, b.out_ch, b.kernel, b.stride)?,
                act,
            )),
            BlockKind::IrbV2 | BlockKind::IrbV3 => {
                let e = b.exp_channels();
                let act = act.expect("validated");
                let expand = b
                    .has_expand_conv()
                    .then(|| {
                        ConvGeometry::pointwise(b.in_ch, e).map(|g| Stage::new(&format!("{p}.expand"), g, Some(act)))
                    })
                    .transpose()?;
                let se = if b.use_se {
                    Some(SqueezeExcite::new(format!("{p}.se"), e, b.se_channels()?))
                } else {
                    None
                };
                Block::Irb(Irb {
                    expand,
                    depthwise: Stage::new(
                        &format!("{p}.dw"),
                        ConvGeometry::depthwise(e, b.kernel, b.stride)?,
                        Some(act),
                    ),
                    se,
                    project: Conv2d::new(format!("{p}.project"), ConvGeometry::pointwise(e, b.out_ch)?),
                    project_bn: BatchNorm::new(format!("{p}.project_bn"), b.out_ch),
                    residual: b.residual().then(|| ResidualAdd::new(format!("{p}.add"))),
                })
            }
            BlockKind::Head => {
                let mut width = b.in_ch;
                let fusion = match b.fusion_ch {
                    Some(f) => {
                        let st = Stage::new(&format!("{p}.fusion"), ConvGeometry::pointwise(width, f)?, act);
                        width = f;
                        Some(st)
                    }
                    None => None,
                };
                let hidden = b.hidden.map(|h| {
                    let lin = Linear::new(format!("{p}.hidden"), width, h);
                    width = h;
                    (lin, Activation::new(format!("{p}.hidden_act"), act.expect("validated")))
                });
                Block::Head(Head {
                    fusion,
                    pool: GlobalAvgPool::new(format!("{p}.pool")),
                    hidden,
                    classifier: Linear::new(format!("{p}.classifier"), width, num_classes),
                })
            }
        })
    }

    pub fn is_head(&self) -> bool {
        matches!(self, Block::Head(_))
    }

    pub fn params(&self) -> Vec<ParamDecl> {
        match self {
            Block::Conv(st) => st.params(),
            Block::Irb(b) => {
                let mut v = Vec::new();
                if let Some(e) = &b.expand {
                    v.extend(e.params());
                }
                v.extend(b.depthwise.params());
                if let Some(se) = &b.se {
                    v.extend(se.params());
                }
                v.extend(b.project.params());
                v.extend(b.project_bn.params());
                v
            }
            Block::Head(h) => {
                let mut v = h.fusion.as_ref().map(Stage::params).unwrap_or_default();
                if let Some((lin, _)) = &h.hidden {
                    v.extend(lin.params());
                }
                v.extend(h.classifier.params());
                v
            }
        }
    }

    /// Batch norms in forward order; the last one is the block's output BN.
    pub fn batch_norms_mut(&mut self) -> Vec<&mut BatchNorm> {
        match self {
            Block::Conv(st) => vec![&mut st.bn],
            Block::Irb(b) => {
                let mut v = Vec::new();
                if let Some(e) = &mut b.expand {
                    v.push(&mut e.bn);
                }
                v.push(&mut b.depthwise.bn);
                v.push(&mut b.project_bn);
                v
            }
            Block::Head(h) => h.fusion.iter_mut().map(|f| &mut f.bn).collect(),
        }
    }

    pub fn activations_mut(&mut self) -> Vec<&mut Activation> {
        match self {
            Block::Conv(st) => st.act.iter_mut().collect(),
            Block::Irb(b) => {
                let mut v: Vec<&mut Activation> = Vec::new();
                if let Some(e) = &mut b.expand {
                    v.extend(e.act.as_mut());
                }
                v.extend(b.depthwise.act.as_mut());
                v
            }
            Block::Head(h) => {
                let mut v: Vec<&mut Activation> = Vec::new();
                if let Some(f) = &mut h.fusion {
                    v.extend(f.act.as_mut());
                }
                if let Some((_, a)) = &mut h.hidden {
                    v.push(a);
                }
                v
            }
        }
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Block::Conv(st) => st.forward(s, x),
            Block::Irb(b) => {
                let mut h = match &b.expand {
                    Some(e) => e.forward(s, x)?,
                    None => x.clone(),
                };
                h = b.depthwise.forward(s, &h)?;
                if let Some(se) = &b.se {
                    h = se.forward(s, &h)?;
                }
                h = b.project.forward(s, &h)?;
                h = b.project_bn.forward(s, &h)?;
                match &b.residual {
                    Some(add) => add.forward(s, &h, x),
                    None => Ok(h),
                }
            }
            Block::Head(hd) => {
                let mut h = match &hd.fusion {
                    Some(f) => f.forward(s, x)?,
                    None => x.clone(),
                };
                h = hd.pool.forward(s, &h)?;
                if let Some((lin, act)) = &hd.hidden {
                    h = lin.forward(s, &h)?;
                    h = act.forward(s, &h)?;
                }
                hd.classifier.forward(s, &h)
            }
        }
    }
}
