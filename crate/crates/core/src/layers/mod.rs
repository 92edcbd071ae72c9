//! Layer forward/backward kernels.
//!
//! Each layer decides at forward time which buffers its backward pass needs
//! and registers exactly those on the tape. A layer records a tape node only
//! when its output requires a gradient: its input does, or it owns a
//! trainable parameter.

mod activation;
mod add;
mod batchnorm;
mod conv;
mod linear;
mod loss;
mod pool;
mod se;

pub use activation::{
    hardsigmoid_backward, hardsigmoid_forward, hardswish_backward, hardswish_forward, hardswish_grad, relu6_backward,
    relu6_forward, ActBackwardMode, ActKind, ActSaved, Activation,
};
pub use add::{residual_add, ResidualAdd};
pub use batchnorm::{bn_eval_forward, BatchNorm, BnMode};
pub use conv::{conv2d_backward, conv2d_forward, Conv2d, ConvGeometry};
pub use linear::{linear_forward, Linear};
pub use loss::{softmax_cross_entropy, weighted_sum, LOSS_LAYER};
pub use pool::{global_avg_pool, GlobalAvgPool};
pub use se::{se_squeeze_channels, SqueezeExcite};

use crate::params::{ParamId, ParamKind, ParamStore};
use crate::tape::Tape;
use crate::tensor::{Scalar, Tensor};

/// How batch normalization behaves in a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Phase {
    /// Batch statistics; running statistics updated.
    #[default]
    Train,
    /// Running statistics.
    Eval,
    /// Batch statistics without touching running statistics.
    BatchStatsNoUpdate,
}

/// Mutable state threaded through a forward pass.
pub struct Session<'a, T: Scalar> {
    pub params: &'a mut ParamStore<T>,
    pub tape: &'a mut Tape<T>,
    pub phase: Phase,
}

impl<'a, T: Scalar> Session<'a, T> {
    pub fn new(params: &'a mut ParamStore<T>, tape: &'a mut Tape<T>, phase: Phase) -> Self {
        Session { params, tape, phase }
    }

    pub fn requires_grad(&self, t: &Tensor<T>) -> bool {
        self.tape.requires_grad(t.id())
    }

    pub fn trainable(&self, id: &ParamId) -> bool {
        self.params.is_trainable(id)
    }
}

/// Declaration of one parameter a layer owns.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamDecl {
    pub id: ParamId,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
}

impl ParamDecl {
    pub(crate) fn new(id: ParamId, kind: ParamKind, shape: Vec<usize>) -> Self {
        ParamDecl { id, kind, shape }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

pub(crate) fn param_id(layer: &str, name: &str) -> ParamId {
    ParamId::new(format!("{layer}.{name}"))
}
