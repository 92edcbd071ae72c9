//! Reverse-mode tape with a byte-accounted saved-for-backward registry.
//!
//! Layers decide at forward time what their backward pass needs and hand
//! exactly those buffers to [`Tape::save_dense`] / [`Tape::save_mask`]. The
//! registry is the ground truth the profiler is audited against.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::params::{Gradients, ParamStore};
use crate::tensor::{Mask, MaskWidth, Scalar, Tensor, TensorId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum SaveKind {
    FullMap,
    Mask1,
    Mask2,
    SmallVector,
    NormStats,
}

impl SaveKind {
    /// Stored bits per element for element type `T`.
    pub fn bits_per_element<T: Scalar>(self) -> usize {
        match self {
            SaveKind::Mask1 => 1,
            SaveKind::Mask2 => 2,
            SaveKind::FullMap | SaveKind::SmallVector | SaveKind::NormStats => T::DTYPE.bit_width(),
        }
    }

    pub fn bytes_for<T: Scalar>(self, elements: usize) -> usize {
        (elements * self.bits_per_element::<T>()).div_ceil(8)
    }
}

impl fmt::Display for SaveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Registry key: the tensor a buffer was derived from plus how it is stored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SaveKey {
    pub tensor_id: TensorId,
    pub kind: SaveKind,
}

/// Accounting record of one saved buffer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SavedBuffer {
    pub tensor_id: TensorId,
    pub kind: SaveKind,
    pub bytes: usize,
    /// Layer that first saved the buffer.
    pub layer: String,
}

pub(crate) enum Payload<T> {
    Dense(Tensor<T>),
    Mask(Mask),
}

/// Read access to saved buffers during backward.
pub struct Saved<'a, T> {
    payloads: &'a HashMap<SaveKey, Payload<T>>,
}

impl<'a, T: Scalar> Saved<'a, T> {
    pub fn dense(&self, key: SaveKey) -> Result<&'a Tensor<T>> {
        match self.payloads.get(&key) {
            Some(Payload::Dense(t)) => Ok(t),
            Some(Payload::Mask(_)) => Err(Error::state(format!("saved {key:?} is a mask"))),
            None => Err(Error::state(format!("saved buffer {key:?} missing"))),
        }
    }

    pub fn mask(&self, key: SaveKey) -> Result<&'a Mask> {
        match self.payloads.get(&key) {
            Some(Payload::Mask(m)) => Ok(m),
            Some(Payload::Dense(_)) => Err(Error::state(format!("saved {key:?} is dense"))),
            None => Err(Error::state(format!("saved buffer {key:?} missing"))),
        }
    }
}

/// Everything a node's backward function gets to see.
pub struct BackwardCtx<'a, T> {
    pub grad_out: &'a Tensor<T>,
    pub saved: Saved<'a, T>,
    pub params: &'a ParamStore<T>,
    pub grads: &'a mut Gradients<T>,
    /// Which inputs (by position) need a gradient.
    pub input_needs_grad: &'a [bool],
}

pub trait Backward<T: Scalar>: Send {
    /// Returns one optional gradient per recorded input.
    fn backward(&self, ctx: BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>>;
}

struct Node<T> {
    layer: String,
    op: &'static str,
    inputs: Vec<TensorId>,
    output: TensorId,
    output_numel: usize,
    saved: Vec<SaveKey>,
    backward: Box<dyn Backward<T>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TapeState {
    Recording,
    Consumed,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    saved: Vec<SavedBuffer>,
    index: HashMap<SaveKey, usize>,
    payloads: HashMap<SaveKey, Payload<T>>,
    requires_grad: HashSet<TensorId>,
    watched: Vec<TensorId>,
    temp: BTreeMap<String, usize>,
    state: TapeState,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            saved: Vec::new(),
            index: HashMap::new(),
            payloads: HashMap::new(),
            requires_grad: HashSet::new(),
            watched: Vec::new(),
            temp: BTreeMap::new(),
            state: TapeState::Recording,
        }
    }

    /// Marks an input so its gradient is returned by [`Tape::backward`].
    pub fn watch(&mut self, t: &Tensor<T>) {
        self.requires_grad.insert(t.id());
        if !self.watched.contains(&t.id()) {
            self.watched.push(t.id());
        }
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.requires_grad.contains(&id)
    }

    pub fn is_consumed(&self) -> bool {
        self.state == TapeState::Consumed
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Layer ids of recorded nodes in forward order.
    pub fn node_layers(&self) -> Vec<(&str, &'static str)> {
        self.nodes.iter().map(|n| (n.layer.as_str(), n.op)).collect()
    }

    /// `(layer, output element count)` per recorded node.
    pub fn node_outputs(&self) -> Vec<(&str, usize)> {
        self.nodes.iter().map(|n| (n.layer.as_str(), n.output_numel)).collect()
    }

    fn register(&mut self, layer: &str, key: SaveKey, elements: usize, payload: Payload<T>) -> SaveKey {
        if self.index.contains_key(&key) {
            return key;
        }
        self.index.insert(key, self.saved.len());
        self.saved.push(SavedBuffer {
            tensor_id: key.tensor_id,
            kind: key.kind,
            bytes: key.kind.bytes_for::<T>(elements),
            layer: layer.to_string(),
        });
        self.payloads.insert(key, payload);
        key
    }

    /// Saves a dense tensor (shares its buffer). Saving the same tensor with
    /// the same kind twice is counted once.
    pub fn save_dense(&mut self, layer: &str, t: &Tensor<T>, kind: SaveKind) -> SaveKey {
        debug_assert!(!matches!(kind, SaveKind::Mask1 | SaveKind::Mask2));
        let key = SaveKey {
            tensor_id: t.id(),
            kind,
        };
        self.register(layer, key, t.numel(), Payload::Dense(t.clone()))
    }

    /// Saves a packed mask derived from tensor `source`.
    pub fn save_mask(&mut self, layer: &str, source: TensorId, mask: Mask) -> SaveKey {
        let kind = match mask.width() {
            MaskWidth::One => SaveKind::Mask1,
            MaskWidth::Two => SaveKind::Mask2,
        };
        let key = SaveKey {
            tensor_id: source,
            kind,
        };
        let n = mask.len();
        self.register(layer, key, n, Payload::Mask(mask))
    }

    /// Records an op. The output is marked as requiring grad.
    pub fn record(
        &mut self,
        layer: &str,
        op: &'static str,
        inputs: &[TensorId],
        output: &Tensor<T>,
        saved: Vec<SaveKey>,
        backward: Box<dyn Backward<T>>,
    ) {
        self.requires_grad.insert(output.id());
        self.nodes.push(Node {
            layer: layer.to_string(),
            op,
            inputs: inputs.to_vec(),
            output: output.id(),
            output_numel: output.numel(),
            saved,
            backward,
        });
    }

    /// Records forward scratch memory for a layer (largest value kept).
    pub fn note_temp(&mut self, layer: &str, bytes: usize) {
        let e = self.temp.entry(layer.to_string()).or_insert(0);
        *e = (*e).max(bytes);
    }

    pub fn temp_bytes_by_layer(&self) -> &BTreeMap<String, usize> {
        &self.temp
    }

    pub fn saved_buffers(&self) -> &[SavedBuffer] {
        &self.saved
    }

    /// Total saved-for-backward bytes recorded by the forward pass.
    pub fn saved_bytes(&self) -> usize {
        self.saved.iter().map(|s| s.bytes).sum()
    }

    /// Bytes still held (drops to zero once backward has released them).
    pub fn live_saved_bytes(&self) -> usize {
        self.payloads.keys().map(|k| self.saved[self.index[k]].bytes).sum()
    }

    pub fn saved_bytes_by_layer(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for s in &self.saved {
            *out.entry(s.layer.clone()).or_insert(0) += s.bytes;
        }
        out
    }

    /// Runs the recorded nodes in reverse from a scalar loss.
    pub fn backward(&mut self, loss: &Tensor<T>, params: &ParamStore<T>) -> Result<Gradients<T>> {
        if self.state == TapeState::Consumed {
            return Err(Error::state("backward already ran on this tape"));
        }
        if loss.numel() != 1 {
            return Err(Error::shape(format!(
                "loss must be a scalar, got shape {:?}",
                loss.shape()
            )));
        }
        self.state = TapeState::Consumed;
        let mut grads = Gradients::default();
        if !self.requires_grad.contains(&loss.id()) {
            self.payloads.clear();
            return Ok(grads);
        }
        if !self.nodes.iter().any(|n| n.output == loss.id()) && !self.watched.contains(&loss.id()) {
            return Err(Error::state("loss was not produced on this tape"));
        }

        let mut uses: HashMap<SaveKey, usize> = HashMap::new();
        for n in &self.nodes {
            for k in &n.saved {
                *uses.entry(*k).or_insert(0) += 1;
            }
        }

        let mut flowing: HashMap<TensorId, Tensor<T>> = HashMap::new();
        flowing.insert(loss.id(), Tensor::full(loss.shape(), T::one())?);
        let nodes = std::mem::take(&mut self.nodes);
        for node in nodes.into_iter().rev() {
            if let Some(grad_out) = flowing.remove(&node.output) {
                if self.watched.contains(&node.output) {
                    accumulate(&mut grads.inputs, node.output, grad_out.clone())?;
                }
                let needs: Vec<bool> = node.inputs.iter().map(|id| self.requires_grad.contains(id)).collect();
                let input_grads = node.backward.backward(BackwardCtx {
                    grad_out: &grad_out,
                    saved: Saved {
                        payloads: &self.payloads,
                    },
                    params,
                    grads: &mut grads,
                    input_needs_grad: &needs,
                })?;
                for ((id, g), need) in node.inputs.iter().zip(input_grads).zip(&needs) {
                    if let (Some(g), true) = (g, *need) {
                        accumulate(&mut flowing, *id, g)?;
                    }
                }
            }
            for k in &node.saved {
                let left = uses.get_mut(k).expect("counted above");
                *left -= 1;
                if *left == 0 {
                    self.payloads.remove(k);
                }
            }
        }
        for id in &self.watched {
            if let Some(g) = flowing.remove(id) {
                accumulate(&mut grads.inputs, *id, g)?;
            }
        }
        Ok(grads)
    }
}

fn accumulate<T: Scalar>(map: &mut HashMap<TensorId, Tensor<T>>, id: TensorId, g: Tensor<T>) -> Result<()> {
    match map.get_mut(&id) {
        Some(existing) => existing.add_assign(&g),
        None => {
            map.insert(id, g);
            Ok(())
        }
    }
}
