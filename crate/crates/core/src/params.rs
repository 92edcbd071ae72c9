//! Named parameter storage shared by layers, the optimizer and checkpoints.

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::QuantizedTensor;
use crate::tensor::{Scalar, Tensor, TensorId};

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(String);

impl ParamId {
    pub fn new(name: impl Into<String>) -> Self {
        ParamId(name.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ParamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Scale,
    Shift,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    /// Running statistics are state, not learnable parameters.
    pub fn is_learnable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ParamValue<T> {
    Dense(Tensor<T>),
    Quantized(QuantizedTensor),
}

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub kind: ParamKind,
    pub value: ParamValue<T>,
    pub trainable: bool,
}

impl<T: Scalar> Param<T> {
    pub fn shape(&self) -> &[usize] {
        match &self.value {
            ParamValue::Dense(t) => t.shape(),
            ParamValue::Quantized(q) => q.shape(),
        }
    }

    pub fn numel(&self) -> usize {
        self.shape().iter().product()
    }

    /// Bytes the parameter occupies in memory: 1 per element plus the scale
    /// when quantized.
    pub fn byte_len(&self) -> usize {
        match &self.value {
            ParamValue::Dense(t) => t.byte_len(),
            ParamValue::Quantized(q) => q.byte_len(),
        }
    }
}

/// Insertion-ordered parameter map.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    order: Vec<ParamId>,
    entries: HashMap<ParamId, Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            order: Vec::new(),
            entries: HashMap::new(),
        }
    }

    pub fn insert(&mut self, id: ParamId, kind: ParamKind, value: Tensor<T>) {
        if !self.entries.contains_key(&id) {
            self.order.push(id.clone());
        }
        self.entries.insert(
            id,
            Param {
                kind,
                value: ParamValue::Dense(value),
                trainable: false,
            },
        );
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn contains(&self, id: &ParamId) -> bool {
        self.entries.contains_key(id)
    }

    pub fn get(&self, id: &ParamId) -> Result<&Param<T>> {
        self.entries
            .get(id)
            .ok_or_else(|| Error::state(format!("unknown parameter {id}")))
    }

    pub fn get_mut(&mut self, id: &ParamId) -> Result<&mut Param<T>> {
        self.entries
            .get_mut(id)
            .ok_or_else(|| Error::state(format!("unknown parameter {id}")))
    }

    /// Dense view of a parameter, dequantizing int8 weights on the fly.
    pub fn dense(&self, id: &ParamId) -> Result<Cow<'_, Tensor<T>>> {
        Ok(match &self.get(id)?.value {
            ParamValue::Dense(t) => Cow::Borrowed(t),
            ParamValue::Quantized(q) => Cow::Owned(q.dequantize()),
        })
    }

    pub fn tensor_mut(&mut self, id: &ParamId) -> Result<&mut Tensor<T>> {
        match &mut self.get_mut(id)?.value {
            ParamValue::Dense(t) => Ok(t),
            ParamValue::Quantized(_) => Err(Error::state(format!(
                "parameter {id} is quantized and cannot be updated"
            ))),
        }
    }

    pub fn is_trainable(&self, id: &ParamId) -> bool {
        self.entries.get(id).is_some_and(|p| p.trainable)
    }

    pub fn set_trainable(&mut self, id: &ParamId, trainable: bool) -> Result<()> {
        let p = self.get_mut(id)?;
        if trainable && (!p.kind.is_learnable() || matches!(p.value, ParamValue::Quantized(_))) {
            return Err(Error::state(format!("parameter {id} cannot be trained")));
        }
        p.trainable = trainable;
        Ok(())
    }

    pub fn freeze_all(&mut self) {
        for p in self.entries.values_mut() {
            p.trainable = false;
        }
    }

    pub(crate) fn replace_value(&mut self, id: &ParamId, value: ParamValue<T>) -> Result<()> {
        let p = self.get_mut(id)?;
        if p.shape() != value_shape(&value) {
            return Err(Error::shape(format!("replacement for {id} changes its shape")));
        }
        if matches!(value, ParamValue::Quantized(_)) {
            p.trainable = false;
        }
        p.value = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamId, &Param<T>)> {
        self.order.iter().map(move |id| (id, &self.entries[id]))
    }

    /// Learnable element count (running statistics excluded).
    pub fn param_count(&self) -> usize {
        self.iter()
            .filter(|(_, p)| p.kind.is_learnable())
            .map(|(_, p)| p.numel())
            .sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.iter().filter(|(_, p)| p.trainable).map(|(_, p)| p.numel()).sum()
    }

    /// Concatenated trainable values in store order.
    pub fn trainable_vector(&self) -> Vec<f64> {
        self.iter()
            .filter(|(_, p)| p.trainable)
            .flat_map(|(_, p)| match &p.value {
                ParamValue::Dense(t) => t.data().iter().map(|v| v.as_f64()).collect::<Vec<_>>(),
                ParamValue::Quantized(_) => Vec::new(),
            })
            .collect()
    }

    /// Overwrites trainable values from a vector laid out like
    /// [`ParamStore::trainable_vector`].
    pub fn set_trainable_vector(&mut self, values: &[f64]) -> Result<()> {
        let ids: Vec<ParamId> = self
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(id, _)| id.clone())
            .collect();
        let mut offset = 0;
        for id in ids {
            let t = self.tensor_mut(&id)?;
            let n = t.numel();
            if offset + n > values.len() {
                return Err(Error::shape("trainable vector too short"));
            }
            for (dst, &src) in t.data_mut().iter_mut().zip(&values[offset..offset + n]) {
                *dst = T::from_f64(src);
            }
            offset += n;
        }
        if offset != values.len() {
            return Err(Error::shape("trainable vector too long"));
        }
        Ok(())
    }
}

fn value_shape<T: Scalar>(v: &ParamValue<T>) -> &[usize] {
    match v {
        ParamValue::Dense(t) => t.shape(),
        ParamValue::Quantized(q) => q.shape(),
    }
}

/// Result of a backward pass: parameter gradients plus gradients of any
/// watched input tensors.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    pub params: BTreeMap<ParamId, Tensor<T>>,
    pub inputs: HashMap<TensorId, Tensor<T>>,
}

impl<T: Scalar> Default for Gradients<T> {
    fn default() -> Self {
        Gradients {
            params: BTreeMap::new(),
            inputs: HashMap::new(),
        }
    }
}

impl<T: Scalar> Gradients<T> {
    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: &ParamId) -> Option<&Tensor<T>> {
        self.params.get(id)
    }

    pub fn input(&self, id: TensorId) -> Option<&Tensor<T>> {
        self.inputs.get(&id)
    }

    pub(crate) fn accumulate(&mut self, id: &ParamId, grad: Tensor<T>) -> Result<()> {
        match self.params.get_mut(id) {
            Some(existing) => existing.add_assign(&grad),
            None => {
                self.params.insert(id.clone(), grad);
                Ok(())
            }
        }
    }

    /// Frobenius norm over all parameter gradients concatenated.
    pub fn norm(&self) -> f64 {
        self.params
            .values()
            .map(|g| g.frobenius_norm().powi(2))
            .sum::<f64>()
            .sqrt()
    }
}
