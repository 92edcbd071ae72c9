//! Little-endian checkpoint: `"MTLC"`, u32 version, u32 tensor count, then per
//! tensor u32 name length, name, u8 dtype code, u8 rank, u32 dims, raw data.
//! An int8 tensor's raw data is its f32 scale followed by the values.

use std::path::Path;

use super::{build_model, Model, ModelSpec};
use crate::error::{Error, Result};
use crate::fsio::write_atomic;
use crate::params::ParamValue;
use crate::policy::QuantizedTensor;
use crate::tensor::{DType, Scalar, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MTLC";
const VERSION: u32 = 1;

pub fn encode_checkpoint<T: Scalar>(model: &Model<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for (id, p) in model.params().iter() {
        let name = id.as_str().as_bytes();
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name);
        let dtype = match &p.value {
            ParamValue::Dense(_) => T::DTYPE,
            ParamValue::Quantized(_) => DType::I8,
        };
        out.push(dtype.code());
        out.push(p.shape().len() as u8);
        for &d in p.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        match &p.value {
            ParamValue::Dense(t) => t.data().iter().for_each(|v| v.write_le(&mut out)),
            ParamValue::Quantized(q) => {
                out.extend_from_slice(&q.scale().to_le_bytes());
                out.extend(q.values().iter().map(|&v| v as u8));
            }
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

/// Parses a checkpoint into a model built from `spec`. Nothing is returned
/// unless every tensor parses and matches the spec.
pub fn decode_checkpoint<T: Scalar>(bytes: &[u8], spec: &ModelSpec) -> Result<Model<T>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let mut model = build_model::<T>(spec, 0)?;
    let count = r.u32()? as usize;
    if count != model.params().len() {
        return Err(Error::Format(format!(
            "checkpoint has {count} tensors, model has {}",
            model.params().len()
        )));
    }
    let mut values = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let dtype = DType::from_code(r.u8()?)?;
        let rank = r.u8()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let id = crate::params::ParamId::new(name);
        let want = model
            .params()
            .get(&id)
            .map_err(|_| Error::Format(format!("unexpected tensor {id}")))?
            .shape()
            .to_vec();
        if shape != want {
            return Err(Error::Format(format!(
                "tensor {id} has shape {shape:?}, expected {want:?}"
            )));
        }
        let n: usize = shape.iter().product();
        let value = if dtype == T::DTYPE {
            let w = T::DTYPE.bit_width() / 8;
            let raw = r.take(n * w)?;
            ParamValue::Dense(Tensor::from_vec(&shape, raw.chunks(w).map(T::read_le).collect())?)
        } else if dtype == DType::I8 {
            let scale = f32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
            let q = r.take(n)?.iter().map(|&b| b as i8).collect();
            ParamValue::Quantized(
                QuantizedTensor::from_parts(shape, q, scale).map_err(|e| Error::Format(e.to_string()))?,
            )
        } else {
            return Err(Error::Format(format!("tensor {id} has unsupported dtype {dtype:?}")));
        };
        values.push((id, value));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    for (id, v) in values {
        model.params_mut().replace_value(&id, v)?;
    }
    Ok(model)
}

pub fn save_checkpoint<T: Scalar>(model: &Model<T>, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path, &encode_checkpoint(model))
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>, spec: &ModelSpec) -> Result<Model<T>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::irb_v2_96;
    use crate::policy::quantize_per_tensor_i8;

    #[test]
    fn round_trip_is_bitwise() {
        let spec = irb_v2_96();
        let m = build_model::<f32>(&spec, 5).unwrap();
        let a = encode_checkpoint(&m);
        let back = decode_checkpoint::<f32>(&a, &spec).unwrap();
        assert_eq!(encode_checkpoint(&back), a);
    }

    #[test]
    fn payload_size_is_params_plus_header() {
        let spec = irb_v2_96();
        let m = build_model::<f32>(&spec, 5).unwrap();
        let bytes = encode_checkpoint(&m);
        let header: usize = 12
            + m.params()
                .iter()
                .map(|(id, p)| 4 + id.as_str().len() + 2 + 4 * p.shape().len())
                .sum::<usize>();
        let running: usize = m
            .params()
            .iter()
            .filter(|(_, p)| !p.kind.is_learnable())
            .map(|(_, p)| p.numel() * 4)
            .sum();
        assert_eq!(bytes.len(), header + 21408 * 4 + running);
    }

    #[test]
    fn truncated_and_bad_magic_fail() {
        let spec = irb_v2_96();
        let m = build_model::<f32>(&spec, 5).unwrap();
        let bytes = encode_checkpoint(&m);
        for cut in [0, 3, 11, 40, bytes.len() - 1] {
            assert!(matches!(
                decode_checkpoint::<f32>(&bytes[..cut], &spec),
                Err(Error::Format(_))
            ));
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint::<f32>(&bad, &spec), Err(Error::Format(_))));
        let mut ver = bytes;
        ver[4] = 2;
        assert!(matches!(decode_checkpoint::<f32>(&ver, &spec), Err(Error::Format(_))));
    }

    #[test]
    fn quantized_weights_survive() {
        let spec = irb_v2_96();
        let mut m = build_model::<f32>(&spec, 5).unwrap();
        let id = crate::params::ParamId::new("b0.dw.weight");
        let q = quantize_per_tensor_i8(&m.params().dense(&id).unwrap()).unwrap();
        m.params_mut()
            .replace_value(&id, ParamValue::Quantized(q.clone()))
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.mtlc");
        save_checkpoint(&m, &path).unwrap();
        let back = load_checkpoint::<f32>(&path, &spec).unwrap();
        assert_eq!(back.params().get(&id).unwrap().value, ParamValue::Quantized(q));
        assert!(!back.params().is_trainable(&id));
    }
}
