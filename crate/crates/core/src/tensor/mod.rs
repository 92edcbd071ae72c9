//! Dense tensors, bit-packed masks and the dtype-tagged wrapper used for
//! serialization.
//!
//! Dense arithmetic is generic over [`Scalar`] so the same layer code runs in
//! `f32` (training, profiling) and `f64` (finite-difference checking).

mod dense;
mod mask;

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::Float;

pub use dense::{Tensor, TensorId};
pub use mask::{Mask, MaskWidth};

use crate::error::{Error, Result};
use crate::policy::QuantizedTensor;

/// Floating-point element type of a dense tensor.
pub trait Scalar: Float + Default + Debug + Send + Sync + Sum + 'static {
    const DTYPE: DType;

    fn from_f64(v: f64) -> Self;

    fn as_f64(self) -> f64;

    fn write_le(self, out: &mut Vec<u8>);

    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    fn from_f64(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F64,
    I8,
    Bit1,
    Bit2,
}

impl DType {
    /// Storage width of one element in bits.
    pub fn bit_width(self) -> usize {
        match self {
            DType::F32 => 32,
            DType::F64 => 64,
            DType::I8 => 8,
            DType::Bit1 => 1,
            DType::Bit2 => 2,
        }
    }

    /// Code used in the checkpoint format.
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
            DType::I8 => 2,
            DType::Bit1 => 3,
            DType::Bit2 => 4,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        Ok(match code {
            0 => DType::F32,
            1 => DType::F64,
            2 => DType::I8,
            3 => DType::Bit1,
            4 => DType::Bit2,
            other => return Err(Error::Format(format!("unknown dtype code {other}"))),
        })
    }

    /// Bytes needed for `elements` values, packed and padded to whole bytes.
    pub fn bytes_for(self, elements: usize) -> usize {
        (elements * self.bit_width()).div_ceil(8)
    }
}

/// Checks that a shape is non-empty with every dimension at least one and
/// returns its element count.
pub fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::shape("shape must have at least one dimension"));
    }
    if let Some(pos) = shape.iter().position(|&d| d == 0) {
        return Err(Error::shape(format!("dimension {pos} of {shape:?} is zero")));
    }
    Ok(shape.iter().product())
}

/// A tensor of any supported dtype.
#[derive(Debug, Clone, PartialEq)]
pub enum DynTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
    I8(QuantizedTensor),
    Bit1(Mask),
    Bit2(Mask),
}

impl DynTensor {
    pub fn dtype(&self) -> DType {
        match self {
            DynTensor::F32(_) => DType::F32,
            DynTensor::F64(_) => DType::F64,
            DynTensor::I8(_) => DType::I8,
            DynTensor::Bit1(_) => DType::Bit1,
            DynTensor::Bit2(_) => DType::Bit2,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            DynTensor::F32(t) => t.shape(),
            DynTensor::F64(t) => t.shape(),
            DynTensor::I8(q) => q.shape(),
            DynTensor::Bit1(m) | DynTensor::Bit2(m) => m.shape(),
        }
    }

    pub fn numel(&self) -> usize {
        self.shape().iter().product()
    }

    /// Size of the element buffer in bytes (masks packed, padded per tensor).
    pub fn byte_len(&self) -> usize {
        self.dtype().bytes_for(self.numel())
    }
}

/// Builds a tensor of `dtype` with every element equal to `fill`.
///
/// Masks accept `{0, 1}` (bit1) or `{0, 1, 2, 3}` (bit2); `i8` accepts
/// integers in `[-127, 127]` and carries a unit scale.
pub fn tensor_full(shape: &[usize], dtype: DType, fill: f64) -> Result<DynTensor> {
    let n = check_shape(shape)?;
    if !fill.is_finite() {
        return Err(Error::value(format!("fill value {fill} is not finite")));
    }
    let integral = |max: f64| fill.fract() == 0.0 && fill >= 0.0 && fill <= max;
    Ok(match dtype {
        DType::F32 => {
            if fill.abs() > f32::MAX as f64 {
                return Err(Error::value(format!("fill {fill} overflows f32")));
            }
            DynTensor::F32(Tensor::full(shape, fill as f32)?)
        }
        DType::F64 => DynTensor::F64(Tensor::full(shape, fill)?),
        DType::I8 => {
            if fill.fract() != 0.0 || fill.abs() > 127.0 {
                return Err(Error::value(format!("fill {fill} outside i8 range [-127, 127]")));
            }
            DynTensor::I8(QuantizedTensor::from_parts(shape.to_vec(), vec![fill as i8; n], 1.0)?)
        }
        DType::Bit1 => {
            if !integral(1.0) {
                return Err(Error::value(format!("bit1 fill must be 0 or 1, got {fill}")));
            }
            DynTensor::Bit1(Mask::full(shape, MaskWidth::One, fill as u8)?)
        }
        DType::Bit2 => {
            if !integral(3.0) {
                return Err(Error::value(format!("bit2 fill must be in 0..=3, got {fill}")));
            }
            DynTensor::Bit2(Mask::full(shape, MaskWidth::Two, fill as u8)?)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_f32_zero_and_ones() {
        let t = tensor_full(&[2, 2], DType::F32, 0.0).unwrap();
        match &t {
            DynTensor::F32(t) => assert_eq!(t.data(), &[0.0; 4]),
            _ => unreachable!(),
        }
        let t = tensor_full(&[3], DType::F32, 1.0).unwrap();
        match &t {
            DynTensor::F32(t) => assert_eq!(t.data(), &[1.0; 3]),
            _ => unreachable!(),
        }
    }

    #[test]
    fn full_activation_map_sizes() {
        let t = tensor_full(&[8, 96, 7, 7], DType::F32, 0.0).unwrap();
        assert_eq!(t.numel(), 37632);
        assert_eq!(t.byte_len(), 150528);
        let m = tensor_full(&[8, 96, 7, 7], DType::Bit1, 1.0).unwrap();
        assert_eq!(m.byte_len(), 4704);
        let m = tensor_full(&[8, 96, 7, 7], DType::Bit2, 3.0).unwrap();
        assert_eq!(m.byte_len(), 9408);
    }

    #[test]
    fn full_rejects_bad_shapes_and_values() {
        assert!(matches!(tensor_full(&[2, 0], DType::F32, 0.0), Err(Error::Shape(_))));
        assert!(matches!(tensor_full(&[], DType::F32, 0.0), Err(Error::Shape(_))));
        assert!(matches!(tensor_full(&[2], DType::Bit1, 2.0), Err(Error::Value(_))));
        assert!(matches!(tensor_full(&[2], DType::Bit2, 4.0), Err(Error::Value(_))));
        assert!(matches!(tensor_full(&[2], DType::Bit2, 0.5), Err(Error::Value(_))));
        assert!(matches!(tensor_full(&[2], DType::I8, 128.0), Err(Error::Value(_))));
        assert!(matches!(tensor_full(&[2], DType::F32, 1e300), Err(Error::Value(_))));
    }

    #[test]
    fn padded_mask_bytes() {
        assert_eq!(DType::Bit1.bytes_for(9), 2);
        assert_eq!(DType::Bit2.bytes_for(5), 2);
        assert_eq!(DType::Bit1.bytes_for(0), 0);
    }
}
