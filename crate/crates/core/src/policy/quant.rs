use crate::error::{Error, Result};
use crate::tensor::{check_shape, Scalar, Tensor};

/// Symmetric per-tensor int8 tensor: `value = q * scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    shape: Vec<usize>,
    values: Vec<i8>,
    scale: f32,
}

impl QuantizedTensor {
    pub fn from_parts(shape: Vec<usize>, values: Vec<i8>, scale: f32) -> Result<Self> {
        let n = check_shape(&shape)?;
        if values.len() != n {
            return Err(Error::shape(format!(
                "{} values for shape {shape:?} ({n} elements)",
                values.len()
            )));
        }
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::value(format!("scale must be positive and finite, got {scale}")));
        }
        if values.contains(&i8::MIN) {
            return Err(Error::value("quantized values must lie in [-127, 127]"));
        }
        Ok(QuantizedTensor { shape, values, scale })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[i8] {
        &self.values
    }

    pub fn scale(&self) -> f32 {
        self.scale
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    /// One byte per element plus the f32 scale.
    pub fn byte_len(&self) -> usize {
        self.values.len() + 4
    }

    pub fn dequantize<T: Scalar>(&self) -> Tensor<T> {
        let s = self.scale as f64;
        let data = self.values.iter().map(|&q| T::from_f64(q as f64 * s)).collect();
        Tensor::from_parts(self.shape.clone(), data)
    }
}

/// Quantizes with `scale = max|t| / 127` (1 for an all-zero tensor) and
/// `q = round(t / scale)` clamped to `[-127, 127]`.
pub fn quantize_per_tensor_i8<T: Scalar>(t: &Tensor<T>) -> Result<QuantizedTensor> {
    if !t.is_finite() {
        return Err(Error::value("cannot quantize a tensor containing NaN or Inf"));
    }
    let max = t.max_abs().as_f64();
    let (scale, inv) = if max == 0.0 {
        (1.0f32, 0.0)
    } else {
        ((max / 127.0) as f32, 127.0 / max)
    };
    let values = t
        .data()
        .iter()
        .map(|v| (v.as_f64() * inv).round().clamp(-127.0, 127.0) as i8)
        .collect();
    QuantizedTensor::from_parts(t.shape().to_vec(), values, scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn half_and_minus_one() {
        let t = Tensor::from_vec(&[2], vec![0.5f32, -1.0]).unwrap();
        let q = quantize_per_tensor_i8(&t).unwrap();
        assert_eq!(q.values(), &[64, -127]);
        assert!((q.scale() - 1.0 / 127.0).abs() < 1e-9);
        let d = q.dequantize::<f32>();
        assert!((d.data()[0] - 0.503_937).abs() < 1e-5);
        assert_eq!(d.data()[1], -1.0);
    }

    #[test]
    fn all_zero_has_unit_scale() {
        let t = Tensor::<f32>::zeros(&[5]).unwrap();
        let q = quantize_per_tensor_i8(&t).unwrap();
        assert_eq!(q.scale(), 1.0);
        assert!(q.values().iter().all(|&v| v == 0));
    }

    #[test]
    fn non_finite_is_rejected() {
        let t = Tensor::from_vec(&[2], vec![1.0f32, f32::NAN]).unwrap();
        assert!(matches!(quantize_per_tensor_i8(&t), Err(Error::Value(_))));
        let t = Tensor::from_vec(&[1], vec![f32::INFINITY]).unwrap();
        assert!(matches!(quantize_per_tensor_i8(&t), Err(Error::Value(_))));
    }

    #[test]
    fn byte_len_counts_scale() {
        let q = QuantizedTensor::from_parts(vec![2, 3], vec![0; 6], 0.5).unwrap();
        assert_eq!(q.byte_len(), 10);
        assert!(QuantizedTensor::from_parts(vec![2], vec![0; 3], 0.5).is_err());
        assert!(QuantizedTensor::from_parts(vec![1], vec![-128], 0.5).is_err());
    }

    proptest! {
        #[test]
        fn rounding_error_within_half_scale(seed in 0u64..10_000, std in 0.01f64..10.0) {
            let t = Tensor::<f32>::rand_normal(&[64], seed, 0.0, std).unwrap();
            let q = quantize_per_tensor_i8(&t).unwrap();
            let d = q.dequantize::<f32>();
            let half = q.scale() as f64 / 2.0;
            for (a, b) in t.data().iter().zip(d.data()) {
                prop_assert!(((*a as f64) - (*b as f64)).abs() <= half * (1.0 + 1e-5));
            }
            prop_assert!(q.values().iter().all(|v| (-127..=127).contains(v)));
        }
    }
}
