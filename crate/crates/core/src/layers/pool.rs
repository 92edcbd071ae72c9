use super::Session;
use crate::error::{Error, Result};
use crate::tape::{Backward, BackwardCtx};
use crate::tensor::{Scalar, Tensor};

/// Mean over spatial positions: `[B, C, H, W] -> [B, C]`.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::shape(format!("global pooling expects [B, C, H, W], got {s:?}")));
    }
    let sp = s[2] * s[3];
    let inv = T::from_f64(1.0 / sp as f64);
    let data = x
        .data()
        .chunks(sp)
        .map(|c| c.iter().fold(T::zero(), |a, &v| a + v) * inv)
        .collect();
    Ok(Tensor::from_parts(vec![s[0], s[1]], data))
}

pub(crate) fn broadcast_spatial<T: Scalar>(g: &[T], shape: &[usize], scale: T) -> Tensor<T> {
    let sp = shape[2] * shape[3];
    let data = g.iter().flat_map(|&v| std::iter::repeat_n(v * scale, sp)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalAvgPool {
    pub id: String,
}

impl GlobalAvgPool {
    pub fn new(id: impl Into<String>) -> Self {
        GlobalAvgPool { id: id.into() }
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = global_avg_pool(x)?;
        if s.requires_grad(x) {
            let back = PoolBack {
                shape: x.shape().to_vec(),
            };
            s.tape
                .record(&self.id, "global_avg_pool", &[x.id()], &y, Vec::new(), Box::new(back));
        }
        Ok(y)
    }
}

struct PoolBack {
    shape: Vec<usize>,
}

impl<T: Scalar> Backward<T> for PoolBack {
    fn backward(&self, ctx: BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let inv = T::from_f64(1.0 / (self.shape[2] * self.shape[3]) as f64);
        Ok(vec![Some(broadcast_spatial(ctx.grad_out.data(), &self.shape, inv))])
    }
}
