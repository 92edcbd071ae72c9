use super::{param_id, ParamDecl, Session};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamKind};
use crate::tape::{Backward, BackwardCtx, SaveKey, SaveKind};
use crate::tensor::{Scalar, Tensor};

/// `y = x W^T + b` for `x [B, in]`, `W [out, in]`.
pub fn linear_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (out, inp) = (w.shape()[0], w.shape()[1]);
    if x.shape().len() != 2 || x.shape()[1] != inp || b.shape() != [out] {
        return Err(Error::shape(format!(
            "linear {inp}->{out} got input {:?} and bias {:?}",
            x.shape(),
            b.shape()
        )));
    }
    let batch = x.shape()[0];
    let (xd, wd, bd) = (x.data(), w.data(), b.data());
    let mut y = Vec::with_capacity(batch * out);
    for n in 0..batch {
        let xr = &xd[n * inp..][..inp];
        for o in 0..out {
            let wr = &wd[o * inp..][..inp];
            y.push(xr.iter().zip(wr).fold(bd[o], |acc, (&a, &b)| acc + a * b));
        }
    }
    Ok(Tensor::from_parts(vec![batch, out], y))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub id: String,
    pub inp: usize,
    pub out: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(id: impl Into<String>, inp: usize, out: usize) -> Self {
        let id = id.into();
        Linear {
            weight: param_id(&id, "weight"),
            bias: param_id(&id, "bias"),
            id,
            inp,
            out,
        }
    }

    pub fn params(&self) -> Vec<ParamDecl> {
        vec![
            ParamDecl::new(self.weight.clone(), ParamKind::Weight, vec![self.out, self.inp]),
            ParamDecl::new(self.bias.clone(), ParamKind::Bias, vec![self.out]),
        ]
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let w = s.params.dense(&self.weight)?.into_owned();
        let b = s.params.dense(&self.bias)?.into_owned();
        let y = linear_forward(x, &w, &b)?;
        let w_tr = s.trainable(&self.weight);
        let b_tr = s.trainable(&self.bias);
        if s.requires_grad(x) || w_tr || b_tr {
            let saved_x = w_tr.then(|| s.tape.save_dense(&self.id, x, SaveKind::FullMap));
            let back = LinearBack {
                w,
                saved_x,
                weight: w_tr.then(|| self.weight.clone()),
                bias: b_tr.then(|| self.bias.clone()),
            };
            s.tape.record(
                &self.id,
                "linear",
                &[x.id()],
                &y,
                saved_x.into_iter().collect(),
                Box::new(back),
            );
        }
        Ok(y)
    }
}

struct LinearBack<T> {
    w: Tensor<T>,
    saved_x: Option<SaveKey>,
    weight: Option<ParamId>,
    bias: Option<ParamId>,
}

impl<T: Scalar> Backward<T> for LinearBack<T> {
    fn backward(&self, ctx: BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let g = ctx.grad_out.data();
        let (out, inp) = (self.w.shape()[0], self.w.shape()[1]);
        let batch = ctx.grad_out.shape()[0];
        if let Some(id) = &self.bias {
            let mut gb = vec![T::zero(); out];
            for n in 0..batch {
                for o in 0..out {
                    gb[o] = gb[o] + g[n * out + o];
                }
            }
            ctx.grads.accumulate(id, Tensor::from_parts(vec![out], gb))?;
        }
        if let Some(id) = &self.weight {
            let key = self
                .saved_x
                .ok_or_else(|| Error::state("trainable linear has no saved input"))?;
            let x = ctx.saved.dense(key)?.data();
            let mut gw = vec![T::zero(); out * inp];
            for n in 0..batch {
                for o in 0..out {
                    let go = g[n * out + o];
                    for (dst, &xv) in gw[o * inp..][..inp].iter_mut().zip(&x[n * inp..][..inp]) {
                        *dst = *dst + go * xv;
                    }
                }
            }
            ctx.grads.accumulate(id, Tensor::from_parts(vec![out, inp], gw))?;
        }
        if !ctx.input_needs_grad[0] {
            return Ok(vec![None]);
        }
        let wd = self.w.data();
        let mut gx = vec![T::zero(); batch * inp];
        for n in 0..batch {
            for o in 0..out {
                let go = g[n * out + o];
                for (dst, &wv) in gx[n * inp..][..inp].iter_mut().zip(&wd[o * inp..][..inp]) {
                    *dst = *dst + go * wv;
                }
            }
        }
        Ok(vec![Some(Tensor::from_parts(vec![batch, inp], gx))])
    }
}
