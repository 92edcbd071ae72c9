use super::Session;
use crate::error::{Error, Result};
use crate::tape::{Backward, BackwardCtx, SaveKey, SaveKind};
use crate::tensor::{Scalar, Tensor};

pub const LOSS_LAYER: &str = "loss";

/// Mean softmax cross-entropy of `logits [B, K]` against integer labels.
pub fn softmax_cross_entropy<T: Scalar>(
    s: &mut Session<'_, T>,
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<Tensor<T>> {
    let sh = logits.shape();
    if sh.len() != 2 || sh[0] != labels.len() {
        return Err(Error::shape(format!(
            "cross-entropy expects [B, K] logits for {} labels, got {sh:?}",
            labels.len()
        )));
    }
    let (b, k) = (sh[0], sh[1]);
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::value(format!("label {bad} outside [0, {k})")));
    }
    let ld = logits.data();
    let mut probs = Vec::with_capacity(b * k);
    let mut total = T::zero();
    for (n, &label) in labels.iter().enumerate() {
        let row = &ld[n * k..][..k];
        let m = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
        let exps: Vec<T> = row.iter().map(|&v| (v - m).exp()).collect();
        let z = exps.iter().fold(T::zero(), |a, &v| a + v);
        total = total + z.ln() + m - row[label];
        probs.extend(exps.into_iter().map(|e| e / z));
    }
    let loss = Tensor::scalar(total / T::from_f64(b as f64));
    if s.requires_grad(logits) {
        let probs = Tensor::from_parts(vec![b, k], probs);
        let key = s.tape.save_dense(LOSS_LAYER, &probs, SaveKind::FullMap);
        let back = CeBack {
            probs: key,
            labels: labels.to_vec(),
        };
        s.tape.record(
            LOSS_LAYER,
            "softmax_cross_entropy",
            &[logits.id()],
            &loss,
            vec![key],
            Box::new(back),
        );
    }
    Ok(loss)
}

struct CeBack {
    probs: SaveKey,
    labels: Vec<usize>,
}

impl<T: Scalar> Backward<T> for CeBack {
    fn backward(&self, ctx: BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let p = ctx.saved.dense(self.probs)?;
        let (b, k) = (p.shape()[0], p.shape()[1]);
        let scale = ctx.grad_out.item()? / T::from_f64(b as f64);
        let mut g: Vec<T> = p.data().iter().map(|&v| v * scale).collect();
        for (n, &l) in self.labels.iter().enumerate() {
            g[n * k + l] = g[n * k + l] - scale;
        }
        Ok(vec![Some(Tensor::from_parts(vec![b, k], g))])
    }
}

/// Scalar objective `sum(y * r)` with a constant weighting `r`.
pub fn weighted_sum<T: Scalar>(s: &mut Session<'_, T>, y: &Tensor<T>, r: &Tensor<T>) -> Result<Tensor<T>> {
    let v = y.zip_map(r, |a, b| a * b)?.sum();
    let out = Tensor::scalar(v);
    if s.requires_grad(y) {
        s.tape.record(
            "objective",
            "weighted_sum",
            &[y.id()],
            &out,
            Vec::new(),
            Box::new(SumBack(r.clone())),
        );
    }
    Ok(out)
}

struct SumBack<T>(Tensor<T>);

impl<T: Scalar> Backward<T> for SumBack<T> {
    fn backward(&self, ctx: BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let g = ctx.grad_out.item()?;
        Ok(vec![Some(self.0.map(|v| v * g))])
    }
}
