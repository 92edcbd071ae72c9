use serde::{Deserialize, Serialize};

use super::{param_id, ParamDecl, Phase, Session};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::tape::{Backward, BackwardCtx, SaveKey, SaveKind};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnMode {
    /// Trains scale and shift, normalizes with batch statistics in training.
    #[default]
    Full,
    /// Trains the shift only; scale and running statistics stay fixed.
    ShiftOnly,
    Frozen,
}

/// Per-channel view of a `[B, C, ...]` tensor.
fn layout(shape: &[usize], c: usize) -> Result<(usize, usize)> {
    if shape.len() < 2 || shape[1] != c {
        return Err(Error::shape(format!(
            "batch norm over {c} channels got input {shape:?}"
        )));
    }
    Ok((shape[0], shape[2..].iter().product()))
}

fn for_each(shape: &[usize], c: usize, mut f: impl FnMut(usize, usize)) {
    let b = shape[0];
    let sp: usize = shape[2..].iter().product();
    for n in 0..b {
        for ch in 0..c {
            let base = (n * c + ch) * sp;
            for i in base..base + sp {
                f(ch, i);
            }
        }
    }
}

/// Eval-mode normalization `gamma * (x - mu) / sqrt(var + eps) + beta`.
pub fn bn_eval_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    mean: &[T],
    var: &[T],
    eps: f64,
) -> Result<Tensor<T>> {
    let c = gamma.len();
    if beta.len() != c || mean.len() != c || var.len() != c {
        return Err(Error::shape("batch norm parameter lengths differ"));
    }
    layout(x.shape(), c)?;
    let scale: Vec<T> = (0..c).map(|i| gamma[i] / (var[i] + T::from_f64(eps)).sqrt()).collect();
    let xd = x.data();
    let mut out = vec![T::zero(); xd.len()];
    for_each(x.shape(), c, |ch, i| out[i] = (xd[i] - mean[ch]) * scale[ch] + beta[ch]);
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub id: String,
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
    pub mode: BnMode,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new(id: impl Into<String>, channels: usize) -> Self {
        let id = id.into();
        BatchNorm {
            gamma: param_id(&id, "gamma"),
            beta: param_id(&id, "beta"),
            running_mean: param_id(&id, "running_mean"),
            running_var: param_id(&id, "running_var"),
            id,
            channels,
            eps: 1e-5,
            momentum: 0.1,
            mode: BnMode::Full,
        }
    }

    pub fn params(&self) -> Vec<ParamDecl> {
        let c = vec![self.channels];
        vec![
            ParamDecl::new(self.gamma.clone(), ParamKind::Scale, c.clone()),
            ParamDecl::new(self.beta.clone(), ParamKind::Shift, c.clone()),
            ParamDecl::new(self.running_mean.clone(), ParamKind::RunningMean, c.clone()),
            ParamDecl::new(self.running_var.clone(), ParamKind::RunningVar, c),
        ]
    }

    /// Sets the learnable flags implied by `mode`.
    pub fn set_mode<T: Scalar>(&mut self, mode: BnMode, params: &mut ParamStore<T>) -> Result<()> {
        self.mode = mode;
        params.set_trainable(&self.gamma, mode == BnMode::Full)?;
        params.set_trainable(&self.beta, mode != BnMode::Frozen)
    }

    fn vec<T: Scalar>(params: &ParamStore<T>, id: &ParamId) -> Result<Vec<T>> {
        Ok(params.dense(id)?.data().to_vec())
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let c = self.channels;
        let (b, sp) = layout(x.shape(), c)?;
        let gamma = Self::vec(s.params, &self.gamma)?;
        let beta = Self::vec(s.params, &self.beta)?;
        let gamma_tr = self.mode == BnMode::Full && s.trainable(&self.gamma);
        let beta_tr = self.mode != BnMode::Frozen && s.trainable(&self.beta);
        let in_rg = s.requires_grad(x);
        let track = in_rg || gamma_tr || beta_tr;
        let batch_stats = self.mode == BnMode::Full && s.phase != Phase::Eval;

        if batch_stats {
            let n = (b * sp) as f64;
            let xd = x.data();
            let mut sum = vec![T::zero(); c];
            for_each(x.shape(), c, |ch, i| sum[ch] = sum[ch] + xd[i]);
            let mean: Vec<T> = sum.iter().map(|&v| v / T::from_f64(n)).collect();
            let mut sq = vec![T::zero(); c];
            for_each(x.shape(), c, |ch, i| {
                let d = xd[i] - mean[ch];
                sq[ch] = sq[ch] + d * d;
            });
            let var: Vec<T> = sq.iter().map(|&v| v / T::from_f64(n)).collect();
            let invstd: Vec<T> = var
                .iter()
                .map(|&v| T::one() / (v + T::from_f64(self.eps)).sqrt())
                .collect();
            let mut xhat = vec![T::zero(); xd.len()];
            let mut out = vec![T::zero(); xd.len()];
            for_each(x.shape(), c, |ch, i| {
                xhat[i] = (xd[i] - mean[ch]) * invstd[ch];
                out[i] = gamma[ch] * xhat[i] + beta[ch];
            });
            if s.phase == Phase::Train {
                let m = T::from_f64(self.momentum);
                let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
                let rm = s.params.tensor_mut(&self.running_mean)?.data_mut();
                for (r, &v) in rm.iter_mut().zip(&mean) {
                    *r = (T::one() - m) * *r + m * v;
                }
                let rv = s.params.tensor_mut(&self.running_var)?.data_mut();
                for (r, &v) in rv.iter_mut().zip(&var) {
                    *r = (T::one() - m) * *r + m * v * T::from_f64(unbias);
                }
            }
            let y = Tensor::from_parts(x.shape().to_vec(), out);
            if track {
                let xhat = Tensor::from_parts(x.shape().to_vec(), xhat);
                let invstd = Tensor::from_parts(vec![c], invstd);
                let k_xhat = s.tape.save_dense(&self.id, &xhat, SaveKind::FullMap);
                let k_inv = s.tape.save_dense(&self.id, &invstd, SaveKind::NormStats);
                let back = BnBack {
                    c,
                    gamma,
                    source: StatSource::Batch {
                        xhat: k_xhat,
                        invstd: k_inv,
                    },
                    gamma_id: gamma_tr.then(|| self.gamma.clone()),
                    beta_id: beta_tr.then(|| self.beta.clone()),
                };
                s.tape.record(
                    &self.id,
                    "batch_norm",
                    &[x.id()],
                    &y,
                    vec![k_xhat, k_inv],
                    Box::new(back),
                );
            }
            return Ok(y);
        }

        let mean = Self::vec(s.params, &self.running_mean)?;
        let var = Self::vec(s.params, &self.running_var)?;
        let y = bn_eval_forward(x, &gamma, &beta, &mean, &var, self.eps)?;
        if track {
            let invstd: Vec<T> = var
                .iter()
                .map(|&v| T::one() / (v + T::from_f64(self.eps)).sqrt())
                .collect();
            let mut saved = Vec::new();
            let xhat_key = if gamma_tr {
                let xd = x.data();
                let mut xhat = vec![T::zero(); xd.len()];
                for_each(x.shape(), c, |ch, i| xhat[i] = (xd[i] - mean[ch]) * invstd[ch]);
                let xhat = Tensor::from_parts(x.shape().to_vec(), xhat);
                let k = s.tape.save_dense(&self.id, &xhat, SaveKind::FullMap);
                saved.push(k);
                Some(k)
            } else {
                None
            };
            let back = BnBack {
                c,
                gamma,
                source: StatSource::Running { invstd, xhat: xhat_key },
                gamma_id: gamma_tr.then(|| self.gamma.clone()),
                beta_id: beta_tr.then(|| self.beta.clone()),
            };
            s.tape
                .record(&self.id, "batch_norm", &[x.id()], &y, saved, Box::new(back));
        }
        Ok(y)
    }
}

enum StatSource<T> {
    Batch { xhat: SaveKey, invstd: SaveKey },
    Running { invstd: Vec<T>, xhat: Option<SaveKey> },
}

struct BnBack<T> {
    c: usize,
    gamma: Vec<T>,
    source: StatSource<T>,
    gamma_id: Option<ParamId>,
    beta_id: Option<ParamId>,
}

impl<T: Scalar> Backward<T> for BnBack<T> {
    fn backward(&self, ctx: BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let g = ctx.grad_out;
        let shape = g.shape().to_vec();
        let c = self.c;
        let gd = g.data();
        let mut sum_g = vec![T::zero(); c];
        for_each(&shape, c, |ch, i| sum_g[ch] = sum_g[ch] + gd[i]);
        if let Some(id) = &self.beta_id {
            ctx.grads.accumulate(id, Tensor::from_parts(vec![c], sum_g.clone()))?;
        }
        let need_x = ctx.input_needs_grad[0];
        match &self.source {
            StatSource::Batch { xhat, invstd } => {
                let xhat = ctx.saved.dense(*xhat)?.data();
                let invstd = ctx.saved.dense(*invstd)?.data();
                let mut sum_gx = vec![T::zero(); c];
                for_each(&shape, c, |ch, i| sum_gx[ch] = sum_gx[ch] + gd[i] * xhat[i]);
                if let Some(id) = &self.gamma_id {
                    ctx.grads.accumulate(id, Tensor::from_parts(vec![c], sum_gx.clone()))?;
                }
                if !need_x {
                    return Ok(vec![None]);
                }
                let (b, sp) = layout(&shape, c)?;
                let n = T::from_f64((b * sp) as f64);
                let mut gx = vec![T::zero(); gd.len()];
                for_each(&shape, c, |ch, i| {
                    gx[i] = self.gamma[ch] * invstd[ch] / n * (n * gd[i] - sum_g[ch] - xhat[i] * sum_gx[ch]);
                });
                Ok(vec![Some(Tensor::from_parts(shape, gx))])
            }
            StatSource::Running { invstd, xhat } => {
                if let Some(id) = &self.gamma_id {
                    let key = xhat.ok_or_else(|| Error::state("batch norm scale gradient needs x-hat"))?;
                    let xhat = ctx.saved.dense(key)?.data();
                    let mut sum_gx = vec![T::zero(); c];
                    for_each(&shape, c, |ch, i| sum_gx[ch] = sum_gx[ch] + gd[i] * xhat[i]);
                    ctx.grads.accumulate(id, Tensor::from_parts(vec![c], sum_gx))?;
                }
                if !need_x {
                    return Ok(vec![None]);
                }
                let mut gx = vec![T::zero(); gd.len()];
                for_each(&shape, c, |ch, i| gx[i] = gd[i] * self.gamma[ch] * invstd[ch]);
                Ok(vec![Some(Tensor::from_parts(shape, gx))])
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::testutil::{grads_of, run};

    fn store(bn: &BatchNorm, gamma: f64, beta: f64, mean: f64, var: f64) -> ParamStore<f64> {
        let c = [bn.channels];
        let mut p = ParamStore::new();
        p.insert(bn.gamma.clone(), ParamKind::Scale, Tensor::full(&c, gamma).unwrap());
        p.insert(bn.beta.clone(), ParamKind::Shift, Tensor::full(&c, beta).unwrap());
        p.insert(
            bn.running_mean.clone(),
            ParamKind::RunningMean,
            Tensor::full(&c, mean).unwrap(),
        );
        p.insert(
            bn.running_var.clone(),
            ParamKind::RunningVar,
            Tensor::full(&c, var).unwrap(),
        );
        p
    }

    #[test]
    fn eval_formula() {
        let eps = 1e-5;
        let x = Tensor::from_vec(&[1, 1], vec![2.0f64]).unwrap();
        let y = bn_eval_forward(&x, &[3.0], &[0.5], &[1.0], &[1.0 - eps], eps).unwrap();
        assert!((y.data()[0] - 3.5).abs() < 1e-12);
        let x = Tensor::from_vec(&[1, 1, 2], vec![0.7f64, -1.2]).unwrap();
        let y = bn_eval_forward(&x, &[1.0], &[0.0], &[0.0], &[1.0], 1e-12).unwrap();
        assert!((y.data()[0] - 0.7).abs() < 1e-9 && (y.data()[1] + 1.2).abs() < 1e-9);
    }

    #[test]
    fn channel_mismatch() {
        let x = Tensor::<f64>::zeros(&[1, 2]).unwrap();
        assert!(matches!(
            bn_eval_forward(&x, &[1.0], &[0.0], &[0.0], &[1.0], 1e-5),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn shift_only_saves_nothing_and_sums_grads() {
        let mut bn = BatchNorm::new("bn", 1);
        let mut p = store(&bn, 2.0, 0.0, 0.0, 1.0 - 1e-5);
        bn.set_mode(BnMode::ShiftOnly, &mut p).unwrap();
        let x = Tensor::from_vec(&[2, 1, 1, 1], vec![0.3, -0.4]).unwrap();
        let (y, mut tape) = run(&mut p, Phase::Train, &[&x], |s| bn.forward(s, &x));
        assert_eq!(tape.saved_bytes(), 0);
        let ones = Tensor::full(y.shape(), 1.0).unwrap();
        let g = grads_of(&mut p, &mut tape, &y, &ones);
        assert_eq!(g.get(&bn.beta).unwrap().data(), &[2.0]);
        assert!(g.get(&bn.gamma).is_none());
        let gx = g.input(x.id()).unwrap();
        for v in gx.data() {
            assert!((v - 2.0).abs() < 1e-9);
        }
    }

    #[test]
    fn full_saves_one_map_plus_stats_and_updates_running() {
        let bn = BatchNorm::new("bn", 3);
        let mut p = store(&bn, 1.0, 0.0, 0.0, 1.0);
        p.set_trainable(&bn.gamma, true).unwrap();
        p.set_trainable(&bn.beta, true).unwrap();
        let x = Tensor::rand_normal(&[4, 3, 2, 2], 5, 1.0, 2.0).unwrap();
        let (_, tape) = run(&mut p, Phase::Train, &[], |s| bn.forward(s, &x));
        assert_eq!(tape.saved_bytes(), x.numel() * 8 + 3 * 8);
        let rm = p.dense(&bn.running_mean).unwrap();
        assert!(rm.data().iter().all(|&v| v != 0.0));
    }

    #[test]
    fn frozen_passes_scaled_grad_only() {
        let mut bn = BatchNorm::new("bn", 1);
        let mut p = store(&bn, 3.0, 1.0, 0.0, 4.0);
        bn.eps = 0.0;
        bn.set_mode(BnMode::Frozen, &mut p).unwrap();
        let x = Tensor::from_vec(&[1, 1], vec![1.0]).unwrap();
        let (y, mut tape) = run(&mut p, Phase::Train, &[&x], |s| bn.forward(s, &x));
        let g = grads_of(&mut p, &mut tape, &y, &Tensor::full(&[1, 1], 1.0).unwrap());
        assert!(g.is_empty());
        assert!((g.input(x.id()).unwrap().data()[0] - 1.5).abs() < 1e-12);
    }
}
