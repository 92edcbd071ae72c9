use super::activation::{hardsigmoid, hardsigmoid_grad};
use super::linear::{linear_forward, Linear};
use super::pool::{broadcast_spatial, global_avg_pool};
use super::{ParamDecl, Session};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Backward, BackwardCtx, SaveKey, SaveKind};
use crate::tensor::{Scalar, Tensor};

/// Bottleneck width `channels / ratio`.
pub fn se_squeeze_channels(channels: usize, ratio: usize) -> Result<usize> {
    if ratio == 0 || channels % ratio != 0 {
        return Err(Error::shape(format!(
            "SE channels {channels} not divisible by reduce ratio {ratio}"
        )));
    }
    Ok(channels / ratio)
}

/// Squeeze-and-excitation gate `x * hsigmoid(fc2(relu(fc1(gap(x)))))`,
/// implemented as one fused op.
#[derive(Debug, Clone, PartialEq)]
pub struct SqueezeExcite {
    pub id: String,
    pub channels: usize,
    pub squeeze: usize,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl SqueezeExcite {
    pub fn new(id: impl Into<String>, channels: usize, squeeze: usize) -> Self {
        let id = id.into();
        SqueezeExcite {
            fc1: Linear::new(format!("{id}.fc1"), channels, squeeze),
            fc2: Linear::new(format!("{id}.fc2"), squeeze, channels),
            id,
            channels,
            squeeze,
        }
    }

    pub fn params(&self) -> Vec<ParamDecl> {
        let mut v = self.fc1.params();
        v.extend(self.fc2.params());
        v
    }

    /// Pre-ReLU and pre-gate values, `([B, S], [B, C])`.
    pub fn pre_activations<T: Scalar>(&self, params: &ParamStore<T>, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let pooled = self.pool(x)?;
        let h1 = linear_forward(
            &pooled,
            &params.dense(&self.fc1.weight)?.into_owned(),
            &params.dense(&self.fc1.bias)?.into_owned(),
        )?;
        let r = h1.map(|v| v.max(T::zero()));
        let z = linear_forward(
            &r,
            &params.dense(&self.fc2.weight)?.into_owned(),
            &params.dense(&self.fc2.bias)?.into_owned(),
        )?;
        Ok((h1, z))
    }

    fn pool<T: Scalar>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.shape().len() != 4 || x.shape()[1] != self.channels {
            return Err(Error::shape(format!(
                "SE over {} channels got input {:?}",
                self.channels,
                x.shape()
            )));
        }
        global_avg_pool(x)
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let w1 = s.params.dense(&self.fc1.weight)?.into_owned();
        let b1 = s.params.dense(&self.fc1.bias)?.into_owned();
        let w2 = s.params.dense(&self.fc2.weight)?.into_owned();
        let b2 = s.params.dense(&self.fc2.bias)?.into_owned();
        let pooled = self.pool(x)?;
        let h1 = linear_forward(&pooled, &w1, &b1)?;
        let r = h1.map(|v| v.max(T::zero()));
        let z = linear_forward(&r, &w2, &b2)?;
        let gate = z.map(hardsigmoid);
        let hw = x.shape()[2] * x.shape()[3];
        let y = {
            let gd = gate.data();
            let data = x
                .data()
                .chunks(hw)
                .zip(gd)
                .flat_map(|(plane, &g)| plane.iter().map(move |&v| v * g))
                .collect();
            Tensor::from_parts(x.shape().to_vec(), data)
        };

        let tr = |id: &ParamId| s.trainable(id);
        let flags = SeFlags {
            w1: tr(&self.fc1.weight),
            b1: tr(&self.fc1.bias),
            w2: tr(&self.fc2.weight),
            b2: tr(&self.fc2.bias),
        };
        let in_rg = s.requires_grad(x);
        if !(in_rg || flags.any()) {
            return Ok(y);
        }
        let id = self.id.as_str();
        let mut keys = Vec::new();
        let k_x = s.tape.save_dense(id, x, SaveKind::FullMap);
        let k_z = s.tape.save_dense(id, &z, SaveKind::SmallVector);
        keys.extend([k_x, k_z]);
        let fc1_path = flags.w1 || flags.b1 || in_rg;
        let k_mask = if fc1_path {
            let mask = h1.map(|v| if v > T::zero() { T::one() } else { T::zero() });
            let k = s.tape.save_dense(id, &mask, SaveKind::SmallVector);
            keys.push(k);
            Some(k)
        } else {
            None
        };
        let k_pooled = flags.w1.then(|| s.tape.save_dense(id, &pooled, SaveKind::SmallVector));
        let k_hidden = flags.w2.then(|| s.tape.save_dense(id, &r, SaveKind::SmallVector));
        keys.extend(k_pooled.into_iter().chain(k_hidden));
        let back = SeBack {
            flags,
            ids: [
                self.fc1.weight.clone(),
                self.fc1.bias.clone(),
                self.fc2.weight.clone(),
                self.fc2.bias.clone(),
            ],
            w1,
            w2,
            k_x,
            k_z,
            k_mask,
            k_pooled,
            k_hidden,
        };
        s.tape.record(id, "squeeze_excite", &[x.id()], &y, keys, Box::new(back));
        Ok(y)
    }
}

#[derive(Debug, Clone, Copy)]
struct SeFlags {
    w1: bool,
    b1: bool,
    w2: bool,
    b2: bool,
}

impl SeFlags {
    fn any(&self) -> bool {
        self.w1 || self.b1 || self.w2 || self.b2
    }
}

struct SeBack<T> {
    flags: SeFlags,
    ids: [ParamId; 4],
    w1: Tensor<T>,
    w2: Tensor<T>,
    k_x: SaveKey,
    k_z: SaveKey,
    k_mask: Option<SaveKey>,
    k_pooled: Option<SaveKey>,
    k_hidden: Option<SaveKey>,
}

/// `out[n, i] = sum_j a[n, j] * m[j, i]` for `m [J, I]`.
fn rows_times<T: Scalar>(a: &[T], m: &Tensor<T>, batch: usize) -> Vec<T> {
    let (j_n, i_n) = (m.shape()[0], m.shape()[1]);
    let md = m.data();
    let mut out = vec![T::zero(); batch * i_n];
    for n in 0..batch {
        for j in 0..j_n {
            let av = a[n * j_n + j];
            for (dst, &w) in out[n * i_n..][..i_n].iter_mut().zip(&md[j * i_n..][..i_n]) {
                *dst = *dst + av * w;
            }
        }
    }
    out
}

/// `out[j, i] = sum_n a[n, j] * b[n, i]`.
fn outer_sum<T: Scalar>(a: &[T], b: &[T], batch: usize, j_n: usize, i_n: usize) -> Tensor<T> {
    let mut out = vec![T::zero(); j_n * i_n];
    for n in 0..batch {
        for j in 0..j_n {
            let av = a[n * j_n + j];
            for (dst, &bv) in out[j * i_n..][..i_n].iter_mut().zip(&b[n * i_n..][..i_n]) {
                *dst = *dst + av * bv;
            }
        }
    }
    Tensor::from_parts(vec![j_n, i_n], out)
}

fn column_sum<T: Scalar>(a: &[T], batch: usize, width: usize) -> Tensor<T> {
    let mut out = vec![T::zero(); width];
    for n in 0..batch {
        for (dst, &v) in out.iter_mut().zip(&a[n * width..][..width]) {
            *dst = *dst + v;
        }
    }
    Tensor::from_parts(vec![width], out)
}

impl<T: Scalar> Backward<T> for SeBack<T> {
    fn backward(&self, ctx: BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let gy = ctx.grad_out;
        let x = ctx.saved.dense(self.k_x)?;
        let z = ctx.saved.dense(self.k_z)?;
        let shape = x.shape().to_vec();
        let (b, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
        let s_n = self.w1.shape()[0];
        let in_rg = ctx.input_needs_grad[0];

        let zd = z.data();
        let grad_gate: Vec<T> = gy
            .data()
            .chunks(hw)
            .zip(x.data().chunks(hw))
            .map(|(g, xv)| g.iter().zip(xv).fold(T::zero(), |a, (&g, &x)| a + g * x))
            .collect();
        let gz: Vec<T> = grad_gate
            .iter()
            .zip(zd)
            .map(|(&g, &z)| g * hardsigmoid_grad(z))
            .collect();
        let [w1_id, b1_id, w2_id, b2_id] = &self.ids;
        if self.flags.b2 {
            ctx.grads.accumulate(b2_id, column_sum(&gz, b, c))?;
        }
        if self.flags.w2 {
            let key = self
                .k_hidden
                .ok_or_else(|| Error::state("SE hidden vector not saved"))?;
            let r = ctx.saved.dense(key)?;
            ctx.grads.accumulate(w2_id, outer_sum(&gz, r.data(), b, c, s_n))?;
        }
        let mut gx = None;
        if let Some(km) = self.k_mask {
            let mask = ctx.saved.dense(km)?.data();
            let gr = rows_times(&gz, &self.w2, b);
            let gh: Vec<T> = gr.iter().zip(mask).map(|(&g, &m)| g * m).collect();
            if self.flags.b1 {
                ctx.grads.accumulate(b1_id, column_sum(&gh, b, s_n))?;
            }
            if self.flags.w1 {
                let key = self
                    .k_pooled
                    .ok_or_else(|| Error::state("SE pooled vector not saved"))?;
                let pooled = ctx.saved.dense(key)?;
                ctx.grads.accumulate(w1_id, outer_sum(&gh, pooled.data(), b, s_n, c))?;
            }
            if in_rg {
                let gp = rows_times(&gh, &self.w1, b);
                let inv = T::from_f64(1.0 / hw as f64);
                let mut g = broadcast_spatial(&gp, &shape, inv);
                let direct: Vec<T> = gy
                    .data()
                    .chunks(hw)
                    .zip(zd)
                    .flat_map(|(gp, &z)| {
                        let gate = hardsigmoid(z);
                        gp.iter().map(move |&v| v * gate)
                    })
                    .collect();
                for (dst, v) in g.data_mut().iter_mut().zip(direct) {
                    *dst = *dst + v;
                }
                gx = Some(g);
            }
        }
        Ok(vec![gx])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::testutil::run;
    use crate::layers::Phase;

    fn store(se: &SqueezeExcite, zero: bool, trainable: bool) -> ParamStore<f64> {
        let mut p = ParamStore::new();
        for (i, d) in se.params().into_iter().enumerate() {
            let t = if zero {
                Tensor::zeros(&d.shape).unwrap()
            } else {
                Tensor::rand_normal(&d.shape, i as u64, 0.0, 0.5).unwrap()
            };
            p.insert(d.id.clone(), d.kind, t);
            p.set_trainable(&d.id, trainable).unwrap();
        }
        p
    }

    #[test]
    fn zero_weights_halve_input() {
        let se = SqueezeExcite::new("se", 4, 2);
        let mut p = store(&se, true, false);
        let x = Tensor::rand_normal(&[2, 4, 3, 3], 1, 0.0, 1.0).unwrap();
        let (y, _) = run(&mut p, Phase::Train, &[], |s| se.forward(s, &x));
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b / 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn param_count_at_96() {
        let se = SqueezeExcite::new("se", 96, se_squeeze_channels(96, 4).unwrap());
        let n: usize = se.params().iter().map(|d| d.numel()).sum();
        assert_eq!(n, 4728);
        assert!(se_squeeze_channels(10, 4).is_err());
    }

    #[test]
    fn trainable_saves_map_and_small_vectors() {
        let se = SqueezeExcite::new("se", 4, 2);
        let mut p = store(&se, false, true);
        let x = Tensor::rand_normal(&[2, 4, 3, 3], 1, 0.0, 1.0).unwrap();
        let (_, tape) = run(&mut p, Phase::Train, &[], |s| se.forward(s, &x));
        let full = x.numel() * 8;
        let small = (2 * 4 + 2 * 2 + 2 * 4 + 2 * 2) * 8;
        assert_eq!(tape.saved_bytes(), full + small);
    }
}
