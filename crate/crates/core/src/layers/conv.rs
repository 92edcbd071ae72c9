use serde::Serialize;

use super::{param_id, ParamDecl, Session};
use crate::error::{Error, Result};
use crate::parallel::map_indexed;
use crate::params::{ParamId, ParamKind};
use crate::tape::{Backward, BackwardCtx, SaveKey, SaveKind};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ConvGeometry {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvGeometry {
    pub fn new(cin: usize, cout: usize, kernel: usize, stride: usize, padding: usize, groups: usize) -> Result<Self> {
        if cin == 0 || cout == 0 || kernel == 0 || stride == 0 || groups == 0 {
            return Err(Error::shape("conv channels, kernel, stride and groups must be >= 1"));
        }
        if cin % groups != 0 || cout % groups != 0 {
            return Err(Error::shape(format!(
                "channels {cin}->{cout} not divisible by groups {groups}"
            )));
        }
        Ok(ConvGeometry {
            cin,
            cout,
            kernel,
            stride,
            padding,
            groups,
        })
    }

    /// Same-padded `k x k` dense convolution.
    pub fn dense(cin: usize, cout: usize, kernel: usize, stride: usize) -> Result<Self> {
        Self::new(cin, cout, kernel, stride, kernel / 2, 1)
    }

    pub fn depthwise(channels: usize, kernel: usize, stride: usize) -> Result<Self> {
        Self::new(channels, channels, kernel, stride, kernel / 2, channels)
    }

    pub fn pointwise(cin: usize, cout: usize) -> Result<Self> {
        Self::new(cin, cout, 1, 1, 0, 1)
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups == self.cin && self.cin == self.cout && self.groups > 1
    }

    /// 1x1, stride 1, no padding: the input already is the column matrix.
    pub fn is_direct_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    pub fn uses_im2col(&self) -> bool {
        !self.is_depthwise() && !self.is_direct_pointwise()
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.cout, self.cin / self.groups, self.kernel, self.kernel]
    }

    pub fn weight_numel(&self) -> usize {
        self.weight_shape().iter().product()
    }

    pub fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let span = |n: usize| -> Result<usize> {
            let padded = n + 2 * self.padding;
            if padded < self.kernel {
                return Err(Error::shape(format!(
                    "input extent {n} with padding {} smaller than kernel {}",
                    self.padding, self.kernel
                )));
            }
            Ok((padded - self.kernel) / self.stride + 1)
        };
        Ok((span(h)?, span(w)?))
    }

    /// `2 * K^2 * (Cin/g) * Cout * Ho * Wo * B`.
    pub fn forward_flops(&self, batch: usize, ho: usize, wo: usize) -> u64 {
        2 * (self.kernel * self.kernel * (self.cin / self.groups) * self.cout * ho * wo * batch) as u64
    }

    /// Per-sample column buffer, zero when no im2col is needed.
    pub fn im2col_elements(&self, ho: usize, wo: usize) -> usize {
        if self.uses_im2col() {
            (self.cin / self.groups) * self.kernel * self.kernel * ho * wo
        } else {
            0
        }
    }
}

struct Dims {
    b: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
}

fn dims(s: &[usize], g: &ConvGeometry) -> Result<Dims> {
    if s.len() != 4 || s[1] != g.cin {
        return Err(Error::shape(format!("conv expects [B, {}, H, W], got {s:?}", g.cin)));
    }
    let (ho, wo) = g.out_hw(s[2], s[3])?;
    Ok(Dims {
        b: s[0],
        h: s[2],
        w: s[3],
        ho,
        wo,
    })
}

fn check_weight<T: Scalar>(w: &Tensor<T>, g: &ConvGeometry) -> Result<()> {
    if w.shape() != g.weight_shape() {
        return Err(Error::shape(format!(
            "conv weight {:?} does not match {:?}",
            w.shape(),
            g.weight_shape()
        )));
    }
    Ok(())
}

/// Column matrix `[(Cin/g)*K*K, Ho*Wo]` of one group of one sample.
fn im2col<T: Scalar>(xs: &[T], g: &ConvGeometry, d: &Dims, group: usize, cols: &mut [T]) {
    let cg = g.cin / g.groups;
    let k = g.kernel;
    let npos = d.ho * d.wo;
    for ci in 0..cg {
        let plane = &xs[(group * cg + ci) * d.h * d.w..][..d.h * d.w];
        for kh in 0..k {
            for kw in 0..k {
                let row = &mut cols[((ci * k + kh) * k + kw) * npos..][..npos];
                for oh in 0..d.ho {
                    let ih = (oh * g.stride + kh) as isize - g.padding as isize;
                    for ow in 0..d.wo {
                        let iw = (ow * g.stride + kw) as isize - g.padding as isize;
                        row[oh * d.wo + ow] = if ih >= 0 && iw >= 0 && (ih as usize) < d.h && (iw as usize) < d.w {
                            plane[ih as usize * d.w + iw as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(cols: &[T], g: &ConvGeometry, d: &Dims, group: usize, gx: &mut [T]) {
    let cg = g.cin / g.groups;
    let k = g.kernel;
    let npos = d.ho * d.wo;
    for ci in 0..cg {
        let plane = &mut gx[(group * cg + ci) * d.h * d.w..][..d.h * d.w];
        for kh in 0..k {
            for kw in 0..k {
                let row = &cols[((ci * k + kh) * k + kw) * npos..][..npos];
                for oh in 0..d.ho {
                    let ih = (oh * g.stride + kh) as isize - g.padding as isize;
                    if ih < 0 || ih as usize >= d.h {
                        continue;
                    }
                    for ow in 0..d.wo {
                        let iw = (ow * g.stride + kw) as isize - g.padding as isize;
                        if iw >= 0 && (iw as usize) < d.w {
                            plane[ih as usize * d.w + iw as usize] =
                                plane[ih as usize * d.w + iw as usize] + row[oh * d.wo + ow];
                        }
                    }
                }
            }
        }
    }
}

fn forward_sample<T: Scalar>(xs: &[T], w: &[T], g: &ConvGeometry, d: &Dims) -> Vec<T> {
    let npos = d.ho * d.wo;
    let mut out = vec![T::zero(); g.cout * npos];
    let k = g.kernel;
    if g.is_depthwise() {
        for c in 0..g.cin {
            let plane = &xs[c * d.h * d.w..][..d.h * d.w];
            let wk = &w[c * k * k..][..k * k];
            let o = &mut out[c * npos..][..npos];
            for oh in 0..d.ho {
                for ow in 0..d.wo {
                    let mut acc = T::zero();
                    for kh in 0..k {
                        let ih = (oh * g.stride + kh) as isize - g.padding as isize;
                        if ih < 0 || ih as usize >= d.h {
                            continue;
                        }
                        for kw in 0..k {
                            let iw = (ow * g.stride + kw) as isize - g.padding as isize;
                            if iw >= 0 && (iw as usize) < d.w {
                                acc = acc + wk[kh * k + kw] * plane[ih as usize * d.w + iw as usize];
                            }
                        }
                    }
                    o[oh * d.wo + ow] = acc;
                }
            }
        }
        return out;
    }
    let cg = g.cin / g.groups;
    let og = g.cout / g.groups;
    let rows = cg * k * k;
    let mut buf = if g.uses_im2col() {
        vec![T::zero(); rows * npos]
    } else {
        Vec::new()
    };
    for group in 0..g.groups {
        let cols: &[T] = if g.uses_im2col() {
            im2col(xs, g, d, group, &mut buf);
            &buf
        } else {
            &xs[group * cg * npos..][..cg * npos]
        };
        for co in group * og..(group + 1) * og {
            let wrow = &w[co * rows..][..rows];
            let o = &mut out[co * npos..][..npos];
            for (r, &a) in wrow.iter().enumerate() {
                if a == T::zero() {
                    continue;
                }
                for (dst, &src) in o.iter_mut().zip(&cols[r * npos..][..npos]) {
                    *dst = *dst + a * src;
                }
            }
        }
    }
    out
}

/// Cross-correlation of `x [B, Cin, H, W]` with `w [Cout, Cin/g, K, K]`.
pub fn conv2d_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, g: &ConvGeometry) -> Result<Tensor<T>> {
    let d = dims(x.shape(), g)?;
    check_weight(w, g)?;
    let xd = x.data();
    let wd = w.data();
    let per = g.cin * d.h * d.w;
    let parts = map_indexed(d.b, |b| forward_sample(&xd[b * per..][..per], wd, g, &d));
    let data: Vec<T> = parts.into_iter().flatten().collect();
    Ok(Tensor::from_parts(vec![d.b, g.cout, d.ho, d.wo], data))
}

/// Per-sample `(grad_x, grad_w)` contributions.
fn backward_sample<T: Scalar>(
    gy: &[T],
    xs: Option<&[T]>,
    w: &[T],
    g: &ConvGeometry,
    d: &Dims,
    need_x: bool,
) -> (Vec<T>, Vec<T>) {
    let npos = d.ho * d.wo;
    let k = g.kernel;
    let mut gx = if need_x {
        vec![T::zero(); g.cin * d.h * d.w]
    } else {
        Vec::new()
    };
    let mut gw = if xs.is_some() {
        vec![T::zero(); g.weight_numel()]
    } else {
        Vec::new()
    };
    if g.is_depthwise() {
        for c in 0..g.cin {
            let go = &gy[c * npos..][..npos];
            for oh in 0..d.ho {
                for kh in 0..k {
                    let ih = (oh * g.stride + kh) as isize - g.padding as isize;
                    if ih < 0 || ih as usize >= d.h {
                        continue;
                    }
                    for ow in 0..d.wo {
                        let gv = go[oh * d.wo + ow];
                        for kw in 0..k {
                            let iw = (ow * g.stride + kw) as isize - g.padding as isize;
                            if iw < 0 || iw as usize >= d.w {
                                continue;
                            }
                            let at = c * d.h * d.w + ih as usize * d.w + iw as usize;
                            if let Some(xs) = xs {
                                gw[c * k * k + kh * k + kw] = gw[c * k * k + kh * k + kw] + gv * xs[at];
                            }
                            if need_x {
                                gx[at] = gx[at] + gv * w[c * k * k + kh * k + kw];
                            }
                        }
                    }
                }
            }
        }
        return (gx, gw);
    }
    let cg = g.cin / g.groups;
    let og = g.cout / g.groups;
    let rows = cg * k * k;
    let mut buf = if g.uses_im2col() {
        vec![T::zero(); rows * npos]
    } else {
        Vec::new()
    };
    let mut dcols = if need_x && g.uses_im2col() {
        vec![T::zero(); rows * npos]
    } else {
        Vec::new()
    };
    for group in 0..g.groups {
        if let Some(xs) = xs {
            let cols: &[T] = if g.uses_im2col() {
                im2col(xs, g, d, group, &mut buf);
                &buf
            } else {
                &xs[group * cg * npos..][..cg * npos]
            };
            for co in group * og..(group + 1) * og {
                let go = &gy[co * npos..][..npos];
                for r in 0..rows {
                    let c = &cols[r * npos..][..npos];
                    gw[co * rows + r] = go.iter().zip(c).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
                }
            }
        }
        if need_x {
            let target: &mut [T] = if g.uses_im2col() {
                dcols.iter_mut().for_each(|v| *v = T::zero());
                &mut dcols
            } else {
                &mut gx[group * cg * npos..][..cg * npos]
            };
            for co in group * og..(group + 1) * og {
                let go = &gy[co * npos..][..npos];
                for r in 0..rows {
                    let a = w[co * rows + r];
                    if a == T::zero() {
                        continue;
                    }
                    for (dst, &src) in target[r * npos..][..npos].iter_mut().zip(go) {
                        *dst = *dst + a * src;
                    }
                }
            }
            if g.uses_im2col() {
                col2im_add(&dcols, g, d, group, &mut gx);
            }
        }
    }
    (gx, gw)
}

/// Gradients of a convolution. `grad_x` is always produced; `grad_w` is
/// produced iff `trainable`, which requires the saved input.
pub fn conv2d_backward<T: Scalar>(
    grad_y: &Tensor<T>,
    saved_x: Option<&Tensor<T>>,
    w: &Tensor<T>,
    g: &ConvGeometry,
    input_shape: &[usize],
    trainable: bool,
) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
    let (gx, gw) = conv_backward_impl(grad_y, saved_x, w, g, input_shape, trainable, true)?;
    Ok((gx.expect("requested"), gw))
}

fn conv_backward_impl<T: Scalar>(
    grad_y: &Tensor<T>,
    saved_x: Option<&Tensor<T>>,
    w: &Tensor<T>,
    g: &ConvGeometry,
    input_shape: &[usize],
    need_w: bool,
    need_x: bool,
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>)> {
    if need_w && saved_x.is_none() {
        return Err(Error::state("trainable conv has no saved input"));
    }
    check_weight(w, g)?;
    let d = dims(input_shape, g)?;
    if grad_y.shape() != [d.b, g.cout, d.ho, d.wo] {
        return Err(Error::shape(format!(
            "conv grad {:?} does not match output [{}, {}, {}, {}]",
            grad_y.shape(),
            d.b,
            g.cout,
            d.ho,
            d.wo
        )));
    }
    let x = if need_w { saved_x } else { None };
    if let Some(x) = x {
        if x.shape() != input_shape {
            return Err(Error::shape("saved conv input has the wrong shape"));
        }
    }
    let gyd = grad_y.data();
    let wd = w.data();
    let per_in = g.cin * d.h * d.w;
    let per_out = g.cout * d.ho * d.wo;
    let parts = map_indexed(d.b, |b| {
        backward_sample(
            &gyd[b * per_out..][..per_out],
            x.map(|x| &x.data()[b * per_in..][..per_in]),
            wd,
            g,
            &d,
            need_x,
        )
    });
    let mut gw_total = if need_w {
        Some(vec![T::zero(); g.weight_numel()])
    } else {
        None
    };
    let mut gx_all = Vec::with_capacity(if need_x { d.b * per_in } else { 0 });
    for (gx, gw) in parts {
        gx_all.extend(gx);
        if let Some(acc) = gw_total.as_mut() {
            for (a, v) in acc.iter_mut().zip(gw) {
                *a = *a + v;
            }
        }
    }
    let gx = need_x.then(|| Tensor::from_parts(input_shape.to_vec(), gx_all));
    let gw = gw_total.map(|v| Tensor::from_parts(g.weight_shape().to_vec(), v));
    Ok((gx, gw))
}

/// Convolution layer without bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub id: String,
    pub geom: ConvGeometry,
    pub weight: ParamId,
}

impl Conv2d {
    pub fn new(id: impl Into<String>, geom: ConvGeometry) -> Self {
        let id = id.into();
        let weight = param_id(&id, "weight");
        Conv2d { id, geom, weight }
    }

    pub fn params(&self) -> Vec<ParamDecl> {
        vec![ParamDecl::new(
            self.weight.clone(),
            ParamKind::Weight,
            self.geom.weight_shape().to_vec(),
        )]
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let w = s.params.dense(&self.weight)?.into_owned();
        let y = conv2d_forward(x, &w, &self.geom)?;
        let cols = self.geom.im2col_elements(y.shape()[2], y.shape()[3]);
        if cols > 0 {
            s.tape.note_temp(&self.id, cols * T::DTYPE.bit_width() / 8);
        }
        let in_rg = s.requires_grad(x);
        let w_tr = s.trainable(&self.weight);
        if in_rg || w_tr {
            let saved_x = w_tr.then(|| s.tape.save_dense(&self.id, x, SaveKind::FullMap));
            let back = ConvBack {
                geom: self.geom,
                weight: self.weight.clone(),
                w,
                saved_x,
                input_shape: x.shape().to_vec(),
            };
            s.tape.record(
                &self.id,
                "conv2d",
                &[x.id()],
                &y,
                saved_x.into_iter().collect(),
                Box::new(back),
            );
        }
        Ok(y)
    }
}

struct ConvBack<T> {
    geom: ConvGeometry,
    weight: ParamId,
    w: Tensor<T>,
    saved_x: Option<SaveKey>,
    input_shape: Vec<usize>,
}

impl<T: Scalar> Backward<T> for ConvBack<T> {
    fn backward(&self, ctx: BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let x = self.saved_x.map(|k| ctx.saved.dense(k)).transpose()?;
        let (gx, gw) = conv_backward_impl(
            ctx.grad_out,
            x,
            &self.w,
            &self.geom,
            &self.input_shape,
            x.is_some(),
            ctx.input_needs_grad[0],
        )?;
        if let Some(gw) = gw {
            ctx.grads.accumulate(&self.weight, gw)?;
        }
        Ok(vec![gx])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::testutil::{grads_of, run};
    use crate::layers::Phase;
    use crate::params::ParamStore;
    use crate::tape::Tape;

    /// Direct nested-loop reference.
    fn naive(x: &Tensor<f64>, w: &Tensor<f64>, g: &ConvGeometry) -> Vec<f64> {
        let [b, _, h, wd] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
        let (ho, wo) = g.out_hw(h, wd).unwrap();
        let cg = g.cin / g.groups;
        let og = g.cout / g.groups;
        let k = g.kernel;
        let mut out = vec![0.0; b * g.cout * ho * wo];
        for n in 0..b {
            for co in 0..g.cout {
                let grp = co / og;
                for oh in 0..ho {
                    for ow in 0..wo {
                        let mut acc = 0.0;
                        for ci in 0..cg {
                            for kh in 0..k {
                                for kw in 0..k {
                                    let ih = (oh * g.stride + kh) as isize - g.padding as isize;
                                    let iw = (ow * g.stride + kw) as isize - g.padding as isize;
                                    if ih < 0 || iw < 0 || ih as usize >= h || iw as usize >= wd {
                                        continue;
                                    }
                                    let xi = ((n * g.cin + grp * cg + ci) * h + ih as usize) * wd + iw as usize;
                                    let wi = ((co * cg + ci) * k + kh) * k + kw;
                                    acc += x.data()[xi] * w.data()[wi];
                                }
                            }
                        }
                        out[((n * g.cout + co) * ho + oh) * wo + ow] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn pointwise_scalar_multiply() {
        let g = ConvGeometry::pointwise(1, 1).unwrap();
        let x = Tensor::from_vec(&[1, 1, 1, 1], vec![3.0f32]).unwrap();
        let w = Tensor::from_vec(&[1, 1, 1, 1], vec![2.0f32]).unwrap();
        assert_eq!(conv2d_forward(&x, &w, &g).unwrap().data(), &[6.0]);
    }

    #[test]
    fn depthwise_sum_of_ones() {
        let g = ConvGeometry::new(2, 2, 3, 1, 0, 2).unwrap();
        let x = Tensor::full(&[1, 2, 3, 3], 1.0f32).unwrap();
        let w = Tensor::full(&[2, 1, 3, 3], 1.0f32).unwrap();
        let y = conv2d_forward(&x, &w, &g).unwrap();
        assert_eq!(y.shape(), &[1, 2, 1, 1]);
        assert_eq!(y.data(), &[9.0, 9.0]);
    }

    #[test]
    fn matches_naive_loops() {
        let cases = [
            ConvGeometry::dense(3, 4, 5, 1).unwrap(),
            ConvGeometry::dense(3, 4, 3, 2).unwrap(),
            ConvGeometry::depthwise(4, 5, 2).unwrap(),
            ConvGeometry::pointwise(4, 6).unwrap(),
            ConvGeometry::new(4, 6, 3, 1, 1, 2).unwrap(),
            ConvGeometry::new(4, 4, 1, 2, 0, 1).unwrap(),
        ];
        for (i, g) in cases.iter().enumerate() {
            let x = Tensor::<f64>::rand_normal(&[2, g.cin, 7, 6], i as u64, 0.0, 1.0).unwrap();
            let w = Tensor::<f64>::rand_normal(&g.weight_shape(), 100 + i as u64, 0.0, 1.0).unwrap();
            let y = conv2d_forward(&x, &w, g).unwrap();
            let r = naive(&x, &w, g);
            for (a, b) in y.data().iter().zip(&r) {
                assert!((a - b).abs() <= 1e-6, "case {i}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn pointwise_backward_linear_case() {
        let g = ConvGeometry::pointwise(1, 1).unwrap();
        let x = Tensor::from_vec(&[1, 1, 1, 1], vec![3.0f64]).unwrap();
        let w = Tensor::from_vec(&[1, 1, 1, 1], vec![2.0f64]).unwrap();
        let gy = Tensor::full(&[1, 1, 1, 1], 1.0f64).unwrap();
        let (gx, gw) = conv2d_backward(&gy, Some(&x), &w, &g, x.shape(), true).unwrap();
        assert_eq!(gx.data(), &[2.0]);
        assert_eq!(gw.unwrap().data(), &[3.0]);
        let (gx, gw) = conv2d_backward(&gy, None, &w, &g, x.shape(), false).unwrap();
        assert_eq!(gx.data(), &[2.0]);
        assert!(gw.is_none());
        assert!(matches!(
            conv2d_backward(&gy, None, &w, &g, x.shape(), true),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let g = ConvGeometry::pointwise(3, 2).unwrap();
        let x = Tensor::<f32>::zeros(&[1, 4, 2, 2]).unwrap();
        let w = Tensor::<f32>::zeros(&[2, 3, 1, 1]).unwrap();
        assert!(matches!(conv2d_forward(&x, &w, &g), Err(Error::Shape(_))));
        assert!(ConvGeometry::new(3, 4, 3, 1, 1, 2).is_err());
    }

    fn layer_with(geom: ConvGeometry, trainable: bool) -> (Conv2d, ParamStore<f64>) {
        let conv = Conv2d::new("c", geom);
        let mut p = ParamStore::new();
        let w = Tensor::rand_normal(&geom.weight_shape(), 9, 0.0, 0.5).unwrap();
        p.insert(conv.weight.clone(), ParamKind::Weight, w);
        p.set_trainable(&conv.weight, trainable).unwrap();
        (conv, p)
    }

    #[test]
    fn frozen_conv_saves_nothing_but_passes_grad() {
        let (conv, mut p) = layer_with(ConvGeometry::dense(2, 3, 3, 1).unwrap(), false);
        let x = Tensor::rand_normal(&[2, 2, 4, 4], 1, 0.0, 1.0).unwrap();
        let (y, mut tape) = run(&mut p, Phase::Train, &[&x], |s| conv.forward(s, &x));
        assert_eq!(tape.saved_bytes(), 0);
        let r = Tensor::rand_normal(y.shape(), 2, 0.0, 1.0).unwrap();
        let g = grads_of(&mut p, &mut tape, &y, &r);
        assert!(g.get(&conv.weight).is_none());
        assert_eq!(g.input(x.id()).unwrap().shape(), x.shape());
    }

    #[test]
    fn frozen_conv_on_untracked_input_records_nothing() {
        let (conv, mut p) = layer_with(ConvGeometry::dense(2, 3, 3, 1).unwrap(), false);
        let x = Tensor::rand_normal(&[1, 2, 4, 4], 1, 0.0, 1.0).unwrap();
        let (_, tape) = run(&mut p, Phase::Train, &[], |s| conv.forward(s, &x));
        assert_eq!(tape.node_count(), 0);
        assert_eq!(tape.temp_bytes_by_layer()["c"], 2 * 9 * 16 * 8);
    }

    #[test]
    fn trainable_conv_saves_input() {
        let (conv, mut p) = layer_with(ConvGeometry::depthwise(3, 3, 1).unwrap(), true);
        let x = Tensor::rand_normal(&[2, 3, 4, 4], 1, 0.0, 1.0).unwrap();
        let (_, tape) = run(&mut p, Phase::Train, &[], |s| conv.forward(s, &x));
        assert_eq!(tape.saved_bytes(), x.numel() * 8);
        assert!(tape.temp_bytes_by_layer().is_empty());
        let _ = Tape::<f64>::new();
    }
}
