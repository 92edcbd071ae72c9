use serde::{Deserialize, Serialize};

use super::Session;
use crate::error::{Error, Result};
use crate::tape::{Backward, BackwardCtx, SaveKey, SaveKind};
use crate::tensor::{Mask, MaskWidth, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ActKind {
    #[serde(rename = "relu6")]
    Relu6,
    #[serde(rename = "hswish", alias = "hardswish")]
    HardSwish,
    #[serde(rename = "hsigmoid", alias = "hardsigmoid")]
    HardSigmoid,
}

impl ActKind {
    pub fn name(self) -> &'static str {
        match self {
            ActKind::Relu6 => "relu6",
            ActKind::HardSwish => "hswish",
            ActKind::HardSigmoid => "hsigmoid",
        }
    }
}

/// Backward rule of ReLU6 / Hard-Swish.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum ActBackwardMode {
    #[default]
    #[serde(rename = "exact")]
    Exact,
    /// `grad * 1{a >= 0}` from a 1-bit mask.
    #[serde(rename = "approx", alias = "approx_signed")]
    ApproxSigned,
}

/// What an activation keeps for its backward pass.
#[derive(Debug, Clone, PartialEq)]
pub enum ActSaved<T> {
    Mask(Mask),
    Full(Tensor<T>),
}

fn c<T: Scalar>(v: f64) -> T {
    T::from_f64(v)
}

fn relu6<T: Scalar>(a: T) -> T {
    a.max(T::zero()).min(c(6.0))
}

fn signed_mask<T: Scalar>(a: &Tensor<T>) -> Mask {
    Mask::from_codes(
        a.shape(),
        MaskWidth::One,
        a.data().iter().map(|&v| (v >= T::zero()) as u8),
    )
    .expect("shape already valid")
}

/// Two-bit band code: 0 below `lo`, 1 inside `[lo, hi]`, 2 above.
fn band_mask<T: Scalar>(a: &Tensor<T>, lo: f64, hi: f64) -> Mask {
    let (lo, hi) = (c::<T>(lo), c::<T>(hi));
    Mask::from_codes(
        a.shape(),
        MaskWidth::Two,
        a.data().iter().map(|&v| {
            if v < lo {
                0
            } else if v <= hi {
                1
            } else {
                2
            }
        }),
    )
    .expect("shape already valid")
}

fn check_mask(grad: &Tensor<impl Scalar>, m: &Mask, width: MaskWidth) -> Result<()> {
    if m.width() != width {
        return Err(Error::state(format!(
            "expected a {}-bit mask, got {}-bit",
            width.bits(),
            m.width().bits()
        )));
    }
    if m.len() != grad.numel() {
        return Err(Error::shape(format!(
            "mask has {} elements, gradient has {}",
            m.len(),
            grad.numel()
        )));
    }
    Ok(())
}

fn gate<T: Scalar>(grad: &Tensor<T>, m: &Mask, keep: u8, scale: T) -> Tensor<T> {
    let data = grad
        .data()
        .iter()
        .enumerate()
        .map(|(i, &g)| if m.get(i) == keep { g * scale } else { T::zero() })
        .collect();
    Tensor::from_parts(grad.shape().to_vec(), data)
}

/// `min(max(0, a), 6)` plus the mask its backward needs under `mode`.
pub fn relu6_forward<T: Scalar>(a: &Tensor<T>, mode: ActBackwardMode) -> (Tensor<T>, Mask) {
    let mask = match mode {
        ActBackwardMode::Exact => band_mask(a, 0.0, 6.0),
        ActBackwardMode::ApproxSigned => signed_mask(a),
    };
    (a.map(relu6), mask)
}

pub fn relu6_backward<T: Scalar>(grad: &Tensor<T>, mask: &Mask, mode: ActBackwardMode) -> Result<Tensor<T>> {
    match mode {
        ActBackwardMode::Exact => {
            check_mask(grad, mask, MaskWidth::Two)?;
            Ok(gate(grad, mask, 1, T::one()))
        }
        ActBackwardMode::ApproxSigned => {
            check_mask(grad, mask, MaskWidth::One)?;
            Ok(gate(grad, mask, 1, T::one()))
        }
    }
}

/// `a * ReLU6(a + 3) / 6`.
pub fn hardswish_forward<T: Scalar>(a: &Tensor<T>, mode: ActBackwardMode) -> (Tensor<T>, ActSaved<T>) {
    let y = a.map(|v| v * relu6(v + c(3.0)) / c(6.0));
    let saved = match mode {
        ActBackwardMode::Exact => ActSaved::Full(a.clone()),
        ActBackwardMode::ApproxSigned => ActSaved::Mask(signed_mask(a)),
    };
    (y, saved)
}

/// Exact derivative `ReLU6(a + 3) / 6 + a * 1{-3 <= a <= 3} / 6`.
pub fn hardswish_grad<T: Scalar>(a: T) -> T {
    let band = if a >= c(-3.0) && a <= c(3.0) { a } else { T::zero() };
    (relu6(a + c(3.0)) + band) / c(6.0)
}

pub fn hardswish_backward<T: Scalar>(
    grad: &Tensor<T>,
    saved: &ActSaved<T>,
    mode: ActBackwardMode,
) -> Result<Tensor<T>> {
    match (mode, saved) {
        (ActBackwardMode::Exact, ActSaved::Full(a)) => grad.zip_map(a, |g, a| g * hardswish_grad(a)),
        (ActBackwardMode::ApproxSigned, ActSaved::Mask(m)) => {
            check_mask(grad, m, MaskWidth::One)?;
            Ok(gate(grad, m, 1, T::one()))
        }
        _ => Err(Error::state("hard-swish saved buffer does not match backward mode")),
    }
}

/// `ReLU6(a + 3) / 6` with the band mask of `[-3, 3]`.
pub fn hardsigmoid_forward<T: Scalar>(a: &Tensor<T>) -> (Tensor<T>, Mask) {
    (a.map(hardsigmoid), band_mask(a, -3.0, 3.0))
}

pub(crate) fn hardsigmoid<T: Scalar>(v: T) -> T {
    relu6(v + c(3.0)) / c(6.0)
}

pub(crate) fn hardsigmoid_grad<T: Scalar>(v: T) -> T {
    if v >= c(-3.0) && v <= c(3.0) {
        c(1.0 / 6.0)
    } else {
        T::zero()
    }
}

pub fn hardsigmoid_backward<T: Scalar>(grad: &Tensor<T>, mask: &Mask) -> Result<Tensor<T>> {
    check_mask(grad, mask, MaskWidth::Two)?;
    Ok(gate(grad, mask, 1, c(1.0 / 6.0)))
}

/// Elementwise activation layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Activation {
    pub id: String,
    pub kind: ActKind,
    pub mode: ActBackwardMode,
}

impl Activation {
    pub fn new(id: impl Into<String>, kind: ActKind) -> Self {
        Activation {
            id: id.into(),
            kind,
            mode: ActBackwardMode::Exact,
        }
    }

    /// Backward mode actually in effect; the hard-sigmoid has no
    /// approximate rule.
    pub fn effective_mode(&self) -> ActBackwardMode {
        match self.kind {
            ActKind::HardSigmoid => ActBackwardMode::Exact,
            _ => self.mode,
        }
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, a: &Tensor<T>) -> Result<Tensor<T>> {
        let mode = self.effective_mode();
        let track = s.requires_grad(a);
        let (y, saved) = match self.kind {
            ActKind::Relu6 => {
                let (y, m) = relu6_forward(a, mode);
                (y, ActSaved::Mask(m))
            }
            ActKind::HardSwish => hardswish_forward(a, mode),
            ActKind::HardSigmoid => {
                let (y, m) = hardsigmoid_forward(a);
                (y, ActSaved::Mask(m))
            }
        };
        if track {
            let key = match saved {
                ActSaved::Mask(m) => s.tape.save_mask(&self.id, a.id(), m),
                ActSaved::Full(t) => s.tape.save_dense(&self.id, &t, SaveKind::FullMap),
            };
            let back = ActBack {
                kind: self.kind,
                mode,
                key,
            };
            s.tape
                .record(&self.id, "activation", &[a.id()], &y, vec![key], Box::new(back));
        }
        Ok(y)
    }
}

struct ActBack {
    kind: ActKind,
    mode: ActBackwardMode,
    key: SaveKey,
}

impl<T: Scalar> Backward<T> for ActBack {
    fn backward(&self, ctx: BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let g = ctx.grad_out;
        let out = match (self.kind, self.key.kind) {
            (ActKind::Relu6, _) => relu6_backward(g, ctx.saved.mask(self.key)?, self.mode)?,
            (ActKind::HardSigmoid, _) => hardsigmoid_backward(g, ctx.saved.mask(self.key)?)?,
            (ActKind::HardSwish, SaveKind::FullMap) => {
                let a = ctx.saved.dense(self.key)?;
                g.zip_map(a, |g, a| g * hardswish_grad(a))?
            }
            (ActKind::HardSwish, _) => {
                let m = ctx.saved.mask(self.key)?;
                check_mask(g, m, MaskWidth::One)?;
                gate(g, m, 1, T::one())
            }
        };
        Ok(vec![Some(out)])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::testutil::run;
    use crate::layers::Phase;
    use crate::params::ParamStore;
    use proptest::prelude::*;

    use ActBackwardMode::{ApproxSigned as Approx, Exact};

    fn t(v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(&[v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn relu6_values_and_boundaries() {
        let (y, _) = relu6_forward(&t(&[-1.0, 3.0, 7.0, 0.0, 6.0]), Exact);
        assert_eq!(y.data(), &[0.0, 3.0, 6.0, 0.0, 6.0]);
    }

    #[test]
    fn relu6_backward_rules() {
        let a = t(&[7.0, -2.0]);
        let g = t(&[5.0, 5.0]);
        let (_, m) = relu6_forward(&a, Exact);
        assert_eq!(relu6_backward(&g, &m, Exact).unwrap().data(), &[0.0, 0.0]);
        let (_, m) = relu6_forward(&a, Approx);
        assert_eq!(relu6_backward(&g, &m, Approx).unwrap().data(), &[5.0, 0.0]);
        assert!(matches!(relu6_backward(&g, &m, Exact), Err(Error::State(_))));
    }

    #[test]
    fn relu6_mask_bytes() {
        let a = Tensor::<f32>::rand_normal(&[8, 96, 7, 7], 3, 0.0, 4.0).unwrap();
        assert_eq!(relu6_forward(&a, Exact).1.byte_len(), 9408);
        assert_eq!(relu6_forward(&a, Approx).1.byte_len(), 4704);
    }

    #[test]
    fn hardswish_values() {
        let (y, _) = hardswish_forward(&t(&[0.0, 3.0, -3.0, 1.0, 5.5]), Exact);
        let want = [0.0, 3.0, 0.0, 4.0 / 6.0, 5.5];
        for (a, b) in y.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn hardswish_backward_rules() {
        let (_, s) = hardswish_forward(&t(&[1.0]), Exact);
        let g = hardswish_backward(&t(&[1.0]), &s, Exact).unwrap();
        assert!((g.data()[0] - 5.0 / 6.0).abs() < 1e-12);
        let (_, s) = hardswish_forward(&t(&[-0.5, 0.5]), Approx);
        assert_eq!(
            hardswish_backward(&t(&[2.0, 2.0]), &s, Approx).unwrap().data(),
            &[0.0, 2.0]
        );
        assert!(hardswish_backward(&t(&[2.0, 2.0]), &s, Exact).is_err());
    }

    #[test]
    fn hardswish_saved_bytes() {
        let a = Tensor::<f32>::rand_normal(&[8, 96, 7, 7], 3, 0.0, 4.0).unwrap();
        for (mode, bytes) in [(Exact, 150528), (Approx, 4704)] {
            let act = Activation {
                id: "h".into(),
                kind: ActKind::HardSwish,
                mode,
            };
            let mut p = ParamStore::new();
            let (_, tape) = run(&mut p, Phase::Train, &[&a], |s| act.forward(s, &a));
            assert_eq!(tape.saved_bytes(), bytes);
        }
    }

    #[test]
    fn hardsigmoid_values_and_slope() {
        let (y, _) = hardsigmoid_forward(&t(&[3.0, -3.0, 0.0]));
        assert_eq!(y.data(), &[1.0, 0.0, 0.5]);
        let (_, m) = hardsigmoid_forward(&t(&[0.0]));
        assert!((hardsigmoid_backward(&t(&[6.0]), &m).unwrap().data()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn untracked_input_saves_nothing() {
        let a = t(&[1.0, -1.0]);
        let act = Activation::new("r", ActKind::Relu6);
        let mut p = ParamStore::new();
        let (_, tape) = run(&mut p, Phase::Train, &[], |s| act.forward(s, &a));
        assert_eq!(tape.saved_bytes(), 0);
        assert_eq!(tape.node_count(), 0);
    }

    #[test]
    fn exact_equals_approx_on_grid_regions() {
        let grid: Vec<f64> = (-400..=600).map(|i| i as f64 * 0.01).collect();
        let a = t(&grid);
        let g = a.map(|v| v * 0.3 + 1.0);
        let (_, me) = relu6_forward(&a, Exact);
        let (_, ma) = relu6_forward(&a, Approx);
        assert_eq!(
            relu6_backward(&g, &me, Exact).unwrap(),
            relu6_backward(&g, &ma, Approx).unwrap()
        );

        let far: Vec<f64> = grid
            .iter()
            .map(|&v| if v < 0.0 { v - 3.001 } else { v + 3.001 })
            .collect();
        let a = t(&far);
        let (_, se) = hardswish_forward(&a, Exact);
        let (_, sa) = hardswish_forward(&a, Approx);
        assert_eq!(
            hardswish_backward(&g, &se, Exact).unwrap(),
            hardswish_backward(&g, &sa, Approx).unwrap()
        );
    }

    proptest! {
        #[test]
        fn relu6_equal_below_six(v in proptest::collection::vec(-50.0f64..6.0, 1..64)) {
            let a = t(&v);
            let g = a.map(|x| x + 0.5);
            let (_, me) = relu6_forward(&a, Exact);
            let (_, ma) = relu6_forward(&a, Approx);
            prop_assert_eq!(relu6_backward(&g, &me, Exact).unwrap(), relu6_backward(&g, &ma, Approx).unwrap());
        }

        #[test]
        fn hardswish_equal_outside_band(v in proptest::collection::vec(3.000_001f64..50.0, 1..64), signs in proptest::collection::vec(any::<bool>(), 64)) {
            let vals: Vec<f64> = v.iter().zip(&signs).map(|(x, s)| if *s { *x } else { -*x }).collect();
            let a = t(&vals);
            let g = a.map(|x| 0.1 * x);
            let (_, se) = hardswish_forward(&a, Exact);
            let (_, sa) = hardswish_forward(&a, Approx);
            prop_assert_eq!(hardswish_backward(&g, &se, Exact).unwrap(), hardswish_backward(&g, &sa, Approx).unwrap());
        }
    }
}
