//! Central finite-difference checks of every layer's exact backward pass.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::layers::{
    softmax_cross_entropy, weighted_sum, ActKind, Activation, BatchNorm, BnMode, Conv2d, ConvGeometry, Linear,
    ParamDecl, Phase, Session, SqueezeExcite,
};
use crate::model::mix_seed;
use crate::parallel::map_indexed;
use crate::params::{ParamKind, ParamStore};
use crate::tape::Tape;
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-5;
/// Minimum distance kept between sampled pre-activations and a kink.
const KINK_MARGIN: f64 = 1e-2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum GradLayer {
    Conv,
    Depthwise,
    BnFull,
    BnShiftOnly,
    BnFrozen,
    Relu6,
    HardSwish,
    HardSigmoid,
    SqueezeExcite,
    Linear,
    SoftmaxCrossEntropy,
}

impl GradLayer {
    pub const ALL: [GradLayer; 11] = [
        GradLayer::Conv,
        GradLayer::Depthwise,
        GradLayer::BnFull,
        GradLayer::BnShiftOnly,
        GradLayer::BnFrozen,
        GradLayer::Relu6,
        GradLayer::HardSwish,
        GradLayer::HardSigmoid,
        GradLayer::SqueezeExcite,
        GradLayer::Linear,
        GradLayer::SoftmaxCrossEntropy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GradLayer::Conv => "conv",
            GradLayer::Depthwise => "depthwise_conv",
            GradLayer::BnFull => "batch_norm_full",
            GradLayer::BnShiftOnly => "batch_norm_shift_only",
            GradLayer::BnFrozen => "batch_norm_frozen",
            GradLayer::Relu6 => "relu6",
            GradLayer::HardSwish => "hswish",
            GradLayer::HardSigmoid => "hsigmoid",
            GradLayer::SqueezeExcite => "squeeze_excite",
            GradLayer::Linear => "linear",
            GradLayer::SoftmaxCrossEntropy => "softmax_cross_entropy",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerCheck {
    pub layer: &'static str,
    pub instances: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub step: f64,
    pub layers: Vec<LayerCheck>,
    pub passed: bool,
}

type Objective = Arc<dyn Fn(&mut Session<'_, f64>, &Tensor<f64>) -> Result<Tensor<f64>> + Send + Sync>;

/// One randomized problem: parameters, an input and a scalar objective.
struct Instance {
    params: ParamStore<f64>,
    x: Tensor<f64>,
    f: Objective,
}

fn fill(store: &mut ParamStore<f64>, decls: &[ParamDecl], rng: &mut ChaCha8Rng) {
    for d in decls {
        let n = d.numel();
        let data: Vec<f64> = (0..n)
            .map(|_| match d.kind {
                ParamKind::Scale => rng.random_range(0.5..1.5),
                ParamKind::RunningVar => rng.random_range(0.5..2.0),
                _ => rng.random_range(-0.8..0.8),
            })
            .collect();
        store.insert(d.id.clone(), d.kind, Tensor::from_vec(&d.shape, data).unwrap());
        if d.kind.is_learnable() {
            store.set_trainable(&d.id, true).unwrap();
        }
    }
}

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn away_from(v: f64, kinks: &[f64]) -> f64 {
    let mut v = v;
    while kinks.iter().any(|k| (v - k).abs() < KINK_MARGIN) {
        v += 2.0 * KINK_MARGIN;
    }
    v
}

fn weighted(
    r: Tensor<f64>,
    g: impl Fn(&mut Session<'_, f64>, &Tensor<f64>) -> Result<Tensor<f64>> + Send + Sync + 'static,
) -> Objective {
    Arc::new(move |s, x| {
        let y = g(s, x)?;
        weighted_sum(s, &y, &r)
    })
}

fn instance(layer: GradLayer, seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::new();
    let b = 2;
    match layer {
        GradLayer::Conv | GradLayer::Depthwise => {
            let stride = rng.random_range(1..=2);
            let geom = if layer == GradLayer::Conv {
                ConvGeometry::dense(3, 4, 3, stride).unwrap()
            } else {
                ConvGeometry::depthwise(3, 3, stride).unwrap()
            };
            let conv = Conv2d::new("conv", geom);
            fill(&mut params, &conv.params(), &mut rng);
            let x = uniform(&[b, 3, 5, 5], &mut rng, -1.0, 1.0);
            let (ho, wo) = geom.out_hw(5, 5).unwrap();
            let r = uniform(&[b, geom.cout, ho, wo], &mut rng, -1.0, 1.0);
            Instance {
                params,
                x,
                f: weighted(r, move |s, x| conv.forward(s, x)),
            }
        }
        GradLayer::BnFull | GradLayer::BnShiftOnly | GradLayer::BnFrozen => {
            let mut bn = BatchNorm::new("bn", 3);
            fill(&mut params, &bn.params(), &mut rng);
            let mode = match layer {
                GradLayer::BnFull => BnMode::Full,
                GradLayer::BnShiftOnly => BnMode::ShiftOnly,
                _ => BnMode::Frozen,
            };
            bn.set_mode(mode, &mut params).unwrap();
            let x = uniform(&[b, 3, 3, 3], &mut rng, -2.0, 2.0);
            let r = uniform(&[b, 3, 3, 3], &mut rng, -1.0, 1.0);
            Instance {
                params,
                x,
                f: weighted(r, move |s, x| bn.forward(s, x)),
            }
        }
        GradLayer::Relu6 | GradLayer::HardSwish | GradLayer::HardSigmoid => {
            let (kind, kinks): (ActKind, &[f64]) = match layer {
                GradLayer::Relu6 => (ActKind::Relu6, &[0.0, 6.0]),
                GradLayer::HardSwish => (ActKind::HardSwish, &[-3.0, 3.0]),
                _ => (ActKind::HardSigmoid, &[-3.0, 3.0]),
            };
            let x = uniform(&[b, 3, 4, 4], &mut rng, -8.0, 8.0).map(|v| away_from(v, kinks));
            let r = uniform(&[b, 3, 4, 4], &mut rng, -1.0, 1.0);
            let act = Activation::new("act", kind);
            Instance {
                params,
                x,
                f: weighted(r, move |s, x| act.forward(s, x)),
            }
        }
        GradLayer::SqueezeExcite => loop {
            let se = SqueezeExcite::new("se", 4, 2);
            let mut p = ParamStore::new();
            fill(&mut p, &se.params(), &mut rng);
            let x = uniform(&[b, 4, 3, 3], &mut rng, -3.0, 3.0);
            let (h1, z) = se.pre_activations(&p, &x).unwrap();
            let clear = h1.data().iter().all(|v| v.abs() >= KINK_MARGIN)
                && z.data().iter().all(|v| (v.abs() - 3.0).abs() >= KINK_MARGIN);
            if clear {
                let r = uniform(&[b, 4, 3, 3], &mut rng, -1.0, 1.0);
                break Instance {
                    params: p,
                    x,
                    f: weighted(r, move |s, x| se.forward(s, x)),
                };
            }
        },
        GradLayer::Linear => {
            let lin = Linear::new("fc", 5, 3);
            fill(&mut params, &lin.params(), &mut rng);
            let x = uniform(&[b + 1, 5], &mut rng, -1.0, 1.0);
            let r = uniform(&[b + 1, 3], &mut rng, -1.0, 1.0);
            Instance {
                params,
                x,
                f: weighted(r, move |s, x| lin.forward(s, x)),
            }
        }
        GradLayer::SoftmaxCrossEntropy => {
            let k = 4;
            let x = uniform(&[b + 2, k], &mut rng, -3.0, 3.0);
            let labels: Vec<usize> = (0..b + 2).map(|_| rng.random_range(0..k)).collect();
            Instance {
                params,
                x,
                f: Arc::new(move |s, x| softmax_cross_entropy(s, x, &labels)),
            }
        }
    }
}

fn eval(params: &mut ParamStore<f64>, x: &Tensor<f64>, f: &Objective) -> Result<f64> {
    let mut tape = Tape::new();
    let mut s = Session::new(params, &mut tape, Phase::BatchStatsNoUpdate);
    f(&mut s, x)?.item()
}

/// Norm-wise relative error between the tape gradient and central
/// differences, over the input and every trainable parameter.
fn relative_error(inst: &mut Instance) -> Result<f64> {
    let mut tape = Tape::new();
    tape.watch(&inst.x);
    let loss = {
        let mut s = Session::new(&mut inst.params, &mut tape, Phase::BatchStatsNoUpdate);
        (inst.f)(&mut s, &inst.x)?
    };
    let grads = tape.backward(&loss, &inst.params)?;
    let mut analytic: Vec<f64> = match grads.input(inst.x.id()) {
        Some(g) => g.data().to_vec(),
        None => vec![0.0; inst.x.numel()],
    };
    let mut numeric = Vec::with_capacity(analytic.len());
    for i in 0..inst.x.numel() {
        let mut plus = inst.x.clone();
        plus.data_mut()[i] += STEP;
        let mut minus = inst.x.clone();
        minus.data_mut()[i] -= STEP;
        let d = eval(&mut inst.params, &plus, &inst.f)? - eval(&mut inst.params, &minus, &inst.f)?;
        numeric.push(d / (2.0 * STEP));
    }
    let ids: Vec<_> = inst
        .params
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(id, _)| id.clone())
        .collect();
    for id in ids {
        let n = inst.params.get(&id)?.numel();
        match grads.get(&id) {
            Some(g) => analytic.extend_from_slice(g.data()),
            None => analytic.extend(std::iter::repeat_n(0.0, n)),
        }
        for i in 0..n {
            let orig = inst.params.tensor_mut(&id)?.data()[i];
            inst.params.tensor_mut(&id)?.data_mut()[i] = orig + STEP;
            let up = eval(&mut inst.params, &inst.x, &inst.f)?;
            inst.params.tensor_mut(&id)?.data_mut()[i] = orig - STEP;
            let down = eval(&mut inst.params, &inst.x, &inst.f)?;
            inst.params.tensor_mut(&id)?.data_mut()[i] = orig;
            numeric.push((up - down) / (2.0 * STEP));
        }
    }
    let diff = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let scale = norm(&analytic).max(norm(&numeric));
    Ok(if scale == 0.0 { diff } else { diff / scale })
}

/// Checks `instances` random problems for one layer kind.
pub fn check_layer(layer: GradLayer, seed: u64, instances: usize) -> Result<LayerCheck> {
    let errors = map_indexed(instances, |i| {
        let mut inst = instance(layer, mix_seed(seed, i as u64 * 31 + layer as u64));
        relative_error(&mut inst)
    });
    let mut max = 0.0f64;
    for e in errors {
        max = max.max(e?);
    }
    Ok(LayerCheck {
        layer: layer.name(),
        instances,
        max_rel_error: max,
        passed: max <= TOLERANCE,
    })
}

/// Runs the full suite over every layer kind.
pub fn run_gradcheck(seed: u64, instances: usize) -> Result<GradcheckReport> {
    let layers = GradLayer::ALL
        .iter()
        .map(|&l| check_layer(l, seed, instances))
        .collect::<Result<Vec<_>>>()?;
    Ok(GradcheckReport {
        tolerance: TOLERANCE,
        step: STEP,
        passed: layers.iter().all(|l| l.passed),
        layers,
    })
}
