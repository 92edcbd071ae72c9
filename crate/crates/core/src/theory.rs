//! Numerical checks of the error bound for approximate activation
//! backward passes: closed-form evaluation, the per-layer norm inequalities
//! and an empirical twin-training measurement.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{hardswish_grad, ActBackwardMode, ActKind, Phase};
use crate::model::{build_model, mix_seed, Model, ModelSpec};
use crate::policy::{apply_policy, TrainPolicy};
use crate::tape::Tape;
use crate::trainer::{train_step, Dataset, Optimizer, OptimizerCfg};

/// Inputs of the bound: learning rate, Lipschitz constant of the objective,
/// step count, gradient bound, per-layer output size and the number of
/// approximated layers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundParams {
    pub lambda: f64,
    pub m: f64,
    pub t: usize,
    pub g: f64,
    pub n: usize,
    pub l: usize,
}

impl BoundParams {
    pub fn psi(&self) -> f64 {
        1.5 * (self.n as f64).sqrt() * self.g
    }

    pub fn psi_tilde(&self) -> f64 {
        (self.n as f64).sqrt() * self.g
    }

    fn validate(&self) -> Result<()> {
        let pos = |v: f64| v > 0.0 && v.is_finite();
        if !pos(self.lambda) || !pos(self.m) || !pos(self.g) || self.n == 0 {
            return Err(Error::value(format!(
                "lambda, M, G and N must be positive, got {} {} {} {}",
                self.lambda, self.m, self.g, self.n
            )));
        }
        Ok(())
    }
}

/// `sum_{i=1..l} psi^i` in closed form, evaluated through `ln_1p`/`exp_m1`
/// so it stays accurate near `psi = 1`, where it falls back to `l`.
pub fn geometric_sum(psi: f64, l: usize) -> f64 {
    let d = psi - 1.0;
    if d.abs() <= 1e-12 {
        l as f64
    } else if psi > 0.0 {
        psi * (l as f64 * d.ln_1p()).exp_m1() / d
    } else {
        psi * (1.0 - psi.powi(l as i32)) / (1.0 - psi)
    }
}

/// `lambda * M * T * G * (inner(psi) + inner(psi_tilde))`.
pub fn bound_eval(p: &BoundParams) -> Result<f64> {
    p.validate()?;
    let inner = geometric_sum(p.psi(), p.l) + geometric_sum(p.psi_tilde(), p.l);
    Ok(p.lambda * p.m * p.t as f64 * p.g * inner)
}

/// Weight-distance bound after `t` steps:
/// `lambda * t * G * sum_{i=1..L} (psi^(L-i) + psi_tilde^(L-i))`.
pub fn step_bound(p: &BoundParams, t: usize) -> f64 {
    let (psi, psit) = (p.psi(), p.psi_tilde());
    let s: f64 = (1..=p.l)
        .map(|i| psi.powi((p.l - i) as i32) + psit.powi((p.l - i) as i32))
        .sum();
    p.lambda * t as f64 * p.g * s
}

/// `sqrt(sum_i sum_k h[i,k]^2 * sum_j w[k,j]^2)` for `h: n1 x n2` and
/// `w: n2 x n3`: the Frobenius norm of the activation-gated backward
/// product with each row of `w` scaled by the matching derivative.
pub fn gated_product_norm(h: &[f64], w: &[f64], n1: usize, n2: usize, n3: usize) -> Result<f64> {
    if h.len() != n1 * n2 || w.len() != n2 * n3 {
        return Err(Error::shape("derivative or weight matrix has the wrong size"));
    }
    let row_sq: Vec<f64> = (0..n2)
        .map(|k| w[k * n3..(k + 1) * n3].iter().map(|v| v * v).sum())
        .collect();
    let total: f64 = (0..n1)
        .flat_map(|i| (0..n2).map(move |k| (i, k)))
        .map(|(i, k)| h[i * n2 + k].powi(2) * row_sq[k])
        .sum();
    Ok(total.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PropositionReport {
    pub trials: usize,
    pub exact_max_ratio: f64,
    pub approx_max_ratio: f64,
    pub passed: bool,
}

/// Monte-Carlo check that the gated product stays within `1.5 sqrt(n1) G`
/// for the exact Hard-Swish derivative and within `sqrt(n1) G` for the
/// signed approximation, with `a ~ U[-6, 6]` and `||W||_F <= G`.
pub fn proposition_check(
    n1: usize,
    n2: usize,
    n3: usize,
    g: f64,
    seed: u64,
    trials: usize,
) -> Result<PropositionReport> {
    if n1 == 0 || n2 == 0 || n3 == 0 || trials == 0 || !(g > 0.0) {
        return Err(Error::value("dimensions, trials and G must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bound_exact = 1.5 * (n1 as f64).sqrt() * g;
    let bound_approx = (n1 as f64).sqrt() * g;
    let mut report = PropositionReport {
        trials,
        exact_max_ratio: 0.0,
        approx_max_ratio: 0.0,
        passed: true,
    };
    for _ in 0..trials {
        let a: Vec<f64> = (0..n1 * n2).map(|_| rng.random_range(-6.0..=6.0)).collect();
        let mut w: Vec<f64> = (0..n2 * n3).map(|_| rng.random_range(-g..=g)).collect();
        let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > g {
            let k = g / norm * (1.0 - 1e-12);
            w.iter_mut().for_each(|v| *v *= k);
        }
        let exact: Vec<f64> = a.iter().map(|&v| hardswish_grad(v)).collect();
        let approx: Vec<f64> = a.iter().map(|&v| if v >= 0.0 { 1.0 } else { 0.0 }).collect();
        let re = gated_product_norm(&exact, &w, n1, n2, n3)? / bound_exact;
        let ra = gated_product_norm(&approx, &w, n1, n2, n3)? / bound_approx;
        report.exact_max_ratio = report.exact_max_ratio.max(re);
        report.approx_max_ratio = report.approx_max_ratio.max(ra);
    }
    report.passed = report.exact_max_ratio <= 1.0 && report.approx_max_ratio <= 1.0;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DivergenceReport {
    pub steps: usize,
    pub lambda: f64,
    pub per_step_distance: Vec<f64>,
    pub per_step_bound: Vec<f64>,
    pub final_output_distance: f64,
    #[serde(rename = "measured_G")]
    pub measured_g: f64,
    #[serde(rename = "estimated_M")]
    pub estimated_m: f64,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "L")]
    pub l: usize,
    pub bound: f64,
    pub pass: bool,
}

impl DivergenceReport {
    /// Whether every recorded weight distance respects the linear-in-t bound.
    pub fn steps_within_bound(&self) -> bool {
        self.per_step_distance
            .iter()
            .zip(&self.per_step_bound)
            .all(|(d, b)| d <= b)
    }
}

/// Objective on the probe batch: cross-entropy with batch statistics and no
/// running-statistic update.
fn probe_loss(model: &mut Model<f64>, data: &Dataset, probe: &[usize]) -> Result<f64> {
    let (x, labels) = data.batch::<f64>(probe)?;
    let mut tape = Tape::new();
    Ok(model.loss(&mut tape, &x, &labels, Phase::BatchStatsNoUpdate)?.item()?)
}

fn approximated_layers(model: &Model<f64>) -> usize {
    let mut blocks = model.blocks().to_vec();
    blocks
        .iter_mut()
        .flat_map(|b| {
            b.activations_mut()
                .into_iter()
                .map(|a| (a.kind, a.mode))
                .collect::<Vec<_>>()
        })
        .filter(|&(k, m)| k != ActKind::HardSigmoid && m == ActBackwardMode::ApproxSigned)
        .count()
}

/// Largest output of any layer holding a trainable parameter.
fn max_trainable_output(model: &mut Model<f64>, data: &Dataset, probe: &[usize]) -> Result<usize> {
    let (x, labels) = data.batch::<f64>(probe)?;
    let mut tape = Tape::new();
    model.loss(&mut tape, &x, &labels, Phase::BatchStatsNoUpdate)?;
    let trainable: Vec<String> = model
        .params()
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(id, _)| id.as_str().to_string())
        .collect();
    Ok(tape
        .node_outputs()
        .into_iter()
        .filter(|(layer, _)| trainable.iter().any(|id| id.starts_with(&format!("{layer}."))))
        .map(|(_, n)| n)
        .max()
        .unwrap_or(1))
}

/// Largest `|F(W1) - F(W2)| / ||W1 - W2||` over random pairs of small
/// perturbations around the model's trainable weights.
fn estimate_lipschitz(model: &Model<f64>, data: &Dataset, probe: &[usize], pairs: usize, seed: u64) -> Result<f64> {
    let base = model.params().trainable_vector();
    if base.is_empty() {
        return Ok(0.0);
    }
    let rms = (base.iter().map(|v| v * v).sum::<f64>() / base.len() as f64)
        .sqrt()
        .max(1e-3);
    let sigma = 1e-2 * rms;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m: f64 = 0.0;
    let probe_at = |w: &[f64]| -> Result<f64> {
        let mut c = model.clone();
        c.params_mut().set_trainable_vector(w)?;
        probe_loss(&mut c, data, probe)
    };
    for _ in 0..pairs {
        let mut draw = || -> Vec<f64> {
            base.iter()
                .map(|&v| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    v + sigma * z
                })
                .collect()
        };
        let (w1, w2) = (draw(), draw());
        let dist = w1.iter().zip(&w2).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        if dist > 0.0 {
            m = m.max((probe_at(&w1)? - probe_at(&w2)?).abs() / dist);
        }
    }
    Ok(m)
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Options of a twin run beyond the spec, policies and data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwinOptions {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub lipschitz_pairs: usize,
    pub seed: u64,
}

impl TwinOptions {
    pub fn new(steps: usize, seed: u64) -> Self {
        TwinOptions {
            steps,
            lr: 0.01,
            batch_size: 8,
            lipschitz_pairs: 100,
            seed,
        }
    }
}

/// Trains the exact and approximate twins in lockstep with SGD and compares
/// their weights and probe objective against the bound.
pub fn twin_divergence(
    spec: &ModelSpec,
    policies: (&TrainPolicy, &TrainPolicy),
    data: &Dataset,
    opts: TwinOptions,
) -> Result<DivergenceReport> {
    let model = build_model::<f64>(spec, opts.seed)?;
    twin_divergence_from(model, policies, data, opts)
}

/// As [`twin_divergence`], starting from given initial weights.
pub fn twin_divergence_from(
    model: Model<f64>,
    policies: (&TrainPolicy, &TrainPolicy),
    data: &Dataset,
    opts: TwinOptions,
) -> Result<DivergenceReport> {
    let (pa, pb) = policies;
    if !pa.differs_only_in_act_backward(pb) {
        return Err(Error::Config("twin policies must differ only in act_backward".into()));
    }
    let (exact_policy, approx_policy) = match (pa.act_mode(), pb.act_mode()) {
        (ActBackwardMode::ApproxSigned, ActBackwardMode::Exact) => (pb, pa),
        _ => (pa, pb),
    };
    if !(opts.lr > 0.0) || opts.batch_size == 0 {
        return Err(Error::Config(
            "twin runs need a positive learning rate and batch size".into(),
        ));
    }
    if data.is_empty() {
        return Err(Error::Config("dataset is empty".into()));
    }
    let mut exact = apply_policy(model.clone(), exact_policy)?.into_model();
    let mut approx = apply_policy(model, approx_policy)?.into_model();

    let (train_idx, test_idx) = data.split(opts.seed);
    let probe: Vec<usize> = if test_idx.len() >= opts.batch_size {
        test_idx[..opts.batch_size].to_vec()
    } else {
        (0..opts.batch_size.min(data.len())).collect()
    };
    let pool = if train_idx.len() >= opts.batch_size {
        train_idx
    } else {
        (0..data.len()).collect()
    };
    if pool.len() < opts.batch_size {
        return Err(Error::Config(format!("need at least {} samples", opts.batch_size)));
    }

    let cfg = OptimizerCfg::sgd(opts.lr);
    let mut opt_e = Optimizer::new(cfg.clone())?;
    let mut opt_a = Optimizer::new(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(opts.seed, 77));
    let mut g_max: f64 = 0.0;
    let mut distances = Vec::with_capacity(opts.steps);
    for step in 0..opts.steps {
        let batch: Vec<usize> = (0..opts.batch_size)
            .map(|_| pool[rng.random_range(0..pool.len())])
            .collect();
        let (x, labels) = data.batch::<f64>(&batch)?;
        let se = train_step(&mut exact, &mut opt_e, &x, &labels, step)?;
        let sa = train_step(&mut approx, &mut opt_a, &x, &labels, step)?;
        g_max = g_max.max(se.grad_norm).max(sa.grad_norm);
        distances.push(distance(
            &exact.params().trainable_vector(),
            &approx.params().trainable_vector(),
        ));
    }

    let f_exact = probe_loss(&mut exact, data, &probe)?;
    let f_approx = probe_loss(&mut approx, data, &probe)?;
    let n = max_trainable_output(&mut approx, data, &probe)?;
    let l = approximated_layers(&approx);
    let m = estimate_lipschitz(&exact, data, &probe, opts.lipschitz_pairs, mix_seed(opts.seed, 99))?;
    let params = BoundParams {
        lambda: opts.lr,
        m: m.max(f64::MIN_POSITIVE),
        t: opts.steps,
        g: g_max.max(f64::MIN_POSITIVE),
        n,
        l,
    };
    let bound = bound_eval(&params)?;
    let per_step_bound = (1..=opts.steps).map(|t| step_bound(&params, t)).collect();
    let final_output_distance = (f_approx - f_exact).abs();
    Ok(DivergenceReport {
        steps: opts.steps,
        lambda: opts.lr,
        per_step_distance: distances,
        per_step_bound,
        final_output_distance,
        measured_g: g_max,
        estimated_m: m,
        n,
        l,
        bound,
        pass: final_output_distance <= bound,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::BnMode;
    use crate::model::{BlockActivation, BlockSpec};
    use crate::params::ParamId;
    use crate::tensor::Tensor;
    use crate::trainer::{synthetic, SyntheticSpec};
    use proptest::prelude::*;

    fn p(lambda: f64, m: f64, t: usize, g: f64, n: usize, l: usize) -> BoundParams {
        BoundParams { lambda, m, t, g, n, l }
    }

    #[test]
    fn bound_worked_example() {
        let b = bound_eval(&p(0.01, 1.0, 10, 0.3, 4, 2)).unwrap();
        // psi = 0.9, psi~ = 0.6; 0.9 + 0.81 = 1.71, 0.6 + 0.36 = 0.96
        assert!((b - 0.03 * 2.67).abs() < 1e-12, "{b}");
    }

    #[test]
    fn unit_psi_tilde_sums_directly() {
        let q = p(1.0, 1.0, 1, 0.5, 4, 7);
        assert_eq!(q.psi_tilde(), 1.0);
        assert_eq!(geometric_sum(q.psi_tilde(), 7), 7.0);
    }

    #[test]
    fn zero_steps_zero_bound() {
        assert_eq!(bound_eval(&p(0.1, 2.0, 0, 0.4, 9, 3)).unwrap(), 0.0);
    }

    #[test]
    fn nonpositive_inputs_rejected() {
        assert!(bound_eval(&p(0.0, 1.0, 1, 1.0, 1, 1)).is_err());
        assert!(bound_eval(&p(0.1, -1.0, 1, 1.0, 1, 1)).is_err());
        assert!(bound_eval(&p(0.1, 1.0, 1, 0.0, 1, 1)).is_err());
        assert!(bound_eval(&p(0.1, 1.0, 1, 1.0, 0, 1)).is_err());
    }

    #[test]
    fn proposition_hand_case() {
        // h' = 1 and a single weight equal to G
        let r = gated_product_norm(&[1.0], &[0.5], 1, 1, 1).unwrap() / (1.5 * 0.5);
        assert!((r - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(gated_product_norm(&[1.5; 4], &[0.0; 8], 2, 2, 4).unwrap(), 0.0);
    }

    #[test]
    fn proposition_monte_carlo() {
        let r = proposition_check(4, 4, 4, 0.5, 1, 1000).unwrap();
        assert!(r.passed, "{r:?}");
        assert!(r.exact_max_ratio > 0.0 && r.approx_max_ratio > 0.0);
    }

    proptest! {
        #[test]
        fn near_unit_psi_closed_form_agrees(d in -1e-6f64..1e-6, l in 0usize..40) {
            let psi = 1.0 + d;
            let direct: f64 = (1..=l).map(|i| psi.powi(i as i32)).sum();
            prop_assert!((geometric_sum(psi, l) - direct).abs() <= 1e-9);
        }

        #[test]
        fn bound_monotone(lambda in 0.001f64..1.0, m in 0.01f64..5.0, t in 0usize..50, g in 0.01f64..2.0, n in 1usize..50, l in 0usize..6) {
            let b = bound_eval(&p(lambda, m, t, g, n, l)).unwrap();
            for bigger in [
                p(lambda * 1.5, m, t, g, n, l),
                p(lambda, m * 1.5, t, g, n, l),
                p(lambda, m, t + 1, g, n, l),
                p(lambda, m, t, g * 1.5, n, l),
                p(lambda, m, t, g, n + 1, l),
                p(lambda, m, t, g, n, l + 1),
            ] {
                let b2 = bound_eval(&bigger).unwrap();
                prop_assert!(b2 >= b * (1.0 - 1e-12), "{b2} < {b}");
            }
        }

        #[test]
        fn proposition_never_exceeds_one(n1 in 1usize..6, n2 in 1usize..6, n3 in 1usize..6, g in 0.01f64..3.0, seed in any::<u64>()) {
            let r = proposition_check(n1, n2, n3, g, seed, 20).unwrap();
            prop_assert!(r.passed);
        }
    }

    fn toy() -> ModelSpec {
        ModelSpec::new(
            [8, 3, 8, 8],
            2,
            vec![
                BlockSpec::conv(3, 8, 3, 1).with_activation(BlockActivation::HardSwish),
                BlockSpec::irb_v3(8, 8, 2, 3, 1),
                BlockSpec::head(8, 2),
            ],
        )
    }

    fn blobs() -> Dataset {
        synthetic(&SyntheticSpec::new(64, 2, 3).with_shape([3, 8, 8])).unwrap()
    }

    fn pair() -> (TrainPolicy, TrainPolicy) {
        (
            TrainPolicy::mobiletl(2).with_act_backward(ActBackwardMode::Exact),
            TrainPolicy::mobiletl(2).with_act_backward(ActBackwardMode::ApproxSigned),
        )
    }

    #[test]
    fn zero_steps_zero_distance() {
        let (a, b) = pair();
        let mut o = TwinOptions::new(0, 1);
        o.lipschitz_pairs = 3;
        let r = twin_divergence(&toy(), (&a, &b), &blobs(), o).unwrap();
        assert!(r.per_step_distance.is_empty());
        assert_eq!(r.final_output_distance, 0.0);
        assert_eq!(r.bound, 0.0);
        assert!(r.pass);
    }

    #[test]
    fn mismatched_pair_rejected() {
        let (a, _) = pair();
        let b = TrainPolicy::mobiletl(1).with_act_backward(ActBackwardMode::ApproxSigned);
        let r = twin_divergence(&toy(), (&a, &b), &blobs(), TwinOptions::new(1, 1));
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn short_run_respects_bound() {
        let (a, b) = pair();
        let mut o = TwinOptions::new(10, 2);
        o.lipschitz_pairs = 10;
        let r = twin_divergence(&toy(), (&a, &b), &blobs(), o).unwrap();
        assert_eq!(r.l, 3);
        assert!(r.per_step_distance.iter().any(|&d| d > 0.0));
        assert!(r.pass, "{r:?}");
        assert!(r.steps_within_bound());
    }

    #[test]
    fn equality_region_gives_identical_twins() {
        // One Hard-Swish IRB whose shift-only batch norms push every
        // activation input above 3, where both backward rules agree.
        let spec = ModelSpec::new(
            [8, 4, 6, 6],
            2,
            vec![BlockSpec::irb_v3(4, 4, 2, 3, 1), BlockSpec::head(4, 2)],
        );
        let mut model = build_model::<f64>(&spec, 4).unwrap();
        for bn in ["b0.expand_bn", "b0.dw_bn"] {
            for (name, v) in [("gamma", 0.1), ("beta", 10.0)] {
                let id = ParamId::new(format!("{bn}.{name}"));
                let t = model.params_mut().tensor_mut(&id).unwrap();
                *t = Tensor::full(t.shape(), v).unwrap();
            }
        }
        let data = synthetic(&SyntheticSpec::new(48, 2, 9).with_shape([4, 6, 6])).unwrap();
        let (a, b) = pair();
        let (a, b) = (a.with_train_head(true), b.with_train_head(true));
        let (a, b) = (TrainPolicy { k_blocks: 1, ..a }, TrainPolicy { k_blocks: 1, ..b });
        let check = apply_policy(model.clone(), &b).unwrap();
        let mut blocks = check.model.blocks().to_vec();
        let modes: Vec<BnMode> = blocks[0].batch_norms_mut().iter().map(|b| b.mode).collect();
        assert_eq!(modes, [BnMode::ShiftOnly, BnMode::ShiftOnly, BnMode::Full]);
        let mut o = TwinOptions::new(8, 5);
        o.lipschitz_pairs = 2;
        let r = twin_divergence_from(model, (&a, &b), &data, o).unwrap();
        assert!(
            r.per_step_distance.iter().all(|&d| d == 0.0),
            "{:?}",
            r.per_step_distance
        );
        assert_eq!(r.final_output_distance, 0.0);
    }
}
