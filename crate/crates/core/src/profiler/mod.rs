//! Analytical FLOPs and memory model for training a spec under a policy.
//!
//! Every multiply-accumulate counts as 2 FLOPs and every other scalar op as
//! one. Memory is reported in bytes; reports convert to decimal MB.

mod audit;
mod emit;

pub(crate) use audit::observe;
pub use audit::{audit_against_tape, AuditReport, AuditRow};
pub use emit::{
    comparison_csv, comparison_json, comparison_table, emit_report, report_csv, report_json, report_table, round_sig6,
    stable_json, Format, CSV_HEADER,
};

use std::collections::HashSet;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::layers::{ActBackwardMode, ActKind, Activation, BatchNorm, BnMode, Conv2d, Linear, Phase, SqueezeExcite};
use crate::model::{architecture, Block, BlockKind, ModelSpec};
use crate::params::ParamId;
use crate::policy::{plan_policy, PolicyPlan, TrainPolicy};
use crate::tensor::DType;

/// Per-element FLOP constants used by the cost model, as `(op, rule)`.
pub const FLOP_COEFFICIENTS: &[(&str, &str)] = &[
    ("conv", "fwd 2*K*K*(Cin/g)*Cout*Ho*Wo*B; bwd fwd per needed grad (input, weight)"),
    ("batch_norm", "fwd 4/elem batch stats, 2/elem running stats; bwd full 3/elem params + 5/elem input, shift-only 1+1, frozen 0+1"),
    ("relu6", "fwd 1/elem; bwd 1/elem"),
    ("hswish", "fwd 3/elem; bwd 4/elem exact, 1/elem approx"),
    ("hsigmoid", "fwd 2/elem; bwd 1/elem"),
    ("add", "fwd 1/elem; bwd 0"),
    ("global_avg_pool", "fwd 1/elem; bwd 1/elem"),
    ("linear", "fwd 2*In*Out*B + Out*B; bwd 2*In*Out*B per weight or input grad, Out*B for bias"),
    ("squeeze_excite", "pool + fc1 + relu + fc2 + gate 2/elem + scale 1/elem"),
    ("softmax_cross_entropy", "fwd 3*B*K + B; bwd B*K"),
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayerProfile {
    pub layer_id: String,
    pub kind: String,
    pub fwd_flops: u64,
    pub bwd_flops: u64,
    pub param_bytes: u64,
    pub saved_act_bytes: u64,
    pub temp_bytes: u64,
}

impl LayerProfile {
    fn new(layer_id: &str, kind: &str) -> Self {
        LayerProfile {
            layer_id: layer_id.to_string(),
            kind: kind.to_string(),
            fwd_flops: 0,
            bwd_flops: 0,
            param_bytes: 0,
            saved_act_bytes: 0,
            temp_bytes: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ProfileTotals {
    pub fwd_flops: u64,
    pub bwd_flops: u64,
    pub param_bytes: u64,
    pub saved_act_bytes: u64,
    pub temp_bytes: u64,
    pub param_count: u64,
    pub trainable_params: u64,
}

impl ProfileTotals {
    pub fn train_flops(&self) -> u64 {
        self.fwd_flops + self.bwd_flops
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProfileReport {
    pub policy: String,
    pub input_shape: [usize; 4],
    pub dtype: String,
    pub rows: Vec<LayerProfile>,
    pub totals: ProfileTotals,
}

impl ProfileReport {
    pub fn row(&self, layer_id: &str) -> Option<&LayerProfile> {
        self.rows.iter().find(|r| r.layer_id == layer_id)
    }
}

/// Knobs of the cost model beyond the spec and policy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProfileOptions {
    pub dtype: DType,
    pub phase: Phase,
}

impl Default for ProfileOptions {
    fn default() -> Self {
        ProfileOptions {
            dtype: DType::F32,
            phase: Phase::Train,
        }
    }
}

/// Profiles one training step of `spec` under `policy` with f32 storage.
pub fn profile_model(spec: &ModelSpec, policy: &TrainPolicy, input_shape: [usize; 4]) -> Result<ProfileReport> {
    profile_model_with(spec, policy, input_shape, ProfileOptions::default())
}

pub fn profile_model_with(
    spec: &ModelSpec,
    policy: &TrainPolicy,
    input_shape: [usize; 4],
    opts: ProfileOptions,
) -> Result<ProfileReport> {
    if !matches!(opts.dtype, DType::F32 | DType::F64) {
        return Err(Error::value("profiles are defined for f32 or f64 storage"));
    }
    let mut spec = spec.clone();
    spec.input_shape = input_shape;
    spec.validate()?;
    let blocks = architecture(&spec)?;
    let plan = plan_policy(&blocks, spec.input_requires_grad, policy)?;
    let mut w = Walker {
        plan: &plan,
        elem: opts.dtype.bit_width() as u64 / 8,
        phase: opts.phase,
        next: 0,
        saved: HashSet::new(),
        rows: Vec::new(),
    };
    let mut x = w.fresh(input_shape.to_vec(), plan.input_requires_grad);
    for b in &blocks {
        x = w.block(b, &x)?;
    }
    if spec.head().is_some() {
        w.loss(&x);
    }
    let mut totals = ProfileTotals::default();
    for r in &w.rows {
        totals.fwd_flops += r.fwd_flops;
        totals.bwd_flops += r.bwd_flops;
        totals.param_bytes += r.param_bytes;
        totals.saved_act_bytes += r.saved_act_bytes;
        totals.temp_bytes += r.temp_bytes;
    }
    let decls: Vec<_> = blocks.iter().flat_map(Block::params).collect();
    totals.param_count = decls
        .iter()
        .filter(|d| d.kind.is_learnable())
        .map(|d| d.numel() as u64)
        .sum();
    totals.trainable_params = plan.trainable_count(&decls) as u64;
    Ok(ProfileReport {
        policy: policy.to_string(),
        input_shape,
        dtype: format!("{:?}", opts.dtype).to_lowercase(),
        rows: w.rows,
        totals,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Reduction {
    pub ft_all_bytes: u64,
    pub mobiletl_bytes: u64,
    /// `100 * (1 - mobiletl / ft_all)`; 0 when nothing is stored.
    pub percent: f64,
}

/// Stored-activation reduction of MobileTL over FT_All for a single block.
pub fn profile_reduction(spec: &ModelSpec, input_shape: [usize; 4]) -> Result<Reduction> {
    if spec.blocks.len() != 1 || spec.blocks[0].kind == BlockKind::Head {
        return Err(Error::spec("reduction is defined for a single IRB or conv block"));
    }
    let full = profile_model(spec, &TrainPolicy::ft_all(), input_shape)?
        .totals
        .saved_act_bytes;
    let mtl = profile_model(spec, &TrainPolicy::mobiletl(1), input_shape)?
        .totals
        .saved_act_bytes;
    let percent = if full == 0 {
        0.0
    } else {
        100.0 * (1.0 - mtl as f64 / full as f64)
    };
    Ok(Reduction {
        ft_all_bytes: full,
        mobiletl_bytes: mtl,
        percent,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StrategyRow {
    pub policy: String,
    pub saved_act_mb: f64,
    pub memory_mb: f64,
    pub fwd_mflops: f64,
    pub bwd_mflops: f64,
    pub train_mflops: f64,
    pub trainable_params: u64,
}

/// One row per policy, in the order given. `memory_mb` adds parameters and
/// the largest scratch buffer to the stored activations.
pub fn compare_strategies(
    spec: &ModelSpec,
    policies: &[TrainPolicy],
    input_shape: [usize; 4],
) -> Result<Vec<StrategyRow>> {
    if policies.is_empty() {
        return Err(Error::Config("compare needs at least one policy".into()));
    }
    policies
        .iter()
        .map(|p| {
            let r = profile_model(spec, p, input_shape)?;
            let t = &r.totals;
            let max_temp = r.rows.iter().map(|r| r.temp_bytes).max().unwrap_or(0);
            Ok(StrategyRow {
                policy: r.policy.clone(),
                saved_act_mb: t.saved_act_bytes as f64 / 1e6,
                memory_mb: (t.saved_act_bytes + t.param_bytes + max_temp) as f64 / 1e6,
                fwd_mflops: t.fwd_flops as f64 / 1e6,
                bwd_mflops: t.bwd_flops as f64 / 1e6,
                train_mflops: t.train_flops() as f64 / 1e6,
                trainable_params: t.trainable_params,
            })
        })
        .collect()
}

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
enum Store {
    Full,
    Mask1,
    Mask2,
    Small,
    Stats,
}

#[derive(Debug, Clone)]
struct Sym {
    id: u64,
    shape: Vec<usize>,
    rg: bool,
}

impl Sym {
    fn numel(&self) -> u64 {
        self.shape.iter().product::<usize>() as u64
    }
}

struct Walker<'a> {
    plan: &'a PolicyPlan,
    elem: u64,
    phase: Phase,
    next: u64,
    saved: HashSet<(u64, Store)>,
    rows: Vec<LayerProfile>,
}

impl Walker<'_> {
    fn fresh(&mut self, shape: Vec<usize>, rg: bool) -> Sym {
        self.next += 1;
        Sym {
            id: self.next,
            shape,
            rg,
        }
    }

    fn trainable(&self, id: &ParamId) -> bool {
        self.plan.trainable.contains(id)
    }

    fn weight_bytes(&self, id: &ParamId, numel: u64) -> u64 {
        if self.plan.quantize.contains(id) {
            numel + 4
        } else {
            numel * self.elem
        }
    }

    fn save(&mut self, row: &mut LayerProfile, id: u64, store: Store, elements: u64) {
        if self.saved.insert((id, store)) {
            let bits = match store {
                Store::Mask1 => 1,
                Store::Mask2 => 2,
                Store::Full | Store::Small | Store::Stats => self.elem * 8,
            };
            row.saved_act_bytes += (elements * bits).div_ceil(8);
        }
    }

    fn block(&mut self, b: &Block, x: &Sym) -> Result<Sym> {
        match b {
            Block::Conv(st) => self.stage(&st.conv, &st.bn, st.act.as_ref(), x),
            Block::Irb(irb) => {
                let mut h = match &irb.expand {
                    Some(e) => self.stage(&e.conv, &e.bn, e.act.as_ref(), x)?,
                    None => x.clone(),
                };
                let dw = &irb.depthwise;
                h = self.stage(&dw.conv, &dw.bn, dw.act.as_ref(), &h)?;
                if let Some(se) = &irb.se {
                    h = self.se(se, &h);
                }
                h = self.conv(&irb.project, &h)?;
                h = self.bn(&irb.project_bn, &h);
                Ok(match &irb.residual {
                    Some(add) => self.add(&add.id, &h, x),
                    None => h,
                })
            }
            Block::Head(hd) => {
                let mut h = match &hd.fusion {
                    Some(f) => self.stage(&f.conv, &f.bn, f.act.as_ref(), x)?,
                    None => x.clone(),
                };
                h = self.pool(&hd.pool.id, &h);
                if let Some((lin, act)) = &hd.hidden {
                    h = self.linear(lin, &h);
                    h = self.act(act, &h);
                }
                Ok(self.linear(&hd.classifier, &h))
            }
        }
    }

    fn stage(&mut self, conv: &Conv2d, bn: &BatchNorm, act: Option<&Activation>, x: &Sym) -> Result<Sym> {
        let h = self.conv(conv, x)?;
        let h = self.bn(bn, &h);
        Ok(match act {
            Some(a) => self.act(a, &h),
            None => h,
        })
    }

    fn conv(&mut self, c: &Conv2d, x: &Sym) -> Result<Sym> {
        let g = &c.geom;
        let (b, h, w) = (x.shape[0], x.shape[2], x.shape[3]);
        let extent = |n: usize| -> Result<usize> {
            let padded = n + 2 * g.padding;
            if padded < g.kernel {
                return Err(Error::shape(format!("{}: input {n} smaller than kernel", c.id)));
            }
            Ok((padded - g.kernel) / g.stride + 1)
        };
        let (ho, wo) = (extent(h)?, extent(w)?);
        let k2 = (g.kernel * g.kernel) as u64;
        let cin_g = (g.cin / g.groups) as u64;
        let mut row = LayerProfile::new(&c.id, "conv2d");
        row.fwd_flops = 2 * k2 * cin_g * g.cout as u64 * (ho * wo * b) as u64;
        let weight_numel = g.cout as u64 * cin_g * k2;
        row.param_bytes = self.weight_bytes(&c.weight, weight_numel);
        let depthwise = g.groups > 1 && g.groups == g.cin && g.cin == g.cout;
        let pointwise = g.kernel == 1 && g.stride == 1 && g.padding == 0;
        if !depthwise && !pointwise {
            row.temp_bytes = cin_g * k2 * (ho * wo) as u64 * self.elem;
        }
        let w_tr = self.trainable(&c.weight);
        let recorded = x.rg || w_tr;
        if recorded {
            row.bwd_flops = row.fwd_flops * (u64::from(w_tr) + u64::from(x.rg));
            if w_tr {
                self.save(&mut row, x.id, Store::Full, x.numel());
            }
        }
        self.rows.push(row);
        Ok(self.fresh(vec![b, g.cout, ho, wo], recorded))
    }

    fn bn(&mut self, bn: &BatchNorm, x: &Sym) -> Sym {
        let e = x.numel();
        let c = bn.channels as u64;
        let mode = self.plan.bn_modes.get(&bn.id).copied().unwrap_or(BnMode::Frozen);
        let gamma_tr = mode == BnMode::Full && self.trainable(&bn.gamma);
        let beta_tr = mode != BnMode::Frozen && self.trainable(&bn.beta);
        let track = x.rg || gamma_tr || beta_tr;
        let batch_stats = mode == BnMode::Full && self.phase != Phase::Eval;
        let mut row = LayerProfile::new(&bn.id, "batch_norm");
        row.fwd_flops = if batch_stats { 4 * e } else { 2 * e };
        row.param_bytes = 4 * c * self.elem;
        if track {
            let input = if x.rg { e } else { 0 };
            row.bwd_flops = match mode {
                BnMode::Full => u64::from(gamma_tr || beta_tr) * 3 * e + 5 * input,
                BnMode::ShiftOnly => u64::from(beta_tr) * e + input,
                BnMode::Frozen => input,
            };
            if batch_stats {
                let xhat = self.fresh(x.shape.clone(), false);
                self.save(&mut row, xhat.id, Store::Full, e);
                let stats = self.fresh(vec![bn.channels], false);
                self.save(&mut row, stats.id, Store::Stats, c);
            } else if gamma_tr {
                let xhat = self.fresh(x.shape.clone(), false);
                self.save(&mut row, xhat.id, Store::Full, e);
            }
        }
        self.rows.push(row);
        self.fresh(x.shape.clone(), track)
    }

    fn act(&mut self, a: &Activation, x: &Sym) -> Sym {
        let e = x.numel();
        let mode = match a.kind {
            ActKind::HardSigmoid => ActBackwardMode::Exact,
            _ => self.plan.act_modes.get(&a.id).copied().unwrap_or_default(),
        };
        let exact = mode == ActBackwardMode::Exact;
        let mut row = LayerProfile::new(&a.id, a.kind.name());
        let (fwd, bwd, store) = match a.kind {
            ActKind::Relu6 => (1, 1, if exact { Store::Mask2 } else { Store::Mask1 }),
            ActKind::HardSwish if exact => (3, 4, Store::Full),
            ActKind::HardSwish => (3, 1, Store::Mask1),
            ActKind::HardSigmoid => (2, 1, Store::Mask2),
        };
        row.fwd_flops = fwd * e;
        if x.rg {
            row.bwd_flops = bwd * e;
            self.save(&mut row, x.id, store, e);
        }
        self.rows.push(row);
        self.fresh(x.shape.clone(), x.rg)
    }

    fn se(&mut self, se: &SqueezeExcite, x: &Sym) -> Sym {
        let e = x.numel();
        let b = x.shape[0] as u64;
        let (c, s) = (se.channels as u64, se.squeeze as u64);
        let mut row = LayerProfile::new(&se.id, "squeeze_excite");
        let fc1 = 2 * c * s * b + s * b;
        let fc2 = 2 * s * c * b + c * b;
        row.fwd_flops = e + fc1 + s * b + fc2 + 2 * c * b + e;
        row.param_bytes = [
            (&se.fc1.weight, c * s),
            (&se.fc1.bias, s),
            (&se.fc2.weight, s * c),
            (&se.fc2.bias, c),
        ]
        .into_iter()
        .map(|(id, n)| self.weight_bytes(id, n))
        .sum();
        let w1 = self.trainable(&se.fc1.weight);
        let b1 = self.trainable(&se.fc1.bias);
        let w2 = self.trainable(&se.fc2.weight);
        let b2 = self.trainable(&se.fc2.bias);
        let recorded = x.rg || w1 || b1 || w2 || b2;
        if recorded {
            let fc1_path = w1 || b1 || x.rg;
            let mut bwd = 2 * e + c * b;
            if x.rg {
                bwd += e + e + 2 * c * s * b;
            }
            if w2 {
                bwd += 2 * s * c * b;
            }
            if b2 {
                bwd += c * b;
            }
            if fc1_path {
                bwd += 2 * s * c * b + s * b;
            }
            if w1 {
                bwd += 2 * c * s * b;
            }
            if b1 {
                bwd += s * b;
            }
            row.bwd_flops = bwd;
            self.save(&mut row, x.id, Store::Full, e);
            let z = self.fresh(vec![b as usize, c as usize], false);
            self.save(&mut row, z.id, Store::Small, b * c);
            if fc1_path {
                let m = self.fresh(vec![b as usize, s as usize], false);
                self.save(&mut row, m.id, Store::Small, b * s);
            }
            if w1 {
                let p = self.fresh(vec![b as usize, c as usize], false);
                self.save(&mut row, p.id, Store::Small, b * c);
            }
            if w2 {
                let r = self.fresh(vec![b as usize, s as usize], false);
                self.save(&mut row, r.id, Store::Small, b * s);
            }
        }
        self.rows.push(row);
        self.fresh(x.shape.clone(), recorded)
    }

    fn add(&mut self, id: &str, a: &Sym, b: &Sym) -> Sym {
        let mut row = LayerProfile::new(id, "add");
        row.fwd_flops = a.numel();
        self.rows.push(row);
        self.fresh(a.shape.clone(), a.rg || b.rg)
    }

    fn pool(&mut self, id: &str, x: &Sym) -> Sym {
        let e = x.numel();
        let mut row = LayerProfile::new(id, "global_avg_pool");
        row.fwd_flops = e;
        if x.rg {
            row.bwd_flops = e;
        }
        self.rows.push(row);
        self.fresh(vec![x.shape[0], x.shape[1]], x.rg)
    }

    fn linear(&mut self, l: &Linear, x: &Sym) -> Sym {
        let b = x.shape[0] as u64;
        let (i, o) = (l.inp as u64, l.out as u64);
        let mut row = LayerProfile::new(&l.id, "linear");
        row.fwd_flops = 2 * i * o * b + o * b;
        row.param_bytes = self.weight_bytes(&l.weight, i * o) + self.weight_bytes(&l.bias, o);
        let w_tr = self.trainable(&l.weight);
        let b_tr = self.trainable(&l.bias);
        let recorded = x.rg || w_tr || b_tr;
        if recorded {
            row.bwd_flops = u64::from(w_tr) * 2 * i * o * b + u64::from(b_tr) * o * b + u64::from(x.rg) * 2 * i * o * b;
            if w_tr {
                self.save(&mut row, x.id, Store::Full, x.numel());
            }
        }
        self.rows.push(row);
        self.fresh(vec![x.shape[0], l.out], recorded)
    }

    fn loss(&mut self, logits: &Sym) {
        let (b, k) = (logits.shape[0] as u64, logits.shape[1] as u64);
        let mut row = LayerProfile::new(crate::layers::LOSS_LAYER, "softmax_cross_entropy");
        row.fwd_flops = 3 * b * k + b;
        if logits.rg {
            row.bwd_flops = b * k;
            let probs = self.fresh(logits.shape.clone(), false);
            self.save(&mut row, probs.id, Store::Full, b * k);
        }
        self.rows.push(row);
    }
}
