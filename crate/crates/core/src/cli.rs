//! The `mobiletl` command line.
//!
//! Exit codes: 0 on success, 1 on usage or validation errors, 2 when a check
//! (audit, gradient check, bound verification) fails.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::Value;

use crate::error::{Error, Result};
use crate::fsio::write_atomic;
use crate::gradcheck::{run_gradcheck, GradcheckReport};
use crate::layers::ActBackwardMode;
use crate::model::{build_model, bundled_spec, ModelSpec};
use crate::policy::{apply_policy, TrainPolicy};
use crate::profiler::{
    compare_strategies, comparison_csv, comparison_json, comparison_table, profile_model, report_csv, report_json,
    report_table, round_sig6, stable_json, AuditReport, Format,
};
use crate::theory::{proposition_check, twin_divergence, DivergenceReport, PropositionReport, TwinOptions};
use crate::trainer::{
    load_dataset, synthetic, train, DataSpec, Dataset, OptimizerCfg, SyntheticSpec, TrainConfig, TrainReport,
};

const GRADCHECK_INSTANCES: usize = 20;
const DEFAULT_SAMPLES: usize = 256;

#[derive(Debug, Parser)]
#[command(
    name = "mobiletl",
    version,
    about = "Memory and FLOP profiling, fine-tuning and checks for MobileTL-style training"
)]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Debug, Subcommand)]
enum Verb {
    /// Per-layer FLOPs and memory for one policy.
    Profile(Flags),
    /// Totals for several policies side by side.
    Compare(Flags),
    /// Fine-tune on a dataset file or synthetic blobs.
    Train(Flags),
    /// Finite-difference gradient check of every layer.
    Gradcheck(Flags),
    /// Compare predicted and observed saved bytes per layer.
    Audit(Flags),
    /// Train exact and approximate twins and check the divergence bound.
    VerifyBound(Flags),
}

#[derive(Debug, Args)]
struct Flags {
    /// Model spec file or bundled spec name.
    #[arg(long)]
    spec: Option<String>,
    /// Policy file or shorthand (ft_all, ft_bn, ft_bias, ft_last, ft_kblks:K, mobiletl:K).
    #[arg(long)]
    policy: Vec<String>,
    /// Dataset file in TLDS format.
    #[arg(long, conflicts_with = "synthetic")]
    dataset: Option<PathBuf>,
    /// Synthetic blobs as `samples,classes,seed`.
    #[arg(long)]
    synthetic: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// csv, json or table.
    #[arg(long, default_value = "table")]
    format: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

/// Result of a verb that ran to completion.
enum Outcome {
    Pass,
    CheckFailed(String),
}

struct Io<'a> {
    stdout: &'a mut dyn Write,
    stderr: &'a mut dyn Write,
}

impl Io<'_> {
    /// Writes `text` to `--out` atomically, or to stdout.
    fn emit(&mut self, out: Option<&Path>, text: &str) -> Result<()> {
        match out {
            Some(path) => {
                write_atomic(path, text.as_bytes())?;
                let _ = writeln!(self.stderr, "wrote {}", path.display());
                Ok(())
            }
            None => self
                .stdout
                .write_all(text.as_bytes())
                .map_err(|e| Error::io("<stdout>", e)),
        }
    }
}

/// Parses `argv` (program name first) and runs the verb with the process's
/// stdout and stderr.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run_with(argv, &mut stdout.lock(), &mut stderr.lock())
}

/// As [`run`], writing to the given streams.
pub fn run_with<I, S>(argv: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = stdout.write_all(text.as_bytes());
                    0
                }
                _ => {
                    let _ = stderr.write_all(text.as_bytes());
                    1
                }
            };
        }
    };
    let mut io = Io { stdout, stderr };
    let result = match &cli.verb {
        Verb::Profile(f) => profile(f, &mut io),
        Verb::Compare(f) => compare(f, &mut io),
        Verb::Train(f) => train_verb(f, &mut io),
        Verb::Gradcheck(f) => gradcheck(f, &mut io),
        Verb::Audit(f) => audit(f, &mut io),
        Verb::VerifyBound(f) => verify_bound(f, &mut io),
    };
    match result {
        Ok(Outcome::Pass) => 0,
        Ok(Outcome::CheckFailed(msg)) => {
            let _ = writeln!(io.stderr, "check failed: {msg}");
            2
        }
        Err(e) => {
            let _ = writeln!(io.stderr, "error: {e}");
            match e {
                Error::Audit(_) => 2,
                _ => 1,
            }
        }
    }
}

fn load_spec(arg: &str) -> Result<ModelSpec> {
    let path = Path::new(arg);
    if path.is_file() {
        ModelSpec::from_file(path)
    } else {
        bundled_spec(arg).map_err(|_| Error::Spec(format!("spec {arg:?} is neither a file nor a bundled spec")))
    }
}

fn require_spec(f: &Flags) -> Result<ModelSpec> {
    match &f.spec {
        Some(s) => load_spec(s),
        None => Err(Error::Config("--spec is required".into())),
    }
}

/// Reads a policy from a file, or parses shorthand. `ft_kblks` and
/// `mobiletl` without a block count cover the whole body.
fn load_policy(arg: &str, spec: &ModelSpec) -> Result<TrainPolicy> {
    let path = Path::new(arg);
    if path.is_file() {
        return TrainPolicy::from_file(path);
    }
    let name = arg.strip_suffix(".json").unwrap_or(arg);
    match name {
        "ft_kblks" => Ok(TrainPolicy::ft_kblks(spec.body_len())),
        "mobiletl" | "mobiletl_kblks" => Ok(TrainPolicy::mobiletl(spec.body_len())),
        _ => TrainPolicy::from_shorthand(name),
    }
}

fn single_policy(f: &Flags, spec: &ModelSpec, default: TrainPolicy) -> Result<TrainPolicy> {
    match f.policy.as_slice() {
        [] => Ok(default),
        [one] => load_policy(one, spec),
        _ => Err(Error::Config("this verb takes a single --policy".into())),
    }
}

fn format_of(f: &Flags) -> Result<Format> {
    f.format.parse()
}

fn profile(f: &Flags, io: &mut Io<'_>) -> Result<Outcome> {
    let format = format_of(f)?;
    let spec = require_spec(f)?;
    let policy = single_policy(f, &spec, TrainPolicy::ft_all())?;
    let report = profile_model(&spec, &policy, spec.input_shape)?;
    let text = match format {
        Format::Csv => report_csv(&report),
        Format::Json => report_json(&report)?,
        Format::Table => report_table(&report),
    };
    io.emit(f.out.as_deref(), &text)?;
    Ok(Outcome::Pass)
}

fn compare(f: &Flags, io: &mut Io<'_>) -> Result<Outcome> {
    let format = format_of(f)?;
    let spec = require_spec(f)?;
    let policies = if f.policy.is_empty() {
        vec![
            TrainPolicy::ft_all(),
            TrainPolicy::ft_bn(),
            TrainPolicy::ft_bias(),
            TrainPolicy::ft_last(),
            TrainPolicy::mobiletl(spec.body_len()),
        ]
    } else {
        f.policy.iter().map(|p| load_policy(p, &spec)).collect::<Result<_>>()?
    };
    let rows = compare_strategies(&spec, &policies, spec.input_shape)?;
    let text = match format {
        Format::Csv => comparison_csv(&rows),
        Format::Json => comparison_json(&rows)?,
        Format::Table => comparison_table(&rows),
    };
    io.emit(f.out.as_deref(), &text)?;
    Ok(Outcome::Pass)
}

fn dataset_for(f: &Flags, spec: &ModelSpec, default_samples: usize) -> Result<Dataset> {
    let [_, c, h, w] = spec.input_shape;
    match (&f.dataset, &f.synthetic) {
        (Some(path), _) => load_dataset(&DataSpec::File(path.clone())),
        (None, Some(s)) => synthetic(&SyntheticSpec::parse(s)?.with_shape([c, h, w])),
        (None, None) => synthetic(&SyntheticSpec::new(default_samples, spec.num_classes, f.seed).with_shape([c, h, w])),
    }
}

/// Training report without the wall-clock time, so output files depend
/// only on the flags.
fn train_json(r: &TrainReport) -> Result<String> {
    let mut v = serde_json::to_value(r)?;
    if let Value::Object(o) = &mut v {
        o.remove("wall_time_s");
    }
    stable_json(&v)
}

fn train_csv(r: &TrainReport) -> String {
    let mut s = String::from("epoch,mean_loss,accuracy\n");
    for e in &r.epochs {
        let _ = writeln!(s, "{},{},{}", e.epoch, round_sig6(e.mean_loss), round_sig6(e.accuracy));
    }
    s
}

fn train_table(r: &TrainReport) -> String {
    let mut s = format!(
        "policy {}  steps {}  peak tape {} B\n",
        r.policy, r.steps, r.peak_tape_bytes
    );
    let _ = writeln!(s, "{:>6}  {:>10}  {:>8}", "epoch", "mean_loss", "accuracy");
    for e in &r.epochs {
        let _ = writeln!(s, "{:>6}  {:>10.6}  {:>8.4}", e.epoch, e.mean_loss, e.accuracy);
    }
    let _ = writeln!(s, "final accuracy {:.4}", r.final_accuracy);
    s
}

fn train_verb(f: &Flags, io: &mut Io<'_>) -> Result<Outcome> {
    let format = format_of(f)?;
    let spec = require_spec(f)?;
    let policy = single_policy(f, &spec, TrainPolicy::ft_all())?;
    let data = dataset_for(f, &spec, DEFAULT_SAMPLES)?;
    let mut cfg = TrainConfig {
        optimizer: OptimizerCfg::adam(f.lr.unwrap_or(1e-3)),
        ..TrainConfig::default()
    };
    if let Some(e) = f.epochs {
        cfg.epochs = e;
    }
    cfg.max_steps = f.steps;
    let mut pm = apply_policy(build_model::<f32>(&spec, f.seed)?, &policy)?;
    let report = train(&mut pm, &data, &cfg, f.seed)?;
    let _ = writeln!(
        io.stderr,
        "trained {} steps in {:.2} s",
        report.steps, report.wall_time_s
    );
    let text = match format {
        Format::Csv => train_csv(&report),
        Format::Json => train_json(&report)?,
        Format::Table => train_table(&report),
    };
    io.emit(f.out.as_deref(), &text)?;
    Ok(Outcome::Pass)
}

fn gradcheck_table(r: &GradcheckReport) -> String {
    let mut s = format!(
        "{:<24}  {:>9}  {:>13}  {}\n",
        "layer", "instances", "max_rel_error", "passed"
    );
    for l in &r.layers {
        let _ = writeln!(
            s,
            "{:<24}  {:>9}  {:>13.3e}  {}",
            l.layer, l.instances, l.max_rel_error, l.passed
        );
    }
    s
}

fn gradcheck_csv(r: &GradcheckReport) -> String {
    let mut s = String::from("layer,instances,max_rel_error,passed\n");
    for l in &r.layers {
        let _ = writeln!(
            s,
            "{},{},{:e},{}",
            l.layer,
            l.instances,
            round_sig6(l.max_rel_error),
            l.passed
        );
    }
    s
}

fn gradcheck(f: &Flags, io: &mut Io<'_>) -> Result<Outcome> {
    let format = format_of(f)?;
    let report = run_gradcheck(f.seed, GRADCHECK_INSTANCES)?;
    let text = match format {
        Format::Csv => gradcheck_csv(&report),
        Format::Json => stable_json(&report)?,
        Format::Table => gradcheck_table(&report),
    };
    io.emit(f.out.as_deref(), &text)?;
    if report.passed {
        Ok(Outcome::Pass)
    } else {
        let failed: Vec<&str> = report.layers.iter().filter(|l| !l.passed).map(|l| l.layer).collect();
        Ok(Outcome::CheckFailed(format!(
            "gradient check failed for {}",
            failed.join(", ")
        )))
    }
}

fn audit_text(reports: &[AuditReport], format: Format) -> Result<String> {
    Ok(match format {
        Format::Json => stable_json(&reports)?,
        Format::Csv | Format::Table => {
            let mut s = String::new();
            if format == Format::Csv {
                s.push_str("policy,layer_id,predicted,observed,match\n");
            } else {
                let _ = writeln!(
                    s,
                    "{:<16}  {:<14}  {:>12}  {:>12}  match",
                    "policy", "layer_id", "predicted", "observed"
                );
            }
            for r in reports {
                for row in &r.rows {
                    let ok = row.predicted == row.observed;
                    if format == Format::Csv {
                        let _ = writeln!(
                            s,
                            "{},{},{},{},{}",
                            r.policy, row.layer_id, row.predicted, row.observed, ok
                        );
                    } else {
                        let _ = writeln!(
                            s,
                            "{:<16}  {:<14}  {:>12}  {:>12}  {}",
                            r.policy, row.layer_id, row.predicted, row.observed, ok
                        );
                    }
                }
            }
            s
        }
    })
}

fn audit(f: &Flags, io: &mut Io<'_>) -> Result<Outcome> {
    let format = format_of(f)?;
    let spec = require_spec(f)?;
    let policies: Vec<TrainPolicy> = if f.policy.is_empty() {
        vec![TrainPolicy::ft_all()]
    } else {
        f.policy.iter().map(|p| load_policy(p, &spec)).collect::<Result<_>>()?
    };
    let reports = policies
        .iter()
        .map(|p| crate::profiler::observe(&spec, p, spec.input_shape, f.seed))
        .collect::<Result<Vec<_>>>()?;
    io.emit(f.out.as_deref(), &audit_text(&reports, format)?)?;
    let bad: Vec<String> = reports
        .iter()
        .flat_map(|r| r.mismatches().map(move |m| format!("{} {}", r.policy, m.layer_id)))
        .collect();
    if bad.is_empty() {
        Ok(Outcome::Pass)
    } else {
        Ok(Outcome::CheckFailed(format!("byte mismatch at {}", bad.join(", "))))
    }
}

#[derive(Serialize)]
struct BoundReport {
    #[serde(flatten)]
    divergence: DivergenceReport,
    proposition: PropositionReport,
}

fn verify_bound(f: &Flags, io: &mut Io<'_>) -> Result<Outcome> {
    let format = format_of(f)?;
    if format == Format::Csv {
        return Err(Error::Config("verify-bound emits json or table".into()));
    }
    let spec = match &f.spec {
        Some(s) => load_spec(s)?,
        None => bundled_spec("toy_2block")?,
    };
    let base = single_policy(f, &spec, TrainPolicy::mobiletl(spec.body_len()))?;
    let exact = base.clone().with_act_backward(ActBackwardMode::Exact);
    let approx = base.with_act_backward(ActBackwardMode::ApproxSigned);
    let data = dataset_for(f, &spec, 64)?;
    let mut opts = TwinOptions::new(f.steps.unwrap_or(50), f.seed);
    if let Some(lr) = f.lr {
        opts.lr = lr;
    }
    let divergence = twin_divergence(&spec, (&exact, &approx), &data, opts)?;
    let proposition = proposition_check(4, 4, 4, 0.5, f.seed, 1000)?;
    let pass = divergence.pass && proposition.passed;
    let report = BoundReport {
        divergence,
        proposition,
    };
    let text = match format {
        Format::Table => {
            let d = &report.divergence;
            format!(
                "steps {}\nfinal_output_distance {:.6e}\nbound {:.6e}\nmeasured_G {:.6}\nestimated_M {:.6}\nN {}\nL {}\nproposition max ratio {:.6} / {:.6}\npass {}\n",
                d.steps,
                d.final_output_distance,
                d.bound,
                d.measured_g,
                d.estimated_m,
                d.n,
                d.l,
                report.proposition.exact_max_ratio,
                report.proposition.approx_max_ratio,
                pass
            )
        }
        _ => stable_json(&report)?,
    };
    io.emit(f.out.as_deref(), &text)?;
    if pass {
        Ok(Outcome::Pass)
    } else {
        Ok(Outcome::CheckFailed("divergence exceeded the bound".into()))
    }
}
