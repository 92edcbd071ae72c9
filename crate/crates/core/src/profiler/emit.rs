use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;
use serde_json::{json, Map, Value};

use super::{ProfileReport, StrategyRow, FLOP_COEFFICIENTS};
use crate::error::{Error, Result};
use crate::fsio::write_atomic;

pub const CSV_HEADER: &str = "layer_id,kind,fwd_flops,bwd_flops,param_bytes,saved_act_bytes,temp_bytes";

const COMPARISON_HEADER: &str = "policy,saved_act_mb,memory_mb,fwd_mflops,bwd_mflops,train_mflops,trainable_params";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Format {
    Csv,
    Json,
    #[default]
    Table,
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            "table" => Ok(Format::Table),
            _ => Err(Error::Config(format!("unknown format {s:?} (csv, json, table)"))),
        }
    }
}

/// Rounds to 6 significant digits.
pub fn round_sig6(v: f64) -> f64 {
    if v == 0.0 || !v.is_finite() {
        return v;
    }
    format!("{v:.5e}").parse().unwrap_or(v)
}

fn round_floats(v: Value) -> Value {
    match v {
        Value::Number(n) if n.is_f64() => n
            .as_f64()
            .map(round_sig6)
            .and_then(serde_json::Number::from_f64)
            .map_or(Value::Null, Value::Number),
        Value::Array(a) => Value::Array(a.into_iter().map(round_floats).collect()),
        Value::Object(o) => Value::Object(o.into_iter().map(|(k, v)| (k, round_floats(v))).collect::<Map<_, _>>()),
        other => other,
    }
}

/// Pretty JSON with sorted keys and floats at 6 significant digits.
pub fn stable_json<S: Serialize>(value: &S) -> Result<String> {
    let v = round_floats(serde_json::to_value(value)?);
    let mut s = serde_json::to_string_pretty(&v)?;
    s.push('\n');
    Ok(s)
}

fn mb(bytes: u64) -> f64 {
    bytes as f64 / 1e6
}

pub fn report_csv(r: &ProfileReport) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for row in &r.rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            row.layer_id, row.kind, row.fwd_flops, row.bwd_flops, row.param_bytes, row.saved_act_bytes, row.temp_bytes
        );
    }
    if !r.rows.is_empty() {
        let t = &r.totals;
        let _ = writeln!(
            out,
            "TOTAL,,{},{},{},{},{}",
            t.fwd_flops, t.bwd_flops, t.param_bytes, t.saved_act_bytes, t.temp_bytes
        );
    }
    out
}

pub fn report_json(r: &ProfileReport) -> Result<String> {
    let coefficients: Map<String, Value> = FLOP_COEFFICIENTS
        .iter()
        .map(|(k, v)| (k.to_string(), json!(v)))
        .collect();
    let mut totals = serde_json::to_value(&r.totals)?;
    if let Value::Object(o) = &mut totals {
        o.insert("saved_act_mb".into(), json!(mb(r.totals.saved_act_bytes)));
        o.insert("train_flops".into(), json!(r.totals.train_flops()));
    }
    stable_json(&json!({
        "policy": r.policy,
        "input_shape": r.input_shape,
        "dtype": r.dtype,
        "flop_coefficients": coefficients,
        "rows": r.rows,
        "totals": totals,
    }))
}

fn aligned(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let mut out = String::new();
    let mut line = |cells: &mut dyn Iterator<Item = &str>| {
        let parts: Vec<String> = cells
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, &w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect();
        out.push_str(parts.join("  ").trim_end());
        out.push('\n');
    };
    line(&mut header.iter().copied());
    for row in rows {
        line(&mut row.iter().map(String::as_str));
    }
    out
}

pub fn report_table(r: &ProfileReport) -> String {
    let header: Vec<&str> = CSV_HEADER.split(',').collect();
    let mut rows: Vec<Vec<String>> = r
        .rows
        .iter()
        .map(|row| {
            vec![
                row.layer_id.clone(),
                row.kind.clone(),
                row.fwd_flops.to_string(),
                row.bwd_flops.to_string(),
                row.param_bytes.to_string(),
                row.saved_act_bytes.to_string(),
                row.temp_bytes.to_string(),
            ]
        })
        .collect();
    let t = &r.totals;
    if !r.rows.is_empty() {
        rows.push(vec![
            "TOTAL".into(),
            String::new(),
            t.fwd_flops.to_string(),
            t.bwd_flops.to_string(),
            t.param_bytes.to_string(),
            t.saved_act_bytes.to_string(),
            t.temp_bytes.to_string(),
        ]);
    }
    let mut out = format!(
        "policy {}  input {:?}  dtype {}\nparams {}  trainable {}  fwd {:.2} MFLOPs  bwd {:.2} MFLOPs  stored act {:.3} MB\n",
        r.policy,
        r.input_shape,
        r.dtype,
        t.param_count,
        t.trainable_params,
        t.fwd_flops as f64 / 1e6,
        t.bwd_flops as f64 / 1e6,
        mb(t.saved_act_bytes)
    );
    out.push_str(&aligned(&header, &rows));
    out
}

fn comparison_cells(r: &StrategyRow) -> Vec<String> {
    vec![
        r.policy.clone(),
        format!("{}", round_sig6(r.saved_act_mb)),
        format!("{}", round_sig6(r.memory_mb)),
        format!("{}", round_sig6(r.fwd_mflops)),
        format!("{}", round_sig6(r.bwd_mflops)),
        format!("{}", round_sig6(r.train_mflops)),
        r.trainable_params.to_string(),
    ]
}

pub fn comparison_csv(rows: &[StrategyRow]) -> String {
    let mut out = String::from(COMPARISON_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&comparison_cells(r).join(","));
        out.push('\n');
    }
    out
}

pub fn comparison_json(rows: &[StrategyRow]) -> Result<String> {
    stable_json(&json!({ "strategies": rows }))
}

pub fn comparison_table(rows: &[StrategyRow]) -> String {
    let header: Vec<&str> = COMPARISON_HEADER.split(',').collect();
    let cells: Vec<Vec<String>> = rows.iter().map(comparison_cells).collect();
    aligned(&header, &cells)
}

/// Renders `report` in `format` and writes it atomically to `path`.
pub fn emit_report(report: &ProfileReport, format: Format, path: impl AsRef<Path>) -> Result<()> {
    let text = match format {
        Format::Csv => report_csv(report),
        Format::Json => report_json(report)?,
        Format::Table => report_table(report),
    };
    write_atomic(path, text.as_bytes())
}
