use std::process::{Command, Output};

fn mobiletl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mobiletl"))
        .args(args)
        .env("MOBILETL_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn field(csv_row: &str, i: usize) -> f64 {
    csv_row.split(',').nth(i).unwrap().parse().unwrap()
}

#[test]
fn profile_csv_totals_match_published_block_costs() {
    let o = mobiletl(&[
        "profile",
        "--spec",
        "irb_v2_96.json",
        "--policy",
        "ft_all.json",
        "--format",
        "csv",
    ]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    let total = text.lines().find(|l| l.starts_with("TOTAL,")).unwrap();
    let flops = field(total, 2) + field(total, 3);
    let mb = field(total, 5) / 1e6;
    assert!((flops / 51.56e6 - 1.0).abs() <= 0.05, "{flops}");
    assert!((mb / 0.913 - 1.0).abs() <= 0.10, "{mb}");
}

#[test]
fn missing_spec_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("report.csv");
    let o = mobiletl(&["profile", "--spec", "no/such/spec.json", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!out.exists());
    assert!(!String::from_utf8_lossy(&o.stderr).is_empty());

    let o = mobiletl(&["profile", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!out.exists());
}

#[test]
fn unknown_flag_prints_usage() {
    let o = mobiletl(&["compare", "--frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}

#[test]
fn reports_are_bit_stable() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    for p in [&a, &b] {
        let o = mobiletl(&[
            "profile",
            "--spec",
            "toy_4block",
            "--policy",
            "mobiletl:2",
            "--format",
            "json",
            "--out",
            p.to_str().unwrap(),
        ]);
        assert_eq!(o.status.code(), Some(0));
        assert!(o.stdout.is_empty());
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&a).unwrap()).unwrap();
    assert_eq!(v["policy"], "MobileTL_2BLKs");
}

#[test]
fn table_and_csv_carry_the_same_numbers() {
    let csv = stdout(&mobiletl(&["compare", "--spec", "toy_4block", "--format", "csv"]));
    let table = stdout(&mobiletl(&["compare", "--spec", "toy_4block", "--format", "table"]));
    for row in csv.lines().skip(1) {
        let cells: Vec<&str> = row.split(',').collect();
        let line = table.lines().find(|l| l.starts_with(cells[0])).unwrap();
        let words: Vec<&str> = line.split_whitespace().collect();
        assert_eq!(words, cells, "{line}");
    }
}

#[test]
fn audit_passes_for_several_policies() {
    let o = mobiletl(&[
        "audit",
        "--spec",
        "toy_4block",
        "--policy",
        "ft_all",
        "--policy",
        "ft_bias",
        "--policy",
        "mobiletl:2",
        "--format",
        "csv",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.lines().skip(1).all(|l| l.ends_with(",true")));
}

#[test]
fn gradcheck_suite_passes() {
    let o = mobiletl(&["gradcheck", "--seed", "1", "--format", "json"]);
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["passed"], true);
    assert_eq!(v["layers"].as_array().unwrap().len(), 11);
}

#[test]
fn train_on_synthetic_blobs_and_from_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("train.json");
    let o = mobiletl(&[
        "train",
        "--spec",
        "toy_4block",
        "--policy",
        "mobiletl:2",
        "--synthetic",
        "80,2,3",
        "--steps",
        "16",
        "--lr",
        "0.01",
        "--format",
        "json",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&out).unwrap()).unwrap();
    assert_eq!(v["steps"], 16);
    assert!(v.get("wall_time_s").is_none());

    let data = mobiletl::trainer::synthetic(&mobiletl::trainer::SyntheticSpec::new(80, 2, 3)).unwrap();
    let file = dir.path().join("blobs.tlds");
    mobiletl::trainer::write_tlds(&file, &data).unwrap();
    let out2 = dir.path().join("train2.json");
    let o = mobiletl(&[
        "train",
        "--spec",
        "toy_4block",
        "--policy",
        "mobiletl:2",
        "--dataset",
        file.to_str().unwrap(),
        "--steps",
        "16",
        "--lr",
        "0.01",
        "--format",
        "json",
        "--out",
        out2.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(std::fs::read(&out).unwrap(), std::fs::read(&out2).unwrap());
}

#[test]
fn train_rejects_mismatched_classes() {
    let o = mobiletl(&["train", "--spec", "toy_4block", "--synthetic", "80,3,1", "--steps", "2"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn verify_bound_reports_required_fields() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bound.json");
    let o = mobiletl(&[
        "verify-bound",
        "--steps",
        "10",
        "--seed",
        "4",
        "--format",
        "json",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&out).unwrap()).unwrap();
    for key in [
        "per_step_distance",
        "final_output_distance",
        "measured_G",
        "estimated_M",
        "bound",
        "pass",
    ] {
        assert!(v.get(key).is_some(), "{key}");
    }
    assert_eq!(v["per_step_distance"].as_array().unwrap().len(), 10);
}

#[test]
fn policy_file_is_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("policy.json");
    std::fs::write(
        &p,
        r#"{"preset": "mobiletl_kblks", "k_blocks": 2, "quantize_frozen": true}"#,
    )
    .unwrap();
    let param_bytes = |policy: &str| {
        let o = mobiletl(&["profile", "--spec", "toy_4block", "--policy", policy, "--format", "csv"]);
        assert_eq!(o.status.code(), Some(0));
        field(stdout(&o).lines().last().unwrap(), 4)
    };
    assert!(param_bytes(p.to_str().unwrap()) < param_bytes("mobiletl:2"));
}
