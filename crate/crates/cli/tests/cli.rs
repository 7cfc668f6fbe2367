use std::path::Path;
use std::process::{Command, Output};

use mhgan::gradcheck::registry;
use mhgan::train::TrainConfig;

fn mhgan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mhgan")).args(args).env_remove("MHGAN_OUTPUT_ROOT").output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY: [&str; 7] = ["total_steps=20", "eval_interval=10", "n_eval=256", "hidden_width=16", "feature_dim=16", "batch_size=32", "checkpoint_every=10"];

fn train_into(dir: &Path, extra: &[&str]) -> Output {
    let out = format!("output_dir={}", dir.display());
    let mut args = vec!["train", out.as_str()];
    args.extend(TINY);
    args.extend(extra);
    mhgan(&args)
}

#[test]
fn print_defaults_parses_back() {
    for args in [&["--print-defaults"][..], &["print-defaults"][..]] {
        let o = mhgan(args);
        assert!(o.status.success());
        let cfg: TrainConfig = serde_json::from_slice(&o.stdout).unwrap();
        assert_eq!(cfg, TrainConfig::default());
    }
}

#[test]
fn missing_config_file_is_a_config_error() {
    let o = mhgan(&["train", "--config", "/nonexistent/cfg.json"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/nonexistent/cfg.json"));
}

#[test]
fn invalid_keys_are_named() {
    let o = mhgan(&["train", "no_such_key=1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no_such_key"));
    let o = mhgan(&["train", "loss_variant=MHShared"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("switch_step"));
}

#[test]
fn train_writes_artifacts_deterministically() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [a.path(), b.path()] {
        let o = train_into(d, &["loss_variant=MHGAN"]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let echo: serde_json::Value = serde_json::from_slice(&std::fs::read(a.path().join("config.json")).unwrap()).unwrap();
    assert_eq!(echo["loss_variant"], "MHGAN");
    for f in ["metrics.csv", "final.mhgk", "best.mhgk", "ckpt_00000010.mhgk", "ckpt_00000020.mhgk"] {
        assert!(a.path().join(f).exists(), "{f}");
    }
    let csv = |d: &Path| std::fs::read(d.join("metrics.csv")).unwrap();
    assert_eq!(csv(a.path()), csv(b.path()));
    assert_eq!(String::from_utf8(csv(a.path())).unwrap().lines().count(), 4);
}

#[test]
fn resume_rewrites_the_tail() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    assert!(train_into(a.path(), &[]).status.success());
    std::fs::copy(a.path().join("metrics.csv"), b.path().join("metrics.csv")).unwrap();
    let ck = a.path().join("ckpt_00000010.mhgk");
    let out = format!("output_dir={}", b.path().display());
    let mut args = vec!["train", "--resume", ck.to_str().unwrap(), out.as_str()];
    args.extend(TINY);
    let o = mhgan(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read(a.path().join("metrics.csv")).unwrap(), std::fs::read(b.path().join("metrics.csv")).unwrap());
}

#[test]
fn output_root_env_prefixes_relative_dirs() {
    let root = tempfile::tempdir().unwrap();
    let mut args = vec!["train", "output_dir=nested/run"];
    args.extend(TINY);
    let o = Command::new(env!("CARGO_BIN_EXE_mhgan")).args(&args).env("MHGAN_OUTPUT_ROOT", root.path()).output().unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(root.path().join("nested/run/metrics.csv").exists());
}

#[test]
fn eval_is_repeatable_and_reports_load_errors() {
    let d = tempfile::tempdir().unwrap();
    assert!(train_into(d.path(), &[]).status.success());
    let ck = d.path().join("final.mhgk");
    let ck = ck.to_str().unwrap();
    let first = mhgan(&["eval", "--checkpoint", ck, "--n-samples", "512"]);
    let second = mhgan(&["eval", "--checkpoint", ck, "--n-samples", "512"]);
    assert!(first.status.success(), "{}", stderr(&first));
    assert_eq!(first.stdout, second.stdout);
    let report: serde_json::Value = serde_json::from_slice(&first.stdout).unwrap();
    assert_eq!(report["step"], 20);
    assert!(report["intra_fid_mean"].is_number());

    let few = mhgan(&["eval", "--checkpoint", ck, "--n-samples", "8"]);
    assert!(few.status.success());
    let report: serde_json::Value = serde_json::from_slice(&few.stdout).unwrap();
    assert!(report["intra_fid"].is_null() && report["intra_fid_mean"].is_null());
    assert!(stderr(&few).contains("warning"));

    let bad = d.path().join("corrupt.mhgk");
    std::fs::write(&bad, b"MHGK garbage").unwrap();
    let o = mhgan(&["eval", "--checkpoint", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("corrupt.mhgk"));
}

#[test]
fn gradcheck_lists_every_case() {
    let o = mhgan(&["gradcheck"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = String::from_utf8(o.stdout).unwrap();
    for case in registry() {
        assert!(table.contains(case.name), "{}", case.name);
    }
}

#[test]
fn plot_emits_stable_svg() {
    let d = tempfile::tempdir().unwrap();
    assert!(train_into(d.path(), &[]).status.success());
    let ck = d.path().join("final.mhgk");
    let svg = |name: &str| {
        let path = d.path().join(name);
        let o = mhgan(&["plot", "--checkpoint", ck.to_str().unwrap(), "--out", path.to_str().unwrap(), "--n", "200"]);
        assert!(o.status.success(), "{}", stderr(&o));
        std::fs::read_to_string(path).unwrap()
    };
    let (a, b) = (svg("a.svg"), svg("b.svg"));
    assert_eq!(a, b);
    let doc = roxmltree::Document::parse(&a).unwrap();
    assert_eq!(doc.root_element().attribute("viewBox"), Some("0 0 800 800"));
    let filled = doc.descendants().filter(|n| n.has_tag_name("circle") && n.attribute("fill").is_some_and(|f| f.starts_with('#'))).count();
    assert_eq!(filled, 200);
}
