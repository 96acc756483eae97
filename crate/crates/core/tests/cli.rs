//! The `dexp` binary end to end: the quickstart pipeline on a shortened
//! budget against a stored summary, and the exit-code contract.
//!
//! Set `DEXP_BLESS=1` to rewrite the golden summary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn dexp(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_dexp"));
    cmd.args(args).env_remove("DEXP_THREADS");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = dexp(args, &[]);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn code(args: &[&str], envs: &[(&str, &str)]) -> (i32, String) {
    let out = dexp(args, envs);
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

/// The quickstart config with short adaptation budgets.
fn short_config(dir: &Path) -> PathBuf {
    let text = std::fs::read_to_string(repo_root().join("configs/quickstart.json")).unwrap();
    let mut cfg: serde_json::Value = serde_json::from_str(&text).unwrap();
    cfg["expand"]["iterations"] = 300.into();
    cfg["eval"]["baseline_iterations"] = 300.into();
    cfg["eval"]["probes"] = 64.into();
    cfg["output_dir"] = dir.to_str().unwrap().into();
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn quickstart_pipeline_matches_golden_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cfg = short_config(dir);
    let (cfg, d) = (cfg.to_str().unwrap(), dir.to_str().unwrap());
    let p = |name: &str| format!("{d}/{name}");
    ok(&["pretrain", "--config", cfg]);
    let source_bytes = std::fs::read(p("source.dexp")).unwrap();
    ok(&["analyze", "--ckpt", &p("source.dexp"), "--out", &p("analyze")]);
    ok(&["expand", "--config", cfg, "--ckpt", &p("source.dexp")]);
    for t in ["star", "spiky", "tri"] {
        ok(&["adapt", "--config", cfg, "--ckpt", &p("source.dexp"), "--task", t]);
    }
    ok(&["baseline-cc", "--config", cfg, "--ckpt", &p("source.dexp")]);
    let baselines = ["adapt_star", "adapt_spiky", "adapt_tri", "baseline_cc"]
        .map(|b| p(&format!("{b}.dexp")))
        .join(",");
    ok(&[
        "evaluate", "--ckpt", &p("expanded.dexp"), "--source", &p("source.dexp"), "--baselines", &baselines, "--out",
        &p("report"),
    ]);
    ok(&["traverse", "--ckpt", &p("expanded.dexp"), "--domain", "star", "--alphas=-10,0,20", "--z-seed", "1", "--out", &p("traverse")]);
    ok(&["compose", "--ckpt", &p("expanded.dexp"), "--domains", "star:20,tri:20", "--z-seed", "1", "--out", &p("compose")]);
    assert_eq!(std::fs::read(p("source.dexp")).unwrap(), source_bytes, "input checkpoint was modified");

    for f in ["report/leakage.csv", "report/alignment.csv", "report/traversal.svg", "traverse/traverse.svg", "compose/compose.svg", "analyze/dormancy.csv"] {
        assert!(Path::new(&p(f)).is_file(), "missing {f}");
    }
    let svg = std::fs::read_to_string(p("compose/compose.svg")).unwrap();
    assert!(svg.contains("<svg") && svg.matches("<path").count() == 9);

    let summary = std::fs::read_to_string(p("report/summary.json")).unwrap();
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/quickstart_summary.json");
    if std::env::var_os("DEXP_BLESS").is_some() {
        std::fs::write(&golden, &summary).unwrap();
    }
    let expected = std::fs::read_to_string(&golden).expect("golden summary present; run with DEXP_BLESS=1");
    assert_eq!(summary, expected, "evaluation summary drifted from the golden file");
}

#[test]
fn exit_codes_follow_the_contract() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let bad = d.join("bad.json");
    std::fs::write(&bad, "{\n  \"tasks\": [\n    {\"domain_id\": \"a\",,}\n  ]\n}\n").unwrap();
    let (c, err) = code(&["pretrain", "--config", bad.to_str().unwrap()], &[]);
    assert_eq!(c, 2);
    assert!(err.contains("line 3, column"), "{err}");

    let unknown = d.join("unknown.json");
    std::fs::write(&unknown, r#"{"tasks": [{"domain_id": "a", "kind": "directional", "target_kind": "star5"}], "sede": 1}"#).unwrap();
    assert_eq!(code(&["pretrain", "--config", unknown.to_str().unwrap()], &[]).0, 2);

    assert_eq!(code(&["pretrain", "--config", d.join("missing.json").to_str().unwrap()], &[]).0, 4);
    assert_eq!(code(&["frobnicate"], &[]).0, 2);

    let garbage = d.join("garbage.dexp");
    std::fs::write(&garbage, b"DEXP\x01\0\0\0{not json").unwrap();
    assert_eq!(code(&["analyze", "--ckpt", garbage.to_str().unwrap(), "--out", d.to_str().unwrap()], &[]).0, 4);

    let (c, err) = code(&["analyze", "--ckpt", garbage.to_str().unwrap(), "--out", d.to_str().unwrap()], &[("DEXP_THREADS", "0")]);
    assert_eq!(c, 2, "{err}");
    assert!(err.contains("DEXP_THREADS"));
}
