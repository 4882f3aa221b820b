use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests").join(name)
}

fn retstack(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_retstack")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = retstack(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn json(args: &[&str]) -> Value {
    let mut all = args.to_vec();
    all.extend(["--format", "json"]);
    serde_json::from_str(&ok(&all)).expect("valid json")
}

fn golden(name: &str) -> String {
    std::fs::read_to_string(data("golden").join(name)).unwrap()
}

#[test]
fn layout_is_deterministic() {
    let a = ok(&["layout", "--arch", "x86-64", "--seed", "7"]);
    assert_eq!(a, ok(&["layout", "--arch", "x86-64", "--seed", "7"]));
    assert_ne!(a, ok(&["layout", "--arch", "x86-64", "--seed", "8"]));
}

#[test]
fn arm_entropy_column() {
    let v = json(&["layout", "--arch", "arm64"]);
    let entropy: Vec<u64> = v["entropy"].as_array().unwrap().iter().map(|r| r["entropy"].as_u64().unwrap()).collect();
    assert_eq!(entropy, [18, 18, 18, 18]);
    assert_eq!(v["schema"], 1);
}

#[test]
fn non_pie_load_base() {
    let v = json(&["layout", "--arch", "x86-64", "--no-pie"]);
    assert_eq!(v["layout"]["code_base"], "0x400000");
    assert_eq!(ok(&["layout", "--arch", "x86-64", "--no-pie", "--seed", "0"]), golden("layout_x86-64_nopie.txt"));
}

#[test]
fn oracle_cannot_see_into_the_region() {
    let v = json(&["attack", "--strategy", "oracle", "--scheme", "returnstack"]);
    assert_eq!(v["success"], false);
    assert_eq!(v["stats"]["localized"], 0.0);
    assert!(v["oracle_invocations"].as_u64().unwrap() > 0);
}

#[test]
fn probing_mean_tracks_two_to_the_bits() {
    let v = json(&["attack", "--strategy", "probe", "--scheme", "safestack", "--scaled-bits", "14", "--trials", "200"]);
    let mean = v["mean"].as_f64().unwrap();
    assert!((mean / 16384.0 - 1.0).abs() < 0.10, "mean {mean}");
    assert_eq!(v["trials"], 200);
}

#[test]
fn aware_libraries_leak_nothing() {
    let v = json(&["attack", "--strategy", "leak", "--scheme", "returnstack", "--libs", "aware"]);
    assert_eq!(v["stats"]["hits"], 0.0);
    assert_eq!(v["success"], false);
    let v = json(&["attack", "--strategy", "leak", "--scheme", "safestack"]);
    assert_eq!(v["success"], true);
}

#[test]
fn rewrite_canonical_file() {
    let input = data("data/canonical_x86-64.s");
    let out = retstack(&["rewrite", input.to_str().unwrap(), "--scheme", "returnstack", "--format", "json"]);
    assert!(out.status.success());
    let listing = String::from_utf8(out.stdout).unwrap();
    assert!(listing.contains("POPQ (%R15)") && listing.contains("JMPQ (%R15)"));
    let report: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(report["functions"][0]["delta"], 3);
    assert_eq!(report["schema"], 1);
}

#[test]
fn rewrite_to_file() {
    let dir = std::env::temp_dir().join(format!("retstack-cli-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let target = dir.join("out.s");
    let input = data("data/canonical_x86-64.s");
    let report = ok(&[
        "rewrite",
        input.to_str().unwrap(),
        "--scheme",
        "returnstack",
        "--out",
        target.to_str().unwrap(),
        "--format",
        "json",
    ]);
    let v: Value = serde_json::from_str(&report).unwrap();
    assert_eq!(v["functions"][0]["delta"], 3);
    assert!(std::fs::read_to_string(&target).unwrap().starts_with("f:\n    POPQ (%R15)"));
    std::fs::remove_dir_all(dir).unwrap();
}

#[test]
fn rewrite_empty_file() {
    let input = data("data/empty.s");
    let out = retstack(&["rewrite", input.to_str().unwrap(), "--format", "json"]);
    assert!(out.status.success());
    assert!(out.stdout.is_empty());
    let report: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(report["functions"].as_array().unwrap().len(), 0);
}

#[test]
fn matrix_matches_golden_text() {
    assert_eq!(ok(&["matrix", "--seed", "0"]), golden("matrix_x86-64.txt"));
    assert_eq!(ok(&["matrix", "--arch", "arm64", "--seed", "0"]), golden("matrix_arm64.txt"));
}

#[test]
fn matrix_pattern_ignores_the_seed() {
    let text = golden("matrix_x86-64.txt");
    for seed in ["3", "11", "12345"] {
        assert_eq!(ok(&["matrix", "--seed", seed]), text);
    }
    let v = json(&["matrix", "--seed", "9"]);
    let oracle = v["rows"].as_array().unwrap().iter().find(|r| r["key"] == "allocation_oracles").unwrap();
    assert_eq!(oracle["cells"], serde_json::json!(["✗", "✗", "✓"]));
    assert_eq!(v["schema"], 1);
}

#[test]
fn config_file_and_overrides() {
    let conf = data("data/run.conf");
    let v: Value = serde_json::from_str(&ok(&["attack", "--config", conf.to_str().unwrap()])).unwrap();
    assert_eq!(v["attack"], "probe");
    assert_eq!(v["scheme"], "safestack");
    assert_eq!(v["trials"], 50);
    let v: Value = serde_json::from_str(&ok(&["attack", "--config", conf.to_str().unwrap(), "--trials", "7"])).unwrap();
    assert_eq!(v["trials"], 7);
}

#[test]
fn errors_are_json_with_nonzero_exit() {
    for args in [
        &["layout", "--arch", "sparc"][..],
        &["attack", "--trials", "0"],
        &["attack", "--scheme", "returnstack", "--scaled-bits", "1", "--threads", "9"],
        &["rewrite", "/nonexistent/listing.s"],
        &["attack", "--config", "/nonexistent.conf"],
    ] {
        let out = retstack(args);
        assert!(!out.status.success(), "{args:?}");
        let v: Value = serde_json::from_slice(&out.stderr).unwrap_or_else(|_| panic!("{args:?}: not json"));
        assert_eq!(v["schema"], 1);
        assert!(v["error"]["message"].as_str().is_some_and(|m| !m.is_empty()));
    }
}

#[test]
fn unparsable_listing_is_an_error() {
    let dir = std::env::temp_dir().join(format!("retstack-bad-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("bad.s");
    std::fs::write(&path, "f:\nFROB %RAX\n").unwrap();
    let out = retstack(&["rewrite", path.to_str().unwrap()]);
    assert!(!out.status.success());
    let v: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(v["error"]["kind"], "parse");
    std::fs::remove_dir_all(dir).unwrap();
}

#[test]
fn depth_of_a_program() {
    let prog = data("data/program.json");
    let v = json(&["depth", prog.to_str().unwrap()]);
    assert_eq!(v["max_depth"], 4);
    assert_eq!(v["runs"][0]["calls"], 6);
    let v = json(&["depth", "--trials", "5", "--seed", "2"]);
    assert_eq!(v["runs"].as_array().unwrap().len(), 5);
}
