use std::path::Path;
use std::process::{Command, Output};

fn harmap(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_harmap"))
        .args(args)
        .arg("--output")
        .arg(out)
        .env("HARMAP_THREADS", "1")
        .output()
        .unwrap()
}

fn summary(out: &Path) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(out.join("summary.json")).unwrap()).unwrap()
}

#[test]
fn identity_has_degree_one() {
    let dir = tempfile::tempdir().unwrap();
    let map = dir.path().join("id.json");
    std::fs::write(&map, r#"{"kind": "identity"}"#).unwrap();
    let out = dir.path().join("deg");
    let o = harmap(&["degree", "--map", map.to_str().unwrap(), "--resolution", "60x120"], &out);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let s = summary(&out);
    assert_eq!(s["results"]["degree"], 1);
    assert_eq!(s["config"]["params"]["resolution"], serde_json::json!([60, 120]));
}

#[test]
fn unmet_expectation_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("deg");
    let o = harmap(&["degree", "--set", r#"map={"kind":"antipodal"}"#, "--set", "expected=1"], &out);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("FAIL"));
    assert_eq!(summary(&out)["passed"], false);
}

#[test]
fn bad_input_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    let unknown = harmap(&["degree", "--set", r#"map={"kind":"identity"}"#, "--set", "bogus=1"], &out);
    assert_eq!(unknown.status.code(), Some(3));
    let resolution = harmap(&["degree", "--resolution", "60by120"], &out);
    assert_eq!(resolution.status.code(), Some(2), "clap rejects malformed values itself");
    let missing = harmap(&["degree", "--map", dir.path().join("absent.json").to_str().unwrap()], &out);
    assert_eq!(missing.status.code(), Some(3));
}

#[test]
fn lemma_lists_from_flags() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("lemma");
    let o = harmap(&["verify-lemma34", "--p", "1,1.5", "--j", "5,10"], &out);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("lemma34.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4);
}
