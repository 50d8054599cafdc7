use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ft(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flexitrust")).args(args).output().expect("binary runs")
}

const SPEC: &str = r#"
scenario = "rollback_attack"
protocols = ["MinBft", "FlexiBft"]
persistence = ["persistent", "volatile"]
seeds = [0, 1]
keep_traces = true

[params]
txns = 4
"#;

fn write_spec(dir: &Path, text: &str) -> String {
    let p = dir.join("spec.toml");
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_owned()
}

#[test]
fn sweep_output_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path(), SPEC);
    let mut csvs = Vec::new();
    for out in ["a", "b"] {
        let out = dir.path().join(out);
        let o = ft(&["run", &spec, "-o", out.to_str().unwrap()]);
        // volatile MinBft is expected to break, so the sweep itself succeeds
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        csvs.push(fs::read_to_string(out.join("metrics.csv")).unwrap());
        assert!(fs::read_to_string(out.join("verdicts.jsonl")).unwrap().lines().count() > 0);
        assert_eq!(fs::read_dir(out.join("traces")).unwrap().count(), 8);
    }
    assert_eq!(csvs[0], csvs[1]);
    assert_eq!(csvs[0].lines().count(), 1 + 8);
}

#[test]
fn bad_specs_exit_with_config_error() {
    let dir = tempfile::tempdir().unwrap();
    for text in ["scenario = \"honest\"\nprotocols = [\"MinBft\"]\nf = [0]\n", "scenario = \"honest\"\nprotocolz = []\n"] {
        let spec = write_spec(dir.path(), text);
        let o = ft(&["run", &spec, "-o", dir.path().join("out").to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(2), "{text}");
    }
    assert_eq!(ft(&["run", "/nonexistent/spec.toml"]).status.code(), Some(2));
}

#[test]
fn scenario_trace_can_be_explained() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("t.fttrace");
    let o = ft(&["scenario", "rollback_attack", "-p", "MinBft", "--volatile", "--trace", trace.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("safety_ok false"));

    let o = ft(&["explain", trace.to_str().unwrap(), "-F", "seq=1", "-F", "replica=r2"]);
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("== replica r2"));
    assert!(!text.contains("== replica r1"));

    assert_eq!(ft(&["explain", trace.to_str().unwrap(), "-F", "view=1"]).status.code(), Some(2));
}
