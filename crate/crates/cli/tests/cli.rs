use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ptrace-race"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> Output {
    let o = bin(args);
    assert!(
        o.status.code() == Some(0) || o.status.code() == Some(1),
        "{args:?}: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    o
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Running the stages by hand gives the same files as `pipeline`.
fn stages_compose(program: &str, mode: &str, seed: &str) {
    let tmp = tempfile::tempdir().unwrap();
    let whole = tmp.path().join("whole");
    let staged = tmp.path().join("staged");
    ok(&[
        "pipeline",
        program,
        "--mode",
        mode,
        "--seed",
        seed,
        "--algo",
        "both",
        "-o",
        p(&whole),
    ]);

    ok(&["analyze", program, "--mode", mode, "-o", p(&staged)]);
    let sel = staged.join("selection.json");
    ok(&["instrument", program, "--selection", p(&sel), "-o", p(&staged)]);
    let asm = staged.join("instrumented.asm");
    ok(&["run", p(&asm), "--seed", seed, "-o", p(&staged)]);
    let mapping = staged.join("mapping.json");
    ok(&["decode", p(&staged), "--mapping", p(&mapping), "-o", p(&staged)]);
    let events = staged.join("events.jsonl");
    ok(&["detect", p(&events), "--algo", "both", "-o", p(&staged)]);

    for f in [
        "selection.json",
        "instrumented.asm",
        "mapping.json",
        "run.json",
        "sideband.bin",
        "cpu0.bin",
        "cpu1.bin",
        "events.jsonl",
        "races.json",
    ] {
        assert_eq!(
            fs::read(whole.join(f)).unwrap(),
            fs::read(staged.join(f)).unwrap(),
            "{program} {mode}: {f} differs"
        );
    }
}

#[test]
fn staged_commands_match_pipeline() {
    for fx in ["two_writers", "derived_fields", "stress"] {
        for mode in ["selective", "naive"] {
            stages_compose(&format!("fixture:{fx}"), mode, "3");
        }
    }
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = p(tmp.path());
    assert_eq!(
        bin(&["pipeline", "fixture:lock_guarded", "-o", out]).status.code(),
        Some(0)
    );
    assert_eq!(
        bin(&["pipeline", "fixture:two_writers", "-o", out]).status.code(),
        Some(1)
    );
    assert_eq!(
        bin(&["pipeline", "fixture:two_writers", "--no-fail-on-race", "-o", out])
            .status
            .code(),
        Some(0)
    );
    assert_eq!(bin(&["pipeline", "fixture:nope", "-o", out]).status.code(), Some(2));
    let bad = tmp.path().join("bad.asm");
    fs::write(&bad, "fn main {\n  frob r0\n}\n").unwrap();
    let o = bin(&["pipeline", p(&bad), "-o", out]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("parse"));
}

#[test]
fn race_free_fixture_has_empty_report() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&["pipeline", "fixture:lock_guarded", "-o", p(tmp.path())]);
    let races: serde_json::Value = serde_json::from_slice(&fs::read(tmp.path().join("races.json")).unwrap()).unwrap();
    assert_eq!(races, serde_json::json!([]));
}

#[test]
fn two_writers_race_on_every_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let o = bin(&["sweep", "fixture:two_writers", "--seeds", "0..20", "-o", p(tmp.path())]);
    assert_eq!(o.status.code(), Some(1));
    let summary: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let runs = summary["runs"].as_array().unwrap();
    assert_eq!(runs.len(), 20);
    assert!(runs.iter().all(|r| r["races"].as_u64().unwrap() >= 1));
    assert!(tmp.path().join("seed-19/races.json").exists());
}

#[test]
fn stats_from_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let sel = tmp.path().join("sel");
    let naive = tmp.path().join("naive");
    let cap = ["--capacity", "100"];
    ok(&[&["pipeline", "fixture:stress", "-o", p(&sel)][..], &cap].concat());
    ok(&[
        &["pipeline", "fixture:stress", "--mode", "naive", "-o", p(&naive)][..],
        &cap,
    ]
    .concat());
    let stats = |d: &Path| -> serde_json::Value {
        let o = ok(&["stats", p(d), "--json"]);
        serde_json::from_slice(&o.stdout).unwrap()
    };
    let (s, n) = (stats(&sel), stats(&naive));
    assert!(s["s_inst"].as_u64() < n["s_inst"].as_u64());
    assert_eq!(s["loss_percent"].as_f64(), Some(0.0));
    assert!(n["loss_percent"].as_f64().unwrap() > 0.0);
    assert!(n["d_inst"].as_u64().unwrap() >= n["emitted_ptw"].as_u64().unwrap());

    let unlimited = tmp.path().join("unlimited");
    ok(&["pipeline", "fixture:stress", "--mode", "naive", "-o", p(&unlimited)]);
    let u = stats(&unlimited);
    assert_eq!(
        (u["loss_percent"].as_f64(), u["loss_times"].as_u64()),
        (Some(0.0), Some(0))
    );
    assert!(bin(&["stats", p(&tmp.path().join("missing"))]).status.code() == Some(2));
}
