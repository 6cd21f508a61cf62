use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_agentflow"))
}

/// The builtin SWE scenario cut down to a dozen sessions.
fn small_swe(dir: &std::path::Path) -> std::path::PathBuf {
    let out = bin().args(["show", "swe"]).output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let text: Vec<String> = text
        .lines()
        .map(|l| {
            if l.starts_with("sessions =") {
                "sessions = 12".to_string()
            } else {
                l.to_string()
            }
        })
        .collect();
    let path = dir.join("swe.toml");
    std::fs::write(&path, text.join("\n")).unwrap();
    path
}

#[test]
fn validate_accepts_builtins_and_rejects_garbage() {
    for name in ["financial_analyst", "router", "swe"] {
        assert!(bin().args(["validate", name]).status().unwrap().success());
    }
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "seed = 1\n").unwrap();
    let out = bin().arg("validate").arg(&bad).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("workflow"));
}

#[test]
fn run_writes_all_outputs_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = small_swe(dir.path());
    let mut metrics = Vec::new();
    for k in 0..2 {
        let out = dir.path().join(format!("out{k}"));
        let st = bin()
            .arg("run")
            .arg(&scenario)
            .arg("--out")
            .arg(&out)
            .status()
            .unwrap();
        assert!(st.success());
        for f in [
            "metrics.json",
            "latency.csv",
            "timeline.csv",
            "instances.csv",
            "ticks.csv",
            "events.log",
        ] {
            assert!(out.join(f).exists(), "{f} missing");
        }
        metrics.push((
            std::fs::read(out.join("metrics.json")).unwrap(),
            std::fs::read(out.join("events.log")).unwrap(),
        ));
    }
    assert_eq!(metrics[0], metrics[1]);
    let m: serde_json::Value = serde_json::from_slice(&metrics[0].0).unwrap();
    assert_eq!(m["requests"], 12);
    assert_eq!(
        m["completed"].as_u64().unwrap() + m["failed"].as_u64().unwrap(),
        12
    );
}

#[test]
fn compare_prints_paired_rows() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = small_swe(dir.path());
    let out = bin()
        .arg("compare")
        .args(["--policy", "fcfs", "--policy", "lpt", "--seeds", "2"])
        .arg(&scenario)
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().filter(|l| l.contains(",fcfs,")).count(), 2);
    assert_eq!(text.lines().filter(|l| l.contains(",lpt,")).count(), 2);
    assert!(text.contains("# lpt vs fcfs over 2 paired seeds"));
}

#[test]
fn compare_needs_two_policies() {
    let out = bin()
        .args(["compare", "--policy", "fcfs", "swe"])
        .output()
        .unwrap();
    assert!(!out.status.success());
}

#[test]
fn shipped_scenario_files_match_builtins() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios");
    for name in ["financial_analyst", "router", "swe"] {
        let shown = bin().args(["show", name]).output().unwrap().stdout;
        let file = std::fs::read(dir.join(format!("{name}.toml"))).unwrap();
        assert_eq!(
            String::from_utf8(file).unwrap(),
            String::from_utf8(shown).unwrap(),
            "{name}"
        );
    }
}
