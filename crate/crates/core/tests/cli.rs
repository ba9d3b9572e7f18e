use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_fours");

fn smoke_config() -> String {
    std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml")).unwrap()
}

/// Working directory with a small simulated cohort and a hand-written
/// structure file, configured as in the smoke run.
fn workdir(n_patients: usize) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config();
    let sim = &cfg[cfg.find("[simulate]").unwrap()..];
    let sim = sim.replace("n_patients = 200", &format!("n_patients = {n_patients}"));
    let head = r#"seed = 3
out = "out"

[data]
visits = "out/simulate/visits.csv"
events = "out/simulate/events.csv"
schema_file = "out/simulate/schema.json"

[sequence]
structure_file = "structure.json"
knots = [3.0]
boundary = [0.0, 6.0]
qmc_points = 128

[[sequence.hazards]]
name = "death"
covariates = []
association = "current_value"
baseline = { kind = "weibull" }

[select]
mc_draws = 500

[report]
mc_draws = 500
"#;
    std::fs::write(dir.path().join("run.toml"), format!("{head}\n{sim}")).unwrap();
    std::fs::write(
        dir.path().join("structure.json"),
        r#"{"subdimensions": [{"name": "motor", "items": ["i1", "i2", "i3", "i4", "i5"]}]}"#,
    )
    .unwrap();
    dir
}

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .arg("--config")
        .arg(dir.join("run.toml"))
        .current_dir(dir)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) {
    let o = run(dir, args);
    assert_eq!(o.status.code(), Some(0), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
}

fn files(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    out
}

#[test]
fn hand_written_structure_skips_step_one_and_select_needs_both_fits() {
    let dir = workdir(80);
    let d = dir.path();
    ok(d, &["simulate"]);
    ok(d, &["sequence"]);
    assert!(!d.join("out/structure").exists());
    let fit = std::fs::read_to_string(d.join("out/sequence/motor/fit.json")).unwrap();
    assert!(fit.contains("\"config_hash\"") && fit.contains("\"command\": \"sequence\""));
    let seq = std::fs::read_to_string(d.join("out/sequence/motor/sequence.csv")).unwrap();
    assert!(seq.starts_with("# fours "));

    // only the sequencing fit exists
    let o = run(d, &["select"]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("stage/motor/fit.json"), "{err}");
    assert!(!d.join("out/select").exists());

    ok(d, &["stage"]);
    ok(d, &["select"]);
    ok(d, &["report"]);
    for f in ["trajectories.csv", "spider.csv", "sequence_stages.csv", "information.csv"] {
        let text = std::fs::read_to_string(d.join("out/report").join(f)).unwrap();
        let mut lines = text.lines();
        assert!(lines.next().unwrap().starts_with("# fours "));
        assert!(lines.next().unwrap().starts_with("subdimension,"), "{f}");
        assert!(lines.next().unwrap().starts_with("motor,"), "{f}");
    }
}

#[test]
fn report_without_projection_is_a_missing_artifact() {
    let dir = workdir(20);
    let o = run(dir.path(), &["report"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("sequence"));
}

#[test]
fn reruns_are_byte_identical_and_seeds_matter() {
    let dir = workdir(60);
    let d = dir.path();
    ok(d, &["simulate"]);
    ok(d, &["sequence", "--out", "a"]);
    ok(d, &["sequence", "--out", "b"]);
    let a = files(&d.join("a"));
    assert!(!a.is_empty());
    for f in &a {
        let rel = f.strip_prefix(d.join("a")).unwrap();
        assert_eq!(std::fs::read(f).unwrap(), std::fs::read(d.join("b").join(rel)).unwrap(), "{}", rel.display());
    }
    ok(d, &["simulate", "--out", "c", "--seed", "4"]);
    assert_ne!(
        std::fs::read(d.join("out/simulate/visits.csv")).unwrap(),
        std::fs::read(d.join("c/simulate/visits.csv")).unwrap()
    );
}

#[test]
fn non_convergence_exits_3_with_flagged_artifacts() {
    let dir = workdir(40);
    let d = dir.path();
    ok(d, &["simulate"]);
    let o = run(d, &["sequence", "--set", "sequence.optimizer.max_iterations=1"]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    let fit: serde_json::Value =
        serde_json::from_slice(&std::fs::read(d.join("out/sequence/motor/fit.json")).unwrap()).unwrap();
    assert_eq!(fit["payload"]["fit"]["convergence"]["converged"], serde_json::Value::Bool(false));
}

#[test]
fn configuration_errors_exit_2() {
    let dir = workdir(20);
    let d = dir.path();
    let o = run(d, &["simulate", "--set", "structure.replicate=3"]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(d, &["sequence"]);
    assert_eq!(o.status.code(), Some(2), "cohort files do not exist yet");
    let o = Command::new(BIN).args(["structure", "--config", "/nonexistent/run.toml"]).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    let o = Command::new(BIN).arg("--help").output().unwrap();
    let help = String::from_utf8_lossy(&o.stdout);
    for c in ["structure", "sequence", "stage", "select", "simulate", "report", "--threads", "--seed", "--out"] {
        assert!(help.contains(c), "{c}");
    }
}
