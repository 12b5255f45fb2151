use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_nishimori-lab"))
}

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn run(args: &[&str], cfg: &Path, out: &Path) -> Output {
    bin().args(args).arg("--config").arg(cfg).arg("--output").arg(out).output().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn minimal_config_passes_and_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["run"], &config("minimal.json"), dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(dir.path().join("results.csv")).unwrap();
    let mut lines = csv.lines();
    assert!(lines.next().unwrap().starts_with("test,N,observable"));
    assert!(lines.next().unwrap().starts_with("nishimori,1,R:1,"));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["pass"], true);
    let csv_entry = manifest["files"].as_array().unwrap().iter().find(|f| f["name"] == "results.csv").unwrap();
    assert_eq!(csv_entry["sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn unknown_test_name_is_a_config_error_with_line() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(config("minimal.json")).unwrap().replace("\"nishimori\"", "\"nishimory\"");
    let cfg = write(dir.path(), "bad.json", &text);
    let o = run(&["validate"], &cfg, dir.path());
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 4"), "{err}");
    let o = run(&["run"], &cfg, dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(!dir.path().join("results.csv").exists());
}

#[test]
fn missing_seed_and_bad_mode_combinations_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let no_seed = r#"{"model": {"prior": {"kind": "rademacher"}, "channel": {"kind": "null"}, "N": 2},
 "tests": [{"test": "nishimori"}]}"#;
    assert_eq!(run(&["validate"], &write(dir.path(), "a.json", no_seed), dir.path()).status.code(), Some(2));
    let mcmc_fds = r#"{"model": {"prior": {"kind": "rademacher"}, "channel": {"kind": "null"}, "N": 2},
 "engine": {"mode": "mcmc"},
 "tests": [{"test": "fds", "functions": ["1"], "k": [1]}], "seed": 1}"#;
    let o = run(&["validate"], &write(dir.path(), "b.json", mcmc_fds), dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line"));
    let o = run(&["validate"], &config("identity-checks.json"), dir.path());
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("ok "));
}

#[test]
fn outputs_are_identical_across_thread_counts() {
    let text = r#"{"model": {"prior": {"kind": "rademacher"}, "channel": {"kind": "spiked_tensor", "p": 2, "snr": 1.0}, "N": 3, "seed": 3},
 "perturbation": {"K_max": 2, "lambda_seed": 5},
 "engine": {"mode": "monte_carlo"},
 "sweep": {"N": [2, 3], "R": 6, "lambda_draws": 2},
 "tests": [{"test": "nishimori"}, {"test": "variance", "observables": ["R:1,2"]}, {"test": "thermal_l"}],
 "seed": 9}"#;
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", text);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(run(&["run", "--jobs", "1"], &cfg, &a).status.code(), Some(0));
    assert_eq!(run(&["run", "--jobs", "4"], &cfg, &b).status.code(), Some(0));
    for f in ["results.csv", "report.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let c = dir.path().join("c");
    assert_eq!(run(&["run", "--seed", "10"], &cfg, &c).status.code(), Some(0));
    assert_ne!(std::fs::read(a.join("results.csv")).unwrap(), std::fs::read(c.join("results.csv")).unwrap());
}

#[test]
fn single_n_sweep_reports_no_trend_verdict() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["sweep"], &config("minimal.json"), dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(dir.path().join("results.csv")).unwrap();
    assert!(csv.lines().any(|l| l.starts_with("concentration,1,")));
    assert!(!csv.lines().any(|l| l.starts_with("trend,")));
}

#[test]
fn unwritable_output_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = write(dir.path(), "not_a_dir", "");
    let o = run(&["run"], &config("minimal.json"), &blocker);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("writing outputs"));
}
