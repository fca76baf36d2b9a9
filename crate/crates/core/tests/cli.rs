use std::path::Path;
use std::process::{Command, Output};

fn fwdstep(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fwdstep")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

#[test]
fn help_enumerates_every_key() {
    let o = fwdstep(&["--help"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout);
    for (k, _) in fwdstep::config::schema_keys() {
        assert!(text.contains(&k), "missing {k}");
    }
}

#[test]
fn missing_config_exits_2() {
    assert_eq!(code(&fwdstep(&["run", "--config", "/does/not/exist.toml"])), 2);
    assert_eq!(code(&fwdstep(&["validate", "--config", "/does/not/exist.toml"])), 2);
    assert_eq!(code(&fwdstep(&["validate", "--suite", "no-such-suite"])), 2);
}

#[test]
fn pristine_build_validates() {
    let o = fwdstep(&["validate"]);
    let text = String::from_utf8_lossy(&o.stdout);
    assert_eq!(code(&o), 0, "{text}");
    for s in fwdstep::validation::PROPERTY_SUITES {
        assert!(text.contains(s), "suite {s} not listed");
    }
}

#[test]
fn flipped_coriolis_fails_validation() {
    let o = fwdstep(&["validate", "--suite", "skew-symmetry", "--set", "model.fault=\"flip_coriolis\""]);
    assert_ne!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL"));
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

#[test]
fn identical_runs_write_identical_logs_and_plot_series() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let o = fwdstep(&["--quiet", "run", "--set", "run.duration=3.0", "--out", d.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(read(&a.join("run.csv")), read(&b.join("run.csv")));
    assert_eq!(read(&a.join("metrics.json")), read(&b.join("metrics.json")));

    let plots = dir.path().join("plots");
    let log = a.join("run.csv");
    let o = fwdstep(&["--quiet", "plot-data", "--log", log.to_str().unwrap(), "--out", plots.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["tracking.csv", "lyapunov.csv", "estimates.csv"] {
        assert!(plots.join(f).exists(), "{f}");
    }
}

#[test]
fn sweep_and_pid_compare_write_their_tables() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = fwdstep(&["--quiet", "sweep", "--set", "run.duration=2.0", "--axis", "k", "--values", "10,30", "--out", out]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let table = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(table.lines().count(), 3);

    let o = fwdstep(&["--quiet", "pid-compare", "--set", "run.duration=2.0", "--out", out]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("pid_compare.json").exists());
}

#[test]
fn divergence_exits_3() {
    let o = fwdstep(&[
        "--quiet",
        "run",
        "--set",
        "gains.k=1.0e6",
        "--set",
        "run.dt=0.05",
        "--set",
        "run.duration=5.0",
        "--out",
        tempfile::tempdir().unwrap().path().to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}
