use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mvbsde::io::strip_timestamp;

const SMALL: &str = "\
[problem]
phi = indicator(0,inf)
f = constant(-1)
terminal = constant(0)

[numerics]
steps = 20
paths = 2000
seed = 5
eps_schedule = 0.4,0.2,0.1
penalty = implicit
tol = 0.2
";

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_mvbsde"));
    c.env_remove("MVBSDE_THREADS");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn small_config(dir: &Path) -> String {
    let p = dir.join("small.cfg");
    fs::write(&p, SMALL).unwrap();
    p.to_str().unwrap().to_string()
}

fn stripped(path: &Path) -> String {
    strip_timestamp(&fs::read_to_string(path).unwrap())
}

#[test]
fn prox_suite_passes_and_fault_is_caught() {
    let ok = run(&["prox-suite", "--samples", "500"]);
    assert_eq!(
        ok.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&ok.stdout)
    );
    let bad = run(&["prox-suite", "--samples", "500", "--inject-fault"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stdout).contains("FAIL"));
}

#[test]
fn mollifier_suite_passes() {
    let out = run(&["mollifier-suite", "--samples", "50"]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stdout)
    );
}

#[test]
fn missing_config_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let out = run(&[
        "solve",
        "--config",
        "/no/such/file.cfg",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(out.stdout.is_empty());
    assert!(!out_dir.exists());
}

#[test]
fn bad_key_reports_line() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.cfg");
    fs::write(&p, "[numerics]\nsteps = 10\nstepz = 3\n").unwrap();
    let out = run(&["solve", "--config", p.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"));
}

#[test]
fn solve_then_verify() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("run");
    let o = out.to_str().unwrap();
    let s = run(&["solve", "--config", &cfg, "--out", o, "--oracle", "tree"]);
    assert_eq!(
        s.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&s.stderr)
    );
    for f in ["solution.csv", "summary.json", "tree.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let csv = fs::read_to_string(out.join("solution.csv")).unwrap();
    assert!(csv.lines().any(|l| l == "path,step,Y,Z,K"));
    assert!(csv.contains("# numerics.paths = 2000"));

    let summary = out.join("summary.json");
    let v = run(&[
        "verify",
        "--config",
        &cfg,
        "--out",
        o,
        "--solution",
        summary.to_str().unwrap(),
    ]);
    assert_eq!(
        v.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&v.stdout)
    );
    assert!(out.join("verify.json").exists());

    let missing = out.join("nope.json");
    let v = run(&[
        "verify",
        "--config",
        &cfg,
        "--out",
        o,
        "--solution",
        missing.to_str().unwrap(),
    ]);
    assert_eq!(v.status.code(), Some(2));

    // a different seed no longer matches the artifact
    let v = run(&[
        "verify",
        "--config",
        &cfg,
        "--out",
        o,
        "--seed",
        "6",
        "--solution",
        summary.to_str().unwrap(),
    ]);
    assert_eq!(v.status.code(), Some(1));
}

#[test]
fn converge_exit_code_follows_tolerance() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let o = dir.path().join("c");
    let ok = run(&["converge", "--config", &cfg, "--out", o.to_str().unwrap()]);
    assert_eq!(ok.status.code(), Some(0));
    let strict = dir.path().join("strict.cfg");
    fs::write(&strict, SMALL.replace("tol = 0.2", "tol = 1e-6")).unwrap();
    let no = run(&[
        "converge",
        "--config",
        strict.to_str().unwrap(),
        "--out",
        o.to_str().unwrap(),
    ]);
    assert_eq!(no.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&no.stdout).contains("converged: false"));
}

#[test]
fn outputs_do_not_depend_on_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let c = dir.path().join("c");
    let ra = run(&[
        "solve",
        "--config",
        &cfg,
        "--out",
        a.to_str().unwrap(),
        "--threads",
        "1",
    ]);
    let rb = bin()
        .args(["solve", "--config", &cfg, "--out", b.to_str().unwrap()])
        .env("MVBSDE_THREADS", "4")
        .output()
        .unwrap();
    let rc = run(&[
        "solve",
        "--config",
        &cfg,
        "--out",
        c.to_str().unwrap(),
        "--threads",
        "3",
    ]);
    assert!(ra.status.success() && rb.status.success() && rc.status.success());
    assert_eq!(ra.stdout, rb.stdout);
    for f in ["solution.csv", "summary.json"] {
        let x = stripped(&a.join(f));
        assert_eq!(x, stripped(&b.join(f)), "{f}");
        assert_eq!(x, stripped(&c.join(f)), "{f}");
    }
}

#[test]
fn smooth_demo_runs() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("s.cfg");
    fs::write(&p, "[numerics]\npaths = 3000\nsteps = 50\n").unwrap();
    let out = run(&[
        "smooth-demo",
        "--config",
        p.to_str().unwrap(),
        "--out",
        dir.path().join("s").to_str().unwrap(),
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stdout)
    );
    assert!(dir.path().join("s/smooth.json").exists());
}
