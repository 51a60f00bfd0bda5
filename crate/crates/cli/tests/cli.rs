use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const LATTICE: &str = r#"
[geometry]
kind = "lattice"
n = [2, 4, 8]
epsilon = 0.1

[vorticity]
shape = "disk"
center = [-1.0, 0.5]
radius = 0.3

[analysis]
region = [-0.45, 0.3, -0.25, 0.7]
h = 0.02
"#;

fn run(cmd: &str, config: &str, dir: &Path, extra: &[&str]) -> Output {
    let cfg = dir.join("run.toml");
    fs::write(&cfg, config).unwrap();
    let out = dir.join("out");
    Command::new(env!("CARGO_BIN_EXE_perforated"))
        .arg(cmd)
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .args(extra)
        .output()
        .unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn divcurl_writes_gamma_rows_and_slope() {
    let dir = tempfile::tempdir().unwrap();
    let out = run("divcurl", LATTICE, dir.path(), &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("out/gamma.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert!(lines[0].starts_with("n_per_side,grad_gamma1,gamma2"));
    assert_eq!(lines.len(), 5);
    assert!(lines[4].starts_with("slope,"));
    let s = json(&dir.path().join("out/summary.json"));
    assert_eq!(s["schema"], "v1");
    assert_eq!(s["config_hash"].as_str().unwrap().len(), 64);
    assert!(s["tolerances"]["neumann_tol"].as_f64().unwrap() > 0.0);
}

#[test]
fn invalid_eps0_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = LATTICE.replace("epsilon = 0.1", "epsilon = 0.2\neps0 = 0.1");
    let out = run("reflect", &cfg, dir.path(), &[]);
    assert_eq!(out.status.code(), Some(2));
    let e = json(&dir.path().join("out/error.json"));
    assert_eq!(e["status"], "error");
    assert!(e["invariant"].as_str().unwrap().contains("a_over_d_le_eps0"), "{e}");
}

#[test]
fn out_of_range_values_are_rejected_before_running() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = format!("{LATTICE}\n[solver]\npad = 1\n");
    let out = run("divcurl", &cfg, dir.path(), &[]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(json(&dir.path().join("out/error.json"))["invariant"], "solver.pad >= 2");

    let out = run("divcurl", "[geometry]\nkind = \"lattice\"\nn = 4\nepsilon = 0.1\nbogus = 1\n", dir.path(), &[]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(json(&dir.path().join("out/error.json"))["invariant"], "config grammar");
}

#[test]
fn two_hole_ratio_matches_closed_form() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = r#"
[geometry]
kind = "two_hole"
a = 0.04
d = 0.4
box = [-0.1, -0.1, 0.5, 0.1]
center = [0.2, 0.0]

[vorticity]
shape = "disk"
center = [0.5, 1.0]
radius = 0.25
"#;
    let out = run("reflect", cfg, dir.path(), &[]);
    assert!(out.status.success());
    let s = json(&dir.path().join("out/summary.json"));
    let c = &s["results"]["configs"][0];
    let expected = c["expected_ratio"].as_f64().unwrap();
    assert!((expected - 0.01).abs() < 1e-15);
    for r in c["ratios"].as_array().unwrap() {
        assert!((r.as_f64().unwrap() - expected).abs() <= 1e-10 * expected);
    }
    assert_eq!(s["passed"], true);
}

#[test]
fn zero_volume_fraction_needs_one_iteration() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = r#"
[vorticity]
shape = "disk"
center = [-0.75, 0.5]
radius = 0.25

[solver]
kappa = [0.0]
"#;
    let out = run("homog", cfg, dir.path(), &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let s = json(&dir.path().join("out/summary.json"));
    assert_eq!(s["results"]["rows"][0]["iterations"], 1);
    assert_eq!(s["results"]["rows"][0]["err_psi0"], 0.0);
}

#[test]
fn free_pair_period_matches() {
    let dir = tempfile::tempdir().unwrap();
    let period = 8.0 * std::f64::consts::PI.powi(2) * 0.25;
    let cfg = format!(
        "[geometry]\nkind = \"none\"\n[vorticity]\nshape = \"pair\"\nradius = 0.5\n[euler]\ndt = {}\nhorizon = {period}\nblob = 0.025\nevery = 20\n",
        period / 200.0
    );
    let out = run("euler", &cfg, dir.path(), &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let s = json(&dir.path().join("out/summary.json"));
    let measured = s["results"]["measured_period"].as_f64().unwrap();
    assert!((measured - period).abs() / period < 0.02);
    let traj = fs::read_to_string(dir.path().join("out/trajectory.csv")).unwrap();
    assert_eq!(traj.lines().next(), Some("t,x,y,w"));
}

#[test]
fn identical_runs_give_identical_csv() {
    let cfg = r#"
seed = 11

[geometry]
kind = "random"
count = 12
a = 0.01
d = 0.1

[vorticity]
shape = "bump"
center = [-0.6, 0.4]
radius = 0.3
"#;
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert!(run("reflect", cfg, a.path(), &[]).status.success());
    assert!(run("reflect", cfg, b.path(), &[]).status.success());
    for f in ["centers.csv", "dipoles.csv", "norms.csv", "contraction.csv"] {
        assert_eq!(fs::read(a.path().join("out").join(f)).unwrap(), fs::read(b.path().join("out").join(f)).unwrap(), "{f}");
    }
    let c = tempfile::tempdir().unwrap();
    assert!(run("reflect", cfg, c.path(), &["--seed", "12", "--threads", "1"]).status.success());
    assert_ne!(fs::read(a.path().join("out/centers.csv")).unwrap(), fs::read(c.path().join("out/centers.csv")).unwrap());
    assert_eq!(json(&c.path().join("out/summary.json"))["seed"], 12);
}

#[test]
fn experiment_name_must_match_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = format!("experiment = \"homog\"\n{LATTICE}");
    let out = run("reflect", &cfg, dir.path(), &[]);
    assert_eq!(out.status.code(), Some(2));
}
