use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const MINIMAL: &str = "nx = 33\nfinal_time = 0.5\nnt = 32\nalpha = 0.2\ntau = 1\ngamma = 1\npotential = regular\n";

fn chopt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_chopt"))
        .args(args)
        .output()
        .expect("run chopt")
}

fn run_with(dir: &Path, sub: &str, config: &str) -> Output {
    let cfg = dir.join("run.cfg");
    fs::write(&cfg, config).unwrap();
    let out = dir.join(sub);
    chopt(&[sub, "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()])
}

fn column(path: &Path, name: &str) -> Vec<f64> {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let idx = lines.next().unwrap().split(',').position(|h| h == name).unwrap();
    lines.map(|l| l.split(',').nth(idx).unwrap().parse().unwrap()).collect()
}

#[test]
fn unknown_subcommand_prints_usage() {
    let out = chopt(&["integrate", "--config", "x"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn bad_value_gives_one_line_reason() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_with(dir.path(), "solve-state", &MINIMAL.replace("alpha = 0.2", "alpha = -0.1"));
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("failure kind=BadValue subcommand=solve-state"), "{err}");
    assert!(err.contains("alpha") && err.contains("must be in [0,1]"));
}

#[test]
fn missing_config_file_fails() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("none.cfg");
    let out = chopt(&["solve-state", "--config", missing.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("kind=Io"));
}

#[test]
fn stationary_solve_state() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_with(dir.path(), "solve-state", &format!("{MINIMAL}phi0_mean = -0.2\n"));
    assert!(out.status.success());
    let res = column(&dir.path().join("solve-state/scalars.csv"), "mean_identity_residual");
    assert_eq!(res.len(), 33);
    assert!(res.iter().all(|r| r.abs() <= 1e-11));
    assert!(dir.path().join("solve-state/fields_0.csv").exists());
    assert!(dir.path().join("solve-state/fields_32.csv").exists());
}

#[test]
fn run_log_has_manifest_and_echo() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, MINIMAL).unwrap();
    let out = dir.path().join("o");
    let status = chopt(&["check-duality", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", "9"]);
    assert!(status.status.success());
    let log = fs::read_to_string(out.join("run.log")).unwrap();
    let first = log.lines().next().unwrap();
    assert!(first.starts_with(&format!("chopt {} subcommand=check-duality status=ok elapsed_s=", env!("CARGO_PKG_VERSION"))));
    assert!(log.contains("seed = 9\n"));
    assert!(log.contains("b3 = 1e-2\n"));
    let rel = column(&out.join("duality.csv"), "rel_error");
    assert_eq!(rel.len(), 10);
    assert!(rel.iter().all(|&r| r <= 1e-9));
}

#[test]
fn gradient_check_default() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_with(dir.path(), "check-gradient", &format!("{MINIMAL}phi0_amplitude = 0.3\ncontrol = cosine\n"));
    assert!(out.status.success());
    let rel = column(&dir.path().join("check-gradient/gradcheck.csv"), "rel_error");
    assert!(rel.iter().cloned().fold(f64::INFINITY, f64::min) <= 1e-6);
    let slope = column(&dir.path().join("check-gradient/taylor.csv"), "slope");
    assert!(slope[0].is_nan());
    assert!((slope[1] - 2.0).abs() < 0.1);
}

#[test]
fn sweep_and_sparsity_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let base = format!("{MINIMAL}phi0_amplitude = 0.2\ncontrol = cosine\nsweep_mode = adjoint\n");
    assert!(run_with(dir.path(), "alpha-sweep", &base).status.success());
    let text = fs::read_to_string(dir.path().join("alpha-sweep/sweep.csv")).unwrap();
    assert_eq!(
        text.lines().next().unwrap(),
        "alpha,err_phi,err_mu,err_w,err_p,err_q,err_r,err_u,ratio_prev"
    );
    assert_eq!(text.lines().count(), 5);

    let log = base.replace("potential = regular", "potential = log");
    let out = run_with(dir.path(), "alpha-sweep", &log);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("kind=RejectedConfiguration"));

    assert!(run_with(dir.path(), "sparsity-sweep", &format!("{base}kappa_factors = 1.1\n")).status.success());
    let zero = column(&dir.path().join("sparsity-sweep/sparsity.csv"), "zero_fraction");
    assert_eq!(zero, vec![1.0]);
}

#[test]
fn optimize_writes_log_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = format!("{MINIMAL}phi0_amplitude = 0.3\ntarget = reachable\nb3 = 1e-3\nmax_iters = 30\n");
    assert!(run_with(dir.path(), "optimize", &cfg).status.success());
    let cost = column(&dir.path().join("optimize/optlog.csv"), "cost_total");
    assert!(cost.windows(2).all(|w| w[1] <= w[0] + 1e-12));
    assert!(dir.path().join("optimize/target_control.csv").exists());
    assert!(dir.path().join("optimize/summary.csv").exists());
}
