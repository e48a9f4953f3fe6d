//! Acceptance criteria 1-11. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any criterion fails.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;
use std::process::Command;

use chopt::asymptotics::{run_optimal_control_sweep, run_adjoint_sweep, run_state_sweep, SweepMode, SweepPlan};
use chopt::cli::{parse_config_str, RunConfig};
use chopt::control::{optimize, sparsity_report, sparsity_threshold};
use chopt::mms::{run_mms, MmsConfig, MmsKind};
use chopt::rng::Lcg;
use chopt::sensitivity::{
    adjoint_consistency_study, duality_check, gradient_check, taylor_test, ConsistencySetup,
};
use chopt::state::{separation_report, ControlTrajectory};
use chopt::{Field, Grid};

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn config(text: &str) -> RunConfig {
    parse_config_str(text).expect("acceptance configuration")
}

fn random_control(rng: &mut Lcg, grid: &Grid, steps: usize, bound: f64) -> ControlTrajectory {
    ControlTrajectory {
        u: (0..steps)
            .map(|_| Field((0..grid.len()).map(|_| rng.uniform(-bound, bound)).collect()))
            .collect(),
    }
}

fn chopt(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_chopt"))
        .args(args)
        .output()
        .expect("run chopt")
}

fn column(csv: &str, name: &str) -> Vec<f64> {
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let idx = header.iter().position(|h| *h == name).unwrap();
    lines.map(|l| l.split(',').nth(idx).unwrap().parse().unwrap()).collect()
}

const CONSERVATION: &str = "
nx = 129
final_time = 1
nt = 256
alpha = 0.1
tau = 1
gamma = 0.5
potential = regular
phi0_mean = 0.1
phi0_amplitude = 0.4
nu0_amplitude = 0.3
mu0 = zero
control = random
control_amplitude = 1
";

fn conservation(dir: &Path) -> Outcome {
    let cfg_path = dir.join("conservation.cfg");
    let mut worst = [0.0_f64; 2];
    for (i, alpha) in ["0.1", "0"].iter().enumerate() {
        fs::write(&cfg_path, CONSERVATION.replace("alpha = 0.1", &format!("alpha = {alpha}"))).unwrap();
        let out = dir.join(format!("conservation_{i}"));
        let run = chopt(&["solve-state", "--config", cfg_path.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        if !run.status.success() {
            return Err(String::from_utf8_lossy(&run.stderr).into_owned());
        }
        let csv = fs::read_to_string(out.join("scalars.csv")).unwrap();
        let res = column(&csv, "mean_identity_residual");
        if res.len() != 257 {
            return Err(format!("{} rows in scalars.csv", res.len()));
        }
        worst[i] = res.iter().fold(0.0, |m, r| m.max(r.abs()));
        if *alpha == "0" {
            let mass = column(&csv, "mean_phi");
            worst[i] = worst[i].max(mass.iter().map(|m| (m - mass[0]).abs()).fold(0.0, f64::max));
        }
    }
    check(
        worst.iter().all(|&w| w <= 1e-11),
        format!("max residual alpha=0.1: {:.2e}, alpha=0 mass drift: {:.2e}", worst[0], worst[1]),
    )
}

fn stationarity() -> Outcome {
    let mut detail = Vec::new();
    let mut ok = true;
    for (pot, m) in [("regular", 0.3), ("log\nc1 = 2", -0.4)] {
        for alpha in [0.5, 0.0] {
            let cfg = config(&format!(
                "nx = 65\nfinal_time = 1\nnt = 256\nalpha = {alpha}\ntau = 1\ngamma = 1\npotential = {pot}\nphi0_mean = {m}\n"
            ));
            let system = cfg.system().unwrap();
            let traj = system.solve_state(&ControlTrajectory::zeros(&system.grid, &system.time)).unwrap();
            let mut dev: f64 = 0.0;
            for n in 0..traj.levels() {
                for i in 0..system.grid.len() {
                    dev = dev
                        .max((traj.phi[n][i] - system.initial.phi0[i]).abs())
                        .max((traj.mu[n][i] - system.initial.mu0[i]).abs());
                }
            }
            ok &= dev <= 1e-10;
            detail.push(format!("{} alpha={alpha}: {dev:.1e}", pot.split('\n').next().unwrap()));
        }
    }
    check(ok, detail.join(", "))
}

fn mms_orders() -> Outcome {
    let cfg = MmsConfig::default();
    let space = run_mms(&cfg, MmsKind::Space).map_err(|e| e.to_string())?;
    let time = run_mms(&cfg, MmsKind::Time).map_err(|e| e.to_string())?;
    let s: Vec<f64> = space.iter().filter_map(|r| r.order).collect();
    let t: Vec<f64> = time.iter().filter_map(|r| r.order).collect();
    check(
        s.len() == 2 && t.len() == 2 && s.iter().all(|&o| o >= 1.8) && t.iter().all(|&o| o >= 0.9),
        format!("space orders {s:.3?}, time orders {t:.3?}"),
    )
}

const SMOOTH: &str = "
nx = 65
final_time = 1
nt = 128
alpha = 0.1
tau = 1
gamma = 0.5
phi0_mean = 0.1
phi0_amplitude = 0.4
control = cosine
control_amplitude = 0.5
";

fn taylor() -> Outcome {
    let mut slopes = Vec::new();
    for pot in ["potential = regular", "potential = log\nc1 = 1.5"] {
        let cfg = config(&format!("{SMOOTH}{pot}\n"));
        let system = cfg.system().unwrap();
        let u = cfg.control_trajectory();
        // smooth direction: rough ones are damped to round-off level at small eps
        let h = ControlTrajectory::sample(&system.grid, &system.time, |x, _, t| (PI * x).cos() * (1.0 + t));
        let rows = taylor_test(&system, &u, &h, &[1e-2, 1e-3, 1e-4]).map_err(|e| e.to_string())?;
        slopes.extend(rows.iter().filter_map(|r| r.slope));
    }
    check(
        slopes.len() == 4 && slopes.iter().all(|s| (s - 2.0).abs() <= 0.1),
        format!("slopes {slopes:.3?}"),
    )
}

fn duality() -> Outcome {
    let cfg = config(&format!("{SMOOTH}potential = regular\n"));
    let spec = cfg.problem().unwrap();
    let system = &spec.system;
    let u = cfg.control_trajectory();
    let traj = system.solve_state(&u).unwrap();
    let mut rng = Lcg::new(42);
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let h = random_control(&mut rng, &system.grid, system.time.steps(), 1.0);
        let s = random_control(&mut rng, &system.grid, system.time.steps(), 1.0);
        worst = worst.max(duality_check(system, &traj, &h, &s.u).unwrap().rel_error);
    }
    let h = random_control(&mut rng, &system.grid, system.time.steps(), 1.0);
    let rows = gradient_check(system, &spec.cost, &u, &h, &[1e-2, 1e-3, 1e-4, 1e-5, 1e-6]).unwrap();
    let best = rows.iter().map(|r| r.rel_error).fold(f64::INFINITY, f64::min);
    check(
        worst <= 1e-9 && best <= 1e-6,
        format!("pairing max rel {worst:.1e}, gradient best rel {best:.1e}"),
    )
}

fn consistency() -> Outcome {
    let rows = adjoint_consistency_study(&ConsistencySetup::default(), 3).map_err(|e| e.to_string())?;
    let ratios: Vec<f64> = rows.windows(2).map(|w| w[0].total / w[1].total).collect();
    check(ratios.iter().all(|&r| r >= 1.8), format!("ratios {ratios:.3?}"))
}

const REACHABLE: &str = "
nx = 65
final_time = 1
nt = 128
alpha = 0.1
tau = 1
gamma = 0.5
potential = regular
phi0_mean = 0.1
phi0_amplitude = 0.3
target = reachable
reachable_amplitude = 0.5
b1 = 1
b2 = 1
b3 = 5e-5
kappa = 0
u_min = -2
u_max = 2
";

fn optimizer() -> Outcome {
    let spec = config(REACHABLE).problem().unwrap();
    let res = optimize(&spec).map_err(|e| e.to_string())?;
    let initial = res.log[0].cost_total;
    let monotone = res.log.windows(2).all(|w| w[1].cost_total <= w[0].cost_total + 1e-12);
    check(
        res.converged && res.cost.total <= 1e-2 * initial && res.stationarity <= res.tolerance && monotone,
        format!(
            "cost {:.3e} -> {:.3e}, stationarity {:.2e} <= {:.2e} after {} iterations, monotone {monotone}",
            initial,
            res.cost.total,
            res.stationarity,
            res.tolerance,
            res.log.len() - 1
        ),
    )
}

const SPARSE: &str = "
nx = 65
final_time = 1
nt = 128
alpha = 0.1
tau = 1
gamma = 0.5
potential = regular
phi0_amplitude = 0.3
target = cosine
target_amplitude = -0.4
b1 = 1
b2 = 1
b3 = 1e-2
u_min = -1
u_max = 1
";

fn sparsity() -> Outcome {
    let spec = config(SPARSE).problem().unwrap();
    let kappa_hat = sparsity_threshold(&spec).unwrap();
    let mut reports = Vec::new();
    for factor in [1.1, 0.3] {
        let mut p = spec.clone();
        p.cost.kappa = factor * kappa_hat;
        let res = optimize(&p).map_err(|e| e.to_string())?;
        reports.push((sparsity_report(&p, &res), res.converged));
    }
    let (full, c_full) = reports[0];
    let (part, c_part) = reports[1];
    check(
        c_full
            && c_part
            && full.zero_fraction == 1.0
            && full.iff_violations == Some(0)
            && part.zero_fraction > 0.0
            && part.zero_fraction < 1.0
            && part.iff_violations == Some(0),
        format!(
            "kappa_hat {kappa_hat:.3e}; 1.1x: zero fraction {}, violations {:?}; 0.3x: zero fraction {:.3}, violations {:?}",
            full.zero_fraction, full.iff_violations, part.zero_fraction, part.iff_violations
        ),
    )
}

fn separation() -> Outcome {
    let cfg = config(
        "nx = 129\nfinal_time = 1\nnt = 256\nalpha = 0.1\ntau = 1\ngamma = 0.5\npotential = log\nc1 = 1.5\nphi0_mean = 0.2\nphi0_amplitude = 0.6\n",
    );
    let system = cfg.system().unwrap();
    let (grid, time) = (&system.grid, &system.time);
    let mut controls = vec![
        ControlTrajectory::constant(grid, time, 1.0),
        ControlTrajectory::constant(grid, time, -1.0),
    ];
    let mut rng = Lcg::new(42);
    for _ in 0..4 {
        controls.push(random_control(&mut rng, grid, time.steps(), 1.0));
    }
    let mut margin = f64::INFINITY;
    for u in &controls {
        let traj = system.solve_state(u).map_err(|e| e.to_string())?;
        margin = margin.min(separation_report(&traj, &system.potential).margin);
    }
    let mut alpha0 = system.clone();
    alpha0.params.alpha = 0.0;
    let traj = alpha0.solve_state(&controls[2]).map_err(|e| e.to_string())?;
    margin = margin.min(separation_report(&traj, &system.potential).margin);
    check(margin >= 1e-3, format!("{} runs, smallest margin {margin:.3e}", controls.len() + 1))
}

const SWEEP: &str = "
nx = 65
final_time = 1
nt = 128
alpha = 1
tau = 1
gamma = 0.5
potential = regular
phi0_amplitude = 0.2
mu0 = equilibrium
control = cosine
control_amplitude = 0.5
b3 = 1e-2
";

fn alpha_sweep() -> Outcome {
    let cfg = config(SWEEP);
    let spec = cfg.problem().unwrap();
    let u = cfg.control_trajectory();
    let state = run_state_sweep(&SweepPlan::with_mode(SweepMode::State), &spec, &u).map_err(|e| e.to_string())?;
    let adjoint =
        run_adjoint_sweep(&SweepPlan::with_mode(SweepMode::Adjoint), &spec, &u).map_err(|e| e.to_string())?;
    let control = run_optimal_control_sweep(&SweepPlan::with_mode(SweepMode::OptimalControl), &spec)
        .map_err(|e| e.to_string())?;
    let decreasing = |v: Vec<f64>| v.windows(2).all(|w| w[1] < w[0]);
    let phi = decreasing(state.rows.iter().map(|r| r.err_phi.unwrap()).collect());
    let inertia = decreasing(state.rows.iter().map(|r| r.inertia.unwrap()).collect());
    let pq = decreasing(adjoint.rows.iter().map(|r| r.err_pq.unwrap()).collect());
    let gaps: Vec<f64> = control.rows.iter().map(|r| r.err_u.unwrap()).collect();
    let bounded = gaps.iter().all(|g| g.is_finite());
    check(
        phi && inertia && pq && bounded,
        format!(
            "phi decreasing {phi}, alpha*velocity decreasing {inertia}, p+tau q decreasing {pq}, control gaps {gaps:.3?}"
        ),
    )
}

fn determinism(dir: &Path) -> Outcome {
    let cfg = dir.join("determinism.cfg");
    fs::write(&cfg, format!("{REACHABLE}max_iters = 40\ncontrol = random\n")).unwrap();
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let mut files = Vec::new();
        for sub in ["solve-state", "check-duality", "optimize"] {
            let out = dir.join(format!("det_{run}_{sub}"));
            let status = chopt(&[sub, "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", "7"]);
            if !status.status.success() {
                return Err(String::from_utf8_lossy(&status.stderr).into_owned());
            }
            let mut names: Vec<_> = fs::read_dir(&out)
                .unwrap()
                .map(|e| e.unwrap().path())
                .filter(|p| p.extension().is_some_and(|e| e == "csv"))
                .collect();
            names.sort();
            for p in names {
                files.push((format!("{sub}/{}", p.file_name().unwrap().to_string_lossy()), fs::read(&p).unwrap()));
            }
        }
        outputs.push(files);
    }
    check(
        outputs[0] == outputs[1] && !outputs[0].is_empty(),
        format!("{} CSV files compared byte for byte", outputs[0].len()),
    )
}

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("conservation", Box::new(|| conservation(dir.path()))),
        ("stationarity preservation", Box::new(stationarity)),
        ("MMS orders", Box::new(mms_orders)),
        ("Taylor test", Box::new(taylor)),
        ("discrete duality", Box::new(duality)),
        ("adjoint consistency", Box::new(consistency)),
        ("optimizer", Box::new(optimizer)),
        ("sparsity", Box::new(sparsity)),
        ("separation", Box::new(separation)),
        ("alpha sweep", Box::new(alpha_sweep)),
        ("determinism", Box::new(|| determinism(dir.path()))),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        match run() {
            Ok(detail) => println!("criterion {:>2} PASS {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} FAIL {name}: {detail}", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
