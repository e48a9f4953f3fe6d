//! Configuration files and the subcommand runner behind the `chopt` binary.
//!
//! A configuration is a plain-text file with one `key = value` pair per
//! line; `#` starts a comment. Unknown keys are rejected and every effective
//! value, defaults included, is echoed to `run.log`.
//!
//! ```text
//! chopt <subcommand> --config <path> [--out <dir>] [--seed <u64>]
//! ```

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser};
use thiserror::Error as ThisError;

use crate::asymptotics::{run_sweep, SweepMode, SweepPlan};
use crate::control::{optimize, sparsity_report, sparsity_threshold, OptimizerConfig, ProblemSpec};
use crate::grid::{Field, Grid};
use crate::mms::{run_mms, MmsConfig, MmsKind};
use crate::potentials::{Component, Potential};
use crate::rng::Lcg;
use crate::sensitivity::{duality_check, gradient_check, taylor_test, CostData};
use crate::state::{
    separation_report, Bounds, ControlTrajectory, InitialData, NewtonOptions, StateParams, StateSystem,
    TimeGrid,
};
use crate::Error;

#[derive(Debug, ThisError)]
pub enum CliError {
    #[error("missing key `{0}`")]
    MissingKey(String),

    #[error("bad value for `{key}`: {reason}")]
    BadValue { key: String, reason: String },

    #[error("unknown key `{0}`")]
    UnknownKey(String),

    #[error("{path}: {message}")]
    Io { path: String, message: String },

    #[error("{subcommand}: {source}")]
    Solver {
        subcommand: &'static str,
        #[source]
        source: Error,
    },
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::MissingKey(_) => "MissingKey",
            CliError::BadValue { .. } => "BadValue",
            CliError::UnknownKey(_) => "UnknownKey",
            CliError::Io { .. } => "Io",
            CliError::Solver { source, .. } => source.kind(),
        }
    }

    fn bad(key: &str, reason: impl Into<String>) -> Self {
        CliError::BadValue {
            key: key.to_string(),
            reason: reason.into(),
        }
    }

    fn io(path: &Path, err: impl std::fmt::Display) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            message: err.to_string(),
        }
    }
}

/// Parameter errors from the library become `BadValue` for the named key.
fn config_error(err: Error) -> CliError {
    match err {
        Error::InvalidParameter { name, reason } => CliError::bad(name, reason),
        other => CliError::Solver {
            subcommand: "config",
            source: other,
        },
    }
}

/// Recognized keys and their defaults; `None` marks a required key.
const KEYS: &[(&str, Option<&str>)] = &[
    ("nx", None),
    ("ny", Some("1")),
    ("lx", Some("1")),
    ("ly", Some("1")),
    ("final_time", None),
    ("nt", None),
    ("alpha", None),
    ("tau", None),
    ("gamma", None),
    ("potential", None),
    ("c1", Some("2")),
    ("safeguard", Some("1e-9")),
    ("phi0_mean", Some("0")),
    ("phi0_amplitude", Some("0")),
    ("phi0_mode", Some("1")),
    ("mu0", Some("equilibrium")),
    ("nu0_amplitude", Some("0")),
    ("w0", Some("0")),
    ("b1", Some("1")),
    ("b2", Some("1")),
    ("b3", Some("1e-2")),
    ("kappa", Some("0")),
    ("target", Some("cosine")),
    ("target_mean", Some("0")),
    ("target_amplitude", Some("0.3")),
    ("target_mode", Some("1")),
    ("reachable_amplitude", Some("0.5")),
    ("u_min", Some("-1")),
    ("u_max", Some("1")),
    ("control", Some("zero")),
    ("control_amplitude", Some("0.5")),
    ("max_iters", Some("500")),
    ("stat_tol", Some("1e-6")),
    ("sigma0", Some("auto")),
    ("armijo", Some("1e-4")),
    ("backtrack", Some("0.5")),
    ("sparse_band", Some("auto")),
    ("newton_tol", Some("1e-11")),
    ("newton_max_iter", Some("30")),
    ("epsilons", Some("1e-2,1e-3,1e-4,1e-5,1e-6")),
    ("n_directions", Some("10")),
    ("seed", Some("42")),
    ("alphas", Some("1,0.1,0.01,0.001")),
    ("sweep_mode", Some("state")),
    ("kappa_factors", Some("0.3,1.1")),
    ("save_stride", Some("0")),
    ("mms_levels", Some("3")),
    ("mms_base_nodes", Some("17")),
    ("mms_space_steps", Some("16")),
    ("mms_base_steps", Some("128")),
    ("mms_fine_nodes", Some("1025")),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mu0Mode {
    /// `mu0 = f'(phi0) - L phi0`.
    Equilibrium,
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetKind {
    Constant,
    Cosine,
    /// `phi_Q` is the state of the reference control
    /// `u_dagger = reachable_amplitude * cos(pi x / lx) sin(pi t / T)`.
    Reachable,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetSpec {
    pub kind: TargetKind,
    pub mean: f64,
    pub amplitude: f64,
    pub mode: u32,
    pub reachable_amplitude: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControlKind {
    Zero,
    Cosine,
    Random,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub grid: Grid,
    pub time: TimeGrid,
    pub params: StateParams,
    pub potential: Potential,
    pub newton: NewtonOptions,
    pub phi0_mean: f64,
    pub phi0_amplitude: f64,
    pub phi0_mode: u32,
    pub mu0: Mu0Mode,
    pub nu0_amplitude: f64,
    pub w0: f64,
    pub b1: f64,
    pub b2: f64,
    pub b3: f64,
    pub kappa: f64,
    pub target: TargetSpec,
    pub u_min: f64,
    pub u_max: f64,
    pub control: ControlKind,
    pub control_amplitude: f64,
    pub optimizer: OptimizerConfig,
    pub epsilons: Vec<f64>,
    pub n_directions: usize,
    pub seed: u64,
    pub sweep: SweepPlan,
    pub kappa_factors: Vec<f64>,
    pub save_stride: usize,
    pub mms: MmsConfig,
    echo: Vec<(&'static str, String)>,
}

struct Values(Vec<(&'static str, String)>);

impl Values {
    fn raw(&self, key: &str) -> &str {
        &self.0.iter().find(|(k, _)| *k == key).expect("key table").1
    }

    fn f64(&self, key: &str) -> Result<f64, CliError> {
        let v: f64 = self
            .raw(key)
            .parse()
            .map_err(|_| CliError::bad(key, "not a number"))?;
        if !v.is_finite() {
            return Err(CliError::bad(key, "must be finite"));
        }
        Ok(v)
    }

    fn opt_f64(&self, key: &str) -> Result<Option<f64>, CliError> {
        if self.raw(key) == "auto" {
            Ok(None)
        } else {
            self.f64(key).map(Some)
        }
    }

    fn usize(&self, key: &str) -> Result<usize, CliError> {
        self.raw(key)
            .parse()
            .map_err(|_| CliError::bad(key, "not a nonnegative integer"))
    }

    fn list(&self, key: &str) -> Result<Vec<f64>, CliError> {
        let items: Result<Vec<f64>, _> = self.raw(key).split(',').map(|s| s.trim().parse::<f64>()).collect();
        let items = items.map_err(|_| CliError::bad(key, "not a comma-separated list of numbers"))?;
        if items.iter().any(|v| !v.is_finite()) {
            return Err(CliError::bad(key, "entries must be finite"));
        }
        Ok(items)
    }

    fn choice<T: Copy>(&self, key: &str, options: &[(&str, T)]) -> Result<T, CliError> {
        let raw = self.raw(key);
        options
            .iter()
            .find(|(name, _)| *name == raw)
            .map(|(_, v)| *v)
            .ok_or_else(|| {
                let names: Vec<&str> = options.iter().map(|(n, _)| *n).collect();
                CliError::bad(key, format!("must be one of {}", names.join(", ")))
            })
    }
}

pub fn parse_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_config_str(&text)
}

pub fn parse_config_str(text: &str) -> Result<RunConfig, CliError> {
    let mut given: Vec<(&'static str, String)> = Vec::new();
    for line in text.lines() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| CliError::bad(line, "expected `key = value`"))?;
        let (key, value) = (key.trim(), value.trim());
        let Some(&(name, _)) = KEYS.iter().find(|(k, _)| *k == key) else {
            return Err(CliError::UnknownKey(key.to_string()));
        };
        if given.iter().any(|(k, _)| *k == name) {
            return Err(CliError::bad(name, "given more than once"));
        }
        given.push((name, value.to_string()));
    }
    let mut values = Vec::with_capacity(KEYS.len());
    for &(key, default) in KEYS {
        let value = match given.iter().find(|(k, _)| *k == key) {
            Some((_, v)) => v.clone(),
            None => default
                .ok_or_else(|| CliError::MissingKey(key.to_string()))?
                .to_string(),
        };
        values.push((key, value));
    }
    build_config(Values(values))
}

fn build_config(v: Values) -> Result<RunConfig, CliError> {
    let nx = v.usize("nx")?;
    let ny = v.usize("ny")?;
    let (lx, ly) = (v.f64("lx")?, v.f64("ly")?);
    if ny == 0 {
        return Err(CliError::bad("ny", "must be at least 1"));
    }
    let grid = if ny == 1 {
        Grid::interval(lx, nx)
    } else {
        Grid::rectangle(lx, ly, nx, ny)
    }
    .map_err(|e| match e {
        Error::InvalidParameter { reason, .. } => CliError::bad("nx", reason),
        other => config_error(other),
    })?;
    let time = TimeGrid::new(v.f64("final_time")?, v.usize("nt")?).map_err(config_error)?;
    let params = StateParams {
        alpha: v.f64("alpha")?,
        tau: v.f64("tau")?,
        gamma: v.f64("gamma")?,
    };
    params.validate().map_err(config_error)?;
    let potential = match v.choice("potential", &[("regular", false), ("log", true)])? {
        false => Potential::regular(),
        true => Potential::logarithmic_with_safeguard(v.f64("c1")?, v.f64("safeguard")?).map_err(config_error)?,
    };
    let newton = NewtonOptions {
        tol: v.f64("newton_tol")?,
        max_iter: v.usize("newton_max_iter")?,
        ..NewtonOptions::default()
    };
    if !(newton.tol > 0.0) {
        return Err(CliError::bad("newton_tol", "must be positive"));
    }
    if newton.max_iter == 0 {
        return Err(CliError::bad("newton_max_iter", "must be positive"));
    }

    let (b1, b2, b3, kappa) = (v.f64("b1")?, v.f64("b2")?, v.f64("b3")?, v.f64("kappa")?);
    for (key, value) in [("b1", b1), ("b2", b2), ("kappa", kappa)] {
        if value < 0.0 {
            return Err(CliError::bad(key, "must be nonnegative"));
        }
    }
    if !(b3 > 0.0) {
        return Err(CliError::bad("b3", "must be positive"));
    }
    let (u_min, u_max) = (v.f64("u_min")?, v.f64("u_max")?);
    if u_min > u_max {
        return Err(CliError::bad("u_min", "must not exceed u_max"));
    }
    let optimizer = OptimizerConfig {
        max_iters: v.usize("max_iters")?,
        sigma0: v.opt_f64("sigma0")?,
        backtrack: v.f64("backtrack")?,
        armijo: v.f64("armijo")?,
        stat_tol: v.f64("stat_tol")?,
        sparse_band: v.opt_f64("sparse_band")?,
    };
    optimizer.validate().map_err(config_error)?;

    let epsilons = v.list("epsilons")?;
    if epsilons.iter().any(|&e| !(e > 0.0)) {
        return Err(CliError::bad("epsilons", "entries must be positive"));
    }
    let sweep_mode = v.choice(
        "sweep_mode",
        &[
            ("state", SweepMode::State),
            ("adjoint", SweepMode::Adjoint),
            ("optimal-control", SweepMode::OptimalControl),
        ],
    )?;
    let sweep = SweepPlan::new(v.list("alphas")?, sweep_mode).map_err(config_error)?;
    let kappa_factors = v.list("kappa_factors")?;
    if kappa_factors.iter().any(|&f| f < 0.0) {
        return Err(CliError::bad("kappa_factors", "entries must be nonnegative"));
    }
    let seed: u64 = v.raw("seed").parse().map_err(|_| CliError::bad("seed", "not a 64-bit unsigned integer"))?;

    let mms = MmsConfig {
        alpha: params.alpha,
        tau: params.tau,
        gamma: params.gamma,
        length: lx,
        final_time: time.final_time(),
        mean: v.f64("phi0_mean")?,
        potential,
        base_nodes: v.usize("mms_base_nodes")?,
        space_steps: v.usize("mms_space_steps")?,
        base_steps: v.usize("mms_base_steps")?,
        fine_nodes: v.usize("mms_fine_nodes")?,
        levels: v.usize("mms_levels")?,
    };
    for (key, value, min) in [
        ("mms_levels", mms.levels, 1),
        ("mms_base_nodes", mms.base_nodes, 3),
        ("mms_fine_nodes", mms.fine_nodes, 3),
        ("mms_space_steps", mms.space_steps, 2),
        ("mms_base_steps", mms.base_steps, 2),
    ] {
        if value < min {
            return Err(CliError::bad(key, format!("must be at least {min}")));
        }
    }

    let n_directions = v.usize("n_directions")?;
    if n_directions == 0 {
        return Err(CliError::bad("n_directions", "must be positive"));
    }
    let phi0_mode = v.usize("phi0_mode")? as u32;
    let target_mode = v.usize("target_mode")? as u32;

    Ok(RunConfig {
        grid,
        time,
        params,
        potential,
        newton,
        phi0_mean: v.f64("phi0_mean")?,
        phi0_amplitude: v.f64("phi0_amplitude")?,
        phi0_mode,
        mu0: v.choice("mu0", &[("equilibrium", Mu0Mode::Equilibrium), ("zero", Mu0Mode::Zero)])?,
        nu0_amplitude: v.f64("nu0_amplitude")?,
        w0: v.f64("w0")?,
        b1,
        b2,
        b3,
        kappa,
        target: TargetSpec {
            kind: v.choice(
                "target",
                &[
                    ("constant", TargetKind::Constant),
                    ("cosine", TargetKind::Cosine),
                    ("reachable", TargetKind::Reachable),
                ],
            )?,
            mean: v.f64("target_mean")?,
            amplitude: v.f64("target_amplitude")?,
            mode: target_mode,
            reachable_amplitude: v.f64("reachable_amplitude")?,
        },
        u_min,
        u_max,
        control: v.choice(
            "control",
            &[
                ("zero", ControlKind::Zero),
                ("cosine", ControlKind::Cosine),
                ("random", ControlKind::Random),
            ],
        )?,
        control_amplitude: v.f64("control_amplitude")?,
        optimizer,
        epsilons,
        n_directions,
        seed,
        sweep,
        kappa_factors,
        save_stride: v.usize("save_stride")?,
        mms,
        echo: v.0,
    })
}

impl RunConfig {
    /// Every effective `key = value`, in table order.
    pub fn echo(&self) -> Vec<String> {
        self.echo.iter().map(|(k, v)| format!("{k} = {v}")).collect()
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        if let Some(entry) = self.echo.iter_mut().find(|(k, _)| *k == "seed") {
            entry.1 = seed.to_string();
        }
    }

    /// `cos(m pi x / lx)`, times `cos(m pi y / ly)` in two dimensions.
    fn profile(&self, mode: u32) -> Field {
        let ext = self.grid.extents().to_vec();
        let two_d = self.grid.dim() == 2;
        let m = mode as f64;
        self.grid.sample(|x, y| {
            let cx = (m * std::f64::consts::PI * x / ext[0]).cos();
            if two_d {
                cx * (m * std::f64::consts::PI * y / ext[1]).cos()
            } else {
                cx
            }
        })
    }

    pub fn initial_data(&self) -> Result<InitialData, CliError> {
        let shape = self.profile(self.phi0_mode);
        let phi0 = shape.map(|c| self.phi0_mean + self.phi0_amplitude * c);
        let mu0 = match self.mu0 {
            Mu0Mode::Zero => Field::zeros(self.grid.len()),
            Mu0Mode::Equilibrium => {
                let lap = self.grid.laplacian_apply(&phi0).map_err(config_error)?;
                let mut out = Vec::with_capacity(phi0.len());
                for (p, l) in phi0.iter().zip(lap.iter()) {
                    let fp = self
                        .potential
                        .eval(Component::Prime, *p)
                        .map_err(|_| CliError::bad("phi0_amplitude", "initial phase field leaves (-1, 1)"))?;
                    out.push(fp - l);
                }
                Field(out)
            }
        };
        Ok(InitialData {
            mu0,
            nu0: shape.scaled(self.nu0_amplitude),
            phi0,
            w0: self.grid.constant(self.w0),
        })
    }

    pub fn system(&self) -> Result<StateSystem, CliError> {
        Ok(StateSystem::new(
            self.grid.clone(),
            self.time,
            self.params,
            self.potential,
            self.initial_data()?,
        )
        .map_err(config_error)?
        .with_newton(self.newton))
    }

    fn space_time_cosine(&self, amplitude: f64) -> ControlTrajectory {
        let shape = self.profile(1);
        let t_final = self.time.final_time();
        ControlTrajectory {
            u: (1..=self.time.steps())
                .map(|n| {
                    let s = (std::f64::consts::PI * self.time.t(n) / t_final).sin();
                    shape.map(|c| (amplitude * c * s).clamp(self.u_min, self.u_max))
                })
                .collect(),
        }
    }

    /// `cos(pi x / lx) (1 + t / T)`, unclamped.
    pub fn space_time_profile(&self) -> ControlTrajectory {
        let shape = self.profile(1);
        let t_final = self.time.final_time();
        ControlTrajectory {
            u: (1..=self.time.steps())
                .map(|n| shape.scaled(1.0 + self.time.t(n) / t_final))
                .collect(),
        }
    }

    /// Reference control of the reachable target.
    pub fn reference_control(&self) -> ControlTrajectory {
        self.space_time_cosine(self.target.reachable_amplitude)
    }

    /// The fixed control used by state, gradient and sweep runs.
    pub fn control_trajectory(&self) -> ControlTrajectory {
        match self.control {
            ControlKind::Zero => ControlTrajectory::zeros(&self.grid, &self.time),
            ControlKind::Cosine => self.space_time_cosine(self.control_amplitude),
            ControlKind::Random => {
                let lo = self.u_min.max(-self.control_amplitude.abs());
                let hi = self.u_max.min(self.control_amplitude.abs()).max(lo);
                random_trajectory(&mut Lcg::new(self.seed), &self.grid, &self.time, lo, hi)
            }
        }
    }

    pub fn problem(&self) -> Result<ProblemSpec, CliError> {
        let system = self.system()?;
        let nt = self.time.steps();
        let (phi_q, phi_omega) = match self.target.kind {
            TargetKind::Constant => {
                let f = self.grid.constant(self.target.mean);
                (vec![f.clone(); nt + 1], f)
            }
            TargetKind::Cosine => {
                let f = self
                    .profile(self.target.mode)
                    .map(|c| self.target.mean + self.target.amplitude * c);
                (vec![f.clone(); nt + 1], f)
            }
            TargetKind::Reachable => {
                let traj = system
                    .solve_state(&self.reference_control())
                    .map_err(|e| CliError::Solver {
                        subcommand: "target",
                        source: e,
                    })?;
                let last = traj.phi[nt].clone();
                (traj.phi, last)
            }
        };
        Ok(ProblemSpec {
            system,
            cost: CostData {
                b1: self.b1,
                b2: self.b2,
                b3: self.b3,
                kappa: self.kappa,
                phi_q,
                phi_omega,
            },
            bounds: Bounds::uniform(&self.grid, self.u_min, self.u_max).map_err(config_error)?,
            optimizer: self.optimizer,
        })
    }
}

fn random_trajectory(rng: &mut Lcg, grid: &Grid, time: &TimeGrid, lo: f64, hi: f64) -> ControlTrajectory {
    ControlTrajectory {
        u: (0..time.steps())
            .map(|_| Field((0..grid.len()).map(|_| rng.uniform(lo, hi)).collect()))
            .collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subcommand {
    SolveState,
    CheckGradient,
    CheckDuality,
    MmsVerify,
    Optimize,
    AlphaSweep,
    SparsitySweep,
}

impl Subcommand {
    pub fn name(&self) -> &'static str {
        match self {
            Subcommand::SolveState => "solve-state",
            Subcommand::CheckGradient => "check-gradient",
            Subcommand::CheckDuality => "check-duality",
            Subcommand::MmsVerify => "mms-verify",
            Subcommand::Optimize => "optimize",
            Subcommand::AlphaSweep => "alpha-sweep",
            Subcommand::SparsitySweep => "sparsity-sweep",
        }
    }
}

fn num(v: f64) -> String {
    format!("{v:.16e}")
}

fn opt_num(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_string(), num)
}

struct Csv {
    path: PathBuf,
    writer: csv::Writer<fs::File>,
}

impl Csv {
    fn create(dir: &Path, name: &str, header: &[&str]) -> Result<Self, CliError> {
        let path = dir.join(name);
        let mut writer = csv::Writer::from_path(&path).map_err(|e| CliError::io(&path, e))?;
        writer.write_record(header).map_err(|e| CliError::io(&path, e))?;
        Ok(Self { path, writer })
    }

    fn row(&mut self, fields: &[String]) -> Result<(), CliError> {
        self.writer.write_record(fields).map_err(|e| CliError::io(&self.path, e))
    }

    fn finish(mut self) -> Result<(), CliError> {
        self.writer.flush().map_err(|e| CliError::io(&self.path, e))
    }
}

fn write_fields(
    dir: &Path,
    name: &str,
    grid: &Grid,
    columns: &[&str],
    data: &[&Field],
) -> Result<(), CliError> {
    let mut header = vec!["x"];
    if grid.dim() == 2 {
        header.push("y");
    }
    header.extend_from_slice(columns);
    let mut csv = Csv::create(dir, name, &header)?;
    for node in 0..grid.len() {
        let [x, y] = grid.coords(node);
        let mut row = vec![num(x)];
        if grid.dim() == 2 {
            row.push(num(y));
        }
        row.extend(data.iter().map(|f| num(f[node])));
        csv.row(&row)?;
    }
    csv.finish()
}

fn write_control(dir: &Path, name: &str, grid: &Grid, time: &TimeGrid, columns: &[(&str, &[Field])]) -> Result<(), CliError> {
    let mut header = vec!["t", "x"];
    if grid.dim() == 2 {
        header.push("y");
    }
    header.extend(columns.iter().map(|(c, _)| *c));
    let mut csv = Csv::create(dir, name, &header)?;
    for k in 0..time.steps() {
        for node in 0..grid.len() {
            let [x, y] = grid.coords(node);
            let mut row = vec![num(time.t(k + 1)), num(x)];
            if grid.dim() == 2 {
                row.push(num(y));
            }
            row.extend(columns.iter().map(|(_, f)| num(f[k][node])));
            csv.row(&row)?;
        }
    }
    csv.finish()
}

/// Runs one subcommand, writing its CSV files into `out`. Returns the
/// summary lines printed on success.
pub fn run(sub: Subcommand, cfg: &RunConfig, out: &Path) -> Result<Vec<String>, CliError> {
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let ctx = |source: Error| CliError::Solver {
        subcommand: sub.name(),
        source,
    };
    match sub {
        Subcommand::SolveState => solve_state(cfg, out, &ctx),
        Subcommand::CheckGradient => check_gradient(cfg, out, &ctx),
        Subcommand::CheckDuality => check_duality(cfg, out, &ctx),
        Subcommand::MmsVerify => mms_verify(cfg, out, &ctx),
        Subcommand::Optimize => run_optimize(cfg, out, &ctx),
        Subcommand::AlphaSweep => alpha_sweep(cfg, out, &ctx),
        Subcommand::SparsitySweep => sparsity_sweep(cfg, out, &ctx),
    }
}

type Ctx<'a> = dyn Fn(Error) -> CliError + 'a;

fn solve_state(cfg: &RunConfig, out: &Path, ctx: &Ctx) -> Result<Vec<String>, CliError> {
    let system = cfg.system()?;
    let u = cfg.control_trajectory();
    let traj = system.solve_state(&u).map_err(ctx)?;
    let grid = &system.grid;
    let residuals = traj.mean_identity_residuals(grid, system.time.dt(), &system.initial);
    let mut csv = Csv::create(
        out,
        "scalars.csv",
        &["t", "mean_mu", "mean_phi", "mean_w", "mean_identity_residual", "phi_min", "phi_max"],
    )?;
    for n in 0..traj.levels() {
        csv.row(&[
            num(system.time.t(n)),
            num(grid.mean_unchecked(&traj.mu[n])),
            num(grid.mean_unchecked(&traj.phi[n])),
            num(grid.mean_unchecked(&traj.w[n])),
            num(residuals[n]),
            num(traj.phi[n].min()),
            num(traj.phi[n].max()),
        ])?;
    }
    csv.finish()?;
    let nt = system.time.steps();
    let stride = if cfg.save_stride == 0 { nt } else { cfg.save_stride };
    for n in (0..=nt).filter(|n| n % stride == 0 || *n == nt) {
        write_fields(
            out,
            &format!("fields_{n}.csv"),
            grid,
            &["mu", "phi", "w"],
            &[&traj.mu[n], &traj.phi[n], &traj.w[n]],
        )?;
    }
    let sep = separation_report(&traj, &system.potential);
    let worst = residuals.iter().fold(0.0_f64, |m, r| m.max(r.abs()));
    Ok(vec![
        format!("max_mean_identity_residual = {worst:e}"),
        format!("phi_min = {:e}, phi_max = {:e}, margin = {:e}", sep.phi_min, sep.phi_max, sep.margin),
    ])
}

fn check_gradient(cfg: &RunConfig, out: &Path, ctx: &Ctx) -> Result<Vec<String>, CliError> {
    let spec = cfg.problem()?;
    let system = &spec.system;
    let u = cfg.control_trajectory();
    let h = random_trajectory(&mut Lcg::new(cfg.seed), &system.grid, &system.time, -1.0, 1.0);
    let rows = gradient_check(system, &spec.cost, &u, &h, &cfg.epsilons).map_err(ctx)?;
    let mut csv = Csv::create(out, "gradcheck.csv", &["epsilon", "fd_value", "adjoint_value", "rel_error"])?;
    for r in &rows {
        csv.row(&[num(r.epsilon), num(r.fd_value), num(r.adjoint_value), num(r.rel_error)])?;
    }
    csv.finish()?;
    // the Taylor test uses a smooth direction; rough ones are damped below
    // round-off at small epsilon
    let smooth = cfg.space_time_profile();
    let taylor = taylor_test(system, &u, &smooth, &cfg.epsilons).map_err(ctx)?;
    let mut csv = Csv::create(out, "taylor.csv", &["epsilon", "remainder", "slope"])?;
    for r in &taylor {
        csv.row(&[num(r.epsilon), num(r.remainder), opt_num(r.slope)])?;
    }
    csv.finish()?;
    let best = rows.iter().map(|r| r.rel_error).fold(f64::INFINITY, f64::min);
    Ok(vec![format!("min_rel_error = {best:e}")])
}

fn check_duality(cfg: &RunConfig, out: &Path, ctx: &Ctx) -> Result<Vec<String>, CliError> {
    let system = cfg.system()?;
    let traj = system.solve_state(&cfg.control_trajectory()).map_err(ctx)?;
    let mut rng = Lcg::new(cfg.seed);
    let mut csv = Csv::create(out, "duality.csv", &["direction", "linearized", "adjoint", "rel_error"])?;
    let mut worst: f64 = 0.0;
    for i in 0..cfg.n_directions {
        let h = random_trajectory(&mut rng, &system.grid, &system.time, -1.0, 1.0);
        let s = random_trajectory(&mut rng, &system.grid, &system.time, -1.0, 1.0);
        let row = duality_check(&system, &traj, &h, &s.u).map_err(ctx)?;
        worst = worst.max(row.rel_error);
        csv.row(&[i.to_string(), num(row.linearized), num(row.adjoint), num(row.rel_error)])?;
    }
    csv.finish()?;
    Ok(vec![format!("max_rel_error = {worst:e}")])
}

fn mms_verify(cfg: &RunConfig, out: &Path, ctx: &Ctx) -> Result<Vec<String>, CliError> {
    let mut csv = Csv::create(out, "mms.csv", &["study", "nodes", "steps", "error", "order"])?;
    let mut summary = Vec::new();
    for kind in [MmsKind::Space, MmsKind::Time] {
        let rows = run_mms(&cfg.mms, kind).map_err(ctx)?;
        for r in &rows {
            csv.row(&[
                kind.name().to_string(),
                r.nodes.to_string(),
                r.steps.to_string(),
                num(r.error),
                opt_num(r.order),
            ])?;
        }
        let worst = rows.iter().filter_map(|r| r.order).fold(f64::INFINITY, f64::min);
        summary.push(format!("{}_order_min = {worst}", kind.name()));
    }
    csv.finish()?;
    Ok(summary)
}

fn write_optlog(out: &Path, log: &[crate::control::IterateLog]) -> Result<(), CliError> {
    let mut csv = Csv::create(
        out,
        "optlog.csv",
        &["iter", "cost_total", "cost_smooth", "g_term", "step", "stationarity", "zero_fraction"],
    )?;
    for l in log {
        csv.row(&[
            l.iter.to_string(),
            num(l.cost_total),
            num(l.cost_smooth),
            num(l.g_term),
            num(l.step),
            num(l.stationarity),
            num(l.zero_fraction),
        ])?;
    }
    csv.finish()
}

fn record_target(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    if cfg.target.kind == TargetKind::Reachable {
        let u = cfg.reference_control();
        write_control(out, "target_control.csv", &cfg.grid, &cfg.time, &[("u", &u.u)])?;
    }
    Ok(())
}

fn run_optimize(cfg: &RunConfig, out: &Path, ctx: &Ctx) -> Result<Vec<String>, CliError> {
    let spec = cfg.problem()?;
    record_target(cfg, out)?;
    let res = optimize(&spec).map_err(ctx)?;
    write_optlog(out, &res.log)?;
    write_control(
        out,
        "control.csv",
        &spec.system.grid,
        &spec.system.time,
        &[("u", &res.control.u), ("r", &res.adjoint.r), ("lambda", &res.lambda)],
    )?;
    let report = sparsity_report(&spec, &res);
    let mut csv = Csv::create(
        out,
        "summary.csv",
        &["cost_initial", "cost_total", "cost_smooth", "g_term", "stationarity", "tolerance", "converged", "iterations", "zero_fraction", "iff_violations"],
    )?;
    csv.row(&[
        num(res.log[0].cost_total),
        num(res.cost.total),
        num(res.cost.smooth),
        num(res.cost.g_term),
        num(res.stationarity),
        num(res.tolerance),
        res.converged.to_string(),
        (res.log.len() - 1).to_string(),
        num(report.zero_fraction),
        report.iff_violations.map_or_else(|| "na".to_string(), |v| v.to_string()),
    ])?;
    csv.finish()?;
    Ok(vec![
        format!("cost {:e} -> {:e}", res.log[0].cost_total, res.cost.total),
        format!("stationarity = {:e} (tolerance {:e}), converged = {}", res.stationarity, res.tolerance, res.converged),
    ])
}

fn alpha_sweep(cfg: &RunConfig, out: &Path, ctx: &Ctx) -> Result<Vec<String>, CliError> {
    let spec = cfg.problem()?;
    let res = run_sweep(&cfg.sweep, &spec, &cfg.control_trajectory()).map_err(ctx)?;
    let mut csv = Csv::create(
        out,
        "sweep.csv",
        &["alpha", "err_phi", "err_mu", "err_w", "err_p", "err_q", "err_r", "err_u", "ratio_prev"],
    )?;
    let mut extra = Csv::create(out, "sweep_extra.csv", &["alpha", "err_pq", "inertia", "cost_gap"])?;
    for r in &res.rows {
        csv.row(&[
            num(r.alpha),
            opt_num(r.err_phi),
            opt_num(r.err_mu),
            opt_num(r.err_w),
            opt_num(r.err_p),
            opt_num(r.err_q),
            opt_num(r.err_r),
            opt_num(r.err_u),
            opt_num(r.ratio_prev),
        ])?;
        extra.row(&[num(r.alpha), opt_num(r.err_pq), opt_num(r.inertia), opt_num(r.cost_gap)])?;
    }
    csv.finish()?;
    extra.finish()?;
    let mut summary = vec![format!("mode = {}", res.mode.name())];
    if let Some(t) = res.terminal_identity {
        summary.push(format!("limit terminal identity residual = {t:e}"));
    }
    if let Some(c) = res.reference_cost {
        summary.push(format!("limit cost = {c:e}"));
    }
    Ok(summary)
}

fn sparsity_sweep(cfg: &RunConfig, out: &Path, ctx: &Ctx) -> Result<Vec<String>, CliError> {
    let spec = cfg.problem()?;
    let kappa_hat = sparsity_threshold(&spec).map_err(ctx)?;
    let mut csv = Csv::create(
        out,
        "sparsity.csv",
        &["factor", "kappa", "kappa_hat", "zero_fraction", "iff_violations", "cost_total", "stationarity", "converged", "iterations"],
    )?;
    let mut summary = vec![format!("kappa_hat = {kappa_hat:e}")];
    for &factor in &cfg.kappa_factors {
        let mut problem = spec.clone();
        problem.cost.kappa = factor * kappa_hat;
        let res = optimize(&problem).map_err(ctx)?;
        let report = sparsity_report(&problem, &res);
        csv.row(&[
            num(factor),
            num(problem.cost.kappa),
            num(kappa_hat),
            num(report.zero_fraction),
            report.iff_violations.map_or_else(|| "na".to_string(), |v| v.to_string()),
            num(res.cost.total),
            num(res.stationarity),
            res.converged.to_string(),
            (res.log.len() - 1).to_string(),
        ])?;
        summary.push(format!(
            "factor {factor}: zero_fraction = {}, iff_violations = {:?}",
            report.zero_fraction, report.iff_violations
        ));
    }
    csv.finish()?;
    Ok(summary)
}

#[derive(Debug, Parser)]
#[command(
    name = "chopt",
    version,
    about = "Cahn-Hilliard state solver, discrete adjoints and sparse optimal control"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Subcommand)]
enum Command {
    /// Simulate the state for the configured control
    SolveState(RunArgs),
    /// Adjoint gradient against finite differences, plus the Taylor test
    CheckGradient(RunArgs),
    /// Pairing identity of the linearized map and its transpose
    CheckDuality(RunArgs),
    /// Manufactured-solution convergence orders
    MmsVerify(RunArgs),
    /// Solve the control problem
    Optimize(RunArgs),
    /// Distances to the alpha = 0 limit along a decreasing alpha sequence
    AlphaSweep(RunArgs),
    /// Optimize at multiples of the measured sparsity threshold
    SparsitySweep(RunArgs),
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value = ".")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

impl Command {
    fn split(self) -> (Subcommand, RunArgs) {
        match self {
            Command::SolveState(a) => (Subcommand::SolveState, a),
            Command::CheckGradient(a) => (Subcommand::CheckGradient, a),
            Command::CheckDuality(a) => (Subcommand::CheckDuality, a),
            Command::MmsVerify(a) => (Subcommand::MmsVerify, a),
            Command::Optimize(a) => (Subcommand::Optimize, a),
            Command::AlphaSweep(a) => (Subcommand::AlphaSweep, a),
            Command::SparsitySweep(a) => (Subcommand::SparsitySweep, a),
        }
    }
}

fn write_log(out: &Path, header: &str, cfg: Option<&RunConfig>, tail: &[String]) {
    let mut text = format!("{header}\n");
    if let Some(cfg) = cfg {
        for line in cfg.echo() {
            text.push_str(&line);
            text.push('\n');
        }
    }
    for line in tail {
        text.push_str(line);
        text.push('\n');
    }
    if fs::create_dir_all(out).is_ok() {
        let _ = fs::write(out.join("run.log"), text);
    }
}

/// Entry point of the binary.
pub fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let (sub, args) = cli.command.split();
    let start = Instant::now();
    let outcome = parse_config(&args.config).map(|mut cfg| {
        if let Some(seed) = args.seed {
            cfg.set_seed(seed);
        }
        let result = run(sub, &cfg, &args.out);
        (cfg, result)
    });
    let manifest = |status: &str| {
        format!(
            "chopt {} subcommand={} status={status} elapsed_s={:.3}",
            env!("CARGO_PKG_VERSION"),
            sub.name(),
            start.elapsed().as_secs_f64()
        )
    };
    let failure = |err: &CliError| {
        format!(
            "failure kind={} subcommand={} message=\"{}\"",
            err.kind(),
            sub.name(),
            err.to_string().replace('"', "'")
        )
    };
    match outcome {
        Ok((cfg, Ok(summary))) => {
            write_log(&args.out, &manifest("ok"), Some(&cfg), &summary);
            for line in summary {
                println!("{line}");
            }
            ExitCode::SUCCESS
        }
        Ok((cfg, Err(err))) => {
            let line = failure(&err);
            write_log(&args.out, &manifest("failed"), Some(&cfg), std::slice::from_ref(&line));
            eprintln!("{line}");
            ExitCode::FAILURE
        }
        Err(err) => {
            let line = failure(&err);
            write_log(&args.out, &manifest("failed"), None, std::slice::from_ref(&line));
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}
