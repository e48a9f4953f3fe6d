//! Vanishing-relaxation studies: states, adjoints and optimal controls at a
//! decreasing sequence of `alpha`, each compared to the `alpha = 0` solution
//! on the same space-time grid.

use log::warn;
use rayon::prelude::*;

use crate::control::{cost_eval, optimize_from, OptimizationResult, ProblemSpec};
use crate::grid::{Field, Grid};
use crate::potentials::PotentialKind;
use crate::sensitivity::{solve_adjoint, AdjointTrajectory};
use crate::state::{ControlTrajectory, StateTrajectory};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepMode {
    State,
    Adjoint,
    OptimalControl,
}

impl SweepMode {
    pub fn name(&self) -> &'static str {
        match self {
            SweepMode::State => "state",
            SweepMode::Adjoint => "adjoint",
            SweepMode::OptimalControl => "optimal-control",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPlan {
    alphas: Vec<f64>,
    pub mode: SweepMode,
}

pub const DEFAULT_ALPHAS: [f64; 4] = [1.0, 1e-1, 1e-2, 1e-3];

impl SweepPlan {
    /// `alphas` must be strictly decreasing and lie in `(0, 1]`.
    pub fn new(alphas: Vec<f64>, mode: SweepMode) -> Result<Self> {
        if alphas.is_empty() {
            return Err(Error::invalid("alphas", "must not be empty"));
        }
        if alphas.iter().any(|&a| !(a > 0.0 && a <= 1.0)) {
            return Err(Error::invalid("alphas", "must lie in (0,1]"));
        }
        if alphas.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::invalid("alphas", "must be strictly decreasing"));
        }
        Ok(Self { alphas, mode })
    }

    pub fn with_mode(mode: SweepMode) -> Self {
        Self {
            alphas: DEFAULT_ALPHAS.to_vec(),
            mode,
        }
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }
}

/// Distances to the limit solution at one `alpha`. Entries that the mode
/// does not compute are `None`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SweepRow {
    pub alpha: f64,
    /// `max_n |phi^n - phi0^n|`.
    pub err_phi: Option<f64>,
    /// Discrete `L2(Q)` distance of `mu` over levels `1..=nt`.
    pub err_mu: Option<f64>,
    pub err_w: Option<f64>,
    pub err_p: Option<f64>,
    pub err_q: Option<f64>,
    pub err_r: Option<f64>,
    /// `max_k |(p + tau q) - (p0 + tau q0)|`.
    pub err_pq: Option<f64>,
    pub err_u: Option<f64>,
    /// `alpha |(mu^n - mu^{n-1}) / dt|_{L2(Q)}`.
    pub inertia: Option<f64>,
    /// `|J_alpha(u_alpha) - J_0(u_0)|`.
    pub cost_gap: Option<f64>,
    /// Previous over current value of the mode's leading error.
    pub ratio_prev: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub mode: SweepMode,
    pub rows: Vec<SweepRow>,
    /// Adjoint mode: `|(p + tau q)(T) - b2 (phi(T) - phi_Omega)|` on the limit
    /// solve.
    pub terminal_identity: Option<f64>,
    /// Optimal-control mode: reference cost `J_0(u_0)`.
    pub reference_cost: Option<f64>,
}

impl SweepRow {
    fn leading(&self, mode: SweepMode) -> Option<f64> {
        match mode {
            SweepMode::State => self.err_phi,
            SweepMode::Adjoint => self.err_pq,
            SweepMode::OptimalControl => self.err_u,
        }
    }
}

fn fill_ratios(mode: SweepMode, rows: &mut [SweepRow]) {
    for i in 1..rows.len() {
        rows[i].ratio_prev = match (rows[i - 1].leading(mode), rows[i].leading(mode)) {
            (Some(a), Some(b)) => Some(a / b),
            _ => None,
        };
    }
}

fn diff_max(grid: &Grid, a: &[Field], b: &[Field]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| grid.norm(&x.axpy(-1.0, y)))
        .fold(0.0, f64::max)
}

fn diff_l2q(grid: &Grid, dt: f64, a: &[Field], b: &[Field]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x.axpy(-1.0, y);
            dt * grid.dot(&d, &d)
        })
        .sum::<f64>()
        .sqrt()
}

fn state_errors(
    spec: &ProblemSpec,
    alpha: f64,
    traj: &StateTrajectory,
    reference: &StateTrajectory,
) -> SweepRow {
    let grid = &spec.system.grid;
    let dt = spec.system.time.dt();
    let velocity: f64 = traj
        .mu
        .windows(2)
        .map(|w| {
            let d = w[1].axpy(-1.0, &w[0]);
            grid.dot(&d, &d) / dt
        })
        .sum::<f64>()
        .sqrt();
    SweepRow {
        alpha,
        err_phi: Some(diff_max(grid, &traj.phi, &reference.phi)),
        err_mu: Some(diff_l2q(grid, dt, &traj.mu[1..], &reference.mu[1..])),
        err_w: Some(diff_max(grid, &traj.w, &reference.w)),
        inertia: Some(alpha * velocity),
        ..SweepRow::default()
    }
}

fn adjoint_errors(
    spec: &ProblemSpec,
    row: &mut SweepRow,
    adj: &AdjointTrajectory,
    reference: &AdjointTrajectory,
) {
    let grid = &spec.system.grid;
    let dt = spec.system.time.dt();
    let tau = spec.system.params.tau;
    let pq = |a: &AdjointTrajectory| -> Vec<Field> {
        a.p.iter().zip(&a.q).map(|(p, q)| p.axpy(tau, q)).collect()
    };
    row.err_p = Some(diff_l2q(grid, dt, &adj.p, &reference.p));
    row.err_q = Some(diff_l2q(grid, dt, &adj.q, &reference.q));
    row.err_r = Some(diff_l2q(grid, dt, &adj.r, &reference.r));
    row.err_pq = Some(diff_max(grid, &pq(adj), &pq(reference)));
}

/// States for a fixed control at every `alpha` of the plan.
pub fn run_state_sweep(plan: &SweepPlan, spec: &ProblemSpec, u: &ControlTrajectory) -> Result<SweepResult> {
    let reference = spec.system.with_alpha(0.0).solve_state(u)?;
    let mut rows = plan
        .alphas
        .par_iter()
        .map(|&alpha| {
            let traj = spec.system.with_alpha(alpha).solve_state(u)?;
            Ok(state_errors(spec, alpha, &traj, &reference))
        })
        .collect::<Result<Vec<_>>>()?;
    fill_ratios(SweepMode::State, &mut rows);
    Ok(SweepResult {
        mode: SweepMode::State,
        rows,
        terminal_identity: None,
        reference_cost: None,
    })
}

/// Adjoints for a fixed control at every `alpha`; regular potential only.
pub fn run_adjoint_sweep(plan: &SweepPlan, spec: &ProblemSpec, u: &ControlTrajectory) -> Result<SweepResult> {
    if spec.system.potential.kind() != PotentialKind::Regular {
        return Err(Error::RejectedConfiguration(
            "adjoint sweep requires the regular potential".into(),
        ));
    }
    let limit = spec.system.with_alpha(0.0);
    let ref_state = limit.solve_state(u)?;
    let ref_adj = solve_adjoint(&limit, &ref_state, &spec.cost, u)?;

    let grid = &spec.system.grid;
    let nt = spec.system.time.steps();
    let tau = spec.system.params.tau;
    let terminal: Field = Field(
        (0..grid.len())
            .map(|i| {
                ref_adj.p[nt - 1][i] + tau * ref_adj.q[nt - 1][i]
                    - spec.cost.b2 * (ref_state.phi[nt][i] - spec.cost.phi_omega[i])
            })
            .collect(),
    );

    let mut rows = plan
        .alphas
        .par_iter()
        .map(|&alpha| {
            let system = spec.system.with_alpha(alpha);
            let traj = system.solve_state(u)?;
            let adj = solve_adjoint(&system, &traj, &spec.cost, u)?;
            let mut row = state_errors(spec, alpha, &traj, &ref_state);
            adjoint_errors(spec, &mut row, &adj, &ref_adj);
            Ok(row)
        })
        .collect::<Result<Vec<_>>>()?;
    fill_ratios(SweepMode::Adjoint, &mut rows);
    Ok(SweepResult {
        mode: SweepMode::Adjoint,
        rows,
        terminal_identity: Some(grid.norm(&terminal)),
        reference_cost: None,
    })
}

/// Optimal controls along the plan, each warm-started from the previous
/// optimum, compared to the optimum of the limit problem.
pub fn run_optimal_control_sweep(plan: &SweepPlan, spec: &ProblemSpec) -> Result<SweepResult> {
    let limit = spec.with_alpha(0.0);
    let reference: OptimizationResult = optimize_from(&limit, spec.default_guess())?;
    if !reference.converged {
        warn!("limit problem stopped before reaching the stationarity tolerance");
    }
    let ref_cost = cost_eval(&limit, &reference.control, &reference.state)?.total;
    let grid = &spec.system.grid;
    let dt = spec.system.time.dt();

    let mut rows = Vec::with_capacity(plan.alphas.len());
    let mut guess = spec.default_guess();
    for &alpha in &plan.alphas {
        let problem = spec.with_alpha(alpha);
        let res = optimize_from(&problem, guess)?;
        if !res.converged {
            warn!("alpha = {alpha}: optimizer stopped before reaching the stationarity tolerance");
        }
        let mut row = state_errors(spec, alpha, &res.state, &reference.state);
        row.err_u = Some(diff_l2q(grid, dt, &res.control.u, &reference.control.u));
        row.cost_gap = Some((res.cost.total - ref_cost).abs());
        guess = res.control;
        rows.push(row);
    }
    fill_ratios(SweepMode::OptimalControl, &mut rows);
    for pair in rows.windows(2) {
        if pair[1].err_u > pair[0].err_u {
            warn!(
                "control gap grew from alpha = {} to alpha = {}; the solves may sit on different stationary branches",
                pair[0].alpha, pair[1].alpha
            );
        }
    }
    Ok(SweepResult {
        mode: SweepMode::OptimalControl,
        rows,
        terminal_identity: None,
        reference_cost: Some(ref_cost),
    })
}

/// Dispatches on `plan.mode`; `u` is ignored in optimal-control mode.
pub fn run_sweep(plan: &SweepPlan, spec: &ProblemSpec, u: &ControlTrajectory) -> Result<SweepResult> {
    match plan.mode {
        SweepMode::State => run_state_sweep(plan, spec, u),
        SweepMode::Adjoint => run_adjoint_sweep(plan, spec, u),
        SweepMode::OptimalControl => run_optimal_control_sweep(plan, spec),
    }
}
