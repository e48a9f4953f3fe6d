//! Discrete cost, L1 sparsity, the projection formula and a proximal
//! projected-gradient optimizer for the control problem.
//!
//! The reduced cost is `J(u) = J_smooth(u) + kappa ||u||_{L1(Q)}` over the
//! box `lower <= u <= upper`. Each iteration takes a forward-backward step
//!
//! ```text
//! u+ = P_box(soft(u - sigma grad J_smooth(u), sigma kappa))
//! ```
//!
//! with a Barzilai-Borwein trial step and Armijo backtracking on the total
//! cost. Termination uses the projection formula
//! `u = P_box(-(r + kappa lambda) / b3)` as a fixed-point residual.

use log::debug;

use crate::grid::Field;
use crate::sensitivity::{smooth_cost, solve_adjoint, space_time_dot, AdjointTrajectory, CostData};
use crate::state::{Bounds, ControlTrajectory, StateSystem, StateTrajectory};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub max_iters: usize,
    /// First trial step; `None` means `1 / b3`.
    pub sigma0: Option<f64>,
    pub backtrack: f64,
    pub armijo: f64,
    /// Stationarity tolerance relative to the residual of the initial guess.
    pub stat_tol: f64,
    /// Band for zero-set classification; `None` means `1e-8 * (upper - lower)`.
    pub sparse_band: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            max_iters: 500,
            sigma0: None,
            backtrack: 0.5,
            armijo: 1e-4,
            stat_tol: 1e-6,
            sparse_band: None,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::invalid("max_iters", "must be positive"));
        }
        if let Some(s) = self.sigma0 {
            if !(s.is_finite() && s > 0.0) {
                return Err(Error::invalid("sigma0", "must be positive"));
            }
        }
        if !(self.backtrack > 0.0 && self.backtrack < 1.0) {
            return Err(Error::invalid("backtrack", "must lie in (0,1)"));
        }
        if !(self.armijo > 0.0 && self.armijo < 1.0) {
            return Err(Error::invalid("armijo", "must lie in (0,1)"));
        }
        if !(self.stat_tol > 0.0) {
            return Err(Error::invalid("stat_tol", "must be positive"));
        }
        if let Some(b) = self.sparse_band {
            if !(b > 0.0) {
                return Err(Error::invalid("sparse_band", "must be positive"));
            }
        }
        Ok(())
    }
}

/// The complete control problem.
#[derive(Debug, Clone)]
pub struct ProblemSpec {
    pub system: StateSystem,
    pub cost: CostData,
    pub bounds: Bounds,
    pub optimizer: OptimizerConfig,
}

impl ProblemSpec {
    pub fn validate(&self) -> Result<()> {
        self.system.validate()?;
        self.cost
            .validate(&self.system.grid, self.system.time.steps())?;
        self.system.grid.check(&self.bounds.lower)?;
        self.system.grid.check(&self.bounds.upper)?;
        Bounds::new(self.bounds.lower.clone(), self.bounds.upper.clone())?;
        self.optimizer.validate()
    }

    pub fn with_alpha(&self, alpha: f64) -> Self {
        let mut s = self.clone();
        s.system.params.alpha = alpha;
        s
    }

    /// Zero where admissible, otherwise the midpoint of the bounds.
    pub fn default_guess(&self) -> ControlTrajectory {
        let level = Field(
            self.bounds
                .lower
                .iter()
                .zip(self.bounds.upper.iter())
                .map(|(&lo, &hi)| if lo <= 0.0 && 0.0 <= hi { 0.0 } else { 0.5 * (lo + hi) })
                .collect(),
        );
        ControlTrajectory {
            u: vec![level; self.system.time.steps()],
        }
    }

    pub fn sparse_band(&self) -> f64 {
        self.optimizer
            .sparse_band
            .unwrap_or_else(|| 1e-8 * self.bounds.width().max(f64::MIN_POSITIVE))
    }

    fn st_dot(&self, a: &[Field], b: &[Field]) -> f64 {
        space_time_dot(&self.system.grid, self.system.time.dt(), a, b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostValue {
    pub smooth: f64,
    pub g_term: f64,
    pub total: f64,
}

/// `J_smooth = b1/2 |phi - phi_Q|^2_Q + b2/2 |phi(T) - phi_Omega|^2 + b3/2 |u|^2_Q`
/// and `G_term = kappa |u|_{L1(Q)}`. The tracking term uses trapezoidal
/// weights in time, the control terms are exact for piecewise-constant `u`.
pub fn cost_eval(spec: &ProblemSpec, u: &ControlTrajectory, state: &StateTrajectory) -> Result<CostValue> {
    let grid = &spec.system.grid;
    let time = &spec.system.time;
    let cost = &spec.cost;
    u.check(grid, time)?;
    if state.phi.len() != time.steps() + 1 {
        return Err(Error::DimensionMismatch {
            expected: time.steps() + 1,
            found: state.phi.len(),
        });
    }
    let l1: f64 = u
        .u
        .iter()
        .map(|level| {
            time.dt()
                * grid
                    .weights()
                    .iter()
                    .zip(level.iter())
                    .map(|(w, v)| w * v.abs())
                    .sum::<f64>()
        })
        .sum();
    let smooth = smooth_cost(&spec.system, cost, u, state);
    let g_term = cost.kappa * l1;
    Ok(CostValue {
        smooth,
        g_term,
        total: smooth + g_term,
    })
}

/// Nodewise `max(lower, min(upper, z))`.
pub fn project_box(z: &[f64], lower: &[f64], upper: &[f64]) -> Result<Field> {
    if z.len() != lower.len() || z.len() != upper.len() {
        return Err(Error::DimensionMismatch {
            expected: lower.len(),
            found: z.len(),
        });
    }
    if lower.iter().zip(upper).any(|(lo, hi)| !(lo <= hi)) {
        return Err(Error::invalid("bounds", "lower bound exceeds upper bound"));
    }
    Ok(Field(
        z.iter()
            .zip(lower.iter().zip(upper))
            .map(|(&v, (&lo, &hi))| v.min(hi).max(lo))
            .collect(),
    ))
}

#[inline]
fn soft_threshold(z: f64, theta: f64) -> f64 {
    if z > theta {
        z - theta
    } else if z < -theta {
        z + theta
    } else {
        0.0
    }
}

/// Soft thresholding `sign(z) max(|z| - theta, 0)`, the proximal map of
/// `theta |.|`.
pub fn prox_l1(z: &[f64], theta: f64) -> Field {
    Field(z.iter().map(|&v| soft_threshold(v, theta)).collect())
}

/// Minimizer of `(u - z)^2 / 2 + theta |u|` over `[lo, hi]`.
///
/// When `0` lies outside the box, `|u|` is linear on it and the candidates
/// are the two bounds and the shifted point `z -+ theta`; for a convex
/// scalar function all three cases collapse to clamping the unconstrained
/// minimizer.
#[inline]
pub fn prox_l1_box(z: f64, theta: f64, lo: f64, hi: f64) -> f64 {
    if lo > 0.0 {
        (z - theta).clamp(lo, hi)
    } else if hi < 0.0 {
        (z + theta).clamp(lo, hi)
    } else {
        soft_threshold(z, theta).clamp(lo, hi)
    }
}

/// Subgradient of `|.|` certifying the optimality system: `sign(u)` where
/// `u != 0`, `clamp(-r / kappa, -1, 1)` on the zero set, and zero for
/// `kappa = 0`.
pub fn compute_lambda(u: &ControlTrajectory, r: &[Field], kappa: f64) -> Vec<Field> {
    u.u.iter()
        .zip(r)
        .map(|(uk, rk)| {
            if kappa <= 0.0 {
                return Field::zeros(uk.len());
            }
            uk.zip_map(rk, |v, rv| {
                if v > 0.0 {
                    1.0
                } else if v < 0.0 {
                    -1.0
                } else {
                    (-rv / kappa).clamp(-1.0, 1.0)
                }
            })
        })
        .collect()
}

/// `|| u - P_box(-(r + kappa lambda) / b3) ||_{L2(Q)}`.
pub fn stationarity_residual(
    spec: &ProblemSpec,
    u: &ControlTrajectory,
    r: &[Field],
    lambda: &[Field],
) -> f64 {
    let b3 = spec.cost.b3;
    let kappa = spec.cost.kappa;
    let lo = &spec.bounds.lower;
    let hi = &spec.bounds.upper;
    let diff: Vec<Field> = u
        .u
        .iter()
        .zip(r.iter().zip(lambda))
        .map(|(uk, (rk, lk))| {
            Field(
                (0..uk.len())
                    .map(|i| {
                        let target = (-(rk[i] + kappa * lk[i]) / b3).min(hi[i]).max(lo[i]);
                        uk[i] - target
                    })
                    .collect(),
            )
        })
        .collect();
    spec.st_dot(&diff, &diff).sqrt()
}

/// One line of the optimizer log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterateLog {
    pub iter: usize,
    pub cost_total: f64,
    pub cost_smooth: f64,
    pub g_term: f64,
    /// Accepted step length leading to this iterate (0 for the initial guess).
    pub step: f64,
    pub stationarity: f64,
    pub zero_fraction: f64,
}

#[derive(Debug, Clone)]
pub struct OptimizationResult {
    pub control: ControlTrajectory,
    pub state: StateTrajectory,
    pub adjoint: AdjointTrajectory,
    pub lambda: Vec<Field>,
    pub log: Vec<IterateLog>,
    pub cost: CostValue,
    pub stationarity: f64,
    /// Absolute tolerance the residual was compared against.
    pub tolerance: f64,
    pub converged: bool,
}

fn zero_fraction(u: &ControlTrajectory, band: f64) -> f64 {
    let total: usize = u.u.iter().map(|l| l.len()).sum();
    let zeros = u
        .u
        .iter()
        .flat_map(|l| l.iter())
        .filter(|v| v.abs() <= band)
        .count();
    zeros as f64 / total.max(1) as f64
}

struct Evaluated {
    u: ControlTrajectory,
    state: StateTrajectory,
    cost: CostValue,
}

fn evaluate(spec: &ProblemSpec, u: ControlTrajectory) -> Result<Evaluated> {
    let state = spec.system.solve_state(&u)?;
    let cost = cost_eval(spec, &u, &state)?;
    Ok(Evaluated { u, state, cost })
}

/// Measured sparsity threshold `||r||_inf` of the adjoint at `u = 0`.
pub fn sparsity_threshold(spec: &ProblemSpec) -> Result<f64> {
    let u = ControlTrajectory::zeros(&spec.system.grid, &spec.system.time);
    let state = spec.system.solve_state(&u)?;
    Ok(solve_adjoint(&spec.system, &state, &spec.cost, &u)?.r_linf())
}

pub fn optimize(spec: &ProblemSpec) -> Result<OptimizationResult> {
    optimize_from(spec, spec.default_guess())
}

/// Proximal projected gradient from a given admissible initial guess.
pub fn optimize_from(spec: &ProblemSpec, initial: ControlTrajectory) -> Result<OptimizationResult> {
    spec.validate()?;
    initial.check(&spec.system.grid, &spec.system.time)?;
    if !initial.is_admissible(&spec.bounds) {
        return Err(Error::invalid("initial", "initial guess violates the bounds"));
    }
    let opts = &spec.optimizer;
    let kappa = spec.cost.kappa;
    let band = spec.sparse_band();
    let lo = &spec.bounds.lower;
    let hi = &spec.bounds.upper;

    let mut cur = evaluate(spec, initial)?;
    let mut adj = solve_adjoint(&spec.system, &cur.state, &spec.cost, &cur.u)?;
    let mut lambda = compute_lambda(&cur.u, &adj.r, kappa);
    let mut stat = stationarity_residual(spec, &cur.u, &adj.r, &lambda);
    let tolerance = opts.stat_tol * stat;
    let mut sigma = opts.sigma0.unwrap_or(1.0 / spec.cost.b3);
    let mut log = vec![IterateLog {
        iter: 0,
        cost_total: cur.cost.total,
        cost_smooth: cur.cost.smooth,
        g_term: cur.cost.g_term,
        step: 0.0,
        stationarity: stat,
        zero_fraction: zero_fraction(&cur.u, band),
    }];
    let mut converged = stat <= tolerance;

    let mut iter = 0;
    while !converged && iter < opts.max_iters {
        iter += 1;
        let grad = &adj.grad_smooth;
        let (next, step) = loop {
            let theta = sigma * kappa;
            let trial = ControlTrajectory {
                u: cur
                    .u
                    .u
                    .iter()
                    .zip(grad)
                    .map(|(uk, gk)| {
                        Field(
                            (0..uk.len())
                                .map(|i| prox_l1_box(uk[i] - sigma * gk[i], theta, lo[i], hi[i]))
                                .collect(),
                        )
                    })
                    .collect(),
            };
            let d = trial.axpy(-1.0, &cur.u);
            let dd = spec.st_dot(&d.u, &d.u);
            if dd == 0.0 {
                break (None, sigma);
            }
            let cand = evaluate(spec, trial)?;
            if cand.cost.total <= cur.cost.total - opts.armijo / sigma * dd {
                break (Some(cand), sigma);
            }
            sigma *= opts.backtrack;
            if sigma < 1e-12 {
                return Err(Error::LineSearchFailure { iteration: iter });
            }
        };
        let Some(next) = next else {
            // fixed point of the forward-backward map
            converged = true;
            break;
        };
        let next_adj = solve_adjoint(&spec.system, &next.state, &spec.cost, &next.u)?;

        let s = next.u.axpy(-1.0, &cur.u);
        let y: Vec<Field> = next_adj
            .grad_smooth
            .iter()
            .zip(&adj.grad_smooth)
            .map(|(a, b)| a.axpy(-1.0, b))
            .collect();
        let sy = spec.st_dot(&s.u, &y);
        let ss = spec.st_dot(&s.u, &s.u);
        let yy = spec.st_dot(&y, &y);
        sigma = if sy > 0.0 {
            // alternate the long and the short Barzilai-Borwein step
            let v = if iter % 2 == 0 { ss / sy } else { sy / yy };
            v.clamp(1e-10, 1e10)
        } else {
            (2.0 * step).min(1e10)
        };

        cur = next;
        adj = next_adj;
        lambda = compute_lambda(&cur.u, &adj.r, kappa);
        stat = stationarity_residual(spec, &cur.u, &adj.r, &lambda);
        converged = stat <= tolerance;
        log.push(IterateLog {
            iter,
            cost_total: cur.cost.total,
            cost_smooth: cur.cost.smooth,
            g_term: cur.cost.g_term,
            step,
            stationarity: stat,
            zero_fraction: zero_fraction(&cur.u, band),
        });
        debug!(
            "iter {iter}: cost {:.6e} stationarity {:.3e} step {:.3e}",
            cur.cost.total, stat, step
        );
    }
    Ok(OptimizationResult {
        control: cur.u,
        state: cur.state,
        adjoint: adj,
        lambda,
        log,
        cost: cur.cost,
        stationarity: stat,
        tolerance,
        converged,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SparsityReport {
    pub zero_fraction: f64,
    /// Nodes violating `u = 0 <=> |r| <= kappa` outside the band; `None`
    /// when `kappa = 0`.
    pub iff_violations: Option<usize>,
    pub band: f64,
}

pub fn sparsity_report(spec: &ProblemSpec, result: &OptimizationResult) -> SparsityReport {
    let band = spec.sparse_band();
    let kappa = spec.cost.kappa;
    let zero_fraction = zero_fraction(&result.control, band);
    let iff_violations = (kappa > 0.0).then(|| {
        result
            .control
            .u
            .iter()
            .zip(&result.adjoint.r)
            .flat_map(|(uk, rk)| uk.iter().zip(rk.iter()))
            .filter(|(u, r)| {
                if u.abs() > band {
                    r.abs() <= kappa - band
                } else {
                    r.abs() > kappa + band
                }
            })
            .count()
    });
    SparsityReport {
        zero_fraction,
        iff_violations,
        band,
    }
}
