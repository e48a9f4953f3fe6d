//! Directional derivatives of the discrete control-to-state map and their
//! exact transpose.
//!
//! The linearized step solves the converged Newton Jacobian of step `k`
//!
//! ```text
//! (a - L) eta^k + psi^k / dt               = a (2 eta^{k-1} - eta^{k-2}) + psi^{k-1} / dt
//! -eta^k + (tau/dt - L + f''(phi^k)) psi^k = tau psi^{k-1} / dt + v^k
//! (gamma/dt + 1) v^k                       = gamma v^{k-1} / dt + h^k
//! ```
//!
//! with `a = alpha / dt^2`. Transposing the whole time-stepping sequence in
//! the weighted inner product gives the backward sweep
//!
//! ```text
//! (a - L) P_k - Q_k                     = a (2 P_{k+1} - P_{k+2})
//! P_k / dt + (tau/dt - L + f''(phi^k)) Q_k = g^k + (P_{k+1} + tau Q_{k+1}) / dt
//! (gamma/dt + 1) R_k                    = Q_k + gamma R_{k+1} / dt
//! ```
//!
//! where `g^k` is the derivative of the tracking cost with respect to
//! `phi^k`. The scaled multipliers `p = P / dt`, `q = Q / dt`, `r = R / dt`
//! are consistent with the continuous adjoint system and `b3 u + r` is the
//! gradient of the smooth reduced cost in the space-time inner product.

use crate::grid::{Field, Grid};
use crate::state::{mu_index, phi_index, w_step, ControlTrajectory, StateSystem, StateTrajectory};
use crate::{Error, Result};

/// Tracking and control cost weights and targets.
#[derive(Debug, Clone, PartialEq)]
pub struct CostData {
    pub b1: f64,
    pub b2: f64,
    pub b3: f64,
    pub kappa: f64,
    /// One target per time level `0..=nt`.
    pub phi_q: Vec<Field>,
    pub phi_omega: Field,
}

impl CostData {
    pub fn validate(&self, grid: &Grid, steps: usize) -> Result<()> {
        for (name, v) in [("b1", self.b1), ("b2", self.b2), ("kappa", self.kappa)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(name, "must be nonnegative"));
            }
        }
        if !(self.b3.is_finite() && self.b3 > 0.0) {
            return Err(Error::invalid("b3", "must be positive"));
        }
        if self.phi_q.len() != steps + 1 {
            return Err(Error::DimensionMismatch {
                expected: steps + 1,
                found: self.phi_q.len(),
            });
        }
        self.phi_q.iter().try_for_each(|f| grid.check(f))?;
        grid.check(&self.phi_omega)
    }

    /// Derivative of the tracking terms with respect to `phi^k`, `k = 1..=nt`,
    /// as weighted-inner-product densities (entry `k - 1`).
    pub fn tracking_seeds(&self, system: &StateSystem, traj: &StateTrajectory) -> Vec<Field> {
        let time = &system.time;
        let nt = time.steps();
        (1..=nt)
            .map(|k| {
                let c = self.b1 * time.trapezoid_weight(k);
                let mut g = traj.phi[k].zip_map(&self.phi_q[k], |p, t| c * (p - t));
                if k == nt {
                    for (gi, (p, t)) in g.iter_mut().zip(traj.phi[k].iter().zip(self.phi_omega.iter())) {
                        *gi += self.b2 * (p - t);
                    }
                }
                g
            })
            .collect()
    }
}

/// Directions `(eta, psi, v)` at levels `0..=nt`; level 0 is zero.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearizedTrajectory {
    pub eta: Vec<Field>,
    pub psi: Vec<Field>,
    pub v: Vec<Field>,
}

/// Adjoint variables at levels `1..=nt` (entry `k - 1`).
#[derive(Debug, Clone, PartialEq)]
pub struct AdjointTrajectory {
    pub p: Vec<Field>,
    pub q: Vec<Field>,
    pub r: Vec<Field>,
    /// `b3 u + r`.
    pub grad_smooth: Vec<Field>,
}

impl AdjointTrajectory {
    pub fn r_linf(&self) -> f64 {
        self.r
            .iter()
            .flat_map(|f| f.iter())
            .fold(0.0, |m: f64, v| m.max(v.abs()))
    }
}

/// Space-time inner product `sum_k dt <a^k, b^k>` over the control levels.
pub fn space_time_dot(grid: &Grid, dt: f64, a: &[Field], b: &[Field]) -> f64 {
    a.iter().zip(b).map(|(x, y)| dt * grid.dot(x, y)).sum()
}

fn check_trajectory(system: &StateSystem, traj: &StateTrajectory) -> Result<()> {
    let expected = system.time.steps() + 1;
    if traj.phi.len() != expected || traj.mu.len() != expected {
        return Err(Error::DimensionMismatch {
            expected,
            found: traj.phi.len(),
        });
    }
    traj.phi.iter().try_for_each(|f| system.grid.check(f))
}

/// Exact directional derivative of the discrete control-to-state map.
pub fn solve_linearized(
    system: &StateSystem,
    traj: &StateTrajectory,
    h: &ControlTrajectory,
) -> Result<LinearizedTrajectory> {
    check_trajectory(system, traj)?;
    h.check(&system.grid, &system.time)?;
    let grid = &system.grid;
    let n = grid.len();
    let nt = system.time.steps();
    let dt = system.time.dt();
    let tau = system.params.tau;
    let alpha = traj.alpha;
    let a = alpha / (dt * dt);

    let zero = Field::zeros(n);
    let mut eta = vec![zero.clone()];
    let mut psi = vec![zero.clone()];
    let mut v = vec![zero.clone()];
    for k in 1..=nt {
        let v_new = w_step(system.params.gamma, dt, &v[k - 1], &h.u[k - 1]);
        let eta_old = if k >= 2 { &eta[k - 2] } else { &zero };
        let mut rhs = vec![0.0; 2 * n];
        for i in 0..n {
            rhs[mu_index(i)] = a * (2.0 * eta[k - 1][i] - eta_old[i]) + psi[k - 1][i] / dt;
            rhs[phi_index(i)] = tau * psi[k - 1][i] / dt + v_new[i];
        }
        system
            .step_jacobian(alpha, &traj.phi[k], false)?
            .solve_in_place(&mut rhs);
        eta.push(Field((0..n).map(|i| rhs[mu_index(i)]).collect()));
        psi.push(Field((0..n).map(|i| rhs[phi_index(i)]).collect()));
        v.push(v_new);
    }
    Ok(LinearizedTrajectory { eta, psi, v })
}

/// Raw multipliers `(P, Q, R)` of the backward sweep driven by `seeds`
/// (one weighted density per level `1..=nt`).
pub(crate) fn backward_sweep(
    system: &StateSystem,
    traj: &StateTrajectory,
    seeds: &[Field],
) -> Result<(Vec<Field>, Vec<Field>, Vec<Field>)> {
    check_trajectory(system, traj)?;
    let grid = &system.grid;
    let n = grid.len();
    let nt = system.time.steps();
    if seeds.len() != nt {
        return Err(Error::DimensionMismatch {
            expected: nt,
            found: seeds.len(),
        });
    }
    seeds.iter().try_for_each(|s| grid.check(s))?;
    let dt = system.time.dt();
    let tau = system.params.tau;
    let c = system.params.gamma / dt;
    let alpha = traj.alpha;
    let a = alpha / (dt * dt);

    let zero = Field::zeros(n);
    // index k - 1 holds level k
    let mut p = vec![zero.clone(); nt];
    let mut q = vec![zero.clone(); nt];
    let mut r = vec![zero.clone(); nt];
    for k in (1..=nt).rev() {
        let at = |list: &Vec<Field>, level: usize| -> Field {
            if level <= nt {
                list[level - 1].clone()
            } else {
                zero.clone()
            }
        };
        let (p1, p2, q1, r1) = (at(&p, k + 1), at(&p, k + 2), at(&q, k + 1), at(&r, k + 1));
        let seed = &seeds[k - 1];
        let mut rhs = vec![0.0; 2 * n];
        for i in 0..n {
            rhs[mu_index(i)] = a * (2.0 * p1[i] - p2[i]);
            rhs[phi_index(i)] = seed[i] + (p1[i] + tau * q1[i]) / dt;
        }
        system
            .step_jacobian(alpha, &traj.phi[k], true)?
            .solve_in_place(&mut rhs);
        let pk = Field((0..n).map(|i| rhs[mu_index(i)]).collect());
        let qk = Field((0..n).map(|i| rhs[phi_index(i)]).collect());
        let rk = Field((0..n).map(|i| (qk[i] + c * r1[i]) / (c + 1.0)).collect());
        p[k - 1] = pk;
        q[k - 1] = qk;
        r[k - 1] = rk;
    }
    Ok((p, q, r))
}

/// Transpose of `h -> psi_h` in the space-time inner product:
/// `<psi_h, s> = <h, transpose(s)>` with both pairings over levels `1..=nt`.
pub fn linearized_transpose(
    system: &StateSystem,
    traj: &StateTrajectory,
    s: &[Field],
) -> Result<Vec<Field>> {
    let dt = system.time.dt();
    let seeds: Vec<Field> = s.iter().map(|f| f.scaled(dt)).collect();
    let (_, _, r) = backward_sweep(system, traj, &seeds)?;
    Ok(r.into_iter().map(|f| f.scaled(1.0 / dt)).collect())
}

/// Adjoint state for the tracking cost and the smooth reduced gradient.
pub fn solve_adjoint(
    system: &StateSystem,
    traj: &StateTrajectory,
    cost: &CostData,
    u: &ControlTrajectory,
) -> Result<AdjointTrajectory> {
    cost.validate(&system.grid, system.time.steps())?;
    u.check(&system.grid, &system.time)?;
    let seeds = cost.tracking_seeds(system, traj);
    let (p, q, r) = backward_sweep(system, traj, &seeds)?;
    let inv_dt = 1.0 / system.time.dt();
    let p: Vec<Field> = p.iter().map(|f| f.scaled(inv_dt)).collect();
    let q: Vec<Field> = q.iter().map(|f| f.scaled(inv_dt)).collect();
    let r: Vec<Field> = r.iter().map(|f| f.scaled(inv_dt)).collect();
    let grad_smooth = r
        .iter()
        .zip(&u.u)
        .map(|(rk, uk)| rk.axpy(cost.b3, uk))
        .collect();
    Ok(AdjointTrajectory {
        p,
        q,
        r,
        grad_smooth,
    })
}

/// Derivative of the tracking terms along a linearized trajectory.
pub fn tracking_derivative(
    system: &StateSystem,
    traj: &StateTrajectory,
    cost: &CostData,
    lin: &LinearizedTrajectory,
) -> f64 {
    cost.tracking_seeds(system, traj)
        .iter()
        .enumerate()
        .map(|(j, g)| system.grid.dot(g, &lin.psi[j + 1]))
        .sum()
}

/// `J_smooth(u)` for a solved state: trapezoidal tracking in time, terminal
/// mismatch and the `b3` control cost.
pub fn smooth_cost(
    system: &StateSystem,
    cost: &CostData,
    u: &ControlTrajectory,
    traj: &StateTrajectory,
) -> f64 {
    let grid = &system.grid;
    let time = &system.time;
    let mut tracking = 0.0;
    if cost.b1 != 0.0 {
        for n in 0..=time.steps() {
            let d = traj.phi[n].axpy(-1.0, &cost.phi_q[n]);
            tracking += time.trapezoid_weight(n) * grid.dot(&d, &d);
        }
    }
    let d = traj.phi[time.steps()].axpy(-1.0, &cost.phi_omega);
    0.5 * cost.b1 * tracking
        + 0.5 * cost.b2 * grid.dot(&d, &d)
        + 0.5 * cost.b3 * space_time_dot(grid, time.dt(), &u.u, &u.u)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaylorRow {
    pub epsilon: f64,
    /// `||phi(u + eps h) - phi(u) - eps psi_h||` in the discrete `L2(Q)` norm.
    pub remainder: f64,
    /// Log-log slope against the previous row.
    pub slope: Option<f64>,
}

/// Taylor remainder of the control-to-state map in the `phi` component.
pub fn taylor_test(
    system: &StateSystem,
    u: &ControlTrajectory,
    h: &ControlTrajectory,
    epsilons: &[f64],
) -> Result<Vec<TaylorRow>> {
    let base = system.solve_state(u)?;
    let lin = solve_linearized(system, &base, h)?;
    let dt = system.time.dt();
    let mut rows: Vec<TaylorRow> = Vec::with_capacity(epsilons.len());
    for &epsilon in epsilons {
        let pert = system.solve_state(&u.axpy(epsilon, h))?;
        let mut sum = 0.0;
        for k in 1..=system.time.steps() {
            let d: Field = Field(
                (0..system.grid.len())
                    .map(|i| pert.phi[k][i] - base.phi[k][i] - epsilon * lin.psi[k][i])
                    .collect(),
            );
            sum += dt * system.grid.dot(&d, &d);
        }
        let remainder = sum.sqrt();
        let slope = rows
            .last()
            .map(|prev| (prev.remainder / remainder).ln() / (prev.epsilon / epsilon).ln());
        rows.push(TaylorRow {
            epsilon,
            remainder,
            slope,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualityRow {
    /// `<psi_h, s>` over levels `1..=nt`.
    pub linearized: f64,
    /// `<h, transpose(s)>`.
    pub adjoint: f64,
    pub rel_error: f64,
}

/// Pairing identity between the linearized map and its transpose for one
/// direction `h` and one seed `s`.
pub fn duality_check(
    system: &StateSystem,
    traj: &StateTrajectory,
    h: &ControlTrajectory,
    s: &[Field],
) -> Result<DualityRow> {
    let dt = system.time.dt();
    let lin = solve_linearized(system, traj, h)?;
    let linearized = space_time_dot(&system.grid, dt, &lin.psi[1..], s);
    let back = linearized_transpose(system, traj, s)?;
    let adjoint = space_time_dot(&system.grid, dt, &h.u, &back);
    let rel_error = (linearized - adjoint).abs() / linearized.abs().max(adjoint.abs()).max(f64::MIN_POSITIVE);
    Ok(DualityRow {
        linearized,
        adjoint,
        rel_error,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientRow {
    pub epsilon: f64,
    /// Central difference of `J_smooth` along `h`.
    pub fd_value: f64,
    /// `<grad J_smooth, h>` from the adjoint.
    pub adjoint_value: f64,
    pub rel_error: f64,
}

/// Adjoint gradient against central differences of the smooth cost.
pub fn gradient_check(
    system: &StateSystem,
    cost: &CostData,
    u: &ControlTrajectory,
    h: &ControlTrajectory,
    epsilons: &[f64],
) -> Result<Vec<GradientRow>> {
    let traj = system.solve_state(u)?;
    let adj = solve_adjoint(system, &traj, cost, u)?;
    let adjoint_value = space_time_dot(&system.grid, system.time.dt(), &adj.grad_smooth, &h.u);
    let eval = |v: ControlTrajectory| -> Result<f64> {
        let t = system.solve_state(&v)?;
        Ok(smooth_cost(system, cost, &v, &t))
    };
    epsilons
        .iter()
        .map(|&epsilon| {
            let fd_value = (eval(u.axpy(epsilon, h))? - eval(u.axpy(-epsilon, h))?) / (2.0 * epsilon);
            Ok(GradientRow {
                epsilon,
                fd_value,
                adjoint_value,
                rel_error: (fd_value - adjoint_value).abs() / adjoint_value.abs().max(f64::MIN_POSITIVE),
            })
        })
        .collect()
}

/// Smooth setup used by [`adjoint_consistency_study`]: regular potential,
/// smooth initial data, control and targets on `[0, length]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConsistencySetup {
    pub alpha: f64,
    pub tau: f64,
    pub gamma: f64,
    pub b1: f64,
    pub b2: f64,
    pub length: f64,
    pub final_time: f64,
    pub base_nodes: usize,
    pub base_steps: usize,
}

impl Default for ConsistencySetup {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            tau: 1.0,
            gamma: 0.5,
            b1: 1.0,
            b2: 1.0,
            length: 1.0,
            final_time: 1.0,
            base_nodes: 17,
            base_steps: 128,
        }
    }
}

impl ConsistencySetup {
    /// System, cost and control at refinement `level` (both `h` and `dt`
    /// halved per level).
    pub fn build(&self, level: usize) -> Result<(StateSystem, CostData, ControlTrajectory)> {
        use crate::potentials::Potential;
        use crate::state::{InitialData, StateParams, TimeGrid};
        use std::f64::consts::PI;

        let nodes = (self.base_nodes - 1) * (1 << level) + 1;
        let steps = self.base_steps * (1 << level);
        let grid = Grid::interval(self.length, nodes)?;
        let time = TimeGrid::new(self.final_time, steps)?;
        let l = self.length;
        let tf = self.final_time;
        let initial = InitialData {
            mu0: grid.sample(|x, _| 0.1 * (PI * x / l).cos()),
            nu0: grid.constant(0.0),
            phi0: grid.sample(|x, _| 0.2 * (PI * x / l).cos()),
            w0: grid.constant(0.0),
        };
        let system = StateSystem::new(
            grid.clone(),
            time,
            StateParams {
                alpha: self.alpha,
                tau: self.tau,
                gamma: self.gamma,
            },
            Potential::regular(),
            initial,
        )?;
        let phi_q = (0..=steps)
            .map(|n| {
                let t = time.t(n);
                grid.sample(|x, _| 0.3 * (2.0 * PI * x / l).cos() * (PI * t / tf).sin())
            })
            .collect();
        let cost = CostData {
            b1: self.b1,
            b2: self.b2,
            b3: 1.0,
            kappa: 0.0,
            phi_q,
            phi_omega: grid.sample(|x, _| -0.2 * (PI * x / l).cos()),
        };
        let u = ControlTrajectory::sample(&grid, &time, |x, _, t| {
            0.5 * (PI * x / l).cos() * (PI * t / tf).cos()
        });
        Ok((system, cost, u))
    }
}

/// One refinement level of the consistency study.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyRow {
    pub level: usize,
    pub nodes: usize,
    pub steps: usize,
    /// Space-time L2 residual of the `p` equation with centered time
    /// differences at interior levels.
    pub residual_p: f64,
    /// Same for the `(p + tau q)` equation.
    pub residual_q: f64,
    /// Same for the `r` equation.
    pub residual_r: f64,
    /// L2 mismatch of the terminal condition.
    pub terminal: f64,
    /// `sqrt` of the sum of squares of the four entries above.
    pub total: f64,
}

/// Residuals of the continuous adjoint equations, evaluated on the discrete
/// adjoint with centered time differences, under joint `(h, dt)` halving.
pub fn adjoint_consistency_study(
    setup: &ConsistencySetup,
    levels: usize,
) -> Result<Vec<ConsistencyRow>> {
    (0..levels)
        .map(|level| {
            let (system, cost, u) = setup.build(level)?;
            let traj = system.solve_state(&u)?;
            let adj = solve_adjoint(&system, &traj, &cost, &u)?;
            let mut row = continuum_residuals(&system, &traj, &cost, &adj);
            row.level = level;
            Ok(row)
        })
        .collect()
}

/// Continuous adjoint residuals of a discrete adjoint (level fields unset).
pub fn continuum_residuals(
    system: &StateSystem,
    traj: &StateTrajectory,
    cost: &CostData,
    adj: &AdjointTrajectory,
) -> ConsistencyRow {
    let grid = &system.grid;
    let nt = system.time.steps();
    let dt = system.time.dt();
    let tau = system.params.tau;
    let gamma = system.params.gamma;
    let alpha = traj.alpha;
    let n = grid.len();
    // level k lives at index k - 1
    let (p, q, r) = (&adj.p, &adj.q, &adj.r);
    let (mut sp, mut sq, mut sr) = (0.0, 0.0, 0.0);
    for k in 2..nt {
        let (km, kk, kp) = (k - 2, k - 1, k);
        let lp = grid.laplacian_unchecked(&p[kk]);
        let lq = grid.laplacian_unchecked(&q[kk]);
        let mut res_p = vec![0.0; n];
        let mut res_q = vec![0.0; n];
        let mut res_r = vec![0.0; n];
        for i in 0..n {
            res_p[i] = alpha * (p[km][i] - 2.0 * p[kk][i] + p[kp][i]) / (dt * dt) - lp[i] - q[kk][i];
            let pq_dot = ((p[kp][i] + tau * q[kp][i]) - (p[km][i] + tau * q[km][i])) / (2.0 * dt);
            let phi = traj.phi[k][i];
            res_q[i] = -pq_dot - lq[i] + system.potential.second(phi) * q[kk][i]
                - cost.b1 * (phi - cost.phi_q[k][i]);
            res_r[i] = -gamma * (r[kp][i] - r[km][i]) / (2.0 * dt) + r[kk][i] - q[kk][i];
        }
        sp += dt * grid.dot(&res_p, &res_p);
        sq += dt * grid.dot(&res_q, &res_q);
        sr += dt * grid.dot(&res_r, &res_r);
    }
    let last = nt - 1;
    let terminal_field: Vec<f64> = (0..n)
        .map(|i| {
            let mismatch = cost.b2 * (traj.phi[nt][i] - cost.phi_omega[i]);
            if alpha > 0.0 {
                tau * q[last][i] - mismatch
            } else {
                p[last][i] + tau * q[last][i] - mismatch
            }
        })
        .collect();
    let terminal = grid.norm(&terminal_field);
    let (residual_p, residual_q, residual_r) = (sp.sqrt(), sq.sqrt(), sr.sqrt());
    ConsistencyRow {
        level: 0,
        nodes: n,
        steps: nt,
        residual_p,
        residual_q,
        residual_r,
        terminal,
        total: (sp + sq + sr + terminal * terminal).sqrt(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::potentials::Potential;
    use crate::rng::Lcg;
    use crate::state::{InitialData, StateParams, TimeGrid};
    use std::f64::consts::PI;

    fn setup(alpha: f64, potential: Potential) -> (StateSystem, CostData, ControlTrajectory) {
        let grid = Grid::interval(1.0, 17).unwrap();
        let time = TimeGrid::new(0.5, 16).unwrap();
        let initial = InitialData {
            mu0: grid.sample(|x, _| 0.1 * (PI * x).cos()),
            nu0: grid.sample(|x, _| 0.2 * (2.0 * PI * x).cos()),
            phi0: grid.sample(|x, _| 0.1 + 0.4 * (PI * x).cos()),
            w0: grid.constant(0.05),
        };
        let system = StateSystem::new(
            grid.clone(),
            time,
            StateParams {
                alpha,
                tau: 0.8,
                gamma: 0.7,
            },
            potential,
            initial,
        )
        .unwrap();
        let cost = CostData {
            b1: 1.3,
            b2: 0.7,
            b3: 0.1,
            kappa: 0.0,
            phi_q: vec![grid.sample(|x, _| 0.3 * (2.0 * PI * x).cos()); 17],
            phi_omega: grid.sample(|x, _| -0.2 * (PI * x).cos()),
        };
        let u = ControlTrajectory::sample(&grid, &time, |x, _, t| (3.0 * x - t).sin());
        (system, cost, u)
    }

    fn random_control(rng: &mut Lcg, grid: &Grid, time: &TimeGrid) -> ControlTrajectory {
        ControlTrajectory {
            u: (0..time.steps())
                .map(|_| Field((0..grid.len()).map(|_| rng.uniform(-1.0, 1.0)).collect()))
                .collect(),
        }
    }

    #[test]
    fn zero_direction_gives_zero() {
        let (system, _, u) = setup(0.3, Potential::regular());
        let traj = system.solve_state(&u).unwrap();
        let lin = solve_linearized(&system, &traj, &ControlTrajectory::zeros(&system.grid, &system.time)).unwrap();
        assert!(lin.psi.iter().chain(&lin.eta).chain(&lin.v).all(|f| f.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn superposition() {
        let (system, _, u) = setup(0.3, Potential::regular());
        let traj = system.solve_state(&u).unwrap();
        let mut rng = Lcg::new(7);
        let h1 = random_control(&mut rng, &system.grid, &system.time);
        let h2 = random_control(&mut rng, &system.grid, &system.time);
        let a = solve_linearized(&system, &traj, &h1).unwrap();
        let b = solve_linearized(&system, &traj, &h2).unwrap();
        let c = solve_linearized(&system, &traj, &h1.axpy(1.0, &h2)).unwrap();
        for k in 0..=system.time.steps() {
            let sum = a.psi[k].axpy(1.0, &b.psi[k]);
            let scale = system.grid.norm(&c.psi[k]).max(1e-300);
            assert!(system.grid.norm(&sum.axpy(-1.0, &c.psi[k])) <= 1e-11 * scale.max(1.0));
        }
    }

    #[test]
    fn zero_tracking_weights_give_zero_adjoint() {
        let (system, mut cost, u) = setup(0.3, Potential::regular());
        cost.b1 = 0.0;
        cost.b2 = 0.0;
        let traj = system.solve_state(&u).unwrap();
        let adj = solve_adjoint(&system, &traj, &cost, &u).unwrap();
        for k in 0..system.time.steps() {
            assert!(adj.p[k].iter().chain(adj.q[k].iter()).chain(adj.r[k].iter()).all(|&x| x == 0.0));
            assert_eq!(adj.grad_smooth[k], u.u[k].scaled(cost.b3));
        }
    }

    #[test]
    fn transpose_is_exact() {
        for (alpha, pot) in [
            (0.3, Potential::regular()),
            (0.0, Potential::regular()),
            (0.05, Potential::logarithmic(1.5).unwrap()),
        ] {
            let (system, _, u) = setup(alpha, pot);
            let traj = system.solve_state(&u).unwrap();
            let mut rng = Lcg::new(11);
            let dt = system.time.dt();
            for _ in 0..3 {
                let h = random_control(&mut rng, &system.grid, &system.time);
                let seed = random_control(&mut rng, &system.grid, &system.time);
                let lin = solve_linearized(&system, &traj, &h).unwrap();
                let lhs = space_time_dot(&system.grid, dt, &lin.psi[1..], &seed.u);
                let back = linearized_transpose(&system, &traj, &seed.u).unwrap();
                let rhs = space_time_dot(&system.grid, dt, &h.u, &back);
                assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(rhs.abs()), "{lhs} vs {rhs}");
            }
        }
    }

    #[test]
    fn gradient_matches_linearized_chain_rule_and_finite_differences() {
        let (system, cost, u) = setup(0.2, Potential::regular());
        let traj = system.solve_state(&u).unwrap();
        let adj = solve_adjoint(&system, &traj, &cost, &u).unwrap();
        let dt = system.time.dt();
        let mut rng = Lcg::new(3);
        let h = random_control(&mut rng, &system.grid, &system.time);
        let lin = solve_linearized(&system, &traj, &h).unwrap();
        let chain = tracking_derivative(&system, &traj, &cost, &lin)
            + cost.b3 * space_time_dot(&system.grid, dt, &u.u, &h.u);
        let adjoint = space_time_dot(&system.grid, dt, &adj.grad_smooth, &h.u);
        assert!((chain - adjoint).abs() <= 1e-9 * chain.abs());

        let rows = gradient_check(&system, &cost, &u, &h, &[1e-3, 1e-5]).unwrap();
        assert_eq!(rows[1].adjoint_value, adjoint);
        assert!(rows[1].rel_error <= 1e-6, "{rows:?}");
    }

    #[test]
    fn limit_adjoint_satisfies_elliptic_relation() {
        let (system, cost, u) = setup(0.0, Potential::regular());
        let traj = system.solve_state(&u).unwrap();
        let adj = solve_adjoint(&system, &traj, &cost, &u).unwrap();
        for k in 0..system.time.steps() {
            let lp = system.grid.laplacian_unchecked(&adj.p[k]);
            let scale = system.grid.norm(&adj.q[k]).max(1.0);
            let res = lp.zip_map(&adj.q[k], |l, q| -l - q);
            assert!(system.grid.norm(&res) <= 1e-9 * scale);
        }
    }

    #[test]
    fn r_matches_exponential_quadrature_to_first_order() {
        // r(t) = (1/gamma) int_t^T exp(-(s - t)/gamma) q(s) ds with q piecewise
        // constant on (t_{j-1}, t_j]
        let setup = ConsistencySetup::default();
        let mut errors = Vec::new();
        for level in 0..3 {
            let (system, cost, u) = setup.build(level).unwrap();
            let traj = system.solve_state(&u).unwrap();
            let adj = solve_adjoint(&system, &traj, &cost, &u).unwrap();
            let nt = system.time.steps();
            let gamma = system.params.gamma;
            let mut err: f64 = 0.0;
            for k in 1..=nt {
                let tk = system.time.t(k);
                let mut exact = Field::zeros(system.grid.len());
                for j in k + 1..=nt {
                    let w = (-(system.time.t(j - 1) - tk) / gamma).exp()
                        - (-(system.time.t(j) - tk) / gamma).exp();
                    exact = exact.axpy(w, &adj.q[j - 1]);
                }
                let d = adj.r[k - 1].axpy(-1.0, &exact);
                err = err.max(system.grid.norm(&d));
            }
            errors.push(err);
        }
        for pair in errors.windows(2) {
            let ratio = pair[0] / pair[1];
            assert!(ratio > 1.8 && ratio < 2.3, "{errors:?}");
        }
    }

    #[test]
    fn taylor_remainder_is_quadratic() {
        for (alpha, pot) in [(0.2, Potential::regular()), (0.2, Potential::logarithmic(1.5).unwrap())] {
            let (system, _, u) = setup(alpha, pot);
            let h = ControlTrajectory::sample(&system.grid, &system.time, |x, _, t| (PI * x).cos() * (1.0 + t));
            let rows = taylor_test(&system, &u, &h, &[1e-2, 1e-3, 1e-4]).unwrap();
            for row in &rows[1..] {
                let slope = row.slope.unwrap();
                assert!((slope - 2.0).abs() <= 0.1, "{rows:?}");
            }
        }
    }

    #[test]
    fn duality_rows() {
        let (system, _, u) = setup(0.3, Potential::regular());
        let traj = system.solve_state(&u).unwrap();
        let mut rng = Lcg::new(42);
        let h = random_control(&mut rng, &system.grid, &system.time);
        let s = random_control(&mut rng, &system.grid, &system.time);
        let row = duality_check(&system, &traj, &h, &s.u).unwrap();
        assert!(row.rel_error <= 1e-10, "{row:?}");
    }

    #[test]
    fn consistency_residuals_decrease() {
        for alpha in [0.1, 0.0] {
            let setup = ConsistencySetup {
                alpha,
                ..ConsistencySetup::default()
            };
            let rows = adjoint_consistency_study(&setup, 3).unwrap();
            for pair in rows.windows(2) {
                let ratio = pair[0].total / pair[1].total;
                assert!(ratio >= 1.8, "alpha {alpha}: {rows:?}");
            }
        }
    }
}
