//! Implicit time stepping of the state system
//!
//! ```text
//! alpha mu_tt + phi_t - Lap mu          = 0
//! tau phi_t   - Lap phi + f'(phi)       = mu + w
//! gamma w_t   + w                       = u
//! ```
//!
//! with homogeneous Neumann conditions. Each step first advances `w` by
//! implicit Euler, then solves the coupled nonlinear residuals for
//! `(mu^{n+1}, phi^{n+1})` with Newton's method:
//!
//! ```text
//! R1 = alpha (mu^{n+1} - 2 mu^n + mu^{n-1}) / dt^2 + (phi^{n+1} - phi^n) / dt
//!      - Lap_h mu^{n+1} - g_mu
//! R2 = tau (phi^{n+1} - phi^n) / dt - Lap_h phi^{n+1} + f'(phi^{n+1})
//!      - mu^{n+1} - w^{n+1} - g_phi
//! ```
//!
//! The ghost level `mu^{-1} = mu_0 - dt nu_0` encodes the initial velocity.
//! `alpha = 0` drops the second difference and gives the viscous
//! Cahn-Hilliard limit; `mu_0` and `nu_0` are then unused.

use log::warn;

use crate::banded::{BandLu, BandMatrix};
use crate::grid::{Field, Grid};
use crate::potentials::{Potential, PotentialKind};
use crate::{Error, Result};

/// Below this value of `alpha` the second difference is dropped.
pub const ALPHA_CUTOFF: f64 = 1e-14;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    final_time: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(final_time: f64, steps: usize) -> Result<Self> {
        if !(final_time.is_finite() && final_time > 0.0) {
            return Err(Error::invalid("final_time", "must be positive"));
        }
        if steps < 2 {
            return Err(Error::invalid("nt", "need at least 2 time steps"));
        }
        Ok(Self { final_time, steps })
    }

    pub fn final_time(&self) -> f64 {
        self.final_time
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.final_time / self.steps as f64
    }

    /// Time of level `n`.
    pub fn t(&self, n: usize) -> f64 {
        n as f64 * self.dt()
    }

    /// Trapezoidal weight of level `n` in `sum_n c_n g(t_n)`.
    pub fn trapezoid_weight(&self, n: usize) -> f64 {
        if n == 0 || n == self.steps {
            0.5 * self.dt()
        } else {
            self.dt()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateParams {
    pub alpha: f64,
    pub tau: f64,
    pub gamma: f64,
}

impl StateParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha <= 1.0) {
            return Err(Error::invalid("alpha", "must be in [0,1]"));
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::invalid("tau", "must be positive"));
        }
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return Err(Error::invalid("gamma", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InitialData {
    pub mu0: Field,
    pub nu0: Field,
    pub phi0: Field,
    pub w0: Field,
}

impl InitialData {
    /// Spatially constant data.
    pub fn constant(grid: &Grid, mu0: f64, nu0: f64, phi0: f64, w0: f64) -> Self {
        Self {
            mu0: grid.constant(mu0),
            nu0: grid.constant(nu0),
            phi0: grid.constant(phi0),
            w0: grid.constant(w0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonOptions {
    /// Relative tolerance on the weighted residual norm.
    pub tol: f64,
    pub max_iter: usize,
    /// Fraction-to-boundary factor for the logarithmic potential.
    pub damping: f64,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            tol: 1e-11,
            max_iter: 30,
            damping: 0.95,
        }
    }
}

/// Piecewise-constant-in-time control: entry `k` acts on `(t_k, t_{k+1}]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlTrajectory {
    pub u: Vec<Field>,
}

impl ControlTrajectory {
    pub fn zeros(grid: &Grid, time: &TimeGrid) -> Self {
        Self::constant(grid, time, 0.0)
    }

    pub fn constant(grid: &Grid, time: &TimeGrid, value: f64) -> Self {
        Self {
            u: vec![grid.constant(value); time.steps()],
        }
    }

    /// Samples `u(x, y, t)` at the right end of every step interval.
    pub fn sample(grid: &Grid, time: &TimeGrid, f: impl Fn(f64, f64, f64) -> f64) -> Self {
        Self {
            u: (1..=time.steps())
                .map(|n| {
                    let t = time.t(n);
                    grid.sample(|x, y| f(x, y, t))
                })
                .collect(),
        }
    }

    pub fn steps(&self) -> usize {
        self.u.len()
    }

    pub fn check(&self, grid: &Grid, time: &TimeGrid) -> Result<()> {
        if self.u.len() != time.steps() {
            return Err(Error::DimensionMismatch {
                expected: time.steps(),
                found: self.u.len(),
            });
        }
        self.u.iter().try_for_each(|f| grid.check(f))
    }

    /// `self + factor * other`, level by level.
    pub fn axpy(&self, factor: f64, other: &ControlTrajectory) -> Self {
        Self {
            u: self
                .u
                .iter()
                .zip(&other.u)
                .map(|(a, b)| a.axpy(factor, b))
                .collect(),
        }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            u: self.u.iter().map(|a| a.scaled(factor)).collect(),
        }
    }

    pub fn linf(&self) -> f64 {
        self.u
            .iter()
            .flat_map(|f| f.iter())
            .fold(0.0, |m: f64, v| m.max(v.abs()))
    }

    pub fn is_admissible(&self, bounds: &Bounds) -> bool {
        self.u.iter().all(|level| {
            level
                .iter()
                .zip(bounds.lower.iter().zip(bounds.upper.iter()))
                .all(|(v, (lo, hi))| lo <= v && v <= hi)
        })
    }
}

/// Nodewise box constraints, constant in time.
#[derive(Debug, Clone, PartialEq)]
pub struct Bounds {
    pub lower: Field,
    pub upper: Field,
}

impl Bounds {
    pub fn new(lower: Field, upper: Field) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::DimensionMismatch {
                expected: lower.len(),
                found: upper.len(),
            });
        }
        if lower.iter().zip(upper.iter()).any(|(lo, hi)| !(lo <= hi)) {
            return Err(Error::invalid("bounds", "lower bound exceeds upper bound"));
        }
        Ok(Self { lower, upper })
    }

    pub fn uniform(grid: &Grid, lower: f64, upper: f64) -> Result<Self> {
        Self::new(grid.constant(lower), grid.constant(upper))
    }

    /// Largest `upper - lower` over the nodes.
    pub fn width(&self) -> f64 {
        self.lower
            .iter()
            .zip(self.upper.iter())
            .map(|(lo, hi)| hi - lo)
            .fold(0.0, f64::max)
    }
}

/// Manufactured source terms appended to the `mu` and `phi` equations.
#[derive(Debug, Clone, PartialEq)]
pub struct MmsSources {
    pub g_mu: Vec<Field>,
    pub g_phi: Vec<Field>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct NewtonStats {
    pub iterations: usize,
    /// Weighted residual norm before every iteration and after the last.
    pub residuals: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateTrajectory {
    pub mu: Vec<Field>,
    pub phi: Vec<Field>,
    pub w: Vec<Field>,
    /// Ghost level `mu^{-1} = mu_0 - dt nu_0`.
    pub mu_prev: Field,
    pub newton_stats: Vec<NewtonStats>,
    /// The relaxation coefficient actually used (0 below the cutoff).
    pub alpha: f64,
}

impl StateTrajectory {
    pub fn levels(&self) -> usize {
        self.phi.len()
    }

    /// Residual of the discrete mean identity at every level `n >= 1`:
    /// `alpha (mean mu^n - mean mu^{n-1}) / dt + mean phi^n
    ///   - (alpha mean nu_0 + mean phi_0)`,
    /// relative to `max(1, |alpha mean nu_0| + |mean phi_0|)`.
    /// For `alpha = 0` this is plain mass conservation.
    pub fn mean_identity_residuals(&self, grid: &Grid, dt: f64, initial: &InitialData) -> Vec<f64> {
        let alpha = self.alpha;
        let target_velocity = alpha * grid.mean_unchecked(&initial.nu0);
        let target_mass = grid.mean_unchecked(&initial.phi0);
        let scale = (target_velocity.abs() + target_mass.abs()).max(1.0);
        let mut prev = grid.mean_unchecked(&self.mu_prev);
        (0..self.levels())
            .map(|n| {
                let m_mu = grid.mean_unchecked(&self.mu[n]);
                let m_phi = grid.mean_unchecked(&self.phi[n]);
                let velocity = alpha * (m_mu - prev) / dt;
                prev = m_mu;
                if n == 0 && alpha == 0.0 {
                    return (m_phi - target_mass) / scale;
                }
                (velocity + m_phi - target_velocity - target_mass) / scale
            })
            .collect()
    }
}

/// Global extrema of `phi` and the distance to the potential's domain ends.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeparationReport {
    pub phi_min: f64,
    pub phi_max: f64,
    /// `+inf` for the regular potential.
    pub margin: f64,
}

pub fn separation_report(traj: &StateTrajectory, potential: &Potential) -> SeparationReport {
    let phi_min = traj.phi.iter().map(Field::min).fold(f64::INFINITY, f64::min);
    let phi_max = traj
        .phi
        .iter()
        .map(Field::max)
        .fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = potential.domain();
    let margin = match potential.kind() {
        PotentialKind::Regular => f64::INFINITY,
        PotentialKind::Logarithmic => (phi_min - lo).min(hi - phi_max),
    };
    SeparationReport {
        phi_min,
        phi_max,
        margin,
    }
}

/// Implicit Euler step of `gamma w_t + w = u`.
pub fn w_step(gamma: f64, dt: f64, w_prev: &[f64], u_cur: &[f64]) -> Field {
    let c = gamma / dt;
    Field(
        w_prev
            .iter()
            .zip(u_cur)
            .map(|(w, u)| (c * w + u) / (c + 1.0))
            .collect(),
    )
}

/// Index of the `mu` unknown of a node in the interleaved ordering.
#[inline]
pub(crate) fn mu_index(node: usize) -> usize {
    2 * node
}

#[inline]
pub(crate) fn phi_index(node: usize) -> usize {
    2 * node + 1
}

/// Assembles the block operator
///
/// ```text
/// [ a I - L          c_mu_phi I         ]
/// [ c_phi_mu I       b I - L + diag(d)  ]
/// ```
///
/// in the interleaved `(mu_i, phi_i)` ordering.
pub(crate) fn assemble_block(
    grid: &Grid,
    a: f64,
    b: f64,
    c_mu_phi: f64,
    c_phi_mu: f64,
    diag: &[f64],
) -> BandMatrix {
    let nodes = grid.len();
    let band = 2 * grid.node_bandwidth();
    let mut m = BandMatrix::zeros(2 * nodes, band, band);
    for node in 0..nodes {
        let (im, ip) = (mu_index(node), phi_index(node));
        m.add(im, im, a);
        m.add(ip, ip, b + diag[node]);
        m.add(im, ip, c_mu_phi);
        m.add(ip, im, c_phi_mu);
        grid.laplacian_row(node, |col, coeff| {
            m.add(im, mu_index(col), -coeff);
            m.add(ip, phi_index(col), -coeff);
        });
    }
    m
}

/// Everything needed to run the forward model except the control.
#[derive(Debug, Clone)]
pub struct StateSystem {
    pub grid: Grid,
    pub time: TimeGrid,
    pub params: StateParams,
    pub potential: Potential,
    pub initial: InitialData,
    pub newton: NewtonOptions,
}

impl StateSystem {
    pub fn new(
        grid: Grid,
        time: TimeGrid,
        params: StateParams,
        potential: Potential,
        initial: InitialData,
    ) -> Result<Self> {
        let system = Self {
            grid,
            time,
            params,
            potential,
            initial,
            newton: NewtonOptions::default(),
        };
        system.validate()?;
        Ok(system)
    }

    pub fn with_newton(mut self, newton: NewtonOptions) -> Self {
        self.newton = newton;
        self
    }

    /// Copy with a different relaxation coefficient.
    pub fn with_alpha(&self, alpha: f64) -> Self {
        let mut s = self.clone();
        s.params.alpha = alpha;
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        let init = &self.initial;
        for f in [&init.mu0, &init.nu0, &init.phi0, &init.w0] {
            self.grid.check(f)?;
            if !f.is_finite() {
                return Err(Error::invalid("initial", "non-finite initial data"));
            }
        }
        if let Some(&bad) = init.phi0.iter().find(|&&v| !self.potential.in_domain(v)) {
            return Err(Error::DomainViolation { value: bad });
        }
        Ok(())
    }

    /// Relaxation coefficient used by the stepper.
    pub fn effective_alpha(&self) -> f64 {
        if self.params.alpha < ALPHA_CUTOFF {
            0.0
        } else {
            self.params.alpha
        }
    }

    pub fn solve_state(&self, u: &ControlTrajectory) -> Result<StateTrajectory> {
        self.solve_with_sources(u, None)
    }

    pub fn solve_with_sources(
        &self,
        u: &ControlTrajectory,
        sources: Option<&MmsSources>,
    ) -> Result<StateTrajectory> {
        u.check(&self.grid, &self.time)?;
        if let Some(s) = sources {
            for list in [&s.g_mu, &s.g_phi] {
                if list.len() != self.time.steps() {
                    return Err(Error::DimensionMismatch {
                        expected: self.time.steps(),
                        found: list.len(),
                    });
                }
            }
        }
        if self.params.alpha > 0.0 && self.params.alpha < ALPHA_CUTOFF {
            warn!(
                "alpha = {:e} is below {:e}; using the alpha = 0 solver",
                self.params.alpha, ALPHA_CUTOFF
            );
        }
        let alpha = self.effective_alpha();
        let dt = self.time.dt();
        let nt = self.time.steps();
        let init = &self.initial;
        let mu_prev = init.mu0.axpy(-dt, &init.nu0);

        let mut mu = Vec::with_capacity(nt + 1);
        let mut phi = Vec::with_capacity(nt + 1);
        let mut w = Vec::with_capacity(nt + 1);
        let mut stats = Vec::with_capacity(nt);
        mu.push(init.mu0.clone());
        phi.push(init.phi0.clone());
        w.push(init.w0.clone());
        for k in 0..nt {
            let mu_old = if k == 0 { &mu_prev } else { &mu[k - 1] };
            let src = sources.map(|s| (&s.g_mu[k], &s.g_phi[k]));
            let step = self.state_step(alpha, k, &mu[k], mu_old, &phi[k], &w[k], &u.u[k], src)?;
            mu.push(step.mu);
            phi.push(step.phi);
            w.push(step.w);
            stats.push(step.stats);
        }
        Ok(StateTrajectory {
            mu,
            phi,
            w,
            mu_prev,
            newton_stats: stats,
            alpha,
        })
    }

    /// One time step from level `k` to `k + 1`.
    #[allow(clippy::too_many_arguments)]
    pub fn state_step(
        &self,
        alpha: f64,
        k: usize,
        mu_cur: &Field,
        mu_old: &Field,
        phi_cur: &Field,
        w_cur: &Field,
        u_next: &Field,
        sources: Option<(&Field, &Field)>,
    ) -> Result<StepResult> {
        let grid = &self.grid;
        let dt = self.time.dt();
        let tau = self.params.tau;
        let n = grid.len();
        let w_new = w_step(self.params.gamma, dt, w_cur, u_next);
        let a = alpha / (dt * dt);

        // known parts of R1 and R2, moved to the right-hand side
        let mut c1: Vec<f64> = (0..n)
            .map(|i| a * (2.0 * mu_cur[i] - mu_old[i]) + phi_cur[i] / dt)
            .collect();
        let mut c2: Vec<f64> = (0..n).map(|i| tau * phi_cur[i] / dt + w_new[i]).collect();
        if let Some((g_mu, g_phi)) = sources {
            for i in 0..n {
                c1[i] += g_mu[i];
                c2[i] += g_phi[i];
            }
        }
        let scale = 1.0 + grid.norm(&c1) + grid.norm(&c2);
        let opts = &self.newton;
        let tol = opts.tol * scale;

        let mut mu = mu_cur.clone();
        let mut phi = phi_cur.clone();
        let mut stats = NewtonStats::default();
        let residual = |mu: &Field, phi: &Field| -> (Vec<f64>, Vec<f64>) {
            let lmu = grid.laplacian_unchecked(mu);
            let lphi = grid.laplacian_unchecked(phi);
            let r1 = (0..n)
                .map(|i| a * mu[i] + phi[i] / dt - lmu[i] - c1[i])
                .collect();
            let r2 = (0..n)
                .map(|i| {
                    tau * phi[i] / dt - lphi[i] + self.potential.prime(phi[i]) - mu[i] - c2[i]
                })
                .collect();
            (r1, r2)
        };

        let (mut r1, mut r2) = residual(&mu, &phi);
        let mut res = (grid.dot(&r1, &r1) + grid.dot(&r2, &r2)).sqrt();
        stats.residuals.push(res);
        let mut prev_res = f64::INFINITY;
        loop {
            if !res.is_finite() {
                return Err(Error::NewtonDivergence {
                    step: k,
                    iterations: stats.iterations,
                    residual: res,
                });
            }
            // stop at round-off: either far below tol, or no longer contracting
            if res <= tol && (res <= 1e-3 * tol || res > 0.1 * prev_res) {
                break;
            }
            if stats.iterations >= opts.max_iter {
                if res <= tol {
                    break;
                }
                return Err(Error::NewtonDivergence {
                    step: k,
                    iterations: stats.iterations,
                    residual: res,
                });
            }
            let fpp: Vec<f64> = phi.iter().map(|&p| self.potential.second(p)).collect();
            let jac = assemble_block(grid, a, tau / dt, 1.0 / dt, -1.0, &fpp).factor()?;
            let mut rhs = vec![0.0; 2 * n];
            for i in 0..n {
                rhs[mu_index(i)] = -r1[i];
                rhs[phi_index(i)] = -r2[i];
            }
            jac.solve_in_place(&mut rhs);
            let t = self.step_length(&phi, &rhs)?;
            for i in 0..n {
                mu[i] += t * rhs[mu_index(i)];
                phi[i] += t * rhs[phi_index(i)];
            }
            stats.iterations += 1;
            let next = residual(&mu, &phi);
            r1 = next.0;
            r2 = next.1;
            prev_res = res;
            res = (grid.dot(&r1, &r1) + grid.dot(&r2, &r2)).sqrt();
            stats.residuals.push(res);
        }
        if !(mu.is_finite() && phi.is_finite()) {
            return Err(Error::NewtonDivergence {
                step: k,
                iterations: stats.iterations,
                residual: res,
            });
        }
        Ok(StepResult {
            mu,
            phi,
            w: w_new,
            stats,
        })
    }

    /// Fraction-to-boundary step length keeping `phi` at least `safeguard`
    /// away from `+-1`. Always 1 for the regular potential.
    fn step_length(&self, phi: &[f64], delta: &[f64]) -> Result<f64> {
        if self.potential.kind() == PotentialKind::Regular {
            return Ok(1.0);
        }
        let limit = 1.0 - self.potential.safeguard();
        let mut t_max = f64::INFINITY;
        for (i, &p) in phi.iter().enumerate() {
            let d = delta[phi_index(i)];
            let room = if d > 0.0 { limit - p } else { limit + p };
            if room <= 0.0 {
                return Err(Error::DomainViolation { value: p });
            }
            if d != 0.0 {
                t_max = t_max.min(room / d.abs());
            }
        }
        let t = (self.newton.damping * t_max).min(1.0);
        if t < 1e-14 {
            let worst = phi.iter().fold(0.0_f64, |m, p| m.max(p.abs()));
            return Err(Error::DomainViolation { value: worst });
        }
        Ok(t)
    }

    /// Factored step Jacobian at a converged `phi^{k+1}`.
    pub(crate) fn step_jacobian(&self, alpha: f64, phi_next: &[f64], adjoint: bool) -> Result<BandLu> {
        let dt = self.time.dt();
        let a = alpha / (dt * dt);
        let fpp: Vec<f64> = phi_next.iter().map(|&p| self.potential.second(p)).collect();
        let (c_mu_phi, c_phi_mu) = if adjoint {
            (-1.0, 1.0 / dt)
        } else {
            (1.0 / dt, -1.0)
        };
        assemble_block(
            &self.grid,
            a,
            self.params.tau / dt,
            c_mu_phi,
            c_phi_mu,
            &fpp,
        )
        .factor()
    }
}

#[derive(Debug, Clone)]
pub struct StepResult {
    pub mu: Field,
    pub phi: Field,
    pub w: Field,
    pub stats: NewtonStats,
}
