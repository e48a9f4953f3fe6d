//! Manufactured-solution convergence studies for the state solver.
//!
//! Two exact solutions, both with `u = 0`, `w_0 = 0` (so `w = 0`) and
//! `k = pi / L`:
//!
//! * time study: `mu* = cos(kx) cos t`, `phi* = m + 0.3 cos(kx) sin t`,
//!   refined in `dt` on a fine fixed grid;
//! * space study: `mu* = cos(kx) (1 + t)`, `phi* = m + 0.3 cos(kx) t`,
//!   which the time discretization reproduces exactly (the second
//!   difference, the ghost level and the backward difference are all exact
//!   for functions linear in `t`), so only the spatial error remains.
//!
//! Sources are evaluated analytically at the new time level of each step.

use std::f64::consts::PI;

use crate::grid::{Field, Grid};
use crate::potentials::Potential;
use crate::state::{
    ControlTrajectory, InitialData, MmsSources, StateParams, StateSystem, TimeGrid,
};
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MmsKind {
    Space,
    Time,
}

impl MmsKind {
    pub fn name(&self) -> &'static str {
        match self {
            MmsKind::Space => "space",
            MmsKind::Time => "time",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MmsConfig {
    pub alpha: f64,
    pub tau: f64,
    pub gamma: f64,
    pub length: f64,
    pub final_time: f64,
    pub mean: f64,
    pub potential: Potential,
    /// Coarsest node count of the space study.
    pub base_nodes: usize,
    /// Fixed step count of the space study.
    pub space_steps: usize,
    /// Coarsest step count of the time study.
    pub base_steps: usize,
    /// Fixed node count of the time study.
    pub fine_nodes: usize,
    pub levels: usize,
}

impl Default for MmsConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            tau: 1.0,
            gamma: 1.0,
            length: 1.0,
            final_time: 1.0,
            mean: 0.1,
            potential: Potential::regular(),
            base_nodes: 17,
            space_steps: 16,
            base_steps: 128,
            fine_nodes: 1025,
            levels: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MmsRow {
    pub kind: MmsKind,
    pub nodes: usize,
    pub steps: usize,
    /// `max_n sqrt(|mu^n - mu*|^2 + |phi^n - phi*|^2)` in the discrete L2 norm.
    pub error: f64,
    /// `log2` of the error ratio to the previous row.
    pub order: Option<f64>,
}

/// Exact solution `(mu*, phi*)` and its analytic source terms.
struct Manufactured {
    kind: MmsKind,
    k: f64,
    m: f64,
    alpha: f64,
    tau: f64,
    potential: Potential,
}

impl Manufactured {
    /// `(mu*, mu*_tt, phi*, phi*_t)` as `cos(kx)` coefficients (phi* without
    /// the mean) at time `t`.
    fn time_profile(&self, t: f64) -> [f64; 4] {
        match self.kind {
            MmsKind::Time => [t.cos(), -t.cos(), 0.3 * t.sin(), 0.3 * t.cos()],
            MmsKind::Space => [1.0 + t, 0.0, 0.3 * t, 0.3],
        }
    }

    fn exact(&self, x: f64, t: f64) -> (f64, f64) {
        let [mu, _, phi, _] = self.time_profile(t);
        let c = (self.k * x).cos();
        (mu * c, self.m + phi * c)
    }

    fn sources(&self, x: f64, t: f64) -> (f64, f64) {
        let [mu, mu_tt, phi, phi_t] = self.time_profile(t);
        let c = (self.k * x).cos();
        let k2 = self.k * self.k;
        let g_mu = (self.alpha * mu_tt + phi_t + k2 * mu) * c;
        let phi_val = self.m + phi * c;
        let g_phi = (self.tau * phi_t + k2 * phi) * c + self.potential.prime(phi_val) - mu * c;
        (g_mu, g_phi)
    }

    fn initial_velocity(&self) -> f64 {
        match self.kind {
            MmsKind::Time => 0.0,
            MmsKind::Space => 1.0,
        }
    }
}

/// Error of one manufactured-solution run.
pub fn mms_error(cfg: &MmsConfig, kind: MmsKind, nodes: usize, steps: usize) -> Result<f64> {
    let grid = Grid::interval(cfg.length, nodes)?;
    let time = TimeGrid::new(cfg.final_time, steps)?;
    let ms = Manufactured {
        kind,
        k: PI / cfg.length,
        m: cfg.mean,
        alpha: cfg.alpha,
        tau: cfg.tau,
        potential: cfg.potential,
    };
    let nu = ms.initial_velocity();
    let initial = InitialData {
        mu0: grid.sample(|x, _| ms.exact(x, 0.0).0),
        nu0: grid.sample(|x, _| nu * (ms.k * x).cos()),
        phi0: grid.sample(|x, _| ms.exact(x, 0.0).1),
        w0: grid.constant(0.0),
    };
    let system = StateSystem::new(
        grid.clone(),
        time,
        StateParams {
            alpha: cfg.alpha,
            tau: cfg.tau,
            gamma: cfg.gamma,
        },
        cfg.potential,
        initial,
    )?;
    let (mut g_mu, mut g_phi) = (Vec::new(), Vec::new());
    for n in 1..=steps {
        let t = time.t(n);
        g_mu.push(grid.sample(|x, _| ms.sources(x, t).0));
        g_phi.push(grid.sample(|x, _| ms.sources(x, t).1));
    }
    let traj = system.solve_with_sources(
        &ControlTrajectory::zeros(&grid, &time),
        Some(&MmsSources { g_mu, g_phi }),
    )?;
    let mut worst: f64 = 0.0;
    for n in 1..=steps {
        let t = time.t(n);
        let e_mu: Field = traj.mu[n].zip_map(&grid.sample(|x, _| ms.exact(x, t).0), |a, b| a - b);
        let e_phi: Field = traj.phi[n].zip_map(&grid.sample(|x, _| ms.exact(x, t).1), |a, b| a - b);
        let e = (grid.dot(&e_mu, &e_mu) + grid.dot(&e_phi, &e_phi)).sqrt();
        // the alpha = 0 solver ignores mu_0, so only phi is compared there
        let e = if system.effective_alpha() == 0.0 {
            grid.norm(&e_phi)
        } else {
            e
        };
        worst = worst.max(e);
    }
    Ok(worst)
}

/// Runs `cfg.levels` nested refinements of the chosen study.
pub fn run_mms(cfg: &MmsConfig, kind: MmsKind) -> Result<Vec<MmsRow>> {
    let mut rows: Vec<MmsRow> = Vec::with_capacity(cfg.levels);
    for level in 0..cfg.levels {
        let (nodes, steps) = match kind {
            MmsKind::Space => ((cfg.base_nodes - 1) * (1 << level) + 1, cfg.space_steps),
            MmsKind::Time => (cfg.fine_nodes, cfg.base_steps * (1 << level)),
        };
        let error = mms_error(cfg, kind, nodes, steps)?;
        let order = rows.last().map(|prev| (prev.error / error).log2());
        rows.push(MmsRow {
            kind,
            nodes,
            steps,
            error,
            order,
        });
    }
    Ok(rows)
}
