//! Double-well potentials `f = f1 + f2` with a convex part `f1` and a
//! smooth concave perturbation `f2`.
//!
//! * Regular: `f(r) = (r^2 - 1)^2 / 4`, split as `f1 = r^4 / 4`,
//!   `f2 = 1/4 - r^2 / 2`.
//! * Logarithmic: `f(r) = (1+r) ln(1+r) + (1-r) ln(1-r) - c1 r^2` on
//!   `(-1, 1)`, split as `f1` = the two logarithmic terms, `f2 = -c1 r^2`.

use crate::{Error, Result};

/// Default minimum distance that Newton iterates keep from `+-1`.
pub const DEFAULT_SAFEGUARD: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PotentialKind {
    Regular,
    Logarithmic,
}

/// Which function of the potential to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    F,
    F1,
    F2,
    Prime,
    F1Prime,
    F2Prime,
    Second,
    Third,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Potential {
    kind: PotentialKind,
    c1: f64,
    safeguard: f64,
}

impl Potential {
    pub fn regular() -> Self {
        Self {
            kind: PotentialKind::Regular,
            c1: 0.0,
            safeguard: 0.0,
        }
    }

    /// Logarithmic potential; `c1 > 1` makes it a nonconvex double well.
    pub fn logarithmic(c1: f64) -> Result<Self> {
        Self::logarithmic_with_safeguard(c1, DEFAULT_SAFEGUARD)
    }

    pub fn logarithmic_with_safeguard(c1: f64, safeguard: f64) -> Result<Self> {
        if !(c1.is_finite() && c1 > 1.0) {
            return Err(Error::invalid("c1", "must exceed 1"));
        }
        if !(safeguard > 0.0 && safeguard < 0.5) {
            return Err(Error::invalid("safeguard", "must lie in (0, 0.5)"));
        }
        Ok(Self {
            kind: PotentialKind::Logarithmic,
            c1,
            safeguard,
        })
    }

    pub fn kind(&self) -> PotentialKind {
        self.kind
    }

    pub fn c1(&self) -> f64 {
        self.c1
    }

    pub fn safeguard(&self) -> f64 {
        self.safeguard
    }

    /// Open domain `(r-, r+)` of the potential.
    pub fn domain(&self) -> (f64, f64) {
        match self.kind {
            PotentialKind::Regular => (f64::NEG_INFINITY, f64::INFINITY),
            PotentialKind::Logarithmic => (-1.0, 1.0),
        }
    }

    /// Lipschitz constant of `f2'`.
    pub fn f2_prime_lipschitz(&self) -> f64 {
        match self.kind {
            PotentialKind::Regular => 1.0,
            PotentialKind::Logarithmic => 2.0 * self.c1,
        }
    }

    pub fn in_domain(&self, r: f64) -> bool {
        match self.kind {
            PotentialKind::Regular => r.is_finite(),
            PotentialKind::Logarithmic => r > -1.0 && r < 1.0,
        }
    }

    pub fn eval(&self, which: Component, r: f64) -> Result<f64> {
        if !self.in_domain(r) {
            return Err(Error::DomainViolation { value: r });
        }
        Ok(match which {
            Component::F => self.f1(r) + self.f2(r),
            Component::F1 => self.f1(r),
            Component::F2 => self.f2(r),
            Component::Prime => self.prime(r),
            Component::F1Prime => self.f1_prime(r),
            Component::F2Prime => self.f2_prime(r),
            Component::Second => self.second(r),
            Component::Third => self.third(r),
        })
    }

    fn f1(&self, r: f64) -> f64 {
        match self.kind {
            PotentialKind::Regular => 0.25 * r.powi(4),
            PotentialKind::Logarithmic => (1.0 + r) * r.ln_1p() + (1.0 - r) * (-r).ln_1p(),
        }
    }

    fn f2(&self, r: f64) -> f64 {
        match self.kind {
            PotentialKind::Regular => 0.25 - 0.5 * r * r,
            PotentialKind::Logarithmic => -self.c1 * r * r,
        }
    }

    fn f1_prime(&self, r: f64) -> f64 {
        match self.kind {
            PotentialKind::Regular => r * r * r,
            PotentialKind::Logarithmic => r.ln_1p() - (-r).ln_1p(),
        }
    }

    fn f2_prime(&self, r: f64) -> f64 {
        match self.kind {
            PotentialKind::Regular => -r,
            PotentialKind::Logarithmic => -2.0 * self.c1 * r,
        }
    }

    /// `f'(r)`. Callers guarantee `r` lies in the domain.
    pub(crate) fn prime(&self, r: f64) -> f64 {
        self.f1_prime(r) + self.f2_prime(r)
    }

    /// `f''(r)`. Callers guarantee `r` lies in the domain.
    pub(crate) fn second(&self, r: f64) -> f64 {
        match self.kind {
            PotentialKind::Regular => 3.0 * r * r - 1.0,
            PotentialKind::Logarithmic => 2.0 / ((1.0 - r) * (1.0 + r)) - 2.0 * self.c1,
        }
    }

    pub(crate) fn third(&self, r: f64) -> f64 {
        match self.kind {
            PotentialKind::Regular => 6.0 * r,
            PotentialKind::Logarithmic => {
                let s = (1.0 - r) * (1.0 + r);
                4.0 * r / (s * s)
            }
        }
    }

    /// Compares central differences of each analytic derivative with the next
    /// one: `f` against `f'`, `f'` against `f''`, `f''` against `f'''`.
    pub fn check_derivatives(&self, r: f64) -> Result<DerivativeReport> {
        let (lo, hi) = self.domain();
        if !self.in_domain(r) || r - lo < 1e-3 || hi - r < 1e-3 {
            return Err(Error::DomainViolation { value: r });
        }
        let step = match self.kind {
            PotentialKind::Regular => 1e-5,
            // shrink with the distance to the singular endpoints
            PotentialKind::Logarithmic => 1e-6 * (1.0 - r.abs()).min(1.0),
        };
        let central = |g: &dyn Fn(f64) -> f64| (g(r + step) - g(r - step)) / (2.0 * step);
        let f = |x: f64| self.f1(x) + self.f2(x);
        let fp = |x: f64| self.prime(x);
        let fpp = |x: f64| self.second(x);
        let fd = [central(&f), central(&fp), central(&fpp)];
        let exact = [self.prime(r), self.second(r), self.third(r)];
        let mut rel_error = [0.0; 3];
        for k in 0..3 {
            rel_error[k] = (fd[k] - exact[k]).abs() / exact[k].abs().max(1.0);
        }
        Ok(DerivativeReport {
            point: r,
            step,
            finite_difference: fd,
            analytic: exact,
            rel_error,
        })
    }
}

/// Central-difference check of `f'`, `f''`, `f'''` at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct DerivativeReport {
    pub point: f64,
    pub step: f64,
    pub finite_difference: [f64; 3],
    pub analytic: [f64; 3],
    /// Error relative to `max(|analytic|, 1)`.
    pub rel_error: [f64; 3],
}

impl DerivativeReport {
    pub fn max_rel_error(&self) -> f64 {
        self.rel_error.iter().copied().fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn log2() -> Potential {
        Potential::logarithmic(2.0).unwrap()
    }

    #[test]
    fn regular_values() {
        let p = Potential::regular();
        assert_eq!(p.eval(Component::F, 0.0).unwrap(), 0.25);
        assert_eq!(p.eval(Component::Prime, 1.0).unwrap(), 0.0);
        assert_eq!(p.eval(Component::Prime, -1.0).unwrap(), 0.0);
        assert_eq!(p.eval(Component::Second, 0.0).unwrap(), -1.0);
        assert_eq!(p.eval(Component::Third, 1.0).unwrap(), 6.0);
        for r in [-2.0, -0.3, 0.7, 5.0] {
            let sum = p.eval(Component::F1, r).unwrap() + p.eval(Component::F2, r).unwrap();
            assert!((sum - 0.25 * (r * r - 1.0_f64).powi(2)).abs() < 1e-12);
        }
    }

    #[test]
    fn logarithmic_endpoint_limit() {
        let p = log2();
        let r = 1.0 - 1e-8;
        let f = p.eval(Component::F1, r).unwrap() + p.eval(Component::F2, r).unwrap();
        assert!((f - (2.0 * 2.0_f64.ln() - 2.0)).abs() < 1e-6);
        assert_eq!(
            p.eval(Component::F, 1.0),
            Err(Error::DomainViolation { value: 1.0 })
        );
        assert!(p.eval(Component::Prime, -1.0).is_err());
        assert!(p.eval(Component::Second, 1.5).is_err());
    }

    #[test]
    fn logarithmic_derivatives() {
        let p = log2();
        let fp = p.eval(Component::Prime, 0.5).unwrap();
        assert!((fp - (3.0_f64.ln() - 2.0)).abs() < 1e-14);
        assert!((fp + 0.9014).abs() < 1e-4);
        assert!((p.eval(Component::Second, 0.0).unwrap() + 2.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_small_c1() {
        assert!(matches!(
            Potential::logarithmic(0.5),
            Err(Error::InvalidParameter { name: "c1", .. })
        ));
        assert!(Potential::logarithmic_with_safeguard(2.0, 0.7).is_err());
    }

    #[test]
    fn derivative_checks() {
        let reg = Potential::regular();
        let rep = reg.check_derivatives(0.3).unwrap();
        assert!((rep.analytic[0] - (0.027 - 0.3)).abs() < 1e-15);
        assert!((rep.finite_difference[0] - rep.analytic[0]).abs() / rep.analytic[0].abs() <= 1e-6);
        assert!(rep.max_rel_error() <= 1e-6);
        assert_eq!(reg.eval(Component::Prime, 0.0).unwrap(), 0.0);

        let log = log2();
        for r in [-0.999, -0.5, 0.0, 0.3, 0.9, 0.999] {
            let rep = log.check_derivatives(r).unwrap();
            assert!(rep.max_rel_error() <= 1e-6, "r = {r}: {rep:?}");
        }
        assert!(log.check_derivatives(0.9995).is_err());
    }

    #[test]
    fn convex_part_and_lipschitz_bound() {
        for p in [Potential::regular(), log2(), Potential::logarithmic(1.3).unwrap()] {
            assert_eq!(p.eval(Component::F1, 0.0).unwrap(), 0.0);
            let lip = p.f2_prime_lipschitz();
            let samples: Vec<f64> = (0..1000).map(|i| -0.999 + 1.998 * i as f64 / 999.0).collect();
            for &r in &samples {
                let f1pp = match p.kind() {
                    PotentialKind::Regular => 3.0 * r * r,
                    PotentialKind::Logarithmic => 2.0 / (1.0 - r * r),
                };
                assert!(f1pp >= 0.0);
                // f1'' = f'' - f2''
                let f2pp = -lip;
                assert!((p.second(r) - f2pp - f1pp).abs() < 1e-9 * f1pp.max(1.0));
            }
            for pair in samples.windows(2) {
                let q = (p.eval(Component::F2Prime, pair[1]).unwrap()
                    - p.eval(Component::F2Prime, pair[0]).unwrap())
                    / (pair[1] - pair[0]);
                assert!(q.abs() <= lip + 1e-9);
            }
        }
    }

    #[test]
    fn logarithmic_singularity_grows() {
        let p = log2();
        let values: Vec<f64> = (2..=12)
            .map(|k| p.eval(Component::F1Prime, 1.0 - 10f64.powi(-k)).unwrap())
            .collect();
        for pair in values.windows(2) {
            assert!(pair[1] > pair[0]);
        }
        assert!(values[values.len() - 1] > 25.0);
    }
}
