//! Uniform box grids with homogeneous Neumann boundary conditions.
//!
//! Nodes sit on the boundary. The Laplacian uses the second-order centered
//! stencil with mirror ghost nodes, and all integrals use trapezoidal node
//! weights. With these two choices `W * L` is symmetric and annihilates
//! constants, so discrete integration by parts holds exactly:
//! `<L a, b> = <a, L b>` and `<L a, 1> = 0`.

use std::ops::{Deref, DerefMut};

use crate::{Error, Result};

/// Uniform node-centred grid on an interval or a rectangle.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    dim: usize,
    extents: [f64; 2],
    counts: [usize; 2],
    spacing: [f64; 2],
    weights: Vec<f64>,
}

impl Grid {
    /// Interval `[0, length]` with `count` nodes.
    pub fn interval(length: f64, count: usize) -> Result<Self> {
        Self::build(1, [length, 1.0], [count, 1])
    }

    /// Rectangle `[0, lx] x [0, ly]` with `nx * ny` nodes.
    pub fn rectangle(lx: f64, ly: f64, nx: usize, ny: usize) -> Result<Self> {
        Self::build(2, [lx, ly], [nx, ny])
    }

    fn build(dim: usize, extents: [f64; 2], counts: [usize; 2]) -> Result<Self> {
        let mut spacing = [1.0; 2];
        for axis in 0..dim {
            if counts[axis] < 3 {
                return Err(Error::invalid("counts", "need at least 3 nodes per axis"));
            }
            if !(extents[axis].is_finite() && extents[axis] > 0.0) {
                return Err(Error::invalid("extents", "side lengths must be positive"));
            }
            spacing[axis] = extents[axis] / (counts[axis] - 1) as f64;
        }
        let axis_weights: Vec<Vec<f64>> = (0..2)
            .map(|axis| {
                if axis >= dim {
                    return vec![1.0];
                }
                let n = counts[axis];
                let h = spacing[axis];
                (0..n)
                    .map(|i| if i == 0 || i == n - 1 { 0.5 * h } else { h })
                    .collect()
            })
            .collect();
        let mut weights = Vec::with_capacity(counts[0] * counts[1]);
        for wy in &axis_weights[1] {
            for wx in &axis_weights[0] {
                weights.push(wx * wy);
            }
        }
        Ok(Self {
            dim,
            extents,
            counts,
            spacing,
            weights,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn extents(&self) -> &[f64] {
        &self.extents[..self.dim]
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts[..self.dim]
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing[..self.dim]
    }

    /// Total number of nodes.
    pub fn len(&self) -> usize {
        self.counts[0] * self.counts[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Lebesgue measure of the domain.
    pub fn measure(&self) -> f64 {
        self.extents[..self.dim].iter().product()
    }

    /// Trapezoidal quadrature weight of every node.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Physical coordinates of a node (`y = 0` in 1D).
    pub fn coords(&self, node: usize) -> [f64; 2] {
        let ix = node % self.counts[0];
        let iy = node / self.counts[0];
        [
            ix as f64 * self.spacing[0],
            if self.dim == 2 {
                iy as f64 * self.spacing[1]
            } else {
                0.0
            },
        ]
    }

    /// Stride between neighbouring nodes along the slowest axis.
    pub(crate) fn node_bandwidth(&self) -> usize {
        if self.dim == 2 {
            self.counts[0]
        } else {
            1
        }
    }

    /// Calls `visit(column, coefficient)` for every nonzero of row `node` of
    /// the Laplacian matrix. The diagonal is visited once per axis.
    pub(crate) fn laplacian_row(&self, node: usize, mut visit: impl FnMut(usize, f64)) {
        let nx = self.counts[0];
        let pos = [node % nx, node / nx];
        let stride = [1, nx];
        for axis in 0..self.dim {
            let n = self.counts[axis];
            let i = pos[axis];
            let s = stride[axis];
            let inv_h2 = 1.0 / (self.spacing[axis] * self.spacing[axis]);
            if i == 0 {
                visit(node, -2.0 * inv_h2);
                visit(node + s, 2.0 * inv_h2);
            } else if i == n - 1 {
                visit(node - s, 2.0 * inv_h2);
                visit(node, -2.0 * inv_h2);
            } else {
                visit(node - s, inv_h2);
                visit(node, -2.0 * inv_h2);
                visit(node + s, inv_h2);
            }
        }
    }

    pub(crate) fn check(&self, field: &[f64]) -> Result<()> {
        if field.len() != self.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                found: field.len(),
            });
        }
        Ok(())
    }

    /// Field with every value equal to `value`.
    pub fn constant(&self, value: f64) -> Field {
        Field(vec![value; self.len()])
    }

    /// Field sampled from a function of the node coordinates.
    pub fn sample(&self, f: impl Fn(f64, f64) -> f64) -> Field {
        Field(
            (0..self.len())
                .map(|node| {
                    let [x, y] = self.coords(node);
                    f(x, y)
                })
                .collect(),
        )
    }

    /// `Delta_h v` with mirror ghost nodes.
    pub fn laplacian_apply(&self, v: &[f64]) -> Result<Field> {
        self.check(v)?;
        Ok(self.laplacian_unchecked(v))
    }

    pub(crate) fn laplacian_unchecked(&self, v: &[f64]) -> Field {
        let mut out = vec![0.0; v.len()];
        for (node, slot) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            self.laplacian_row(node, |col, c| acc += c * v[col]);
            *slot = acc;
        }
        Field(out)
    }

    /// Discrete `L^2(Omega)` inner product with trapezoidal weights.
    pub fn inner_product(&self, a: &[f64], b: &[f64]) -> Result<f64> {
        self.check(a)?;
        self.check(b)?;
        Ok(self.dot(a, b))
    }

    pub(crate) fn dot(&self, a: &[f64], b: &[f64]) -> f64 {
        self.weights
            .iter()
            .zip(a.iter().zip(b))
            .map(|(w, (x, y))| w * x * y)
            .sum()
    }

    pub(crate) fn norm(&self, a: &[f64]) -> f64 {
        self.dot(a, a).sqrt()
    }

    /// Spatial mean `|Omega|^{-1} <v, 1>`.
    pub fn mean(&self, v: &[f64]) -> Result<f64> {
        self.check(v)?;
        Ok(self.mean_unchecked(v))
    }

    pub(crate) fn mean_unchecked(&self, v: &[f64]) -> f64 {
        self.weights.iter().zip(v).map(|(w, x)| w * x).sum::<f64>() / self.measure()
    }

    pub fn norms(&self, v: &[f64]) -> Result<Norms> {
        self.check(v)?;
        let lap = self.laplacian_unchecked(v);
        let energy = -self.dot(&lap, v);
        Ok(Norms {
            l2: self.norm(v),
            linf: v.iter().fold(0.0_f64, |m, x| m.max(x.abs())),
            // round-off can leave a tiny negative energy for constants
            h1_semi: energy.max(0.0).sqrt(),
        })
    }
}

/// Norms of a single field.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Norms {
    pub l2: f64,
    pub linf: f64,
    pub h1_semi: f64,
}

/// Nodal values of one scalar quantity at one time level.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Field(pub Vec<f64>);

impl Field {
    pub fn zeros(len: usize) -> Self {
        Field(vec![0.0; len])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// `self + factor * other`
    pub fn axpy(&self, factor: f64, other: &[f64]) -> Field {
        Field(
            self.0
                .iter()
                .zip(other)
                .map(|(a, b)| a + factor * b)
                .collect(),
        )
    }

    pub fn scaled(&self, factor: f64) -> Field {
        Field(self.0.iter().map(|a| factor * a).collect())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Field {
        Field(self.0.iter().map(|&a| f(a)).collect())
    }

    pub fn zip_map(&self, other: &[f64], f: impl Fn(f64, f64) -> f64) -> Field {
        Field(self.0.iter().zip(other).map(|(&a, &b)| f(a, b)).collect())
    }

    pub fn min(&self) -> f64 {
        self.0.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

impl From<Vec<f64>> for Field {
    fn from(values: Vec<f64>) -> Self {
        Field(values)
    }
}

impl Deref for Field {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for Field {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}
