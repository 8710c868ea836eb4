//! Two-dimensional incompressible Navier–Stokes through its stacked FBSDE:
//! `X = x + √(2ν)W` and, per component, `f_i = −K_i − (2ν)^{-1/2} y ⟨1, z⟩`.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::bsde::{solve_bsde, solve_gradient, FbsdeSolution, GradientSolution, SolverConfig};
use crate::drivers::{Driver, TerminalCondition};
use crate::error::{domain, Result};
use crate::forward::{simulate_forward_from, ForwardModel};
use crate::grid::{PathEnsemble, TimeGrid};
use crate::regression::{Design, Projection, RegressionBasis};

/// Initial velocity `h = (−∂₂ψ, ∂₁ψ)` from a stream function `ψ`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum StreamFunction {
    /// `ψ = h₂x₁ − h₁x₂`, constant velocity.
    Constant { h: [f64; 2] },
    /// `ψ = A sin x₁ sin x₂`.
    TaylorGreen { amplitude: f64 },
    /// `ψ = A cos(x₁ − x₂)`.
    Shear { amplitude: f64 },
}

impl StreamFunction {
    pub fn velocity(&self, x: &[f64]) -> [f64; 2] {
        match *self {
            StreamFunction::Constant { h } => h,
            StreamFunction::TaylorGreen { amplitude: a } => [-a * x[0].sin() * x[1].cos(), a * x[0].cos() * x[1].sin()],
            StreamFunction::Shear { amplitude: a } => {
                let s = -a * (x[0] - x[1]).sin();
                [s, s]
            }
        }
    }

    /// `∂h_i/∂x_c` as `[i][c]`.
    pub fn jacobian(&self, x: &[f64]) -> [[f64; 2]; 2] {
        match *self {
            StreamFunction::Constant { .. } => [[0.0; 2]; 2],
            StreamFunction::TaylorGreen { amplitude: a } => {
                let (s1, c1, s2, c2) = (x[0].sin(), x[0].cos(), x[1].sin(), x[1].cos());
                [[-a * c1 * c2, a * s1 * s2], [-a * s1 * s2, a * c1 * c2]]
            }
            StreamFunction::Shear { amplitude: a } => {
                let c = -a * (x[0] - x[1]).cos();
                [[c, -c], [c, -c]]
            }
        }
    }

    fn sup(&self) -> f64 {
        match *self {
            StreamFunction::Constant { h } => h[0].abs().max(h[1].abs()),
            StreamFunction::TaylorGreen { amplitude } | StreamFunction::Shear { amplitude } => amplitude.abs(),
        }
    }

    fn lipschitz(&self) -> f64 {
        match *self {
            StreamFunction::Constant { .. } => 0.0,
            StreamFunction::TaylorGreen { amplitude } => amplitude.abs() * 2f64.sqrt(),
            StreamFunction::Shear { amplitude } => amplitude.abs() * 2f64.sqrt(),
        }
    }

    /// Terminal condition of component `i`.
    pub fn terminal(&self, i: usize) -> TerminalCondition {
        let (s1, s2) = (*self, *self);
        TerminalCondition::new(format!("h{}", i + 1), 2, self.sup(), self.lipschitz(), move |x| s1.velocity(x)[i])
            .with_grad(move |x, out| out.copy_from_slice(&s2.jacobian(x)[i]))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Ns2dProblem {
    pub nu: f64,
    /// Constant pressure gradient.
    pub k: [f64; 2],
    pub stream: StreamFunction,
    pub horizon: f64,
    pub steps: usize,
    pub paths: usize,
    /// Divergence is reported on a `grid_n × grid_n` lattice of the square.
    pub grid_n: usize,
    pub domain: (f64, f64),
    /// Start points fill the square widened by this margin.
    pub margin: f64,
    pub basis_degree: usize,
    pub picard: usize,
    /// `max |div u|` above this is flagged.
    pub div_tol: f64,
}

impl Default for Ns2dProblem {
    fn default() -> Self {
        Self {
            nu: 0.5,
            k: [0.0, 0.0],
            stream: StreamFunction::TaylorGreen { amplitude: 1.0 },
            horizon: 0.5,
            steps: 25,
            paths: 100_000,
            grid_n: 9,
            domain: (0.0, PI),
            margin: 0.5,
            basis_degree: 10,
            picard: 3,
            div_tol: 5e-2,
        }
    }
}

impl Ns2dProblem {
    pub fn validate(&self) -> Result<()> {
        if !(self.nu > 0.0) || !self.nu.is_finite() {
            return domain("nu must be positive");
        }
        if self.k.iter().any(|v| !v.is_finite()) {
            return domain("k must be finite");
        }
        if !(self.horizon > 0.0) || self.steps == 0 || self.paths < 16 || self.grid_n < 2 {
            return domain("need horizon > 0, steps ≥ 1, paths ≥ 16, grid_n ≥ 2");
        }
        if !(self.div_tol > 0.0) {
            return domain("div_tol must be positive");
        }
        if !(self.domain.0 < self.domain.1) || !(self.margin >= 0.0) {
            return domain("domain must be a nonempty interval and margin nonnegative");
        }
        Ok(())
    }

    /// Driver of component `i`.
    pub fn driver(&self, i: usize) -> Driver {
        let c = 1.0 / (2.0 * self.nu).sqrt();
        let ki = self.k[i];
        Driver::new("ns_component", ki.abs().max(c * 2f64.sqrt()).max(1e-12), 1, 0.0, move |_, _, y, z| -ki - c * y * (z[0] + z[1]))
            .with_partials(move |_, _, y, z, dx, dz| {
                dx.fill(0.0);
                dz.fill(-c * y);
                -c * (z[0] + z[1])
            })
            .with_dims(2, 2)
    }

    fn lattice(&self) -> Vec<[f64; 2]> {
        let (lo, hi) = self.domain;
        let n = self.grid_n;
        let at = |a: usize| lo + (hi - lo) * a as f64 / (n - 1) as f64;
        (0..n).flat_map(|a| (0..n).map(move |b| [at(a), at(b)])).collect()
    }

    fn spacing(&self) -> f64 {
        (self.domain.1 - self.domain.0) / (self.grid_n - 1) as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DivRow {
    pub x1: f64,
    pub x2: f64,
    pub u1: f64,
    pub u2: f64,
    /// Central differences of the fitted `u(0, ·)` with the lattice spacing.
    pub div_fd: f64,
    /// `∂₁u¹ + ∂₂u²` from the differentiated system.
    pub div_grad: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Ns2dReport {
    pub rows: Vec<DivRow>,
    pub max_div_fd: f64,
    pub max_div_grad: f64,
    pub flagged_fd: bool,
    pub flagged_grad: bool,
    /// Both routes flag alike, and when both flag their maxima are within a
    /// factor 3.
    pub routes_agree: bool,
    /// `max_t (E|∂₁Y¹_t + ∂₂Y²_t|²)^{1/2}` along the paths.
    pub u_residual: f64,
    pub clamp_fraction: f64,
}

/// Same flag status under `tol`, and within a factor 3 when both flag.
pub fn routes_agree(a: f64, b: f64, tol: f64) -> bool {
    match (a > tol, b > tol) {
        (false, false) => true,
        (true, true) => a.max(b) <= 3.0 * a.min(b),
        _ => false,
    }
}

/// Uniform start points on the widened square.
fn start_cloud(p: &Ns2dProblem, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x2d5f_a11c);
    let (lo, hi) = (p.domain.0 - p.margin, p.domain.1 + p.margin);
    (0..2 * p.paths).map(|_| rng.random_range(lo..hi)).collect()
}

fn fit_at_start(sol: &FbsdeSolution, basis: &RegressionBasis, values: impl Fn(usize) -> f64 + Sync) -> Result<Projection> {
    let cloud = sol.forward().step_cloud(0);
    let design = Design::new(basis, &cloud)?;
    let coefs = design.solve(values)?;
    Ok(design.projection(coefs))
}

/// Solves both components on a shared cloud and checks `div u(0, ·)` by two
/// routes.
pub fn run_ns2d(p: &Ns2dProblem, seed: u64) -> Result<Ns2dReport> {
    p.validate()?;
    let grid = TimeGrid::new(0.0, p.horizon, p.steps)?;
    let ens = Arc::new(PathEnsemble::sample(grid, p.paths, 2, seed)?);
    let model = ForwardModel::brownian(2, (2.0 * p.nu).sqrt());
    let fwd = Arc::new(simulate_forward_from(&model, &ens, &start_cloud(p, seed), 1.0)?);
    let basis = RegressionBasis::polynomial(p.basis_degree, 2);
    let cfg = SolverConfig { picard_iters: p.picard, ..SolverConfig::default() };
    let mut sols = Vec::with_capacity(2);
    let mut grads: Vec<GradientSolution> = Vec::with_capacity(2);
    for i in 0..2 {
        let (drv, tc) = (p.driver(i), p.stream.terminal(i));
        let sol = solve_bsde(&fwd, &drv, &tc, &basis, &cfg)?;
        grads.push(solve_gradient(&sol, &drv, &tc, &basis, &cfg)?);
        sols.push(sol);
    }
    let d1 = fit_at_start(&sols[0], &basis, |j| grads[0].nabla_y(0, j)[0])?;
    let d2 = fit_at_start(&sols[1], &basis, |j| grads[1].nabla_y(0, j)[1])?;
    let h = p.spacing();
    let u = |i: usize, x: &[f64]| sols[i].field().u(0, x);
    let rows: Vec<DivRow> = p
        .lattice()
        .into_iter()
        .map(|x| {
            let div_fd =
                (u(0, &[x[0] + h, x[1]]) - u(0, &[x[0] - h, x[1]]) + u(1, &[x[0], x[1] + h]) - u(1, &[x[0], x[1] - h])) / (2.0 * h);
            DivRow { x1: x[0], x2: x[1], u1: u(0, &x), u2: u(1, &x), div_fd, div_grad: d1.eval(&x) + d2.eval(&x) }
        })
        .collect();
    let max_div_fd = rows.iter().map(|r| r.div_fd.abs()).fold(0.0, f64::max);
    let max_div_grad = rows.iter().map(|r| r.div_grad.abs()).fold(0.0, f64::max);
    let n = p.steps;
    let u_residual = (0..n)
        .map(|i| {
            let s: f64 = (0..p.paths).map(|j| (grads[0].nabla_y(i, j)[0] + grads[1].nabla_y(i, j)[1]).powi(2)).sum();
            (s / p.paths as f64).sqrt()
        })
        .fold(0.0, f64::max);
    let clamp_fraction = sols.iter().map(|s| s.clamp().y_fraction().max(s.clamp().z_fraction())).fold(0.0, f64::max);
    Ok(Ns2dReport {
        flagged_fd: max_div_fd > p.div_tol,
        flagged_grad: max_div_grad > p.div_tol,
        routes_agree: routes_agree(max_div_fd, max_div_grad, p.div_tol),
        rows,
        max_div_fd,
        max_div_grad,
        u_residual,
        clamp_fraction,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(stream: StreamFunction) -> Ns2dProblem {
        Ns2dProblem { stream, paths: 20_000, steps: 10, basis_degree: 6, grid_n: 5, ..Ns2dProblem::default() }
    }

    #[test]
    fn stream_velocities_are_divergence_free() {
        for s in [
            StreamFunction::TaylorGreen { amplitude: 1.3 },
            StreamFunction::Shear { amplitude: 0.7 },
            StreamFunction::Constant { h: [1.0, -2.0] },
        ] {
            for x in [[0.3, 1.1], [2.0, -0.4]] {
                let j = s.jacobian(&x);
                assert!((j[0][0] + j[1][1]).abs() < 1e-15);
                let e = 1e-6;
                let fd = (s.velocity(&[x[0] + e, x[1]])[1] - s.velocity(&[x[0] - e, x[1]])[1]) / (2.0 * e);
                assert!((fd - j[1][0]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn constant_velocity_moves_linearly_in_time() {
        let mut p = small(StreamFunction::Constant { h: [0.4, -0.3] });
        p.k = [0.5, -1.0];
        let r = run_ns2d(&p, 3).unwrap();
        for row in &r.rows {
            assert!((row.u1 - (0.4 - 0.5 * 0.5)).abs() < 1e-9 && (row.u2 - (-0.3 + 1.0 * 0.5)).abs() < 1e-9, "{row:?}");
        }
        assert!(r.max_div_fd < 1e-9 && r.max_div_grad < 1e-9 && r.routes_agree);
    }

    #[test]
    fn route_agreement() {
        assert!(routes_agree(0.01, 0.0, 0.05));
        assert!(routes_agree(0.3, 0.2, 0.05));
        assert!(!routes_agree(0.3, 0.01, 0.05));
        assert!(!routes_agree(0.9, 0.2, 0.05));
    }

    #[test]
    fn rejects_bad_viscosity() {
        let p = Ns2dProblem { nu: 0.0, ..Ns2dProblem::default() };
        assert!(run_ns2d(&p, 1).is_err());
    }
}
