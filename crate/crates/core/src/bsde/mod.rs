//! Backward regression Monte Carlo for `Y_s = g(X_T) + ∫_s^T f(r, X, Y, Z) dr − ∫_s^T Z dW`.

mod coupled;
mod gradient;

use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

pub use coupled::{solve_coupled_burgers, stratified_cloud, CoupledBurgers, CoupledConfig};
pub use gradient::{solve_gradient, GradientSolution};

use crate::drivers::{a_priori_bound, validate_driver, Driver, LinearizingTransform, TerminalCondition};
use crate::error::{domain, LabError, Result};
use crate::forward::ForwardPaths;
use crate::grid::TimeGrid;
use crate::par::{chunked_sum, mean_stderr};
use crate::regression::{Design, Projection, RegressionBasis};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverConfig {
    /// Fixed-point passes resolving the `y`-dependence of `f` at each step.
    /// `0` and `1` both mean a single explicit pass.
    pub picard_iters: usize,
    /// `Z` is clamped at `z_clamp_coef·√(ln M)`.
    pub z_clamp_coef: f64,
    /// Clamp-activation fraction above which the report carries a warning.
    pub max_clamp_fraction: f64,
    /// Probe the driver before solving and refuse it on failure.
    pub validate: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { picard_iters: 3, z_clamp_coef: 5.0, max_clamp_fraction: 0.1, validate: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClampReport {
    pub y_bound: f64,
    pub z_bound: f64,
    pub y_clamped: usize,
    pub z_clamped: usize,
    pub y_total: usize,
    pub z_total: usize,
    pub warning: bool,
}

impl ClampReport {
    fn new(y_bound: f64, z_bound: f64) -> Self {
        Self { y_bound, z_bound, y_clamped: 0, z_clamped: 0, y_total: 0, z_total: 0, warning: false }
    }

    pub fn y_fraction(&self) -> f64 {
        self.y_clamped as f64 / self.y_total.max(1) as f64
    }

    pub fn z_fraction(&self) -> f64 {
        self.z_clamped as f64 / self.z_total.max(1) as f64
    }
}

/// Regression representation of the decoupling field: `u(tᵢ, ·)` and
/// `v(tᵢ, ·)` (the `Z` field) at every grid index.
#[derive(Clone, Debug)]
pub struct FieldCoefficients {
    u: Vec<Projection>,
    v: Vec<Vec<Projection>>,
    terminal: TerminalCondition,
    transform: Option<Arc<LinearizingTransform>>,
}

impl FieldCoefficients {
    pub fn n_steps(&self) -> usize {
        self.u.len()
    }

    /// `u(tᵢ, x)`; the terminal condition at the last index.
    pub fn u(&self, i: usize, x: &[f64]) -> f64 {
        if i >= self.u.len() {
            return self.terminal.eval(x);
        }
        let p = self.u[i].eval(x);
        match &self.transform {
            None => p,
            Some(lin) => {
                let (lo, hi) = lin.phi_range();
                lin.phi_inv(p.clamp(lo, hi)).unwrap_or(f64::NAN)
            }
        }
    }

    /// `v(tᵢ, x)` for `i < n_steps`.
    pub fn v(&self, i: usize, x: &[f64]) -> Vec<f64> {
        let raw: Vec<f64> = self.v[i].iter().map(|p| p.eval(x)).collect();
        match &self.transform {
            None => raw,
            Some(lin) => {
                let d = lin.dphi(self.u(i, x)).unwrap_or(f64::NAN);
                raw.into_iter().map(|q| q / d).collect()
            }
        }
    }

    pub fn u_projection(&self, i: usize) -> &Projection {
        &self.u[i]
    }

    pub fn terminal(&self) -> &TerminalCondition {
        &self.terminal
    }
}

/// Discrete `(Y, Z)` on every path together with the fitted field.
#[derive(Clone, Debug)]
pub struct FbsdeSolution {
    forward: Arc<ForwardPaths>,
    y: Vec<f64>,
    z: Vec<f64>,
    field: FieldCoefficients,
    clamp: ClampReport,
    y0: f64,
    y0_stderr: f64,
    z0: Vec<f64>,
}

impl FbsdeSolution {
    pub fn forward(&self) -> &Arc<ForwardPaths> {
        &self.forward
    }

    pub fn grid(&self) -> &TimeGrid {
        self.forward.grid()
    }

    pub fn n_paths(&self) -> usize {
        self.forward.n_paths()
    }

    pub fn n_steps(&self) -> usize {
        self.grid().n_steps()
    }

    pub fn dim_noise(&self) -> usize {
        self.forward.dim_noise()
    }

    /// `Y` at grid index `i` for every path.
    pub fn y_step(&self, i: usize) -> &[f64] {
        let m = self.n_paths();
        &self.y[i * m..(i + 1) * m]
    }

    pub fn y_at(&self, i: usize, path: usize) -> f64 {
        self.y[i * self.n_paths() + path]
    }

    /// `Z` at grid index `i < N` on one path.
    pub fn z_at(&self, i: usize, path: usize) -> &[f64] {
        let d = self.dim_noise();
        let base = (i * self.n_paths() + path) * d;
        &self.z[base..base + d]
    }

    pub fn field(&self) -> &FieldCoefficients {
        &self.field
    }

    pub fn clamp(&self) -> &ClampReport {
        &self.clamp
    }

    /// Path average of `Y` at the initial time.
    pub fn y0(&self) -> f64 {
        self.y0
    }

    /// Standard error of `Y₀` from the realized estimator
    /// `g(X_T) + Σ f dt`.
    pub fn y0_stderr(&self) -> f64 {
        self.y0_stderr
    }

    /// Path average of `Z` at the initial time.
    pub fn z0(&self) -> &[f64] {
        &self.z0
    }

    pub fn max_abs_y(&self) -> f64 {
        self.y.par_iter().map(|v| v.abs()).reduce(|| 0.0, f64::max)
    }

    /// `(E Σ |Zᵢ|² dt)^{1/2}`.
    pub fn z_h2_norm(&self) -> f64 {
        let (n, m, d) = (self.n_steps(), self.n_paths(), self.dim_noise());
        let dt = self.grid().dt();
        let s = chunked_sum(m, 1, |j, acc| {
            for i in 0..n {
                let base = (i * m + j) * d;
                acc[0] += self.z[base..base + d].iter().map(|v| v * v).sum::<f64>() * dt;
            }
        });
        (s[0] / m as f64).sqrt()
    }
}

fn at_step(e: LabError, step: usize) -> LabError {
    match e {
        LabError::Regression { reason, .. } => LabError::Regression { step, reason },
        other => other,
    }
}

fn check_dims(fwd: &ForwardPaths, tc: &TerminalCondition, basis: &RegressionBasis) -> Result<()> {
    let m = fwd.dim_state();
    if tc.dim() != m {
        return domain(format!("terminal condition has dimension {}, state has {m}", tc.dim()));
    }
    if basis.dim != m {
        return domain(format!("regression basis has dimension {}, state has {m}", basis.dim));
    }
    Ok(())
}

fn z_clamp_level(cfg: &SolverConfig, n_paths: usize) -> f64 {
    cfg.z_clamp_coef * (n_paths as f64).ln().max(1.0).sqrt()
}

fn finite_or_error(values: &[f64], width: usize, step: usize) -> Result<()> {
    match values.par_iter().position_first(|v| !v.is_finite()) {
        Some(k) => Err(LabError::NonFinite { step, path: k / width }),
        None => Ok(()),
    }
}

fn clamp_all(values: &mut [f64], bound: f64) -> usize {
    values
        .par_iter_mut()
        .map(|v| {
            if v.abs() > bound {
                *v = bound.copysign(*v);
                1usize
            } else {
                0
            }
        })
        .sum()
}

/// Backward induction with regression estimates
/// `Zᵢ = E[(Y_{i+1} − Ŷᵢ)ΔWᵢ/dt | Xᵢ]` and
/// `Yᵢ = E[Y_{i+1} + f(tᵢ, Xᵢ, Yᵢ, Zᵢ)dt | Xᵢ]` with Picard passes in `Yᵢ`.
pub fn solve_bsde(
    fwd: &Arc<ForwardPaths>,
    drv: &Driver,
    tc: &TerminalCondition,
    basis: &RegressionBasis,
    cfg: &SolverConfig,
) -> Result<FbsdeSolution> {
    check_dims(fwd, tc, basis)?;
    let (m_paths, n, d) = (fwd.n_paths(), fwd.grid().n_steps(), fwd.dim_noise());
    if cfg.validate {
        let probe = drv.clone().with_dims(fwd.dim_state(), d);
        let report = validate_driver(&probe, 4096, 0x0d21_7e45);
        if !report.passed {
            return domain(format!(
                "driver `{}` violates its declared constants (growth ratio {:.3}, Lipschitz ratio {:.3})",
                drv.kind(),
                report.growth_ratio,
                report.lipschitz_ratio
            ));
        }
    }
    let grid = *fwd.grid();
    let dt = grid.dt();
    let ens = fwd.ensemble();
    let y_bound = a_priori_bound(drv.k_const(), grid.horizon(), tc.bound());
    let z_bound = z_clamp_level(cfg, m_paths);
    let mut clamp = ClampReport::new(y_bound, z_bound);

    let mut y = vec![0.0; (n + 1) * m_paths];
    let mut z = vec![0.0; n * m_paths * d];
    let mut fsum = vec![0.0; m_paths];
    y[n * m_paths..].par_iter_mut().enumerate().for_each(|(j, v)| *v = tc.eval(fwd.state(j, n)));
    finite_or_error(&y[n * m_paths..], 1, n)?;
    let mut u_proj = Vec::with_capacity(n);
    let mut v_proj = Vec::with_capacity(n);

    for i in (0..n).rev() {
        let t = grid.time(i);
        let (head, tail) = y.split_at_mut((i + 1) * m_paths);
        let y_next = &tail[..m_paths];
        let y_cur = &mut head[i * m_paths..];
        let cloud = fwd.step_cloud(i);
        let design = Design::new(basis, &cloud).map_err(|e| at_step(e, i))?;

        let c_hat = design.solve(|j| y_next[j]).map_err(|e| at_step(e, i))?;
        let y_hat: Vec<f64> = (0..m_paths).into_par_iter().map(|j| design.fitted(&c_hat, j)).collect();

        let z_i = &mut z[i * m_paths * d..(i + 1) * m_paths * d];
        let mut zp = Vec::with_capacity(d);
        for q in 0..d {
            let c = design.solve(|j| (y_next[j] - y_hat[j]) * ens.increment(j, i)[q] / dt).map_err(|e| at_step(e, i))?;
            z_i.par_chunks_mut(d).enumerate().for_each(|(j, zz)| zz[q] = design.fitted(&c, j));
            zp.push(design.projection(c));
        }
        clamp.z_clamped += clamp_all(z_i, z_bound);
        clamp.z_total += m_paths * d;
        finite_or_error(z_i, d, i)?;

        y_cur.copy_from_slice(&y_hat);
        let mut coefs = c_hat;
        for _ in 0..cfg.picard_iters.max(1) {
            let prev: &[f64] = y_cur;
            let c = design
                .solve(|j| y_next[j] + dt * drv.eval(t, fwd.state(j, i), prev[j], &z_i[j * d..(j + 1) * d]))
                .map_err(|e| at_step(e, i))?;
            let fitted: Vec<f64> = (0..m_paths).into_par_iter().map(|j| design.fitted(&c, j)).collect();
            y_cur.copy_from_slice(&fitted);
            coefs = c;
        }
        clamp.y_clamped += clamp_all(y_cur, y_bound);
        clamp.y_total += m_paths;
        finite_or_error(y_cur, 1, i)?;
        let y_fixed: &[f64] = y_cur;
        fsum.par_iter_mut().enumerate().for_each(|(j, s)| *s += dt * drv.eval(t, fwd.state(j, i), y_fixed[j], &z_i[j * d..(j + 1) * d]));
        u_proj.push(design.projection(coefs));
        v_proj.push(zp);
    }
    u_proj.reverse();
    v_proj.reverse();
    clamp.warning = clamp.y_fraction() > cfg.max_clamp_fraction || clamp.z_fraction() > cfg.max_clamp_fraction;

    let (_, y0_stderr) = mean_stderr(m_paths, |j| y[n * m_paths + j] + fsum[j]);
    let y0 = chunked_sum(m_paths, 1, |j, acc| acc[0] += y[j])[0] / m_paths as f64;
    let z0 = if n > 0 {
        chunked_sum(m_paths, d, |j, acc| acc.iter_mut().zip(&z[j * d..(j + 1) * d]).for_each(|(a, v)| *a += v))
    } else {
        vec![0.0; d]
    };
    let z0 = z0.into_iter().map(|v| v / m_paths as f64).collect();
    Ok(FbsdeSolution {
        forward: Arc::clone(fwd),
        y,
        z,
        field: FieldCoefficients { u: u_proj, v: v_proj, terminal: tc.clone(), transform: None },
        clamp,
        y0,
        y0_stderr,
        z0,
    })
}

/// Solves `f = g(y)|z|²` through the martingale `Φ(Y)`: `Pᵢ = E[Φ(ξ) | Xᵢ]`,
/// `Yᵢ = Φ⁻¹(Pᵢ)`, `Zᵢ = Qᵢ/Φ'(Yᵢ)` with `Qᵢ = E[(P_{i+1} − Pᵢ)ΔWᵢ/dt | Xᵢ]`.
/// Fitted `Pᵢ` are projected onto `[Φ(−sup|ξ|), Φ(sup|ξ|)]`.
pub fn solve_by_transform(
    fwd: &Arc<ForwardPaths>,
    lin: &Arc<LinearizingTransform>,
    tc: &TerminalCondition,
    basis: &RegressionBasis,
) -> Result<FbsdeSolution> {
    check_dims(fwd, tc, basis)?;
    let (m_paths, n, d) = (fwd.n_paths(), fwd.grid().n_steps(), fwd.dim_noise());
    let grid = *fwd.grid();
    let dt = grid.dt();
    let ens = fwd.ensemble();
    let mut y = vec![0.0; (n + 1) * m_paths];
    let mut z = vec![0.0; n * m_paths * d];
    let mut p_next = vec![0.0; m_paths];
    y[n * m_paths..].par_iter_mut().zip(p_next.par_iter_mut()).enumerate().for_each(|(j, (yv, pv))| {
        *yv = tc.eval(fwd.state(j, n));
        *pv = lin.phi(*yv).unwrap_or(f64::NAN);
    });
    if let Some(j) = p_next.iter().position(|v| !v.is_finite()) {
        return Err(LabError::TransformRange { step: n, value: y[n * m_paths + j] });
    }
    let terminal_phi = p_next.clone();
    let (p_lo, p_hi) = match (lin.phi(-tc.bound()), lin.phi(tc.bound())) {
        (Some(a), Some(b)) => (a, b),
        _ => lin.phi_range(),
    };
    let mut clamp = ClampReport::new(tc.bound(), f64::INFINITY);
    let mut u_proj = Vec::with_capacity(n);
    let mut v_proj = Vec::with_capacity(n);
    for i in (0..n).rev() {
        let cloud = fwd.step_cloud(i);
        let design = Design::new(basis, &cloud).map_err(|e| at_step(e, i))?;
        let cp = design.solve(|j| terminal_phi[j]).map_err(|e| at_step(e, i))?;
        let mut p_cur: Vec<f64> = (0..m_paths).into_par_iter().map(|j| design.fitted(&cp, j)).collect();
        clamp.y_clamped += p_cur.iter_mut().filter(|p| **p < p_lo || **p > p_hi).map(|p| *p = p.clamp(p_lo, p_hi)).count();
        clamp.y_total += m_paths;
        let y_cur = &mut y[i * m_paths..(i + 1) * m_paths];
        y_cur.par_iter_mut().zip(&p_cur).for_each(|(yv, &p)| *yv = lin.phi_inv(p).unwrap_or(f64::NAN));
        if let Some(j) = y_cur.iter().position(|v| !v.is_finite()) {
            return Err(LabError::TransformRange { step: i, value: p_cur[j] });
        }
        let z_i = &mut z[i * m_paths * d..(i + 1) * m_paths * d];
        let mut zp = Vec::with_capacity(d);
        for q in 0..d {
            let c = design.solve(|j| (p_next[j] - p_cur[j]) * ens.increment(j, i)[q] / dt).map_err(|e| at_step(e, i))?;
            z_i.par_chunks_mut(d).enumerate().for_each(|(j, zz)| zz[q] = design.fitted(&c, j));
            zp.push(design.projection(c));
        }
        let y_fixed: &[f64] = y_cur;
        z_i.par_chunks_mut(d).enumerate().for_each(|(j, zz)| {
            let dphi = lin.dphi(y_fixed[j]).unwrap_or(f64::NAN);
            zz.iter_mut().for_each(|v| *v /= dphi);
        });
        finite_or_error(z_i, d, i)?;
        u_proj.push(design.projection(cp));
        v_proj.push(zp);
        p_next = p_cur;
    }
    u_proj.reverse();
    v_proj.reverse();
    let y0 = chunked_sum(m_paths, 1, |j, acc| acc[0] += y[j])[0] / m_paths as f64;
    let (_, p_err) = mean_stderr(m_paths, |j| terminal_phi[j]);
    let y0_stderr = p_err / lin.dphi(y0).unwrap_or(1.0);
    let z0 = if n > 0 {
        chunked_sum(m_paths, d, |j, acc| acc.iter_mut().zip(&z[j * d..(j + 1) * d]).for_each(|(a, v)| *a += v))
    } else {
        vec![0.0; d]
    };
    let z0 = z0.into_iter().map(|v| v / m_paths as f64).collect();
    Ok(FbsdeSolution {
        forward: Arc::clone(fwd),
        y,
        z,
        field: FieldCoefficients { u: u_proj, v: v_proj, terminal: tc.clone(), transform: Some(Arc::clone(lin)) },
        clamp: ClampReport { warning: clamp.y_fraction() > SolverConfig::default().max_clamp_fraction, ..clamp },
        y0,
        y0_stderr,
        z0,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BmoEstimate {
    /// `max_cloud E[Σ_{l≥i} |Z_l|² dt | Xᵢ]` for each `i < N`.
    pub per_step: Vec<f64>,
    /// Maximum over `per_step`.
    pub value: f64,
}

/// Grid proxy for the squared BMO norm of `Z * W`.
pub fn estimate_bmo_norm(sol: &FbsdeSolution, basis: &RegressionBasis) -> Result<BmoEstimate> {
    let fwd = sol.forward();
    let (m_paths, n) = (sol.n_paths(), sol.n_steps());
    let dt = sol.grid().dt();
    let mut tail = vec![0.0; m_paths];
    let mut per_step = vec![0.0; n];
    for i in (0..n).rev() {
        tail.par_iter_mut().enumerate().for_each(|(j, s)| *s += sol.z_at(i, j).iter().map(|v| v * v).sum::<f64>() * dt);
        if tail.iter().all(|&v| v == 0.0) {
            continue;
        }
        let cloud = fwd.step_cloud(i);
        let design = Design::new(basis, &cloud).map_err(|e| at_step(e, i))?;
        let c = design.solve(|j| tail[j]).map_err(|e| at_step(e, i))?;
        per_step[i] = (0..m_paths).into_par_iter().map(|j| design.fitted(&c, j)).reduce(|| 0.0, f64::max).max(0.0);
    }
    let value = per_step.iter().copied().fold(0.0, f64::max);
    Ok(BmoEstimate { per_step, value })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::drivers::build_linearizer;
    use crate::forward::{simulate_forward, ForwardModel};
    use crate::grid::{make_grid, PathEnsemble};

    fn heat(paths: usize, steps: usize, x0: f64, seed: u64) -> Arc<ForwardPaths> {
        let ens = Arc::new(PathEnsemble::sample(make_grid(0.0, 1.0, steps).unwrap(), paths, 1, seed).unwrap());
        Arc::new(simulate_forward(&ForwardModel::brownian(1, 1.0), &ens, &[x0], 1.0).unwrap())
    }

    #[test]
    fn constant_terminal_is_a_fixed_point() {
        let fwd = heat(2000, 20, 0.0, 1);
        let sol = solve_bsde(
            &fwd,
            &Driver::zero(),
            &TerminalCondition::constant(0.7, 1),
            &RegressionBasis::polynomial(4, 1),
            &SolverConfig::default(),
        )
        .unwrap();
        for i in 0..=20 {
            assert!(sol.y_step(i).iter().all(|v| (v - 0.7).abs() < 1e-10));
        }
        assert!(sol.z_h2_norm() < 1e-9);
        assert_eq!(sol.y0_stderr(), 0.0);
    }

    #[test]
    fn heat_expectation() {
        let fwd = heat(50_000, 25, 0.0, 2);
        let tc = TerminalCondition::cosine(1);
        let sol = solve_bsde(&fwd, &Driver::zero(), &tc, &RegressionBasis::polynomial(4, 1), &SolverConfig::default()).unwrap();
        let want = (-0.5f64).exp();
        assert!((sol.y0() - want).abs() < 4.0 * sol.y0_stderr() + 2e-3, "{} vs {want}", sol.y0());
        for j in 0..fwd.n_paths() {
            assert_eq!(sol.y_at(25, j), fwd.state(j, 25)[0].cos());
        }
        assert!(!sol.clamp().warning);
    }

    #[test]
    fn z_tracks_gradient_of_field() {
        let fwd = heat(50_000, 25, 0.0, 3);
        let tc = TerminalCondition::sine(1);
        let sol = solve_bsde(&fwd, &Driver::zero(), &tc, &RegressionBasis::polynomial(5, 1), &SolverConfig::default()).unwrap();
        // u(t,x) = e^{-(1-t)/2} sin x, Z = u_x
        let i = 10;
        let t = fwd.grid().time(i);
        for x in [-0.8, 0.0, 0.6] {
            let want = (-(1.0 - t) / 2.0).exp() * f64::cos(x);
            assert!((sol.field().v(i, &[x])[0] - want).abs() < 0.03, "x = {x}");
            let u_want = (-(1.0 - t) / 2.0).exp() * f64::sin(x);
            assert!((sol.field().u(i, &[x]) - u_want).abs() < 0.02);
        }
    }

    #[test]
    fn entropic_matches_transform_with_constant_terminal() {
        let fwd = heat(2000, 10, 0.0, 4);
        let tc = TerminalCondition::constant(0.4, 1);
        let lin = Arc::new(build_linearizer(|_| 0.5, 3.0, 1000).unwrap());
        let sol = solve_by_transform(&fwd, &lin, &tc, &RegressionBasis::polynomial(3, 1)).unwrap();
        assert!((sol.y0() - 0.4).abs() < 1e-10);
    }

    #[test]
    fn identity_transform_equals_plain_solver() {
        let fwd = heat(20_000, 20, 0.3, 5);
        let tc = TerminalCondition::cosine(1);
        let basis = RegressionBasis::polynomial(4, 1);
        let lin = Arc::new(build_linearizer(|_| 0.0, 3.0, 1000).unwrap());
        let a = solve_by_transform(&fwd, &lin, &tc, &basis).unwrap();
        let b = solve_bsde(&fwd, &Driver::zero(), &tc, &basis, &SolverConfig::default()).unwrap();
        assert!((a.y0() - b.y0()).abs() < 1e-3, "{} vs {}", a.y0(), b.y0());
    }

    #[test]
    fn transform_range_violation_is_reported() {
        let fwd = heat(500, 5, 0.0, 6);
        let lin = Arc::new(build_linearizer(|_| 0.5, 0.5, 100).unwrap());
        match solve_by_transform(&fwd, &lin, &TerminalCondition::cosine(1), &RegressionBasis::polynomial(2, 1)) {
            Err(LabError::TransformRange { step, .. }) => assert_eq!(step, 5),
            other => panic!("expected range error, got {other:?}"),
        }
    }

    #[test]
    fn bmo_estimate_examples() {
        let fwd = heat(20_000, 20, 0.0, 7);
        let basis = RegressionBasis::polynomial(4, 1);
        let flat = solve_bsde(&fwd, &Driver::zero(), &TerminalCondition::constant(1.0, 1), &basis, &SolverConfig::default()).unwrap();
        assert!(estimate_bmo_norm(&flat, &basis).unwrap().value < 1e-12);
        let sol = solve_bsde(&fwd, &Driver::zero(), &TerminalCondition::cosine(1), &basis, &SolverConfig::default()).unwrap();
        let bmo = estimate_bmo_norm(&sol, &basis).unwrap();
        assert!(bmo.value.is_finite());
        assert!(bmo.per_step[19] <= bmo.per_step[0]);
        assert!(bmo.value <= 2.0 * sol.z_h2_norm().powi(2) + 0.1, "{} vs {}", bmo.value, sol.z_h2_norm());
    }

    #[test]
    fn invalid_driver_is_refused() {
        let fwd = heat(100, 5, 0.0, 8);
        let bad = Driver::new("exp", 1.0, 1, 0.0, |_, _, y, _| y.exp());
        let r = solve_bsde(&fwd, &bad, &TerminalCondition::cosine(1), &RegressionBasis::polynomial(2, 1), &SolverConfig::default());
        assert!(matches!(r, Err(LabError::Domain(_))));
    }

    #[test]
    fn dimension_mismatch_is_refused() {
        let fwd = heat(100, 5, 0.0, 9);
        let r =
            solve_bsde(&fwd, &Driver::zero(), &TerminalCondition::cosine(2), &RegressionBasis::polynomial(2, 1), &SolverConfig::default());
        assert!(r.is_err());
    }
}
