//! Viscous Burgers equation with damping, `∂ₜu + ε∂ₓₓu − a u∂ₓu − λu = 0`,
//! through the FBSDE `X = x + √(2ε)W`, `f = −(a/√(2ε)) y z − λy`.

use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::bsde::{solve_bsde, solve_coupled_burgers, stratified_cloud, CoupledConfig, SolverConfig};
use crate::drivers::{Driver, TerminalCondition};
use crate::error::{domain, Result};
use crate::forward::{simulate_forward, ForwardModel};
use crate::grid::{PathEnsemble, TimeGrid};
use crate::pde::{compare_field, solve_pde, PdeProblem, ProbeRow};
use crate::regression::RegressionBasis;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CoupledSetup {
    pub outer_iters: usize,
    pub tol: f64,
    /// Start points are stratified over this interval.
    pub cloud: (f64, f64),
    /// Points where the Lipschitz quotient of `u(0, ·)` is measured.
    pub lipschitz_probes: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct BurgersConfig {
    pub a: f64,
    pub lambda: f64,
    pub epsilons: Vec<f64>,
    pub terminal: TerminalCondition,
    pub x0: f64,
    pub horizon: f64,
    pub steps: usize,
    pub paths: usize,
    pub basis_degree: usize,
    pub picard: usize,
    /// Probes for the finite-difference cross-check; empty skips it.
    pub probes: Vec<f64>,
    pub fd_nx: usize,
    pub fd_nt: usize,
    pub coupled: Option<CoupledSetup>,
}

impl BurgersConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.a.is_finite() || !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return domain("a must be finite and lambda nonnegative");
        }
        if self.epsilons.is_empty() || self.epsilons.iter().any(|e| !(*e > 0.0) || !e.is_finite()) {
            return domain("epsilons must be positive");
        }
        if !(self.horizon > 0.0) || self.steps == 0 || self.paths < 2 {
            return domain("need horizon > 0, steps ≥ 1 and paths ≥ 2");
        }
        if !self.terminal.bound().is_finite() {
            return domain("terminal condition must declare a finite sup");
        }
        if let Some(c) = &self.coupled {
            if c.outer_iters == 0 || !(c.tol > 0.0) || !(c.cloud.0 < c.cloud.1) {
                return domain("coupled run needs outer_iters ≥ 1, tol > 0 and a nonempty cloud");
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BurgersRow {
    pub epsilon: f64,
    pub y0: f64,
    pub y0_stderr: f64,
    /// `max |Y|` over every path and time.
    pub max_abs_y: f64,
    /// `sup|g| + 3·stderr`.
    pub bound: f64,
    pub bound_ok: bool,
    pub fd_max_deviation: Option<f64>,
    pub coupled_lipschitz: Option<f64>,
    pub coupled_converged: Option<bool>,
    pub coupled_iterations: Option<usize>,
    pub failure: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BurgersProbe {
    pub epsilon: f64,
    pub x: f64,
    pub mc: f64,
    pub fd: f64,
    pub deviation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BurgersReport {
    pub rows: Vec<BurgersRow>,
    pub probes: Vec<BurgersProbe>,
    /// Any failed row or violated bound.
    pub flagged: bool,
}

fn solve_point(cfg: &BurgersConfig, ens: &Arc<PathEnsemble>, eps: f64, x: f64) -> Result<crate::bsde::FbsdeSolution> {
    let model = ForwardModel::brownian(1, 2f64.sqrt());
    let fwd = Arc::new(simulate_forward(&model, ens, &[x], eps)?);
    let drv = Driver::burgers_damping(cfg.a, cfg.lambda, eps);
    let basis = RegressionBasis::polynomial(cfg.basis_degree, 1);
    solve_bsde(&fwd, &drv, &cfg.terminal, &basis, &SolverConfig { picard_iters: cfg.picard, ..SolverConfig::default() })
}

fn run_row(cfg: &BurgersConfig, ens: &Arc<PathEnsemble>, eps: f64) -> Result<(BurgersRow, Vec<BurgersProbe>)> {
    let sol = solve_point(cfg, ens, eps, cfg.x0)?;
    let bound = cfg.terminal.bound() + 3.0 * sol.y0_stderr();
    let max_abs_y = sol.max_abs_y();
    let mut probes = Vec::new();
    let mut fd_max_deviation = None;
    if !cfg.probes.is_empty() {
        let lo = cfg.probes.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = cfg.probes.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let model = ForwardModel::brownian(1, 2f64.sqrt());
        let fd_grid = TimeGrid::new(0.0, cfg.horizon, cfg.fd_nt)?;
        let drv = Driver::burgers_damping(cfg.a, cfg.lambda, eps);
        let problem = PdeProblem::from_model(&model, &drv, &cfg.terminal, eps, &fd_grid, (lo, hi), cfg.fd_nx, 2f64.sqrt())?;
        let field = solve_pde(&problem)?;
        let mc: Vec<f64> = cfg.probes.iter().map(|&x| solve_point(cfg, ens, eps, x).map(|s| s.y0())).collect::<Result<_>>()?;
        let cmp = compare_field(|x| mc[cfg.probes.iter().position(|&p| p == x).unwrap_or(0)], &field, &cfg.probes);
        fd_max_deviation = Some(cmp.max_deviation);
        probes =
            cmp.rows.into_iter().map(|ProbeRow { x, mc, fd, deviation }| BurgersProbe { epsilon: eps, x, mc, fd, deviation }).collect();
    }
    let (mut coupled_lipschitz, mut coupled_converged, mut coupled_iterations) = (None, None, None);
    if let Some(c) = &cfg.coupled {
        let cloud = stratified_cloud(c.cloud.0, c.cloud.1, cfg.paths);
        let ccfg = CoupledConfig {
            a: cfg.a,
            lambda: cfg.lambda,
            epsilon: eps,
            outer_iters: c.outer_iters,
            tol: c.tol,
            solver: SolverConfig { picard_iters: cfg.picard, ..SolverConfig::default() },
        };
        let basis = RegressionBasis::polynomial(cfg.basis_degree, 1);
        let coupled = solve_coupled_burgers(ens, &cloud, &cfg.terminal, &basis, &ccfg)?;
        coupled_lipschitz = Some(coupled.lipschitz_quotient(&c.lipschitz_probes));
        coupled_converged = Some(coupled.converged);
        coupled_iterations = Some(coupled.history.len());
    }
    let row = BurgersRow {
        epsilon: eps,
        y0: sol.y0(),
        y0_stderr: sol.y0_stderr(),
        max_abs_y,
        bound,
        bound_ok: max_abs_y <= bound,
        fd_max_deviation,
        coupled_lipschitz,
        coupled_converged,
        coupled_iterations,
        failure: None,
    };
    Ok((row, probes))
}

/// One row per `ε`, all sharing a Brownian ensemble.
pub fn run_burgers_damping(cfg: &BurgersConfig, seed: u64) -> Result<BurgersReport> {
    cfg.validate()?;
    let grid = TimeGrid::new(0.0, cfg.horizon, cfg.steps)?;
    let ens = Arc::new(PathEnsemble::sample(grid, cfg.paths, 1, seed)?);
    let results: Vec<(BurgersRow, Vec<BurgersProbe>)> = cfg
        .epsilons
        .par_iter()
        .map(|&eps| {
            run_row(cfg, &ens, eps).unwrap_or_else(|e| {
                let row = BurgersRow {
                    epsilon: eps,
                    y0: f64::NAN,
                    y0_stderr: f64::NAN,
                    max_abs_y: f64::NAN,
                    bound: f64::NAN,
                    bound_ok: false,
                    fd_max_deviation: None,
                    coupled_lipschitz: None,
                    coupled_converged: None,
                    coupled_iterations: None,
                    failure: Some(e.to_string()),
                };
                (row, Vec::new())
            })
        })
        .collect();
    let flagged = results.iter().any(|(r, _)| r.failure.is_some() || !r.bound_ok);
    let (rows, probes): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    Ok(BurgersReport { rows, probes: probes.into_iter().flatten().collect(), flagged })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base(terminal: TerminalCondition) -> BurgersConfig {
        BurgersConfig {
            a: 1.0,
            lambda: 1.0,
            epsilons: vec![0.4, 0.1],
            terminal,
            x0: 0.2,
            horizon: 1.0,
            steps: 20,
            paths: 4000,
            basis_degree: 4,
            picard: 3,
            probes: vec![],
            fd_nx: 200,
            fd_nt: 200,
            coupled: None,
        }
    }

    #[test]
    fn constant_terminal_decays_exponentially() {
        // backward Euler on dY = λY dt: 20 steps carry an O(dt) bias
        let r = run_burgers_damping(&base(TerminalCondition::constant(0.7, 1)), 4).unwrap();
        for row in &r.rows {
            assert!((row.y0 - 0.7 * (-1.0f64).exp()).abs() < 0.01, "{row:?}");
            assert_eq!(row.y0_stderr, 0.0);
            assert!(row.bound_ok);
        }
        let mut fine = base(TerminalCondition::constant(0.7, 1));
        fine.steps = 200;
        let r = run_burgers_damping(&fine, 4).unwrap();
        assert!((r.rows[0].y0 - 0.7 * (-1.0f64).exp()).abs() < 1e-3);
        assert!(!r.flagged);
    }

    #[test]
    fn zero_nonlinearity_is_heat() {
        let mut cfg = base(TerminalCondition::cosine(1));
        cfg.a = 0.0;
        cfg.lambda = 0.0;
        cfg.epsilons = vec![0.5];
        cfg.paths = 20_000;
        let r = run_burgers_damping(&cfg, 9).unwrap();
        let row = &r.rows[0];
        let exact = (-0.5f64).exp() * 0.2f64.cos();
        assert!((row.y0 - exact).abs() < 4.0 * row.y0_stderr + 5e-3, "{row:?} vs {exact}");
    }

    #[test]
    fn rejects_negative_damping() {
        let mut cfg = base(TerminalCondition::cosine(1));
        cfg.lambda = -1.0;
        assert!(run_burgers_damping(&cfg, 1).is_err());
    }
}
