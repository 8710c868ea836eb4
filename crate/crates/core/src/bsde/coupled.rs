//! Outer fixed point for the coupled Burgers system
//! `dX = −a·u(t, X)dt + √(2ε)dW`, `dY = λY dt + Z dW`, `Y_T = g(X_T)`.

use std::sync::Arc;

use rayon::prelude::*;

use super::{solve_bsde, FbsdeSolution, FieldCoefficients, SolverConfig};
use crate::drivers::{Driver, TerminalCondition};
use crate::error::{domain, Result};
use crate::forward::{simulate_forward_from, ForwardModel};
use crate::grid::PathEnsemble;
use crate::regression::RegressionBasis;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CoupledConfig {
    pub a: f64,
    pub lambda: f64,
    pub epsilon: f64,
    pub outer_iters: usize,
    pub tol: f64,
    pub solver: SolverConfig,
}

#[derive(Clone, Debug)]
pub struct CoupledBurgers {
    pub solution: FbsdeSolution,
    /// Sup change of the field over a lattice spanning the start cloud, at
    /// every grid time, for each outer iteration.
    pub history: Vec<f64>,
    pub converged: bool,
}

impl CoupledBurgers {
    pub fn u0(&self, x: f64) -> f64 {
        self.solution.field().u(0, &[x])
    }

    /// Largest difference quotient of `u(0, ·)` between neighbouring points.
    pub fn lipschitz_quotient(&self, xs: &[f64]) -> f64 {
        xs.windows(2).filter(|w| w[1] != w[0]).map(|w| ((self.u0(w[1]) - self.u0(w[0])) / (w[1] - w[0])).abs()).fold(0.0, f64::max)
    }
}

/// `n` midpoints of equal cells of `[lo, hi]`.
pub fn stratified_cloud(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|j| lo + (j as f64 + 0.5) * (hi - lo) / n as f64).collect()
}

enum Field {
    Terminal(TerminalCondition),
    Fitted(FieldCoefficients),
}

impl Field {
    fn u(&self, i: usize, x: &[f64]) -> f64 {
        match self {
            Field::Terminal(tc) => tc.eval(x),
            Field::Fitted(f) => f.u(i, x),
        }
    }
}

/// Starts from `u⁰ ≡ g`; iteration `j` simulates the forward cloud with drift
/// `−a·u^{j−1}(t_nearest, x)`, solves the linear backward equation with
/// driver `−λy` and refits `u^j`. The field entering the drift is clipped to
/// `[−sup|g|, sup|g|]`, the bound every solution obeys. Non-convergence is
/// reported through `converged`, not as an error.
pub fn solve_coupled_burgers(
    ens: &Arc<PathEnsemble>,
    x0_cloud: &[f64],
    tc: &TerminalCondition,
    basis: &RegressionBasis,
    cfg: &CoupledConfig,
) -> Result<CoupledBurgers> {
    if !cfg.a.is_finite() || !(cfg.lambda >= 0.0) || !(cfg.epsilon > 0.0) {
        return domain(format!(
            "coupled Burgers needs finite a, λ ≥ 0, ε > 0 (got a = {}, λ = {}, ε = {})",
            cfg.a, cfg.lambda, cfg.epsilon
        ));
    }
    if cfg.outer_iters == 0 || !(cfg.tol > 0.0) {
        return domain("coupled Burgers needs outer_iters ≥ 1 and tol > 0");
    }
    if tc.dim() != 1 || ens.dim() != 1 {
        return domain("coupled Burgers is one-dimensional");
    }
    let grid = *ens.grid();
    let driver = Driver::linear_damping(cfg.lambda);
    let mut prev = Arc::new(Field::Terminal(tc.clone()));
    let mut history = Vec::new();
    let mut last = None;
    let lo = x0_cloud.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = x0_cloud.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lattice: Vec<f64> = (0..=64).map(|k| lo + (hi - lo) * k as f64 / 64.0).collect();
    let n = grid.n_steps();
    for _ in 0..cfg.outer_iters {
        let field = Arc::clone(&prev);
        let (a, cap) = (cfg.a, tc.bound());
        let k = (a.abs() * (tc.bound() + tc.lipschitz())).max(2f64.sqrt());
        let model = ForwardModel::new(
            1,
            1,
            k,
            move |t, x, out| out[0] = -a * field.u(grid.nearest_index(t), x).clamp(-cap, cap),
            |_, _, out| out[0] = 2f64.sqrt(),
        );
        let fwd = Arc::new(simulate_forward_from(&model, ens, x0_cloud, cfg.epsilon)?);
        let sol = solve_bsde(&fwd, &driver, tc, basis, &cfg.solver)?;
        let next = Field::Fitted(sol.field().clone());
        let change = (0..n)
            .into_par_iter()
            .map(|i| lattice.iter().map(|&x| (next.u(i, &[x]) - prev.u(i, &[x])).abs()).fold(0.0, f64::max))
            .reduce(|| 0.0, f64::max);
        history.push(change);
        prev = Arc::new(next);
        last = Some(sol);
        if change <= cfg.tol {
            break;
        }
    }
    let converged = history.last().is_some_and(|&c| c <= cfg.tol);
    Ok(CoupledBurgers { solution: last.expect("at least one outer iteration"), history, converged })
}
