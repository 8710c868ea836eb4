//! Vanishing-viscosity sweeps: distance of `Y^ε` from the deterministic limit
//! and decay of `Z^ε` as `ε → 0`, all rows sharing one Brownian ensemble.

use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::bsde::{solve_bsde, FbsdeSolution, SolverConfig};
use crate::drivers::{Driver, TerminalCondition};
use crate::error::{domain, Result};
use crate::forward::{simulate_forward, ForwardModel};
use crate::grid::{PathEnsemble, TimeGrid};
use crate::par::mean_stderr;
use crate::pde::solve_limit_ode;
use crate::regression::RegressionBasis;
use crate::stats::{jackknife_slope_se, ols_slope};

/// Gaps at or below this level count as exactly zero.
pub const DEGENERATE_GAP: f64 = 1e-12;

#[derive(Clone)]
pub struct SweepConfig {
    /// Distinct values in `(0, 1]`; rows are reported in decreasing order.
    pub epsilons: Vec<f64>,
    pub model: ForwardModel,
    pub driver: Driver,
    pub terminal: TerminalCondition,
    pub x0: Vec<f64>,
    pub grid: TimeGrid,
    pub n_paths: usize,
    pub seed: u64,
    /// Exponent of the cloud norm, `(E|Y^ε_t − Y⁰_t|^p)^{1/p}`.
    pub p: f64,
    pub basis: RegressionBasis,
    pub solver: SolverConfig,
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        let eps = &self.epsilons;
        if eps.iter().any(|e| !(*e > 0.0 && *e <= 1.0)) {
            return domain("epsilon values must lie in (0, 1]");
        }
        let mut sorted = eps.clone();
        sorted.sort_by(f64::total_cmp);
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return domain("epsilon values must be distinct");
        }
        if !(self.p >= 1.0) || !self.p.is_finite() {
            return domain("norm exponent p must be at least 1");
        }
        if self.n_paths < 2 {
            return domain("at least two paths are required");
        }
        if self.x0.len() != self.model.dim_state() {
            return domain("start point dimension does not match the model");
        }
        Ok(())
    }

    fn sorted_epsilons(&self) -> Vec<f64> {
        let mut eps = self.epsilons.clone();
        eps.sort_by(|a, b| b.total_cmp(a));
        eps
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub epsilon: f64,
    /// `max_i (E|Y^ε_{tᵢ} − Y⁰_{tᵢ}|^p)^{1/p}`.
    pub gap_y: f64,
    pub gap_y_stderr: f64,
    /// Time index where the gap is largest.
    pub gap_step: usize,
    /// `(E Σ|Z^ε|² dt)^{1/2}`.
    pub norm_z: f64,
    pub norm_z_stderr: f64,
    pub y0: f64,
    pub y0_stderr: f64,
    pub max_abs_y: f64,
    /// Least-squares log-log slope over this and all larger-ε rows.
    pub slope_running: Option<f64>,
    /// Solver error message when the row failed.
    pub failure: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    /// `Y⁰` along the deterministic flow.
    pub limit: Vec<f64>,
    pub slope: Option<f64>,
    /// `slope ± 1.96·jackknife standard error`.
    pub band: Option<(f64, f64)>,
    /// Every gap vanished, so no slope exists.
    pub exact_degenerate: bool,
}

impl SweepResult {
    pub fn band_width(&self) -> Option<f64> {
        self.band.map(|(lo, hi)| hi - lo)
    }
}

struct RowMeasure {
    gap: f64,
    gap_se: f64,
    gap_step: usize,
    norm_z: f64,
    norm_z_se: f64,
}

fn measure(sol: &FbsdeSolution, limit: &[f64], p: f64) -> RowMeasure {
    let (n, m, d) = (sol.n_steps(), sol.n_paths(), sol.dim_noise());
    let mut best = (0.0, 0.0, 0);
    for (i, &y0) in limit.iter().enumerate().take(n + 1) {
        let (mean, se) = mean_stderr(m, |j| (sol.y_at(i, j) - y0).abs().powf(p));
        let gap = mean.powf(1.0 / p);
        if gap > best.0 || i == 0 {
            let gap_se = if mean > 0.0 { gap / (p * mean) * se } else { 0.0 };
            best = (gap, gap_se, i);
        }
    }
    let dt = sol.grid().dt();
    let (z2, z2_se) = mean_stderr(m, |j| (0..n).map(|i| sol.z_at(i, j).iter().take(d).map(|v| v * v).sum::<f64>() * dt).sum());
    let norm_z = z2.sqrt();
    let norm_z_se = if norm_z > 0.0 { z2_se / (2.0 * norm_z) } else { 0.0 };
    RowMeasure { gap: best.0, gap_se: best.1, gap_step: best.2, norm_z, norm_z_se }
}

fn solve_row(cfg: &SweepConfig, ens: &Arc<PathEnsemble>, eps: f64) -> Result<FbsdeSolution> {
    let fwd = Arc::new(simulate_forward(&cfg.model, ens, &cfg.x0, eps)?);
    solve_bsde(&fwd, &cfg.driver, &cfg.terminal, &cfg.basis, &cfg.solver)
}

/// Runs every `ε` row on a common ensemble and fits the log-log slope of
/// the `Y` gap.
pub fn run_sweep(cfg: &SweepConfig) -> Result<SweepResult> {
    cfg.validate()?;
    let limit = solve_limit_ode(&cfg.model, &cfg.driver, &cfg.terminal, &cfg.grid, &cfg.x0)?;
    let ens = Arc::new(PathEnsemble::sample(cfg.grid, cfg.n_paths, cfg.model.dim_noise(), cfg.seed)?);
    let eps = cfg.sorted_epsilons();
    let mut rows: Vec<SweepRow> = eps
        .par_iter()
        .map(|&e| match solve_row(cfg, &ens, e) {
            Ok(sol) => {
                let r = measure(&sol, &limit, cfg.p);
                SweepRow {
                    epsilon: e,
                    gap_y: r.gap,
                    gap_y_stderr: r.gap_se,
                    gap_step: r.gap_step,
                    norm_z: r.norm_z,
                    norm_z_stderr: r.norm_z_se,
                    y0: sol.y0(),
                    y0_stderr: sol.y0_stderr(),
                    max_abs_y: sol.max_abs_y(),
                    slope_running: None,
                    failure: None,
                }
            }
            Err(err) => SweepRow {
                epsilon: e,
                gap_y: f64::NAN,
                gap_y_stderr: f64::NAN,
                gap_step: 0,
                norm_z: f64::NAN,
                norm_z_stderr: f64::NAN,
                y0: f64::NAN,
                y0_stderr: f64::NAN,
                max_abs_y: f64::NAN,
                slope_running: None,
                failure: Some(err.to_string()),
            },
        })
        .collect();
    let ok: Vec<&SweepRow> = rows.iter().filter(|r| r.failure.is_none()).collect();
    let exact_degenerate = !ok.is_empty() && ok.iter().all(|r| r.gap_y <= DEGENERATE_GAP);
    let log_points = |upto: usize, rows: &[SweepRow]| -> Vec<(f64, f64)> {
        rows[..=upto].iter().filter(|r| r.failure.is_none() && r.gap_y > DEGENERATE_GAP).map(|r| (r.epsilon.ln(), r.gap_y.ln())).collect()
    };
    for k in 0..rows.len() {
        let pts = log_points(k, &rows);
        rows[k].slope_running = if pts.len() >= 2 && !exact_degenerate { ols_slope(&pts) } else { None };
    }
    let pts = if rows.is_empty() { vec![] } else { log_points(rows.len() - 1, &rows) };
    let (slope, band) = if pts.len() >= 3 && !exact_degenerate {
        let s = ols_slope(&pts);
        let band = s.zip(jackknife_slope_se(&pts)).map(|(s, se)| (s - 1.96 * se, s + 1.96 * se));
        (s, band)
    } else {
        (None, None)
    };
    Ok(SweepResult { rows, limit, slope, band, exact_degenerate })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConsistencyReport {
    /// `‖Z^ε‖` never increases by more than one standard error as `ε` shrinks.
    pub z_monotone: bool,
    /// `|Y^ε₀ − Y⁰₀|` at the smallest `ε`.
    pub y0_deviation: f64,
    /// `3·stderr + discretization_tol`.
    pub y0_allowance: f64,
    pub y0_consistent: bool,
}

/// Checks the sweep against the deterministic limit.
pub fn limit_consistency(result: &SweepResult, discretization_tol: f64) -> ConsistencyReport {
    let ok: Vec<&SweepRow> = result.rows.iter().filter(|r| r.failure.is_none()).collect();
    let z_monotone = ok.windows(2).all(|w| w[1].norm_z <= w[0].norm_z + w[0].norm_z_stderr.max(w[1].norm_z_stderr));
    let (y0_deviation, y0_allowance) = match ok.last() {
        Some(r) => ((r.y0 - result.limit[0]).abs(), 3.0 * r.y0_stderr + discretization_tol),
        None => (f64::NAN, f64::NAN),
    };
    ConsistencyReport { z_monotone, y0_deviation, y0_allowance, y0_consistent: y0_deviation <= y0_allowance }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CouplingCheck {
    pub var_common: f64,
    pub var_independent: f64,
    pub ratio: f64,
}

/// Variance of the gap difference between two `ε` values across `replicates`
/// seeds, with shared versus independent Brownian ensembles.
pub fn coupling_variance(cfg: &SweepConfig, eps_pair: (f64, f64), replicates: usize) -> Result<CouplingCheck> {
    cfg.validate()?;
    if replicates < 2 {
        return domain("at least two replicates are required");
    }
    let limit = solve_limit_ode(&cfg.model, &cfg.driver, &cfg.terminal, &cfg.grid, &cfg.x0)?;
    let d = cfg.model.dim_noise();
    let gap = |seed: u64, eps: f64| -> Result<f64> {
        let ens = Arc::new(PathEnsemble::sample(cfg.grid, cfg.n_paths, d, seed)?);
        Ok(measure(&solve_row(cfg, &ens, eps)?, &limit, cfg.p).gap)
    };
    let diffs = (0..replicates)
        .into_par_iter()
        .map(|r| {
            let base = cfg.seed.wrapping_add(2 * r as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
            let common = gap(base, eps_pair.0)? - gap(base, eps_pair.1)?;
            let indep = gap(base, eps_pair.0)? - gap(base ^ 0x5bd1_e995, eps_pair.1)?;
            Ok((common, indep))
        })
        .collect::<Result<Vec<_>>>()?;
    let var = |v: Vec<f64>| {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    };
    let var_common = var(diffs.iter().map(|d| d.0).collect());
    let var_independent = var(diffs.iter().map(|d| d.1).collect());
    Ok(CouplingCheck { var_common, var_independent, ratio: var_independent / var_common })
}
